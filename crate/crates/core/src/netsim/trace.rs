//! Run traces. Exported as JSON lines, one event per line, with keys in a
//! fixed order: `seq, time, kind, node, from, to, msg_id, tag, payload_hash,
//! deliver_at, label, detail`. Absent keys are omitted.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{NodeId, SimTime};
use crate::crypto::{hash, Digest256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Deliver,
    Drop,
    Timer,
    Mark,
    Crash,
    Recover,
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub time: SimTime,
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deliver_at: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TraceRecord {
    pub(crate) fn new(seq: u64, time: SimTime, kind: TraceKind) -> Self {
        Self {
            seq,
            time,
            kind,
            node: None,
            from: None,
            to: None,
            msg_id: None,
            tag: None,
            payload_hash: None,
            deliver_at: None,
            label: None,
            detail: None,
        }
    }
}

/// How much of a run to keep. Marks, crashes and snapshots are always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    #[default]
    Full,
    MarksOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn marks<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.kind == TraceKind::Mark && r.label.as_deref() == Some(label))
    }

    pub fn sends(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.kind == TraceKind::Send)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_jsonl(data: &str) -> Result<Self, serde_json::Error> {
        let records = data
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    /// Digest of the exported bytes; equal digests mean identical traces.
    pub fn digest(&self) -> Digest256 {
        hash(&self.to_jsonl())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_keeps_key_order() {
        let mut r = TraceRecord::new(3, 10, TraceKind::Send);
        r.from = Some(1);
        r.to = Some(2);
        r.tag = Some(4);
        let t = Trace { records: vec![r] };
        let text = String::from_utf8(t.to_jsonl()).unwrap();
        assert_eq!(
            text,
            "{\"seq\":3,\"time\":10,\"kind\":\"send\",\"from\":1,\"to\":2,\"tag\":4}\n"
        );
        assert_eq!(Trace::from_jsonl(&text).unwrap(), t);
    }
}
