//! Append-only chain file: each record is a 4-byte big-endian length
//! followed by the block's canonical bytes, parents before children.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::block::Block;
use super::tree::{ForkTree, InsertOutcome};
use crate::codec::Canonical;

#[derive(Debug, Error)]
pub enum ChainLoadError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("chain file is empty")]
    Empty,
    #[error("corrupt block at height {height} (record #{record}): {reason}")]
    Corrupt {
        record: usize,
        height: u64,
        reason: String,
    },
}

impl ChainLoadError {
    pub fn height(&self) -> Option<u64> {
        match self {
            ChainLoadError::Corrupt { height, .. } => Some(*height),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedChain {
    pub tree: ForkTree,
    pub blocks: Vec<Block>,
}

pub fn append_block<W: Write>(out: &mut W, block: &Block) -> io::Result<()> {
    let bytes = block.to_bytes();
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::other("block too large"))?;
    out.write_all(&len.to_be_bytes())?;
    out.write_all(&bytes)
}

pub fn write_chain(path: &Path, blocks: &[Block]) -> io::Result<()> {
    let mut f = io::BufWriter::new(File::create(path)?);
    for b in blocks {
        append_block(&mut f, b)?;
    }
    f.flush()
}

/// Opens `path` for appending further records.
pub fn open_for_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

pub fn read_chain_file(path: &Path, epoch_length: u64) -> Result<LoadedChain, ChainLoadError> {
    let bytes = std::fs::read(path)?;
    load_chain(&bytes, epoch_length)
}

/// Rebuilds the fork tree from chain-file bytes, validating every block.
pub fn load_chain(data: &[u8], epoch_length: u64) -> Result<LoadedChain, ChainLoadError> {
    if data.is_empty() {
        return Err(ChainLoadError::Empty);
    }
    let mut pos = 0usize;
    let mut record = 0usize;
    let mut blocks: Vec<Block> = Vec::new();
    let mut tree: Option<ForkTree> = None;
    let corrupt = |record: usize, height: u64, reason: String| ChainLoadError::Corrupt {
        record,
        height,
        reason,
    };

    while pos < data.len() {
        let guess = blocks.last().map_or(0, |b| b.header.height + 1);
        if data.len() - pos < 4 {
            return Err(corrupt(record, guess, "truncated length prefix".into()));
        }
        let len = u32::from_be_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if data.len() - pos < len {
            return Err(corrupt(
                record,
                guess,
                format!("record length {len} exceeds remaining file"),
            ));
        }
        let block = Block::from_bytes(&data[pos..pos + len])
            .map_err(|e| corrupt(record, guess, format!("undecodable block: {e}")))?;
        pos += len;

        let claimed = block.header.height;
        match tree.as_mut() {
            None => {
                if !block.is_genesis() {
                    return Err(corrupt(
                        record,
                        0,
                        "first record is not a genesis block".into(),
                    ));
                }
                block
                    .validate_structure()
                    .map_err(|e| corrupt(record, 0, e.to_string()))?;
                tree = Some(ForkTree::new(block.clone(), epoch_length));
            }
            Some(t) => {
                let height = t
                    .height_of(&block.header.prev_hash)
                    .map_or(claimed, |h| h + 1);
                match t.insert_block(block.clone()) {
                    Ok(InsertOutcome::Attached(_)) => {}
                    Ok(InsertOutcome::Pending) => {
                        return Err(corrupt(
                            record,
                            height,
                            "parent hash not found among earlier records".into(),
                        ))
                    }
                    Ok(InsertOutcome::Duplicate) => {
                        return Err(corrupt(record, height, "duplicate record".into()))
                    }
                    Err(e) => return Err(corrupt(record, height, e.to_string())),
                }
            }
        }
        blocks.push(block);
        record += 1;
    }
    let tree = tree.expect("at least one record");
    tree.check_invariants()
        .map_err(|e| corrupt(record.saturating_sub(1), 0, e))?;
    Ok(LoadedChain { tree, blocks })
}
