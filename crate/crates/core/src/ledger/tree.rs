use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{Block, BlockError};
use crate::crypto::Digest256;

/// An epoch-boundary block that is the subject of finality voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Checkpoint {
    pub block_hash: Digest256,
    pub epoch: u64,
    pub height: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InsertError {
    #[error("invalid block: {0}")]
    Invalid(#[from] BlockError),
    #[error("height {got} does not follow parent height {parent}")]
    BadHeight { parent: u64, got: u64 },
    #[error("a second genesis block was offered")]
    ForeignGenesis,
    #[error("block forks below the finalized height {finalized_height}")]
    BelowFinalized { finalized_height: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Attached; lists the block and any buffered descendants it released.
    Attached(Vec<Digest256>),
    /// Parent unknown; held until the parent arrives.
    Pending,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FinalizeError {
    #[error("checkpoint block {0} is not in the tree")]
    UnknownBlock(Digest256),
    #[error("checkpoint height {height} is not a multiple of epoch length {epoch_length}")]
    NotEpochBoundary { height: u64, epoch_length: u64 },
    #[error("safety violation: checkpoint {checkpoint} does not descend from finalized block {finalized}")]
    SafetyViolation {
        checkpoint: Digest256,
        finalized: Digest256,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FinalizeOutcome {
    pub pruned: Vec<Digest256>,
}

/// Every valid block a node has seen, keyed by hash.
///
/// Orphans wait in a pending buffer keyed by their missing parent and never
/// enter the tree proper. Ordered maps keep iteration deterministic.
#[derive(Debug, Clone)]
pub struct ForkTree {
    blocks: BTreeMap<Digest256, Block>,
    children: BTreeMap<Digest256, Vec<Digest256>>,
    heads: BTreeSet<Digest256>,
    cum_height: BTreeMap<Digest256, u64>,
    pending: BTreeMap<Digest256, Vec<Block>>,
    genesis: Digest256,
    finalized: Digest256,
    finalized_history: Vec<Checkpoint>,
    epoch_length: u64,
}

impl ForkTree {
    pub fn new(genesis: Block, epoch_length: u64) -> Self {
        assert!(epoch_length > 0, "epoch length must be positive");
        let h = genesis.hash();
        let mut blocks = BTreeMap::new();
        blocks.insert(h, genesis);
        Self {
            blocks,
            children: BTreeMap::new(),
            heads: BTreeSet::from([h]),
            cum_height: BTreeMap::from([(h, 0)]),
            pending: BTreeMap::new(),
            genesis: h,
            finalized: h,
            finalized_history: vec![Checkpoint {
                block_hash: h,
                epoch: 0,
                height: 0,
            }],
            epoch_length,
        }
    }

    pub fn genesis_hash(&self) -> Digest256 {
        self.genesis
    }

    pub fn epoch_length(&self) -> u64 {
        self.epoch_length
    }

    pub fn get(&self, h: &Digest256) -> Option<&Block> {
        self.blocks.get(h)
    }

    pub fn contains(&self, h: &Digest256) -> bool {
        self.blocks.contains_key(h)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }

    pub fn heads(&self) -> impl Iterator<Item = &Digest256> {
        self.heads.iter()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn height_of(&self, h: &Digest256) -> Option<u64> {
        self.cum_height.get(h).copied()
    }

    pub fn children_of(&self, h: &Digest256) -> &[Digest256] {
        self.children.get(h).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn finalized(&self) -> Digest256 {
        self.finalized
    }

    pub fn finalized_height(&self) -> u64 {
        self.cum_height[&self.finalized]
    }

    pub fn finalized_history(&self) -> &[Checkpoint] {
        &self.finalized_history
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&Digest256, &Block)> {
        self.blocks.iter()
    }

    /// Validates and attaches `block`, releasing any buffered descendants.
    pub fn insert_block(&mut self, block: Block) -> Result<InsertOutcome, InsertError> {
        let h = block.hash();
        if self.blocks.contains_key(&h) {
            return Ok(InsertOutcome::Duplicate);
        }
        if block.is_genesis() {
            return Err(InsertError::ForeignGenesis);
        }
        block.validate_structure()?;
        self.insert_validated(block)
    }

    /// Like [`ForkTree::insert_block`] for a block whose structure the caller
    /// has already checked.
    pub fn insert_validated(&mut self, block: Block) -> Result<InsertOutcome, InsertError> {
        let h = block.hash();
        if self.blocks.contains_key(&h) {
            return Ok(InsertOutcome::Duplicate);
        }
        if block.is_genesis() {
            return Err(InsertError::ForeignGenesis);
        }
        let parent = block.header.prev_hash;
        if !self.blocks.contains_key(&parent) {
            let waiting = self.pending.entry(parent).or_default();
            if !waiting.iter().any(|b| b.hash() == h) {
                waiting.push(block);
            }
            return Ok(InsertOutcome::Pending);
        }
        self.check_attachable(&block)?;
        let mut attached = Vec::new();
        let mut queue = vec![block];
        while let Some(b) = queue.pop() {
            let bh = b.hash();
            if self.blocks.contains_key(&bh) || self.check_attachable(&b).is_err() {
                continue;
            }
            self.attach(bh, b);
            attached.push(bh);
            if let Some(waiting) = self.pending.remove(&bh) {
                queue.extend(waiting);
            }
        }
        Ok(InsertOutcome::Attached(attached))
    }

    fn check_attachable(&self, block: &Block) -> Result<(), InsertError> {
        let parent_height = self.cum_height[&block.header.prev_hash];
        if block.header.height != parent_height + 1 {
            return Err(InsertError::BadHeight {
                parent: parent_height,
                got: block.header.height,
            });
        }
        let finalized_height = self.finalized_height();
        if parent_height < finalized_height {
            return Err(InsertError::BelowFinalized { finalized_height });
        }
        Ok(())
    }

    fn attach(&mut self, h: Digest256, block: Block) {
        let parent = block.header.prev_hash;
        let height = block.header.height;
        self.heads.remove(&parent);
        self.heads.insert(h);
        self.children.entry(parent).or_default().push(h);
        self.cum_height.insert(h, height);
        self.blocks.insert(h, block);
    }

    /// Head with maximal height; ties go to the smallest hash.
    pub fn longest_chain_head(&self) -> Digest256 {
        *self
            .heads
            .iter()
            .max_by(|a, b| {
                self.cum_height[*a]
                    .cmp(&self.cum_height[*b])
                    .then_with(|| b.cmp(a))
            })
            .expect("tree always holds genesis")
    }

    /// Ancestor of `h` at `height`, or `None` if `h` is unknown or lower.
    pub fn ancestor_at(&self, h: &Digest256, height: u64) -> Option<Digest256> {
        let mut cur = *h;
        let mut cur_height = self.height_of(&cur)?;
        if cur_height < height {
            return None;
        }
        while cur_height > height {
            cur = self.blocks[&cur].header.prev_hash;
            cur_height -= 1;
        }
        Some(cur)
    }

    pub fn is_ancestor(&self, ancestor: &Digest256, descendant: &Digest256) -> bool {
        match self.height_of(ancestor) {
            Some(height) => self.ancestor_at(descendant, height) == Some(*ancestor),
            None => false,
        }
    }

    /// Hashes from genesis to `tip` inclusive.
    pub fn chain_to(&self, tip: &Digest256) -> Vec<Digest256> {
        let mut out = Vec::new();
        let mut cur = Some(*tip);
        while let Some(h) = cur {
            let Some(b) = self.blocks.get(&h) else { break };
            out.push(h);
            cur = (!b.is_genesis()).then_some(b.header.prev_hash);
        }
        out.reverse();
        out
    }

    /// Advances the finalized pointer and prunes every branch that does not
    /// contain the checkpoint.
    pub fn finalize(&mut self, checkpoint: &Checkpoint) -> Result<FinalizeOutcome, FinalizeError> {
        let target = checkpoint.block_hash;
        let Some(height) = self.height_of(&target) else {
            return Err(FinalizeError::UnknownBlock(target));
        };
        if height % self.epoch_length != 0 {
            return Err(FinalizeError::NotEpochBoundary {
                height,
                epoch_length: self.epoch_length,
            });
        }
        if target == self.finalized {
            return Ok(FinalizeOutcome::default());
        }
        if !self.is_ancestor(&self.finalized, &target) {
            return Err(FinalizeError::SafetyViolation {
                checkpoint: target,
                finalized: self.finalized,
            });
        }
        let mut keep: BTreeSet<Digest256> = self.chain_to(&target).into_iter().collect();
        let mut stack = vec![target];
        while let Some(h) = stack.pop() {
            for k in self.children.get(&h).into_iter().flatten() {
                if keep.insert(*k) {
                    stack.push(*k);
                }
            }
        }
        let pruned: Vec<Digest256> = self
            .blocks
            .keys()
            .filter(|h| !keep.contains(h))
            .copied()
            .collect();
        for h in &pruned {
            self.blocks.remove(h);
            self.cum_height.remove(h);
            self.children.remove(h);
            self.heads.remove(h);
        }
        for kids in self.children.values_mut() {
            kids.retain(|k| keep.contains(k));
        }
        // Buffered orphans whose ancestry can no longer attach are dropped lazily
        // by check_attachable; pending entries keyed by pruned hashes go now.
        self.pending.retain(|parent, _| !pruned.contains(parent));
        self.finalized = target;
        self.finalized_history.push(Checkpoint {
            block_hash: target,
            epoch: checkpoint.epoch,
            height,
        });
        Ok(FinalizeOutcome { pruned })
    }

    /// Full scan of the structural invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (h, b) in &self.blocks {
            if b.hash() != *h {
                return Err(format!("block {} stored under wrong key", h.short()));
            }
            if b.is_genesis() {
                if *h != self.genesis {
                    return Err("second genesis".into());
                }
                continue;
            }
            let Some(parent_height) = self.height_of(&b.header.prev_hash) else {
                if self.is_ancestor(h, &self.finalized) || self.is_ancestor(&self.finalized, h) {
                    return Err(format!("block {} has no parent in tree", h.short()));
                }
                continue;
            };
            if parent_height + 1 != b.header.height || self.cum_height[h] != b.header.height {
                return Err(format!("height mismatch at {}", h.short()));
            }
        }
        for head in &self.heads {
            if !self.is_ancestor(&self.finalized, head) {
                return Err(format!(
                    "head {} does not descend from finalized block",
                    head.short()
                ));
            }
            if !self.children_of(head).is_empty() {
                return Err(format!("head {} has children", head.short()));
            }
        }
        let heights: Vec<u64> = self.finalized_history.iter().map(|c| c.height).collect();
        if heights.windows(2).any(|w| w[0] >= w[1]) {
            return Err("finalized heights not strictly increasing".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::ledger::{BlockTemplate, Transaction};

    fn child(parent: &Block, seed: u64, tag: u8) -> Block {
        let kp = KeyPair::from_seed(seed);
        Block::build(
            &kp,
            BlockTemplate {
                height: parent.header.height + 1,
                prev_hash: parent.hash(),
                slot: parent.header.slot + 1,
                ..Default::default()
            },
            vec![Transaction::new_signed(&kp, vec![tag], 0)],
        )
    }

    fn chain(from: &Block, len: usize, tag: u8) -> Vec<Block> {
        let mut out: Vec<Block> = Vec::new();
        for _ in 0..len {
            let parent = out.last().unwrap_or(from).clone();
            out.push(child(&parent, 1, tag));
        }
        out
    }

    #[test]
    fn child_advances_head_and_sibling_adds_one() {
        let g = Block::genesis(vec![]);
        let mut tree = ForkTree::new(g.clone(), 10);
        let a = child(&g, 1, 0);
        tree.insert_block(a.clone()).unwrap();
        assert_eq!(tree.head_count(), 1);
        assert_eq!(tree.longest_chain_head(), a.hash());
        tree.insert_block(child(&g, 2, 0)).unwrap();
        assert_eq!(tree.head_count(), 2);
        assert_eq!(tree.insert_block(a).unwrap(), InsertOutcome::Duplicate);
    }

    #[test]
    fn corrupted_block_leaves_tree_unchanged() {
        let g = Block::genesis(vec![]);
        let mut tree = ForkTree::new(g.clone(), 10);
        let mut bad = child(&g, 1, 0);
        bad.header.merkle_root = Digest256([1; 32]);
        let err = tree.insert_block(bad).unwrap_err();
        assert_eq!(err, InsertError::Invalid(BlockError::BadMerkleRoot));
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.pending_len(), 0);
    }

    #[test]
    fn orphans_wait_for_parent() {
        let g = Block::genesis(vec![]);
        let c = chain(&g, 3, 0);
        let mut tree = ForkTree::new(g, 10);
        assert_eq!(
            tree.insert_block(c[2].clone()).unwrap(),
            InsertOutcome::Pending
        );
        assert_eq!(
            tree.insert_block(c[1].clone()).unwrap(),
            InsertOutcome::Pending
        );
        assert_eq!(tree.len(), 1);
        match tree.insert_block(c[0].clone()).unwrap() {
            InsertOutcome::Attached(hs) => assert_eq!(hs.len(), 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(tree.longest_chain_head(), c[2].hash());
        assert_eq!(tree.pending_len(), 0);
        tree.check_invariants().unwrap();
    }

    #[test]
    fn longest_branch_wins_and_ties_pick_smallest_hash() {
        let g = Block::genesis(vec![]);
        let short = chain(&g, 3, 1);
        let long = chain(&g, 5, 2);
        let mut tree = ForkTree::new(g.clone(), 10);
        for b in short.iter().chain(&long) {
            tree.insert_block(b.clone()).unwrap();
        }
        assert_eq!(tree.longest_chain_head(), long[4].hash());

        let twin_a = chain(&g, 2, 3);
        let twin_b = chain(&g, 2, 4);
        let expected = twin_a[1].hash().min(twin_b[1].hash());
        for order in [[&twin_a, &twin_b], [&twin_b, &twin_a]] {
            let mut t = ForkTree::new(g.clone(), 10);
            for b in order.iter().flat_map(|c| c.iter()) {
                t.insert_block(b.clone()).unwrap();
            }
            assert_eq!(t.longest_chain_head(), expected);
        }
    }

    #[test]
    fn finalize_prunes_losing_branch() {
        let g = Block::genesis(vec![]);
        let a = chain(&g, 2, 1);
        let b = chain(&g, 3, 2);
        let mut tree = ForkTree::new(g, 2);
        for blk in a.iter().chain(&b) {
            tree.insert_block(blk.clone()).unwrap();
        }
        let cp = Checkpoint {
            block_hash: a[1].hash(),
            epoch: 1,
            height: 2,
        };
        let out = tree.finalize(&cp).unwrap();
        let mut expected: Vec<Digest256> = b.iter().map(Block::hash).collect();
        expected.sort();
        let mut pruned = out.pruned;
        pruned.sort();
        assert_eq!(pruned, expected);
        assert_eq!(tree.longest_chain_head(), a[1].hash());
        tree.check_invariants().unwrap();

        // A block extending the pruned branch can no longer attach.
        let late = child(&b[2], 5, 9);
        assert_eq!(tree.insert_block(late).unwrap(), InsertOutcome::Pending);
    }

    #[test]
    fn finalize_sole_head_prunes_nothing() {
        let g = Block::genesis(vec![]);
        let c = chain(&g, 2, 0);
        let mut tree = ForkTree::new(g, 2);
        for b in &c {
            tree.insert_block(b.clone()).unwrap();
        }
        let out = tree
            .finalize(&Checkpoint {
                block_hash: c[1].hash(),
                epoch: 1,
                height: 2,
            })
            .unwrap();
        assert!(out.pruned.is_empty());
    }

    #[test]
    fn finalizing_a_non_descendant_is_a_safety_violation() {
        let g = Block::genesis(vec![]);
        let a = chain(&g, 2, 1);
        let b = chain(&g, 4, 2);
        let mut tree = ForkTree::new(g, 2);
        for blk in a.iter().chain(&b) {
            tree.insert_block(blk.clone()).unwrap();
        }
        tree.finalize(&Checkpoint {
            block_hash: b[3].hash(),
            epoch: 2,
            height: 4,
        })
        .unwrap();
        assert!(matches!(
            tree.finalize(&Checkpoint {
                block_hash: b[1].hash(),
                epoch: 1,
                height: 2
            }),
            Err(FinalizeError::SafetyViolation { .. })
        ));
        assert!(matches!(
            tree.finalize(&Checkpoint {
                block_hash: a[1].hash(),
                epoch: 1,
                height: 2
            }),
            Err(FinalizeError::UnknownBlock(_))
        ));
    }

    #[test]
    fn checkpoint_must_sit_on_epoch_boundary() {
        let g = Block::genesis(vec![]);
        let c = chain(&g, 3, 0);
        let mut tree = ForkTree::new(g, 2);
        for b in &c {
            tree.insert_block(b.clone()).unwrap();
        }
        assert!(matches!(
            tree.finalize(&Checkpoint {
                block_hash: c[2].hash(),
                epoch: 1,
                height: 3
            }),
            Err(FinalizeError::NotEpochBoundary { .. })
        ));
    }
}
