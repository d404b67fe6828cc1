//! Ledger data model shared by every consensus engine: transactions,
//! blocks, Merkle roots, the fork tree with its fork choice and checkpoint
//! finalization, and the on-disk chain file.

mod block;
mod merkle;
mod store;
mod tree;
mod tx;

pub use block::{Block, BlockError, BlockHeader, BlockTemplate, HEADER_LEN};
pub use merkle::{merkle_root, MerkleError};
pub use store::{
    append_block, load_chain, open_for_append, read_chain_file, write_chain, ChainLoadError,
    LoadedChain,
};
pub use tree::{Checkpoint, FinalizeError, FinalizeOutcome, ForkTree, InsertError, InsertOutcome};
pub use tx::Transaction;

/// Default number of blocks between checkpoints.
pub const DEFAULT_EPOCH_LENGTH: u64 = 10;
