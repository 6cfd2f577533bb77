//! Vocabulary, tokenization, parallel-corpus ingestion and token-count batching.

mod batch;
mod corpus;
pub mod synthetic;
mod vocab;

pub use batch::{make_batches, make_batches_with_width, Batch, PaddedIds, DEFAULT_BUCKET_WIDTH};
pub use corpus::{corpus_hash, encode_corpus, ParallelText, SentencePair};
pub use vocab::{Tokenizer, Vocab, WhitespaceTokenizer};

use std::path::PathBuf;

use thiserror::Error;

/// Reserved token ids, fixed in declaration order.
pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const MASK: u32 = 3;
    pub const CLS: u32 = 4;
    pub const SEP: u32 = 5;
    pub const UNK: u32 = 6;
    pub const RESERVED: [&str; 7] = [
        "<pad>", "<bos>", "<eos>", "<mask>", "<cls>", "<sep>", "<unk>",
    ];
    pub const COUNT: u32 = RESERVED.len() as u32;

    pub fn is_reserved(id: u32) -> bool {
        id < COUNT
    }
}

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("source and target files are misaligned: {source_lines} vs {target_lines} lines")]
    Misaligned {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("pair {pair_id}: length {len} outside [1, {max}]")]
    Length {
        pair_id: u32,
        len: usize,
        max: usize,
    },
    #[error("pair {pair_id}: target length {len} exceeds token budget {budget}")]
    OverBudget {
        pair_id: u32,
        len: usize,
        budget: usize,
    },
    #[error("invalid vocabulary file: {0}")]
    VocabFormat(String),
}
