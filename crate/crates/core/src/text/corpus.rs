use std::fs;
use std::path::{Path, PathBuf};

use super::special;
use super::{TextError, Tokenizer};
use crate::hashing::Sha256Writer;

/// A tokenized `(X, Y)` training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub pair_id: u32,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// Aligned raw source/target lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelText {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_lines(path: &Path) -> Result<Vec<String>, TextError> {
    let text = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

impl ParallelText {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Reads `<prefix>.src` and `<prefix>.tgt`.
    pub fn read(prefix: &Path) -> Result<Self, TextError> {
        let source = read_lines(&with_ext(prefix, "src"))?;
        let target = read_lines(&with_ext(prefix, "tgt"))?;
        if source.len() != target.len() {
            return Err(TextError::Misaligned {
                source_lines: source.len(),
                target_lines: target.len(),
            });
        }
        if source.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        Ok(ParallelText { source, target })
    }

    pub fn write(&self, prefix: &Path) -> Result<(), TextError> {
        for (ext, lines) in [("src", &self.source), ("tgt", &self.target)] {
            let path = with_ext(prefix, ext);
            let mut text = lines.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(|source| TextError::Io { path, source })?;
        }
        Ok(())
    }

    /// Every line of both sides, for vocabulary construction.
    pub fn all_lines(&self) -> impl Iterator<Item = &str> {
        self.source.iter().chain(&self.target).map(String::as_str)
    }
}

/// Tokenizes aligned lines into pairs numbered `0..`, enforcing `1 <= len <= max_len`
/// and that payloads carry no reserved id other than UNK.
pub fn encode_corpus(
    text: &ParallelText,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<Vec<SentencePair>, TextError> {
    if text.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    text.source
        .iter()
        .zip(&text.target)
        .enumerate()
        .map(|(i, (s, t))| {
            let pair_id = i as u32;
            let source = tokenizer.encode(s);
            let target = tokenizer.encode(t);
            for side in [&source, &target] {
                if side.is_empty() || side.len() > max_len {
                    return Err(TextError::Length {
                        pair_id,
                        len: side.len(),
                        max: max_len,
                    });
                }
                debug_assert!(side
                    .iter()
                    .all(|&id| !special::is_reserved(id) || id == special::UNK));
            }
            Ok(SentencePair {
                pair_id,
                source,
                target,
            })
        })
        .collect()
}

/// Content hash over pair ids and token ids.
pub fn corpus_hash(pairs: &[SentencePair]) -> String {
    let mut h = Sha256Writer::new();
    for p in pairs {
        h.update(&p.pair_id.to_le_bytes());
        for side in [&p.source, &p.target] {
            h.update(&(side.len() as u32).to_le_bytes());
            for id in side {
                h.update(&id.to_le_bytes());
            }
        }
    }
    h.finish_hex()
}
