use std::collections::HashMap;

use super::special::{self, BOS, EOS, PAD, UNK};
use super::TextError;
use crate::hashing::sha256_hex;

const CONTINUATION: &str = "##";

/// Bijection between tokens and ids. Ids `0..7` are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds from whitespace-tokenized sentences. Tokens below `min_freq` are
    /// dropped; the `max_size` most frequent remain, ties broken lexicographically.
    pub fn build<'a, I>(corpus: I, min_freq: usize, max_size: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::build_inner(corpus, min_freq, max_size, false)
    }

    /// Like [`Vocab::build`], additionally adding every observed character in
    /// word-initial (`c`) and continuation (`##c`) form for character fallback.
    pub fn build_with_chars<'a, I>(
        corpus: I,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::build_inner(corpus, min_freq, max_size, true)
    }

    fn build_inner<'a, I>(
        corpus: I,
        min_freq: usize,
        max_size: usize,
        chars: bool,
    ) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut seen_chars = std::collections::BTreeSet::new();
        let mut any = false;
        for line in corpus {
            for word in line.split_whitespace() {
                any = true;
                *freq.entry(word).or_default() += 1;
                if chars {
                    seen_chars.extend(word.chars());
                }
            }
        }
        if !any {
            return Err(TextError::EmptyCorpus);
        }
        let mut entries: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(w, n)| *n >= min_freq.max(1) && !special::RESERVED.contains(w))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        entries.truncate(max_size);
        let mut tokens: Vec<String> = entries.into_iter().map(|(w, _)| w.to_string()).collect();
        if chars {
            for c in seen_chars {
                tokens.push(c.to_string());
                tokens.push(format!("{CONTINUATION}{c}"));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Vocabulary from non-reserved tokens in id order; duplicates keep their first id.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = special::RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len() as u32);
                all.push(t);
            }
        }
        Vocab { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of `token`, or UNK.
    pub fn lookup(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    /// One non-reserved token per line; line `i` has id `7 + i`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[special::COUNT as usize..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, TextError> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.split_whitespace().count() != 1 || line.trim() != line {
                return Err(TextError::VocabFormat(format!("line {}: `{line}`", i + 1)));
            }
            tokens.push(line.to_string());
        }
        let v = Self::from_tokens(tokens.iter().cloned());
        if v.len() != tokens.len() + special::COUNT as usize {
            return Err(TextError::VocabFormat("duplicate or reserved token".into()));
        }
        Ok(v)
    }

    /// Content hash of the vocabulary file.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }
}

/// Text to id sequences and back.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
}

/// Whitespace pre-tokenization with optional character fallback for unknown words.
#[derive(Clone, Copy, Debug)]
pub struct WhitespaceTokenizer<'v> {
    pub vocab: &'v Vocab,
    pub char_fallback: bool,
}

impl<'v> WhitespaceTokenizer<'v> {
    pub fn new(vocab: &'v Vocab) -> Self {
        WhitespaceTokenizer {
            vocab,
            char_fallback: false,
        }
    }

    pub fn with_char_fallback(vocab: &'v Vocab) -> Self {
        WhitespaceTokenizer {
            vocab,
            char_fallback: true,
        }
    }
}

impl Tokenizer for WhitespaceTokenizer<'_> {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.vocab.id(word) {
                Some(id) if !special::is_reserved(id) => out.push(id),
                _ if self.char_fallback => {
                    for (i, c) in word.chars().enumerate() {
                        let piece = if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        };
                        out.push(self.vocab.lookup(&piece));
                    }
                }
                _ => out.push(UNK),
            }
        }
        out
    }

    fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self
                .vocab
                .token(id)
                .unwrap_or(special::RESERVED[UNK as usize]);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if self.char_fallback && !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}
