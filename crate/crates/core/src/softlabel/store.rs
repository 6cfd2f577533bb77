use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::SentencePair;

pub const STORE_VERSION: u32 = 1;

/// Content hashes of the artifacts a store was computed from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreProvenance {
    pub vocab_hash: String,
    pub teacher_hash: String,
    pub corpus_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub vocab_hash: String,
    pub teacher_hash: String,
    pub corpus_hash: String,
    pub pair_count: usize,
}

impl StoreHeader {
    pub fn new(k: usize, temperature: f64, provenance: StoreProvenance) -> Self {
        StoreHeader {
            version: STORE_VERSION,
            k,
            temperature,
            vocab_hash: provenance.vocab_hash,
            teacher_hash: provenance.teacher_hash,
            corpus_hash: provenance.corpus_hash,
            pair_count: 0,
        }
    }

    fn compatible(&self, other: &StoreHeader) -> Vec<String> {
        let mut diff = Vec::new();
        let mut check = |name: &str, a: String, b: String| {
            if a != b {
                diff.push(format!("{name}: {a} != {b}"));
            }
        };
        check(
            "version",
            self.version.to_string(),
            other.version.to_string(),
        );
        check("K", self.k.to_string(), other.k.to_string());
        check(
            "T",
            self.temperature.to_string(),
            other.temperature.to_string(),
        );
        check(
            "vocab_hash",
            self.vocab_hash.clone(),
            other.vocab_hash.clone(),
        );
        check(
            "teacher_hash",
            self.teacher_hash.clone(),
            other.teacher_hash.clone(),
        );
        check(
            "corpus_hash",
            self.corpus_hash.clone(),
            other.corpus_hash.clone(),
        );
        diff
    }
}

/// Top-K teacher distribution at target position `t` of pair `pair_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelRecord {
    pub pair_id: u32,
    pub t: u16,
    /// `(token id, probability)`, most probable first.
    pub entries: Vec<(u32, f32)>,
}

impl SoftLabelRecord {
    fn key(&self) -> (u32, u16) {
        (self.pair_id, self.t)
    }
}

/// Immutable, sorted collection of soft-label records plus the header that
/// ties it to a vocabulary, teacher and corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelStore {
    header: StoreHeader,
    records: Vec<SoftLabelRecord>,
    index: HashMap<u32, (usize, usize)>,
}

impl SoftLabelStore {
    /// Sorts the records by `(pair_id, t)` and fills in `pair_count`.
    /// Duplicate keys and records with the wrong width are integrity errors.
    pub fn new(mut header: StoreHeader, mut records: Vec<SoftLabelRecord>) -> Result<Self> {
        records.sort_by_key(SoftLabelRecord::key);
        let mut index: HashMap<u32, (usize, usize)> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.entries.len() != header.k {
                return Err(Error::Integrity(format!(
                    "record ({}, {}) has {} entries, header says K={}",
                    r.pair_id,
                    r.t,
                    r.entries.len(),
                    header.k
                )));
            }
            if i > 0 && records[i - 1].key() == r.key() {
                return Err(Error::Integrity(format!(
                    "duplicate record for pair {} position {}",
                    r.pair_id, r.t
                )));
            }
            index.entry(r.pair_id).or_insert((i, 0)).1 += 1;
        }
        header.pair_count = index.len();
        Ok(SoftLabelStore {
            header,
            records,
            index,
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn records(&self) -> &[SoftLabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All records of one pair, in position order.
    pub fn pair(&self, pair_id: u32) -> &[SoftLabelRecord] {
        match self.index.get(&pair_id) {
            Some(&(start, len)) => &self.records[start..start + len],
            None => &[],
        }
    }

    pub fn get(&self, pair_id: u32, t: usize) -> Option<&SoftLabelRecord> {
        let recs = self.pair(pair_id);
        recs.binary_search_by_key(&t, |r| r.t as usize)
            .ok()
            .map(|i| &recs[i])
    }

    /// Fails unless the store was computed from exactly these artifacts.
    pub fn check_provenance(&self, expected: &StoreProvenance) -> Result<()> {
        let mut diff = Vec::new();
        for (name, have, want) in [
            ("vocab_hash", &self.header.vocab_hash, &expected.vocab_hash),
            (
                "teacher_hash",
                &self.header.teacher_hash,
                &expected.teacher_hash,
            ),
            (
                "corpus_hash",
                &self.header.corpus_hash,
                &expected.corpus_hash,
            ),
        ] {
            if have != want {
                diff.push(format!("{name}: store has {have}, expected {want}"));
            }
        }
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity(format!(
                "soft-label store mismatch: {}",
                diff.join("; ")
            )))
        }
    }

    /// Verifies there is one record for every target position of every pair.
    pub fn check_coverage(&self, pairs: &[SentencePair]) -> Result<()> {
        for p in pairs {
            let recs = self.pair(p.pair_id);
            for t in 0..p.target.len() {
                if recs.get(t).map(|r| r.t as usize) != Some(t) {
                    return Err(Error::MissingSoftLabel {
                        pair_id: p.pair_id,
                        position: t,
                    });
                }
            }
        }
        Ok(())
    }

    /// Merges another shard into this store. Shards must share a header.
    pub fn append(&mut self, other: SoftLabelStore) -> Result<()> {
        let diff = self.header.compatible(&other.header);
        if !diff.is_empty() {
            return Err(Error::Integrity(format!(
                "cannot merge soft-label shards: {}",
                diff.join("; ")
            )));
        }
        let mut records = std::mem::take(&mut self.records);
        records.extend(other.records);
        *self = SoftLabelStore::new(self.header.clone(), records)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.records.len() * (6 + 8 * self.header.k));
        for r in &self.records {
            out.extend_from_slice(&r.pair_id.to_le_bytes());
            out.extend_from_slice(&r.t.to_le_bytes());
            for &(id, p) in &r.entries {
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: StoreHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != STORE_VERSION {
            return Err(Error::Integrity(format!(
                "{}: store version {} is not supported (expected {STORE_VERSION})",
                path.display(),
                header.version
            )));
        }
        let width = 6 + 8 * header.k;
        let body = &bytes[nl + 1..];
        if body.len() % width != 0 {
            return Err(bad(format!(
                "record section of {} bytes is not a multiple of {width}",
                body.len()
            )));
        }
        let u32_at = |b: &[u8], i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let records = body
            .chunks_exact(width)
            .map(|rec| SoftLabelRecord {
                pair_id: u32_at(rec, 0),
                t: u16::from_le_bytes([rec[4], rec[5]]),
                entries: (0..header.k)
                    .map(|j| {
                        let o = 6 + 8 * j;
                        (u32_at(rec, o), f32::from_bits(u32_at(rec, o + 4)))
                    })
                    .collect(),
            })
            .collect();
        let claimed = header.pair_count;
        let store = SoftLabelStore::new(header, records)?;
        if store.header.pair_count != claimed {
            return Err(Error::Integrity(format!(
                "{}: header claims {claimed} pairs, records cover {}",
                path.display(),
                store.header.pair_count
            )));
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Path-free variant of [`SoftLabelStore::from_bytes`].
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes(bytes, &PathBuf::from("<memory>"))
    }
}
