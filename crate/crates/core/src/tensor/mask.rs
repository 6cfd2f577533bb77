use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Bidirectional,
    Causal,
    PaddingOnly,
}

/// Which keys each query may attend to, as a `[query_len, key_len]` boolean matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    query_len: usize,
    key_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every query sees every key.
    pub fn bidirectional(query_len: usize, key_len: usize) -> Self {
        AttentionMask {
            kind: MaskKind::Bidirectional,
            query_len,
            key_len,
            allowed: vec![true; query_len * key_len],
        }
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(len: usize) -> Self {
        Self::prefix_causal(0, len)
    }

    /// Positions below `prefix` see only the prefix. Positions at or after it see
    /// the whole prefix plus every later position up to themselves.
    pub fn prefix_causal(prefix: usize, len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            let limit = if q < prefix { prefix } else { q + 1 };
            for k in 0..limit.min(len) {
                allowed[q * len + k] = true;
            }
        }
        AttentionMask {
            kind: MaskKind::Causal,
            query_len: len,
            key_len: len,
            allowed,
        }
    }

    /// Every query sees the keys flagged as real tokens, never padding.
    pub fn padding(query_len: usize, key_is_token: &[bool]) -> Self {
        let key_len = key_is_token.len();
        let mut allowed = Vec::with_capacity(query_len * key_len);
        for _ in 0..query_len {
            allowed.extend_from_slice(key_is_token);
        }
        AttentionMask {
            kind: MaskKind::PaddingOnly,
            query_len,
            key_len,
            allowed,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.key_len + key]
    }

    pub(crate) fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.key_len..(query + 1) * self.key_len]
    }
}

/// One attention block inside a ragged batch: rows `q_start..q_start+mask.query_len()`
/// of the query matrix attend to rows `k_start..k_start+mask.key_len()` of the keys.
#[derive(Clone, Debug)]
pub struct AttentionSegment {
    pub q_start: usize,
    pub k_start: usize,
    pub mask: AttentionMask,
}

/// Ragged batch layout for fused multi-head attention.
#[derive(Clone, Debug, Default)]
pub struct AttentionLayout {
    segments: Vec<AttentionSegment>,
}

impl AttentionLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, q_start: usize, k_start: usize, mask: AttentionMask) {
        self.segments.push(AttentionSegment {
            q_start,
            k_start,
            mask,
        });
    }

    /// Layout where each sequence attends to itself with the given mask.
    pub fn self_attention(masks: Vec<AttentionMask>) -> Self {
        let mut layout = Self::new();
        let mut start = 0;
        for mask in masks {
            let len = mask.query_len();
            layout.push(start, start, mask);
            start += len;
        }
        layout
    }

    pub fn segments(&self) -> &[AttentionSegment] {
        &self.segments
    }

    pub(crate) fn validate(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        for seg in &self.segments {
            if seg.q_start + seg.mask.query_len() > q_rows
                || seg.k_start + seg.mask.key_len() > k_rows
            {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    lhs: vec![seg.mask.query_len(), seg.mask.key_len()],
                    rhs: vec![q_rows, k_rows],
                });
            }
        }
        Ok(())
    }

    /// Total number of attention weights stored per head.
    pub(crate) fn weight_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.mask.query_len() * s.mask.key_len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_forbids_future() {
        let m = AttentionMask::causal(4);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(m.allows(q, k), k <= q);
            }
        }
    }

    #[test]
    fn prefix_causal_hides_suffix_from_prefix() {
        let m = AttentionMask::prefix_causal(2, 4);
        assert!(m.allows(0, 1));
        assert!(!m.allows(0, 2));
        assert!(m.allows(2, 2));
        assert!(!m.allows(2, 3));
        assert!(m.allows(3, 0));
    }

    #[test]
    fn padding_only_blocks_pad_keys() {
        let m = AttentionMask::padding(2, &[true, true, false]);
        assert_eq!(m.kind(), MaskKind::PaddingOnly);
        assert!(m.allows(1, 1));
        assert!(!m.allows(0, 2));
    }
}
