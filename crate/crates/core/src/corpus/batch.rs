//! Left-padding and batch assembly.
//!
//! Real items occupy the rightmost positions so the final position always
//! holds the newest behavior; pad id 0 fills the left. Sequences longer
//! than `max_len` keep their most recent `max_len` items.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    /// Index of the last valid position (always `max_len - 1` for a
    /// non-empty sequence under left padding; recorded explicitly).
    pub last: usize,
}

pub fn pad_left(items: &[u32], max_len: usize) -> PaddedSeq {
    assert!(max_len >= 1, "max_len must be at least 1");
    assert!(!items.is_empty(), "cannot pad an empty sequence");
    let keep = items.len().min(max_len);
    let tail = &items[items.len() - keep..];
    let mut ids = vec![0u32; max_len - keep];
    ids.extend_from_slice(tail);
    let mut mask = vec![false; max_len - keep];
    mask.extend(std::iter::repeat(true).take(keep));
    PaddedSeq { ids, mask, last: max_len - 1 }
}

/// Recover the unpadded items (the masked-in suffix).
pub fn unpad(seq: &PaddedSeq) -> Vec<u32> {
    seq.ids.iter().zip(&seq.mask).filter(|(_, &m)| m).map(|(&id, _)| id).collect()
}

/// Padded id rows with masks for one optimization or evaluation step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub users: Vec<u32>,
    pub source: Vec<PaddedSeq>,
    pub target: Vec<PaddedSeq>,
    pub mixed: Vec<PaddedSeq>,
    pub positives: Vec<u32>,
    pub negatives: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}
