//! Triple-sequence construction and the leave-one-out split.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

use super::records::{Domain, InteractionRecord};

/// Three independent dense id spaces. Index 0 is the padding id in every
/// space; real items start at 1. The same raw item receives different
/// indices in different spaces, and mixed-space keys are domain-qualified
/// so a raw id reused across domains stays two distinct items.
#[derive(Clone, Debug, Default)]
pub struct Vocabulary {
    pub source: IdSpace,
    pub target: IdSpace,
    pub mixed: IdSpace,
    /// Dense target index -> dense mixed index of the same item (0 -> 0).
    pub target_to_mixed: Vec<u32>,
}

#[derive(Clone, Debug, Default)]
pub struct IdSpace {
    raw_to_idx: BTreeMap<String, u32>,
    idx_to_raw: Vec<String>,
}

impl IdSpace {
    fn from_sorted(raws: &BTreeSet<String>) -> Self {
        let mut raw_to_idx = BTreeMap::new();
        let mut idx_to_raw = vec!["<pad>".to_string()];
        for raw in raws {
            raw_to_idx.insert(raw.clone(), idx_to_raw.len() as u32);
            idx_to_raw.push(raw.clone());
        }
        IdSpace { raw_to_idx, idx_to_raw }
    }

    /// Rebuild from (raw, idx) pairs that must form a dense 1..n range.
    pub fn from_pairs(pairs: Vec<(String, u32)>) -> Result<Self> {
        let mut idx_to_raw = vec!["<pad>".to_string(); pairs.len() + 1];
        let mut raw_to_idx = BTreeMap::new();
        for (raw, idx) in pairs {
            let i = idx as usize;
            if idx == 0 || i >= idx_to_raw.len() {
                return Err(Error::Contract(format!("vocabulary index {idx} out of range")));
            }
            idx_to_raw[i] = raw.clone();
            if raw_to_idx.insert(raw, idx).is_some() {
                return Err(Error::Contract("duplicate raw id in vocabulary".into()));
            }
        }
        Ok(IdSpace { raw_to_idx, idx_to_raw })
    }

    pub fn index_of(&self, raw: &str) -> Option<u32> {
        self.raw_to_idx.get(raw).copied()
    }

    pub fn raw_of(&self, idx: u32) -> &str {
        &self.idx_to_raw[idx as usize]
    }

    /// Number of ids including the reserved pad index 0.
    pub fn size(&self) -> usize {
        self.idx_to_raw.len()
    }

    /// Number of real items (excluding pad).
    pub fn n_items(&self) -> usize {
        self.idx_to_raw.len() - 1
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u32)> {
        self.idx_to_raw.iter().enumerate().skip(1).map(|(i, raw)| (raw.as_str(), i as u32))
    }
}

fn mixed_key(domain: Domain, raw: &str) -> String {
    format!("{}:{}", domain.label(), raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqEvent {
    pub item: u32,
    pub ts: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixedEvent {
    pub item: u32,
    pub domain: Domain,
    pub ts: i64,
}

/// One user's source, target, and chronologically merged mixed behavior
/// sequences, in dense per-space ids. Each of the three sequences is
/// independently truncated to its most recent `max_len` events at build
/// time; the mixed cap applies after merging.
#[derive(Clone, Debug)]
pub struct TripleSequence {
    pub user: u32,
    pub source: Vec<SeqEvent>,
    pub target: Vec<SeqEvent>,
    pub mixed: Vec<MixedEvent>,
}

impl TripleSequence {
    pub fn p(&self) -> usize {
        self.source.len()
    }

    pub fn q(&self) -> usize {
        self.target.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub max_len: usize,
    /// Minimum target-domain behaviors (train/valid/test need three).
    pub min_target: usize,
    /// Minimum source behaviors strictly before the validation item's
    /// timestamp, so every evaluation input has source history.
    pub min_source_before_valid: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { max_len: 200, min_target: 3, min_source_before_valid: 1 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BuildStats {
    pub users_seen: usize,
    pub users_kept: usize,
    pub dropped_missing_domain: usize,
    pub dropped_short_target: usize,
    pub dropped_no_source_history: usize,
    pub records_source: usize,
    pub records_target: usize,
}

#[derive(Clone, Debug)]
pub struct Built {
    pub vocab: Vocabulary,
    /// Raw user ids, position = internal user index.
    pub users: Vec<String>,
    /// One triple sequence per kept user, aligned with `users`.
    pub triples: Vec<TripleSequence>,
    pub stats: BuildStats,
}

/// Group records per user, order each user's events chronologically
/// (ties: source before target, then by raw item id), filter users, and
/// build dense-id triple sequences.
pub fn build_triple_sequences(records: &[InteractionRecord], opts: BuildOptions) -> Built {
    let mut per_user: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        per_user.entry(&r.user).or_default().push(r);
    }

    let mut stats = BuildStats { users_seen: per_user.len(), ..Default::default() };

    // Filter users on full (untruncated) event lists.
    let mut kept: Vec<(&str, Vec<&InteractionRecord>)> = Vec::new();
    for (user, mut events) in per_user {
        events.sort_by(|a, b| {
            (a.timestamp, a.domain, &a.item).cmp(&(b.timestamp, b.domain, &b.item))
        });
        let q = events.iter().filter(|e| e.domain == Domain::Target).count();
        let p = events.len() - q;
        if p == 0 || q == 0 {
            stats.dropped_missing_domain += 1;
            continue;
        }
        if q < opts.min_target {
            stats.dropped_short_target += 1;
            continue;
        }
        let valid_ts = events
            .iter()
            .filter(|e| e.domain == Domain::Target)
            .nth_back(1)
            .map(|e| e.timestamp)
            .expect("q >= 2 checked above");
        let source_before = events
            .iter()
            .filter(|e| e.domain == Domain::Source && e.timestamp < valid_ts)
            .count();
        if source_before < opts.min_source_before_valid {
            stats.dropped_no_source_history += 1;
            continue;
        }
        kept.push((user, events));
    }
    stats.users_kept = kept.len();

    // Vocabularies over kept users only, assigned in sorted raw order.
    let mut source_raws = BTreeSet::new();
    let mut target_raws = BTreeSet::new();
    let mut mixed_raws = BTreeSet::new();
    for (_, events) in &kept {
        for e in events {
            match e.domain {
                Domain::Source => {
                    source_raws.insert(e.item.clone());
                }
                Domain::Target => {
                    target_raws.insert(e.item.clone());
                }
            }
            mixed_raws.insert(mixed_key(e.domain, &e.item));
        }
    }
    let source = IdSpace::from_sorted(&source_raws);
    let target = IdSpace::from_sorted(&target_raws);
    let mixed = IdSpace::from_sorted(&mixed_raws);
    let mut target_to_mixed = vec![0u32; target.size()];
    for (raw, idx) in target.entries() {
        target_to_mixed[idx as usize] =
            mixed.index_of(&mixed_key(Domain::Target, raw)).expect("target item in mixed space");
    }
    let vocab = Vocabulary { source, target, mixed, target_to_mixed };

    let mut users = Vec::with_capacity(kept.len());
    let mut triples = Vec::with_capacity(kept.len());
    for (user, events) in kept {
        let uid = users.len() as u32;
        users.push(user.to_string());
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut mix = Vec::with_capacity(events.len());
        for e in &events {
            match e.domain {
                Domain::Source => {
                    stats.records_source += 1;
                    src.push(SeqEvent {
                        item: vocab.source.index_of(&e.item).unwrap(),
                        ts: e.timestamp,
                    });
                }
                Domain::Target => {
                    stats.records_target += 1;
                    tgt.push(SeqEvent {
                        item: vocab.target.index_of(&e.item).unwrap(),
                        ts: e.timestamp,
                    });
                }
            }
            mix.push(MixedEvent {
                item: vocab.mixed.index_of(&mixed_key(e.domain, &e.item)).unwrap(),
                domain: e.domain,
                ts: e.timestamp,
            });
        }
        truncate_recent(&mut src, opts.max_len);
        truncate_recent(&mut tgt, opts.max_len);
        truncate_recent(&mut mix, opts.max_len);
        triples.push(TripleSequence { user: uid, source: src, target: tgt, mixed: mix });
    }

    Built { vocab, users, triples, stats }
}

fn truncate_recent<T>(v: &mut Vec<T>, max_len: usize) {
    if v.len() > max_len {
        v.drain(..v.len() - max_len);
    }
}

/// The leave-one-out views of one user: last target item for test,
/// penultimate for validation, everything earlier for training. Source
/// and mixed training views exclude all events at or after the
/// validation item's timestamp.
#[derive(Clone, Debug)]
pub struct LooSplit {
    pub test: SeqEvent,
    pub valid: SeqEvent,
    pub train_target: Vec<SeqEvent>,
    pub train_source: Vec<SeqEvent>,
    pub train_mixed: Vec<MixedEvent>,
    /// Target input when predicting the test item (train target + valid).
    pub test_input_target: Vec<SeqEvent>,
    pub test_input_source: Vec<SeqEvent>,
    pub test_input_mixed: Vec<MixedEvent>,
}

pub fn leave_one_out_split(ts: &TripleSequence) -> Result<LooSplit> {
    let q = ts.q();
    if q < 3 {
        return Err(Error::Contract(format!(
            "leave-one-out needs at least 3 target behaviors, user {} has {q}",
            ts.user
        )));
    }
    let test = ts.target[q - 1];
    let valid = ts.target[q - 2];
    let train_target = ts.target[..q - 2].to_vec();
    let train_source: Vec<SeqEvent> =
        ts.source.iter().copied().filter(|e| e.ts < valid.ts).collect();
    let train_mixed: Vec<MixedEvent> =
        ts.mixed.iter().copied().filter(|e| e.ts < valid.ts).collect();
    let test_input_target = ts.target[..q - 1].to_vec();
    let test_input_source: Vec<SeqEvent> =
        ts.source.iter().copied().filter(|e| e.ts < test.ts).collect();
    let test_input_mixed: Vec<MixedEvent> =
        ts.mixed.iter().copied().filter(|e| e.ts < test.ts).collect();
    Ok(LooSplit {
        test,
        valid,
        train_target,
        train_source,
        train_mixed,
        test_input_target,
        test_input_source,
        test_input_mixed,
    })
}
