//! Prepared-corpus directory: vocabularies, sequences, cached evaluation
//! negatives, and a manifest. Writes are deterministic byte-for-byte given
//! the same records and seed.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Streams;

use super::build::{
    build_triple_sequences, leave_one_out_split, BuildOptions, BuildStats, IdSpace, LooSplit,
    MixedEvent, SeqEvent, TripleSequence, Vocabulary,
};
use super::records::{Domain, InteractionRecord};
use super::sample::sample_negatives;

#[derive(Clone, Debug)]
pub struct CorpusManifest {
    pub seed: u64,
    pub max_len: usize,
    pub min_target: usize,
    pub min_source_before_valid: usize,
    pub n_eval_negatives: usize,
    pub stats: BuildStats,
}

#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub manifest: CorpusManifest,
    pub vocab: Vocabulary,
    pub users: Vec<String>,
    pub triples: Vec<TripleSequence>,
    pub splits: Vec<LooSplit>,
    /// Cached per-user candidate negatives, one draw per (seed, user), so
    /// every model evaluates on identical candidate sets.
    pub negatives_valid: Vec<Vec<u32>>,
    pub negatives_test: Vec<Vec<u32>>,
}

impl PreparedCorpus {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }
}

/// Build triple sequences, split each user, and cache evaluation
/// negatives drawn from the target vocabulary minus the user's full
/// target history.
pub fn prepare_corpus(
    records: &[InteractionRecord],
    opts: BuildOptions,
    n_eval_negatives: usize,
    streams: &Streams,
) -> Result<PreparedCorpus> {
    let built = build_triple_sequences(records, opts);
    let mut splits = Vec::with_capacity(built.triples.len());
    for t in &built.triples {
        splits.push(leave_one_out_split(t)?);
    }
    let vocab_size = built.vocab.target.size();
    let mut negatives_valid = Vec::with_capacity(built.triples.len());
    let mut negatives_test = Vec::with_capacity(built.triples.len());
    for t in &built.triples {
        let history: HashSet<u32> = t.target.iter().map(|e| e.item).collect();
        let mut rng = streams.keyed("negatives-valid", &[t.user as u64]);
        negatives_valid.push(sample_negatives(n_eval_negatives, vocab_size, &history, &mut rng)?);
        let mut rng = streams.keyed("negatives-test", &[t.user as u64]);
        negatives_test.push(sample_negatives(n_eval_negatives, vocab_size, &history, &mut rng)?);
    }
    Ok(PreparedCorpus {
        manifest: CorpusManifest {
            seed: streams.root(),
            max_len: opts.max_len,
            min_target: opts.min_target,
            min_source_before_valid: opts.min_source_before_valid,
            n_eval_negatives,
            stats: built.stats,
        },
        vocab: built.vocab,
        users: built.users,
        triples: built.triples,
        splits,
        negatives_valid,
        negatives_test,
    })
}

pub fn save_corpus(corpus: &PreparedCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = &corpus.manifest;
    let mut manifest = String::new();
    manifest.push_str(&format!("seed\t{}\n", m.seed));
    manifest.push_str(&format!("max_len\t{}\n", m.max_len));
    manifest.push_str(&format!("min_target\t{}\n", m.min_target));
    manifest.push_str(&format!("min_source_before_valid\t{}\n", m.min_source_before_valid));
    manifest.push_str(&format!("n_eval_negatives\t{}\n", m.n_eval_negatives));
    manifest.push_str(&format!("users_seen\t{}\n", m.stats.users_seen));
    manifest.push_str(&format!("users_kept\t{}\n", m.stats.users_kept));
    manifest.push_str(&format!("dropped_missing_domain\t{}\n", m.stats.dropped_missing_domain));
    manifest.push_str(&format!("dropped_short_target\t{}\n", m.stats.dropped_short_target));
    manifest.push_str(&format!(
        "dropped_no_source_history\t{}\n",
        m.stats.dropped_no_source_history
    ));
    manifest.push_str(&format!("records_source\t{}\n", m.stats.records_source));
    manifest.push_str(&format!("records_target\t{}\n", m.stats.records_target));
    fs::write(dir.join("manifest.tsv"), manifest)?;

    let mut users = String::new();
    for (i, raw) in corpus.users.iter().enumerate() {
        users.push_str(&format!("{i}\t{raw}\n"));
    }
    fs::write(dir.join("users.tsv"), users)?;

    let write_vocab = |name: &str, space: &IdSpace| -> Result<()> {
        let mut body = String::new();
        for (raw, idx) in space.entries() {
            body.push_str(&format!("{raw}\t{idx}\n"));
        }
        fs::write(dir.join(name), body)?;
        Ok(())
    };
    write_vocab("vocab_source.tsv", &corpus.vocab.source)?;
    write_vocab("vocab_target.tsv", &corpus.vocab.target)?;
    write_vocab("vocab_mixed.tsv", &corpus.vocab.mixed)?;

    let mut src = String::new();
    let mut tgt = String::new();
    let mut mix = String::new();
    for t in &corpus.triples {
        for e in &t.source {
            src.push_str(&format!("{}\t{}\t{}\n", t.user, e.ts, e.item));
        }
        for e in &t.target {
            tgt.push_str(&format!("{}\t{}\t{}\n", t.user, e.ts, e.item));
        }
        for e in &t.mixed {
            mix.push_str(&format!("{}\t{}\t{}\t{}\n", t.user, e.ts, e.domain.label(), e.item));
        }
    }
    fs::write(dir.join("seq_source.tsv"), src)?;
    fs::write(dir.join("seq_target.tsv"), tgt)?;
    fs::write(dir.join("seq_mixed.tsv"), mix)?;

    let write_negs = |name: &str, negs: &[Vec<u32>]| -> Result<()> {
        let mut f = fs::File::create(dir.join(name))?;
        for (user, ids) in negs.iter().enumerate() {
            let joined: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
            writeln!(f, "{user}\t{}", joined.join(","))?;
        }
        Ok(())
    };
    write_negs("negatives_valid.tsv", &corpus.negatives_valid)?;
    write_negs("negatives_test.tsv", &corpus.negatives_test)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<PreparedCorpus> {
    let manifest_body = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in manifest_body.lines() {
        if let Some((k, v)) = line.split_once('\t') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<u64> {
        kv.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("corpus manifest missing `{k}`")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("corpus manifest `{k}` not an integer")))
    };
    let manifest = CorpusManifest {
        seed: get("seed")?,
        max_len: get("max_len")? as usize,
        min_target: get("min_target")? as usize,
        min_source_before_valid: get("min_source_before_valid")? as usize,
        n_eval_negatives: get("n_eval_negatives")? as usize,
        stats: BuildStats {
            users_seen: get("users_seen")? as usize,
            users_kept: get("users_kept")? as usize,
            dropped_missing_domain: get("dropped_missing_domain")? as usize,
            dropped_short_target: get("dropped_short_target")? as usize,
            dropped_no_source_history: get("dropped_no_source_history")? as usize,
            records_source: get("records_source")? as usize,
            records_target: get("records_target")? as usize,
        },
    };

    let users: Vec<String> = read_lines(dir, "users.tsv")?
        .iter()
        .map(|l| l.split_once('\t').map(|(_, raw)| raw.to_string()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Checkpoint("malformed users.tsv".into()))?;

    let read_vocab = |name: &str| -> Result<IdSpace> {
        let mut pairs = Vec::new();
        for line in read_lines(dir, name)? {
            let (raw, idx) = line
                .split_once('\t')
                .ok_or_else(|| Error::Checkpoint(format!("malformed {name}")))?;
            let idx: u32 = idx
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad index in {name}")))?;
            pairs.push((raw.to_string(), idx));
        }
        IdSpace::from_pairs(pairs)
    };
    let source = read_vocab("vocab_source.tsv")?;
    let target = read_vocab("vocab_target.tsv")?;
    let mixed = read_vocab("vocab_mixed.tsv")?;
    let mut target_to_mixed = vec![0u32; target.size()];
    for (raw, idx) in target.entries() {
        let key = format!("T:{raw}");
        target_to_mixed[idx as usize] = mixed
            .index_of(&key)
            .ok_or_else(|| Error::Checkpoint(format!("mixed vocabulary missing {key}")))?;
    }
    let vocab = Vocabulary { source, target, mixed, target_to_mixed };

    let n = users.len();
    let mut triples: Vec<TripleSequence> = (0..n)
        .map(|u| TripleSequence {
            user: u as u32,
            source: Vec::new(),
            target: Vec::new(),
            mixed: Vec::new(),
        })
        .collect();
    for line in read_lines(dir, "seq_source.tsv")? {
        let (user, ts, item) = parse3(&line, "seq_source.tsv")?;
        triples[user].source.push(SeqEvent { item, ts });
    }
    for line in read_lines(dir, "seq_target.tsv")? {
        let (user, ts, item) = parse3(&line, "seq_target.tsv")?;
        triples[user].target.push(SeqEvent { item, ts });
    }
    for line in read_lines(dir, "seq_mixed.tsv")? {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Checkpoint("malformed seq_mixed.tsv".into()));
        }
        let user: usize = parts[0].parse().map_err(|_| bad("seq_mixed.tsv"))?;
        let ts: i64 = parts[1].parse().map_err(|_| bad("seq_mixed.tsv"))?;
        let domain = Domain::parse(parts[2]).ok_or_else(|| bad("seq_mixed.tsv"))?;
        let item: u32 = parts[3].parse().map_err(|_| bad("seq_mixed.tsv"))?;
        triples[user].mixed.push(MixedEvent { item, domain, ts });
    }

    let mut splits = Vec::with_capacity(n);
    for t in &triples {
        splits.push(leave_one_out_split(t)?);
    }

    let read_negs = |name: &str| -> Result<Vec<Vec<u32>>> {
        let mut out = vec![Vec::new(); n];
        for line in read_lines(dir, name)? {
            let (user, ids) =
                line.split_once('\t').ok_or_else(|| bad("negatives file"))?;
            let user: usize = user.parse().map_err(|_| bad("negatives file"))?;
            out[user] = ids
                .split(',')
                .map(|s| s.parse::<u32>().map_err(|_| bad("negatives file")))
                .collect::<Result<_>>()?;
        }
        Ok(out)
    };
    let negatives_valid = read_negs("negatives_valid.tsv")?;
    let negatives_test = read_negs("negatives_test.tsv")?;

    Ok(PreparedCorpus {
        manifest,
        vocab,
        users,
        triples,
        splits,
        negatives_valid,
        negatives_test,
    })
}

fn bad(name: &str) -> Error {
    Error::Checkpoint(format!("malformed {name}"))
}

fn parse3(line: &str, name: &str) -> Result<(usize, i64, u32)> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != 3 {
        return Err(bad(name));
    }
    Ok((
        parts[0].parse().map_err(|_| bad(name))?,
        parts[1].parse().map_err(|_| bad(name))?,
        parts[2].parse().map_err(|_| bad(name))?,
    ))
}

fn read_lines(dir: &Path, name: &str) -> Result<Vec<String>> {
    let f = fs::File::open(dir.join(name))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}
