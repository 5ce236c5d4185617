//! Leave-one-out ranking evaluation: 1 positive against cached sampled
//! negatives, NDCG@k / HR@k / AUC, report rendering, and representation
//! export.

use std::io::Write;

use crate::corpus::PreparedCorpus;
use crate::error::{Error, Result};
use crate::model::{projected_reprs, score_candidates, Instance, TriCdrModel};

/// Rank of the positive among the candidates, 1-based, with pessimistic
/// tie handling: the positive places after every equal-scored negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub user: u32,
    pub rank: usize,
    pub ties: usize,
}

pub fn rank_from_scores(user: u32, pos: f64, negs: &[f64]) -> RankResult {
    let above = negs.iter().filter(|&&s| s > pos).count();
    let ties = negs.iter().filter(|&&s| s == pos).count();
    RankResult { user, rank: 1 + above + ties, ties }
}

/// NDCG with a single relevant item: 1/log2(rank+1) inside the cutoff,
/// else 0 (the ideal DCG is 1).
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Sampled AUC over the candidate set: fraction of negatives scored below
/// the positive, ties counted half.
pub fn auc_sampled(pos: f64, negs: &[f64]) -> f64 {
    let below = negs.iter().filter(|&&s| s < pos).count() as f64;
    let ties = negs.iter().filter(|&&s| s == pos).count() as f64;
    (below + 0.5 * ties) / negs.len() as f64
}

pub const REPORT_KS: [usize; 4] = [5, 10, 20, 50];

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub split: String,
    pub users: usize,
    pub ks: Vec<usize>,
    pub ndcg: Vec<f64>,
    pub hr: Vec<f64>,
    pub auc: f64,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricsReport {
    /// Human-readable key: value document.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("fingerprint: {}\n", self.fingerprint));
        out.push_str(&format!("seed: {}\n", self.seed));
        out.push_str(&format!("split: {}\n", self.split));
        out.push_str(&format!("users: {}\n", self.users));
        for (i, k) in self.ks.iter().enumerate() {
            out.push_str(&format!("ndcg@{k}: {:.9}\n", self.ndcg[i]));
        }
        for (i, k) in self.ks.iter().enumerate() {
            out.push_str(&format!("hr@{k}: {:.9}\n", self.hr[i]));
        }
        out.push_str(&format!("auc: {:.9}\n", self.auc));
        out.push_str("auc_protocol: sampled-candidates\n");
        out
    }

    /// Machine-readable single-line record (tab-separated).
    pub fn render_record(&self) -> String {
        let mut fields = vec![
            self.fingerprint.clone(),
            self.seed.to_string(),
            self.split.clone(),
            self.users.to_string(),
        ];
        for (i, k) in self.ks.iter().enumerate() {
            fields.push(format!("ndcg@{k}={:.9}", self.ndcg[i]));
        }
        for (i, k) in self.ks.iter().enumerate() {
            fields.push(format!("hr@{k}={:.9}", self.hr[i]));
        }
        fields.push(format!("auc={:.9}", self.auc));
        fields.join("\t")
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

impl EvalSplit {
    pub fn label(&self) -> &'static str {
        match self {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        }
    }
}

/// Model input for evaluating one user on a split: inputs are everything
/// strictly before the held-out item, negatives come from the prepared
/// cache so all models rank identical candidate sets.
pub fn eval_instance(corpus: &PreparedCorpus, user: usize, split: EvalSplit) -> Instance {
    let s = &corpus.splits[user];
    match split {
        EvalSplit::Valid => Instance {
            user: user as u32,
            source: s.train_source.iter().map(|e| e.item).collect(),
            target: s.train_target.iter().map(|e| e.item).collect(),
            mixed: s.train_mixed.iter().map(|e| e.item).collect(),
            positive: s.valid.item,
            negatives: corpus.negatives_valid[user].clone(),
        },
        EvalSplit::Test => Instance {
            user: user as u32,
            source: s.test_input_source.iter().map(|e| e.item).collect(),
            target: s.test_input_target.iter().map(|e| e.item).collect(),
            mixed: s.test_input_mixed.iter().map(|e| e.item).collect(),
            positive: s.test.item,
            negatives: corpus.negatives_test[user].clone(),
        },
    }
}

/// Rank every user's held-out item against its cached negatives and
/// average the metrics. Deterministic: users are visited in id order and
/// the model is read-only.
pub fn evaluate_model(
    model: &TriCdrModel,
    corpus: &PreparedCorpus,
    split: EvalSplit,
    fingerprint: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if corpus.n_users() == 0 {
        return Err(Error::Contract("evaluate on an empty split".into()));
    }
    let ks = REPORT_KS.to_vec();
    let mut ndcg_sum = vec![0.0; ks.len()];
    let mut hr_sum = vec![0.0; ks.len()];
    let mut auc_sum = 0.0;
    for user in 0..corpus.n_users() {
        let inst = eval_instance(corpus, user, split);
        check_candidates(&inst)?;
        let scores = score_candidates(model, &inst)?;
        let (pos, negs) = scores.split_first().expect("positive plus negatives");
        let rr = rank_from_scores(inst.user, *pos, negs);
        for (i, &k) in ks.iter().enumerate() {
            ndcg_sum[i] += ndcg_at_k(rr.rank, k);
            hr_sum[i] += hr_at_k(rr.rank, k);
        }
        auc_sum += auc_sampled(*pos, negs);
    }
    let n = corpus.n_users() as f64;
    Ok(MetricsReport {
        split: split.label().to_string(),
        users: corpus.n_users(),
        ks,
        ndcg: ndcg_sum.into_iter().map(|v| v / n).collect(),
        hr: hr_sum.into_iter().map(|v| v / n).collect(),
        auc: auc_sum / n,
        fingerprint: fingerprint.to_string(),
        seed,
    })
}

fn check_candidates(inst: &Instance) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(inst.negatives.len() + 1);
    seen.insert(inst.positive);
    for &n in &inst.negatives {
        if !seen.insert(n) {
            return Err(Error::Contract(format!(
                "duplicate candidate {n} for user {}",
                inst.user
            )));
        }
    }
    Ok(())
}

/// Write the projected training-view representations of every user, one
/// row per (user, domain) with 9 significant digits: enough for an exact
/// round-trip at the printed precision and for external t-SNE.
pub fn export_representations<W: Write>(
    model: &TriCdrModel,
    corpus: &PreparedCorpus,
    out: &mut W,
) -> Result<usize> {
    let mut rows = 0;
    for user in 0..corpus.n_users() {
        let inst = eval_instance(corpus, user, EvalSplit::Valid);
        let [ps, pt, pm] = projected_reprs(model, &inst)?;
        for (label, vec) in [("S", &ps), ("T", &pt), ("M", &pm)] {
            let mut line = format!("{user}\t{label}");
            for v in vec {
                line.push_str(&format!("\t{v:.9e}"));
            }
            writeln!(out, "{line}")?;
            rows += 1;
        }
    }
    Ok(rows)
}
