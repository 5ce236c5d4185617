//! Synthetic cross-domain interaction generator.
//!
//! Every user carries a latent preference vector per domain; the two
//! domain vectors share a common component with weight `rho`, so `rho`
//! dials the transferable signal from none (0) to maximal (1). Items get
//! latent vectors per domain, and each user's behaviors are a
//! Gumbel-top-k sample (distinct items, preference-weighted) with random
//! interleaved timestamps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

use super::records::{Domain, InteractionRecord};

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items_source: usize,
    pub n_items_target: usize,
    /// Mean behaviors per user and domain; actual lengths jitter ±25%.
    pub source_len: usize,
    pub target_len: usize,
    pub latent_dim: usize,
    /// Cross-domain preference correlation in [0, 1].
    pub rho: f64,
    /// Softmax sharpness of item choice; higher = more preference-driven.
    pub affinity_sharpness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_items_source: 300,
            n_items_target: 300,
            source_len: 14,
            target_len: 8,
            latent_dim: 8,
            rho: 0.8,
            affinity_sharpness: 6.0,
        }
    }
}

pub fn generate_synthetic(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<InteractionRecord>> {
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(Error::Config {
            key: "synth_rho".into(),
            msg: format!("correlation must lie in [0, 1], got {}", cfg.rho),
        });
    }
    if cfg.target_len < 4 || cfg.source_len < 1 {
        return Err(Error::Config {
            key: "synth_target_len".into(),
            msg: "need source_len >= 1 and target_len >= 4 to survive filtering".into(),
        });
    }
    let k = cfg.latent_dim;
    let scale = 1.0 / (k as f64).sqrt();
    let mut latents = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(rng);
                        v * scale
                    })
                    .collect()
            })
            .collect()
    };
    let items_s = latents(cfg.n_items_source);
    let items_t = latents(cfg.n_items_target);

    let mut records = Vec::new();
    for u in 0..cfg.n_users {
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        let blend = |rng: &mut ChaCha8Rng, z: &[f64]| -> Vec<f64> {
            let noise = (1.0 - cfg.rho * cfg.rho).sqrt();
            z.iter()
                .map(|&zi| {
                    let e: f64 = StandardNormal.sample(rng);
                    cfg.rho * zi + noise * e
                })
                .collect()
        };
        let pref_s = blend(rng, &z);
        let pref_t = blend(rng, &z);

        let jitter = |rng: &mut ChaCha8Rng, mean: usize, min: usize| -> usize {
            let lo = (mean * 3 / 4).max(min);
            let hi = (mean * 5 / 4).max(lo + 1);
            rng.random_range(lo..=hi)
        };
        let len_s = jitter(rng, cfg.source_len, 1).min(cfg.n_items_source);
        let len_t = jitter(rng, cfg.target_len, 4).min(cfg.n_items_target);

        let picks_s = gumbel_top_k(&pref_s, &items_s, cfg.affinity_sharpness, len_s, rng);
        let picks_t = gumbel_top_k(&pref_t, &items_t, cfg.affinity_sharpness, len_t, rng);

        // Distinct timestamps, randomly interleaved across domains.
        let total = len_s + len_t;
        let mut times = distinct_times(total, rng);
        times.sort_unstable();
        let mut labels: Vec<Domain> = std::iter::repeat(Domain::Source)
            .take(len_s)
            .chain(std::iter::repeat(Domain::Target).take(len_t))
            .collect();
        labels.shuffle(rng);

        let user = format!("u{u:05}");
        let (mut si, mut ti) = (0, 0);
        for (ts, domain) in times.into_iter().zip(labels) {
            let item = match domain {
                Domain::Source => {
                    si += 1;
                    format!("s{:05}", picks_s[si - 1])
                }
                Domain::Target => {
                    ti += 1;
                    format!("t{:05}", picks_t[ti - 1])
                }
            };
            records.push(InteractionRecord { user: user.clone(), item, timestamp: ts, domain });
        }
    }
    Ok(records)
}

/// Preference-weighted sample of `n` distinct item indices: add Gumbel
/// noise to each item's affinity and take the top n.
fn gumbel_top_k(
    pref: &[f64],
    items: &[Vec<f64>],
    sharpness: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = items
        .iter()
        .enumerate()
        .map(|(i, latent)| {
            let affinity: f64 = pref.iter().zip(latent).map(|(a, b)| a * b).sum();
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let gumbel = -(-u.ln()).ln();
            (sharpness * affinity + gumbel, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.truncate(n);
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn distinct_times(n: usize, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let t = rng.random_range(0..1_000_000i64);
        if seen.insert(t) {
            out.push(t);
        }
    }
    out
}
