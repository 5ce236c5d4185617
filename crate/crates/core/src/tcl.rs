//! Triple contrastive learning: domain-specific projectors, in-batch
//! InfoNCE similarity terms, and the margin-triplet distinction term.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::optim::xavier_init;
use crate::params::{PId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Three independent single-layer affine projectors (d → d), one per
/// domain, applied before both contrastive terms.
#[derive(Clone, Debug)]
pub struct ProjectorIdx {
    pub source: (PId, PId),
    pub target: (PId, PId),
    pub mixed: (PId, PId),
}

impl ProjectorIdx {
    pub fn init(prefix: &str, d: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let mut one = |name: &str, rng: &mut ChaCha8Rng, params: &mut ParamSet| {
            (
                params.add(format!("{prefix}.{name}.w"), xavier_init(d, d, rng)),
                params.add(format!("{prefix}.{name}.b"), Tensor::zeros(vec![d])),
            )
        };
        ProjectorIdx {
            source: one("s", rng, params),
            target: one("t", rng, params),
            mixed: one("m", rng, params),
        }
    }
}

/// Weighted InfoNCE terms over the three domain pairs.
#[derive(Clone, Copy, Debug)]
pub struct CsmConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl CsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config {
                key: "tau".into(),
                msg: "temperature must be positive".into(),
            });
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config {
                key: "lambda1".into(),
                msg: "pair weights must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// Margin of the fine-grained distinction hinge.
#[derive(Clone, Copy, Debug)]
pub struct FdmConfig {
    pub margin: f64,
}

/// Apply one domain projector to a B×d matrix of sequence representations.
pub fn project(fwd: &mut Fwd, x: Var, proj: (PId, PId)) -> Result<Var> {
    let y = fwd.tape.matmul(x, fwd.p(proj.0))?;
    fwd.tape.add_row(y, fwd.p(proj.1))
}

/// In-batch InfoNCE with cosine similarity, one direction: anchors row i
/// against positives row i, denominated by all other rows j ≠ i of the
/// positive side only (the positive term itself is excluded, so single
/// terms can go negative).
///
/// Cosine bounds the scores by 1/τ, so the exponentials stay finite at
/// any τ ≥ 1e-3 without extra stabilization.
pub fn infonce(tape: &mut Tape, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let (b, _) = tape.value(anchors).dims2("infonce")?;
    if tape.value(anchors).shape() != tape.value(positives).shape() {
        return Err(Error::ShapeMismatch {
            op: "infonce",
            left: tape.value(anchors).shape().to_vec(),
            right: tape.value(positives).shape().to_vec(),
        });
    }
    if b < 2 {
        return Err(Error::Contract(
            "infonce needs a batch of at least 2 (denominator would be empty)".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Config { key: "tau".into(), msg: "temperature must be positive".into() });
    }
    let an = tape.row_normalize(anchors)?;
    let pn = tape.row_normalize(positives)?;
    let sims = tape.matmul_bt(an, pn)?;
    let scaled = tape.scale(sims, 1.0 / tau);
    let exps = tape.exp(scaled);
    let row_sums = tape.row_sum(exps)?;
    let diag_exp = tape.diag(exps)?;
    let denom = tape.sub(row_sums, diag_exp)?;
    let log_denom = tape.ln(denom)?;
    let diag_scaled = tape.diag(scaled)?;
    let per_anchor = tape.sub(log_denom, diag_scaled)?;
    Ok(tape.sum(per_anchor))
}

/// Coarse-grained similarity: λ1·CL(M,S) + λ2·CL(M,T) + λ3·CL(S,T), the
/// anchor being the first-listed domain of each pair. Pairs with zero
/// weight are skipped (their contribution is exactly zero).
pub fn csm_loss(
    tape: &mut Tape,
    proj_m: Var,
    proj_s: Var,
    proj_t: Var,
    cfg: &CsmConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut total: Option<Var> = None;
    for (lambda, anchor, positive) in [
        (cfg.lambda1, proj_m, proj_s),
        (cfg.lambda2, proj_m, proj_t),
        (cfg.lambda3, proj_s, proj_t),
    ] {
        if lambda == 0.0 {
            continue;
        }
        let cl = infonce(tape, anchor, positive, cfg.tau)?;
        let weighted = tape.scale(cl, lambda);
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Fine-grained distinction: Σ_u max{d(s̄ˢ,s̄ᵐ) − d(s̄ˢ,s̄ᵗ) + γ, 0} with
/// euclidean distances on the raw (unnormalized) projected vectors. The
/// hinge takes subgradient 0 at its kink.
pub fn fdm_loss(
    tape: &mut Tape,
    proj_s: Var,
    proj_m: Var,
    proj_t: Var,
    cfg: &FdmConfig,
) -> Result<Var> {
    let d_sm = tape.row_l2_dist(proj_s, proj_m)?;
    let d_st = tape.row_l2_dist(proj_s, proj_t)?;
    let gap = tape.sub(d_sm, d_st)?;
    let shifted = tape.add_const(gap, cfg.margin);
    let hinge = tape.relu(shifted);
    Ok(tape.sum(hinge))
}
