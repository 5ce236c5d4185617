//! Full model assembly: three encoders, cross-domain attention, the
//! contrastive terms, fusion into the user representation, dot-product
//! scoring, and the combined objective.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode_compact, EncoderConfig, EncoderIdx, Encoded};
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::optim::xavier_init;
use crate::params::{PId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tca::{tca_aggregate_compact, TcaIdx};
use crate::tcl::{csm_loss, fdm_loss, project, CsmConfig, FdmConfig, ProjectorIdx};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Which behavior sequences feed the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainSet {
    pub source: bool,
    pub target: bool,
    pub mixed: bool,
}

impl DomainSet {
    pub fn full() -> Self {
        DomainSet { source: true, target: true, mixed: true }
    }

    pub fn all(&self) -> bool {
        self.source && self.target && self.mixed
    }

    pub fn count(&self) -> usize {
        self.source as usize + self.target as usize + self.mixed as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut set = DomainSet { source: false, target: false, mixed: false };
        for part in s.to_ascii_lowercase().split('+') {
            match part.trim() {
                "s" => set.source = true,
                "t" => set.target = true,
                "m" => set.mixed = true,
                other => {
                    return Err(Error::Config {
                        key: "domains".into(),
                        msg: format!("unknown domain `{other}` (use combinations of s, t, m)"),
                    })
                }
            }
        }
        if set.count() == 0 {
            return Err(Error::Config {
                key: "domains".into(),
                msg: "at least one domain required".into(),
            });
        }
        Ok(set)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.source {
            parts.push("S");
        }
        if self.target {
            parts.push("T");
        }
        if self.mixed {
            parts.push("M");
        }
        parts.join("+")
    }
}

/// Component toggles. Attention and the contrastive terms only engage
/// when all three domains are present; plain domain subsets are the
/// concatenation baselines.
#[derive(Clone, Copy, Debug)]
pub struct ModelFlags {
    pub domains: DomainSet,
    pub tca: bool,
    pub csm: bool,
    pub fdm: bool,
}

impl ModelFlags {
    pub fn full() -> Self {
        ModelFlags { domains: DomainSet::full(), tca: true, csm: true, fdm: true }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub flags: ModelFlags,
    pub lambda_csm: f64,
    pub lambda_fdm: f64,
    pub csm: CsmConfig,
    pub gamma: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.lambda_csm < 0.0 || self.lambda_fdm < 0.0 {
            return Err(Error::Config {
                key: "lambda_csm".into(),
                msg: "loss weights must be nonnegative".into(),
            });
        }
        self.csm.validate()?;
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config {
                key: "gamma".into(),
                msg: "margin must be finite and nonnegative".into(),
            });
        }
        Ok(())
    }

    pub fn tca_active(&self) -> bool {
        self.flags.tca && self.flags.domains.all()
    }

    pub fn csm_active(&self) -> bool {
        self.flags.csm && self.flags.domains.all() && self.lambda_csm > 0.0
    }

    pub fn fdm_active(&self) -> bool {
        self.flags.fdm && self.flags.domains.all() && self.lambda_fdm > 0.0
    }
}

/// Two-layer aggregation of the concatenated sequence representations:
/// u = W2·LeakyReLU(W1·(s^M ‖ s^S ‖ s^T) + b1) + b2, output linear so u
/// spans all of R^d for dot-product scoring.
#[derive(Clone, Debug)]
pub struct FusionIdx {
    pub w1: PId,
    pub b1: PId,
    pub w2: PId,
    pub b2: PId,
}

impl FusionIdx {
    pub fn init(
        prefix: &str,
        in_width: usize,
        d: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FusionIdx {
            w1: params.add(format!("{prefix}.w1"), xavier_init(in_width, d, rng)),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(vec![d])),
            w2: params.add(format!("{prefix}.w2"), xavier_init(d, d, rng)),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(vec![d])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VocabSizes {
    pub source: usize,
    pub target: usize,
    pub mixed: usize,
}

#[derive(Clone, Debug)]
pub struct TriCdrIdx {
    pub enc_source: Option<EncoderIdx>,
    pub enc_target: Option<EncoderIdx>,
    pub enc_mixed: Option<EncoderIdx>,
    pub tca: Option<TcaIdx>,
    pub proj: Option<ProjectorIdx>,
    pub fusion: FusionIdx,
}

pub struct TriCdrModel {
    pub params: ParamSet,
    pub idx: TriCdrIdx,
    pub cfg: ModelConfig,
    pub vocab: VocabSizes,
    /// Dense target index -> mixed index, for scoring when the target
    /// encoder is absent (mixed-only utilization).
    pub target_to_mixed: Vec<u32>,
}

impl TriCdrModel {
    /// Allocate all parameters. Attention scorer and projectors exist
    /// whenever all three domains do, independent of the loss flags, so
    /// toggling a loss term never shifts initialization draws.
    pub fn init(
        cfg: ModelConfig,
        vocab: VocabSizes,
        target_to_mixed: Vec<u32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.embed_dim;
        let mut params = ParamSet::new();
        let flags = cfg.flags;
        let enc_source = flags
            .domains
            .source
            .then(|| EncoderIdx::init("enc_s", vocab.source, &cfg.encoder, &mut params, rng));
        let enc_target = flags
            .domains
            .target
            .then(|| EncoderIdx::init("enc_t", vocab.target, &cfg.encoder, &mut params, rng));
        let enc_mixed = flags
            .domains
            .mixed
            .then(|| EncoderIdx::init("enc_m", vocab.mixed, &cfg.encoder, &mut params, rng));
        let tca = flags.domains.all().then(|| TcaIdx::init("tca", d, &mut params, rng));
        let proj = flags.domains.all().then(|| ProjectorIdx::init("proj", d, &mut params, rng));
        let fusion = FusionIdx::init("fusion", flags.domains.count() * d, d, &mut params, rng);
        Ok(TriCdrModel {
            params,
            idx: TriCdrIdx { enc_source, enc_target, enc_mixed, tca, proj, fusion },
            cfg,
            vocab,
            target_to_mixed,
        })
    }

    /// Item table used for candidate scoring: the target table when
    /// present, otherwise the mixed table (ids mapped through
    /// `target_to_mixed`).
    fn scoring_table(&self) -> PId {
        match (&self.idx.enc_target, &self.idx.enc_mixed) {
            (Some(t), _) => t.item,
            (None, Some(m)) => m.item,
            _ => unreachable!("domain set validated non-empty with t or m"),
        }
    }

    fn map_candidate(&self, target_id: u32) -> usize {
        if self.idx.enc_target.is_some() {
            target_id as usize
        } else {
            self.target_to_mixed[target_id as usize] as usize
        }
    }
}

/// One next-item prediction task: per-domain input ids (oldest..newest,
/// already in each domain's dense space), the positive target item, and
/// sampled negatives (target space).
#[derive(Clone, Debug)]
pub struct Instance {
    pub user: u32,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub mixed: Vec<u32>,
    pub positive: u32,
    pub negatives: Vec<u32>,
}

/// Per-term loss values of one forward pass. The identity
/// total = l_ctr + λ_csm·l_csm + λ_fdm·l_fdm holds to 1e-9.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_ctr: f64,
    pub l_csm: f64,
    pub l_fdm: f64,
    pub total: f64,
    pub lambda_csm: f64,
    pub lambda_fdm: f64,
}

/// Raw and projected sequence representations of a batch, for export.
pub struct BatchReprs {
    pub raw_s: Option<Tensor>,
    pub raw_t: Option<Tensor>,
    pub raw_m: Option<Tensor>,
    pub proj_s: Option<Tensor>,
    pub proj_t: Option<Tensor>,
    pub proj_m: Option<Tensor>,
}

pub struct ForwardOutput<'a> {
    pub fwd: Fwd<'a>,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub reprs: Option<BatchReprs>,
}

/// u = MLP_f(s^M ‖ s^S ‖ s^T): works on single rows or whole batches.
pub fn fuse_user_repr(fwd: &mut Fwd, parts_mst: &[Var], fusion: &FusionIdx) -> Result<Var> {
    let cat = if parts_mst.len() == 1 {
        parts_mst[0]
    } else {
        fwd.tape.concat_cols(parts_mst)?
    };
    let h = fwd.tape.matmul(cat, fwd.p(fusion.w1))?;
    let h = fwd.tape.add_row(h, fwd.p(fusion.b1))?;
    let h = fwd.tape.leaky_relu(h, LEAKY_SLOPE);
    let h = fwd.tape.matmul(h, fwd.p(fusion.w2))?;
    fwd.tape.add_row(h, fwd.p(fusion.b2))
}

/// Dot-product logit of a user representation against one item embedding.
pub fn score_item(tape: &mut Tape, u: Var, item: Var) -> Result<Var> {
    let d = tape.value(u).numel();
    if tape.value(item).numel() != d {
        return Err(Error::ShapeMismatch {
            op: "score_item",
            left: tape.value(u).shape().to_vec(),
            right: tape.value(item).shape().to_vec(),
        });
    }
    let ur = tape.reshape(u, vec![1, d])?;
    let ir = tape.reshape(item, vec![1, d])?;
    let s = tape.matmul_bt(ur, ir)?;
    tape.reshape(s, vec![])
}

/// Binary cross-entropy over positive and negative logits.
pub fn ctr_loss(tape: &mut Tape, pos_logits: Var, neg_logits: Var) -> Result<Var> {
    let np = tape.value(pos_logits).numel();
    let nn = tape.value(neg_logits).numel();
    let p = tape.reshape(pos_logits, vec![np, 1])?;
    let n = tape.reshape(neg_logits, vec![nn, 1])?;
    let all = tape.concat_rows(&[p, n])?;
    let flat = tape.reshape(all, vec![np + nn])?;
    let mut labels = vec![1.0; np];
    labels.extend(std::iter::repeat(0.0).take(nn));
    tape.bce_with_logits(flat, &labels)
}

/// Combine the loss terms; rejects negative weights.
pub fn compose_total(
    tape: &mut Tape,
    l_ctr: Var,
    l_csm: Option<Var>,
    l_fdm: Option<Var>,
    lambda_csm: f64,
    lambda_fdm: f64,
) -> Result<(Var, LossBreakdown)> {
    if lambda_csm < 0.0 || lambda_fdm < 0.0 {
        return Err(Error::Config {
            key: "lambda_csm".into(),
            msg: "loss weights must be nonnegative".into(),
        });
    }
    let mut total = l_ctr;
    let mut csm_val = 0.0;
    let mut fdm_val = 0.0;
    if let Some(csm) = l_csm {
        csm_val = tape.value(csm).item();
        let w = tape.scale(csm, lambda_csm);
        total = tape.add(total, w)?;
    }
    if let Some(fdm) = l_fdm {
        fdm_val = tape.value(fdm).item();
        let w = tape.scale(fdm, lambda_fdm);
        total = tape.add(total, w)?;
    }
    let breakdown = LossBreakdown {
        l_ctr: tape.value(l_ctr).item(),
        l_csm: csm_val,
        l_fdm: fdm_val,
        total: tape.value(total).item(),
        lambda_csm,
        lambda_fdm,
    };
    debug_assert!(
        (breakdown.total
            - (breakdown.l_ctr
                + breakdown.lambda_csm * breakdown.l_csm
                + breakdown.lambda_fdm * breakdown.l_fdm))
            .abs()
            < 1e-9
    );
    Ok((total, breakdown))
}

struct UserReprs {
    s: Option<Var>,
    t: Option<Var>,
    m: Option<Var>,
}

fn truncated<'a>(ids: &'a [u32], max_len: usize) -> &'a [u32] {
    if ids.len() > max_len {
        &ids[ids.len() - max_len..]
    } else {
        ids
    }
}

fn encode_domain(
    fwd: &mut Fwd,
    ids: &[u32],
    enc: &EncoderIdx,
    cfg: &EncoderConfig,
    user: u32,
    domain: &str,
) -> Result<Encoded> {
    let ids = truncated(ids, cfg.max_len);
    if ids.is_empty() {
        return Err(Error::Contract(format!(
            "user {user}: empty {domain} input for an enabled domain"
        )));
    }
    let start = cfg.max_len - ids.len();
    encode_compact(fwd, ids, start, enc, cfg)
}

/// Encode one instance's enabled domains and aggregate each into a 1×d
/// sequence representation (attention when active, otherwise the last
/// hidden state).
fn user_reprs(fwd: &mut Fwd, model: &TriCdrModel, inst: &Instance) -> Result<UserReprs> {
    let cfg = &model.cfg;
    let enc_cfg = &cfg.encoder;
    let enc_s = model.idx.enc_source.as_ref();
    let enc_t = model.idx.enc_target.as_ref();
    let enc_m = model.idx.enc_mixed.as_ref();

    let encoded_s = enc_s
        .map(|e| encode_domain(fwd, &inst.source, e, enc_cfg, inst.user, "source"))
        .transpose()?;
    let encoded_t = enc_t
        .map(|e| encode_domain(fwd, &inst.target, e, enc_cfg, inst.user, "target"))
        .transpose()?;
    let encoded_m = enc_m
        .map(|e| encode_domain(fwd, &inst.mixed, e, enc_cfg, inst.user, "mixed"))
        .transpose()?;

    if cfg.tca_active() {
        let tca = model.idx.tca.as_ref().expect("tca params exist when active");
        let et = encoded_t.as_ref().unwrap();
        let em = encoded_m.as_ref().unwrap();
        let anchor_t = et.last_row(fwd)?;
        let anchor_m = em.last_row(fwd)?;
        let s = tca_aggregate_compact(
            fwd,
            anchor_t,
            anchor_m,
            encoded_s.as_ref().unwrap().hidden,
            tca,
        )?;
        let t = tca_aggregate_compact(fwd, anchor_t, anchor_m, et.hidden, tca)?;
        let m = tca_aggregate_compact(fwd, anchor_t, anchor_m, em.hidden, tca)?;
        Ok(UserReprs { s: Some(s), t: Some(t), m: Some(m) })
    } else {
        let last = |fwd: &mut Fwd, e: Option<Encoded>| -> Result<Option<Var>> {
            e.map(|e| e.last_row(fwd)).transpose()
        };
        Ok(UserReprs { s: last(fwd, encoded_s)?, t: last(fwd, encoded_t)?, m: last(fwd, encoded_m)? })
    }
}

/// Full forward pass over a batch: encode, aggregate, project, compute
/// the contrastive terms, fuse, score positives against sampled
/// negatives, and combine the objective.
pub fn forward_full<'a>(
    model: &'a TriCdrModel,
    instances: &[Instance],
    train: bool,
    dropout_rng: Option<ChaCha8Rng>,
    want_reprs: bool,
) -> Result<ForwardOutput<'a>> {
    if instances.is_empty() {
        return Err(Error::Contract("forward_full on an empty batch".into()));
    }
    let cfg = &model.cfg;
    let mut fwd = Fwd::new(&model.params, train);
    if let Some(rng) = dropout_rng {
        fwd = fwd.with_dropout(cfg.encoder.dropout, rng);
    }

    let mut rows_s = Vec::new();
    let mut rows_t = Vec::new();
    let mut rows_m = Vec::new();
    for inst in instances {
        let reprs = user_reprs(&mut fwd, model, inst)?;
        if let Some(v) = reprs.s {
            rows_s.push(v);
        }
        if let Some(v) = reprs.t {
            rows_t.push(v);
        }
        if let Some(v) = reprs.m {
            rows_m.push(v);
        }
    }
    let stack = |fwd: &mut Fwd, rows: &[Var]| -> Result<Option<Var>> {
        if rows.is_empty() {
            Ok(None)
        } else {
            Ok(Some(fwd.tape.concat_rows(rows)?))
        }
    };
    let mat_s = stack(&mut fwd, &rows_s)?;
    let mat_t = stack(&mut fwd, &rows_t)?;
    let mat_m = stack(&mut fwd, &rows_m)?;

    // Contrastive terms over projected representations.
    let mut l_csm = None;
    let mut l_fdm = None;
    let mut projected: Option<(Var, Var, Var)> = None;
    if cfg.csm_active() || cfg.fdm_active() || (want_reprs && model.idx.proj.is_some()) {
        let proj = model.idx.proj.as_ref().expect("projectors exist with all domains");
        let ps = project(&mut fwd, mat_s.unwrap(), proj.source)?;
        let pt = project(&mut fwd, mat_t.unwrap(), proj.target)?;
        let pm = project(&mut fwd, mat_m.unwrap(), proj.mixed)?;
        projected = Some((ps, pt, pm));
        if cfg.csm_active() {
            l_csm = Some(csm_loss(&mut fwd.tape, pm, ps, pt, &cfg.csm)?);
        }
        if cfg.fdm_active() {
            l_fdm = Some(fdm_loss(&mut fwd.tape, ps, pm, pt, &FdmConfig { margin: cfg.gamma })?);
        }
    }

    // Fusion in M, S, T order over the enabled domains.
    let mut parts = Vec::new();
    if let Some(m) = mat_m {
        parts.push(m);
    }
    if let Some(s) = mat_s {
        parts.push(s);
    }
    if let Some(t) = mat_t {
        parts.push(t);
    }
    let users_repr = fuse_user_repr(&mut fwd, &parts, &model.idx.fusion)?;

    // Per-user candidate scoring + binary cross-entropy.
    let table = fwd.p(model.scoring_table());
    let mut per_user = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let mut cand_idx = Vec::with_capacity(1 + inst.negatives.len());
        cand_idx.push(model.map_candidate(inst.positive));
        cand_idx.extend(inst.negatives.iter().map(|&id| model.map_candidate(id)));
        let cands = fwd.tape.gather_rows(table, &cand_idx)?;
        let u_row = fwd.tape.gather_rows(users_repr, &[i])?;
        let logits = fwd.tape.matmul_bt(cands, u_row)?;
        let flat = fwd.tape.reshape(logits, vec![cand_idx.len()])?;
        let mut labels = vec![0.0; cand_idx.len()];
        labels[0] = 1.0;
        let loss = fwd.tape.bce_with_logits(flat, &labels)?;
        let cell = fwd.tape.reshape(loss, vec![1, 1])?;
        per_user.push(cell);
    }
    let stacked = fwd.tape.concat_rows(&per_user)?;
    let l_ctr = fwd.tape.sum(stacked);

    let (total, breakdown) =
        compose_total(&mut fwd.tape, l_ctr, l_csm, l_fdm, cfg.lambda_csm, cfg.lambda_fdm)?;

    let reprs = if want_reprs {
        let tensor_of = |fwd: &Fwd, v: Option<Var>| v.map(|v| fwd.tape.value(v).clone());
        let (ps, pt, pm) = match projected {
            Some((ps, pt, pm)) => (Some(ps), Some(pt), Some(pm)),
            None => (None, None, None),
        };
        Some(BatchReprs {
            raw_s: tensor_of(&fwd, mat_s),
            raw_t: tensor_of(&fwd, mat_t),
            raw_m: tensor_of(&fwd, mat_m),
            proj_s: tensor_of(&fwd, ps),
            proj_t: tensor_of(&fwd, pt),
            proj_m: tensor_of(&fwd, pm),
        })
    } else {
        None
    };

    Ok(ForwardOutput { fwd, total, breakdown, reprs })
}

/// Inference-only candidate logits for one user: the positive followed by
/// the negatives, in order.
pub fn score_candidates(model: &TriCdrModel, inst: &Instance) -> Result<Vec<f64>> {
    let mut fwd = Fwd::new(&model.params, false);
    let reprs = user_reprs(&mut fwd, model, inst)?;
    let mut parts = Vec::new();
    if let Some(m) = reprs.m {
        parts.push(m);
    }
    if let Some(s) = reprs.s {
        parts.push(s);
    }
    if let Some(t) = reprs.t {
        parts.push(t);
    }
    let u = fuse_user_repr(&mut fwd, &parts, &model.idx.fusion)?;
    let mut cand_idx = Vec::with_capacity(1 + inst.negatives.len());
    cand_idx.push(model.map_candidate(inst.positive));
    cand_idx.extend(inst.negatives.iter().map(|&id| model.map_candidate(id)));
    let table = fwd.p(model.scoring_table());
    let cands = fwd.tape.gather_rows(table, &cand_idx)?;
    let logits = fwd.tape.matmul_bt(cands, u)?;
    Ok(fwd.tape.value(logits).data().to_vec())
}

/// Projected sequence representations (s̄^S, s̄^T, s̄^M) of one user, for
/// export and geometry checks. Requires all three domains.
pub fn projected_reprs(model: &TriCdrModel, inst: &Instance) -> Result<[Vec<f64>; 3]> {
    let proj = model.idx.proj.as_ref().ok_or_else(|| {
        Error::Contract("projected representations need all three domains".into())
    })?;
    let mut fwd = Fwd::new(&model.params, false);
    let reprs = user_reprs(&mut fwd, model, inst)?;
    let (s, t, m) = (reprs.s.unwrap(), reprs.t.unwrap(), reprs.m.unwrap());
    let ps = project(&mut fwd, s, proj.source)?;
    let pt = project(&mut fwd, t, proj.target)?;
    let pm = project(&mut fwd, m, proj.mixed)?;
    Ok([
        fwd.tape.value(ps).data().to_vec(),
        fwd.tape.value(pt).data().to_vec(),
        fwd.tape.value(pm).data().to_vec(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderVariant;
    use crate::rng::Streams;

    pub(crate) fn tiny_config(flags: ModelFlags) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 4,
                n_blocks: 1,
                n_heads: 1,
                max_len: 6,
                dropout: 0.0,
                variant: EncoderVariant::SelfAttention,
                residual_layernorm: false,
            },
            flags,
            lambda_csm: 0.5,
            lambda_fdm: 1.0,
            csm: CsmConfig { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, tau: 0.1 },
            gamma: 0.5,
        }
    }

    pub(crate) fn tiny_model(flags: ModelFlags, seed: u64) -> TriCdrModel {
        let vocab = VocabSizes { source: 8, target: 8, mixed: 15 };
        let target_to_mixed: Vec<u32> = (0..8).map(|i| if i == 0 { 0 } else { i + 7 }).collect();
        let mut rng = Streams::new(seed).stream("init");
        TriCdrModel::init(tiny_config(flags), vocab, target_to_mixed, &mut rng).unwrap()
    }

    pub(crate) fn tiny_batch() -> Vec<Instance> {
        vec![
            Instance {
                user: 0,
                source: vec![1, 3],
                target: vec![2, 4, 1],
                mixed: vec![1, 8, 3, 9, 10],
                positive: 5,
                negatives: vec![3, 6],
            },
            Instance {
                user: 1,
                source: vec![2],
                target: vec![5, 1],
                mixed: vec![2, 11, 12],
                positive: 3,
                negatives: vec![6, 7],
            },
        ]
    }

    #[test]
    fn fusion_zero_weights_zero_output() {
        let model = tiny_model(ModelFlags::full(), 1);
        let mut params = model.params.clone();
        let f = &model.idx.fusion;
        params.set(f.w1, Tensor::zeros(vec![12, 4]));
        params.set(f.w2, Tensor::zeros(vec![4, 4]));
        let mut fwd = Fwd::new(&params, false);
        let m = fwd.tape.leaf(Tensor::matrix(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap(), false);
        let s = fwd.tape.leaf(Tensor::matrix(&[vec![5.0, 6.0, 7.0, 8.0]]).unwrap(), false);
        let t = fwd.tape.leaf(Tensor::matrix(&[vec![9.0, 1.0, 2.0, 3.0]]).unwrap(), false);
        let u = fuse_user_repr(&mut fwd, &[m, s, t], f).unwrap();
        assert!(fwd.tape.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_identity_path_copies_mixed_repr() {
        // W1 picks the s^M block, W2 is the identity; positive inputs
        // pass LeakyReLU unchanged, so u = s^M.
        let model = tiny_model(ModelFlags::full(), 2);
        let mut params = model.params.clone();
        let f = &model.idx.fusion;
        let d = 4;
        let mut w1 = Tensor::zeros(vec![3 * d, d]);
        for j in 0..d {
            w1.data_mut()[j * d + j] = 1.0; // rows 0..d are the M block
        }
        params.set(f.w1, w1);
        let mut w2 = Tensor::zeros(vec![d, d]);
        for j in 0..d {
            w2.data_mut()[j * d + j] = 1.0;
        }
        params.set(f.w2, w2);
        let mut fwd = Fwd::new(&params, false);
        let m = fwd.tape.leaf(Tensor::matrix(&[vec![0.5, 1.5, 2.5, 3.5]]).unwrap(), false);
        let s = fwd.tape.leaf(Tensor::matrix(&[vec![9.0, 9.0, 9.0, 9.0]]).unwrap(), false);
        let t = fwd.tape.leaf(Tensor::matrix(&[vec![7.0, 7.0, 7.0, 7.0]]).unwrap(), false);
        let u = fuse_user_repr(&mut fwd, &[m, s, t], f).unwrap();
        assert_eq!(fwd.tape.value(u).data(), &[0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn score_item_examples() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::vector(&[1.0, 2.0]), false);
        let i = tape.leaf(Tensor::vector(&[3.0, 4.0]), false);
        let s = score_item(&mut tape, u, i).unwrap();
        assert_eq!(tape.value(s).item(), 11.0);

        let a = tape.leaf(Tensor::vector(&[1.0, 0.0]), false);
        let b = tape.leaf(Tensor::vector(&[0.0, 5.0]), false);
        let s = score_item(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn scaling_u_preserves_candidate_order() {
        let mut tape = Tape::new();
        let u = Tensor::vector(&[0.4, -1.2, 0.7]);
        let cands =
            Tensor::matrix(&[vec![1.0, 0.0, 0.5], vec![-0.3, 0.8, 0.2], vec![0.6, 0.6, -0.9]])
                .unwrap();
        let uv = tape.leaf(u.clone(), false);
        let u2 = tape.scale(uv, 2.0);
        let c = tape.leaf(cands, false);
        let ur = tape.reshape(uv, vec![1, 3]).unwrap();
        let u2r = tape.reshape(u2, vec![1, 3]).unwrap();
        let l1 = tape.matmul_bt(c, ur).unwrap();
        let l2 = tape.matmul_bt(c, u2r).unwrap();
        let order = |xs: &[f64]| {
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap());
            idx
        };
        assert_eq!(order(tape.value(l1).data()), order(tape.value(l2).data()));
    }

    #[test]
    fn ctr_loss_hand_value_and_gradient() {
        let mut tape = Tape::new();
        let pos = tape.leaf(Tensor::vector(&[0.0]), true);
        let neg = tape.leaf(Tensor::vector(&[0.0]), true);
        let loss = ctr_loss(&mut tape, pos, neg).unwrap();
        assert!((tape.value(loss).item() - 2.0 * 2.0_f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        // d/dlogit = sigmoid(logit) - label = 0.5 - 1 and 0.5 - 0.
        assert!((grads.get(pos).unwrap().data()[0] + 0.5).abs() < 1e-12);
        assert!((grads.get(neg).unwrap().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compose_total_arithmetic_and_validation() {
        let mut tape = Tape::new();
        let ctr = tape.leaf(Tensor::scalar(1.0), false);
        let csm = tape.leaf(Tensor::scalar(2.0), false);
        let fdm = tape.leaf(Tensor::scalar(3.0), false);
        let (_, b) = compose_total(&mut tape, ctr, Some(csm), Some(fdm), 0.5, 0.1).unwrap();
        assert!((b.total - 2.3).abs() < 1e-12);
        assert!(compose_total(&mut tape, ctr, Some(csm), None, -0.1, 0.0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(ModelFlags::full(), 3);
        let batch = tiny_batch();
        let a = forward_full(&model, &batch, false, None, false).unwrap().breakdown;
        let b = forward_full(&model, &batch, false, None, false).unwrap().breakdown;
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.l_ctr.to_bits(), b.l_ctr.to_bits());
    }

    #[test]
    fn loss_term_isolation_under_flags() {
        // Toggling FDM off leaves the other terms bitwise unchanged. At
        // d=4 a rare all-dead ReLU init can zero a projection (a hard
        // error by design), so scan to the first non-degenerate seed.
        let batch = tiny_batch();
        let (a, b) = (0..100)
            .find_map(|seed| {
                let full = tiny_model(ModelFlags::full(), seed);
                let no_fdm = tiny_model(ModelFlags { fdm: false, ..ModelFlags::full() }, seed);
                let a = forward_full(&full, &batch, false, None, false).ok()?.breakdown;
                let b = forward_full(&no_fdm, &batch, false, None, false).ok()?.breakdown;
                Some((a, b))
            })
            .expect("some small seed yields a non-degenerate init");
        assert_eq!(a.l_ctr.to_bits(), b.l_ctr.to_bits());
        assert_eq!(a.l_csm.to_bits(), b.l_csm.to_bits());
        assert_eq!(b.l_fdm, 0.0);
        assert!(a.l_fdm > 0.0 || a.l_fdm == 0.0);
    }

    #[test]
    fn linearity_identity_holds() {
        let model = tiny_model(ModelFlags::full(), 5);
        let out = forward_full(&model, &tiny_batch(), false, None, false).unwrap();
        let b = out.breakdown;
        assert!(
            (b.total - (b.l_ctr + b.lambda_csm * b.l_csm + b.lambda_fdm * b.l_fdm)).abs() < 1e-9
        );
    }

    #[test]
    fn target_only_variant_runs() {
        let flags = ModelFlags {
            domains: DomainSet { source: false, target: true, mixed: false },
            tca: false,
            csm: false,
            fdm: false,
        };
        let model = tiny_model(flags, 6);
        let out = forward_full(&model, &tiny_batch(), false, None, false).unwrap();
        assert_eq!(out.breakdown.l_csm, 0.0);
        assert_eq!(out.breakdown.l_fdm, 0.0);
        assert!(out.breakdown.total > 0.0);
        let scores = score_candidates(&model, &tiny_batch()[0]).unwrap();
        assert_eq!(scores.len(), 3);
    }

    #[test]
    fn mixed_only_variant_scores_through_mixed_table() {
        let flags = ModelFlags {
            domains: DomainSet { source: false, target: false, mixed: true },
            tca: false,
            csm: false,
            fdm: false,
        };
        let model = tiny_model(flags, 7);
        let scores = score_candidates(&model, &tiny_batch()[0]).unwrap();
        assert_eq!(scores.len(), 3);
        assert!(scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn domain_set_parsing() {
        assert_eq!(DomainSet::parse("t").unwrap().label(), "T");
        assert_eq!(DomainSet::parse("s+t").unwrap().label(), "S+T");
        assert_eq!(DomainSet::parse("S+T+M").unwrap(), DomainSet::full());
        assert!(DomainSet::parse("x").is_err());
    }
}
