//! Sequence encoders: self-attention blocks (default) and a GRU variant.
//!
//! Padded sequences enter through masks; internally the encoders run on
//! the compacted valid suffix, which makes pad-insensitivity exact: any
//! change confined to masked positions cannot touch a valid row.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::corpus::PaddedSeq;
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::optim::xavier_init;
use crate::params::{PId, ParamSet};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    SelfAttention,
    Gru,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub variant: EncoderVariant,
    pub residual_layernorm: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config {
                key: "n_heads".into(),
                msg: format!(
                    "embed_dim {} must be a positive multiple of n_heads {}",
                    self.embed_dim, self.n_heads
                ),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config {
                key: "dropout".into(),
                msg: "dropout must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// Per-block attention + feed-forward parameters.
#[derive(Clone, Debug)]
pub struct SaBlockIdx {
    pub wq: PId,
    pub wk: PId,
    pub wv: PId,
    pub w1: PId,
    pub b1: PId,
    pub w2: PId,
    pub b2: PId,
    /// Present only when residual + layer-norm wrapping is enabled.
    pub ln1: Option<(PId, PId)>,
    pub ln2: Option<(PId, PId)>,
}

#[derive(Clone, Debug)]
pub struct GruIdx {
    pub wz: PId,
    pub uz: PId,
    pub bz: PId,
    pub wr: PId,
    pub ur: PId,
    pub br: PId,
    pub wn: PId,
    pub un: PId,
    pub bn: PId,
}

#[derive(Clone, Debug)]
pub enum EncoderKind {
    SelfAttention(Vec<SaBlockIdx>),
    Gru(GruIdx),
}

/// Index of one encoder's parameters inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct EncoderIdx {
    pub item: PId,
    /// Position table; the GRU variant is order-aware and has none.
    pub pos: Option<PId>,
    pub kind: EncoderKind,
}

impl EncoderIdx {
    /// Allocate and initialize all parameters for one encoder under
    /// `prefix`. Item embeddings are Xavier with the pad row frozen to
    /// zero; biases start at zero, layer-norm gains at one.
    pub fn init(
        prefix: &str,
        vocab_size: usize,
        cfg: &EncoderConfig,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> EncoderIdx {
        let d = cfg.embed_dim;
        let mut item_table = xavier_init(vocab_size, d, rng);
        item_table.data_mut()[..d].fill(0.0);
        let item = params.add(format!("{prefix}.item"), item_table);
        match cfg.variant {
            EncoderVariant::SelfAttention => {
                let pos = params.add(format!("{prefix}.pos"), xavier_init(cfg.max_len, d, rng));
                let blocks = (0..cfg.n_blocks)
                    .map(|b| {
                        let w = |params: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| {
                            params.add(format!("{prefix}.b{b}.{name}"), xavier_init(d, d, rng))
                        };
                        let zero = |params: &mut ParamSet, name: &str| {
                            params.add(format!("{prefix}.b{b}.{name}"), Tensor::zeros(vec![d]))
                        };
                        let one = |params: &mut ParamSet, name: &str| {
                            params
                                .add(format!("{prefix}.b{b}.{name}"), Tensor::filled(vec![d], 1.0))
                        };
                        let wq = w(params, "wq", rng);
                        let wk = w(params, "wk", rng);
                        let wv = w(params, "wv", rng);
                        let w1 = w(params, "w1", rng);
                        let b1 = zero(params, "b1");
                        let w2 = w(params, "w2", rng);
                        let b2 = zero(params, "b2");
                        let (ln1, ln2) = if cfg.residual_layernorm {
                            (
                                Some((one(params, "ln1g"), zero(params, "ln1b"))),
                                Some((one(params, "ln2g"), zero(params, "ln2b"))),
                            )
                        } else {
                            (None, None)
                        };
                        SaBlockIdx { wq, wk, wv, w1, b1, w2, b2, ln1, ln2 }
                    })
                    .collect();
                EncoderIdx { item, pos: Some(pos), kind: EncoderKind::SelfAttention(blocks) }
            }
            EncoderVariant::Gru => {
                let mut w = |name: &str, rng: &mut ChaCha8Rng, params: &mut ParamSet| {
                    params.add(format!("{prefix}.gru.{name}"), xavier_init(d, d, rng))
                };
                let wz = w("wz", rng, params);
                let uz = w("uz", rng, params);
                let wr = w("wr", rng, params);
                let ur = w("ur", rng, params);
                let wn = w("wn", rng, params);
                let un = w("un", rng, params);
                let bz = params.add(format!("{prefix}.gru.bz"), Tensor::zeros(vec![d]));
                let br = params.add(format!("{prefix}.gru.br"), Tensor::zeros(vec![d]));
                let bn = params.add(format!("{prefix}.gru.bn"), Tensor::zeros(vec![d]));
                EncoderIdx {
                    item,
                    pos: None,
                    kind: EncoderKind::Gru(GruIdx { wz, uz, bz, wr, ur, br, wn, un, bn }),
                }
            }
        }
    }
}

/// Hidden behavior matrix in padded layout. Rows at padded positions are
/// physically present but all-zero and must only be read through the mask.
pub struct HiddenMatrix {
    pub values: Var,
    pub mask: Vec<bool>,
    pub last: usize,
}

/// Compact encoding result: hidden rows for the valid suffix only,
/// oldest to newest.
pub struct Encoded {
    pub hidden: Var,
    pub n: usize,
}

impl Encoded {
    /// The newest position's hidden state as a 1×d row.
    pub fn last_row(&self, fwd: &mut Fwd) -> Result<Var> {
        fwd.tape.gather_rows(self.hidden, &[self.n - 1])
    }
}

/// Input matrix for the valid suffix of a padded row: item embedding plus
/// the position embedding of the padded slot each item occupies.
fn embed_compact(fwd: &mut Fwd, ids: &[u32], start: usize, enc: &EncoderIdx) -> Result<Var> {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let items = fwd.tape.gather_rows(fwd.p(enc.item), &idx)?;
    let with_pos = match enc.pos {
        Some(pos) => {
            let positions: Vec<usize> = (0..ids.len()).map(|j| start + j).collect();
            let pos_rows = fwd.tape.gather_rows(fwd.p(pos), &positions)?;
            fwd.tape.add(items, pos_rows)?
        }
        None => items,
    };
    fwd.maybe_dropout(with_pos)
}

/// Full padded input matrix D: D[i] = item_embed[ids[i]] + pos_embed[i].
/// Ids at masked positions read the frozen zero pad row.
pub fn embed_sequence(fwd: &mut Fwd, seq: &PaddedSeq, enc: &EncoderIdx) -> Result<Var> {
    let idx: Vec<usize> =
        seq.ids.iter().zip(&seq.mask).map(|(&i, &m)| if m { i as usize } else { 0 }).collect();
    let items = fwd.tape.gather_rows(fwd.p(enc.item), &idx)?;
    match enc.pos {
        Some(pos) => {
            let positions: Vec<usize> = (0..seq.ids.len()).collect();
            let pos_rows = fwd.tape.gather_rows(fwd.p(pos), &positions)?;
            fwd.tape.add(items, pos_rows)
        }
        None => Ok(items),
    }
}

fn causal_mask(n: usize) -> Arc<Vec<bool>> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            mask[i * n + j] = true;
        }
    }
    Arc::new(mask)
}

/// One causal attention block: softmax(Q·Kᵀ/√d) V with Q = D·Wq,
/// K = D·Wk, V = D·Wv. Multi-head splits columns into per-head slices
/// scaled by the per-head width.
pub fn self_attention_block(
    fwd: &mut Fwd,
    d_in: Var,
    block: &SaBlockIdx,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let n = fwd.tape.value(d_in).shape()[0];
    let q = fwd.tape.matmul(d_in, fwd.p(block.wq))?;
    let k = fwd.tape.matmul(d_in, fwd.p(block.wk))?;
    let v = fwd.tape.matmul(d_in, fwd.p(block.wv))?;
    let mask = causal_mask(n);
    let heads = cfg.n_heads;
    if heads == 1 {
        let scores = fwd.tape.matmul_bt(q, k)?;
        let scaled = fwd.tape.scale(scores, 1.0 / (cfg.embed_dim as f64).sqrt());
        let attn = fwd.tape.softmax_rows(scaled, mask)?;
        fwd.tape.matmul(attn, v)
    } else {
        let dh = cfg.embed_dim / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = fwd.tape.slice_cols(q, lo, hi)?;
            let kh = fwd.tape.slice_cols(k, lo, hi)?;
            let vh = fwd.tape.slice_cols(v, lo, hi)?;
            let scores = fwd.tape.matmul_bt(qh, kh)?;
            let scaled = fwd.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = fwd.tape.softmax_rows(scaled, Arc::clone(&mask))?;
            outs.push(fwd.tape.matmul(attn, vh)?);
        }
        fwd.tape.concat_cols(&outs)
    }
}

/// Point-wise feed-forward: ReLU(x·w1 + b1)·w2 + b2.
pub fn ffn_block(fwd: &mut Fwd, x: Var, block: &SaBlockIdx) -> Result<Var> {
    let h = fwd.tape.matmul(x, fwd.p(block.w1))?;
    let h = fwd.tape.add_row(h, fwd.p(block.b1))?;
    let h = fwd.tape.relu(h);
    let h = fwd.tape.matmul(h, fwd.p(block.w2))?;
    fwd.tape.add_row(h, fwd.p(block.b2))
}

/// Encode the valid suffix of a padded sequence. `ids` are the unpadded
/// items (oldest..newest) and `start` their first padded position.
pub fn encode_compact(
    fwd: &mut Fwd,
    ids: &[u32],
    start: usize,
    enc: &EncoderIdx,
    cfg: &EncoderConfig,
) -> Result<Encoded> {
    if ids.is_empty() {
        return Err(Error::EmptySupport("encode_compact"));
    }
    match &enc.kind {
        EncoderKind::SelfAttention(blocks) => {
            let mut h = embed_compact(fwd, ids, start, enc)?;
            for block in blocks {
                let attn = self_attention_block(fwd, h, block, cfg)?;
                let attn = match block.ln1 {
                    Some((g, b)) => {
                        let res = fwd.tape.add(h, attn)?;
                        fwd.tape.layer_norm(res, fwd.p(g), fwd.p(b))?
                    }
                    None => attn,
                };
                let out = ffn_block(fwd, attn, block)?;
                let out = fwd.maybe_dropout(out)?;
                h = match block.ln2 {
                    Some((g, b)) => {
                        let res = fwd.tape.add(attn, out)?;
                        fwd.tape.layer_norm(res, fwd.p(g), fwd.p(b))?
                    }
                    None => out,
                };
            }
            Ok(Encoded { hidden: h, n: ids.len() })
        }
        EncoderKind::Gru(gru) => gru_encode_compact(fwd, ids, enc.item, gru),
    }
}

/// Standard GRU recurrence over the valid items, h_0 = 0:
/// z = σ(x·Wz + h·Uz + bz), r = σ(x·Wr + h·Ur + br),
/// n = tanh(x·Wn + r ⊙ (h·Un) + bn), h' = (1-z) ⊙ n + z ⊙ h.
pub fn gru_encode_compact(fwd: &mut Fwd, ids: &[u32], item: PId, gru: &GruIdx) -> Result<Encoded> {
    if ids.is_empty() {
        return Err(Error::EmptySupport("gru_encode"));
    }
    let d = fwd.params.get(item).shape()[1];
    let mut h = fwd.tape.constant(Tensor::zeros(vec![1, d]));
    let mut rows = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = fwd.tape.gather_rows(fwd.p(item), &[id as usize])?;
        let z = {
            let a = fwd.tape.matmul(x, fwd.p(gru.wz))?;
            let b = fwd.tape.matmul(h, fwd.p(gru.uz))?;
            let s = fwd.tape.add(a, b)?;
            let s = fwd.tape.add_row(s, fwd.p(gru.bz))?;
            fwd.tape.sigmoid(s)
        };
        let r = {
            let a = fwd.tape.matmul(x, fwd.p(gru.wr))?;
            let b = fwd.tape.matmul(h, fwd.p(gru.ur))?;
            let s = fwd.tape.add(a, b)?;
            let s = fwd.tape.add_row(s, fwd.p(gru.br))?;
            fwd.tape.sigmoid(s)
        };
        let cand = {
            let a = fwd.tape.matmul(x, fwd.p(gru.wn))?;
            let hu = fwd.tape.matmul(h, fwd.p(gru.un))?;
            let gated = fwd.tape.mul(r, hu)?;
            let s = fwd.tape.add(a, gated)?;
            let s = fwd.tape.add_row(s, fwd.p(gru.bn))?;
            fwd.tape.tanh(s)
        };
        let keep = fwd.tape.mul(z, h)?;
        let neg_z = fwd.tape.scale(z, -1.0);
        let one_minus_z = fwd.tape.add_const(neg_z, 1.0);
        let update = fwd.tape.mul(one_minus_z, cand)?;
        h = fwd.tape.add(keep, update)?;
        rows.push(h);
    }
    let hidden = fwd.tape.concat_rows(&rows)?;
    Ok(Encoded { hidden, n: ids.len() })
}

/// Padded-contract wrapper: encodes the valid suffix and scatters the
/// hidden rows back to their padded positions (pad rows stay zero).
pub fn encode_sequence(
    fwd: &mut Fwd,
    seq: &PaddedSeq,
    enc: &EncoderIdx,
    cfg: &EncoderConfig,
) -> Result<HiddenMatrix> {
    let valid: Vec<u32> =
        seq.ids.iter().zip(&seq.mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
    let start = seq.mask.iter().position(|&m| m).ok_or(Error::EmptySupport("encode_sequence"))?;
    let encoded = encode_compact(fwd, &valid, start, enc, cfg)?;
    let positions: Vec<usize> = (start..seq.ids.len()).collect();
    let values = fwd.tape.scatter_rows(encoded.hidden, &positions, seq.ids.len())?;
    Ok(HiddenMatrix { values, mask: seq.mask.clone(), last: seq.last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::pad_left;
    use crate::rng::Streams;
    use rand::Rng;

    fn sa_config(d: usize, max_len: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: d,
            n_blocks: 1,
            n_heads: 1,
            max_len,
            dropout: 0.0,
            variant: EncoderVariant::SelfAttention,
            residual_layernorm: false,
        }
    }

    fn init_encoder(cfg: &EncoderConfig, vocab: usize, seed: u64) -> (ParamSet, EncoderIdx) {
        let mut params = ParamSet::new();
        let mut rng = Streams::new(seed).stream("init");
        let enc = EncoderIdx::init("enc", vocab, cfg, &mut params, &mut rng);
        (params, enc)
    }

    fn sa_blocks(enc: &EncoderIdx) -> Vec<SaBlockIdx> {
        match &enc.kind {
            EncoderKind::SelfAttention(b) => b.clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn embed_zero_tables_gives_zero() {
        let cfg = sa_config(4, 6);
        let (mut params, enc) = init_encoder(&cfg, 9, 1);
        params.set(enc.item, Tensor::zeros(vec![9, 4]));
        params.set(enc.pos.unwrap(), Tensor::zeros(vec![6, 4]));
        let mut fwd = Fwd::new(&params, false);
        let seq = pad_left(&[3, 5], 6);
        let d = embed_sequence(&mut fwd, &seq, &enc).unwrap();
        assert!(fwd.tape.value(d).data().iter().all(|&v| v == 0.0));
        assert_eq!(fwd.tape.value(d).shape(), &[6, 4]);
    }

    #[test]
    fn embed_pad_rows_are_position_only() {
        let cfg = sa_config(4, 6);
        let (params, enc) = init_encoder(&cfg, 9, 1);
        let mut fwd = Fwd::new(&params, false);
        let seq = pad_left(&[3, 5], 6);
        let d = embed_sequence(&mut fwd, &seq, &enc).unwrap();
        let pos_table = params.get(enc.pos.unwrap());
        for i in 0..4 {
            assert_eq!(fwd.tape.value(d).row(i), pos_table.row(i), "pad row {i}");
        }
    }

    #[test]
    fn single_valid_position_copies_value_row() {
        let cfg = sa_config(4, 4);
        let (params, enc) = init_encoder(&cfg, 9, 2);
        let mut fwd = Fwd::new(&params, false);
        let d = fwd.tape.leaf(Tensor::matrix(&[vec![0.3, -0.1, 0.8, 0.2]]).unwrap(), false);
        let blocks = sa_blocks(&enc);
        let out = self_attention_block(&mut fwd, d, &blocks[0], &cfg).unwrap();
        // One position: softmax over a single key is 1, so output = V row.
        let v = fwd.tape.matmul(d, fwd.p(blocks[0].wv)).unwrap();
        assert_eq!(fwd.tape.value(out).data(), fwd.tape.value(v).data());
    }

    #[test]
    fn zero_query_key_gives_prefix_means() {
        let cfg = sa_config(2, 4);
        let (mut params, enc) = init_encoder(&cfg, 9, 3);
        let blocks = sa_blocks(&enc);
        params.set(blocks[0].wq, Tensor::zeros(vec![2, 2]));
        params.set(blocks[0].wk, Tensor::zeros(vec![2, 2]));
        params.set(blocks[0].wv, Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let mut fwd = Fwd::new(&params, false);
        let d = fwd.tape.leaf(
            Tensor::matrix(&[vec![2.0, 0.0], vec![0.0, 4.0], vec![6.0, 6.0]]).unwrap(),
            false,
        );
        let out = self_attention_block(&mut fwd, d, &blocks[0], &cfg).unwrap();
        // Uniform attention over the causal prefix: row i is the mean of
        // V rows 0..=i, and V = D under the identity projection.
        assert_eq!(fwd.tape.value(out).row(0), &[2.0, 0.0]);
        assert_eq!(fwd.tape.value(out).row(1), &[1.0, 2.0]);
        let r2 = fwd.tape.value(out).row(2);
        assert!((r2[0] - 8.0 / 3.0).abs() < 1e-12 && (r2[1] - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ffn_zero_weights_emit_bias() {
        let cfg = sa_config(2, 4);
        let (mut params, enc) = init_encoder(&cfg, 9, 4);
        let blocks = sa_blocks(&enc);
        params.set(blocks[0].w1, Tensor::zeros(vec![2, 2]));
        params.set(blocks[0].w2, Tensor::zeros(vec![2, 2]));
        params.set(blocks[0].b2, Tensor::vector(&[0.7, -0.2]));
        let mut fwd = Fwd::new(&params, false);
        let x = fwd.tape.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), false);
        let out = ffn_block(&mut fwd, x, &blocks[0]).unwrap();
        assert_eq!(fwd.tape.value(out).row(0), &[0.7, -0.2]);
        assert_eq!(fwd.tape.value(out).row(1), &[0.7, -0.2]);
    }

    /// Triple-loop causal attention reference.
    fn attention_oracle(
        x: &[f64],
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        n: usize,
        d: usize,
    ) -> Vec<f64> {
        let proj = |w: &[f64]| {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    for k in 0..d {
                        out[i * d + j] += x[i * d + k] * w[k * d + j];
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut scores = Vec::new();
            for j in 0..=i {
                let mut s = 0.0;
                for f in 0..d {
                    s += q[i * d + f] * k[j * d + f];
                }
                scores.push(s / (d as f64).sqrt());
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for f in 0..d {
                    out[i * d + f] += e / z * v[j * d + f];
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_bruteforce_oracle() {
        let mut rng = Streams::new(5).stream("test");
        for case in 0..50 {
            let n = rng.random_range(1..=6);
            let d = [2, 4, 8][case % 3];
            let cfg = sa_config(d, n);
            let (params, enc) = init_encoder(&cfg, 5, 100 + case as u64);
            let blocks = sa_blocks(&enc);
            let x = Tensor::new(
                vec![n, d],
                (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let mut fwd = Fwd::new(&params, false);
            let dv = fwd.tape.leaf(x.clone(), false);
            let out = self_attention_block(&mut fwd, dv, &blocks[0], &cfg).unwrap();

            let oracle = attention_oracle(
                x.data(),
                params.get(blocks[0].wq).data(),
                params.get(blocks[0].wk).data(),
                params.get(blocks[0].wv).data(),
                n,
                d,
            );
            for (a, b) in fwd.tape.value(out).data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "attention mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn multihead_matches_per_head_oracle() {
        let n = 4;
        let d = 4;
        let mut cfg = sa_config(d, n);
        cfg.n_heads = 2;
        let (params, enc) = init_encoder(&cfg, 5, 11);
        let blocks = sa_blocks(&enc);
        let mut rng = Streams::new(12).stream("test");
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mut fwd = Fwd::new(&params, false);
        let dv = fwd.tape.leaf(x.clone(), false);
        let out = self_attention_block(&mut fwd, dv, &blocks[0], &cfg).unwrap();

        // Project with the full matrices, then per-head causal attention
        // on each column half with per-head scaling.
        let proj = |w: &[f64]| {
            let mut o = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    for k in 0..d {
                        o[i * d + j] += x.data()[i * d + k] * w[k * d + j];
                    }
                }
            }
            o
        };
        let q = proj(params.get(blocks[0].wq).data());
        let k = proj(params.get(blocks[0].wk).data());
        let v = proj(params.get(blocks[0].wv).data());
        let dh = d / 2;
        let mut expect = vec![0.0; n * d];
        for h in 0..2 {
            for i in 0..n {
                let mut scores = Vec::new();
                for j in 0..=i {
                    let mut s = 0.0;
                    for f in 0..dh {
                        s += q[i * d + h * dh + f] * k[j * d + h * dh + f];
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for f in 0..dh {
                        expect[i * d + h * dh + f] += e / z * v[j * d + h * dh + f];
                    }
                }
            }
        }
        for (a, b) in fwd.tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn encode_deterministic_and_shaped() {
        let cfg = sa_config(4, 8);
        let (params, enc) = init_encoder(&cfg, 9, 6);
        let seq = pad_left(&[1, 4, 2], 8);
        let run = || {
            let mut fwd = Fwd::new(&params, false);
            let h = encode_sequence(&mut fwd, &seq, &enc, &cfg).unwrap();
            fwd.tape.value(h.values).data().to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 8 * 4);
        assert_eq!(a, run());
    }

    #[test]
    fn pad_content_cannot_touch_valid_rows() {
        let cfg = sa_config(4, 8);
        let (params, enc) = init_encoder(&cfg, 9, 7);
        let seq = pad_left(&[1, 4, 2], 8);
        let mut garbled = seq.clone();
        garbled.ids[0] = 7; // masked position
        garbled.ids[2] = 3;
        let run = |s: &PaddedSeq| {
            let mut fwd = Fwd::new(&params, false);
            let h = encode_sequence(&mut fwd, s, &enc, &cfg).unwrap();
            fwd.tape.value(h.values).data().to_vec()
        };
        assert_eq!(run(&seq), run(&garbled));
    }

    #[test]
    fn causality_perturbation_audit() {
        // Changing the item at position j leaves all hidden rows before j
        // bitwise unchanged. Exhaustive over positions at len <= 6.
        let cfg = sa_config(4, 6);
        let (params, enc) = init_encoder(&cfg, 9, 8);
        let base: Vec<u32> = vec![1, 2, 3, 4, 5, 6];
        let encode = |ids: &[u32]| {
            let mut fwd = Fwd::new(&params, false);
            let e = encode_compact(&mut fwd, ids, 0, &enc, &cfg).unwrap();
            fwd.tape.value(e.hidden).data().to_vec()
        };
        let reference = encode(&base);
        for j in 0..base.len() {
            let mut changed = base.clone();
            changed[j] = if base[j] == 8 { 7 } else { 8 };
            let out = encode(&changed);
            for i in 0..j {
                assert_eq!(
                    &reference[i * 4..(i + 1) * 4],
                    &out[i * 4..(i + 1) * 4],
                    "row {i} changed after perturbing position {j}"
                );
            }
        }
    }

    #[test]
    fn gru_zero_weights_stay_at_zero() {
        let cfg = EncoderConfig { variant: EncoderVariant::Gru, ..sa_config(3, 6) };
        let (mut params, enc) = init_encoder(&cfg, 9, 9);
        let gru = match &enc.kind {
            EncoderKind::Gru(g) => g.clone(),
            _ => unreachable!(),
        };
        for pid in [gru.wz, gru.uz, gru.wr, gru.ur, gru.wn, gru.un] {
            let shape = params.get(pid).shape().to_vec();
            params.set(pid, Tensor::zeros(shape));
        }
        let mut fwd = Fwd::new(&params, false);
        let e = encode_compact(&mut fwd, &[1, 2, 3], 0, &enc, &cfg).unwrap();
        assert!(fwd.tape.value(e.hidden).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_matches_hand_arithmetic() {
        let cfg = EncoderConfig { variant: EncoderVariant::Gru, ..sa_config(2, 4) };
        let (params, enc) = init_encoder(&cfg, 5, 10);
        let gru = match &enc.kind {
            EncoderKind::Gru(g) => g.clone(),
            _ => unreachable!(),
        };
        let mut fwd = Fwd::new(&params, false);
        let e = encode_compact(&mut fwd, &[2], 0, &enc, &cfg).unwrap();

        // By hand: h0 = 0 so z = σ(x·Wz + bz), n = tanh(x·Wn + bn),
        // h1 = (1-z)·n.
        let x = params.get(enc.item).row(2).to_vec();
        let lin = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..2).map(|j| x[0] * w.data()[j] + x[1] * w.data()[2 + j] + b.data()[j]).collect()
        };
        let z: Vec<f64> = lin(params.get(gru.wz), params.get(gru.bz))
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let nn: Vec<f64> =
            lin(params.get(gru.wn), params.get(gru.bn)).iter().map(|v| v.tanh()).collect();
        let expect: Vec<f64> = z.iter().zip(&nn).map(|(z, n)| (1.0 - z) * n).collect();
        for (a, b) in fwd.tape.value(e.hidden).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
