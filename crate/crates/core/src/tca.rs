//! Triple cross-domain attention: score every hidden behavior against the
//! user's target-preference anchor (last target hidden state) and
//! global-interest anchor (last mixed hidden state), then aggregate each
//! domain's hidden matrix into one sequence representation.

use rand_chacha::ChaCha8Rng;

use crate::encoder::HiddenMatrix;
use crate::error::{Error, Result};
use crate::forward::Fwd;
use crate::optim::xavier_init;
use crate::params::{PId, ParamSet};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Two-layer scorer over the 5d feature vector
/// anchor_t ‖ h ‖ h−anchor_t ‖ h⊙anchor_t ‖ anchor_m,
/// each layer followed by PReLU with a trainable scalar slope.
/// One scorer is shared across the three domains' aggregations.
#[derive(Clone, Debug)]
pub struct TcaIdx {
    pub w1: PId,
    pub b1: PId,
    pub slope1: PId,
    pub w2: PId,
    pub b2: PId,
    pub slope2: PId,
}

/// Default PReLU slope for freshly initialized scorers.
pub const PRELU_SLOPE_INIT: f64 = 0.25;

impl TcaIdx {
    pub fn init(prefix: &str, d: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> TcaIdx {
        let hidden = d; // scorer hidden width d_a = d
        TcaIdx {
            w1: params.add(format!("{prefix}.w1"), xavier_init(5 * d, hidden, rng)),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(vec![hidden])),
            slope1: params
                .add(format!("{prefix}.slope1"), Tensor::vector(&[PRELU_SLOPE_INIT])),
            w2: params.add(format!("{prefix}.w2"), xavier_init(hidden, 1, rng)),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(vec![1])),
            slope2: params
                .add(format!("{prefix}.slope2"), Tensor::vector(&[PRELU_SLOPE_INIT])),
        }
    }
}

/// Raw attention scores for every row of `hidden` (n×d): a length-n vector.
pub fn tca_scores(
    fwd: &mut Fwd,
    anchor_t: Var,
    anchor_m: Var,
    hidden: Var,
    tca: &TcaIdx,
) -> Result<Var> {
    let n = fwd.tape.value(hidden).shape()[0];
    let at = fwd.tape.repeat_row(anchor_t, n)?;
    let am = fwd.tape.repeat_row(anchor_m, n)?;
    let diff = fwd.tape.sub(hidden, at)?;
    let had = fwd.tape.mul(hidden, at)?;
    let features = fwd.tape.concat_cols(&[at, hidden, diff, had, am])?;
    let l1 = fwd.tape.matmul(features, fwd.p(tca.w1))?;
    let l1 = fwd.tape.add_row(l1, fwd.p(tca.b1))?;
    let l1 = fwd.tape.prelu(l1, fwd.p(tca.slope1));
    let l2 = fwd.tape.matmul(l1, fwd.p(tca.w2))?;
    let l2 = fwd.tape.add_row(l2, fwd.p(tca.b2))?;
    let l2 = fwd.tape.prelu(l2, fwd.p(tca.slope2));
    fwd.tape.reshape(l2, vec![n])
}

/// Attention weight of a single hidden behavior against the two anchors.
pub fn tca_score(
    fwd: &mut Fwd,
    anchor_t: Var,
    anchor_m: Var,
    h: Var,
    tca: &TcaIdx,
) -> Result<Var> {
    let d = fwd.tape.value(h).numel();
    if fwd.tape.value(anchor_t).numel() != d || fwd.tape.value(anchor_m).numel() != d {
        return Err(Error::ShapeMismatch {
            op: "tca_score",
            left: fwd.tape.value(anchor_t).shape().to_vec(),
            right: fwd.tape.value(h).shape().to_vec(),
        });
    }
    let row = fwd.tape.reshape(h, vec![1, d])?;
    let at = fwd.tape.reshape(anchor_t, vec![1, d])?;
    let am = fwd.tape.reshape(anchor_m, vec![1, d])?;
    let scores = tca_scores(fwd, at, am, row, tca)?;
    fwd.tape.reshape(scores, vec![])
}

/// Softmax-weighted sum of compact hidden rows: s = Σ softmax(α)ᵢ hᵢ.
pub fn tca_aggregate_compact(
    fwd: &mut Fwd,
    anchor_t: Var,
    anchor_m: Var,
    hidden: Var,
    tca: &TcaIdx,
) -> Result<Var> {
    let n = fwd.tape.value(hidden).shape()[0];
    let scores = tca_scores(fwd, anchor_t, anchor_m, hidden, tca)?;
    let weights = fwd.tape.softmax_masked(scores, &vec![true; n])?;
    let wrow = fwd.tape.reshape(weights, vec![1, n])?;
    fwd.tape.matmul(wrow, hidden)
}

/// Padded-contract aggregation: padded positions receive exactly zero
/// weight (they are excluded from the softmax support entirely).
pub fn tca_aggregate(
    fwd: &mut Fwd,
    h: &HiddenMatrix,
    anchor_t: Var,
    anchor_m: Var,
    tca: &TcaIdx,
) -> Result<Var> {
    let valid: Vec<usize> =
        h.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if valid.is_empty() {
        return Err(Error::EmptySupport("tca_aggregate"));
    }
    let rows = fwd.tape.gather_rows(h.values, &valid)?;
    tca_aggregate_compact(fwd, anchor_t, anchor_m, rows, tca)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn init(d: usize, seed: u64) -> (ParamSet, TcaIdx) {
        let mut params = ParamSet::new();
        let mut rng = Streams::new(seed).stream("init");
        let tca = TcaIdx::init("tca", d, &mut params, &mut rng);
        (params, tca)
    }

    fn row(fwd: &mut Fwd, xs: &[f64]) -> Var {
        fwd.tape.leaf(Tensor::new(vec![1, xs.len()], xs.to_vec()).unwrap(), false)
    }

    #[test]
    fn zero_weights_score_zero() {
        let (mut params, tca) = init(3, 1);
        params.set(tca.w1, Tensor::zeros(vec![15, 3]));
        params.set(tca.w2, Tensor::zeros(vec![3, 1]));
        let mut fwd = Fwd::new(&params, false);
        let at = row(&mut fwd, &[0.4, -0.2, 0.9]);
        let am = row(&mut fwd, &[1.0, 2.0, 3.0]);
        let h = row(&mut fwd, &[-0.3, 0.8, 0.1]);
        let alpha = tca_score(&mut fwd, at, am, h, &tca).unwrap();
        assert_eq!(fwd.tape.value(alpha).item(), 0.0);
    }

    #[test]
    fn linear_sum_construction() {
        // Layer 1 sums the whole feature vector into one unit, layer 2
        // passes it through. With zero anchors and h = e1 the features
        // are 0 ‖ e1 ‖ e1 ‖ 0 ‖ 0, so the score is exactly 2.
        let d = 3;
        let (mut params, tca) = init(d, 2);
        let mut w1 = Tensor::zeros(vec![5 * d, d]);
        for r in 0..5 * d {
            w1.data_mut()[r * d] = 1.0;
        }
        params.set(tca.w1, w1);
        let mut w2 = Tensor::zeros(vec![d, 1]);
        w2.data_mut()[0] = 1.0;
        params.set(tca.w2, w2);
        let mut fwd = Fwd::new(&params, false);
        let at = row(&mut fwd, &[0.0, 0.0, 0.0]);
        let am = row(&mut fwd, &[0.0, 0.0, 0.0]);
        let h = row(&mut fwd, &[1.0, 0.0, 0.0]);
        let alpha = tca_score(&mut fwd, at, am, h, &tca).unwrap();
        assert_eq!(fwd.tape.value(alpha).item(), 2.0);
    }

    #[test]
    fn equal_scores_average_rows() {
        // Zero weights give identical scores, so aggregation is the mean.
        let (mut params, tca) = init(2, 3);
        params.set(tca.w1, Tensor::zeros(vec![10, 2]));
        params.set(tca.w2, Tensor::zeros(vec![2, 1]));
        let mut fwd = Fwd::new(&params, false);
        let at = row(&mut fwd, &[0.5, 0.5]);
        let am = row(&mut fwd, &[0.1, 0.1]);
        let h = fwd.tape.leaf(
            Tensor::matrix(&[
                vec![1.0, 0.0],
                vec![3.0, 2.0],
                vec![5.0, 4.0],
                vec![7.0, 2.0],
            ])
            .unwrap(),
            false,
        );
        let s = tca_aggregate_compact(&mut fwd, at, am, h, &tca).unwrap();
        assert_eq!(fwd.tape.value(s).data(), &[4.0, 2.0]);
    }

    #[test]
    fn single_row_is_identity() {
        let (params, tca) = init(2, 4);
        let mut fwd = Fwd::new(&params, false);
        let at = row(&mut fwd, &[0.2, -0.7]);
        let am = row(&mut fwd, &[0.9, 0.3]);
        let h = row(&mut fwd, &[1.5, -2.5]);
        let s = tca_aggregate_compact(&mut fwd, at, am, h, &tca).unwrap();
        assert_eq!(fwd.tape.value(s).data(), &[1.5, -2.5]);
    }

    #[test]
    fn softmax_mixing_weights() {
        // Scores [0, ln 3] over rows r1, r2 → s = 0.25 r1 + 0.75 r2.
        // A constructed weight makes the scorer read h's first coordinate,
        // so the scores equal h[:, 0].
        let d = 2;
        let (mut params, tca) = init(d, 5);
        let mut w1 = Tensor::zeros(vec![5 * d, d]);
        w1.data_mut()[d * d] = 1.0; // first coordinate of the h block
        params.set(tca.w1, w1);
        let mut w2 = Tensor::zeros(vec![d, 1]);
        w2.data_mut()[0] = 1.0;
        params.set(tca.w2, w2);
        let mut fwd = Fwd::new(&params, false);
        let at = row(&mut fwd, &[0.0, 0.0]);
        let am = row(&mut fwd, &[0.0, 0.0]);
        let h = fwd.tape.leaf(
            Tensor::matrix(&[vec![0.0, 8.0], vec![3.0_f64.ln(), 4.0]]).unwrap(),
            false,
        );
        let s = tca_aggregate_compact(&mut fwd, at, am, h, &tca).unwrap();
        let expect = [0.75 * 3.0_f64.ln(), 0.25 * 8.0 + 0.75 * 4.0];
        for (a, b) in fwd.tape.value(s).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn weights_sum_to_one_and_pads_get_zero() {
        let (params, tca) = init(3, 6);
        let mut fwd = Fwd::new(&params, false);
        let at = row(&mut fwd, &[0.1, 0.2, 0.3]);
        let am = row(&mut fwd, &[-0.1, 0.4, 0.0]);
        let h = fwd.tape.leaf(
            Tensor::matrix(&[vec![0.5, 0.1, -0.2], vec![0.9, -0.4, 0.3]]).unwrap(),
            false,
        );
        let scores = tca_scores(&mut fwd, at, am, h, &tca).unwrap();
        let w = fwd.tape.softmax_masked(scores, &[true, true]).unwrap();
        let total: f64 = fwd.tape.value(w).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);

        // Padded layout: masked rows contribute exactly zero weight.
        let hm = HiddenMatrix {
            values: fwd.tape.leaf(
                Tensor::matrix(&[
                    vec![0.0, 0.0, 0.0],
                    vec![0.5, 0.1, -0.2],
                    vec![0.9, -0.4, 0.3],
                ])
                .unwrap(),
                false,
            ),
            mask: vec![false, true, true],
            last: 2,
        };
        let s_pad = tca_aggregate(&mut fwd, &hm, at, am, &tca).unwrap();
        let s_compact = tca_aggregate_compact(&mut fwd, at, am, h, &tca).unwrap();
        assert_eq!(fwd.tape.value(s_pad).data(), fwd.tape.value(s_compact).data());
    }

    #[test]
    fn aggregation_is_order_independent_given_scores() {
        let (params, tca) = init(2, 7);
        let run = |rows: &[Vec<f64>]| {
            let mut fwd = Fwd::new(&params, false);
            let at = row(&mut fwd, &[0.3, -0.6]);
            let am = row(&mut fwd, &[0.2, 0.8]);
            let h = fwd.tape.leaf(Tensor::matrix(rows).unwrap(), false);
            let s = tca_aggregate_compact(&mut fwd, at, am, h, &tca).unwrap();
            fwd.tape.value(s).data().to_vec()
        };
        let a = run(&[vec![1.0, 2.0], vec![-0.5, 0.7], vec![0.3, 0.3]]);
        let b = run(&[vec![-0.5, 0.7], vec![1.0, 2.0], vec![0.3, 0.3]]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_support_is_an_error() {
        let (params, tca) = init(2, 8);
        let mut fwd = Fwd::new(&params, false);
        let at = row(&mut fwd, &[0.0, 0.0]);
        let am = row(&mut fwd, &[0.0, 0.0]);
        let hm = HiddenMatrix {
            values: fwd.tape.leaf(Tensor::zeros(vec![2, 2]), false),
            mask: vec![false, false],
            last: 1,
        };
        assert!(matches!(
            tca_aggregate(&mut fwd, &hm, at, am, &tca),
            Err(Error::EmptySupport(_))
        ));
    }
}
