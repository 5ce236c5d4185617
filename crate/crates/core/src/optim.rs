//! Adam optimizer and Xavier initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{PId, ParamSet};
use crate::tensor::Tensor;

/// Bias-corrected Adam state over one parameter set.
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    /// (first moment, second moment) per parameter, same shapes.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let moments = params
            .ids()
            .map(|id| {
                let n = params.get(id).numel();
                (vec![0.0; n], vec![0.0; n])
            })
            .collect();
        AdamState { lr, beta1, beta2, epsilon, moments, t: 0 }
    }

    pub fn with_defaults(params: &ParamSet, lr: f64) -> Self {
        Self::new(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: `grads[i]` pairs with parameter `PId(i)`; `None` means a
    /// zero gradient (the moments still decay).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(Error::Contract(format!(
                "adam_step: {} gradients for {} parameters",
                grads.len(),
                self.moments.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let id = PId(i);
            if let Some(g) = grad {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        left: params.get(id).shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
            let (m, v) = &mut self.moments[i];
            let p = params.get_mut(id).data_mut();
            match grad {
                Some(g) => {
                    for ((pj, (mj, vj)), &gj) in
                        p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data())
                    {
                        *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                        *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                        let mhat = *mj / bc1;
                        let vhat = *vj / bc2;
                        *pj -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
                None => {
                    for (pj, (mj, vj)) in p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())) {
                        *mj *= self.beta1;
                        *vj *= self.beta2;
                        let mhat = *mj / bc1;
                        let vhat = *vj / bc2;
                        *pj -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Xavier (Glorot) uniform init for a 2-D shape: values drawn uniformly in
/// ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn one_param(x: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(&[x]));
        ps
    }

    #[test]
    fn first_step_closed_form() {
        // g=1, lr=0.001: update ≈ -0.001 · 1/(1 + 1e-8).
        let mut ps = one_param(0.5);
        let mut adam = AdamState::new(&ps, 0.001, 0.9, 0.999, 1e-8);
        adam.step(&mut ps, &[Some(Tensor::vector(&[1.0]))]).unwrap();
        let expect = 0.5 - 0.001 * (1.0 / (1.0 + 1e-8));
        assert!((ps.get(PId(0)).data()[0] - expect).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = one_param(0.5);
        let mut adam = AdamState::with_defaults(&ps, 0.001);
        adam.step(&mut ps, &[Some(Tensor::vector(&[0.0]))]).unwrap();
        assert_eq!(ps.get(PId(0)).data()[0], 0.5);
        adam.step(&mut ps, &[None]).unwrap();
        assert_eq!(ps.get(PId(0)).data()[0], 0.5);
    }

    #[test]
    fn two_steps_follow_recurrences() {
        let (lr, b1, b2, eps, g) = (0.01, 0.9, 0.999, 1e-8, 0.7);
        let mut ps = one_param(1.0);
        let mut adam = AdamState::new(&ps, lr, b1, b2, eps);
        adam.step(&mut ps, &[Some(Tensor::vector(&[g]))]).unwrap();
        adam.step(&mut ps, &[Some(Tensor::vector(&[g]))]).unwrap();

        // Hand-rolled recurrences.
        let (mut m, mut v, mut p) = (0.0, 0.0, 1.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p -= lr * mhat / (vhat.sqrt() + eps);
        }
        assert!((ps.get(PId(0)).data()[0] - p).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ps = one_param(1.0);
        let mut adam = AdamState::with_defaults(&ps, 0.001);
        let bad = Tensor::vector(&[1.0, 2.0]);
        assert!(adam.step(&mut ps, &[Some(bad)]).is_err());
    }

    #[test]
    fn update_is_odd_in_gradient_at_t1() {
        // Flipping the gradient sign flips the first update exactly.
        let run = |g: f64| {
            let mut ps = one_param(0.0);
            let mut adam = AdamState::with_defaults(&ps, 0.003);
            adam.step(&mut ps, &[Some(Tensor::vector(&[g]))]).unwrap();
            ps.get(PId(0)).data()[0]
        };
        assert!((run(0.37) + run(-0.37)).abs() < 1e-15);
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let mut rng = Streams::new(9).stream("init");
        let t = xavier_init(4, 4, &mut rng);
        let bound = (6.0_f64 / 8.0).sqrt();
        assert!((bound - 0.86603).abs() < 1e-5);
        assert!(t.data().iter().all(|v| v.abs() <= bound));

        let mut rng2 = Streams::new(9).stream("init");
        let t2 = xavier_init(4, 4, &mut rng2);
        assert_eq!(t.data(), t2.data());

        let mut rng3 = Streams::new(9).stream("init");
        let t3 = xavier_init(1, 1, &mut rng3);
        assert!(t3.data()[0].abs() <= 3.0_f64.sqrt());
    }
}
