//! Shared forward-pass context: one tape per pass plus the registered
//! parameter leaves.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{PId, ParamSet};
use crate::tape::{Tape, Var};

pub struct Fwd<'a> {
    pub tape: Tape,
    pub params: &'a ParamSet,
    pvars: Vec<Var>,
    pub train: bool,
    dropout: f64,
    drop_rng: Option<ChaCha8Rng>,
}

impl<'a> Fwd<'a> {
    /// Register every parameter as a tape leaf. Gradients are only
    /// tracked in training mode; inference passes skip the bookkeeping.
    pub fn new(params: &'a ParamSet, train: bool) -> Self {
        let mut tape = Tape::new();
        let pvars =
            params.ids().map(|id| tape.leaf_shared(params.shared(id), train)).collect();
        Fwd { tape, params, pvars, train, dropout: 0.0, drop_rng: None }
    }

    /// Enable dropout for this pass (training only).
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if self.train && rate > 0.0 {
            self.dropout = rate;
            self.drop_rng = Some(rng);
        }
        self
    }

    /// Tape leaf for a parameter.
    pub fn p(&self, id: PId) -> Var {
        self.pvars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.pvars
    }

    /// Apply inverted dropout if enabled, otherwise pass through.
    pub fn maybe_dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.dropout;
        match self.drop_rng.as_mut() {
            Some(rng) if rate > 0.0 => {
                let n = self.tape.value(x).numel();
                let scale = 1.0 / (1.0 - rate);
                let keep: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                    .collect();
                self.tape.dropout(x, Arc::new(keep))
            }
            _ => Ok(x),
        }
    }
}
