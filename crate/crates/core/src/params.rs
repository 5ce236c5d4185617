//! Named parameter registry.
//!
//! Parameters live in one flat, insertion-ordered set; components hold
//! typed index structs into it. The fixed order is what makes optimizer
//! state, checkpoints, and gradient checks line up deterministically.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of one named parameter in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(pub usize);

#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> PId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(t));
        PId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: PId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn shared(&self, id: PId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn set(&mut self, id: PId, t: Tensor) {
        self.tensors[id.0] = Arc::new(t);
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.tensors.len()).map(PId)
    }

    pub fn find(&self, name: &str) -> Option<PId> {
        self.names.iter().position(|n| n == name).map(PId)
    }

    /// Copy every parameter whose name starts with `src_prefix` in `other`
    /// onto the parameter named with `dst_prefix` plus the same suffix.
    /// Shapes must agree exactly.
    pub fn copy_prefixed(&mut self, dst_prefix: &str, other: &ParamSet, src_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, tensor) in other.names.iter().zip(&other.tensors) {
            if let Some(suffix) = name.strip_prefix(src_prefix) {
                let dst_name = format!("{dst_prefix}{suffix}");
                let dst = self.find(&dst_name).ok_or_else(|| {
                    Error::Contract(format!("no parameter named {dst_name} to receive {name}"))
                })?;
                if self.get(dst).shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "copy_prefixed",
                        left: self.get(dst).shape().to_vec(),
                        right: tensor.shape().to_vec(),
                    });
                }
                self.tensors[dst.0] = Arc::clone(tensor);
                copied += 1;
            }
        }
        Ok(copied)
    }
}
