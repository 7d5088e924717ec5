use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A structured parameter set that can be viewed as one flat vector.
///
/// Gradients use the same type as the parameters they belong to, so the
/// flattening order of a value and of its gradient always agree.
pub trait ParamSet: Sized {
    /// All tensors in a fixed order.
    fn tensors(&self) -> Vec<&Tensor>;

    /// Rebuilds `self`'s structure from tensors given in [`ParamSet::tensors`] order.
    fn rebuild(&self, tensors: Vec<Tensor>) -> Self;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                "ParamSet::with_flat",
                &[self.num_params()],
                &[flat.len()],
            ));
        }
        let mut offset = 0;
        let mut rebuilt = Vec::new();
        for t in self.tensors() {
            rebuilt.push(t.with_data(flat[offset..offset + t.len()].to_vec())?);
            offset += t.len();
        }
        Ok(self.rebuild(rebuilt))
    }
}

impl<P: ParamSet> ParamSet for Vec<P> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn rebuild(&self, mut tensors: Vec<Tensor>) -> Self {
        let mut out = Vec::with_capacity(self.len());
        for p in self {
            let rest = tensors.split_off(p.tensors().len());
            out.push(p.rebuild(tensors));
            tensors = rest;
        }
        out
    }
}
