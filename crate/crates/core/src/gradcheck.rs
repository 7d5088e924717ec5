//! Central-difference verification of hand-written adjoints.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    ffn_backward, ffn_forward_cached, linear, linear_backward, mha_backward, mha_forward_cached,
    transformer_layer_backward, transformer_layer_cached, AttentionParams, AttnOptions, FfnParams,
    LayerParams, LinearParams,
};
use crate::counter::{Category, Meter};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Coordinates sampled per check when the parameter vector is larger.
pub const SAMPLED_COORDINATES: usize = 256;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged by their absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// A scalar function together with its adjoint-computed gradient.
pub trait Differentiable {
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<CoordinateError>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `f.gradient` with `(f(θ+h·e) − f(θ−h·e)) / 2h` on every
/// coordinate when there are at most [`SAMPLED_COORDINATES`], otherwise on a
/// fixed pseudo-random sample of that size.
pub fn grad_check<F: Differentiable + ?Sized>(
    f: &F,
    theta: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let analytic = f.gradient(theta)?;
    if analytic.len() != theta.len() {
        return Err(Error::dim("grad_check", &[theta.len()], &[analytic.len()]));
    }
    let coords: Vec<usize> = if theta.len() <= SAMPLED_COORDINATES {
        (0..theta.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let mut picked = index::sample(&mut rng, theta.len(), SAMPLED_COORDINATES).into_vec();
        picked.sort_unstable();
        picked
    };

    let eval = |t: &[f64]| -> Result<f64> {
        let v = f.value(t)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("objective evaluated to {v}")))
        }
    };
    eval(theta)?;

    let mut work = theta.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut failures = Vec::new();
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + h;
        let plus = eval(&work)?;
        work[i] = orig - h;
        let minus = eval(&work)?;
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = rel_error(analytic[i], numeric);
        max_rel_error = max_rel_error.max(err);
        if err > tol {
            failures.push(CoordinateError {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: err,
            });
        }
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        max_rel_error,
        failures,
        h,
        tol,
    })
}

/// A differentiable map from an input matrix and a parameter set to an output matrix.
pub trait Block {
    type Params: ParamSet;

    fn forward(&self, x: &Tensor, params: &Self::Params) -> Result<Tensor>;

    /// Input and parameter gradients of `⟨dy, forward(x)⟩`.
    fn backward(
        &self,
        x: &Tensor,
        params: &Self::Params,
        dy: &Tensor,
    ) -> Result<(Tensor, Self::Params)>;
}

/// Scalar probe `⟨w, block(x; θ)⟩` over the joint vector `[x, θ]`.
#[derive(Debug, Clone)]
pub struct Probe<B: Block> {
    pub block: B,
    pub x: Tensor,
    pub params: B::Params,
    pub weights: Tensor,
}

impl<B: Block> Probe<B> {
    /// Probe with random weights drawn from `seed`; the output shape is
    /// found by one forward pass.
    pub fn random(block: B, x: Tensor, params: B::Params, seed: u64) -> Result<Self> {
        let out = block.forward(&x, &params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = out.with_data(
            (0..out.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        Ok(Self {
            block,
            x,
            params,
            weights,
        })
    }

    /// Probe that sums every output entry.
    pub fn sum(block: B, x: Tensor, params: B::Params) -> Result<Self> {
        let out = block.forward(&x, &params)?;
        let weights = Tensor::filled(out.shape(), 1.0);
        Ok(Self {
            block,
            x,
            params,
            weights,
        })
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.x.data().to_vec();
        t.extend(self.params.flatten());
        t
    }

    fn split(&self, theta: &[f64]) -> Result<(Tensor, B::Params)> {
        if theta.len() != self.x.len() + self.params.num_params() {
            return Err(Error::dim(
                "Probe",
                &[self.x.len() + self.params.num_params()],
                &[theta.len()],
            ));
        }
        let (xs, ps) = theta.split_at(self.x.len());
        Ok((self.x.with_data(xs.to_vec())?, self.params.with_flat(ps)?))
    }

    pub fn check(&self, h: f64, tol: f64) -> Result<GradCheckReport> {
        grad_check(self, &self.theta(), h, tol)
    }
}

impl<B: Block> Differentiable for Probe<B> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        let (x, p) = self.split(theta)?;
        let y = self.block.forward(&x, &p)?;
        Ok(y.data()
            .iter()
            .zip(self.weights.data())
            .map(|(a, b)| a * b)
            .sum())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (x, p) = self.split(theta)?;
        let (dx, dp) = self.block.backward(&x, &p, &self.weights)?;
        let mut g = dx.into_data();
        g.extend(dp.flatten());
        Ok(g)
    }
}

/// Wraps a function and scales its gradient, so a checker can be shown to
/// reject a wrong adjoint.
#[derive(Debug, Clone)]
pub struct CorruptedAdjoint<F>(pub F);

impl<F: Differentiable> Differentiable for CorruptedAdjoint<F> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.0.value(theta)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .0
            .gradient(theta)?
            .into_iter()
            .map(|g| 1.5 * g + 1e-3)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearBlock;

impl Block for LinearBlock {
    type Params = LinearParams;

    fn forward(&self, x: &Tensor, p: &LinearParams) -> Result<Tensor> {
        linear(x, &p.w, p.b.as_ref(), Category::Other, Meter::detached())
    }

    fn backward(
        &self,
        x: &Tensor,
        p: &LinearParams,
        dy: &Tensor,
    ) -> Result<(Tensor, LinearParams)> {
        let (dx, w, b) = linear_backward(x, &p.w, p.b.is_some(), dy)?;
        Ok((dx, LinearParams { w, b }))
    }
}

/// Self-attention over the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionBlock(pub AttnOptions);

impl Block for AttentionBlock {
    type Params = AttentionParams;

    fn forward(&self, x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
        mha_forward_cached(x, x, p, self.0, Meter::detached()).map(|(y, _)| y)
    }

    fn backward(
        &self,
        x: &Tensor,
        p: &AttentionParams,
        dy: &Tensor,
    ) -> Result<(Tensor, AttentionParams)> {
        let (_, cache) = mha_forward_cached(x, x, p, self.0, Meter::detached())?;
        let (dq, dkv, grads) = mha_backward(p, &cache, dy)?;
        Ok((crate::tensor::add(&dq, &dkv)?, grads))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FfnBlock;

impl Block for FfnBlock {
    type Params = FfnParams;

    fn forward(&self, x: &Tensor, p: &FfnParams) -> Result<Tensor> {
        ffn_forward_cached(x, p, Meter::detached()).map(|(y, _)| y)
    }

    fn backward(&self, x: &Tensor, p: &FfnParams, dy: &Tensor) -> Result<(Tensor, FfnParams)> {
        let (_, cache) = ffn_forward_cached(x, p, Meter::detached())?;
        ffn_backward(p, &cache, dy)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LayerBlock {
    pub causal: bool,
}

impl Block for LayerBlock {
    type Params = LayerParams;

    fn forward(&self, x: &Tensor, p: &LayerParams) -> Result<Tensor> {
        transformer_layer_cached(x, p, self.causal, Meter::detached()).map(|(y, _)| y)
    }

    fn backward(&self, x: &Tensor, p: &LayerParams, dy: &Tensor) -> Result<(Tensor, LayerParams)> {
        let (_, cache) = transformer_layer_cached(x, p, self.causal, Meter::detached())?;
        transformer_layer_backward(p, &cache, dy)
    }
}
