//! Sectionalized mixture of experts.
//!
//! The pipeline is: a full-width pre-expert layer over all `E·L` tokens,
//! strided mean pooling by `r` down to `L_reduced = E·L/r` rows, a split of
//! the embedding into `E` contiguous column slices, one narrow transformer
//! layer per expert, and an aggregation layer over the re-concatenated
//! slices. There is no router: every expert always runs.
//!
//! With the on-model ratio `r = E²` each expert sees `L/E` rows of width
//! `d0/E`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adjoint::mean_pool_backward;
use crate::blocks::{
    init_layer, transformer_layer, transformer_layer_backward, transformer_layer_cached,
    LayerCache, LayerDims, LayerParams,
};
use crate::counter::{Category, CounterSnapshot, Meter, OpCounter};
use crate::error::{Error, Result};
use crate::gradcheck::Block;
use crate::params::ParamSet;
use crate::tensor::{mean_pool_strided, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionalConfig {
    /// Tokens per expert.
    pub l: usize,
    /// Expert count.
    pub e: usize,
    /// Embedding width.
    pub d0: usize,
    pub h_pre: usize,
    pub h_exp: usize,
    /// Sequence reduction ratio applied after the pre-expert layer.
    pub r: usize,
    pub ffn_mult_pre: usize,
    pub ffn_mult_exp: usize,
    pub ffn_mult_agg: usize,
    pub causal: bool,
    /// Run expert blocks on the rayon pool. Never changes results.
    pub parallel: bool,
    pub seed: u64,
}

impl SectionalConfig {
    /// Single-head config with the on-model reduction ratio `r = E²`.
    pub fn new(l: usize, e: usize, d0: usize) -> Self {
        Self {
            l,
            e,
            d0,
            h_pre: 1,
            h_exp: 1,
            r: e * e,
            ffn_mult_pre: 2,
            ffn_mult_exp: 2,
            ffn_mult_agg: 2,
            causal: false,
            parallel: false,
            seed: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.e * self.l
    }

    pub fn l_reduced(&self) -> usize {
        self.tokens() / self.r
    }

    pub fn expert_width(&self) -> usize {
        self.d0 / self.e
    }

    /// Whether the reduction ratio matches the cost model (`r = E²`).
    pub fn on_model(&self) -> bool {
        self.r == self.e * self.e
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("L", self.l),
            ("E", self.e),
            ("d0", self.d0),
            ("h_pre", self.h_pre),
            ("h_exp", self.h_exp),
            ("r", self.r),
            ("ffn_mult_pre", self.ffn_mult_pre),
            ("ffn_mult_exp", self.ffn_mult_exp),
            ("ffn_mult_agg", self.ffn_mult_agg),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d0.is_multiple_of(self.e) {
            return Err(Error::Config(format!(
                "d0={} is not divisible by E={}",
                self.d0, self.e
            )));
        }
        if !self.expert_width().is_multiple_of(self.h_exp) {
            return Err(Error::Config(format!(
                "expert width d0/E={} is not divisible by h_exp={}",
                self.expert_width(),
                self.h_exp
            )));
        }
        if !self.d0.is_multiple_of(self.h_pre) {
            return Err(Error::Config(format!(
                "d0={} is not divisible by h_pre={}",
                self.d0, self.h_pre
            )));
        }
        if !self.tokens().is_multiple_of(self.r) {
            return Err(Error::Config(format!(
                "E·L={} is not divisible by the reduction ratio r={}",
                self.tokens(),
                self.r
            )));
        }
        if self.d0 < 2 * self.e {
            return Err(Error::Config(format!(
                "expert width d0/E={} must be at least 2 for layer norm",
                self.expert_width()
            )));
        }
        Ok(())
    }

    pub fn pre_dims(&self) -> LayerDims {
        LayerDims {
            width: self.d0,
            heads: self.h_pre,
            d_ff: self.ffn_mult_pre * self.d0,
        }
    }

    pub fn expert_dims(&self) -> LayerDims {
        LayerDims {
            width: self.expert_width(),
            heads: self.h_exp,
            d_ff: self.ffn_mult_exp * self.expert_width(),
        }
    }

    /// The aggregation layer uses the pre-expert head count.
    pub fn agg_dims(&self) -> LayerDims {
        LayerDims {
            width: self.d0,
            heads: self.h_pre,
            d_ff: self.ffn_mult_agg * self.d0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionalParams {
    pub pre: LayerParams,
    pub experts: Vec<LayerParams>,
    pub agg: LayerParams,
}

impl SectionalParams {
    fn check(&self, cfg: &SectionalConfig) -> Result<()> {
        if self.experts.len() != cfg.e {
            return Err(Error::Config(format!(
                "config has E={} but parameters hold {} experts",
                cfg.e,
                self.experts.len()
            )));
        }
        let mismatch = self.pre.dims() != cfg.pre_dims()
            || self.agg.dims() != cfg.agg_dims()
            || self.experts.iter().any(|x| x.dims() != cfg.expert_dims());
        if mismatch {
            return Err(Error::Config(
                "parameter shapes do not match the config".into(),
            ));
        }
        Ok(())
    }
}

impl ParamSet for SectionalParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.pre.tensors();
        out.extend(self.experts.tensors());
        out.extend(self.agg.tensors());
        out
    }

    fn rebuild(&self, mut t: Vec<Tensor>) -> Self {
        let n_pre = self.pre.tensors().len();
        let n_exp = self.experts.tensors().len();
        let rest = t.split_off(n_pre);
        let pre = self.pre.rebuild(t);
        let mut rest = rest;
        let agg_t = rest.split_off(n_exp);
        Self {
            pre,
            experts: self.experts.rebuild(rest),
            agg: self.agg.rebuild(agg_t),
        }
    }
}

/// Deterministic parameters for `cfg`, drawn from `cfg.seed` in the order
/// pre-expert layer, experts `0..E`, aggregation layer.
pub fn init_params(cfg: &SectionalConfig) -> Result<SectionalParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pre = init_layer(cfg.pre_dims(), &mut rng)?;
    let experts = (0..cfg.e)
        .map(|_| init_layer(cfg.expert_dims(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let agg = init_layer(cfg.agg_dims(), &mut rng)?;
    Ok(SectionalParams { pre, experts, agg })
}

/// One counter per pipeline stage, so the audit can attribute MACs.
#[derive(Debug, Default)]
pub struct SectionalCounters {
    pub pre: OpCounter,
    pub experts: OpCounter,
    pub aggregation: OpCounter,
}

impl SectionalCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> CounterSnapshot {
        self.pre
            .snapshot()
            .merged(&self.experts.snapshot())
            .merged(&self.aggregation.snapshot())
    }
}

fn check_input(x: &Tensor, cfg: &SectionalConfig) -> Result<()> {
    if x.shape() != [cfg.tokens(), cfg.d0] {
        return Err(Error::Config(format!(
            "input shape {:?} does not match (E·L, d0) = ({}, {})",
            x.shape(),
            cfg.tokens(),
            cfg.d0
        )));
    }
    Ok(())
}

/// Full-width self-attention layer over all `E·L` tokens, then mean pooling
/// by `r` to `L_reduced` rows.
pub fn pre_expert_block(
    x: &Tensor,
    params: &SectionalParams,
    cfg: &SectionalConfig,
    meter: Meter<'_>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_input(x, cfg)?;
    let h = transformer_layer(x, &params.pre, cfg.causal, meter)?;
    mean_pool_strided(&h, cfg.r, meter)
}

/// Splits the embedding into `e` contiguous column slices.
pub fn split_embedding(z: &Tensor, e: usize) -> Result<Vec<Tensor>> {
    let (_, d0) = z.require_matrix("split_embedding")?;
    if e == 0 || d0 % e != 0 {
        return Err(Error::Config(format!("d0={d0} is not divisible by E={e}")));
    }
    let w = d0 / e;
    (0..e).map(|i| z.col_slice(i * w, (i + 1) * w)).collect()
}

/// One transformer layer at the expert's slice width.
pub fn expert_block_forward(
    slice: &Tensor,
    layer: &LayerParams,
    causal: bool,
    meter: Meter<'_>,
) -> Result<Tensor> {
    if slice.cols() != layer.width() {
        return Err(Error::dim(
            "expert_block_forward",
            slice.shape(),
            &[layer.width()],
        ));
    }
    transformer_layer(slice, layer, causal, meter)
}

/// Concatenates expert slices and runs one full-width layer. All MACs are
/// recorded under [`Category::Aggregation`].
pub fn aggregate(
    slices: &[Tensor],
    agg: &LayerParams,
    causal: bool,
    meter: Meter<'_>,
) -> Result<Tensor> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Config("aggregate needs at least one slice".into()))?;
    if let Some(bad) = slices.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::dim("aggregate", first.shape(), bad.shape()));
    }
    let merged = Tensor::concat_cols(slices)?;
    transformer_layer(
        &merged,
        agg,
        causal,
        meter.redirected(Category::Aggregation),
    )
}

fn run_experts<T: Send>(
    parallel: bool,
    slices: &[Tensor],
    experts: &[LayerParams],
    f: impl Fn(&Tensor, &LayerParams) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel {
        slices
            .par_iter()
            .zip(experts)
            .map(|(s, p)| f(s, p))
            .collect()
    } else {
        slices.iter().zip(experts).map(|(s, p)| f(s, p)).collect()
    }
}

/// End-to-end forward pass, `(E·L, d0) → (L_reduced, d0)`.
pub fn sectional_forward(
    x: &Tensor,
    params: &SectionalParams,
    cfg: &SectionalConfig,
    counters: &SectionalCounters,
) -> Result<Tensor> {
    params.check(cfg)?;
    let z = pre_expert_block(x, params, cfg, counters.pre.meter())?;
    let slices = split_embedding(&z, cfg.e)?;
    let outs = run_experts(cfg.parallel, &slices, &params.experts, |s, p| {
        expert_block_forward(s, p, cfg.causal, counters.experts.meter())
    })?;
    aggregate(&outs, &params.agg, cfg.causal, counters.aggregation.meter())
}

/// Exact parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub pre: usize,
    pub per_expert: usize,
    pub per_expert_attention: usize,
    pub experts: usize,
    pub aggregation: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.pre + self.experts + self.aggregation
    }
}

pub fn param_count(cfg: &SectionalConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let per_expert = cfg.expert_dims().param_count();
    Ok(ParamCount {
        pre: cfg.pre_dims().param_count(),
        per_expert,
        per_expert_attention: cfg.expert_dims().attention_param_count(),
        experts: cfg.e * per_expert,
        aggregation: cfg.agg_dims().param_count(),
    })
}

/// The whole sectional stack as a differentiable block, for gradient checks.
#[derive(Debug, Clone, Copy)]
pub struct SectionalBlock(pub SectionalConfig);

struct SectionalCache {
    pre: LayerCache,
    experts: Vec<LayerCache>,
    agg: LayerCache,
}

impl SectionalBlock {
    fn forward_cached(&self, x: &Tensor, p: &SectionalParams) -> Result<(Tensor, SectionalCache)> {
        let cfg = &self.0;
        cfg.validate()?;
        p.check(cfg)?;
        check_input(x, cfg)?;
        let m = Meter::detached();
        let (h, pre) = transformer_layer_cached(x, &p.pre, cfg.causal, m)?;
        let z = mean_pool_strided(&h, cfg.r, m)?;
        let slices = split_embedding(&z, cfg.e)?;
        let expert_runs = run_experts(cfg.parallel, &slices, &p.experts, |s, lp| {
            transformer_layer_cached(s, lp, cfg.causal, m)
        })?;
        let (outs, experts): (Vec<_>, Vec<_>) = expert_runs.into_iter().unzip();
        let merged = Tensor::concat_cols(&outs)?;
        let (y, agg) = transformer_layer_cached(&merged, &p.agg, cfg.causal, m)?;
        Ok((y, SectionalCache { pre, experts, agg }))
    }
}

impl Block for SectionalBlock {
    type Params = SectionalParams;

    fn forward(&self, x: &Tensor, p: &SectionalParams) -> Result<Tensor> {
        self.forward_cached(x, p).map(|(y, _)| y)
    }

    fn backward(
        &self,
        x: &Tensor,
        p: &SectionalParams,
        dy: &Tensor,
    ) -> Result<(Tensor, SectionalParams)> {
        let cfg = &self.0;
        let (_, cache) = self.forward_cached(x, p)?;
        let (dmerged, dagg) = transformer_layer_backward(&p.agg, &cache.agg, dy)?;
        let dslices = split_embedding(&dmerged, cfg.e)?;
        let mut dexperts = Vec::with_capacity(cfg.e);
        let mut dz_parts = Vec::with_capacity(cfg.e);
        for ((ds, lp), c) in dslices.iter().zip(&p.experts).zip(&cache.experts) {
            let (dslice, dp) = transformer_layer_backward(lp, c, ds)?;
            dz_parts.push(dslice);
            dexperts.push(dp);
        }
        let dz = Tensor::concat_cols(&dz_parts)?;
        let dh = mean_pool_backward(&dz, cfg.r)?;
        let (dx, dpre) = transformer_layer_backward(&p.pre, &cache.pre, &dh)?;
        Ok((
            dx,
            SectionalParams {
                pre: dpre,
                experts: dexperts,
                agg: dagg,
            },
        ))
    }
}
