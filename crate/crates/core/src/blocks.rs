//! Transformer building blocks: linear projection, multi-head attention,
//! position-wise feed-forward network and the pre-norm residual layer.
//!
//! Every forward pass reports MACs through a [`Meter`]. Each block also has
//! a backward pass producing input and parameter gradients; those are used
//! by [`crate::gradcheck`] and are never metered.
//!
//! Attention MACs are tallied as:
//! * `qkv`: the Q, K and V projections, `(Tq + 2·Tkv)·d²`;
//! * `attn_scores`: `QKᵀ` plus the weighted sum over `V`, `2·Tq·Tkv·d` over all heads;
//! * `other`: the output projection `Tq·d²`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adjoint::{layer_norm_backward, matmul_backward, mm, relu_backward, softmax_backward};
use crate::counter::{Category, Meter};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{
    add, add_row_broadcast, layer_norm_rows, matmul, relu, softmax_rows_masked, Tensor,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub eps: f64,
}

/// Shape of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub width: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!(
                "layer dims must be positive: {self:?}"
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Exact parameter count of a layer with these dims.
    pub fn param_count(&self) -> usize {
        let (w, f) = (self.width, self.d_ff);
        4 * w * w + (w * f + f + f * w + w) + 4 * w
    }

    pub fn attention_param_count(&self) -> usize {
        4 * self.width * self.width
    }
}

/// Flags controlling the score computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnOptions {
    pub causal: bool,
    pub scale_scores: bool,
}

impl Default for AttnOptions {
    fn default() -> Self {
        Self {
            causal: false,
            scale_scores: true,
        }
    }
}

impl AttnOptions {
    pub fn causal(causal: bool) -> Self {
        Self {
            causal,
            ..Self::default()
        }
    }
}

impl AttentionParams {
    pub fn width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [d, d] {
                return Err(Error::dim("AttentionParams", &[d, d], w.shape()));
            }
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {d} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn zeros(width: usize, heads: usize) -> Self {
        let z = Tensor::zeros(&[width, width]);
        Self {
            w_q: z.clone(),
            w_k: z.clone(),
            w_v: z.clone(),
            w_o: z,
            heads,
        }
    }
}

impl FfnParams {
    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, f) = self.w1.require_matrix("FfnParams")?;
        if self.b1.shape() != [f] || self.w2.shape() != [f, d] || self.b2.shape() != [d] {
            return Err(Error::dim("FfnParams", self.w1.shape(), self.w2.shape()));
        }
        Ok(())
    }

    pub fn zeros(width: usize, d_ff: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[width, d_ff]),
            b1: Tensor::zeros(&[d_ff]),
            w2: Tensor::zeros(&[d_ff, width]),
            b2: Tensor::zeros(&[width]),
        }
    }
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }

    fn apply(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        layer_norm_rows(x, &self.gamma, &self.beta, eps)
    }
}

impl LayerParams {
    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims {
            width: self.width(),
            heads: self.attn.heads,
            d_ff: self.ffn.w1.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        self.ffn.validate()?;
        let d = self.width();
        if self.ffn.width() != d {
            return Err(Error::dim("LayerParams", &[d], &[self.ffn.width()]));
        }
        for ln in [&self.ln1, &self.ln2] {
            if ln.gamma.shape() != [d] || ln.beta.shape() != [d] {
                return Err(Error::dim("LayerParams", &[d], ln.gamma.shape()));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        Ok(())
    }

    /// Layer whose attention and FFN weights are all zero: a residual identity.
    pub fn zeros(dims: LayerDims) -> Self {
        Self {
            attn: AttentionParams::zeros(dims.width, dims.heads),
            ffn: FfnParams::zeros(dims.width, dims.d_ff),
            ln1: LayerNormParams::identity(dims.width),
            ln2: LayerNormParams::identity(dims.width),
            eps: LAYER_NORM_EPS,
        }
    }

    /// Seeded initialization; see [`init_layer`].
    pub fn init(dims: LayerDims, seed: u64) -> Result<Self> {
        init_layer(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Weight matrix with entries drawn from a normal of standard deviation
/// `1/√fan_in`, truncated to three standard deviations.
pub fn init_weight(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 3.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("finite by construction")
}

/// Initializes one layer from `rng`: truncated-normal weights, zero biases,
/// unit layer-norm scale.
pub fn init_layer(dims: LayerDims, rng: &mut ChaCha8Rng) -> Result<LayerParams> {
    dims.validate()?;
    let w = dims.width;
    let attn = AttentionParams {
        w_q: init_weight(w, w, rng),
        w_k: init_weight(w, w, rng),
        w_v: init_weight(w, w, rng),
        w_o: init_weight(w, w, rng),
        heads: dims.heads,
    };
    let ffn = FfnParams {
        w1: init_weight(w, dims.d_ff, rng),
        b1: Tensor::zeros(&[dims.d_ff]),
        w2: init_weight(dims.d_ff, w, rng),
        b2: Tensor::zeros(&[w]),
    };
    Ok(LayerParams {
        attn,
        ffn,
        ln1: LayerNormParams::identity(w),
        ln2: LayerNormParams::identity(w),
        eps: LAYER_NORM_EPS,
    })
}

/// `X·W (+ b)`; records `T·d_in·d_out` MACs under `category`.
pub fn linear(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    category: Category,
    meter: Meter<'_>,
) -> Result<Tensor> {
    let y = matmul(x, w, category, meter)?;
    match b {
        Some(b) => add_row_broadcast(&y, b),
        None => Ok(y),
    }
}

/// Returns `(dX, dW, db)`.
pub(crate) fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (dx, dw) = matmul_backward(x, w, dy)?;
    Ok((dx, dw, has_bias.then(|| dy.col_sums())))
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    xq: Tensor,
    xkv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    merged: Tensor,
    scale: f64,
}

/// Multi-head attention of `xq` over `xkv`.
pub fn mha_forward(
    xq: &Tensor,
    xkv: &Tensor,
    p: &AttentionParams,
    opts: AttnOptions,
    meter: Meter<'_>,
) -> Result<Tensor> {
    mha_forward_cached(xq, xkv, p, opts, meter).map(|(y, _)| y)
}

/// Per-head attention weight matrices, mostly for inspection and tests.
pub fn attention_weights(
    xq: &Tensor,
    xkv: &Tensor,
    p: &AttentionParams,
    opts: AttnOptions,
) -> Result<Vec<Tensor>> {
    mha_forward_cached(xq, xkv, p, opts, Meter::detached()).map(|(_, c)| c.probs)
}

pub(crate) fn mha_forward_cached(
    xq: &Tensor,
    xkv: &Tensor,
    p: &AttentionParams,
    opts: AttnOptions,
    meter: Meter<'_>,
) -> Result<(Tensor, AttentionCache)> {
    let d = p.width();
    let (tq, dq) = xq.require_matrix("mha_forward")?;
    let (tkv, dkv) = xkv.require_matrix("mha_forward")?;
    if dq != d || dkv != d {
        return Err(Error::dim("mha_forward", xq.shape(), p.w_q.shape()));
    }
    if opts.causal && tq != tkv {
        return Err(Error::Contract(format!(
            "causal attention needs equal query and key lengths, got {tq} and {tkv}"
        )));
    }
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::Config(format!(
            "width {d} not divisible by {} heads",
            p.heads
        )));
    }
    let dh = d / p.heads;
    let scale = if opts.scale_scores {
        1.0 / (dh as f64).sqrt()
    } else {
        1.0
    };

    let q = matmul(xq, &p.w_q, Category::Qkv, meter)?;
    let k = matmul(xkv, &p.w_k, Category::Qkv, meter)?;
    let v = matmul(xkv, &p.w_v, Category::Qkv, meter)?;

    let mut probs = Vec::with_capacity(p.heads);
    let mut head_outputs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.col_slice(lo, hi)?;
        let kh = k.col_slice(lo, hi)?;
        let vh = v.col_slice(lo, hi)?;
        let scores = matmul(&qh, &kh.transpose()?, Category::AttnScores, meter)?.scale(scale)?;
        let a = softmax_rows_masked(&scores, opts.causal)?;
        head_outputs.push(matmul(&a, &vh, Category::AttnScores, meter)?);
        probs.push(a);
    }
    let merged = Tensor::concat_cols(&head_outputs)?;
    let y = matmul(&merged, &p.w_o, Category::Other, meter)?;
    let cache = AttentionCache {
        xq: xq.clone(),
        xkv: xkv.clone(),
        q,
        k,
        v,
        probs,
        merged,
        scale,
    };
    Ok((y, cache))
}

/// Returns `(dXq, dXkv, dParams)`.
pub(crate) fn mha_backward(
    p: &AttentionParams,
    cache: &AttentionCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, AttentionParams)> {
    let dh = p.width() / p.heads;
    let (dmerged, dw_o) = matmul_backward(&cache.merged, &p.w_o, dy)?;
    let mut dq_parts = Vec::with_capacity(p.heads);
    let mut dk_parts = Vec::with_capacity(p.heads);
    let mut dv_parts = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = cache.q.col_slice(lo, hi)?;
        let kh = cache.k.col_slice(lo, hi)?;
        let vh = cache.v.col_slice(lo, hi)?;
        let a = &cache.probs[h];
        let dout = dmerged.col_slice(lo, hi)?;
        let (da, dvh) = matmul_backward(a, &vh, &dout)?;
        let dscores = softmax_backward(a, &da)?.scale(cache.scale)?;
        dq_parts.push(mm(&dscores, &kh)?);
        dk_parts.push(mm(&dscores.transpose()?, &qh)?);
        dv_parts.push(dvh);
    }
    let dq = Tensor::concat_cols(&dq_parts)?;
    let dk = Tensor::concat_cols(&dk_parts)?;
    let dv = Tensor::concat_cols(&dv_parts)?;

    let (dxq, dw_q) = matmul_backward(&cache.xq, &p.w_q, &dq)?;
    let (dxkv_k, dw_k) = matmul_backward(&cache.xkv, &p.w_k, &dk)?;
    let (dxkv_v, dw_v) = matmul_backward(&cache.xkv, &p.w_v, &dv)?;
    let grads = AttentionParams {
        w_q: dw_q,
        w_k: dw_k,
        w_v: dw_v,
        w_o: dw_o,
        heads: p.heads,
    };
    Ok((dxq, add(&dxkv_k, &dxkv_v)?, grads))
}

#[derive(Debug, Clone)]
pub(crate) struct FfnCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

/// `relu(X·W1 + b1)·W2 + b2`; records `2·T·d·d_ff` MACs under `ffn`.
pub fn ffn_forward(x: &Tensor, p: &FfnParams, meter: Meter<'_>) -> Result<Tensor> {
    ffn_forward_cached(x, p, meter).map(|(y, _)| y)
}

pub(crate) fn ffn_forward_cached(
    x: &Tensor,
    p: &FfnParams,
    meter: Meter<'_>,
) -> Result<(Tensor, FfnCache)> {
    let pre = linear(x, &p.w1, Some(&p.b1), Category::Ffn, meter)?;
    let act = relu(&pre)?;
    let y = linear(&act, &p.w2, Some(&p.b2), Category::Ffn, meter)?;
    Ok((
        y,
        FfnCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

pub(crate) fn ffn_backward(
    p: &FfnParams,
    cache: &FfnCache,
    dy: &Tensor,
) -> Result<(Tensor, FfnParams)> {
    let (dact, dw2, db2) = linear_backward(&cache.act, &p.w2, true, dy)?;
    let dpre = relu_backward(&cache.pre, &dact)?;
    let (dx, dw1, db1) = linear_backward(&cache.x, &p.w1, true, &dpre)?;
    let grads = FfnParams {
        w1: dw1,
        b1: db1.expect("bias present"),
        w2: dw2,
        b2: db2.expect("bias present"),
    };
    Ok((dx, grads))
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    x: Tensor,
    attn: AttentionCache,
    mid: Tensor,
    ffn: FfnCache,
}

/// Pre-norm residual layer: `Y = X + MHA(LN₁(X))`, `Z = Y + FFN(LN₂(Y))`.
pub fn transformer_layer(
    x: &Tensor,
    p: &LayerParams,
    causal: bool,
    meter: Meter<'_>,
) -> Result<Tensor> {
    transformer_layer_cached(x, p, causal, meter).map(|(z, _)| z)
}

pub(crate) fn transformer_layer_cached(
    x: &Tensor,
    p: &LayerParams,
    causal: bool,
    meter: Meter<'_>,
) -> Result<(Tensor, LayerCache)> {
    let (_, d) = x.require_matrix("transformer_layer")?;
    if d != p.width() {
        return Err(Error::dim(
            "transformer_layer",
            x.shape(),
            p.attn.w_q.shape(),
        ));
    }
    let norm1 = p.ln1.apply(x, p.eps)?;
    let (attn_out, attn) =
        mha_forward_cached(&norm1, &norm1, &p.attn, AttnOptions::causal(causal), meter)?;
    let mid = add(x, &attn_out)?;
    let norm2 = p.ln2.apply(&mid, p.eps)?;
    let (ffn_out, ffn) = ffn_forward_cached(&norm2, &p.ffn, meter)?;
    let out = add(&mid, &ffn_out)?;
    let cache = LayerCache {
        x: x.clone(),
        attn,
        mid,
        ffn,
    };
    Ok((out, cache))
}

pub(crate) fn transformer_layer_backward(
    p: &LayerParams,
    cache: &LayerCache,
    dz: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    let (dnorm2, dffn) = ffn_backward(&p.ffn, &cache.ffn, dz)?;
    let (dmid_ln, dgamma2, dbeta2) = layer_norm_backward(&cache.mid, &p.ln2.gamma, p.eps, &dnorm2)?;
    let dmid = add(dz, &dmid_ln)?;
    let (dq, dkv, dattn) = mha_backward(&p.attn, &cache.attn, &dmid)?;
    let dnorm1 = add(&dq, &dkv)?;
    let (dx_ln, dgamma1, dbeta1) = layer_norm_backward(&cache.x, &p.ln1.gamma, p.eps, &dnorm1)?;
    let grads = LayerParams {
        attn: dattn,
        ffn: dffn,
        ln1: LayerNormParams {
            gamma: dgamma1,
            beta: dbeta1,
        },
        ln2: LayerNormParams {
            gamma: dgamma2,
            beta: dbeta2,
        },
        eps: p.eps,
    };
    Ok((add(&dmid, &dx_ln)?, grads))
}

impl ParamSet for LinearParams {
    fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.w).chain(self.b.as_ref()).collect()
    }

    fn rebuild(&self, mut t: Vec<Tensor>) -> Self {
        let b = self.b.as_ref().map(|_| t.pop().expect("bias tensor"));
        Self {
            w: t.pop().expect("weight tensor"),
            b,
        }
    }
}

impl ParamSet for AttentionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    fn rebuild(&self, t: Vec<Tensor>) -> Self {
        let [w_q, w_k, w_v, w_o]: [Tensor; 4] = t.try_into().expect("four attention tensors");
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads: self.heads,
        }
    }
}

impl ParamSet for FfnParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn rebuild(&self, t: Vec<Tensor>) -> Self {
        let [w1, b1, w2, b2]: [Tensor; 4] = t.try_into().expect("four ffn tensors");
        Self { w1, b1, w2, b2 }
    }
}

impl ParamSet for LayerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.attn.tensors();
        out.extend(self.ffn.tensors());
        out.extend([
            &self.ln1.gamma,
            &self.ln1.beta,
            &self.ln2.gamma,
            &self.ln2.beta,
        ]);
        out
    }

    fn rebuild(&self, mut t: Vec<Tensor>) -> Self {
        let rest = t.split_off(8);
        let ffn_t = t.split_off(4);
        let [g1, b1, g2, b2]: [Tensor; 4] = rest.try_into().expect("four layer-norm tensors");
        Self {
            attn: self.attn.rebuild(t),
            ffn: self.ffn.rebuild(ffn_t),
            ln1: LayerNormParams {
                gamma: g1,
                beta: b1,
            },
            ln2: LayerNormParams {
                gamma: g2,
                beta: b2,
            },
            eps: self.eps,
        }
    }
}
