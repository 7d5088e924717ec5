//! Token-routed mixture of experts: top-k softmax gating, capacity-limited
//! dispatch to full-width experts, and weighted recombination with a
//! residual path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::{
    ffn_forward, init_weight, mha_forward, AttentionParams, AttnOptions, FfnParams,
};
use crate::counter::{Category, Meter};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub expert: usize,
    pub weight: f64,
}

/// Per-token expert choices, in descending logit order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingAssignment {
    pub num_experts: usize,
    pub tokens: Vec<Vec<Selection>>,
    /// Parallel to `tokens`; set by [`RoutingAssignment::apply_capacity`].
    pub dropped: Vec<Vec<bool>>,
}

impl RoutingAssignment {
    fn new(num_experts: usize, tokens: Vec<Vec<Selection>>) -> Self {
        let dropped = tokens.iter().map(|s| vec![false; s.len()]).collect();
        Self {
            num_experts,
            tokens,
            dropped,
        }
    }

    pub fn assignments(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }

    /// Marks assignments beyond `capacity` per expert as dropped, visiting
    /// tokens in order and each token's selections in rank order.
    pub fn apply_capacity(&self, capacity: usize) -> Self {
        let mut load = vec![0usize; self.num_experts];
        let dropped = self
            .tokens
            .iter()
            .map(|sels| {
                sels.iter()
                    .map(|s| {
                        if load[s.expert] < capacity {
                            load[s.expert] += 1;
                            false
                        } else {
                            true
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            num_experts: self.num_experts,
            tokens: self.tokens.clone(),
            dropped,
        }
    }

    /// Kept token indices per expert, in token order.
    fn kept_by_expert(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_experts];
        for (t, (sels, drops)) in self.tokens.iter().zip(&self.dropped).enumerate() {
            for (s, &d) in sels.iter().zip(drops) {
                if !d {
                    out[s.expert].push(t);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    pub tokens_per_expert: Vec<usize>,
    pub coefficient_of_variation: f64,
    /// Natural-log entropy of the kept-assignment distribution over experts.
    pub entropy: f64,
    pub overflow_count: usize,
}

/// Top-k gating. Logits `X·Wg` are metered under `router`; ties go to the
/// lower expert index; gate weights are a softmax over the selected logits.
pub fn gate(x: &Tensor, wg: &Tensor, k: usize, meter: Meter<'_>) -> Result<RoutingAssignment> {
    let (_, e) = wg.require_matrix("gate")?;
    if k == 0 || k > e {
        return Err(Error::Config(format!(
            "top-k must satisfy 1 <= k <= E={e}, got {k}"
        )));
    }
    let logits = matmul(x, wg, Category::Router, meter)?;
    let tokens = (0..logits.rows())
        .map(|t| select_top_k(logits.row(t), k))
        .collect();
    Ok(RoutingAssignment::new(e, tokens))
}

pub fn select_top_k(logits: &[f64], k: usize) -> Vec<Selection> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let max = logits[order[0]];
    let exps: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    order
        .into_iter()
        .zip(exps)
        .map(|(expert, w)| Selection {
            expert,
            weight: w / z,
        })
        .collect()
}

/// Every token sent to exactly one expert with weight 1, in contiguous
/// blocks of `tokens / e`.
pub fn uniform_assignment(tokens: usize, e: usize) -> Result<RoutingAssignment> {
    if e == 0 || !tokens.is_multiple_of(e) {
        return Err(Error::Config(format!(
            "cannot split {tokens} tokens uniformly over {e} experts"
        )));
    }
    let per = tokens / e;
    let sels = (0..tokens)
        .map(|t| {
            vec![Selection {
                expert: t / per,
                weight: 1.0,
            }]
        })
        .collect();
    Ok(RoutingAssignment::new(e, sels))
}

/// `ceil(capacity_factor · k · T / E)`.
pub fn expert_capacity(capacity_factor: f64, k: usize, tokens: usize, e: usize) -> Result<usize> {
    if !(capacity_factor >= 0.0 && capacity_factor.is_finite()) {
        return Err(Error::Config(format!(
            "capacity factor must be finite and non-negative, got {capacity_factor}"
        )));
    }
    Ok((capacity_factor * (k * tokens) as f64 / e as f64).ceil() as usize)
}

pub fn routing_stats(assignment: &RoutingAssignment, e: usize) -> RoutingStats {
    let mut counts = vec![0usize; e];
    let mut overflow = 0;
    for (sels, drops) in assignment.tokens.iter().zip(&assignment.dropped) {
        for (s, &d) in sels.iter().zip(drops) {
            if d {
                overflow += 1;
            } else {
                counts[s.expert] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mean = total as f64 / e as f64;
    let cv = if mean == 0.0 {
        0.0
    } else {
        let var = counts
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / e as f64;
        var.sqrt() / mean
    };
    let entropy = if total == 0 {
        0.0
    } else {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum::<f64>()
            .max(0.0)
    };
    RoutingStats {
        tokens_per_expert: counts,
        coefficient_of_variation: cv,
        entropy,
        overflow_count: overflow,
    }
}

/// A full-width expert applied to the batch of tokens routed to it.
pub trait Expert: Sync {
    fn apply(&self, x: &Tensor, meter: Meter<'_>) -> Result<Tensor>;
}

impl Expert for FfnParams {
    fn apply(&self, x: &Tensor, meter: Meter<'_>) -> Result<Tensor> {
        ffn_forward(x, self, meter)
    }
}

/// Non-causal self-attention over the expert's tokens.
impl Expert for AttentionParams {
    fn apply(&self, x: &Tensor, meter: Meter<'_>) -> Result<Tensor> {
        mha_forward(x, x, self, AttnOptions::default(), meter)
    }
}

/// Runs each expert on its kept tokens and returns
/// `x + Σ weight · expert(x)` per token, plus routing statistics.
pub fn dispatch_combine<X: Expert>(
    x: &Tensor,
    assignment: &RoutingAssignment,
    experts: &[X],
    capacity_factor: f64,
    parallel: bool,
    meter: Meter<'_>,
) -> Result<(Tensor, RoutingStats)> {
    let (t, d) = x.require_matrix("dispatch_combine")?;
    let e = assignment.num_experts;
    if experts.len() != e || assignment.tokens.len() != t {
        return Err(Error::Config(format!(
            "assignment covers {} tokens over {e} experts but got {t} tokens and {} experts",
            assignment.tokens.len(),
            experts.len()
        )));
    }
    let k = assignment.tokens.iter().map(Vec::len).max().unwrap_or(0);
    let capacity = expert_capacity(capacity_factor, k, t, e)?;
    let routed = assignment.apply_capacity(capacity);
    let kept = routed.kept_by_expert();

    let run = |(expert, rows): (&X, &Vec<usize>)| -> Result<Option<Tensor>> {
        if rows.is_empty() {
            return Ok(None);
        }
        expert.apply(&x.gather_rows(rows)?, meter).map(Some)
    };
    let outs: Vec<Option<Tensor>> = if parallel {
        experts
            .par_iter()
            .zip(&kept)
            .map(run)
            .collect::<Result<_>>()?
    } else {
        experts.iter().zip(&kept).map(run).collect::<Result<_>>()?
    };

    // Position of each token inside its expert's batch.
    let mut slot = vec![vec![usize::MAX; e]; t];
    for (ex, rows) in kept.iter().enumerate() {
        for (pos, &tok) in rows.iter().enumerate() {
            slot[tok][ex] = pos;
        }
    }
    let mut out = x.data().to_vec();
    for tok in 0..t {
        let orow = &mut out[tok * d..(tok + 1) * d];
        for (s, &dropped) in routed.tokens[tok].iter().zip(&routed.dropped[tok]) {
            if dropped {
                continue;
            }
            let y = outs[s.expert].as_ref().expect("expert ran on kept token");
            for (o, v) in orow.iter_mut().zip(y.row(slot[tok][s.expert])) {
                *o += s.weight * v;
            }
        }
    }
    Ok((Tensor::matrix(t, d, out)?, routing_stats(&routed, e)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraditionalParams {
    /// Router weights, `d0 × E`.
    pub gate: Tensor,
    pub experts: Vec<FfnParams>,
}

impl TraditionalParams {
    pub fn init(d0: usize, e: usize, d_ff: usize, seed: u64) -> Result<Self> {
        if d0 == 0 || e == 0 || d_ff == 0 {
            return Err(Error::Config(
                "traditional MoE dims must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = init_weight(d0, e, &mut rng);
        let experts = (0..e)
            .map(|_| FfnParams {
                w1: init_weight(d0, d_ff, &mut rng),
                b1: Tensor::zeros(&[d_ff]),
                w2: init_weight(d_ff, d0, &mut rng),
                b2: Tensor::zeros(&[d0]),
            })
            .collect();
        Ok(Self { gate, experts })
    }

    pub fn param_count(&self) -> usize {
        self.gate.len()
            + self
                .experts
                .iter()
                .map(|p| p.w1.len() + p.b1.len() + p.w2.len() + p.b2.len())
                .sum::<usize>()
    }
}

/// Gate, then dispatch and combine. Output shape equals input shape.
pub fn traditional_forward(
    x: &Tensor,
    params: &TraditionalParams,
    k: usize,
    capacity_factor: f64,
    parallel: bool,
    meter: Meter<'_>,
) -> Result<(Tensor, RoutingStats)> {
    let assignment = gate(x, &params.gate, k, meter)?;
    dispatch_combine(
        x,
        &assignment,
        &params.experts,
        capacity_factor,
        parallel,
        meter,
    )
}
