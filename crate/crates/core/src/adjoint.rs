//! Vector-Jacobian products for the tensor kernels.
//!
//! Backward passes are never metered.

use std::str::FromStr;

use crate::counter::{Category, Meter};
use crate::error::{Error, Result};
use crate::tensor::{matmul, row_moments, Tensor};

/// Epsilon used when a layer-norm adjoint is requested by name.
pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjointOp {
    Matmul,
    SoftmaxRows,
    LayerNormRows {
        eps: f64,
    },
    /// The pooling ratio is recovered from the input and upstream row counts.
    MeanPoolStrided,
    Add,
    Relu,
}

impl FromStr for AdjointOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => AdjointOp::Matmul,
            "softmax_rows" => AdjointOp::SoftmaxRows,
            "layer_norm_rows" => AdjointOp::LayerNormRows {
                eps: DEFAULT_LN_EPS,
            },
            "mean_pool_strided" => AdjointOp::MeanPoolStrided,
            "add" => AdjointOp::Add,
            "relu" => AdjointOp::Relu,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

impl AdjointOp {
    fn arity(self) -> usize {
        match self {
            AdjointOp::Matmul | AdjointOp::Add => 2,
            AdjointOp::LayerNormRows { .. } => 3,
            _ => 1,
        }
    }

    fn check_arity(self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.len() != self.arity() {
            return Err(Error::Contract(format!(
                "{self:?} takes {} inputs, got {}",
                self.arity(),
                inputs.len()
            )));
        }
        Ok(())
    }
}

/// Vector-Jacobian product of `op` at `inputs`, one gradient per input.
pub fn vjp(op: AdjointOp, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
    op.check_arity(inputs)?;
    match op {
        AdjointOp::Matmul => {
            let (ga, gb) = matmul_backward(inputs[0], inputs[1], upstream)?;
            Ok(vec![ga, gb])
        }
        AdjointOp::SoftmaxRows => {
            let y = crate::tensor::softmax_rows(inputs[0])?;
            Ok(vec![softmax_backward(&y, upstream)?])
        }
        AdjointOp::LayerNormRows { eps } => {
            let (gx, gg, gb) = layer_norm_backward(inputs[0], inputs[1], eps, upstream)?;
            Ok(vec![gx, gg, gb])
        }
        AdjointOp::MeanPoolStrided => {
            let (t, _) = inputs[0].require_matrix("mean_pool_strided")?;
            let out_rows = upstream.rows();
            if out_rows == 0 || t % out_rows != 0 || upstream.cols() != inputs[0].cols() {
                return Err(Error::dim(
                    "mean_pool_strided vjp",
                    inputs[0].shape(),
                    upstream.shape(),
                ));
            }
            Ok(vec![mean_pool_backward(upstream, t / out_rows)?])
        }
        AdjointOp::Add => {
            check_same(upstream, inputs[0], "add vjp")?;
            check_same(upstream, inputs[1], "add vjp")?;
            Ok(vec![upstream.clone(), upstream.clone()])
        }
        AdjointOp::Relu => Ok(vec![relu_backward(inputs[0], upstream)?]),
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn mm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, b, Category::Other, Meter::detached())
}

/// `(G·Bᵀ, Aᵀ·G)`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = a.require_matrix("matmul vjp")?;
    let (_, n) = b.require_matrix("matmul vjp")?;
    if g.shape() != [m, n] {
        return Err(Error::dim("matmul vjp", &[m, n], g.shape()));
    }
    Ok((mm(g, &b.transpose()?)?, mm(&a.transpose()?, g)?))
}

/// Row-wise `y ⊙ (g − ⟨g, y⟩)`.
pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_same(y, g, "softmax vjp")?;
    let n = y.cols();
    let mut out = Vec::with_capacity(y.len());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), g.row(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
    }
    Tensor::matrix(y.rows(), n, out)
}

/// Returns `(dX, dGamma, dBeta)`.
pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_same(x, g, "layer_norm vjp")?;
    let (m, n) = x.require_matrix("layer_norm vjp")?;
    if gamma.shape() != [n] {
        return Err(Error::dim("layer_norm vjp", x.shape(), gamma.shape()));
    }
    let mut dx = vec![0.0; m * n];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    let nf = n as f64;
    for i in 0..m {
        let row = x.row(i);
        let (mean, inv_std) = row_moments(row, eps);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
        let gr = g.row(i);
        let dxhat: Vec<f64> = gr.iter().zip(gamma.data()).map(|(a, b)| a * b).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
        for j in 0..n {
            dx[i * n + j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            dgamma[j] += gr[j] * xhat[j];
            dbeta[j] += gr[j];
        }
    }
    Ok((
        Tensor::matrix(m, n, dx)?,
        Tensor::vector(dgamma)?,
        Tensor::vector(dbeta)?,
    ))
}

/// Each pooled row's gradient is spread as `g / r` over its `r` source rows.
pub(crate) fn mean_pool_backward(g: &Tensor, r: usize) -> Result<Tensor> {
    let (rows, d) = g.require_matrix("mean_pool vjp")?;
    let mut out = Vec::with_capacity(rows * r * d);
    for i in 0..rows {
        for _ in 0..r {
            out.extend(g.row(i).iter().map(|v| v / r as f64));
        }
    }
    Tensor::matrix(rows * r, d, out)
}

pub(crate) fn relu_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    x.zip_with(g, "relu vjp", |xv, gv| if xv > 0.0 { gv } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Scalar probe `⟨upstream, f(inputs)⟩` differentiated by central differences.
    fn fd_vjp(
        f: &dyn Fn(&[Tensor]) -> Tensor,
        inputs: &[Tensor],
        upstream: &Tensor,
        h: f64,
    ) -> Vec<Vec<f64>> {
        let probe = |xs: &[Tensor]| -> f64 {
            f(xs)
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        inputs
            .iter()
            .enumerate()
            .map(|(which, t)| {
                (0..t.len())
                    .map(|k| {
                        let mut plus = inputs.to_vec();
                        let mut minus = inputs.to_vec();
                        let mut d = t.data().to_vec();
                        d[k] += h;
                        plus[which] = t.with_data(d.clone()).unwrap();
                        d[k] -= 2.0 * h;
                        minus[which] = t.with_data(d).unwrap();
                        (probe(&plus) - probe(&minus)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    fn assert_close(analytic: &[Tensor], numeric: &[Vec<f64>]) {
        for (a, n) in analytic.iter().zip(numeric) {
            for (&av, &nv) in a.data().iter().zip(n) {
                if av.abs().max(nv.abs()) > 1e-8 {
                    let rel = (av - nv).abs() / av.abs().max(nv.abs());
                    assert!(rel < 1e-5, "analytic {av} numeric {nv} rel {rel}");
                }
            }
        }
    }

    fn check(
        op: AdjointOp,
        shapes: &[&[usize]],
        f: &dyn Fn(&[Tensor]) -> Tensor,
        out_shape: &[usize],
    ) {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let upstream = random(&mut rng, out_shape);
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let analytic = vjp(op, &refs, &upstream).unwrap();
            let numeric = fd_vjp(f, &inputs, &upstream, 1e-5);
            assert_close(&analytic, &numeric);
        }
    }

    #[test]
    fn matmul_vjp_matches_finite_differences() {
        check(
            AdjointOp::Matmul,
            &[&[3, 4], &[4, 2]],
            &|x| mm(&x[0], &x[1]).unwrap(),
            &[3, 2],
        );
    }

    #[test]
    fn softmax_vjp_matches_finite_differences() {
        check(
            AdjointOp::SoftmaxRows,
            &[&[3, 5]],
            &|x| crate::tensor::softmax_rows(&x[0]).unwrap(),
            &[3, 5],
        );
    }

    #[test]
    fn layer_norm_vjp_matches_finite_differences() {
        let op = AdjointOp::LayerNormRows { eps: 1e-5 };
        check(
            op,
            &[&[3, 6], &[6], &[6]],
            &|x| crate::tensor::layer_norm_rows(&x[0], &x[1], &x[2], 1e-5).unwrap(),
            &[3, 6],
        );
    }

    #[test]
    fn mean_pool_vjp_matches_finite_differences() {
        check(
            AdjointOp::MeanPoolStrided,
            &[&[6, 3]],
            &|x| crate::tensor::mean_pool_strided(&x[0], 3, Meter::detached()).unwrap(),
            &[2, 3],
        );
    }

    #[test]
    fn add_and_relu_vjp_match_finite_differences() {
        check(
            AdjointOp::Add,
            &[&[2, 3], &[2, 3]],
            &|x| crate::tensor::add(&x[0], &x[1]).unwrap(),
            &[2, 3],
        );
        check(
            AdjointOp::Relu,
            &[&[4, 4]],
            &|x| crate::tensor::relu(&x[0]).unwrap(),
            &[4, 4],
        );
    }

    #[test]
    fn pool_vjp_broadcasts_half() {
        let x = Tensor::zeros(&[2, 2]);
        let g = Tensor::from_rows(&[[4.0, -2.0]]).unwrap();
        let out = vjp(AdjointOp::MeanPoolStrided, &[&x], &g).unwrap();
        assert_eq!(out[0].data(), &[2.0, -1.0, 2.0, -1.0]);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert_eq!(
            "conv2d".parse::<AdjointOp>().unwrap_err(),
            Error::UnsupportedOp("conv2d".into())
        );
        assert_eq!("relu".parse::<AdjointOp>().unwrap(), AdjointOp::Relu);
    }

    #[test]
    fn upstream_shape_is_validated() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 4]);
        assert!(vjp(AdjointOp::Matmul, &[&a, &b], &Tensor::zeros(&[2, 3])).is_err());
        assert!(vjp(AdjointOp::Matmul, &[&a], &Tensor::zeros(&[2, 4])).is_err());
    }
}
