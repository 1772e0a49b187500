//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::rng::SplitMix64;

use super::{Tape, Tensor, Var};

/// Denominator floor for the relative error, so gradients that are zero
/// on both sides do not divide by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub elements: usize,
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the backward pass of the scalar function `f` against central
/// differences with step `h`, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = f(&tape, &vars)?.backward()?;

    let eval = |i: usize, j: usize, delta: f64| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(m, x)| {
                let mut x = x.clone();
                if m == i {
                    x.data_mut()[j] += delta;
                }
                t.leaf(x)
            })
            .collect();
        Ok(f(&t, &vs)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&vars[i]);
        for j in 0..input.numel() {
            let numeric = (eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h);
            let err = relative_error(analytic.data()[j], numeric);
            report.elements += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Worst-case result of one op over several random shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

pub const SUITE_STEP: f64 = 1e-3;

pub const SUITE_OPS: [&str; 22] = [
    "conv2d",
    "conv2d_transpose",
    "add_channel_bias",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "instance_norm",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sum",
    "mean",
    "log",
    "l2_norm",
    "sample_l2_norm",
    "mse",
    "spatial_mean",
    "reshape",
];

struct Gen(SplitMix64);

impl Gen {
    fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.0.below(hi - lo + 1)
    }

    fn nchw(&mut self) -> [usize; 4] {
        [self.int(1, 2), self.int(1, 3), self.int(2, 5), self.int(2, 5)]
    }

    fn uniform(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| lo + (hi - lo) * self.0.uniform())
    }

    /// Values in ±[0.05, 1), kept away from the kinks of piecewise ops.
    fn away_from_zero(&mut self, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims.to_vec(), |_| {
            let m = 0.05 + 0.95 * self.0.uniform();
            if self.0.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
    }
}

/// Reduces a tensor-valued op to a scalar through a fixed random weighting
/// so every output element contributes a distinct coefficient.
fn weigh<'t>(y: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let w = y.tape().constant(w.clone().reshape(y.dims())?);
    Ok(y.mul(&w)?.sum())
}

fn check_op(op: &str, g: &mut Gen) -> Result<f64> {
    let h = SUITE_STEP;
    let dims = g.nchw();
    let numel: usize = dims.iter().product();
    let w = g.uniform(&[numel], -1.0, 1.0);
    let x = g.uniform(&dims, -1.0, 1.0);
    let report = match op {
        "conv2d" => {
            let (stride, pad) = (g.int(1, 2), g.int(0, 1));
            let k = g.int(1, 3.min(dims[2].min(dims[3]) + 2 * pad));
            let cout = g.int(1, 3);
            let kernel = g.uniform(&[cout, dims[1], k, k], -1.0, 1.0);
            let probe = Tape::new();
            let out_dims = probe
                .constant(x.clone())
                .conv2d(&probe.constant(kernel.clone()), stride, pad)?
                .dims();
            let w = g.uniform(&out_dims, -1.0, 1.0);
            check_gradients(&[x, kernel], h, |_, v| weigh(v[0].conv2d(&v[1], stride, pad)?, &w))?
        }
        "conv2d_transpose" => {
            let k = g.int(2, 4);
            let (stride, pad) = (g.int(1, 2), g.int(0, 1));
            let cout = g.int(1, 3);
            let kernel = g.uniform(&[dims[1], cout, k, k], -1.0, 1.0);
            let probe = Tape::new();
            let out_dims = probe
                .constant(x.clone())
                .conv2d_transpose(&probe.constant(kernel.clone()), stride, pad)?
                .dims();
            let w = g.uniform(&out_dims, -1.0, 1.0);
            check_gradients(&[x, kernel], h, |_, v| {
                weigh(v[0].conv2d_transpose(&v[1], stride, pad)?, &w)
            })?
        }
        "add_channel_bias" => {
            let b = g.uniform(&[dims[1]], -1.0, 1.0);
            check_gradients(&[x, b], h, |_, v| weigh(v[0].add_channel_bias(&v[1])?, &w))?
        }
        "relu" => {
            let x = g.away_from_zero(&dims);
            check_gradients(&[x], h, |_, v| weigh(v[0].relu(), &w))?
        }
        "leaky_relu" => {
            let x = g.away_from_zero(&dims);
            check_gradients(&[x], h, |_, v| weigh(v[0].leaky_relu(0.2), &w))?
        }
        "sigmoid" => check_gradients(&[x.map(|v| 3.0 * v)], h, |_, v| weigh(v[0].sigmoid(), &w))?,
        "tanh" => check_gradients(&[x.map(|v| 2.0 * v)], h, |_, v| weigh(v[0].tanh(), &w))?,
        "instance_norm" => {
            let gain = g.uniform(&[dims[1]], 0.5, 1.5);
            let bias = g.uniform(&[dims[1]], -1.0, 1.0);
            check_gradients(&[x, gain, bias], h, |_, v| {
                weigh(v[0].instance_norm(&v[1], &v[2], 1e-5)?, &w)
            })?
        }
        "concat_channels" => {
            let other_dims = [dims[0], g.int(1, 3), dims[2], dims[3]];
            let other = g.uniform(&other_dims, -1.0, 1.0);
            let total = numel + other.numel();
            let w = g.uniform(&[total], -1.0, 1.0);
            check_gradients(&[x, other], h, |_, v| weigh(v[0].concat_channels(&v[1])?, &w))?
        }
        "add" | "sub" | "mul" => {
            let y = g.uniform(&dims, -1.0, 1.0);
            check_gradients(&[x, y], h, |_, v| {
                let out = match op {
                    "add" => v[0].add(&v[1])?,
                    "sub" => v[0].sub(&v[1])?,
                    _ => v[0].mul(&v[1])?,
                };
                weigh(out, &w)
            })?
        }
        "scale" => check_gradients(&[x], h, |_, v| weigh(v[0].scale(-1.7), &w))?,
        "add_scalar" => check_gradients(&[x], h, |_, v| Ok(v[0].add_scalar(0.3).mul(&v[0])?.sum()))?,
        "sum" => check_gradients(&[x], h, |_, v| Ok(v[0].sum().scale(2.0).tanh()))?,
        "mean" => check_gradients(&[x], h, |_, v| Ok(v[0].mean().scale(3.0).tanh()))?,
        "log" => {
            let x = g.uniform(&dims, 0.2, 2.0);
            check_gradients(&[x], h, |_, v| weigh(v[0].log(1e-7), &w))?
        }
        "l2_norm" => check_gradients(&[x], h, |_, v| Ok(v[0].l2_norm()))?,
        "sample_l2_norm" => {
            let w = g.uniform(&[dims[0]], -1.0, 1.0);
            check_gradients(&[x], h, |_, v| weigh(v[0].sample_l2_norm()?, &w))?
        }
        "mse" => {
            let y = g.uniform(&dims, -1.0, 1.0);
            check_gradients(&[x, y], h, |_, v| v[0].mse(&v[1]))?
        }
        "spatial_mean" => {
            let w = g.uniform(&[dims[0] * dims[1]], -1.0, 1.0);
            check_gradients(&[x], h, |_, v| weigh(v[0].spatial_mean()?, &w))?
        }
        "reshape" => check_gradients(&[x], h, |_, v| {
            let flat = v[0].reshape([numel])?;
            weigh(flat.mul(&flat)?, &w)
        })?,
        other => unreachable!("no gradient case for {other}"),
    };
    Ok(report.max_rel_error)
}

/// Checks every differentiable op on `cases_per_op` random shapes each.
pub fn run_gradient_suite(cases_per_op: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut g = Gen(SplitMix64::new(seed));
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for _ in 0..cases_per_op {
                worst = worst.max(check_op(op, &mut g)?);
            }
            Ok(OpReport {
                op,
                cases: cases_per_op,
                max_rel_error: worst,
            })
        })
        .collect()
}
