use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Append-only computation record for reverse-mode differentiation.
///
/// Every operation on a [`Var`] pushes a node holding its forward value and
/// the ids of its inputs, so node order is a topological order by
/// construction. A tape is meant for one forward/backward pass; build a
/// fresh one per training step.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Constant,
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        input: usize,
        bias: usize,
    },
    Relu(usize),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    InstanceNorm {
        input: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<T>,
        inv_std: Vec<f64>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    Log {
        input: usize,
        eps: T,
    },
    L2Norm(usize),
    SampleL2Norm(usize),
    Mse(usize, usize),
    SpatialMean(usize),
    Reshape(usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Differentiable input (a parameter or an input under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element root.
    fn backward_from(&self, root: usize) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got dims {:?}",
                nodes[root].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::full(nodes[root].value.dims().to_vec(), T::one()));

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &*nodes[i].value;
            let req = |i: usize| nodes[i].requires_grad;
            let out = &*node.value;
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (di, dk) = kernels::conv2d_backward(
                        val(*input),
                        val(*kernel),
                        *stride,
                        *padding,
                        &g,
                        (req(*input), req(*kernel)),
                    )?;
                    accumulate_opt(&mut grads, *input, di);
                    accumulate_opt(&mut grads, *kernel, dk);
                }
                Op::ConvTranspose {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (di, dk) = kernels::conv_transpose_backward(
                        val(*input),
                        val(*kernel),
                        *stride,
                        *padding,
                        &g,
                        (req(*input), req(*kernel)),
                    )?;
                    accumulate_opt(&mut grads, *input, di);
                    accumulate_opt(&mut grads, *kernel, dk);
                }
                Op::ChannelBias { input, bias } => {
                    if req(*bias) {
                        let (n, c, h, w) = g.nchw("channel_bias")?;
                        let mut db = vec![0.0f64; c];
                        for s in 0..n {
                            for (ch, acc) in db.iter_mut().enumerate() {
                                let start = (s * c + ch) * h * w;
                                *acc += g.data()[start..start + h * w]
                                    .iter()
                                    .map(|v| v.as_f64())
                                    .sum::<f64>();
                            }
                        }
                        let db = db.into_iter().map(T::from_f64).collect();
                        accumulate(&mut grads, *bias, Tensor::new([c], db)?);
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::Relu(x) => {
                    let dx = zip_map(&g, val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                    accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let slope = *slope;
                    let dx = zip_map(&g, val(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            gv * slope
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = zip_map(&g, out, |gv, s| gv * s * (T::one() - s));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = zip_map(&g, out, |gv, t| gv * (T::one() - t * t));
                    accumulate(&mut grads, *x, dx);
                }
                Op::InstanceNorm {
                    input,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let (n, c, h, w) = g.nchw("instance_norm")?;
                    let hw = h * w;
                    let gain_v = val(*gain).data();
                    let mut dgain = vec![0.0f64; c];
                    let mut dbias = vec![0.0f64; c];
                    let mut dx = vec![T::zero(); g.numel()];
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                            let gy = &g.data()[r.clone()];
                            let xhat = &normalized[r.clone()];
                            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
                            for (gv, xv) in gy.iter().zip(xhat) {
                                sum_g += gv.as_f64();
                                sum_gx += gv.as_f64() * xv.as_f64();
                            }
                            dgain[ch] += sum_gx;
                            dbias[ch] += sum_g;
                            let scale = gain_v[ch].as_f64() * inv_std[s * c + ch];
                            let mean_g = sum_g / hw as f64;
                            let mean_gx = sum_gx / hw as f64;
                            for ((d, gv), xv) in dx[r].iter_mut().zip(gy).zip(xhat) {
                                *d = T::from_f64(
                                    scale * (gv.as_f64() - mean_g - xv.as_f64() * mean_gx),
                                );
                            }
                        }
                    }
                    if req(*gain) {
                        let t = Tensor::new([c], dgain.into_iter().map(T::from_f64).collect())?;
                        accumulate(&mut grads, *gain, t);
                    }
                    if req(*bias) {
                        let t = Tensor::new([c], dbias.into_iter().map(T::from_f64).collect())?;
                        accumulate(&mut grads, *bias, t);
                    }
                    accumulate(&mut grads, *input, Tensor::new(g.dims().to_vec(), dx)?);
                }
                Op::Concat { a, b } => {
                    let (n, _, h, w) = g.nchw("concat_channels")?;
                    let ca = val(*a).dims()[1];
                    let cb = val(*b).dims()[1];
                    let (pa, pb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * pa);
                    let mut db = Vec::with_capacity(n * pb);
                    for s in 0..n {
                        let base = s * (pa + pb);
                        da.extend_from_slice(&g.data()[base..base + pa]);
                        db.extend_from_slice(&g.data()[base + pa..base + pa + pb]);
                    }
                    accumulate(&mut grads, *a, Tensor::new([n, ca, h, w], da)?);
                    accumulate(&mut grads, *b, Tensor::new([n, cb, h, w], db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, zip_map(&g, val(*b), |gv, bv| gv * bv));
                    accumulate(&mut grads, *b, zip_map(&g, val(*a), |gv, av| gv * av));
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Sum(x) => {
                    let gv = g.item();
                    accumulate(&mut grads, *x, Tensor::full(val(*x).dims().to_vec(), gv));
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let gv = T::from_f64(g.item().as_f64() / xv.numel() as f64);
                    accumulate(&mut grads, *x, Tensor::full(xv.dims().to_vec(), gv));
                }
                Op::Log { input, eps } => {
                    let eps = *eps;
                    let dx = zip_map(&g, val(*input), |gv, xv| {
                        if xv > eps {
                            gv / xv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *input, dx);
                }
                Op::L2Norm(x) => {
                    let norm = out.item().as_f64();
                    let gv = g.item().as_f64();
                    let dx = if norm > 0.0 {
                        val(*x).map(|v| T::from_f64(gv * v.as_f64() / norm))
                    } else {
                        Tensor::zeros(val(*x).dims().to_vec())
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::SampleL2Norm(x) => {
                    let xv = val(*x);
                    let n = xv.dims()[0];
                    let per = xv.numel() / n;
                    let mut dx = vec![T::zero(); xv.numel()];
                    for s in 0..n {
                        let norm = out.data()[s].as_f64();
                        if norm > 0.0 {
                            let gv = g.data()[s].as_f64();
                            for (d, v) in dx[s * per..(s + 1) * per]
                                .iter_mut()
                                .zip(&xv.data()[s * per..(s + 1) * per])
                            {
                                *d = T::from_f64(gv * v.as_f64() / norm);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.dims().to_vec(), dx)?);
                }
                Op::Mse(a, b) => {
                    let av = val(*a);
                    let k = 2.0 * g.item().as_f64() / av.numel() as f64;
                    let da = zip_map(av, val(*b), |x, y| T::from_f64(k * (x - y).as_f64()));
                    accumulate(&mut grads, *b, da.map(|v| -v));
                    accumulate(&mut grads, *a, da);
                }
                Op::SpatialMean(x) => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.nchw("spatial_mean")?;
                    let inv = 1.0 / (h * w) as f64;
                    let dx = Tensor::from_fn([n, c, h, w], |i| {
                        T::from_f64(g.data()[i / (h * w)].as_f64() * inv)
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let dims = val(*x).dims().to_vec();
                    accumulate(&mut grads, *x, g.reshape(dims)?);
                }
            }
        }

        let dims = nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.dims(), b.dims());
    Tensor::from_fn(a.dims().to_vec(), |i| f(a.data()[i], b.data()[i]))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_opt<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        accumulate(grads, id, g);
    }
}

/// Gradients of a scalar root with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; zeros of matching dims when `var` does not
    /// influence the root.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.dims[var.id].clone()),
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: &Var<'_, T>) -> bool {
        matches!(self.grads.get(var.id), Some(Some(_)))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Forward value detached from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let req = self.tape.requires(self.id);
        self.tape.push(value, op, req)
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let req = self.tape.requires(self.id) || self.tape.requires(other.id);
        self.tape.push(value, op, req)
    }

    fn same_dims(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.value(), other.value());
        if a.dims() != b.dims() {
            return shape_err(op, format!("operand dims {:?} vs {:?}", a.dims(), b.dims()));
        }
        Ok(())
    }

    /// Cross-correlation with `kernel[Cout, Cin, k, k]`.
    pub fn conv2d(&self, kernel: &Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let out = kernels::conv2d_forward(&self.value(), &kernel.value(), stride, padding)?;
        Ok(self.binary(
            kernel,
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                stride,
                padding,
            },
        ))
    }

    /// Adjoint of [`conv2d`](Self::conv2d) with `kernel[Cin, Cout, k, k]`.
    pub fn conv2d_transpose(
        &self,
        kernel: &Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let out = kernels::conv_transpose_forward(&self.value(), &kernel.value(), stride, padding)?;
        Ok(self.binary(
            kernel,
            out,
            Op::ConvTranspose {
                input: self.id,
                kernel: kernel.id,
                stride,
                padding,
            },
        ))
    }

    /// Adds `bias[C]` to every pixel of channel C.
    pub fn add_channel_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (_, c, h, w) = x.nchw("channel_bias")?;
        let b = bias.value();
        if b.dims() != [c] {
            return shape_err("channel_bias", format!("bias dims {:?} for {c} channels", b.dims()));
        }
        let out = Tensor::from_fn(x.dims().to_vec(), |i| x.data()[i] + b.data()[(i / (h * w)) % c]);
        Ok(self.binary(
            bias,
            out,
            Op::ChannelBias {
                input: self.id,
                bias: bias.id,
            },
        ))
    }

    pub fn relu(&self) -> Var<'t, T> {
        // Comparison form so NaN propagates instead of becoming 0.
        let out = self.value().map(|v| if v < T::zero() { T::zero() } else { v });
        self.unary(out, Op::Relu(self.id))
    }

    /// Passes positives unchanged and multiplies negatives by `slope`.
    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let out = self
            .value()
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.unary(out, Op::LeakyRelu(self.id, slope))
    }

    /// Logistic function, saturating at the nearest representable values
    /// inside (0, 1) so the output never touches either bound.
    pub fn sigmoid(&self) -> Var<'t, T> {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / T::from_f64(2.0);
        let out = self.value().map(|v| {
            let s = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            if s < lo {
                lo
            } else if s > hi {
                hi
            } else {
                s
            }
        });
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let out = self.value().map(|v| v.tanh());
        self.unary(out, Op::Tanh(self.id))
    }

    /// Per-(sample, channel) normalization over H×W followed by a
    /// per-channel affine `gain · x̂ + bias`. Statistics use the biased
    /// variance and are accumulated in f64.
    pub fn instance_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.nchw("instance_norm")?;
        let hw = h * w;
        if hw < 2 {
            return shape_err(
                "instance_norm",
                format!("degenerate statistics over a {h}×{w} plane"),
            );
        }
        let (gv, bv) = (gain.value(), bias.value());
        if gv.dims() != [c] || bv.dims() != [c] {
            return shape_err(
                "instance_norm",
                format!("gain {:?} / bias {:?} for {c} channels", gv.dims(), bv.dims()),
            );
        }
        let mut normalized = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        let mut inv_std = vec![0.0f64; n * c];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                let plane = &x.data()[r.clone()];
                let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / hw as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[s * c + ch] = is;
                let (gch, bch) = (gv.data()[ch].as_f64(), bv.data()[ch].as_f64());
                for ((nv, ov), xv) in normalized[r.clone()].iter_mut().zip(&mut out[r]).zip(plane) {
                    let xhat = (xv.as_f64() - mean) * is;
                    *nv = T::from_f64(xhat);
                    *ov = T::from_f64(gch * xhat + bch);
                }
            }
        }
        let req = [self.id, gain.id, bias.id].iter().any(|&i| self.tape.requires(i));
        Ok(self.tape.push(
            Tensor::new(x.dims().to_vec(), out)?,
            Op::InstanceNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized,
                inv_std,
            },
            req,
        ))
    }

    /// Stacks `self` then `other` along the channel axis.
    pub fn concat_channels(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (na, ca, ha, wa) = a.nchw("concat_channels(a)")?;
        let (nb, cb, hb, wb) = b.nchw("concat_channels(b)")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return shape_err(
                "concat_channels",
                format!("a is {:?} but b is {:?}", a.dims(), b.dims()),
            );
        }
        let (pa, pb) = (ca * ha * wa, cb * ha * wa);
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for s in 0..na {
            data.extend_from_slice(&a.data()[s * pa..(s + 1) * pa]);
            data.extend_from_slice(&b.data()[s * pb..(s + 1) * pb]);
        }
        let out = Tensor::new([na, ca + cb, ha, wa], data)?;
        Ok(self.binary(other, out, Op::Concat { a: self.id, b: other.id }))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_dims(other, "add")?;
        let out = zip_map(&self.value(), &other.value(), |a, b| a + b);
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_dims(other, "sub")?;
        let out = zip_map(&self.value(), &other.value(), |a, b| a - b);
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_dims(other, "mul")?;
        let out = zip_map(&self.value(), &other.value(), |a, b| a * b);
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, factor: f64) -> Var<'t, T> {
        let c = T::from_f64(factor);
        let out = self.value().map(|v| v * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, offset: f64) -> Var<'t, T> {
        let c = T::from_f64(offset);
        let out = self.value().map(|v| v + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self) -> Var<'t, T> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let out = Tensor::scalar(T::from_f64(self.value().sum_f64()));
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let out = Tensor::scalar(T::from_f64(self.value().mean_f64()));
        self.unary(out, Op::Mean(self.id))
    }

    /// Natural log of `max(x, eps)`; the gradient is zero where the clamp
    /// is active.
    pub fn log(&self, eps: f64) -> Var<'t, T> {
        let eps = T::from_f64(eps);
        let out = self.value().map(|v| if v < eps { eps.ln() } else { v.ln() });
        self.unary(out, Op::Log { input: self.id, eps })
    }

    pub fn l2_norm(&self) -> Var<'t, T> {
        let sq: f64 = self.value().data().iter().map(|v| v.as_f64().powi(2)).sum();
        self.unary(Tensor::scalar(T::from_f64(sq.sqrt())), Op::L2Norm(self.id))
    }

    /// Euclidean norm of each sample along the leading axis: `[N, ...] -> [N]`.
    pub fn sample_l2_norm(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let Some(&n) = x.dims().first() else {
            return shape_err("sample_l2_norm", "rank-0 input");
        };
        let per = x.numel() / n.max(1);
        let norms = (0..n)
            .map(|s| {
                let sq: f64 = x.data()[s * per..(s + 1) * per]
                    .iter()
                    .map(|v| v.as_f64().powi(2))
                    .sum();
                T::from_f64(sq.sqrt())
            })
            .collect();
        Ok(self.unary(Tensor::new([n], norms)?, Op::SampleL2Norm(self.id)))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_dims(other, "mse")?;
        let (a, b) = (self.value(), other.value());
        let sq: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        let out = Tensor::scalar(T::from_f64(sq / a.numel() as f64));
        Ok(self.binary(other, out, Op::Mse(self.id, other.id)))
    }

    /// Global average over H×W: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn spatial_mean(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.nchw("spatial_mean")?;
        let hw = h * w;
        let means = (0..n * c)
            .map(|p| {
                let s: f64 = x.data()[p * hw..(p + 1) * hw].iter().map(|v| v.as_f64()).sum();
                T::from_f64(s / hw as f64)
            })
            .collect();
        Ok(self.unary(Tensor::new([n, c, 1, 1], means)?, Op::SpatialMean(self.id)))
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(dims)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Reverse-mode sweep from this (single-element) node.
    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward_from(self.id)
    }
}
