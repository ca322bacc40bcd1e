//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it needs for the adjoint, so the
//! node list is already in topological order and [`Tape::backward`] is a single
//! reverse sweep. Parameters enter the tape as leaves that remember their
//! [`ParamId`]; [`Tape::accumulate`] adds the sweep's results into the store's
//! gradient accumulators.

mod kernels;
mod params;

use rand::Rng;

pub use kernels::{conv2d, conv_transpose2d, BatchNormStats, Mode, BN_EPSILON, BN_MOMENTUM};
pub use params::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor4,
        inv_std: Vec<f32>,
        mode: Mode,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<f32>,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Square(Var),
    ChannelNorm(Var),
    MeanPerItem(Var),
    StdPerItem(Var),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor4,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor4> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters enter as constants; used for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor4 {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad && !self.no_grad)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let var = self.push(store.get(id).value.clone(), Op::Leaf, !self.no_grad);
        self.nodes[var.0].param = Some(id);
        var
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(input), size)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, stats: &mut BatchNormStats, mode: Mode) -> Result<Var> {
        let r = kernels::batch_norm2d(self.value(input), self.value(gamma), self.value(beta), stats, mode)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            r.out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: r.xhat,
                inv_std: r.inv_std,
                mode,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        let keep = 1.0 - p;
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() >= p { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { input: x, mask }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::dim("concat_channels", sa, sb));
        }
        let shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).item(n));
            data.extend_from_slice(self.value(b).item(n));
        }
        let out = Tensor4::from_vec(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor4> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor4::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::MulScalar(x, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    /// Euclidean norm across channels: (n, c, h, w) -> (n, 1, h, w).
    /// The subgradient at a zero vector is zero.
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let plane = s.plane();
        let mut out = Tensor4::zeros([s.n, 1, s.h, s.w]);
        for n in 0..s.n {
            let item = t.item(n);
            let dst = &mut out.data_mut()[n * plane..(n + 1) * plane];
            for c in 0..s.c {
                for (d, &v) in dst.iter_mut().zip(&item[c * plane..(c + 1) * plane]) {
                    *d += v * v;
                }
            }
            dst.iter_mut().for_each(|d| *d = d.sqrt());
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::ChannelNorm(x), rg)
    }

    /// Mean over (c, h, w) of every batch item: (n, c, h, w) -> (n, 1, 1, 1).
    pub fn mean_per_item(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let data = (0..s.n)
            .map(|n| (t.item(n).iter().map(|&v| v as f64).sum::<f64>() / s.item() as f64) as f32)
            .collect();
        let out = Tensor4::from_vec([s.n, 1, 1, 1], data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanPerItem(x), rg)
    }

    /// Population standard deviation of every batch item.
    pub fn std_per_item(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let data = (0..s.n).map(|n| population_std(t.item(n)) as f32).collect();
        let out = Tensor4::from_vec([s.n, 1, 1, 1], data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::StdPerItem(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor4::scalar((t.sum() / t.len() as f64) as f32);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum() as f32);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_grad(&self, grads: &mut [Option<Tensor4>], var: Var, g: Tensor4) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g).expect("gradient shape"),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor4, grads: &mut [Option<Tensor4>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*input), val(*weight), g, *stride, *padding, needs(*input), needs(*weight))?;
                if let Some(dx) = dx {
                    self.accumulate_grad(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_grad(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    let db = db.reshape(val(*b).shape())?;
                    self.accumulate_grad(grads, *b, db);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(val(*input), val(*weight), g, *stride, needs(*input), needs(*weight))?;
                if let Some(dx) = dx {
                    self.accumulate_grad(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_grad(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    let db = db.reshape(val(*b).shape())?;
                    self.accumulate_grad(grads, *b, db);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor4::zeros(val(*input).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src as usize] += gv;
                }
                self.accumulate_grad(grads, *input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (dx, dgamma, dbeta) = kernels::batch_norm2d_backward(g, xhat, val(*gamma), inv_std, *mode);
                self.accumulate_grad(grads, *input, dx);
                self.accumulate_grad(grads, *gamma, dgamma.reshape(val(*gamma).shape())?);
                self.accumulate_grad(grads, *beta, dbeta.reshape(val(*beta).shape())?);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(val(*x).data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate_grad(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                self.accumulate_grad(grads, *x, dx);
            }
            Op::Dropout { input, mask } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                self.accumulate_grad(grads, *input, dx);
            }
            Op::Concat(a, b) => {
                let ca = val(*a).shape().c;
                let cb = val(*b).shape().c;
                if needs(*a) {
                    self.accumulate_grad(grads, *a, g.channels(0, ca)?);
                }
                if needs(*b) {
                    self.accumulate_grad(grads, *b, g.channels(ca, cb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_grad(grads, *a, g.clone());
                self.accumulate_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_grad(grads, *a, g.clone());
                self.accumulate_grad(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate_grad(grads, *a, zip(g, val(*b), |gv, bv| gv * bv));
                }
                if needs(*b) {
                    self.accumulate_grad(grads, *b, zip(g, val(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                if needs(*a) {
                    self.accumulate_grad(grads, *a, zip(g, val(*b), |gv, bv| gv / bv));
                }
                if needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip(&node.value, val(*b), |qv, bv| -qv / bv);
                    self.accumulate_grad(grads, *b, zip(g, &q, |gv, qv| gv * qv));
                }
            }
            Op::AddScalar(x) => self.accumulate_grad(grads, *x, g.clone()),
            Op::MulScalar(x, c) => self.accumulate_grad(grads, *x, g.map(|v| v * c)),
            Op::Square(x) => self.accumulate_grad(grads, *x, zip(g, val(*x), |gv, xv| 2.0 * gv * xv)),
            Op::ChannelNorm(x) => {
                let xs = val(*x).shape();
                let plane = xs.plane();
                let mut dx = Tensor4::zeros(xs);
                for n in 0..xs.n {
                    let norm = &node.value.data()[n * plane..(n + 1) * plane];
                    let gn = &g.data()[n * plane..(n + 1) * plane];
                    for c in 0..xs.c {
                        let base = xs.index(n, c, 0, 0);
                        let src = &val(*x).data()[base..base + plane];
                        let dst = &mut dx.data_mut()[base..base + plane];
                        for i in 0..plane {
                            if norm[i] > 0.0 {
                                dst[i] = gn[i] * src[i] / norm[i];
                            }
                        }
                    }
                }
                self.accumulate_grad(grads, *x, dx);
            }
            Op::MeanPerItem(x) => {
                let xs = val(*x).shape();
                let item = xs.item();
                let mut dx = Tensor4::zeros(xs);
                for (n, chunk) in dx.data_mut().chunks_mut(item).enumerate() {
                    chunk.fill(g.data()[n] / item as f32);
                }
                self.accumulate_grad(grads, *x, dx);
            }
            Op::StdPerItem(x) => {
                let xs = val(*x).shape();
                let item = xs.item();
                let mut dx = Tensor4::zeros(xs);
                for (n, chunk) in dx.data_mut().chunks_mut(item).enumerate() {
                    let sd = node.value.data()[n];
                    if sd <= 0.0 {
                        continue;
                    }
                    let src = val(*x).item(n);
                    let mean = (src.iter().map(|&v| v as f64).sum::<f64>() / item as f64) as f32;
                    let k = g.data()[n] / (item as f32 * sd);
                    for (d, &v) in chunk.iter_mut().zip(src) {
                        *d = k * (v - mean);
                    }
                }
                self.accumulate_grad(grads, *x, dx);
            }
            Op::Mean(x) => {
                let xs = val(*x).shape();
                self.accumulate_grad(grads, *x, Tensor4::full(xs, g.data()[0] / xs.len() as f32));
            }
            Op::Sum(x) => {
                let xs = val(*x).shape();
                self.accumulate_grad(grads, *x, Tensor4::full(xs, g.data()[0]));
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            store.get_mut(id).grad.add_assign(g)?;
        }
        Ok(())
    }
}

fn zip(a: &Tensor4, b: &Tensor4, f: impl Fn(f32, f32) -> f32) -> Tensor4 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data).expect("same shape")
}

pub(crate) fn population_std(values: &[f32]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}
