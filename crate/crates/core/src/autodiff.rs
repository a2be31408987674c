//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op executed through a [`Tape`] appends a node holding its output
//! value and enough context to propagate gradients. Inputs always precede
//! their consumers on the tape, so walking it from the end visits nodes in
//! reverse topological order.
//!
//! ```
//! use voxelpaint::autodiff::Tape;
//! use voxelpaint::optim::ParamStore;
//! use voxelpaint::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y, &mut ParamStore::new()).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, NormGeom};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{check_same_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// Rebuilds a handle from [`Var::index`]; only meaningful on the same tape.
    pub fn from_index(index: usize) -> Self {
        Var(index)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var, Var),
    Silu(Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        geom: NormGeom,
        x_hat: Vec<f64>,
        rstds: Vec<f64>,
    },
    Concat(Vec<Var>),
    ChannelSlice {
        input: Var,
        start: usize,
    },
    AvgPool {
        input: Var,
        in_shape: [usize; 4],
        factors: [usize; 4],
    },
    Upsample {
        input: Var,
        out_shape: [usize; 4],
        factors: [usize; 4],
    },
    Mse(Var, Var),
    Sum(Var),
    StraightThrough(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
///
/// A tape is single-owner; independent passes use independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient so the tape can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.grads.clear();
        self.grads.shrink_to_fit();
        self.visited.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Node indices in the order the last backward pass visited them.
    pub fn backward_order(&self) -> &[usize] {
        &self.visited
    }

    /// Index of every input of node `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<usize> {
        let ids: Vec<Var> = match &self.nodes[v.0].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddChannel(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::Sum(a) | Op::StraightThrough(a) => vec![*a],
            Op::Conv { input, kernel, bias, .. } => [Some(*input), Some(*kernel), *bias].into_iter().flatten().collect(),
            Op::Linear { input, weight, bias } => [Some(*input), Some(*weight), *bias].into_iter().flatten().collect(),
            Op::GroupNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::ChannelSlice { input, .. } | Op::AvgPool { input, .. } | Op::Upsample { input, .. } => vec![*input],
            Op::GatherRows { table, .. } => vec![*table],
        };
        ids.into_iter().map(|v| v.0).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, readable through [`Tape::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter; backward accumulates its gradient into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds `v[c]` to every element of channel `c` of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.value(x);
        let vs = self.value(v);
        let c = xs.shape()[0];
        if vs.len() != c {
            return Err(Error::shape("add_channel", "channels", c, vs.len()));
        }
        let inner = xs.len() / c;
        let mut out = xs.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let add = vs.data()[ch];
            for e in chunk {
                *e += add;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddChannel(x, v), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    /// Same-padded 2D cross-correlation.
    ///
    /// `input` is `[C_in, H, W]`, or `[C_in, D, H, W]` in which case every depth
    /// slice is convolved independently. `kernel` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 4 {
            return Err(Error::shape("conv2d", "kernel rank", 4, ks.len()));
        }
        self.conv_general("conv2d", input, kernel, bias, [ks[0], ks[1], 1, ks[2], ks[3]])
    }

    /// Same-padded 1D cross-correlation along one spatial axis of a
    /// `[C, D, H, W]` input (1 = depth, 2 = height, 3 = width).
    /// `kernel` is `[C_out, C, k]`.
    pub fn conv_axis1d(&mut self, input: Var, kernel: Var, bias: Option<Var>, axis: usize) -> Result<Var> {
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 3 {
            return Err(Error::shape("conv_axis1d", "kernel rank", 3, ks.len()));
        }
        if self.value(input).rank() != 4 {
            return Err(Error::shape("conv_axis1d", "input rank", 4, self.value(input).rank()));
        }
        let mut k5 = [ks[0], ks[1], 1, 1, 1];
        match axis {
            1..=3 => k5[axis + 1] = ks[2],
            _ => {
                return Err(Error::invalid(
                    "conv_axis1d",
                    format!("axis {axis} out of range for a [C, D, H, W] input"),
                ))
            }
        }
        self.conv_general("conv_axis1d", input, kernel, bias, k5)
    }

    /// Same-padded 3D cross-correlation; `kernel` is `[C_out, C_in, k, k, k]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 5 {
            return Err(Error::shape("conv3d", "kernel rank", 5, ks.len()));
        }
        if self.value(input).rank() != 4 {
            return Err(Error::shape("conv3d", "input rank", 4, self.value(input).rank()));
        }
        self.conv_general("conv3d", input, kernel, bias, [ks[0], ks[1], ks[2], ks[3], ks[4]])
    }

    fn conv_general(
        &mut self,
        op: &'static str,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        k5: [usize; 5],
    ) -> Result<Var> {
        let is = self.value(input).shape().to_vec();
        let (cin, d, h, w) = match is.len() {
            3 => (is[0], 1, is[1], is[2]),
            4 => (is[0], is[1], is[2], is[3]),
            r => return Err(Error::shape(op, "input rank", 4, r)),
        };
        let [cout, kcin, kd, kh, kw] = k5;
        if kcin != cin {
            return Err(Error::shape(op, "input channels", kcin, cin));
        }
        for (name, k) in [("kernel depth", kd), ("kernel height", kh), ("kernel width", kw)] {
            if k % 2 == 0 {
                return Err(Error::invalid(op, format!("{name} {k} must be odd")));
            }
        }
        if let Some(b) = bias {
            let bl = self.value(b).len();
            if bl != cout {
                return Err(Error::shape(op, "bias length", cout, bl));
            }
        }
        let geom = ConvGeom {
            cin,
            cout,
            d,
            h,
            w,
            kd,
            kh,
            kw,
        };
        let out = kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut shape = is.clone();
        shape[0] = cout;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Affine map `weight · input + bias` with `input: [n]`, `weight: [m, n]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        if x.rank() != 1 {
            return Err(Error::shape("linear", "input rank", 1, x.rank()));
        }
        if wt.rank() != 2 {
            return Err(Error::shape("linear", "weight rank", 2, wt.rank()));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        if x.len() != n {
            return Err(Error::shape("linear", "input features", n, x.len()));
        }
        let mut out = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != m {
                    return Err(Error::shape("linear", "bias length", m, bv.len()));
                }
                bv.data().to_vec()
            }
            None => vec![0.0; m],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wt.data()[i * n..(i + 1) * n];
            *o += row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        let value = Tensor::new(&[m], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Group normalization over `[C, ...]` followed by a per-channel affine map.
    ///
    /// With `per_slice`, statistics are taken separately for every index of
    /// axis 1 (the depth slices of a `[C, D, H, W]` tensor).
    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, per_slice: bool) -> Result<Var> {
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(Error::shape("group_norm", "input rank", 2, x.rank()));
        }
        let channels = x.shape()[0];
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::invalid(
                "group_norm",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let l = self.value(p).len();
            if l != channels {
                return Err(Error::shape("group_norm", format!("{name} length"), channels, l));
            }
        }
        let slices = if per_slice && x.rank() >= 3 { x.shape()[1] } else { 1 };
        let geom = NormGeom {
            channels,
            groups,
            slices,
            rest: x.len() / channels,
        };
        let (x_hat, rstds) = kernels::group_norm_forward(&geom, x.data());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = x_hat.clone();
        for (c, chunk) in out.chunks_mut(geom.rest).enumerate() {
            for e in chunk {
                *e = *e * g[c] + b[c];
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                geom,
                x_hat,
                rstds,
            },
            rg,
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn channel_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).channel_slice(start, len)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::ChannelSlice { input, start }, rg))
    }

    /// Block-mean pooling; `factors` has one entry per axis (at most four).
    pub fn avg_pool(&mut self, input: Var, factors: &[usize]) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let f = pool_factors("avg_pool", &shape, factors)?;
        let s4 = kernels::as_4d(&shape);
        for (axis, (&e, &k)) in s4.iter().zip(&f).enumerate() {
            if e % k != 0 {
                return Err(Error::invalid(
                    "avg_pool",
                    format!("extent {e} on axis {} not divisible by {k}", axis + shape.len() - 4),
                ));
            }
        }
        let out = kernels::avg_pool_forward(s4, f, self.value(input).data());
        let out_shape: Vec<usize> = shape.iter().zip(factors).map(|(e, k)| e / k).collect();
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::AvgPool {
                input,
                in_shape: s4,
                factors: f,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling; `factors` has one entry per axis.
    pub fn upsample_nearest(&mut self, input: Var, factors: &[usize]) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let f = pool_factors("upsample_nearest", &shape, factors)?;
        let out_shape: Vec<usize> = shape.iter().zip(factors).map(|(e, k)| e * k).collect();
        let o4 = kernels::as_4d(&out_shape);
        let out = kernels::upsample_forward(o4, f, self.value(input).data());
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::Upsample {
                input,
                out_shape: o4,
                factors: f,
            },
            rg,
        ))
    }

    /// Mean of squared differences, as a one-element tensor.
    pub fn mse_loss(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let p = self.value(prediction);
        let t = self.value(target);
        check_same_shape("mse_loss", p.shape(), t.shape())?;
        let n = p.len() as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(prediction) || self.rg(target);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(prediction, target), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// A copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf, false)
    }

    /// Forward value is `quantized`; the gradient passes unchanged to `z`.
    pub fn straight_through(&mut self, z: Var, quantized: &Tensor) -> Result<Var> {
        check_same_shape("straight_through", self.value(z).shape(), quantized.shape())?;
        let rg = self.rg(z);
        Ok(self.push(quantized.clone(), Op::StraightThrough(z), rg))
    }

    /// Looks up rows of `table: [K, d]` and lays them out channel-first as
    /// `[d, ...site_shape]`, one site per index.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], site_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("gather_rows", "table rank", 2, tv.rank()));
        }
        let (k, d) = (tv.shape()[0], tv.shape()[1]);
        let sites: usize = site_shape.iter().product();
        if sites != indices.len() {
            return Err(Error::shape("gather_rows", "sites", sites, indices.len()));
        }
        let mut out = vec![0.0; d * sites];
        for (p, &idx) in indices.iter().enumerate() {
            if idx >= k {
                return Err(Error::invalid("gather_rows", format!("index {idx} >= {k}")));
            }
            for j in 0..d {
                out[j * sites + p] = tv.data()[idx * d + j];
            }
        }
        let mut shape = vec![d];
        shape.extend_from_slice(site_shape);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every reachable node and accumulates
    /// parameter gradients into `params`.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward", "tape already consumed; record a new forward pass"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        self.visited.clear();
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            self.visited.push(i);
            self.propagate(i, &g, params)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.value(v).shape())
    }

    fn propagate(&mut self, i: usize, g: &Tensor, params: &mut ParamStore) -> Result<()> {
        // Take the op out so its payload can be borrowed alongside `self`.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(&op, g, params);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, op: &Op, g: &Tensor, params: &mut ParamStore) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate_grad(*id, g),
            Op::Add(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(*a, g.clone());
                self.accum(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |g, y| g * y)?;
                let gb = g.zip_map(self.value(*a), |g, x| g * x)?;
                self.accum(*a, ga);
                self.accum(*b, gb);
            }
            Op::Scale(a, s) => self.accum(*a, g.scale(*s)),
            Op::AddChannel(x, v) => {
                let c = self.value(*v).len();
                let inner = g.len() / c;
                let gv: Vec<f64> = g.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                let gv = Tensor::new(self.value(*v).shape(), gv)?;
                self.accum(*x, g.clone());
                self.accum(*v, gv);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |g, a| {
                    let s = sigmoid(a);
                    g * s * (1.0 + a * (1.0 - s))
                })?;
                self.accum(*x, gx);
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want_in = self.rg(*input);
                let want_k = self.rg(*kernel);
                let want_b = bias.is_some_and(|b| self.rg(b));
                let mut gi = want_in.then(|| self.zeros_like(*input));
                let mut gk = want_k.then(|| self.zeros_like(*kernel));
                let mut gb = if want_b { bias.map(|b| self.zeros_like(b)) } else { None };
                kernels::conv_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    gi.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gi {
                    self.accum(*input, t);
                }
                if let Some(t) = gk {
                    self.accum(*kernel, t);
                }
                if let (Some(t), Some(b)) = (gb, bias) {
                    self.accum(*b, t);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input).data().to_vec();
                let wt = self.value(*weight);
                let n = x.len();
                let m = g.len();
                let mut gx = vec![0.0; n];
                for (r, gr) in g.data().iter().enumerate() {
                    for (gx, w) in gx.iter_mut().zip(&wt.data()[r * n..(r + 1) * n]) {
                        *gx += gr * w;
                    }
                }
                let mut gw = vec![0.0; m * n];
                for (r, gr) in g.data().iter().enumerate() {
                    for (gw, xv) in gw[r * n..(r + 1) * n].iter_mut().zip(&x) {
                        *gw = gr * xv;
                    }
                }
                let gx = Tensor::new(&[n], gx)?;
                let gw = Tensor::new(&[m, n], gw)?;
                self.accum(*input, gx);
                self.accum(*weight, gw);
                if let Some(b) = bias {
                    self.accum(*b, g.clone());
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                geom,
                x_hat,
                rstds,
            } => {
                let gam = self.value(*gamma).data().to_vec();
                let mut ggam = vec![0.0; geom.channels];
                let mut gbet = vec![0.0; geom.channels];
                let mut gxhat = vec![0.0; g.len()];
                for c in 0..geom.channels {
                    let range = c * geom.rest..(c + 1) * geom.rest;
                    for j in range {
                        ggam[c] += g.data()[j] * x_hat[j];
                        gbet[c] += g.data()[j];
                        gxhat[j] = g.data()[j] * gam[c];
                    }
                }
                if self.rg(*input) {
                    let mut gx = self.zeros_like(*input);
                    kernels::group_norm_backward(geom, x_hat, rstds, &gxhat, gx.data_mut());
                    self.accum(*input, gx);
                }
                let gs = self.value(*gamma).shape().to_vec();
                let bs = self.value(*beta).shape().to_vec();
                self.accum(*gamma, Tensor::new(&gs, ggam)?);
                self.accum(*beta, Tensor::new(&bs, gbet)?);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    let piece = g.channel_slice(start, c)?;
                    start += c;
                    self.accum(p, piece);
                }
            }
            Op::ChannelSlice { input, start } => {
                let mut gx = self.zeros_like(*input);
                let inner = gx.len() / gx.shape()[0];
                let off = start * inner;
                gx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                self.accum(*input, gx);
            }
            Op::AvgPool {
                input,
                in_shape,
                factors,
            } => {
                let mut gx = self.zeros_like(*input);
                kernels::avg_pool_backward(*in_shape, *factors, g.data(), gx.data_mut());
                self.accum(*input, gx);
            }
            Op::Upsample {
                input,
                out_shape,
                factors,
            } => {
                let mut gx = self.zeros_like(*input);
                kernels::upsample_backward(*out_shape, *factors, g.data(), gx.data_mut());
                self.accum(*input, gx);
            }
            Op::Mse(p, t) => {
                let n = self.value(*p).len() as f64;
                let scale = 2.0 * g.item() / n;
                let gp = self.value(*p).zip_map(self.value(*t), |a, b| scale * (a - b))?;
                let gt = gp.scale(-1.0);
                self.accum(*p, gp);
                self.accum(*t, gt);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item());
                self.accum(*x, gx);
            }
            Op::StraightThrough(z) => self.accum(*z, g.clone()),
            Op::GatherRows { table, indices } => {
                let mut gt = self.zeros_like(*table);
                let d = gt.shape()[1];
                let sites = indices.len();
                for (p, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt.data_mut()[idx * d + j] += g.data()[j * sites + p];
                    }
                }
                self.accum(*table, gt);
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pool_factors(op: &'static str, shape: &[usize], factors: &[usize]) -> Result<[usize; 4]> {
    if factors.len() != shape.len() {
        return Err(Error::shape(op, "factor count", shape.len(), factors.len()));
    }
    if shape.len() > 4 {
        return Err(Error::invalid(op, "at most four axes supported"));
    }
    if factors.contains(&0) {
        return Err(Error::invalid(op, "factors must be positive"));
    }
    Ok(kernels::as_4d(factors))
}
