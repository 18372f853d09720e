//! Reverse-mode tape over dense tensors.
//!
//! Ops are recorded as enum nodes in topological order; `backward` walks the
//! list in exact reverse order, accumulating cotangents per node. Parameters
//! enter as leaves bound to a [`ParamStore`] slot so their gradients can be
//! collected after the sweep.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::field::BoundaryCondition;
use crate::scheme::tfpm_lambda_c0;

/// Index of a node on the tape.
pub type NodeId = usize;

/// Spatial padding for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero-fill ghost cells.
    Zero(usize),
    /// Edge replication (matches the zero-flux field padding).
    Reflect(usize),
    /// Periodic wrap.
    Wrap(usize),
}

impl PadMode {
    pub fn width(&self) -> usize {
        match *self {
            PadMode::Zero(k) | PadMode::Reflect(k) | PadMode::Wrap(k) => k,
        }
    }

    /// Map a padded-space offset onto a source index; None means zero-fill.
    #[inline]
    fn map(&self, i: isize, n: usize) -> Option<usize> {
        match self {
            PadMode::Zero(_) => {
                if i < 0 || i >= n as isize {
                    None
                } else {
                    Some(i as usize)
                }
            }
            PadMode::Reflect(_) => Some(i.clamp(0, n as isize - 1) as usize),
            PadMode::Wrap(_) => Some(i.rem_euclid(n as isize) as usize),
        }
    }
}

impl From<BoundaryCondition> for PadMode {
    fn from(bc: BoundaryCondition) -> Self {
        match bc {
            BoundaryCondition::NeumannZeroFlux => PadMode::Reflect(1),
            BoundaryCondition::Periodic => PadMode::Wrap(1),
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let (n, c, h, w) = value.shape();
        self.params.push(Param { name: name.into(), value, grad: Tensor::zeros(n, c, h, w) });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total trainable scalar count.
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: PadMode },
    Sigmoid { x: NodeId },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Square { x: NodeId },
    ScalarMul { x: NodeId, k: f64 },
    /// Elementwise W'(u) = 4u^3 - 6u^2 + 2u.
    WellPrime { x: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        training: bool,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Upsample2 { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    TfpmLap { x: NodeId, eps1: f64, eps2: f64, h: f64, bc: BoundaryCondition, freeze_center: bool },
    FdmLap { x: NodeId, h: f64, bc: BoundaryCondition },
    Bce { p: NodeId, target: Tensor },
    L2 { p: NodeId, target: Tensor },
    Hinge { p: NodeId, target: Tensor },
}

/// Recorded computation over tensors.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

const BCE_CLAMP: f64 = 1e-7;

fn pad_tensor(x: &Tensor, pad: PadMode) -> Tensor {
    let k = pad.width();
    let (n, c, h, w) = x.shape();
    let mut out = Tensor::zeros(n, c, h + 2 * k, w + 2 * k);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h + 2 * k {
                let si = pad.map(i as isize - k as isize, h);
                for j in 0..w + 2 * k {
                    let sj = pad.map(j as isize - k as isize, w);
                    if let (Some(si), Some(sj)) = (si, sj) {
                        *out.at_mut(ni, ci, i, j) = x.at(ni, ci, si, sj);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_tensor`]: scatter padded-space gradients onto sources.
fn pad_adjoint(dxp: &Tensor, pad: PadMode, h: usize, w: usize) -> Tensor {
    let k = pad.width();
    let (n, c, hp, wp) = dxp.shape();
    debug_assert_eq!((hp, wp), (h + 2 * k, w + 2 * k));
    let mut out = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..hp {
                let si = pad.map(i as isize - k as isize, h);
                for j in 0..wp {
                    let sj = pad.map(j as isize - k as isize, w);
                    if let (Some(si), Some(sj)) = (si, sj) {
                        *out.at_mut(ni, ci, si, sj) += dxp.at(ni, ci, i, j);
                    }
                }
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Constant leaf (no gradient tracked back to a parameter).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Parameter leaf bound to `store[pid]`.
    pub fn param(&mut self, store: &ParamStore, pid: usize) -> NodeId {
        self.push(Op::Leaf { param: Some(pid) }, store.get(pid).value.clone())
    }

    /// Cross-correlation with bias. x: (N,Cin,H,W), w: (Cout,Cin,kh,kw),
    /// b: (1,Cout,1,1); odd kernels only.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: PadMode,
    ) -> Result<NodeId> {
        let xv = &self.values[x];
        let wv = &self.values[w];
        let bv = &self.values[b];
        let (n, cin, h, wd) = xv.shape();
        let (cout, wcin, kh, kw) = wv.shape();
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d: kernel must be odd-sized, got {kh}x{kw}")));
        }
        if bv.shape() != (1, cout, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias shape {:?} != (1,{cout},1,1)",
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidParam("conv2d: stride must be >= 1".into()));
        }
        let k = pad.width();
        let oh = (h + 2 * k).checked_sub(kh).map(|v| v / stride + 1).ok_or_else(|| {
            Error::ShapeMismatch(format!("conv2d: kernel {kh} larger than padded input {}", h + 2 * k))
        })?;
        let ow = (wd + 2 * k - kw) / stride + 1;
        let xp = pad_tensor(xv, pad);
        let mut out = Tensor::zeros(n, cout, oh, ow);
        for ni in 0..n {
            for co in 0..cout {
                let bias = bv.at(0, co, 0, 0);
                for i in 0..oh {
                    for j in 0..ow {
                        *out.at_mut(ni, co, i, j) = bias;
                    }
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = wv.at(co, ci, ky, kx);
                            if wgt == 0.0 {
                                continue;
                            }
                            for i in 0..oh {
                                let src_row = i * stride + ky;
                                for j in 0..ow {
                                    *out.at_mut(ni, co, i, j) +=
                                        wgt * xp.at(ni, ci, src_row, j * stride + kx);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x].map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(Op::Sigmoid { x }, out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x].map(|v| v.max(0.0));
        self.push(Op::Relu { x }, out)
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "add")?;
        let mut out = self.values[a].clone();
        out.add_assign(&self.values[b]);
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "sub")?;
        let out = {
            let av = &self.values[a];
            let bv = &self.values[b];
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
            Tensor::from_vec(av.n, av.c, av.h, av.w, data)?
        };
        Ok(self.push(Op::Sub { a, b }, out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "mul")?;
        let out = {
            let av = &self.values[a];
            let bv = &self.values[b];
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            Tensor::from_vec(av.n, av.c, av.h, av.w, data)?
        };
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x].map(|v| v * v);
        self.push(Op::Square { x }, out)
    }

    pub fn scalar_mul(&mut self, k: f64, x: NodeId) -> NodeId {
        let out = self.values[x].map(|v| k * v);
        self.push(Op::ScalarMul { x, k }, out)
    }

    /// Elementwise double-well derivative W'(u).
    pub fn well_prime(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x].map(crate::field::double_well_prime);
        self.push(Op::WellPrime { x }, out)
    }

    /// Per-channel batch normalization over (N, H, W).
    ///
    /// In training mode the batch statistics are computed here and returned so
    /// the caller can maintain running averages; in eval mode the provided
    /// running statistics are used and treated as constants.
    pub fn batch_norm_2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        training: bool,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xv = &self.values[x];
        let (n, c, h, w) = xv.shape();
        let gv = &self.values[gamma];
        let bv = &self.values[beta];
        if gv.shape() != (1, c, 1, 1) || bv.shape() != (1, c, 1, 1) {
            return Err(Error::ShapeMismatch("batch_norm: gamma/beta must be (1,C,1,1)".into()));
        }
        let m = (n * h * w) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            s += xv.at(ni, ci, i, j);
                        }
                    }
                }
                mean[ci] = s / m;
                let mut v = 0.0;
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let d = xv.at(ni, ci, i, j) - mean[ci];
                            v += d * d;
                        }
                    }
                }
                var[ci] = v / m;
            }
            (mean, var)
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::InvalidParam("batch_norm in eval mode needs running statistics".into())
            })?;
            (rm.to_vec(), rv.to_vec())
        };
        let mut out = Tensor::zeros(n, c, h, w);
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let g = gv.at(0, ci, 0, 0);
            let b = bv.at(0, ci, 0, 0);
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        *out.at_mut(ni, ci, i, j) = g * (xv.at(ni, ci, i, j) - mean[ci]) * inv + b;
                    }
                }
            }
        }
        let id = self.push(
            Op::BatchNorm { x, gamma, beta, eps, training, mean: mean.clone(), var: var.clone() },
            out,
        );
        Ok((id, mean, var))
    }

    /// Factor-2 max pooling; H and W must be even. Ties route to the first
    /// occurrence in row-major scan order.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.values[x];
        let (n, c, h, w) = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("maxpool2: H={h}, W={w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(n, c, oh, ow);
        let mut argmax = vec![0usize; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let v = xv.at(ni, ci, 2 * i + di, 2 * j + dj);
                                if v > best {
                                    best = v;
                                    best_idx = xv.idx(ni, ci, 2 * i + di, 2 * j + dj);
                                }
                            }
                        }
                        let oi = out.idx(ni, ci, i, j);
                        out.data_mut()[oi] = best;
                        argmax[oi] = best_idx;
                    }
                }
            }
        }
        Ok(self.push(Op::MaxPool2 { x, argmax }, out))
    }

    /// Nearest-neighbor factor-2 upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x];
        let (n, c, h, w) = xv.shape();
        let mut out = Tensor::zeros(n, c, 2 * h, 2 * w);
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        *out.at_mut(ni, ci, i, j) = xv.at(ni, ci, i / 2, j / 2);
                    }
                }
            }
        }
        self.push(Op::Upsample2 { x }, out)
    }

    /// Concatenate along channels.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.values[a];
        let bv = &self.values[b];
        if (av.n, av.h, av.w) != (bv.n, bv.h, bv.w) {
            return Err(Error::ShapeMismatch(format!(
                "concat: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, ca, h, w) = av.shape();
        let cb = bv.c;
        let mut out = Tensor::zeros(n, ca + cb, h, w);
        for ni in 0..n {
            for ci in 0..ca + cb {
                for i in 0..h {
                    for j in 0..w {
                        *out.at_mut(ni, ci, i, j) = if ci < ca {
                            av.at(ni, ci, i, j)
                        } else {
                            bv.at(ni, ci - ca, i, j)
                        };
                    }
                }
            }
        }
        Ok(self.push(Op::Concat { a, b }, out))
    }

    /// Differentiable TFPM Laplacian on a single-channel spatial tensor.
    ///
    /// Backward propagates through the neighbors and, unless `freeze_center`,
    /// through the center dependence of lambda(u) and c0(u).
    pub fn tfpm_laplacian_node(
        &mut self,
        x: NodeId,
        eps1: f64,
        eps2: f64,
        h: f64,
        bc: BoundaryCondition,
        freeze_center: bool,
    ) -> Result<NodeId> {
        let xv = &self.values[x];
        let (n, c, hh, ww) = xv.shape();
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("tfpm node expects 1 channel, got {c}")));
        }
        let mut out = Tensor::zeros(n, 1, hh, ww);
        for ni in 0..n {
            for i in 0..hh {
                for j in 0..ww {
                    let center = xv.at(ni, 0, i, j);
                    let (lam, c0) = tfpm_lambda_c0(center, eps1, eps2);
                    let nb = neighbor_sum(xv, ni, i, j, bc);
                    let ch = (lam * h / 2.0).cosh();
                    let den = 4.0 * ch * ch;
                    let val = lam * lam * (nb - 4.0 * c0) / den;
                    *out.at_mut(ni, 0, i, j) = if val.is_finite() { val } else { 0.0 };
                }
            }
        }
        Ok(self.push(Op::TfpmLap { x, eps1, eps2, h, bc, freeze_center }, out))
    }

    /// Differentiable 5-point Laplacian.
    pub fn fdm_laplacian_node(&mut self, x: NodeId, h: f64, bc: BoundaryCondition) -> Result<NodeId> {
        let xv = &self.values[x];
        let (n, c, hh, ww) = xv.shape();
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("fdm node expects 1 channel, got {c}")));
        }
        let inv_h2 = 1.0 / (h * h);
        let mut out = Tensor::zeros(n, 1, hh, ww);
        for ni in 0..n {
            for i in 0..hh {
                for j in 0..ww {
                    let nb = neighbor_sum(xv, ni, i, j, bc);
                    *out.at_mut(ni, 0, i, j) = (nb - 4.0 * xv.at(ni, 0, i, j)) * inv_h2;
                }
            }
        }
        Ok(self.push(Op::FdmLap { x, h, bc }, out))
    }

    fn loss_shapes(&self, p: NodeId, target: &Tensor) -> Result<()> {
        if self.values[p].shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "loss: prediction {:?} vs target {:?}",
                self.values[p].shape(),
                target.shape()
            )));
        }
        Ok(())
    }

    /// Binary cross entropy, mean over all elements; predictions clamped to
    /// [1e-7, 1 - 1e-7].
    pub fn bce(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        self.loss_shapes(p, target)?;
        let pv = &self.values[p];
        let k = pv.len() as f64;
        let mut s = 0.0;
        for (&pr, &t) in pv.data().iter().zip(target.data()) {
            let pc = pr.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            s -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        Ok(self.push(Op::Bce { p, target: target.clone() }, Tensor::scalar(s / k)))
    }

    /// Mean squared difference.
    pub fn l2(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        self.loss_shapes(p, target)?;
        let pv = &self.values[p];
        let k = pv.len() as f64;
        let s: f64 = pv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Op::L2 { p, target: target.clone() }, Tensor::scalar(s / k)))
    }

    /// Hinge loss on +/-1 encoded targets: mean max(0, 1 - that * (2p - 1)).
    pub fn hinge(&mut self, p: NodeId, target: &Tensor) -> Result<NodeId> {
        self.loss_shapes(p, target)?;
        let pv = &self.values[p];
        let k = pv.len() as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &t)| (1.0 - (2.0 * t - 1.0) * (2.0 * a - 1.0)).max(0.0))
            .sum();
        Ok(self.push(Op::Hinge { p, target: target.clone() }, Tensor::scalar(s / k)))
    }

    /// Reverse sweep from a scalar loss node. Returns per-node cotangents;
    /// parameter gradients are additionally accumulated into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Vec<Option<Tensor>>> {
        if self.values[loss].len() != 1 {
            return Err(Error::ShapeMismatch("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..self.ops.len()).rev() {
            let Some(cot) = grads[id].take() else { continue };
            self.backward_op(id, &cot, &mut grads)?;
            grads[id] = Some(cot);
        }
        for (id, op) in self.ops.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = op {
                if let Some(g) = &grads[id] {
                    store.get_mut(*pid).grad.add_assign(g);
                }
            }
        }
        Ok(grads)
    }

    fn backward_op(&self, id: NodeId, cot: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        fn acc(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
            match &mut grads[id] {
                Some(g) => g.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        }
        match &self.ops[id] {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = self.conv2d_backward(*x, *w, cot, *stride, *pad);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Sigmoid { x } => {
                let y = &self.values[id];
                let data = y.data().iter().zip(cot.data()).map(|(&yv, &g)| g * yv * (1.0 - yv));
                acc(grads, *x, Tensor::from_vec(y.n, y.c, y.h, y.w, data.collect())?);
            }
            Op::Relu { x } => {
                let xv = &self.values[*x];
                let data = xv.data().iter().zip(cot.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 });
                acc(grads, *x, Tensor::from_vec(xv.n, xv.c, xv.h, xv.w, data.collect())?);
            }
            Op::Add { a, b } => {
                acc(grads, *a, cot.clone());
                acc(grads, *b, cot.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, cot.clone());
                acc(grads, *b, cot.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let av = &self.values[*a];
                let bv = &self.values[*b];
                let da = bv.data().iter().zip(cot.data()).map(|(&v, &g)| g * v).collect();
                let db = av.data().iter().zip(cot.data()).map(|(&v, &g)| g * v).collect();
                acc(grads, *a, Tensor::from_vec(av.n, av.c, av.h, av.w, da)?);
                acc(grads, *b, Tensor::from_vec(bv.n, bv.c, bv.h, bv.w, db)?);
            }
            Op::Square { x } => {
                let xv = &self.values[*x];
                let data = xv.data().iter().zip(cot.data()).map(|(&v, &g)| 2.0 * v * g).collect();
                acc(grads, *x, Tensor::from_vec(xv.n, xv.c, xv.h, xv.w, data)?);
            }
            Op::ScalarMul { x, k } => {
                acc(grads, *x, cot.map(|v| v * k));
            }
            Op::WellPrime { x } => {
                let xv = &self.values[*x];
                let data = xv
                    .data()
                    .iter()
                    .zip(cot.data())
                    .map(|(&v, &g)| g * crate::field::double_well_second(v))
                    .collect();
                acc(grads, *x, Tensor::from_vec(xv.n, xv.c, xv.h, xv.w, data)?);
            }
            Op::BatchNorm { x, gamma, beta, eps, training, mean, var } => {
                let (dx, dg, db) =
                    self.batch_norm_backward(*x, *gamma, cot, *eps, *training, mean, var);
                acc(grads, *x, dx);
                acc(grads, *gamma, dg);
                acc(grads, *beta, db);
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = &self.values[*x];
                let mut dx = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                for (oi, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += cot.data()[oi];
                }
                acc(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let xv = &self.values[*x];
                let mut dx = Tensor::zeros(xv.n, xv.c, xv.h, xv.w);
                for ni in 0..xv.n {
                    for ci in 0..xv.c {
                        for i in 0..2 * xv.h {
                            for j in 0..2 * xv.w {
                                *dx.at_mut(ni, ci, i / 2, j / 2) += cot.at(ni, ci, i, j);
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let av = &self.values[*a];
                let bv = &self.values[*b];
                let mut da = Tensor::zeros(av.n, av.c, av.h, av.w);
                let mut db = Tensor::zeros(bv.n, bv.c, bv.h, bv.w);
                for ni in 0..av.n {
                    for ci in 0..av.c + bv.c {
                        for i in 0..av.h {
                            for j in 0..av.w {
                                let g = cot.at(ni, ci, i, j);
                                if ci < av.c {
                                    *da.at_mut(ni, ci, i, j) += g;
                                } else {
                                    *db.at_mut(ni, ci - av.c, i, j) += g;
                                }
                            }
                        }
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::TfpmLap { x, eps1, eps2, h, bc, freeze_center } => {
                let dx = self.tfpm_backward(*x, cot, *eps1, *eps2, *h, *bc, *freeze_center);
                acc(grads, *x, dx);
            }
            Op::FdmLap { x, h, bc } => {
                let xv = &self.values[*x];
                let (n, _, hh, ww) = xv.shape();
                let inv_h2 = 1.0 / (h * h);
                let mut dx = Tensor::zeros(n, 1, hh, ww);
                for ni in 0..n {
                    for i in 0..hh {
                        for j in 0..ww {
                            let g = cot.at(ni, 0, i, j) * inv_h2;
                            *dx.at_mut(ni, 0, i, j) += -4.0 * g;
                            for (di, dj) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                                let si = bc.map(i as isize + di, hh);
                                let sj = bc.map(j as isize + dj, ww);
                                *dx.at_mut(ni, 0, si, sj) += g;
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Bce { p, target } => {
                let pv = &self.values[*p];
                let k = pv.len() as f64;
                let scale = cot.item() / k;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&pr, &t)| {
                        if pr <= BCE_CLAMP || pr >= 1.0 - BCE_CLAMP {
                            0.0 // clamp region: constant, no gradient
                        } else {
                            scale * (-t / pr + (1.0 - t) / (1.0 - pr))
                        }
                    })
                    .collect();
                acc(grads, *p, Tensor::from_vec(pv.n, pv.c, pv.h, pv.w, data)?);
            }
            Op::L2 { p, target } => {
                let pv = &self.values[*p];
                let k = pv.len() as f64;
                let scale = 2.0 * cot.item() / k;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| scale * (a - b))
                    .collect();
                acc(grads, *p, Tensor::from_vec(pv.n, pv.c, pv.h, pv.w, data)?);
            }
            Op::Hinge { p, target } => {
                let pv = &self.values[*p];
                let k = pv.len() as f64;
                let scale = cot.item() / k;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &t)| {
                        let that = 2.0 * t - 1.0;
                        if 1.0 - that * (2.0 * a - 1.0) > 0.0 {
                            -2.0 * that * scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(grads, *p, Tensor::from_vec(pv.n, pv.c, pv.h, pv.w, data)?);
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        cot: &Tensor,
        stride: usize,
        pad: PadMode,
    ) -> (Tensor, Tensor, Tensor) {
        let xv = &self.values[x];
        let wv = &self.values[w];
        let (n, cin, h, wd) = xv.shape();
        let (cout, _, kh, kw) = wv.shape();
        let (_, _, oh, ow) = cot.shape();
        let k = pad.width();
        let xp = pad_tensor(xv, pad);
        let mut dxp = Tensor::zeros(n, cin, h + 2 * k, wd + 2 * k);
        let mut dw = Tensor::zeros(cout, cin, kh, kw);
        let mut db = Tensor::zeros(1, cout, 1, 1);
        for ni in 0..n {
            for co in 0..cout {
                let mut bsum = 0.0;
                for i in 0..oh {
                    for j in 0..ow {
                        bsum += cot.at(ni, co, i, j);
                    }
                }
                *db.at_mut(0, co, 0, 0) += bsum;
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut wsum = 0.0;
                            let wgt = wv.at(co, ci, ky, kx);
                            for i in 0..oh {
                                let src_row = i * stride + ky;
                                for j in 0..ow {
                                    let g = cot.at(ni, co, i, j);
                                    wsum += g * xp.at(ni, ci, src_row, j * stride + kx);
                                    *dxp.at_mut(ni, ci, src_row, j * stride + kx) += g * wgt;
                                }
                            }
                            *dw.at_mut(co, ci, ky, kx) += wsum;
                        }
                    }
                }
            }
        }
        (pad_adjoint(&dxp, pad, h, wd), dw, db)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        cot: &Tensor,
        eps: f64,
        training: bool,
        mean: &[f64],
        var: &[f64],
    ) -> (Tensor, Tensor, Tensor) {
        let xv = &self.values[x];
        let gv = &self.values[gamma];
        let (n, c, h, w) = xv.shape();
        let m = (n * h * w) as f64;
        let mut dx = Tensor::zeros(n, c, h, w);
        let mut dg = Tensor::zeros(1, c, 1, 1);
        let mut db = Tensor::zeros(1, c, 1, 1);
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let g = gv.at(0, ci, 0, 0);
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let dy = cot.at(ni, ci, i, j);
                        let xhat = (xv.at(ni, ci, i, j) - mean[ci]) * inv;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                }
            }
            *dg.at_mut(0, ci, 0, 0) = sum_dy_xhat;
            *db.at_mut(0, ci, 0, 0) = sum_dy;
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let dy = cot.at(ni, ci, i, j);
                        let v = if training {
                            let xhat = (xv.at(ni, ci, i, j) - mean[ci]) * inv;
                            g * inv * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                        } else {
                            g * inv * dy
                        };
                        *dx.at_mut(ni, ci, i, j) = v;
                    }
                }
            }
        }
        (dx, dg, db)
    }

    #[allow(clippy::too_many_arguments)]
    fn tfpm_backward(
        &self,
        x: NodeId,
        cot: &Tensor,
        eps1: f64,
        eps2: f64,
        h: f64,
        bc: BoundaryCondition,
        freeze_center: bool,
    ) -> Tensor {
        let xv = &self.values[x];
        let (n, _, hh, ww) = xv.shape();
        let e = eps1 * eps2;
        let mut dx = Tensor::zeros(n, 1, hh, ww);
        for ni in 0..n {
            for i in 0..hh {
                for j in 0..ww {
                    let g = cot.at(ni, 0, i, j);
                    if g == 0.0 {
                        continue;
                    }
                    let center = xv.at(ni, 0, i, j);
                    let gg = 4.0 * center * center + 2.0;
                    let lam = (gg / e).sqrt();
                    let ch = (lam * h / 2.0).cosh();
                    let den = 4.0 * ch * ch;
                    if !den.is_finite() {
                        continue; // stencil response already collapsed to zero
                    }
                    let q = gg / (e * den);
                    // neighbor path: d out / d neighbor = q
                    for (di, dj) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                        let si = bc.map(i as isize + di, hh);
                        let sj = bc.map(j as isize + dj, ww);
                        *dx.at_mut(ni, 0, si, sj) += g * q;
                    }
                    if !freeze_center {
                        // center path through lambda(u) and c0(u)
                        let nb = neighbor_sum(xv, ni, i, j, bc);
                        let c0 = 6.0 * center * center / gg;
                        let gp = 8.0 * center;
                        let lamp = if lam > 0.0 { gp / (2.0 * e * lam) } else { 0.0 };
                        let denp = 2.0 * h * (lam * h).sinh() * lamp;
                        let qp = gp / (e * den) - q * denp / den;
                        let c0p = 24.0 * center / (gg * gg);
                        let dcenter = qp * (nb - 4.0 * c0) - 4.0 * q * c0p;
                        if dcenter.is_finite() {
                            *dx.at_mut(ni, 0, i, j) += g * dcenter;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[inline]
fn neighbor_sum(x: &Tensor, n: usize, i: usize, j: usize, bc: BoundaryCondition) -> f64 {
    let (h, w) = (x.h, x.w);
    x.at(n, 0, bc.map(i as isize - 1, h), j)
        + x.at(n, 0, bc.map(i as isize + 1, h), j)
        + x.at(n, 0, i, bc.map(j as isize - 1, w))
        + x.at(n, 0, i, bc.map(j as isize + 1, w))
}

/// Central-difference gradient of a scalar-valued function of one tensor.
/// Test oracle; kept in the library so integration suites can reuse it.
pub fn central_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error, floored against unit scale.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
