//! Minimal reverse-mode differentiation.
//!
//! A [`Tape`] records every differentiable operation as a node holding its
//! value, its input handles and a [`BackwardOp`]. Leaves are either
//! parameters (gradients are kept) or constants. [`Tape::backward`] walks the
//! nodes in reverse recording order and *adds* the result into each
//! parameter's gradient buffer, so calling it twice doubles the gradients
//! until [`Tape::zero_grads`] is called.
//!
//! Modules outside this one plug in by implementing [`BackwardOp`] and calling
//! [`Tape::record`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad_output: &'a [f64],
    /// `needs[i]` is false when input `i` does not lead to any parameter;
    /// rules may skip that gradient and return `None`.
    pub needs: Vec<bool>,
}

/// Backward rule of a recorded operation.
pub trait BackwardOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// One entry per input, each the same length as that input (or `None`).
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param,
    Constant,
    Op,
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn BackwardOp>>,
    kind: Kind,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Register a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, Kind::Param, true)
    }

    /// Register a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, Kind::Constant, false)
    }

    /// Record the result of an operation over `inputs`.
    pub fn record(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn BackwardOp>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, inputs.to_vec(), Some(op), Kind::Op, requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: Option<Box<dyn BackwardOp>>,
        kind: Kind,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            op,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Zero the gradient buffers of every parameter leaf.
    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut().filter(|n| n.kind == Kind::Param) {
            n.value.zero_grad();
        }
    }

    /// Move a parameter's tensor (with its gradient buffer) out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Propagate d(loss)/d(node) back to every parameter leaf reachable from
    /// the single-element `loss`. Returns the number of operations visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad_output) = adjoints[i].take() else {
                continue;
            };
            visited += 1;
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad_output: &grad_output,
                needs: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let grads = op.backward(&ctx);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{}", op.name());
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.len(), "{}", op.name());
                match &mut adjoints[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }

        for (i, adj) in adjoints.into_iter().enumerate() {
            if let (Some(g), Kind::Param) = (adj, self.nodes[i].kind) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(visited)
    }

    // ---- generic operations -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).axpby(1.0, self.value(b), 1.0)?;
        Ok(self.record(&[a, b], out, Box::new(AddOp)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).axpby(1.0, self.value(b), -1.0)?;
        Ok(self.record(&[a, b], out, Box::new(SubOp)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape(), data)?;
        Ok(self.record(&[a, b], out, Box::new(MulOp)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| k * v);
        self.record(&[a], out, Box::new(ScaleOp(k)))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.record(&[a], out, Box::new(AddScalarOp))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.record(&[a], out, Box::new(SquareOp))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(&[a], out, Box::new(SumOp { scale: 1.0 }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len() as f64;
        let out = Tensor::scalar(x.sum() / n);
        self.record(&[a], out, Box::new(SumOp { scale: 1.0 / n }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.record(&[a], out, Box::new(ReluOp))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(&[a], out, Box::new(ReshapeOp)))
    }

    /// `y[n, m] = sum_k x[n, k] w[m, k] + b[m]` for `x: [N, K]`, `w: [M, K]`, `b: [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape().len() != 2 || ws.shape().len() != 2 || bs.shape().len() != 1 {
            return Err(Error::contract(format!(
                "dense expects [N,K]x[M,K]+[M], got {:?} {:?} {:?}",
                xs.shape(),
                ws.shape(),
                bs.shape()
            )));
        }
        let (n, k) = (xs.shape()[0], xs.shape()[1]);
        let m = ws.shape()[0];
        if ws.shape()[1] != k || bs.shape()[0] != m {
            return Err(Error::contract(format!(
                "dense shape mismatch: x {:?}, w {:?}, b {:?}",
                xs.shape(),
                ws.shape(),
                bs.shape()
            )));
        }
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            let row = &xs.data()[i * k..(i + 1) * k];
            for j in 0..m {
                let wr = &ws.data()[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(wr) {
                    acc += a * b;
                }
                y[i * m + j] = acc + bs.data()[j];
            }
        }
        let out = Tensor::from_parts(&[n, m], y)?;
        Ok(self.record(&[x, w, b], out, Box::new(DenseOp)))
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() < 3 {
            return Err(Error::contract(format!(
                "global average pool needs [N, C, ...], got {:?}",
                xs.shape()
            )));
        }
        let (n, c) = (xs.shape()[0], xs.shape()[1]);
        let inner = xs.len() / (n * c);
        let data = xs
            .data()
            .chunks_exact(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::from_parts(&[n, c], data)?;
        Ok(self.record(&[x], out, Box::new(PoolOp { inner })))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits);
        if ls.shape().len() != 2 || ls.shape()[0] != labels.len() {
            return Err(Error::contract(format!(
                "logits {:?} do not match {} labels",
                ls.shape(),
                labels.len()
            )));
        }
        let k = ls.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = softmax_rows(ls.data(), k);
        let n = labels.len();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &ls.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.record(
            &[logits],
            out,
            Box::new(CrossEntropyOp {
                probs,
                labels: labels.to_vec(),
                k,
            }),
        ))
    }

    /// Mean of channel `c` of an `[N, C, ...]` activation.
    pub fn channel_mean(&mut self, x: Var, c: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() < 2 || c >= xs.shape()[1] {
            return Err(Error::contract(format!(
                "channel {c} out of range for activation {:?}",
                xs.shape()
            )));
        }
        let (n, channels) = (xs.shape()[0], xs.shape()[1]);
        let inner = xs.len() / (n * channels);
        let mut acc = 0.0;
        for i in 0..n {
            let base = (i * channels + c) * inner;
            acc += xs.data()[base..base + inner].iter().sum::<f64>();
        }
        let out = Tensor::scalar(acc / (n * inner) as f64);
        Ok(self.record(
            &[x],
            out,
            Box::new(ChannelMeanOp {
                c,
                inner,
                n,
                channels,
            }),
        ))
    }

    /// Stack a single `[C, W, H]` frame `frames` times into a `[1, C, T, W, H]` clip.
    pub fn repeat_frame(&mut self, frame: Var, frames: usize) -> Result<Var> {
        let fs = self.value(frame);
        if fs.shape().len() != 3 || frames == 0 {
            return Err(Error::contract(format!(
                "repeat_frame needs a [C, W, H] frame, got {:?}",
                fs.shape()
            )));
        }
        let (c, w, h) = (fs.shape()[0], fs.shape()[1], fs.shape()[2]);
        let plane = w * h;
        let mut data = Vec::with_capacity(c * frames * plane);
        for ch in 0..c {
            let src = &fs.data()[ch * plane..(ch + 1) * plane];
            for _ in 0..frames {
                data.extend_from_slice(src);
            }
        }
        let out = Tensor::from_parts(&[1, c, frames, w, h], data)?;
        Ok(self.record(&[frame], out, Box::new(RepeatFrameOp { frames, plane })))
    }
}

/// Row-wise numerically stable softmax of a flat `[N, K]` buffer.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

struct AddOp;
impl BackwardOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output.to_vec();
        vec![Some(g.clone()), Some(g)]
    }
}

struct SubOp;
impl BackwardOp for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output;
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct MulOp;
impl BackwardOp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output;
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            Some(g.iter().zip(b).map(|(g, y)| g * y).collect()),
            Some(g.iter().zip(a).map(|(g, x)| g * x).collect()),
        ]
    }
}

struct ScaleOp(f64);
impl BackwardOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_output.iter().map(|g| g * self.0).collect())]
    }
}

struct AddScalarOp;
impl BackwardOp for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_output.to_vec())]
    }
}

struct SquareOp;
impl BackwardOp for SquareOp {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        vec![Some(
            ctx.grad_output.iter().zip(x).map(|(g, v)| 2.0 * v * g).collect(),
        )]
    }
}

struct SumOp {
    scale: f64,
}
impl BackwardOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let g = ctx.grad_output[0] * self.scale;
        vec![Some(vec![g; ctx.inputs[0].len()])]
    }
}

struct ReluOp;
impl BackwardOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        vec![Some(
            ctx.grad_output
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

struct ReshapeOp;
impl BackwardOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad_output.to_vec())]
    }
}

struct DenseOp;
impl BackwardOp for DenseOp {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let m = w.shape()[0];
        let g = ctx.grad_output;
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..m {
                    let gij = g[i * m + j];
                    let wr = &w.data()[j * k..(j + 1) * k];
                    for (dst, wv) in gx[i * k..(i + 1) * k].iter_mut().zip(wr) {
                        *dst += gij * wv;
                    }
                }
            }
            gx
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![0.0; m * k];
            for i in 0..n {
                let row = &x.data()[i * k..(i + 1) * k];
                for j in 0..m {
                    let gij = g[i * m + j];
                    for (dst, xv) in gw[j * k..(j + 1) * k].iter_mut().zip(row) {
                        *dst += gij * xv;
                    }
                }
            }
            gw
        });
        let gb = ctx.needs[2].then(|| {
            let mut gb = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    gb[j] += g[i * m + j];
                }
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

struct PoolOp {
    inner: usize,
}
impl BackwardOp for PoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let scale = 1.0 / self.inner as f64;
        let mut g = Vec::with_capacity(ctx.inputs[0].len());
        for &go in ctx.grad_output {
            g.extend(std::iter::repeat_n(go * scale, self.inner));
        }
        vec![Some(g)]
    }
}

struct CrossEntropyOp {
    probs: Vec<f64>,
    labels: Vec<usize>,
    k: usize,
}
impl BackwardOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let scale = ctx.grad_output[0] / self.labels.len() as f64;
        let mut g: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            g[i * self.k + l] -= scale;
        }
        vec![Some(g)]
    }
}

struct ChannelMeanOp {
    c: usize,
    inner: usize,
    n: usize,
    channels: usize,
}
impl BackwardOp for ChannelMeanOp {
    fn name(&self) -> &'static str {
        "channel_mean"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let v = ctx.grad_output[0] / (self.n * self.inner) as f64;
        let mut g = vec![0.0; ctx.inputs[0].len()];
        for i in 0..self.n {
            let base = (i * self.channels + self.c) * self.inner;
            g[base..base + self.inner].iter_mut().for_each(|x| *x = v);
        }
        vec![Some(g)]
    }
}

struct RepeatFrameOp {
    frames: usize,
    plane: usize,
}
impl BackwardOp for RepeatFrameOp {
    fn name(&self) -> &'static str {
        "repeat_frame"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let c = ctx.inputs[0].len() / self.plane;
        let mut g = vec![0.0; ctx.inputs[0].len()];
        for ch in 0..c {
            let dst = &mut g[ch * self.plane..(ch + 1) * self.plane];
            for t in 0..self.frames {
                let off = (ch * self.frames + t) * self.plane;
                dst.iter_mut()
                    .zip(&ctx.grad_output[off..off + self.plane])
                    .for_each(|(d, s)| *d += s);
            }
        }
        vec![Some(g)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let y = tape.square(x);
        let z = tape.relu(y);
        let s = tape.sum(z);
        assert_eq!(tape.backward(s).unwrap(), 3);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn double_backward_accumulates_twice() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.param(random(&[3, 4], &mut rng));
        let w = tape.param(random(&[2, 4], &mut rng));
        let b = tape.param(random(&[2], &mut rng));
        let y = tape.dense(x, w, b).unwrap();
        let loss = tape.softmax_cross_entropy(y, &[0, 1, 1]).unwrap();
        tape.backward(loss).unwrap();
        let once: Vec<f64> = tape.grad(w).unwrap().to_vec();
        tape.backward(loss).unwrap();
        for (a, b) in tape.grad(w).unwrap().iter().zip(&once) {
            assert_eq!(*a, 2.0 * b);
        }
        tape.zero_grads();
        assert!(tape.grad(w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = random(&[5, 6], &mut rng);
        let wv = random(&[3, 6], &mut rng);
        let bv = random(&[3], &mut rng);
        let run = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.constant(xv.clone());
            let w = tape.param(wv.clone());
            let b = tape.param(bv.clone());
            let y = tape.dense(x, w, b).unwrap();
            let l1 = tape.softmax_cross_entropy(y, &[0, 1, 2, 0, 1]).unwrap();
            let sq = tape.square(y);
            let l2 = tape.mean(sq);
            let root = match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(root).unwrap();
            tape.grad(w).unwrap().to_vec()
        };
        let (g1, g2, g12) = (run(1), run(2), run(3));
        for i in 0..g12.len() {
            let sum = g1[i] + g2[i];
            let rel = (g12[i] - sum).abs() / sum.abs().max(1e-300);
            assert!(rel <= 1e-12, "element {i}: {} vs {}", g12[i], sum);
        }
    }

    #[test]
    fn uniform_logits_give_log_k_loss() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 6]));
        let loss = tape.softmax_cross_entropy(logits, &[3, 5]).unwrap();
        assert!((tape.value(loss).item() - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn generic_ops_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            random(&[2, 3, 2, 2], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[4], &mut rng),
            random(&[2, 3, 4], &mut rng),
        ];
        let report = gradcheck(
            |tape, v| {
                let pooled = tape.global_avg_pool(v[0])?;
                let y = tape.dense(pooled, v[1], v[2])?;
                let r = tape.relu(y);
                let ce = tape.softmax_cross_entropy(r, &[1, 3])?;
                let shaped = tape.reshape(v[3], &[2, 3, 2, 2])?;
                let prod = tape.mul(shaped, v[0])?;
                let m = tape.channel_mean(prod, 1)?;
                let d = tape.sub(ce, m)?;
                let s = tape.scale(d, 0.5);
                Ok(tape.add_scalar(s, 1.0))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.failures().count(), 0, "{report}");
    }

    #[test]
    fn repeat_frame_backward_sums_over_time() {
        let mut tape = Tape::new();
        let f = tape.param(Tensor::from_fn(&[1, 2, 2], |i| i as f64));
        let clip = tape.repeat_frame(f, 3).unwrap();
        assert_eq!(tape.value(clip).shape(), &[1, 1, 3, 2, 2]);
        let s = tape.sum(clip);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(f).unwrap(), &[3.0; 4]);
    }
}
