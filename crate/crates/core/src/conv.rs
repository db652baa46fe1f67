//! Dense multi-channel 3D cross-correlation over `[N, C_in, T, W, H]` inputs
//! with `[C_out, C_in, D, KW, KH]` weights.
//!
//! Every output is accumulated over `(c, dt, kx, ky)` in that order and the
//! bias is added last, so [`conv3d_forward`] and [`conv3d_forward_im2col`]
//! agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::Tensor;

/// Layer geometry. Axis triples are ordered `(time, width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(c_in: usize, c_out: usize, kernel: [usize; 3]) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: [1; 3],
            padding: [0; 3],
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [d, w, h] = self.kernel;
        [self.c_out, self.c_in, d, w, h]
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::contract("channel counts must be positive"));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::contract(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// `floor((in + 2 pad - k) / stride) + 1` per axis.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(Error::contract(format!(
                    "input extents {input:?} with padding {:?} are smaller than kernel {:?}",
                    self.padding, self.kernel
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
struct Dims {
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Dims {
    fn resolve(x: &[usize], w: &[usize], b: Option<&[usize]>, geom: &ConvGeometry) -> Result<Self> {
        if x.len() != 5 {
            return Err(Error::contract(format!(
                "input must be [N, C, T, W, H], got {x:?}"
            )));
        }
        if w != geom.weight_shape() {
            return Err(Error::contract(format!(
                "weights {w:?} do not match geometry {:?}",
                geom.weight_shape()
            )));
        }
        if x[1] != geom.c_in {
            return Err(Error::contract(format!(
                "input has {} channels, layer expects {}",
                x[1], geom.c_in
            )));
        }
        if let Some(b) = b {
            if b != [geom.c_out] {
                return Err(Error::contract(format!("bias {b:?} must be [{}]", geom.c_out)));
            }
        }
        let input = [x[2], x[3], x[4]];
        Ok(Self {
            c_in: geom.c_in,
            c_out: geom.c_out,
            input,
            output: geom.output_extents(input)?,
            kernel: geom.kernel,
            stride: geom.stride,
            padding: geom.padding,
        })
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    /// Input coordinate along `axis` touched by output `o` and tap `k`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride[axis] + k).checked_sub(self.padding[axis])?;
        (p < self.input[axis]).then_some(p)
    }

    /// Visit every in-bounds `(tap index, input offset)` of one output
    /// position in `(c, dt, kx, ky)` order.
    #[inline]
    fn for_each_tap(&self, pos: [usize; 3], mut f: impl FnMut(usize, usize)) {
        let [kd, kw, kh] = self.kernel;
        let [_, iw, ih] = self.input;
        for c in 0..self.c_in {
            for dt in 0..kd {
                let Some(t) = self.source(0, pos[0], dt) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(x) = self.source(1, pos[1], kx) else {
                        continue;
                    };
                    let row = ((c * self.input[0] + t) * iw + x) * ih;
                    let tap_row = ((c * kd + dt) * kw + kx) * kh;
                    for ky in 0..kh {
                        if let Some(y) = self.source(2, pos[2], ky) {
                            f(tap_row + ky, row + y);
                        }
                    }
                }
            }
        }
    }

    fn position(&self, flat: usize) -> [usize; 3] {
        let [_, ow, oh] = self.output;
        [flat / (ow * oh), (flat / oh) % ow, flat % oh]
    }
}

/// Direct loop-nest forward pass; output `[N, C_out, T', W', H']`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let d = Dims::resolve(x.shape(), w.shape(), Some(b.shape()), geom)?;
    let n = x.shape()[0];
    let (vin, vout, taps) = (d.in_volume(), d.out_volume(), d.taps());
    let mut out = vec![0.0; n * d.c_out * vout];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    par::for_each_chunk_mut(&mut out, vout, |block, dst| {
        let (ni, o) = (block / d.c_out, block % d.c_out);
        let xs = &xd[ni * d.c_in * vin..(ni + 1) * d.c_in * vin];
        let ws = &wd[o * taps..(o + 1) * taps];
        for (p, y) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            d.for_each_tap(d.position(p), |k, i| acc += ws[k] * xs[i]);
            *y = acc + bd[o];
        }
    });
    let [ot, ow, oh] = d.output;
    Tensor::from_parts(&[n, d.c_out, ot, ow, oh], out)
}

/// Patch-matrix forward pass: unfold each sample into a `[T'W'H', taps]`
/// matrix with zeros at padded taps, then take row dot products.
pub fn conv3d_forward_im2col(x: &Tensor, w: &Tensor, b: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let d = Dims::resolve(x.shape(), w.shape(), Some(b.shape()), geom)?;
    let n = x.shape()[0];
    let (vin, vout, taps) = (d.in_volume(), d.out_volume(), d.taps());
    let mut out = vec![0.0; n * d.c_out * vout];
    par::for_each_chunk_mut(&mut out, d.c_out * vout, |ni, dst| {
        let xs = &x.data()[ni * d.c_in * vin..(ni + 1) * d.c_in * vin];
        let mut cols = vec![0.0; vout * taps];
        for p in 0..vout {
            let row = &mut cols[p * taps..(p + 1) * taps];
            d.for_each_tap(d.position(p), |k, i| row[k] = xs[i]);
        }
        for o in 0..d.c_out {
            let ws = &w.data()[o * taps..(o + 1) * taps];
            for p in 0..vout {
                let row = &cols[p * taps..(p + 1) * taps];
                let mut acc = 0.0;
                for k in 0..taps {
                    acc += ws[k] * row[k];
                }
                dst[o * vout + p] = acc + b.data()[o];
            }
        }
    });
    let [ot, ow, oh] = d.output;
    Tensor::from_parts(&[n, d.c_out, ot, ow, oh], out)
}

/// Gradients requested from [`conv3d_backward`].
#[derive(Debug, Clone, Copy)]
pub struct ConvNeeds {
    pub input: bool,
    pub weights: bool,
    pub bias: bool,
}

impl ConvNeeds {
    pub const ALL: Self = Self {
        input: true,
        weights: true,
        bias: true,
    };
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Adjoints of the forward pass for upstream gradient `grad_out`.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeometry,
    grad_out: &[f64],
    needs: ConvNeeds,
) -> Result<ConvGrads> {
    let d = Dims::resolve(x.shape(), w.shape(), None, geom)?;
    let n = x.shape()[0];
    let (vin, vout, taps) = (d.in_volume(), d.out_volume(), d.taps());
    if grad_out.len() != n * d.c_out * vout {
        return Err(Error::contract("upstream gradient does not match the output"));
    }
    let mut grads = ConvGrads::default();

    if needs.bias {
        grads.bias = Some(
            (0..d.c_out)
                .map(|o| {
                    (0..n)
                        .map(|ni| {
                            let off = (ni * d.c_out + o) * vout;
                            grad_out[off..off + vout].iter().sum::<f64>()
                        })
                        .sum()
                })
                .collect(),
        );
    }

    if needs.weights {
        let mut gw = vec![0.0; d.c_out * taps];
        par::for_each_chunk_mut(&mut gw, taps, |o, dst| {
            for ni in 0..n {
                let xs = &x.data()[ni * d.c_in * vin..(ni + 1) * d.c_in * vin];
                let g = &grad_out[(ni * d.c_out + o) * vout..(ni * d.c_out + o + 1) * vout];
                for (p, &gp) in g.iter().enumerate() {
                    if gp != 0.0 {
                        d.for_each_tap(d.position(p), |k, i| dst[k] += gp * xs[i]);
                    }
                }
            }
        });
        grads.weights = Some(gw);
    }

    if needs.input {
        let mut gx = vec![0.0; n * d.c_in * vin];
        par::for_each_chunk_mut(&mut gx, d.c_in * vin, |ni, dst| {
            for o in 0..d.c_out {
                let ws = &w.data()[o * taps..(o + 1) * taps];
                let g = &grad_out[(ni * d.c_out + o) * vout..(ni * d.c_out + o + 1) * vout];
                for (p, &gp) in g.iter().enumerate() {
                    if gp != 0.0 {
                        d.for_each_tap(d.position(p), |k, i| dst[i] += gp * ws[k]);
                    }
                }
            }
        });
        grads.input = Some(gx);
    }
    Ok(grads)
}

/// Record a convolution on the tape.
pub fn conv3d_var(tape: &mut Tape, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
    let out = conv3d_forward(tape.value(x), tape.value(w), tape.value(b), &geom)?;
    Ok(tape.record(&[x, w, b], out, Box::new(ConvOp { geom })))
}

struct ConvOp {
    geom: ConvGeometry,
}

impl BackwardOp for ConvOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let needs = ConvNeeds {
            input: ctx.needs[0],
            weights: ctx.needs[1],
            bias: ctx.needs[2],
        };
        let g = conv3d_backward(ctx.inputs[0], ctx.inputs[1], &self.geom, ctx.grad_output, needs)
            .expect("validated when recorded");
        vec![g.input, g.weights, g.bias]
    }
}

/// 2D convolution of `[N, C, W, H]` with `[C_out, C, KW, KH]` weights.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::contract(format!(
            "2D convolution needs [N, C, W, H] and [C_out, C, KW, KH], got {xs:?} and {ws:?}"
        )));
    }
    let geom = ConvGeometry::new(ws[1], ws[0], [1, ws[2], ws[3]])
        .with_stride([1, stride[0], stride[1]])
        .with_padding([0, padding[0], padding[1]]);
    let x3 = x.clone().reshape(&[xs[0], xs[1], 1, xs[2], xs[3]])?;
    let w3 = w.clone().reshape(&geom.weight_shape())?;
    let y = conv3d_forward(&x3, &w3, b, &geom)?;
    let s = y.shape().to_vec();
    y.reshape(&[s[0], s[1], s[3], s[4]])
}
