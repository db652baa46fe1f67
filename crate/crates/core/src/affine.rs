//! Similarity transforms, sampling grids and bilinear resampling.
//!
//! Coordinates: for an extent `n`, pixel index `i` sits at the normalized
//! lattice position `(i - (n-1)/2) / n`. One normalized unit therefore spans
//! the whole image, so a translation `t_x` moves content by `t_x * W` pixels.
//! The sampler converts normalized coordinates back with [`to_pixel`].
//!
//! The hat weight `max(0, 1 - |u|)` has kinks at `u = 0` and `|u| = 1`. The
//! backward pass uses the mean of the one-sided derivatives there, which
//! makes the gradient at lattice-aligned positions (identity transforms,
//! whole-pixel shifts) equal to the limit of a central difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::Tensor;

/// Pixel coordinates closer than this to an integer are snapped onto it.
pub const SNAP_EPS: f64 = 1e-10;

/// Scale, rotation (radians, counter-clockwise positive) and translation
/// (fraction of image width / height) of one temporal step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub s: f64,
    pub r: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        s: 1.0,
        r: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(s: f64, r: f64, tx: f64, ty: f64) -> Result<Self> {
        let p = Self { s, r, tx, ty };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("affine parameters {a:?}")));
        }
        if self.s <= 0.0 {
            return Err(Error::Domain(format!("scale must be positive, got {}", self.s)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.s, self.r, self.tx, self.ty]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            s: v[0],
            r: v[1],
            tx: v[2],
            ty: v[3],
        }
    }

    /// Parameters of the inverse transform.
    pub fn inverse(&self) -> Self {
        // sR(x + t) = y  =>  x = (1/s) R(-r) (y + (-s R(r) t))
        let (sin, cos) = self.r.sin_cos();
        let tx = -self.s * (cos * self.tx - sin * self.ty);
        let ty = -self.s * (sin * self.tx + cos * self.ty);
        Self {
            s: 1.0 / self.s,
            r: -self.r,
            tx,
            ty,
        }
    }
}

/// Row-major 2x3 matrix `[θ11 θ12 θ13; θ21 θ22 θ23]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix(pub [f64; 6]);

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    /// `self ∘ other` as homogeneous 3x3 products.
    pub fn then(&self, other: &AffineMatrix) -> AffineMatrix {
        let (a, b) = (&self.0, &other.0);
        AffineMatrix([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    pub fn translation(&self) -> (f64, f64) {
        (self.0[2], self.0[5])
    }
}

/// Build the matrix `s R(r) [I | t]`.
pub fn compose(p: &AffineParams) -> Result<AffineMatrix> {
    p.validate()?;
    let (sin, cos) = p.r.sin_cos();
    let (sc, ss) = (p.s * cos, p.s * sin);
    Ok(AffineMatrix([
        sc,
        -ss,
        p.tx * sc - p.ty * ss,
        ss,
        sc,
        p.tx * ss + p.ty * sc,
    ]))
}

/// Gradient of `(s, r, t_x, t_y)` given the gradient of the six entries.
pub fn compose_backward(p: &AffineParams, g: &[f64; 6]) -> [f64; 4] {
    let (sin, cos) = p.r.sin_cos();
    let (tx, ty, s) = (p.tx, p.ty, p.s);
    let ds = [cos, -sin, tx * cos - ty * sin, sin, cos, tx * sin + ty * cos];
    let dr = [
        -s * sin,
        -s * cos,
        -tx * s * sin - ty * s * cos,
        s * cos,
        -s * sin,
        tx * s * cos - ty * s * sin,
    ];
    let dot = |d: &[f64; 6]| d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
    [
        dot(&ds),
        dot(&dr),
        g[2] * s * cos + g[5] * s * sin,
        -g[2] * s * sin + g[5] * s * cos,
    ]
}

/// Normalized lattice position of pixel `i` along an axis of `extent` pixels.
pub fn lattice_coord(i: usize, extent: usize) -> f64 {
    (i as f64 - (extent as f64 - 1.0) / 2.0) / extent as f64
}

/// Pixel-index position of a normalized coordinate.
pub fn to_pixel(g: f64, extent: usize) -> f64 {
    let p = (extent as f64 - 1.0) / 2.0 + g * extent as f64;
    let r = p.round();
    if (p - r).abs() <= SNAP_EPS {
        r
    } else {
        p
    }
}

/// Source coordinates `(G_x, G_y)` for every output pixel, stored `W x H x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    width: usize,
    height: usize,
    coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn from_coords(width: usize, height: usize, coords: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || coords.len() != width * height * 2 {
            return Err(Error::contract(format!(
                "grid of {width}x{height} needs {} coordinates, got {}",
                width * height * 2,
                coords.len()
            )));
        }
        Ok(Self {
            width,
            height,
            coords,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.width, self.height, 2]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let k = (x * self.height + y) * 2;
        (self.coords[k], self.coords[k + 1])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(&self.shape(), self.coords.clone()).expect("grid shape")
    }
}

/// The untransformed lattice.
pub fn base_lattice(width: usize, height: usize) -> Result<SamplingGrid> {
    make_grid(&AffineMatrix::IDENTITY, width, height)
}

/// Apply `m` to every lattice point of a `width x height` image.
pub fn make_grid(m: &AffineMatrix, width: usize, height: usize) -> Result<SamplingGrid> {
    if width == 0 || height == 0 {
        return Err(Error::contract(format!("grid extent {width}x{height}")));
    }
    let mut coords = Vec::with_capacity(width * height * 2);
    for i in 0..width {
        let x = lattice_coord(i, width);
        for j in 0..height {
            let y = lattice_coord(j, height);
            let (gx, gy) = m.apply(x, y);
            coords.push(gx);
            coords.push(gy);
        }
    }
    Ok(SamplingGrid {
        width,
        height,
        coords,
    })
}

/// Gradient of the six matrix entries given the gradient of the grid.
pub fn make_grid_backward(grad_coords: &[f64], width: usize, height: usize) -> [f64; 6] {
    let mut g = [0.0; 6];
    for i in 0..width {
        let x = lattice_coord(i, width);
        for j in 0..height {
            let y = lattice_coord(j, height);
            let k = (i * height + j) * 2;
            let (gx, gy) = (grad_coords[k], grad_coords[k + 1]);
            g[0] += gx * x;
            g[1] += gx * y;
            g[2] += gx;
            g[3] += gy * x;
            g[4] += gy * y;
            g[5] += gy;
        }
    }
    g
}

/// Hat weight `max(0, 1 - |u|)`.
#[inline]
pub fn hat(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

/// Derivative of [`hat`] with kinks resolved to the mean one-sided slope.
#[inline]
fn hat_slope(u: f64) -> f64 {
    let a = u.abs();
    if a > 1.0 || u == 0.0 {
        0.0
    } else if a == 1.0 {
        -0.5 * u.signum()
    } else {
        -u.signum()
    }
}

fn check_plane(len: usize, grid: &SamplingGrid) -> Result<usize> {
    let plane = grid.width * grid.height;
    if len == 0 || !len.is_multiple_of(plane) {
        return Err(Error::contract(format!(
            "source of {len} values does not match a {}x{} grid",
            grid.width, grid.height
        )));
    }
    Ok(len / plane)
}

/// Up to four in-bounds neighbours of a sample position with their weights.
fn taps(px: f64, py: f64, w: usize, h: usize) -> ([(usize, f64, f64); 4], usize) {
    let (i0, j0) = (px.floor(), py.floor());
    let mut out = [(0usize, 0.0, 0.0); 4];
    let mut n = 0;
    for i in [i0, i0 + 1.0] {
        if i < 0.0 || i >= w as f64 {
            continue;
        }
        for j in [j0, j0 + 1.0] {
            if j < 0.0 || j >= h as f64 {
                continue;
            }
            out[n] = (i as usize * h + j as usize, hat(px - i), hat(py - j));
            n += 1;
        }
    }
    (out, n)
}

/// Resample every `W x H` plane of `source` at the grid coordinates.
///
/// Output pixel `(x, y)` is `Σ_ij K[i, j] hat(p_x - i) hat(p_y - j)` with
/// `p = to_pixel(G)`; positions outside the image contribute nothing.
pub fn sample_planes(source: &[f64], grid: &SamplingGrid) -> Result<Vec<f64>> {
    let planes = check_plane(source.len(), grid)?;
    let (w, h) = (grid.width, grid.height);
    let plane = w * h;
    let mut out = vec![0.0; source.len()];
    for x in 0..w {
        for y in 0..h {
            let (gx, gy) = grid.get(x, y);
            let (taps, n) = taps(to_pixel(gx, w), to_pixel(gy, h), w, h);
            for c in 0..planes {
                let src = &source[c * plane..(c + 1) * plane];
                let mut acc = 0.0;
                for &(k, wx, wy) in &taps[..n] {
                    acc += src[k] * wx * wy;
                }
                out[c * plane + x * h + y] = acc;
            }
        }
    }
    Ok(out)
}

/// [`sample_planes`] on a `[W, H]` or `[C, W, H]` tensor.
pub fn bilinear_sample(source: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    check_source_shape(source, grid)?;
    Tensor::from_parts(source.shape(), sample_planes(source.data(), grid)?)
}

fn check_source_shape(source: &Tensor, grid: &SamplingGrid) -> Result<()> {
    let s = source.shape();
    let n = s.len();
    if n < 2 || s[n - 2] != grid.width || s[n - 1] != grid.height {
        return Err(Error::contract(format!(
            "source {:?} does not match a {}x{} grid",
            s, grid.width, grid.height
        )));
    }
    Ok(())
}

/// Adjoint of [`sample_planes`]: gradients of the source planes and of the
/// grid coordinates (summed over planes, which share the grid).
pub fn sample_planes_backward(
    source: &[f64],
    grid: &SamplingGrid,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let planes = check_plane(source.len(), grid)?;
    if upstream.len() != source.len() {
        return Err(Error::contract("upstream gradient does not match source"));
    }
    let (w, h) = (grid.width, grid.height);
    let plane = w * h;
    let mut grad_source = vec![0.0; source.len()];
    let mut grad_grid = vec![0.0; plane * 2];
    for x in 0..w {
        for y in 0..h {
            let (gx, gy) = grid.get(x, y);
            let (px, py) = (to_pixel(gx, w), to_pixel(gy, h));
            let (i0, j0) = (px.floor(), py.floor());
            let (mut dpx, mut dpy) = (0.0, 0.0);
            for c in 0..planes {
                let g = upstream[c * plane + x * h + y];
                if g == 0.0 {
                    continue;
                }
                let src = &source[c * plane..(c + 1) * plane];
                let gsrc = &mut grad_source[c * plane..(c + 1) * plane];
                for di in -1..=1 {
                    let i = i0 + di as f64;
                    if i < 0.0 || i >= w as f64 {
                        continue;
                    }
                    let (ax, sx) = (hat(px - i), hat_slope(px - i));
                    if ax == 0.0 && sx == 0.0 {
                        continue;
                    }
                    for dj in -1..=1 {
                        let j = j0 + dj as f64;
                        if j < 0.0 || j >= h as f64 {
                            continue;
                        }
                        let (ay, sy) = (hat(py - j), hat_slope(py - j));
                        let k = i as usize * h + j as usize;
                        gsrc[k] += g * ax * ay;
                        dpx += g * src[k] * sx * ay;
                        dpy += g * src[k] * ax * sy;
                    }
                }
            }
            // p = c + G * extent
            grad_grid[(x * h + y) * 2] = dpx * w as f64;
            grad_grid[(x * h + y) * 2 + 1] = dpy * h as f64;
        }
    }
    Ok((grad_source, grad_grid))
}

/// Adjoint of [`bilinear_sample`] with respect to the source and the grid.
pub fn bilinear_backward(
    source: &Tensor,
    grid: &SamplingGrid,
    upstream: &Tensor,
) -> Result<(Tensor, SamplingGrid)> {
    check_source_shape(source, grid)?;
    source.check_same_shape(upstream)?;
    let (gs, gg) = sample_planes_backward(source.data(), grid, upstream.data())?;
    Ok((
        Tensor::from_parts(source.shape(), gs)?,
        SamplingGrid::from_coords(grid.width, grid.height, gg)?,
    ))
}

/// Chain the sampler adjoint through grid construction and composition:
/// gradients of the source and of `(s, r, t_x, t_y)`.
pub fn bilinear_backward_params(
    source: &Tensor,
    params: &AffineParams,
    upstream: &Tensor,
) -> Result<(Tensor, [f64; 4])> {
    let s = source.shape();
    let (w, h) = (s[s.len() - 2], s[s.len() - 1]);
    let grid = make_grid(&compose(params)?, w, h)?;
    let (gs, gg) = bilinear_backward(source, &grid, upstream)?;
    let gm = make_grid_backward(gg.coords(), w, h);
    Ok((gs, compose_backward(params, &gm)))
}

// ---- tape operations ----------------------------------------------------

/// Record [`compose`] of a `[4]` parameter node `(s, r, t_x, t_y)`;
/// the result is a `[2, 3]` node.
pub fn compose_var(tape: &mut Tape, params: Var) -> Result<Var> {
    let p = tape.value(params);
    if p.shape() != [4] {
        return Err(Error::contract(format!(
            "affine parameters must have shape [4], got {:?}",
            p.shape()
        )));
    }
    let m = compose(&AffineParams::from_slice(p.data()))?;
    let out = Tensor::from_parts(&[2, 3], m.0.to_vec())?;
    Ok(tape.record(&[params], out, Box::new(ComposeOp)))
}

/// Record [`make_grid`] of a `[2, 3]` matrix node; the result is `[W, H, 2]`.
pub fn make_grid_var(tape: &mut Tape, matrix: Var, width: usize, height: usize) -> Result<Var> {
    let m = tape.value(matrix);
    if m.shape() != [2, 3] {
        return Err(Error::contract(format!(
            "affine matrix must have shape [2, 3], got {:?}",
            m.shape()
        )));
    }
    let mut theta = [0.0; 6];
    theta.copy_from_slice(m.data());
    let grid = make_grid(&AffineMatrix(theta), width, height)?;
    Ok(tape.record(
        &[matrix],
        grid.to_tensor(),
        Box::new(MakeGridOp { width, height }),
    ))
}

/// Record [`bilinear_sample`] of a `[.., W, H]` source node at a `[W, H, 2]` grid node.
pub fn bilinear_sample_var(tape: &mut Tape, source: Var, grid: Var) -> Result<Var> {
    let g = tensor_to_grid(tape.value(grid))?;
    let out = bilinear_sample(tape.value(source), &g)?;
    Ok(tape.record(&[source, grid], out, Box::new(SampleOp)))
}

fn tensor_to_grid(t: &Tensor) -> Result<SamplingGrid> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::contract(format!("grid must be [W, H, 2], got {s:?}")));
    }
    SamplingGrid::from_coords(s[0], s[1], t.data().to_vec())
}

struct ComposeOp;
impl BackwardOp for ComposeOp {
    fn name(&self) -> &'static str {
        "compose"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let p = AffineParams::from_slice(ctx.inputs[0].data());
        let mut g = [0.0; 6];
        g.copy_from_slice(ctx.grad_output);
        vec![Some(compose_backward(&p, &g).to_vec())]
    }
}

struct MakeGridOp {
    width: usize,
    height: usize,
}
impl BackwardOp for MakeGridOp {
    fn name(&self) -> &'static str {
        "make_grid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            make_grid_backward(ctx.grad_output, self.width, self.height).to_vec(),
        )]
    }
}

struct SampleOp;
impl BackwardOp for SampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let grid = tensor_to_grid(ctx.inputs[1]).expect("validated when recorded");
        let (gs, gg) = sample_planes_backward(ctx.inputs[0].data(), &grid, ctx.grad_output)
            .expect("validated when recorded");
        vec![ctx.needs[0].then_some(gs), ctx.needs[1].then_some(gg)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn assert_matrix(m: &AffineMatrix, want: [f64; 6], tol: f64) {
        for (a, b) in m.0.iter().zip(want) {
            assert!((a - b).abs() <= tol, "{:?} vs {:?}", m.0, want);
        }
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose(&AffineParams::IDENTITY).unwrap(), AffineMatrix::IDENTITY);
        let rot = compose(&AffineParams::new(1.0, FRAC_PI_2, 0.0, 0.0).unwrap()).unwrap();
        assert_matrix(&rot, [0.0, -1.0, 0.0, 1.0, 0.0, 0.0], 1e-15);
        // θ13 = t_x s cos r - t_y s sin r = 0.25 * 2
        let zoom = compose(&AffineParams::new(2.0, 0.0, 0.25, 0.0).unwrap()).unwrap();
        assert_eq!(zoom.0, [2.0, 0.0, 0.5, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn non_positive_scale_is_a_domain_error() {
        assert!(matches!(
            AffineParams::new(0.0, 0.0, 0.0, 0.0),
            Err(Error::Domain(_))
        ));
        let bad = AffineParams {
            s: -1.0,
            ..AffineParams::IDENTITY
        };
        assert!(matches!(compose(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn identity_grid_is_the_lattice() {
        for (w, h) in [(1, 1), (3, 5), (7, 7), (28, 28)] {
            let g = make_grid(&AffineMatrix::IDENTITY, w, h).unwrap();
            assert_eq!(g.shape(), [w, h, 2]);
            for x in 0..w {
                for y in 0..h {
                    assert_eq!(g.get(x, y), (lattice_coord(x, w), lattice_coord(y, h)));
                }
            }
        }
    }

    #[test]
    fn translated_grid_offsets_x_only() {
        let m = AffineMatrix([1.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        let g = make_grid(&m, 4, 4).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                let (gx, gy) = g.get(x, y);
                assert_eq!(gx, lattice_coord(x, 4) + 0.5);
                assert_eq!(gy, lattice_coord(y, 4));
            }
        }
    }

    #[test]
    fn scale_two_doubles_around_the_centre() {
        let m = AffineMatrix([2.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let g = make_grid(&m, 3, 3).unwrap();
        // lattice is {-1/3, 0, 1/3}
        for x in 0..3 {
            for y in 0..3 {
                let (gx, gy) = g.get(x, y);
                assert_eq!(gx, 2.0 * lattice_coord(x, 3));
                assert_eq!(gy, 2.0 * lattice_coord(y, 3));
            }
        }
        assert_eq!(g.get(1, 1), (0.0, 0.0));
    }

    #[test]
    fn identity_sampling_copies_the_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for extent in 1..=40 {
            let src = Tensor::from_fn(&[extent, extent + 1], |_| rng.gen_range(-1.0..1.0));
            let g = base_lattice(extent, extent + 1).unwrap();
            let out = bilinear_sample(&src, &g).unwrap();
            assert!(out.bitwise_eq(&src), "extent {extent}");
        }
    }

    #[test]
    fn centre_of_two_by_two_averages() {
        let src = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = SamplingGrid::from_coords(2, 2, vec![0.0; 8]).unwrap();
        let out = bilinear_sample(&src, &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn far_translation_gives_zeros() {
        let src = Tensor::full(&[5, 4], 1.0);
        let m = compose(&AffineParams::new(1.0, 0.0, 10.0, 0.0).unwrap()).unwrap();
        let out = bilinear_sample(&src, &make_grid(&m, 5, 4).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_pixel_shift_is_exact() {
        let src = Tensor::from_fn(&[6, 6], |i| i as f64);
        let m = compose(&AffineParams::new(1.0, 0.0, 1.0 / 6.0, 0.0).unwrap()).unwrap();
        let out = bilinear_sample(&src, &make_grid(&m, 6, 6).unwrap()).unwrap();
        for x in 0..6 {
            for y in 0..6 {
                let want = if x + 1 < 6 { src.get(&[x + 1, y]) } else { 0.0 };
                assert_eq!(out.get(&[x, y]), want);
            }
        }
    }

    #[test]
    fn ones_upstream_on_identity_passes_through() {
        let src = Tensor::from_fn(&[4, 3], |i| (i as f64).sin());
        let (gs, _) =
            bilinear_backward_params(&src, &AffineParams::IDENTITY, &Tensor::full(&[4, 3], 1.0)).unwrap();
        assert!(gs.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn constant_field_has_no_translation_gradient() {
        let src = Tensor::full(&[5, 5], 0.7);
        let p = AffineParams::new(1.0, 0.0, 0.013, -0.021).unwrap();
        // interior-only upstream so the zero border does not enter
        let mut up = Tensor::zeros(&[5, 5]);
        for x in 1..4 {
            for y in 1..4 {
                up.data_mut()[x * 5 + y] = 1.0;
            }
        }
        let (_, gp) = bilinear_backward_params(&src, &p, &up).unwrap();
        assert!(gp[2].abs() < 1e-14 && gp[3].abs() < 1e-14, "{gp:?}");
    }

    #[test]
    fn parameter_gradients_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let src = Tensor::from_fn(&[5, 5], |_| rng.gen_range(-1.0..1.0));
            let weights = Tensor::from_fn(&[5, 5], |_| rng.gen_range(-1.0..1.0));
            let p = Tensor::new(
                &[4],
                vec![
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                ],
            )
            .unwrap();
            let report = gradcheck(
                |tape, v| {
                    let m = compose_var(tape, v[0])?;
                    let g = make_grid_var(tape, m, 5, 5)?;
                    let out = bilinear_sample_var(tape, v[1], g)?;
                    let w = tape.constant(weights.clone());
                    let prod = tape.mul(out, w)?;
                    Ok(tape.sum(prod))
                },
                &[p, src],
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn lattice_aligned_gradient_matches_central_difference() {
        // identity parameters sit exactly on the kinks
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = Tensor::from_fn(&[2, 5, 4], |_| rng.gen_range(-1.0..1.0));
        let weights = Tensor::from_fn(&[2, 5, 4], |_| rng.gen_range(-1.0..1.0));
        let report = gradcheck(
            |tape, v| {
                let m = compose_var(tape, v[0])?;
                let g = make_grid_var(tape, m, 5, 4)?;
                let out = bilinear_sample_var(tape, v[1], g)?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(out, w)?;
                Ok(tape.sum(prod))
            },
            &[Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(), src],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn inverse_undoes_the_transform() {
        let p = AffineParams::new(1.3, 0.4, 0.1, -0.2).unwrap();
        let m = compose(&p).unwrap().then(&compose(&p.inverse()).unwrap());
        assert_matrix(&m, AffineMatrix::IDENTITY.0, 1e-15);
    }

    proptest! {
        #[test]
        fn compose_has_similarity_structure(
            s in 0.01f64..10.0, r in -10.0f64..10.0, tx in -2.0f64..2.0, ty in -2.0f64..2.0,
        ) {
            let m = compose(&AffineParams::new(s, r, tx, ty).unwrap()).unwrap().0;
            prop_assert!((m[0] - m[4]).abs() <= 1e-12);
            prop_assert!((m[1] + m[3]).abs() <= 1e-12);
        }

        #[test]
        fn sampling_is_linear_in_the_source(
            seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AffineParams::new(
                rng.gen_range(0.5..1.5), rng.gen_range(-3.0..3.0),
                rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5),
            ).unwrap();
            let grid = make_grid(&compose(&p).unwrap(), 6, 5).unwrap();
            let x = Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0));
            let y = Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0));
            let lhs = bilinear_sample(&x.axpby(a, &y, b).unwrap(), &grid).unwrap();
            let rhs = bilinear_sample(&x, &grid).unwrap()
                .axpby(a, &bilinear_sample(&y, &grid).unwrap(), b).unwrap();
            let scale = lhs.data().iter().chain(rhs.data()).fold(1e-300f64, |m, v| m.max(v.abs()));
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() / scale <= 1e-12);
        }

        #[test]
        fn repeated_identity_sampling_does_not_drift(
            seed in any::<u64>(), steps in 1usize..8, w in 1usize..9, h in 1usize..9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = Tensor::from_fn(&[w, h], |_| rng.gen_range(-1.0..1.0));
            let grid = make_grid(&compose(&AffineParams::IDENTITY).unwrap(), w, h).unwrap();
            let mut cur = src.clone();
            for _ in 0..steps {
                cur = bilinear_sample(&cur, &grid).unwrap();
            }
            prop_assert!(cur.max_abs_diff(&src).unwrap() <= 1e-12);
        }
    }
}
