//! Factorized 3D filters: a 2D base slice and one similarity transform per
//! temporal step.
//!
//! Slice 1 is the base; slice `t + 1` is slice `t` resampled through
//! `thetas[t]` (one transform shared by all input channels of the filter).
//! Layers keep all of their filters in a [`FilterBank`]: bases as a
//! `[C_out, C_in, W, H]` tensor and transforms as `[C_out, D-1, 4]` rows of
//! `(s, r, t_x, t_y)`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affine::{self, AffineParams, SamplingGrid};
use crate::error::{Error, Result};
use crate::par;
use crate::tape::{BackwardCtx, BackwardOp, Tape, Var};
use crate::tensor::Tensor;

/// One factorized filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter3T {
    base: Tensor,
    thetas: Vec<AffineParams>,
}

/// A dense filter `[C_in, D, W, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter3D {
    pub weights: Tensor,
}

impl Filter3T {
    pub fn new(base: Tensor, thetas: Vec<AffineParams>) -> Result<Self> {
        if base.shape().len() != 3 {
            return Err(Error::contract(format!(
                "base slice must be [C_in, W, H], got {:?}",
                base.shape()
            )));
        }
        for p in &thetas {
            p.validate()?;
        }
        Ok(Self { base, thetas })
    }

    /// Base slice with identity transforms.
    pub fn identity(base: Tensor, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::contract("filter depth must be at least 1"));
        }
        Self::new(base, vec![AffineParams::IDENTITY; depth - 1])
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn thetas(&self) -> &[AffineParams] {
        &self.thetas
    }

    pub fn thetas_mut(&mut self) -> &mut [AffineParams] {
        &mut self.thetas
    }

    pub fn depth(&self) -> usize {
        self.thetas.len() + 1
    }

    /// `(C_in, W, H)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.base.shape();
        (s[0], s[1], s[2])
    }

    /// Number of trainable scalars: every base entry plus four per step.
    pub fn trainable_count(&self) -> usize {
        self.base.len() + 4 * self.thetas.len()
    }
}

/// `(3T count, dense 3D count)` for one filter:
/// `C_in W H + 4 (D - 1)` and `C_in W H D`.
pub fn param_count(c_in: usize, width: usize, height: usize, depth: usize) -> (usize, usize) {
    let spatial = c_in * width * height;
    (spatial + 4 * depth.saturating_sub(1), spatial * depth)
}

/// Run the recurrence on one filter; returns the `D` slices, each `C_in*W*H`.
fn slices(base: &[f64], w: usize, h: usize, thetas: &[AffineParams]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(thetas.len() + 1);
    out.push(base.to_vec());
    for p in thetas {
        let grid = affine::make_grid(&affine::compose(p)?, w, h)?;
        let next = affine::sample_planes(out.last().expect("non-empty"), &grid)?;
        out.push(next);
    }
    Ok(out)
}

pub fn materialize(f: &Filter3T) -> Result<Filter3D> {
    let (c_in, w, h) = f.extents();
    let d = f.depth();
    let sl = slices(f.base.data(), w, h, &f.thetas)?;
    let mut weights = vec![0.0; c_in * d * w * h];
    scatter(&sl, c_in, w * h, &mut weights);
    Ok(Filter3D {
        weights: Tensor::from_parts(&[c_in, d, w, h], weights)?,
    })
}

// slices[t][c] -> dst[c][t]
fn scatter(slices: &[Vec<f64>], c_in: usize, plane: usize, dst: &mut [f64]) {
    let d = slices.len();
    for (t, s) in slices.iter().enumerate() {
        for c in 0..c_in {
            let off = (c * d + t) * plane;
            dst[off..off + plane].copy_from_slice(&s[c * plane..(c + 1) * plane]);
        }
    }
}

/// One factorized filter per output channel, with the 2D filter as base and
/// identity transforms.
pub fn import_2d(bank: &Tensor, depth: usize) -> Result<Vec<Filter3T>> {
    FilterBank::import_2d(bank, depth).map(|b| b.filters())
}

/// All factorized filters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    /// `[C_out, C_in, W, H]`
    pub base: Tensor,
    /// `[C_out, D-1, 4]`, absent when `D == 1`.
    pub thetas: Option<Tensor>,
    pub depth: usize,
}

impl FilterBank {
    pub fn new(base: Tensor, thetas: Option<Tensor>, depth: usize) -> Result<Self> {
        let bank = Self { base, thetas, depth };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.base.shape();
        if s.len() != 4 {
            return Err(Error::contract(format!(
                "filter bank base must be [C_out, C_in, W, H], got {s:?}"
            )));
        }
        if self.depth == 0 {
            return Err(Error::contract("filter depth must be at least 1"));
        }
        match (&self.thetas, self.depth) {
            (None, 1) => Ok(()),
            (Some(t), d) if d > 1 && t.shape() == [s[0], d - 1, 4] => {
                for row in t.data().chunks_exact(4) {
                    AffineParams::from_slice(row).validate()?;
                }
                Ok(())
            }
            (t, d) => Err(Error::contract(format!(
                "transforms {:?} do not fit {} filters of depth {d}",
                t.as_ref().map(|t| t.shape().to_vec()),
                s[0]
            ))),
        }
    }

    /// Bank with identity transforms around a given base.
    pub fn identity(base: Tensor, depth: usize) -> Result<Self> {
        let c_out = base.shape().first().copied().unwrap_or(0);
        let thetas = (depth > 1)
            .then(|| Tensor::from_fn(&[c_out, depth - 1, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        Self::new(base, thetas, depth)
    }

    /// Base drawn uniformly from `±sqrt(1 / (C_in W H))`, identity transforms.
    pub fn random(
        c_out: usize,
        c_in: usize,
        width: usize,
        height: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (1.0 / (c_in * width * height) as f64).sqrt();
        let base = Tensor::from_fn(&[c_out, c_in, width, height], |_| rng.gen_range(-bound..bound));
        Self::identity(base, depth)
    }

    /// Wrap a `[C_out, C_in, W, H]` 2D filter bank.
    pub fn import_2d(bank: &Tensor, depth: usize) -> Result<Self> {
        if bank.shape().len() != 4 {
            return Err(Error::contract(format!(
                "2D filter bank must be [C_out, C_in, W, H], got {:?}",
                bank.shape()
            )));
        }
        Self::identity(bank.clone(), depth)
    }

    pub fn from_filters(filters: &[Filter3T]) -> Result<Self> {
        let first = filters
            .first()
            .ok_or_else(|| Error::contract("empty filter list"))?;
        let (c_in, w, h) = first.extents();
        let depth = first.depth();
        let mut base = Vec::with_capacity(filters.len() * c_in * w * h);
        let mut thetas = Vec::new();
        for f in filters {
            if f.extents() != (c_in, w, h) || f.depth() != depth {
                return Err(Error::contract("filters of one bank must share geometry"));
            }
            base.extend_from_slice(f.base.data());
            thetas.extend(f.thetas.iter().flat_map(|p| p.to_array()));
        }
        let base = Tensor::from_parts(&[filters.len(), c_in, w, h], base)?;
        let thetas = (depth > 1)
            .then(|| Tensor::from_parts(&[filters.len(), depth - 1, 4], thetas))
            .transpose()?;
        Self::new(base, thetas, depth)
    }

    pub fn c_out(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.base.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.base.shape()[3]
    }

    pub fn theta(&self, filter: usize, step: usize) -> AffineParams {
        match &self.thetas {
            Some(t) => {
                let off = (filter * (self.depth - 1) + step) * 4;
                AffineParams::from_slice(&t.data()[off..off + 4])
            }
            None => panic!("depth-1 bank has no transforms"),
        }
    }

    pub fn filters(&self) -> Vec<Filter3T> {
        (0..self.c_out())
            .map(|o| Filter3T {
                base: Tensor::from_parts(
                    &[self.c_in(), self.width(), self.height()],
                    self.base.outer(o).to_vec(),
                )
                .expect("bank geometry"),
                thetas: (0..self.depth - 1).map(|t| self.theta(o, t)).collect(),
            })
            .collect()
    }

    /// Trainable scalars of the whole layer (bias excluded).
    pub fn trainable_count(&self) -> usize {
        self.base.len() + self.thetas.as_ref().map_or(0, Tensor::len)
    }

    /// Dense `[C_out, C_in, D, W, H]` weights.
    pub fn materialize(&self) -> Result<Tensor> {
        materialize_bank(&self.base, self.thetas.as_ref(), self.depth)
    }
}

/// Materialize every filter of a bank into `[C_out, C_in, D, W, H]`.
pub fn materialize_bank(base: &Tensor, thetas: Option<&Tensor>, depth: usize) -> Result<Tensor> {
    let s = base.shape();
    let (c_out, c_in, w, h) = (s[0], s[1], s[2], s[3]);
    let per_filter = c_in * depth * w * h;
    let params = bank_params(thetas, c_out, depth)?;
    let mut out = vec![0.0; c_out * per_filter];
    let results = par::map_range(c_out, |o| slices(base.outer(o), w, h, &params[o]));
    for (o, sl) in results.into_iter().enumerate() {
        scatter(&sl?, c_in, w * h, &mut out[o * per_filter..(o + 1) * per_filter]);
    }
    Tensor::from_parts(&[c_out, c_in, depth, w, h], out)
}

fn bank_params(thetas: Option<&Tensor>, c_out: usize, depth: usize) -> Result<Vec<Vec<AffineParams>>> {
    match thetas {
        None if depth == 1 => Ok(vec![Vec::new(); c_out]),
        Some(t) if depth > 1 && t.shape() == [c_out, depth - 1, 4] => Ok(t
            .data()
            .chunks_exact(4 * (depth - 1))
            .map(|f| f.chunks_exact(4).map(AffineParams::from_slice).collect())
            .collect()),
        _ => Err(Error::contract(format!(
            "transforms do not fit {c_out} filters of depth {depth}"
        ))),
    }
}

/// Adjoint of [`materialize_bank`]: gradients of the bases and transforms.
pub fn materialize_bank_backward(
    base: &Tensor,
    thetas: Option<&Tensor>,
    depth: usize,
    grad_filter: &[f64],
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let s = base.shape();
    let (c_out, c_in, w, h) = (s[0], s[1], s[2], s[3]);
    let plane = w * h;
    let slice_len = c_in * plane;
    let per_filter = slice_len * depth;
    let params = bank_params(thetas, c_out, depth)?;

    let results = par::map_range(c_out, |o| -> Result<(Vec<f64>, Vec<f64>)> {
        let p = &params[o];
        let grids: Vec<SamplingGrid> = p
            .iter()
            .map(|q| affine::make_grid(&affine::compose(q)?, w, h))
            .collect::<Result<_>>()?;
        // forward again to get every slice
        let mut sl = vec![base.outer(o).to_vec()];
        for g in &grids {
            let next = affine::sample_planes(sl.last().expect("non-empty"), g)?;
            sl.push(next);
        }
        let gf = &grad_filter[o * per_filter..(o + 1) * per_filter];
        let slice_grad = |t: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(slice_len);
            for c in 0..c_in {
                let off = (c * depth + t) * plane;
                v.extend_from_slice(&gf[off..off + plane]);
            }
            v
        };
        let mut carry = slice_grad(depth - 1);
        let mut g_theta = vec![0.0; 4 * (depth - 1)];
        for t in (0..depth - 1).rev() {
            let (g_src, g_grid) = affine::sample_planes_backward(&sl[t], &grids[t], &carry)?;
            let gm = affine::make_grid_backward(&g_grid, w, h);
            g_theta[4 * t..4 * t + 4].copy_from_slice(&affine::compose_backward(&p[t], &gm));
            carry = slice_grad(t);
            carry.iter_mut().zip(&g_src).for_each(|(a, b)| *a += b);
        }
        Ok((carry, g_theta))
    });

    let mut g_base = Vec::with_capacity(base.len());
    let mut g_thetas = Vec::with_capacity(c_out * 4 * (depth - 1));
    for r in results {
        let (gb, gt) = r?;
        g_base.extend(gb);
        g_thetas.extend(gt);
    }
    Ok((g_base, (depth > 1).then_some(g_thetas)))
}

/// Record bank materialization on the tape. `thetas` must be given exactly
/// when `depth > 1`.
pub fn materialize_var(tape: &mut Tape, base: Var, thetas: Option<Var>, depth: usize) -> Result<Var> {
    if base_rank(tape.value(base)) != 4 {
        return Err(Error::contract(format!(
            "filter bank base must be [C_out, C_in, W, H], got {:?}",
            tape.value(base).shape()
        )));
    }
    let out = materialize_bank(tape.value(base), thetas.map(|t| tape.value(t)), depth)?;
    let inputs: Vec<Var> = std::iter::once(base).chain(thetas).collect();
    Ok(tape.record(&inputs, out, Box::new(MaterializeOp { depth })))
}

fn base_rank(t: &Tensor) -> usize {
    t.shape().len()
}

struct MaterializeOp {
    depth: usize,
}

impl BackwardOp for MaterializeOp {
    fn name(&self) -> &'static str {
        "materialize"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let thetas = ctx.inputs.get(1).copied();
        let (gb, gt) = materialize_bank_backward(ctx.inputs[0], thetas, self.depth, ctx.grad_output)
            .expect("validated when recorded");
        let mut out = vec![ctx.needs[0].then_some(gb)];
        if thetas.is_some() {
            out.push(if ctx.needs[1] { gt } else { None });
        }
        out
    }
}

/// Manifest entry of one layer in a filter-bank directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankLayerInfo {
    pub name: String,
    #[serde(rename = "C_out")]
    pub c_out: usize,
    #[serde(rename = "C_in")]
    pub c_in: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "D")]
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankManifest {
    pub layers: Vec<BankLayerInfo>,
}

pub const BANK_MANIFEST: &str = "filters.json";
pub const THETAS_CSV: &str = "thetas.csv";

/// One row of the transform CSV. `step` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub layer: String,
    pub filter: usize,
    pub step: usize,
    pub s: f64,
    /// Radians.
    pub r: f64,
    pub tx: f64,
    pub ty: f64,
}

impl ThetaRecord {
    pub fn params(&self) -> AffineParams {
        AffineParams {
            s: self.s,
            r: self.r,
            tx: self.tx,
            ty: self.ty,
        }
    }
}

/// Every transform of a bank, in filter, step order.
pub fn theta_records(name: &str, bank: &FilterBank) -> Vec<ThetaRecord> {
    let mut out = Vec::with_capacity(bank.c_out() * (bank.depth - 1));
    for filter in 0..bank.c_out() {
        for t in 0..bank.depth - 1 {
            let p = bank.theta(filter, t);
            out.push(ThetaRecord {
                layer: name.to_string(),
                filter,
                step: t + 1,
                s: p.s,
                r: p.r,
                tx: p.tx,
                ty: p.ty,
            });
        }
    }
    out
}

/// Write named banks into `dir`: the manifest, `<name>.tsr` per base bank and
/// one transform CSV.
pub fn write_banks(dir: &Path, banks: &[(String, FilterBank)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(THETAS_CSV);
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    let mut layers = Vec::with_capacity(banks.len());
    for (name, bank) in banks {
        layers.push(BankLayerInfo {
            name: name.clone(),
            c_out: bank.c_out(),
            c_in: bank.c_in(),
            width: bank.width(),
            height: bank.height(),
            depth: bank.depth,
        });
        bank.base.write_tsr(dir.join(format!("{name}.tsr")))?;
        for row in theta_records(name, bank) {
            csv.serialize(row).map_err(|e| Error::csv(&csv_path, e))?;
        }
    }
    if banks.iter().all(|(_, b)| b.depth == 1) {
        csv.write_record(["layer", "filter", "step", "s", "r", "tx", "ty"])
            .map_err(|e| Error::csv(&csv_path, e))?;
    }
    csv.flush()?;
    fs::write(
        dir.join(BANK_MANIFEST),
        serde_json::to_string_pretty(&BankManifest { layers })?,
    )?;
    Ok(())
}

/// Read banks written by [`write_banks`], in manifest order.
pub fn read_banks(dir: &Path) -> Result<Vec<(String, FilterBank)>> {
    let manifest_path = dir.join(BANK_MANIFEST);
    let manifest: BankManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let csv_path = dir.join(THETAS_CSV);
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(&csv_path, e))?;
    if header != vec!["layer", "filter", "step", "s", "r", "tx", "ty"] {
        return Err(Error::format(
            &csv_path,
            "header must be layer,filter,step,s,r,tx,ty",
        ));
    }
    let mut rows: HashMap<(String, usize, usize), AffineParams> = HashMap::new();
    for (i, row) in reader.deserialize::<ThetaRecord>().enumerate() {
        let bad = |m: &str| Error::format(&csv_path, format!("line {}: {m}", i + 2));
        let row = row.map_err(|e| bad(&e.to_string()))?;
        let p = row.params();
        p.validate().map_err(|e| bad(&e.to_string()))?;
        if rows.insert((row.layer, row.filter, row.step), p).is_some() {
            return Err(bad("duplicate (layer, filter, step)"));
        }
    }

    let mut out = Vec::with_capacity(manifest.layers.len());
    for info in &manifest.layers {
        let base = Tensor::read_tsr(dir.join(format!("{}.tsr", info.name)))?;
        let want = [info.c_out, info.c_in, info.width, info.height];
        if base.shape() != want {
            return Err(Error::contract(format!(
                "layer {}: base bank {:?} does not match declared {want:?}",
                info.name,
                base.shape()
            )));
        }
        let thetas = if info.depth > 1 {
            let mut data = Vec::with_capacity(info.c_out * (info.depth - 1) * 4);
            for o in 0..info.c_out {
                for t in 1..info.depth {
                    let p = rows.remove(&(info.name.clone(), o, t)).ok_or_else(|| {
                        Error::format(
                            &csv_path,
                            format!("missing transform {} filter {o} step {t}", info.name),
                        )
                    })?;
                    data.extend(p.to_array());
                }
            }
            Some(Tensor::new(&[info.c_out, info.depth - 1, 4], data)?)
        } else {
            None
        };
        out.push((info.name.clone(), FilterBank::new(base, thetas, info.depth)?));
    }
    if let Some((layer, filter, step)) = rows.keys().next() {
        return Err(Error::format(
            &csv_path,
            format!("transform {layer} filter {filter} step {step} has no layer"),
        ));
    }
    Ok(out)
}
