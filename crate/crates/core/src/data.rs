//! Synthetic affine-motion video.
//!
//! A clip shows a compact random pattern on a black background. Frame 0
//! renders the pattern around a jittered start position; every later frame
//! is the previous one pulled back through that step's transform,
//! `frame[t + 1](x) = frame[t](A_t x)` with `A_t = compose(truth[t])`, the
//! same convention the factorized filters use between slices. Frames are
//! rendered analytically through the composed map rather than resampled, so
//! no interpolation blur accumulates.
//!
//! Motion kinds are named after the motion of the viewing window: under
//! `translate-right` the truth has `t_x > 0` and the pattern drifts toward
//! lower `x`; `zoom-in` has `s < 1` and the pattern grows.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::{self, lattice_coord, AffineMatrix, AffineParams};
use crate::error::{Error, Result};
use crate::network::{self, LayerSpec, Model, ModelSpec, TrainConfig};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Static,
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    ZoomIn,
    ZoomOut,
    RotateCw,
    RotateCcw,
}

impl MotionKind {
    pub const ALL: [MotionKind; 9] = [
        MotionKind::Static,
        MotionKind::TranslateLeft,
        MotionKind::TranslateRight,
        MotionKind::TranslateUp,
        MotionKind::TranslateDown,
        MotionKind::ZoomIn,
        MotionKind::ZoomOut,
        MotionKind::RotateCw,
        MotionKind::RotateCcw,
    ];

    pub const TRANSLATIONS: [MotionKind; 4] = [
        MotionKind::TranslateLeft,
        MotionKind::TranslateRight,
        MotionKind::TranslateUp,
        MotionKind::TranslateDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Static => "static",
            MotionKind::TranslateLeft => "translate-left",
            MotionKind::TranslateRight => "translate-right",
            MotionKind::TranslateUp => "translate-up",
            MotionKind::TranslateDown => "translate-down",
            MotionKind::ZoomIn => "zoom-in",
            MotionKind::ZoomOut => "zoom-out",
            MotionKind::RotateCw => "rotate-cw",
            MotionKind::RotateCcw => "rotate-ccw",
        }
    }

    /// Sign of the truth translation `(t_x, t_y)`; zero for other kinds.
    pub fn direction(self) -> (f64, f64) {
        match self {
            MotionKind::TranslateLeft => (-1.0, 0.0),
            MotionKind::TranslateRight => (1.0, 0.0),
            MotionKind::TranslateUp => (0.0, -1.0),
            MotionKind::TranslateDown => (0.0, 1.0),
            _ => (0.0, 0.0),
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-frame motion magnitudes and jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Magnitudes {
    /// Pixels per frame.
    pub translate_px: f64,
    /// Degrees per frame.
    pub rotate_deg: f64,
    /// Fractional scale change per frame.
    pub scale: f64,
    /// Per-step noise as a fraction of the magnitudes above.
    pub jitter: f64,
}

impl Default for Magnitudes {
    fn default() -> Self {
        Self {
            translate_px: 2.0,
            rotate_deg: 6.0,
            scale: 0.05,
            jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipShape {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for ClipShape {
    fn default() -> Self {
        Self {
            frames: 8,
            width: 28,
            height: 28,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub kind: MotionKind,
    pub magnitudes: Magnitudes,
    pub shape: ClipShape,
    pub seed: u64,
}

impl MotionSpec {
    pub fn new(kind: MotionKind, seed: u64) -> Self {
        Self {
            kind,
            magnitudes: Magnitudes::default(),
            shape: ClipShape::default(),
            seed,
        }
    }

    /// Rejects motions that would carry the pattern out of view or collapse it.
    pub fn validate(&self) -> Result<()> {
        let m = &self.magnitudes;
        let s = &self.shape;
        if s.frames < 2 || s.width < 8 || s.height < 8 {
            return Err(Error::Domain(format!(
                "clips need at least 2 frames of 8x8 pixels, got {s:?}"
            )));
        }
        let steps = (s.frames - 1) as f64;
        let finite = [m.translate_px, m.rotate_deg, m.scale, m.jitter]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || m.jitter > 1.0 {
            return Err(Error::Domain(format!(
                "magnitudes must be finite and non-negative with jitter <= 1, got {m:?}"
            )));
        }
        let travel = steps * m.translate_px * (1.0 + m.jitter);
        if travel / (s.width.min(s.height) as f64) > 0.6 {
            return Err(Error::Domain(format!(
                "translation of {} px/frame over {} frames leaves the {}x{} frame",
                m.translate_px, s.frames, s.width, s.height
            )));
        }
        let zoom = (1.0 + m.scale * (1.0 + m.jitter)).powf(steps);
        if m.scale >= 0.5 || zoom > 2.5 {
            return Err(Error::Domain(format!(
                "scale change of {} per frame over {} frames is out of range",
                m.scale, s.frames
            )));
        }
        Ok(())
    }

    /// The nominal per-step transform, before jitter.
    pub fn nominal(&self) -> AffineParams {
        let m = &self.magnitudes;
        let tx = m.translate_px / self.shape.width as f64;
        let ty = m.translate_px / self.shape.height as f64;
        let r = m.rotate_deg.to_radians();
        let p = |s, r, tx, ty| AffineParams { s, r, tx, ty };
        match self.kind {
            MotionKind::Static => AffineParams::IDENTITY,
            MotionKind::TranslateLeft => p(1.0, 0.0, -tx, 0.0),
            MotionKind::TranslateRight => p(1.0, 0.0, tx, 0.0),
            MotionKind::TranslateUp => p(1.0, 0.0, 0.0, -ty),
            MotionKind::TranslateDown => p(1.0, 0.0, 0.0, ty),
            MotionKind::ZoomIn => p(1.0 / (1.0 + m.scale), 0.0, 0.0, 0.0),
            MotionKind::ZoomOut => p(1.0 + m.scale, 0.0, 0.0, 0.0),
            MotionKind::RotateCw => p(1.0, -r, 0.0, 0.0),
            MotionKind::RotateCcw => p(1.0, r, 0.0, 0.0),
        }
    }
}

/// Appearance of a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    /// Mixed blobs and bars at random orientations.
    Mixed,
    Blobs,
    HorizontalBars,
    VerticalBars,
    DiagonalBars,
    AntiDiagonalBars,
    Checker,
}

impl Texture {
    pub const CLASSES: [Texture; 6] = [
        Texture::Blobs,
        Texture::HorizontalBars,
        Texture::VerticalBars,
        Texture::DiagonalBars,
        Texture::AntiDiagonalBars,
        Texture::Checker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Mixed => "mixed",
            Texture::Blobs => "blobs",
            Texture::HorizontalBars => "horizontal-bars",
            Texture::VerticalBars => "vertical-bars",
            Texture::DiagonalBars => "diagonal-bars",
            Texture::AntiDiagonalBars => "anti-diagonal-bars",
            Texture::Checker => "checker",
        }
    }
}

/// Pattern radius in normalized units; every component lies inside it.
const PATTERN_RADIUS: f64 = 0.25;
/// Start positions are drawn uniformly from this box around the centre.
const START_BOX: f64 = 0.07;

/// Smooth bump of compact support: `(1 - q)^2` for `q < 1`.
#[derive(Debug, Clone, Copy)]
struct Bump {
    cx: f64,
    cy: f64,
    /// Unit major axis.
    ux: f64,
    uy: f64,
    major: f64,
    minor: f64,
    amp: f64,
}

impl Bump {
    fn at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let a = (dx * self.ux + dy * self.uy) / self.major;
        let b = (-dx * self.uy + dy * self.ux) / self.minor;
        let q = a * a + b * b;
        if q < 1.0 {
            self.amp * (1.0 - q) * (1.0 - q)
        } else {
            0.0
        }
    }
}

/// A continuous pattern in pattern-local normalized coordinates.
#[derive(Debug, Clone)]
struct Pattern {
    bumps: Vec<Bump>,
    checker: Option<f64>,
}

impl Pattern {
    fn random(texture: Texture, rng: &mut impl Rng) -> Self {
        let bar = |rng: &mut dyn rand::RngCore, angle: f64| {
            let a = angle + rng.gen_range(-10f64..10.0).to_radians();
            let major = rng.gen_range(0.07..0.1);
            let (cx, cy) = disc(rng, PATTERN_RADIUS - major);
            Bump {
                cx,
                cy,
                ux: a.cos(),
                uy: a.sin(),
                major,
                minor: rng.gen_range(0.025..0.035),
                amp: rng.gen_range(0.8..1.0),
            }
        };
        let blob = |rng: &mut dyn rand::RngCore| {
            let r = rng.gen_range(0.04..0.07);
            let (cx, cy) = disc(rng, PATTERN_RADIUS - r);
            Bump {
                cx,
                cy,
                ux: 1.0,
                uy: 0.0,
                major: r,
                minor: r,
                amp: rng.gen_range(0.8..1.0),
            }
        };
        let count = rng.gen_range(3..=5);
        let mut bumps = Vec::with_capacity(count);
        let mut checker = None;
        for _ in 0..count {
            let b = match texture {
                Texture::Mixed => {
                    if rng.gen_bool(0.5) {
                        blob(rng)
                    } else {
                        let a = rng.gen_range(0.0..PI);
                        bar(rng, a)
                    }
                }
                Texture::Blobs => blob(rng),
                Texture::HorizontalBars => bar(rng, 0.0),
                Texture::VerticalBars => bar(rng, PI / 2.0),
                Texture::DiagonalBars => bar(rng, PI / 4.0),
                Texture::AntiDiagonalBars => bar(rng, -PI / 4.0),
                Texture::Checker => {
                    checker = Some(rng.gen_range(0.06..0.08));
                    break;
                }
            };
            bumps.push(b);
        }
        if let Some(cell) = checker {
            // a round envelope filled with squares of alternating intensity
            bumps.push(Bump {
                cx: 0.0,
                cy: 0.0,
                ux: 1.0,
                uy: 0.0,
                major: PATTERN_RADIUS,
                minor: PATTERN_RADIUS,
                amp: 1.0,
            });
            return Self {
                bumps,
                checker: Some(cell),
            };
        }
        Self { bumps, checker }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let v: f64 = self.bumps.iter().map(|b| b.at(x, y)).sum();
        let v = match self.checker {
            Some(cell) => {
                let parity = ((x / cell).floor() + (y / cell).floor()).rem_euclid(2.0);
                v * if parity < 1.0 { 1.0 } else { 0.25 }
            }
            None => v,
        };
        v.clamp(0.0, 1.0)
    }
}

fn disc(rng: &mut (impl Rng + ?Sized), radius: f64) -> (f64, f64) {
    loop {
        let (x, y) = (rng.gen_range(-radius..radius), rng.gen_range(-radius..radius));
        if x * x + y * y <= radius * radius {
            return (x, y);
        }
    }
}

/// One labelled clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `[1, T, W, H]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    /// Transform of every step, jitter included.
    pub truth: Vec<AffineParams>,
    pub kind: MotionKind,
    pub texture: Texture,
}

impl Clip {
    /// Frame `t` as a `[1, W, H]` tensor.
    pub fn frame(&self, t: usize) -> Tensor {
        let s = self.frames.shape();
        let plane = s[2] * s[3];
        Tensor::from_parts(
            &[1, s[2], s[3]],
            self.frames.data()[t * plane..(t + 1) * plane].to_vec(),
        )
        .expect("frame shape")
    }
}

fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn jittered(spec: &MotionSpec, rng: &mut impl Rng) -> AffineParams {
    let n = spec.nominal();
    let m = &spec.magnitudes;
    if spec.kind == MotionKind::Static || m.jitter == 0.0 {
        return n;
    }
    let j = m.jitter;
    let mut u = || rng.gen_range(-1.0..1.0);
    AffineParams {
        s: n.s * (1.0 + j * m.scale * u()),
        r: n.r + j * m.rotate_deg.to_radians() * u(),
        tx: n.tx + j * m.translate_px / spec.shape.width as f64 * u(),
        ty: n.ty + j * m.translate_px / spec.shape.height as f64 * u(),
    }
}

fn render(pattern: &Pattern, map: &AffineMatrix, shape: &ClipShape, dst: &mut [f64]) {
    let h = shape.height;
    for i in 0..shape.width {
        let x = lattice_coord(i, shape.width);
        for j in 0..h {
            let (u, v) = map.apply(x, lattice_coord(j, h));
            dst[i * h + j] = pattern.at(u, v);
        }
    }
}

fn scene(texture: Texture, rng: &mut impl Rng) -> (Pattern, AffineMatrix) {
    let pattern = Pattern::random(texture, rng);
    let start = (
        rng.gen_range(-START_BOX..START_BOX),
        rng.gen_range(-START_BOX..START_BOX),
    );
    (pattern, AffineMatrix([1.0, 0.0, -start.0, 0.0, 1.0, -start.1]))
}

fn render_clip(spec: &MotionSpec, texture: Texture, label: usize, rng: &mut impl Rng) -> Result<Clip> {
    let shape = spec.shape;
    let (pattern, mut map) = scene(texture, rng);
    let truth: Vec<AffineParams> = (1..shape.frames).map(|_| jittered(spec, rng)).collect();
    let plane = shape.width * shape.height;
    let mut data = vec![0.0; shape.frames * plane];
    render(&pattern, &map, &shape, &mut data[..plane]);
    for (t, p) in truth.iter().enumerate() {
        map = map.then(&affine::compose(p)?);
        render(
            &pattern,
            &map,
            &shape,
            &mut data[(t + 1) * plane..(t + 2) * plane],
        );
    }
    Ok(Clip {
        frames: Tensor::from_parts(&[1, shape.frames, shape.width, shape.height], data)?,
        label,
        truth,
        kind: spec.kind,
        texture,
    })
}

/// `n` clips of one motion, all labelled `label`, with mixed textures.
/// Clip `i` draws from its own stream of `spec.seed`.
pub fn generate(spec: &MotionSpec, n: usize, label: usize) -> Result<Vec<Clip>> {
    spec.validate()?;
    par::map_range(n, |i| {
        render_clip(spec, Texture::Mixed, label, &mut clip_rng(spec.seed, i as u64))
    })
    .into_iter()
    .collect()
}

/// Named class sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSet {
    /// Four translations plus zoom-in and zoom-out, mixed textures.
    Motion6,
    /// Every motion kind, mixed textures.
    Motion9,
    /// Six textures, each clip with a random motion kind.
    Appearance6,
}

impl ClassSet {
    pub fn motion_kinds(self) -> Vec<MotionKind> {
        match self {
            ClassSet::Motion6 => vec![
                MotionKind::TranslateLeft,
                MotionKind::TranslateRight,
                MotionKind::TranslateUp,
                MotionKind::TranslateDown,
                MotionKind::ZoomIn,
                MotionKind::ZoomOut,
            ],
            ClassSet::Motion9 | ClassSet::Appearance6 => MotionKind::ALL.to_vec(),
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            ClassSet::Appearance6 => Texture::CLASSES.iter().map(|t| t.name().to_string()).collect(),
            _ => self.motion_kinds().iter().map(|k| k.name().to_string()).collect(),
        }
    }
}

impl std::str::FromStr for ClassSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion6" => Ok(ClassSet::Motion6),
            "motion9" => Ok(ClassSet::Motion9),
            "appearance6" => Ok(ClassSet::Appearance6),
            other => Err(Error::contract(format!(
                "unknown class set {other:?}, expected motion6, motion9 or appearance6"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: ClassSet,
    pub n: usize,
    pub seed: u64,
    pub shape: ClipShape,
    pub magnitudes: Magnitudes,
}

impl DatasetConfig {
    pub fn new(classes: ClassSet, n: usize, seed: u64) -> Self {
        Self {
            classes,
            n,
            seed,
            shape: ClipShape::default(),
            magnitudes: Magnitudes::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub class_names: Vec<String>,
    pub clips: Vec<Clip>,
}

/// Build a dataset. Clip `i` has label `i mod K`, so class counts differ by
/// at most one. Motion sets draw the pattern at random; the appearance set
/// fixes the texture by label and draws the motion kind at random.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::contract("a dataset needs at least one clip"));
    }
    let names = cfg.classes.class_names();
    let kinds = cfg.classes.motion_kinds();
    let k = names.len();
    let spec = |kind| MotionSpec {
        kind,
        magnitudes: cfg.magnitudes,
        shape: cfg.shape,
        seed: cfg.seed,
    };
    spec(MotionKind::TranslateRight).validate()?;
    let clips = par::map_range(cfg.n, |i| {
        let label = i % k;
        let mut rng = clip_rng(cfg.seed, i as u64);
        match cfg.classes {
            ClassSet::Appearance6 => {
                let kind = kinds[rng.gen_range(0..kinds.len())];
                render_clip(&spec(kind), Texture::CLASSES[label], label, &mut rng)
            }
            _ => render_clip(&spec(kinds[label]), Texture::Mixed, label, &mut rng),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: *cfg,
        class_names: names,
        clips,
    })
}

/// Appearance dataset with default shape and magnitudes.
pub fn make_appearance_dataset(n: usize, seed: u64) -> Result<Dataset> {
    make_dataset(&DatasetConfig::new(ClassSet::Appearance6, n, seed))
}

impl Dataset {
    pub fn inputs(&self) -> Vec<&Tensor> {
        self.clips.iter().map(|c| &c.frames).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for c in &self.clips {
            counts[c.label] += 1;
        }
        counts
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.clips.len());
        for (i, clip) in self.clips.iter().enumerate() {
            let file = format!("clip_{i:05}.tsr");
            clip.frames.write_tsr(dir.join(&file))?;
            entries.push(ClipEntry {
                file,
                label: clip.label,
                kind: clip.kind,
                texture: clip.texture,
                stream: i as u64,
                truth: clip.truth.clone(),
            });
        }
        let manifest = DatasetManifest {
            config: self.config,
            classes: self.class_names.clone(),
            clips: entries,
        };
        fs::write(
            dir.join(DATASET_MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let s = manifest.config.shape;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for e in manifest.clips {
            let frames = Tensor::read_tsr(dir.join(&e.file))?;
            if frames.shape() != [1, s.frames, s.width, s.height] || e.label >= manifest.classes.len() {
                return Err(Error::format(
                    dir.join(&e.file),
                    format!(
                        "shape {:?} or label {} does not fit the manifest",
                        frames.shape(),
                        e.label
                    ),
                ));
            }
            clips.push(Clip {
                frames,
                label: e.label,
                truth: e.truth,
                kind: e.kind,
                texture: e.texture,
            });
        }
        Ok(Self {
            config: manifest.config,
            class_names: manifest.classes,
            clips,
        })
    }
}

pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub classes: Vec<String>,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub file: String,
    pub label: usize,
    pub kind: MotionKind,
    pub texture: Texture,
    /// Generator stream of this clip under the dataset seed.
    pub stream: u64,
    pub truth: Vec<AffineParams>,
}

/// Mean absolute difference between each frame and the previous frame
/// resampled through its truth transform.
pub fn warp_error(clip: &Clip) -> Result<f64> {
    let s = clip.frames.shape();
    let (w, h) = (s[2], s[3]);
    let mut total = 0.0;
    for (t, p) in clip.truth.iter().enumerate() {
        let grid = affine::make_grid(&affine::compose(p)?, w, h)?;
        let warped = affine::bilinear_sample(&clip.frame(t), &grid)?;
        total += mean_abs_diff(warped.data(), clip.frame(t + 1).data());
    }
    Ok(total / clip.truth.len() as f64)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Bilinear resampling error on the pattern of clip `index` from
/// [`generate`]: mean absolute difference between its first frame resampled
/// through a half-pixel diagonal shift and the pattern rendered exactly at
/// the shifted position.
pub fn interpolation_error(spec: &MotionSpec, index: usize) -> Result<f64> {
    spec.validate()?;
    let shape = spec.shape;
    let (pattern, start) = scene(Texture::Mixed, &mut clip_rng(spec.seed, index as u64));
    let shift = affine::compose(&AffineParams {
        s: 1.0,
        r: 0.0,
        tx: 0.5 / shape.width as f64,
        ty: 0.5 / shape.height as f64,
    })?;
    let plane = shape.width * shape.height;
    let (mut frame, mut exact) = (vec![0.0; plane], vec![0.0; plane]);
    render(&pattern, &start, &shape, &mut frame);
    render(&pattern, &start.then(&shift), &shape, &mut exact);
    let grid = affine::make_grid(&shift, shape.width, shape.height)?;
    let sampled = affine::sample_planes(&frame, &grid)?;
    Ok(mean_abs_diff(&sampled, &exact))
}

/// Accuracy of a small 2D classifier trained on frame 0 of `train` and
/// scored on frame 0 of `test`.
pub fn frame_probe(train: &Dataset, test: &Dataset, seed: u64, epochs: usize) -> Result<f64> {
    let k = train.class_names.len();
    let s = train.config.shape;
    let first = |d: &Dataset| -> Result<Vec<Tensor>> {
        d.clips
            .iter()
            .map(|c| c.frame(0).reshape(&[1, 1, s.width, s.height]))
            .collect()
    };
    let (xtr, xte) = (first(train)?, first(test)?);
    let spec = ModelSpec {
        input: [1, 1, s.width, s.height],
        layers: vec![
            LayerSpec::Conv3d {
                name: "conv1".into(),
                filters: 8,
                kernel: [1, 5, 5],
                stride: [1, 2, 2],
                padding: [0, 2, 2],
            },
            LayerSpec::Relu,
            LayerSpec::Conv3d {
                name: "conv2".into(),
                filters: 8,
                kernel: [1, 3, 3],
                stride: [1, 2, 2],
                padding: [0, 1, 1],
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                name: "head".into(),
                outputs: k,
            },
        ],
        classes: k,
        seed,
    };
    let mut model = Model::new(spec)?;
    let cfg = TrainConfig {
        lr: 0.3,
        momentum: 0.9,
        batch_size: 16,
        epochs,
        seed,
        ..Default::default()
    };
    network::train(
        &mut model,
        &xtr.iter().collect::<Vec<_>>(),
        &train.labels(),
        &cfg,
        |_, _, _| {},
    )?;
    network::accuracy(&model, &xte.iter().collect::<Vec<_>>(), &test.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(kind: MotionKind, seed: u64) -> MotionSpec {
        let mut s = MotionSpec::new(kind, seed);
        s.magnitudes.jitter = 0.0;
        s
    }

    #[test]
    fn static_clips_repeat_the_first_frame() {
        for clip in generate(&MotionSpec::new(MotionKind::Static, 1), 3, 0).unwrap() {
            let first = clip.frame(0);
            for t in 1..8 {
                assert!(clip.frame(t).bitwise_eq(&first));
            }
            assert!(clip.truth.iter().all(AffineParams::is_identity));
        }
    }

    #[test]
    fn rightward_window_motion_shifts_content_two_pixels() {
        let clips = generate(&still(MotionKind::TranslateRight, 2), 4, 0).unwrap();
        for clip in &clips {
            assert!(clip.truth.iter().all(|p| p.tx == 2.0 / 28.0 && p.ty == 0.0));
            for t in 0..7 {
                let (a, b) = (clip.frame(t), clip.frame(t + 1));
                let score = |d: isize| {
                    let mut acc = 0.0;
                    for x in 0..28isize {
                        let xs = x + d;
                        if !(0..28).contains(&xs) {
                            continue;
                        }
                        for y in 0..28 {
                            acc += a.get(&[0, x as usize, y]) * b.get(&[0, xs as usize, y]);
                        }
                    }
                    acc
                };
                let best = (-4..=4).max_by(|&p, &q| score(p).total_cmp(&score(q))).unwrap();
                assert_eq!(best, -2);
            }
        }
    }

    #[test]
    fn frames_stay_in_the_unit_range() {
        let d = make_dataset(&DatasetConfig::new(ClassSet::Motion9, 18, 3)).unwrap();
        for c in &d.clips {
            assert!(c.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(c.frames.data().iter().any(|&v| v > 0.5));
        }
    }

    #[test]
    fn same_seed_same_clips() {
        let spec = MotionSpec::new(MotionKind::RotateCw, 4);
        assert_eq!(generate(&spec, 3, 1).unwrap(), generate(&spec, 3, 1).unwrap());
        let cfg = DatasetConfig::new(ClassSet::Appearance6, 12, 5);
        assert_eq!(make_dataset(&cfg).unwrap(), make_dataset(&cfg).unwrap());
        let other = DatasetConfig { seed: 6, ..cfg };
        assert_ne!(make_dataset(&cfg).unwrap(), make_dataset(&other).unwrap());
    }

    #[test]
    fn out_of_range_magnitudes_are_domain_errors() {
        let mut spec = MotionSpec::new(MotionKind::TranslateLeft, 0);
        spec.magnitudes.translate_px = 4.0;
        assert!(matches!(generate(&spec, 1, 0), Err(Error::Domain(_))));
        let mut spec = MotionSpec::new(MotionKind::ZoomOut, 0);
        spec.magnitudes.scale = 0.3;
        assert!(matches!(generate(&spec, 1, 0), Err(Error::Domain(_))));
        let mut spec = MotionSpec::new(MotionKind::Static, 0);
        spec.magnitudes.jitter = f64::NAN;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn classes_are_balanced() {
        for n in [12, 100, 601] {
            let d = make_dataset(&DatasetConfig::new(ClassSet::Motion6, n, 7)).unwrap();
            let counts = d.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(
                hi - lo <= 1 && (*lo as f64 - n as f64 / 6.0).abs() <= 1.0,
                "{counts:?}"
            );
        }
        assert!(make_dataset(&DatasetConfig::new(ClassSet::Motion6, 0, 7)).is_err());
    }

    #[test]
    fn frames_follow_their_truth_transforms() {
        for kind in MotionKind::ALL {
            let spec = MotionSpec::new(kind, 8);
            for (i, clip) in generate(&spec, 4, 0).unwrap().iter().enumerate() {
                let warp = warp_error(clip).unwrap();
                let reference = interpolation_error(&spec, i).unwrap();
                assert!(warp <= 2.0 * reference, "{kind}: {warp} vs {reference}");
            }
        }
    }

    #[test]
    fn appearance_motion_is_independent_of_label() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let d = make_appearance_dataset(900, 9).unwrap();
        let kinds = MotionKind::ALL;
        let mut table = vec![[0.0f64; 6]; kinds.len()];
        for c in &d.clips {
            let k = kinds.iter().position(|&m| m == c.kind).unwrap();
            table[k][c.label] += 1.0;
            assert_eq!(c.texture, Texture::CLASSES[c.label]);
        }
        let n: f64 = table.iter().flatten().sum();
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..6).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut stat = 0.0;
        for (i, row) in table.iter().enumerate() {
            for (j, &obs) in row.iter().enumerate() {
                let e = rows[i] * cols[j] / n;
                stat += (obs - e).powi(2) / e;
            }
        }
        let dof = ((kinds.len() - 1) * 5) as f64;
        let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat}, p = {p}");
    }

    #[test]
    fn dataset_directory_round_trip() {
        let d = make_dataset(&DatasetConfig::new(ClassSet::Motion6, 7, 10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert!(dir.path().join("clip_00006.tsr").exists());
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }
}
