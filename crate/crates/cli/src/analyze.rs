//! The `analyze` subcommand.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::{Deserialize, Serialize};

use threetconv::analysis::probe::{self, ActMaxConfig};
use threetconv::analysis::report::{
    self, CurveRow, HistogramRow, JointRow, PixelRow, StatsRow, TrajectoryRow,
};
use threetconv::analysis::{self, to_display};
use threetconv::data::Dataset;
use threetconv::filter::ThetaRecord;
use threetconv::gradcheck::GradCheckConfig;
use threetconv::network::{load_checkpoint, LayerSpec, Model};

use crate::commands::{check_model, finish, required, start};
use crate::manifest::Recorder;
use crate::{AnalyzeFlags, Failure, Outcome};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub threads: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub compare: Vec<PathBuf>,
    pub data: Option<PathBuf>,
    pub trajectory: Vec<String>,
    pub saliency: Vec<String>,
    pub actmax: Vec<String>,
    pub clip: usize,
    pub actmax_steps: usize,
    pub actmax_lr: f64,
    pub actmax_decay: f64,
    pub recovery: bool,
    pub recovery_layer: Option<String>,
    pub top: usize,
    pub gradcheck: bool,
    pub seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        let am = ActMaxConfig::default();
        Self {
            threads: 0,
            out: "runs/analyze".into(),
            checkpoint: None,
            compare: Vec::new(),
            data: None,
            trajectory: Vec::new(),
            saliency: Vec::new(),
            actmax: Vec::new(),
            clip: 0,
            actmax_steps: am.steps,
            actmax_lr: am.lr,
            actmax_decay: am.decay,
            recovery: false,
            recovery_layer: None,
            top: 5,
            gradcheck: false,
            seed: 0,
        }
    }
}

/// A name for a checkpoint: its directory, or the parent when the directory
/// is the plain `checkpoint` written by `train`.
fn model_name(path: &Path) -> String {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    match name(path) {
        Some(n) if n == "checkpoint" => path.parent().and_then(name).unwrap_or(n),
        Some(n) => n,
        None => path.display().to_string(),
    }
}

/// Parse `layer:index`, checking that `layer` is a convolution with more
/// than `index` output channels.
fn target(model: &Model, spec: &str, factorized_only: bool) -> Result<(String, usize), Failure> {
    let usage = |msg: String| Failure::Usage(anyhow!(msg));
    let (layer, index) = spec
        .split_once(':')
        .ok_or_else(|| usage(format!("expected layer:index, got {spec:?}")))?;
    let index: usize = index
        .parse()
        .map_err(|_| usage(format!("bad index in {spec:?}")))?;
    let filters = match model.layer(layer).map(|(_, l)| &l.spec) {
        Some(LayerSpec::Conv3t { filters, .. }) => *filters,
        Some(LayerSpec::Conv3d { filters, .. }) if !factorized_only => *filters,
        Some(_) => {
            return Err(usage(format!(
                "layer {layer:?} has no {} filters",
                if factorized_only {
                    "factorized"
                } else {
                    "convolution"
                }
            )))
        }
        None => return Err(usage(format!("no layer named {layer:?}"))),
    };
    if index >= filters {
        return Err(usage(format!(
            "layer {layer:?} has {filters} channels, {index} is out of range"
        )));
    }
    Ok((layer.to_string(), index))
}

fn load_data(path: Option<&Path>, model: &Model, what: &str, rec: &mut Recorder) -> Result<Dataset, Failure> {
    let path = path.ok_or_else(|| Failure::Usage(anyhow!("{what} needs --data")))?;
    rec.input(path);
    let ds = Dataset::load(path)?;
    let s = ds.config.shape;
    if [1, s.frames, s.width, s.height] != model.spec.input {
        return Err(Failure::Usage(anyhow!(
            "dataset clips [1, {}, {}, {}] do not fit the model input {:?}",
            s.frames,
            s.width,
            s.height,
            model.spec.input
        )));
    }
    Ok(ds)
}

pub fn run(flags: &AnalyzeFlags) -> Outcome {
    let cfg: AnalyzeConfig = start("analyze", &flags.common, flags)?;
    let mut rec = Recorder::new("analyze", &cfg)?;
    rec.seed("probe", cfg.seed);
    let result = analyze(&cfg, &mut rec);
    finish(rec, &cfg.out, result)
}

fn analyze(cfg: &AnalyzeConfig, rec: &mut Recorder) -> Outcome {
    let ck = required(&cfg.checkpoint, "checkpoint")?;
    let out = &cfg.out;
    std::fs::create_dir_all(out)?;

    let mut models: Vec<(String, Model)> = Vec::new();
    for path in std::iter::once(ck).chain(cfg.compare.iter().map(PathBuf::as_path)) {
        rec.input(path);
        let mut name = model_name(path);
        if models.iter().any(|(n, _)| *n == name) {
            name = format!("{name}_{}", models.len());
        }
        models.push((name, load_checkpoint(path)?.0));
    }
    let (main_name, model) = (&models[0].0, &models[0].1);

    let records: Vec<Vec<ThetaRecord>> = models.iter().map(|(_, m)| analysis::records(m)).collect();
    if records[0].is_empty() {
        return Err(Failure::Usage(anyhow!(
            "{main_name} has no factorized layers to analyze"
        )));
    }
    report::write_csv(&out.join("records.csv"), &records[0])?;
    let banks = model.banks();
    let display: Vec<_> = records[0]
        .iter()
        .map(|r| {
            let bank = &banks
                .iter()
                .find(|(n, _)| *n == r.layer)
                .expect("record of a bank")
                .1;
            to_display(r, bank.width(), bank.height())
        })
        .collect();
    report::write_csv(&out.join("display.csv"), &display)?;

    let mut stats = Vec::new();
    for ((name, _), recs) in models.iter().zip(&records) {
        let table = analysis::stats(recs).map_err(|e| anyhow!("{name}: {e}"))?;
        stats.extend(report::stats_rows(name, &table));
    }
    report::write_csv(&out.join("stats.csv"), &stats)?;
    let stats: Vec<StatsRow> = report::read_csv(&out.join("stats.csv"))?;
    let text = report::stats_text(&stats);
    std::fs::write(out.join("stats.txt"), &text)?;
    print!("{text}");
    rec.note("stats", &stats);

    let slices: Vec<&[ThetaRecord]> = records.iter().map(Vec::as_slice).collect();
    let ranges = analysis::shared_ranges(&slices);
    let (mut hist, mut joint) = (Vec::new(), Vec::new());
    for ((name, _), recs) in models.iter().zip(&records) {
        let (h, j) = report::histogram_rows(name, &analysis::distributions(recs, &ranges)?);
        hist.extend(h);
        joint.extend(j);
    }
    report::write_csv(&out.join("histograms.csv"), &hist)?;
    report::write_csv(&out.join("joint.csv"), &joint)?;
    let hist: Vec<HistogramRow> = report::read_csv(&out.join("histograms.csv"))?;
    let joint: Vec<JointRow> = report::read_csv(&out.join("joint.csv"))?;
    std::fs::write(out.join("histograms.svg"), report::histogram_svg(&hist)?)?;
    std::fs::write(out.join("joint.svg"), report::joint_svg(&joint)?)?;

    if !cfg.trajectory.is_empty() {
        let mut rows = Vec::new();
        for spec in &cfg.trajectory {
            let (layer, filter) = target(model, spec, true)?;
            let thetas: Vec<_> = records[0]
                .iter()
                .filter(|r| r.layer == layer && r.filter == filter)
                .map(ThetaRecord::params)
                .collect();
            let poses = analysis::trajectory(&thetas).map_err(|e| anyhow!("{spec}: {e}"))?;
            rows.extend(report::trajectory_rows(&layer, filter, &poses));
        }
        let path = out.join("trajectories.csv");
        report::write_csv(&path, &rows)?;
        let rows: Vec<TrajectoryRow> = report::read_csv(&path)?;
        std::fs::write(
            out.join("trajectories.svg"),
            report::trajectory_svg(main_name, &rows)?,
        )?;
    }

    let needs_data = !cfg.saliency.is_empty() || cfg.recovery;
    let data = if needs_data {
        Some(load_data(
            cfg.data.as_deref(),
            model,
            "saliency and recovery",
            rec,
        )?)
    } else {
        None
    };

    if !cfg.saliency.is_empty() {
        let ds = data.as_ref().expect("loaded above");
        let clip = ds.clips.get(cfg.clip).ok_or_else(|| {
            Failure::Usage(anyhow!(
                "--clip {} but the dataset has {} clips",
                cfg.clip,
                ds.clips.len()
            ))
        })?;
        let [_, frames, w, h] = model.spec.input;
        #[derive(Serialize)]
        struct EnergyRow<'a> {
            target: &'a str,
            frame: usize,
            energy: f64,
            peak: bool,
        }
        let mut energy = Vec::new();
        for spec in &cfg.saliency {
            let (layer, channel) = target(model, spec, false)?;
            let s = probe::saliency(model, &clip.frames, &layer, channel)?;
            let mut pixels = Vec::new();
            for t in 0..frames {
                let grad = &s.gradient.data()[t * w * h..(t + 1) * w * h];
                pixels.extend(report::pixel_rows(&format!("frame {t}"), w, h, grad));
            }
            let stem = format!("saliency_{layer}_{channel}");
            let path = out.join(format!("{stem}.csv"));
            report::write_csv(&path, &pixels)?;
            let pixels: Vec<PixelRow> = report::read_csv(&path)?;
            std::fs::write(out.join(format!("{stem}.svg")), report::pixel_svg(spec, &pixels)?)?;
            for (frame, &e) in s.frame_energy.iter().enumerate() {
                energy.push(EnergyRow {
                    target: spec,
                    frame,
                    energy: e,
                    peak: frame == s.peak_frame,
                });
            }
            eprintln!(
                "saliency {spec}: activation {:.4}, peak frame {}",
                s.activation, s.peak_frame
            );
        }
        report::write_csv(&out.join("saliency_frames.csv"), &energy)?;
    }

    if !cfg.actmax.is_empty() {
        let am = ActMaxConfig {
            steps: cfg.actmax_steps,
            lr: cfg.actmax_lr,
            decay: cfg.actmax_decay,
            seed: cfg.seed,
            ..ActMaxConfig::default()
        };
        let [_, _, w, h] = model.spec.input;
        let mut curves = Vec::new();
        for spec in &cfg.actmax {
            let (layer, channel) = target(model, spec, false)?;
            let result = probe::activation_max(model, &layer, channel, &am)?;
            let stem = format!("actmax_{layer}_{channel}");
            let path = out.join(format!("{stem}.csv"));
            report::write_csv(
                &path,
                &report::pixel_rows(spec, w, h, &result.frame.data()[..w * h]),
            )?;
            let pixels: Vec<PixelRow> = report::read_csv(&path)?;
            std::fs::write(out.join(format!("{stem}.svg")), report::pixel_svg(spec, &pixels)?)?;
            curves.extend(result.trace.iter().enumerate().map(|(i, &a)| CurveRow {
                series: spec.clone(),
                x: i as f64,
                y: a,
            }));
            eprintln!(
                "actmax {spec}: {:.4} -> {:.4}",
                result.trace[0],
                result.trace[result.trace.len() - 1]
            );
        }
        let path = out.join("actmax_trace.csv");
        report::write_csv(&path, &curves)?;
        let curves: Vec<CurveRow> = report::read_csv(&path)?;
        std::fs::write(
            out.join("actmax_trace.svg"),
            report::curve_svg("activation", "step", &curves)?,
        )?;
    }

    if cfg.recovery {
        let ds = data.as_ref().expect("loaded above");
        let layer = match &cfg.recovery_layer {
            Some(l) => {
                target(model, &format!("{l}:0"), true)?;
                l.clone()
            }
            None => banks[0].0.clone(),
        };
        let rows = probe::motion_recovery(model, &layer, ds, cfg.top)?;
        if rows.is_empty() {
            return Err(Failure::Usage(anyhow!("the dataset has no translation classes")));
        }
        for r in &rows {
            eprintln!("recovery {}: agreement {:.2}", r.class, r.agreement);
        }
        rec.note(
            "recovery",
            rows.iter()
                .map(|r| (r.class.clone(), r.agreement))
                .collect::<std::collections::BTreeMap<_, _>>(),
        );
        report::write_csv(&out.join("recovery.csv"), &report::recovery_rows(&rows))?;
    }

    if cfg.gradcheck {
        let gc = GradCheckConfig {
            max_elements: Some(8),
            refine: 2,
            ..GradCheckConfig::default()
        };
        let (failed, checked, max_err) = check_model(model, 2, cfg.seed, &gc, out)?;
        rec.note("gradcheck_failed", failed);
        rec.note("gradcheck_max_rel_err", max_err);
        if failed > 0 {
            return Err(Failure::Numerical(anyhow!(
                "gradient check: {failed} of {checked} elements above tol"
            )));
        }
    }
    Ok(())
}
