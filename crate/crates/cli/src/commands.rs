use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use threetconv::analysis::report::{self, CurveRow};
use threetconv::analysis::{self, to_display};
use threetconv::data::{self, ClassSet, ClipShape, Dataset, DatasetConfig, Magnitudes};
use threetconv::filter::{self, FilterBank};
use threetconv::gradcheck::GradCheckConfig;
use threetconv::network::{
    self, load_checkpoint, save_checkpoint, ConvMode, Model, ModelSpec, ParamRole, Schedule, TrainConfig,
    TrainState,
};
use threetconv::{par, Tensor};

use crate::manifest::Recorder;
use crate::{
    config, Common, EvalFlags, ExportFlags, Failure, GenFlags, GradcheckFlags, Import2dFlags, Outcome,
    TrainFlags,
};

pub fn start<C>(command: &str, common: &Common, flags: &impl Serialize) -> Result<C, Failure>
where
    C: Default + Serialize + serde::de::DeserializeOwned + HasRuntime,
{
    let cfg: C = config::resolve(command, common.config.as_deref(), flags).map_err(Failure::Usage)?;
    if cfg.threads() > 0 {
        par::init_threads(cfg.threads());
    }
    Ok(cfg)
}

/// Record the outcome in the run manifest, then pass it on.
pub fn finish(rec: Recorder, out: &Path, result: Outcome) -> Outcome {
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(Failure::Usage(e)) => format!("usage error: {e:#}"),
        Err(Failure::Numerical(e)) => format!("numerical failure: {e:#}"),
    };
    let m = rec.finish(out, &status).map_err(Failure::Usage)?;
    eprintln!(
        "manifest {} ({})",
        out.join(crate::manifest::MANIFEST_FILE).display(),
        &m.hash[..12]
    );
    result
}

pub trait HasRuntime {
    fn threads(&self) -> usize;
}

macro_rules! runtime {
    ($($t:ty),*) => {$(
        impl HasRuntime for $t {
            fn threads(&self) -> usize {
                self.threads
            }
        }
    )*};
}

runtime!(
    GenConfig,
    TrainCliConfig,
    EvalConfig,
    GradcheckConfig,
    Import2dConfig,
    ExportConfig,
    crate::analyze::AnalyzeConfig
);

pub fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref()
        .ok_or_else(|| Failure::Usage(anyhow!("--{flag} is required")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub threads: usize,
    pub out: PathBuf,
    pub classes: ClassSet,
    pub n: usize,
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub translate_px: f64,
    pub rotate_deg: f64,
    pub scale: f64,
    pub jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let (s, m) = (ClipShape::default(), Magnitudes::default());
        Self {
            threads: 0,
            out: "runs/data".into(),
            classes: ClassSet::Motion6,
            n: 600,
            seed: 0,
            frames: s.frames,
            width: s.width,
            height: s.height,
            translate_px: m.translate_px,
            rotate_deg: m.rotate_deg,
            scale: m.scale,
            jitter: m.jitter,
        }
    }
}

pub fn gen(flags: &GenFlags) -> Outcome {
    let cfg: GenConfig = start("gen", &flags.common, flags)?;
    let mut rec = Recorder::new("gen", &cfg)?;
    rec.seed("data", cfg.seed);
    let result = (|| -> Outcome {
        if cfg.n == 0 {
            return Err(Failure::Usage(anyhow!("--n must be at least 1")));
        }
        let dc = DatasetConfig {
            classes: cfg.classes,
            n: cfg.n,
            seed: cfg.seed,
            shape: ClipShape {
                frames: cfg.frames,
                width: cfg.width,
                height: cfg.height,
            },
            magnitudes: Magnitudes {
                translate_px: cfg.translate_px,
                rotate_deg: cfg.rotate_deg,
                scale: cfg.scale,
                jitter: cfg.jitter,
            },
        };
        let ds = data::make_dataset(&dc)?;
        ds.save(&cfg.out)?;
        eprintln!(
            "{} clips, {} classes -> {}",
            ds.clips.len(),
            ds.class_names.len(),
            cfg.out.display()
        );
        rec.note("clips", ds.clips.len());
        rec.note("class_counts", ds.class_counts());
        Ok(())
    })();
    finish(rec, &cfg.out, result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCliConfig {
    pub threads: usize,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub arch: String,
    pub mode: String,
    pub init: String,
    pub bank: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub temporal_lr_mult: f64,
    pub min_scale: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            threads: 0,
            out: "runs/train".into(),
            data: None,
            val: None,
            arch: "tinyt".into(),
            mode: "3t".into(),
            init: "random".into(),
            bank: None,
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            temporal_lr_mult: t.temporal_lr_mult,
            min_scale: t.min_scale,
            schedule: t.schedule,
            seed: t.seed,
        }
    }
}

fn input_shape(ds: &Dataset) -> [usize; 4] {
    let s = ds.config.shape;
    [1, s.frames, s.width, s.height]
}

/// Load a bank directory into a factorized model, inflating depth-1 layers.
pub fn apply_bank(model: &mut Model, dir: &Path) -> Result<(), Failure> {
    for (name, bank) in filter::read_banks(dir)? {
        let depth = match model.layer(&name).map(|(_, l)| &l.spec) {
            Some(network::LayerSpec::Conv3t { depth, .. }) => *depth,
            _ => {
                return Err(Failure::Usage(anyhow!(
                    "bank layer {name:?} is not a factorized layer of the model"
                )))
            }
        };
        let bank = if bank.depth == 1 && depth > 1 {
            FilterBank::import_2d(&bank.base, depth)?
        } else {
            bank
        };
        model.set_bank(&name, bank)?;
    }
    Ok(())
}

pub fn train(flags: &TrainFlags) -> Outcome {
    let cfg: TrainCliConfig = start("train", &flags.common, flags)?;
    let mut rec = Recorder::new("train", &cfg)?;
    rec.seed("train", cfg.seed);
    let result = (|| -> Outcome {
        let data_dir = required(&cfg.data, "data")?;
        if cfg.arch != "tinyt" {
            return Err(Failure::Usage(anyhow!(
                "unknown architecture {:?}; only tinyt",
                cfg.arch
            )));
        }
        let mode: ConvMode = cfg.mode.parse()?;
        rec.input(data_dir);
        let ds = Dataset::load(data_dir).with_context(|| format!("loading {}", data_dir.display()))?;
        let val = match &cfg.val {
            Some(v) => {
                rec.input(v);
                Some(Dataset::load(v).with_context(|| format!("loading {}", v.display()))?)
            }
            None => None,
        };
        let classes = ds.class_names.len();
        let input = input_shape(&ds);
        let mut model = Model::new(ModelSpec::tinyt_for(input, mode, classes, cfg.seed))?;
        match cfg.init.as_str() {
            "random" => {}
            "import2d" => {
                if mode != ConvMode::Factorized {
                    return Err(Failure::Usage(anyhow!("--init import2d needs --mode 3t")));
                }
                let bank = required(&cfg.bank, "bank")?;
                rec.input(bank);
                apply_bank(&mut model, bank)?;
            }
            other => {
                return Err(Failure::Usage(anyhow!(
                    "unknown init {other:?}, expected random or import2d"
                )))
            }
        }

        let count = |m: ConvMode| -> Result<usize, Failure> {
            Ok(Model::new(ModelSpec::tinyt_for(input, m, classes, cfg.seed))?.trainable_count())
        };
        let (n3t, n3d) = (count(ConvMode::Factorized)?, count(ConvMode::Dense)?);
        let ratio = n3t as f64 / n3d as f64;
        eprintln!("trainable parameters: 3t {n3t}, 3d {n3d}, ratio {ratio:.4}");
        std::fs::create_dir_all(&cfg.out)?;
        #[derive(Serialize)]
        struct CountRow {
            mode: &'static str,
            trainable: usize,
        }
        report::write_csv(
            &cfg.out.join("params.csv"),
            &[
                CountRow {
                    mode: "3t",
                    trainable: n3t,
                },
                CountRow {
                    mode: "3d",
                    trainable: n3d,
                },
            ],
        )?;
        rec.note("params_3t", n3t);
        rec.note("params_3d", n3d);
        rec.note("param_ratio", ratio);
        rec.note("params_model", model.trainable_count());

        let tc = TrainConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            seed: cfg.seed,
            weight_decay: cfg.weight_decay,
            temporal_lr_mult: cfg.temporal_lr_mult,
            min_scale: cfg.min_scale,
            schedule: cfg.schedule,
        };
        tc.validate()?;
        let mut curve = Vec::new();
        let mut val_acc = None;
        let history = network::train(&mut model, &ds.inputs(), &ds.labels(), &tc, |epoch, m, loss| {
            let mut line = format!("epoch {epoch} loss {loss:.4}");
            curve.push(CurveRow {
                series: "train_loss".into(),
                x: epoch as f64,
                y: loss,
            });
            if let Some(v) = &val {
                if let Ok(acc) = network::accuracy(m, &v.inputs(), &v.labels()) {
                    line.push_str(&format!(" val {acc:.4}"));
                    val_acc = Some(acc);
                    curve.push(CurveRow {
                        series: "val_accuracy".into(),
                        x: epoch as f64,
                        y: acc,
                    });
                }
            }
            eprintln!("{line}");
        });
        let history = match history {
            Ok(h) => h,
            Err(e) => {
                let e = anyhow::Error::from(e).context("training diverged");
                return Err(e.into());
            }
        };
        let state = TrainState {
            spec: model.spec.clone(),
            config: Some(tc),
            steps: history.losses.len(),
            epochs: cfg.epochs,
            final_loss: history.epoch_losses.last().copied(),
        };
        save_checkpoint(&cfg.out.join("checkpoint"), &model, &state)?;
        let steps: Vec<CurveRow> = history
            .losses
            .iter()
            .enumerate()
            .map(|(i, &l)| CurveRow {
                series: "step_loss".into(),
                x: i as f64,
                y: l,
            })
            .collect();
        report::write_csv(&cfg.out.join("steps.csv"), &steps)?;
        let loss_csv = cfg.out.join("loss.csv");
        report::write_csv(&loss_csv, &curve)?;
        if !curve.is_empty() {
            let rows: Vec<CurveRow> = report::read_csv(&loss_csv)?;
            std::fs::write(
                cfg.out.join("loss.svg"),
                report::curve_svg("training", "epoch", &rows)?,
            )?;
        }
        rec.note("final_loss", state.final_loss);
        rec.note("val_accuracy", val_acc);
        rec.note("steps", state.steps);
        Ok(())
    })();
    finish(rec, &cfg.out, result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threads: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threads: 0,
            out: "runs/eval".into(),
            checkpoint: None,
            data: None,
        }
    }
}

pub fn eval(flags: &EvalFlags) -> Outcome {
    let cfg: EvalConfig = start("eval", &flags.common, flags)?;
    let mut rec = Recorder::new("eval", &cfg)?;
    let result = (|| -> Outcome {
        let ck = required(&cfg.checkpoint, "checkpoint")?;
        let data_dir = required(&cfg.data, "data")?;
        rec.input(ck);
        rec.input(data_dir);
        let (model, _) = load_checkpoint(ck)?;
        let ds = Dataset::load(data_dir)?;
        if input_shape(&ds) != model.spec.input || ds.class_names.len() != model.spec.classes {
            return Err(Failure::Usage(anyhow!(
                "dataset clips {:?} with {} classes do not fit the model ({:?}, {} classes)",
                input_shape(&ds),
                ds.class_names.len(),
                model.spec.input,
                model.spec.classes
            )));
        }
        let k = model.spec.classes;
        let mut confusion = vec![vec![0usize; k]; k];
        for chunk in ds.clips.chunks(32) {
            let batch = network::stack(&chunk.iter().map(|c| &c.frames).collect::<Vec<_>>())?;
            for (clip, p) in chunk.iter().zip(model.predict(&batch)?) {
                confusion[clip.label][p] += 1;
            }
        }
        #[derive(Serialize)]
        struct ClassRow<'a> {
            class: &'a str,
            clips: usize,
            correct: usize,
            accuracy: f64,
        }
        #[derive(Serialize)]
        struct ConfusionRow<'a> {
            truth: &'a str,
            predicted: &'a str,
            count: usize,
        }
        let mut per_class = Vec::new();
        let mut cells = Vec::new();
        for (t, row) in confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            per_class.push(ClassRow {
                class: &ds.class_names[t],
                clips: n,
                correct: row[t],
                accuracy: if n > 0 { row[t] as f64 / n as f64 } else { 0.0 },
            });
            for (p, &count) in row.iter().enumerate() {
                cells.push(ConfusionRow {
                    truth: &ds.class_names[t],
                    predicted: &ds.class_names[p],
                    count,
                });
            }
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let acc = correct as f64 / ds.clips.len() as f64;
        std::fs::create_dir_all(&cfg.out)?;
        report::write_csv(&cfg.out.join("classes.csv"), &per_class)?;
        report::write_csv(&cfg.out.join("confusion.csv"), &cells)?;
        eprintln!("accuracy {acc:.4} ({correct}/{})", ds.clips.len());
        rec.note("accuracy", acc);
        Ok(())
    })();
    finish(rec, &cfg.out, result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub threads: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub mode: String,
    pub classes: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub batch: usize,
    pub max_elements: usize,
    pub h: f64,
    pub tol: f64,
    pub refine: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            threads: 0,
            out: "runs/gradcheck".into(),
            checkpoint: None,
            mode: "3t".into(),
            classes: 6,
            frames: 8,
            width: 28,
            height: 28,
            batch: 2,
            max_elements: 16,
            h: 1e-5,
            tol: 1e-4,
            refine: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradRow {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub step: f64,
    pub flagged: bool,
}

/// Check the loss gradient of `model` on a seeded random batch and write
/// `gradcheck.csv` into `out`. Returns the number of flagged elements.
pub fn check_model(
    model: &Model,
    batch: usize,
    seed: u64,
    cfg: &GradCheckConfig,
    out: &Path,
) -> Result<(usize, usize, f64), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, t, w, h] = model.spec.input;
    let n = batch.max(1);
    let clips = Tensor::from_fn(&[n, c, t, w, h], |_| rng.gen::<f64>());
    let labels: Vec<usize> = (0..n).map(|i| i % model.spec.classes).collect();
    let report = network::loss_gradcheck(model, &clips, &labels, cfg)?;
    let names: Vec<String> = model
        .layers
        .iter()
        .flat_map(|l| {
            l.params.iter().map(move |p| {
                let role = match p.role {
                    ParamRole::Base => "base",
                    ParamRole::Theta => "theta",
                    ParamRole::Weight => "weight",
                    ParamRole::Bias => "bias",
                };
                format!("{}.{role}", l.spec.name())
            })
        })
        .collect();
    let rows: Vec<GradRow> = report
        .entries
        .iter()
        .map(|e| GradRow {
            tensor: names[e.param].clone(),
            index: e.index,
            analytic: e.analytic,
            numeric: e.numeric,
            rel_err: e.rel_err,
            step: e.step,
            flagged: e.flagged,
        })
        .collect();
    std::fs::create_dir_all(out)?;
    report::write_csv(&out.join("gradcheck.csv"), &rows)?;
    eprint!("{report}");
    Ok((
        report.failures().count(),
        report.entries.len(),
        report.max_rel_err(),
    ))
}

pub fn gradcheck(flags: &GradcheckFlags) -> Outcome {
    let cfg: GradcheckConfig = start("gradcheck", &flags.common, flags)?;
    let mut rec = Recorder::new("gradcheck", &cfg)?;
    rec.seed("batch", cfg.seed);
    let result = (|| -> Outcome {
        let model = match &cfg.checkpoint {
            Some(ck) => {
                rec.input(ck);
                load_checkpoint(ck)?.0
            }
            None => {
                let mode: ConvMode = cfg.mode.parse()?;
                Model::new(ModelSpec::tinyt_for(
                    [1, cfg.frames, cfg.width, cfg.height],
                    mode,
                    cfg.classes,
                    cfg.seed,
                ))?
            }
        };
        let gc = GradCheckConfig {
            h: cfg.h,
            tol: cfg.tol,
            max_elements: Some(cfg.max_elements),
            refine: cfg.refine,
        };
        let (failed, checked, max_err) = check_model(&model, cfg.batch, cfg.seed, &gc, &cfg.out)?;
        rec.note("checked", checked);
        rec.note("failed", failed);
        rec.note("max_rel_err", max_err);
        if failed > 0 {
            return Err(Failure::Numerical(anyhow!(
                "{failed} of {checked} elements above tol {:e}",
                cfg.tol
            )));
        }
        Ok(())
    })();
    finish(rec, &cfg.out, result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Import2dConfig {
    pub threads: usize,
    pub out: PathBuf,
    pub bank: Option<PathBuf>,
    pub depths: Vec<usize>,
    pub average: bool,
}

impl Default for Import2dConfig {
    fn default() -> Self {
        Self {
            threads: 0,
            out: "runs/import2d".into(),
            bank: None,
            depths: vec![4, 3],
            average: false,
        }
    }
}

pub fn import2d(flags: &Import2dFlags) -> Outcome {
    let cfg: Import2dConfig = start("import2d", &flags.common, flags)?;
    let mut rec = Recorder::new("import2d", &cfg)?;
    let result = (|| -> Outcome {
        let src = required(&cfg.bank, "bank")?;
        rec.input(src);
        let banks = filter::read_banks(src)?;
        let depths: Vec<usize> = match cfg.depths.len() {
            1 => vec![cfg.depths[0]; banks.len()],
            n if n == banks.len() => cfg.depths.clone(),
            n => {
                return Err(Failure::Usage(anyhow!(
                    "{n} depths given for {} layers",
                    banks.len()
                )))
            }
        };
        let mut out = Vec::with_capacity(banks.len());
        for ((name, bank), depth) in banks.into_iter().zip(depths) {
            if bank.depth != 1 {
                return Err(Failure::Usage(anyhow!(
                    "layer {name} has depth {}, expected 1",
                    bank.depth
                )));
            }
            let mut base = bank.base;
            if cfg.average {
                base.data_mut().iter_mut().for_each(|v| *v /= depth as f64);
            }
            eprintln!("{name}: {:?} -> depth {depth}", base.shape());
            out.push((name, FilterBank::import_2d(&base, depth)?));
        }
        filter::write_banks(&cfg.out, &out)?;
        rec.note("layers", out.len());
        Ok(())
    })();
    finish(rec, &cfg.out, result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    pub threads: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dense: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            threads: 0,
            out: "runs/export".into(),
            checkpoint: None,
            dense: false,
        }
    }
}

pub fn export(flags: &ExportFlags) -> Outcome {
    let cfg: ExportConfig = start("export", &flags.common, flags)?;
    let mut rec = Recorder::new("export", &cfg)?;
    let result = (|| -> Outcome {
        let ck = required(&cfg.checkpoint, "checkpoint")?;
        rec.input(ck);
        let (model, _) = load_checkpoint(ck)?;
        let banks = model.banks();
        if banks.is_empty() {
            return Err(Failure::Usage(anyhow!("the checkpoint has no factorized layers")));
        }
        filter::write_banks(&cfg.out, &banks)?;
        let mut display = Vec::new();
        for (name, bank) in &banks {
            for r in filter::theta_records(name, bank) {
                display.push(to_display(&r, bank.width(), bank.height()));
            }
            if cfg.dense {
                bank.materialize()?
                    .write_tsr(cfg.out.join(format!("{name}.dense.tsr")))?;
            }
        }
        report::write_csv(&cfg.out.join("display.csv"), &display)?;
        rec.note("transforms", analysis::records(&model).len());
        Ok(())
    })();
    finish(rec, &cfg.out, result)
}
