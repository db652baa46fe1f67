//! Gradient probes of trained models: input saliency, activation
//! maximization, channel-class selectivity and motion recovery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MotionKind};
use crate::error::{Error, Result};
use crate::network::{stack, LayerSpec, Model};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of the output read for `layer`: the following ReLU if there is one.
fn activation_index(model: &Model, layer: &str) -> Result<usize> {
    let (i, l) = model
        .layer(layer)
        .ok_or_else(|| Error::contract(format!("no layer named {layer:?}")))?;
    if !matches!(l.spec, LayerSpec::Conv3t { .. } | LayerSpec::Conv3d { .. }) {
        return Err(Error::contract(format!("{layer:?} is not a convolution")));
    }
    Ok(match model.layers.get(i + 1).map(|l| &l.spec) {
        Some(LayerSpec::Relu) => i + 1,
        _ => i,
    })
}

fn channel_objective(model: &Model, tape: &mut Tape, input: Var, layer: &str, channel: usize) -> Result<Var> {
    let at = activation_index(model, layer)?;
    let trace = model.trace(tape, input, false)?;
    tape.channel_mean(trace.outputs[at], channel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    /// Gradient of the channel mean with respect to the clip, `[C, T, W, H]`.
    pub gradient: Tensor,
    /// Per input frame, `sum |gradient * input|`.
    pub frame_energy: Vec<f64>,
    /// Frame with the largest energy.
    pub peak_frame: usize,
    pub activation: f64,
}

/// Saliency of `channel` of `layer` for one `[C, T, W, H]` clip.
pub fn saliency(model: &Model, clip: &Tensor, layer: &str, channel: usize) -> Result<Saliency> {
    let mut tape = Tape::new();
    let input = tape.param(stack(&[clip])?);
    let objective = channel_objective(model, &mut tape, input, layer, channel)?;
    let activation = tape.value(objective).item();
    tape.backward(objective)?;
    let shape = clip.shape();
    let grad = tape.grad(input).expect("input is a parameter").to_vec();
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            location: format!("saliency gradient element {bad}"),
        });
    }
    let (c, t) = (shape[0], shape[1]);
    let plane = shape[2] * shape[3];
    let mut energy = vec![0.0; t];
    for ch in 0..c {
        for (f, e) in energy.iter_mut().enumerate() {
            let o = (ch * t + f) * plane;
            *e += grad[o..o + plane]
                .iter()
                .zip(&clip.data()[o..o + plane])
                .map(|(g, x)| (g * x).abs())
                .sum::<f64>();
        }
    }
    let peak_frame = energy
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0;
    Ok(Saliency {
        gradient: Tensor::new(shape, grad)?,
        frame_energy: energy,
        peak_frame,
        activation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActMaxConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the L2 decay pulling the frame toward zero.
    pub decay: f64,
    /// Initial pixels are uniform in `[0, init_scale)`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ActMaxConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.5,
            decay: 0.01,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActMax {
    /// The optimized still frame, `[C, W, H]`.
    pub frame: Tensor,
    /// Activation before each step and after the last.
    pub trace: Vec<f64>,
}

/// Activation of `channel` when `frame` is held still for the whole clip.
pub fn still_activation(model: &Model, frame: &Tensor, layer: &str, channel: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(frame.clone());
    let clip = tape.repeat_frame(f, model.spec.input[1])?;
    let obj = channel_objective(model, &mut tape, clip, layer, channel)?;
    Ok(tape.value(obj).item())
}

/// Gradient ascent on a still frame with unit-norm steps and L2 decay.
pub fn activation_max(model: &Model, layer: &str, channel: usize, cfg: &ActMaxConfig) -> Result<ActMax> {
    if !(cfg.steps >= 1 && cfg.lr.is_finite() && cfg.lr > 0.0 && cfg.decay >= 0.0 && cfg.init_scale >= 0.0) {
        return Err(Error::contract(
            "activation maximization needs steps >= 1, lr > 0, decay >= 0 and init_scale >= 0",
        ));
    }
    let [c, frames, w, h] = model.spec.input;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frame = Tensor::from_fn(&[c, w, h], |_| rng.gen::<f64>() * cfg.init_scale);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let f = tape.param(frame.clone());
        let clip = tape.repeat_frame(f, frames)?;
        let obj = channel_objective(model, &mut tape, clip, layer, channel)?;
        let a = tape.value(obj).item();
        if !a.is_finite() {
            return Err(Error::Divergence {
                step,
                location: format!("activation maximization of {layer} channel {channel}"),
            });
        }
        trace.push(a);
        if step == cfg.steps {
            break;
        }
        tape.backward(obj)?;
        let g = tape.grad(f).expect("frame is a parameter");
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                location: format!("activation maximization gradient of {layer} channel {channel}"),
            });
        }
        let scale = if norm > 0.0 { cfg.lr / norm } else { 0.0 };
        for (x, gi) in frame.data_mut().iter_mut().zip(g) {
            *x += scale * gi - cfg.lr * cfg.decay * *x;
        }
    }
    Ok(ActMax { frame, trace })
}

/// Mean post-activation of every channel of `layer`, per class:
/// `response[channel][class]`.
pub fn class_response(model: &Model, layer: &str, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let at = activation_index(model, layer)?;
    let k = data.class_names.len();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let counts = data.class_counts();
    for chunk in data.clips.chunks(32) {
        let batch = stack(&chunk.iter().map(|c| &c.frames).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let trace = model.trace(&mut tape, x, false)?;
        let act = tape.value(trace.outputs[at]);
        let (n, channels) = (act.shape()[0], act.shape()[1]);
        let inner = act.len() / (n * channels);
        if sums.is_empty() {
            sums = vec![vec![0.0; k]; channels];
        }
        for (i, clip) in chunk.iter().enumerate() {
            for (ch, row) in sums.iter_mut().enumerate() {
                let o = (i * channels + ch) * inner;
                row[clip.label] += act.data()[o..o + inner].iter().sum::<f64>() / inner as f64;
            }
        }
    }
    for row in &mut sums {
        for (v, &n) in row.iter_mut().zip(&counts) {
            *v /= n.max(1) as f64;
        }
    }
    Ok(sums)
}

/// `response[c][k]` minus the mean response of channel `c` to other classes.
pub fn selectivity(response: &[Vec<f64>]) -> Vec<Vec<f64>> {
    response
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            let others = (row.len() - 1).max(1) as f64;
            row.iter().map(|&r| r - (total - r) / others).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveredChannel {
    pub channel: usize,
    pub weight: f64,
    /// Mean learned translation over the filter's steps.
    pub tx: f64,
    pub ty: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryRow {
    pub class: String,
    pub direction: (f64, f64),
    pub channels: Vec<RecoveredChannel>,
    /// Weighted fraction of the selected channels whose translation points
    /// the same way as the class motion.
    pub agreement: f64,
}

/// For every translation class, compare the mean learned translation of its
/// `top` most selective channels of `layer` with the class motion.
///
/// A channel's selectivity for a class is its response to that class minus
/// its response to the opposite direction (or to the mean of the other
/// translation classes when the opposite is absent). Channels are weighted
/// by the positive part of it.
pub fn motion_recovery(model: &Model, layer: &str, data: &Dataset, top: usize) -> Result<Vec<RecoveryRow>> {
    let bank = model
        .layer(layer)
        .and_then(|(_, l)| l.bank())
        .ok_or_else(|| Error::contract(format!("{layer:?} is not a factorized layer")))?;
    if bank.depth < 2 {
        return Err(Error::contract(format!("{layer:?} has no learned transforms")));
    }
    let kinds: Vec<Option<MotionKind>> = (0..data.class_names.len())
        .map(|class| {
            let mut it = data.clips.iter().filter(|c| c.label == class).map(|c| c.kind);
            let first = it.next()?;
            (MotionKind::TRANSLATIONS.contains(&first) && it.all(|k| k == first)).then_some(first)
        })
        .collect();
    let classes: Vec<usize> = (0..kinds.len()).filter(|&k| kinds[k].is_some()).collect();
    if classes.len() < 2 {
        return Err(Error::contract(
            "motion recovery needs at least two translation classes",
        ));
    }
    let response = class_response(model, layer, data)?;
    let restricted: Vec<Vec<f64>> = response
        .iter()
        .map(|row| classes.iter().map(|&k| row[k]).collect())
        .collect();
    let others = selectivity(&restricted);
    let opposite: Vec<Option<usize>> = classes
        .iter()
        .map(|&k| {
            let (dx, dy) = kinds[k].expect("translation class").direction();
            classes
                .iter()
                .position(|&j| kinds[j].expect("translation class").direction() == (-dx, -dy))
        })
        .collect();
    let sel: Vec<Vec<f64>> = restricted
        .iter()
        .zip(&others)
        .map(|(row, fallback)| {
            (0..classes.len())
                .map(|col| match opposite[col] {
                    Some(o) => row[col] - row[o],
                    None => fallback[col],
                })
                .collect()
        })
        .collect();
    let steps = bank.depth - 1;
    let mean_shift = |ch: usize| {
        (0..steps).fold((0.0, 0.0), |(x, y), t| {
            let p = bank.theta(ch, t);
            (x + p.tx / steps as f64, y + p.ty / steps as f64)
        })
    };
    let mut rows = Vec::new();
    for (col, &class) in classes.iter().enumerate() {
        let dir = kinds[class].expect("translation class").direction();
        let mut order: Vec<usize> = (0..sel.len()).collect();
        order.sort_by(|&a, &b| sel[b][col].total_cmp(&sel[a][col]));
        let channels: Vec<RecoveredChannel> = order
            .into_iter()
            .take(top)
            .map(|ch| {
                let (tx, ty) = mean_shift(ch);
                RecoveredChannel {
                    channel: ch,
                    weight: sel[ch][col].max(0.0),
                    tx,
                    ty,
                    agrees: tx * dir.0 + ty * dir.1 > 0.0,
                }
            })
            .collect();
        let total: f64 = channels.iter().map(|c| c.weight).sum();
        let agreed: f64 = channels.iter().filter(|c| c.agrees).map(|c| c.weight).sum();
        rows.push(RecoveryRow {
            class: data.class_names[class].clone(),
            direction: dir,
            channels,
            agreement: if total > 0.0 { agreed / total } else { 0.0 },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ConvMode, ModelSpec};

    fn linear_model() -> Model {
        let spec = ModelSpec {
            input: [1, 4, 6, 6],
            layers: vec![
                LayerSpec::Conv3t {
                    name: "conv1".into(),
                    filters: 2,
                    kernel: [3, 3],
                    depth: 2,
                    stride: [1, 1, 1],
                    padding: [0, 1, 1],
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    name: "head".into(),
                    outputs: 2,
                },
            ],
            classes: 2,
            seed: 3,
        };
        Model::new(spec).unwrap()
    }

    #[test]
    fn dead_channel_has_zero_saliency() {
        let mut model = Model::new(ModelSpec::tinyt_for([1, 8, 12, 12], ConvMode::Factorized, 2, 1)).unwrap();
        let (_, layer) = model.layer("conv1").unwrap();
        let mut bank = layer.bank().unwrap();
        bank.base.data_mut().iter_mut().for_each(|v| *v = -v.abs() - 0.1);
        model.set_bank("conv1", bank).unwrap();
        let clip = Tensor::from_fn(&[1, 8, 12, 12], |i| (i % 7) as f64 / 7.0);
        let s = saliency(&model, &clip, "conv1", 0).unwrap();
        assert!(s.gradient.data().iter().all(|&g| g == 0.0));
        assert_eq!(s.activation, 0.0);
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let model = linear_model();
        let clip = Tensor::from_fn(&[1, 4, 6, 6], |i| ((i * 37) % 11) as f64 / 11.0);
        let s = saliency(&model, &clip, "conv1", 1).unwrap();
        let a = |c: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(stack(&[c]).unwrap());
            let o = channel_objective(&model, &mut tape, x, "conv1", 1).unwrap();
            tape.value(o).item()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..50 {
            let idx = rng.gen_range(0..clip.len());
            let mut up = clip.clone();
            up.data_mut()[idx] += h;
            let mut down = clip.clone();
            down.data_mut()[idx] -= h;
            let fd = (a(&up) - a(&down)) / (2.0 * h);
            let g = s.gradient.data()[idx];
            assert!(
                (fd - g).abs() <= 1e-3 * fd.abs().max(g.abs()).max(1e-6),
                "{idx}: {fd} vs {g}"
            );
        }
    }

    #[test]
    fn single_window_saliency_is_the_filter() {
        let spec = ModelSpec {
            input: [2, 3, 4, 5],
            layers: vec![
                LayerSpec::Conv3d {
                    name: "conv1".into(),
                    filters: 2,
                    kernel: [3, 4, 5],
                    stride: [1, 1, 1],
                    padding: [0, 0, 0],
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    name: "head".into(),
                    outputs: 2,
                },
            ],
            classes: 2,
            seed: 8,
        };
        let model = Model::new(spec).unwrap();
        let clip = Tensor::from_fn(&[2, 3, 4, 5], |i| (i % 5) as f64);
        let s = saliency(&model, &clip, "conv1", 1).unwrap();
        let w = model.layers[0].params[0].value.outer(1);
        assert_eq!(s.gradient.data(), w);
    }

    #[test]
    fn peak_frame_follows_the_only_nonzero_frame() {
        let model = linear_model();
        let mut clip = Tensor::zeros(&[1, 4, 6, 6]);
        clip.data_mut()[2 * 36..3 * 36].iter_mut().for_each(|v| *v = 1.0);
        let s = saliency(&model, &clip, "conv1", 0).unwrap();
        assert_eq!(s.peak_frame, 2);
    }

    #[test]
    fn ascent_on_a_linear_channel_never_decreases() {
        let model = linear_model();
        let cfg = ActMaxConfig {
            steps: 20,
            decay: 0.0,
            ..Default::default()
        };
        let run = activation_max(&model, "conv1", 0, &cfg).unwrap();
        assert_eq!(run.trace.len(), 21);
        assert!(run.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(run.trace[20] > run.trace[0]);
        let again = activation_max(&model, "conv1", 0, &cfg).unwrap();
        assert!(again.frame.bitwise_eq(&run.frame));
        let none = ActMaxConfig { steps: 0, ..cfg };
        assert!(activation_max(&model, "conv1", 0, &none).is_err());
    }

    #[test]
    fn ascent_reports_divergence() {
        let mut model = linear_model();
        model.layers[0].params[0].value.data_mut()[0] = f64::NAN;
        let err = activation_max(&model, "conv1", 0, &ActMaxConfig::default()).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn selectivity_of_a_one_class_channel() {
        let sel = selectivity(&[vec![3.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]);
        assert_eq!(sel[0], vec![2.0, -1.0, -1.0]);
        assert!(sel[1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_layers_are_rejected() {
        let model = linear_model();
        let clip = Tensor::zeros(&[1, 4, 6, 6]);
        assert!(saliency(&model, &clip, "nope", 0).is_err());
        assert!(saliency(&model, &clip, "head", 0).is_err());
        assert!(saliency(&model, &clip, "conv1", 5).is_err());
    }
}
