//! Central finite-difference gradient checking against the tape.

use std::fmt;

use crate::error::{Error, Result};
use crate::par;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Relative-error threshold above which an element is flagged, on top of
    /// the rounding error of the difference quotient.
    pub tol: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
    /// Retry a flagged element this many times, dividing the step by ten
    /// each time, and accept the first step that agrees.
    pub refine: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_elements: None,
            refine: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Step behind `numeric`.
    pub step: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed: Vec<_> = self.failures().collect();
        writeln!(
            f,
            "{} elements checked, {} above tol {:e}, max rel err {:.3e}",
            self.entries.len(),
            failed.len(),
            self.tol,
            self.max_rel_err()
        )?;
        for e in failed.iter().take(10) {
            writeln!(
                f,
                "  param {} [{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.param, e.index, e.analytic, e.numeric, e.rel_err
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare tape gradients of the scalar built by `f` with central
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// `f` receives a fresh tape and one parameter handle per entry of `params`
/// and must return a single-element node.
pub fn gradcheck<F>(f: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if cfg.h.is_nan() || cfg.h <= 0.0 {
        return Err(Error::Domain(format!("step h must be positive, got {}", cfg.h)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut probes = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let take = cfg.max_elements.unwrap_or(n).min(n).max(1);
        for k in 0..take {
            probes.push((pi, k * n / take));
        }
    }

    let eval = |pi: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut shifted = params.to_vec();
        shifted[pi].data_mut()[idx] += delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = shifted.into_iter().map(|p| tape.constant(p)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let central = |pi: usize, idx: usize, h: f64| -> Result<(f64, f64)> {
        let plus = eval(pi, idx, h)?;
        let minus = eval(pi, idx, -h)?;
        for (value, direction) in [(plus, "+h"), (minus, "-h")] {
            if !value.is_finite() {
                return Err(Error::Evaluation {
                    param: pi,
                    index: idx,
                    direction,
                    value,
                });
            }
        }
        // Rounding error of the difference quotient.
        let noise = 64.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h);
        Ok(((plus - minus) / (2.0 * h), noise))
    };

    let results = par::map_range(probes.len(), |k| -> Result<GradEntry> {
        let (pi, idx) = probes[k];
        let a = analytic[pi][idx];
        let agrees = |n: f64, noise: f64| (a - n).abs() <= cfg.tol * a.abs().max(n.abs()).max(1e-8) + noise;
        let mut step = cfg.h;
        let (mut numeric, noise) = central(pi, idx, step)?;
        let mut ok = agrees(numeric, noise);
        for _ in 0..cfg.refine {
            if ok {
                break;
            }
            step /= 10.0;
            let (n, noise) = central(pi, idx, step)?;
            numeric = n;
            ok = agrees(n, noise);
        }
        let rel_err = relative_error(a, numeric);
        Ok(GradEntry {
            param: pi,
            index: idx,
            analytic: a,
            numeric,
            rel_err,
            step,
            flagged: !ok,
        })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        entries,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = gradcheck(
            |tape, v| {
                let sq = tape.square(v[0]);
                Ok(tape.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            &GradCheckConfig::default(),
        )
        .unwrap();
        let e = &report.entries[0];
        assert_eq!(e.analytic, 6.0);
        assert!((e.numeric - 6.0).abs() < 1e-8);
        assert!(e.rel_err < 1e-9, "{}", e.rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let params = [Tensor::from_fn(&[4], |i| i as f64)];
        let report = gradcheck(
            |tape, v| {
                let z = tape.scale(v[0], 0.0);
                let s = tape.sum(z);
                Ok(tape.add_scalar(s, 7.0))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        for e in &report.entries {
            assert_eq!(e.analytic, 0.0);
            assert!(e.numeric.abs() <= 1e-10);
        }
        assert!(report.passed());
    }

    #[test]
    fn non_finite_evaluation_names_the_element() {
        // ln(x) blows up once x - h <= 0 for the second element
        struct Log;
        impl crate::tape::BackwardOp for Log {
            fn name(&self) -> &'static str {
                "log"
            }
            fn backward(&self, ctx: &crate::tape::BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
                vec![Some(
                    ctx.grad_output
                        .iter()
                        .zip(ctx.inputs[0].data())
                        .map(|(g, x)| g / x)
                        .collect(),
                )]
            }
        }
        let params = [Tensor::new(&[2], vec![1.0, 5e-6]).unwrap()];
        let err = gradcheck(
            |tape, v| {
                let x = tape.value(v[0]);
                let out = x.map(f64::ln);
                let l = tape.record(&[v[0]], out, Box::new(Log));
                Ok(tape.sum(l))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Evaluation {
                param,
                index,
                direction,
                ..
            } => {
                assert_eq!((param, index, direction), (0, 1, "-h"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refinement_steps_past_a_kink() {
        let f = |tape: &mut Tape, v: &[Var]| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        };
        let params = [Tensor::scalar(3e-6)];
        let coarse = gradcheck(f, &params, &GradCheckConfig::default()).unwrap();
        assert!(!coarse.passed());
        let cfg = GradCheckConfig {
            refine: 2,
            ..Default::default()
        };
        let fine = gradcheck(f, &params, &cfg).unwrap();
        assert!(fine.passed(), "{fine}");
        assert!((fine.entries[0].step - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn refinement_does_not_hide_wrong_gradients() {
        let cfg = GradCheckConfig {
            refine: 3,
            ..Default::default()
        };
        // x * x with one factor read as a constant: the tape sees slope x, not 2x.
        let report = gradcheck(
            |tape, v| {
                let x = tape.value(v[0]).item();
                let y = tape.scale(v[0], x);
                Ok(tape.sum(y))
            },
            &[Tensor::scalar(2.0)],
            &cfg,
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.entries[0].rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_positive_step() {
        let cfg = GradCheckConfig {
            h: 0.0,
            ..Default::default()
        };
        assert!(gradcheck(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], &cfg).is_err());
    }
}
