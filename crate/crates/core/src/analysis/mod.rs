//! Reading learned transforms: display conversion, per-filter trajectories,
//! model-level statistics and histograms, plus gradient probes of trained
//! models ([`probe`]) and CSV/SVG reports ([`report`]).

pub mod probe;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::affine::{self, AffineMatrix, AffineParams};
use crate::error::{Error, Result};
use crate::filter::{theta_records, ThetaRecord};
use crate::network::Model;

/// Every transform of every factorized layer, in layer, filter, step order.
pub fn records(model: &Model) -> Vec<ThetaRecord> {
    model
        .banks()
        .iter()
        .flat_map(|(name, bank)| theta_records(name, bank))
        .collect()
}

/// Human-facing form of a record: rotation in degrees with clockwise
/// positive, translation in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayRecord {
    pub layer: String,
    pub filter: usize,
    pub step: usize,
    pub scale: f64,
    pub rotation_deg: f64,
    pub px_x: f64,
    pub px_y: f64,
}

pub fn to_display(p: &ThetaRecord, width: usize, height: usize) -> DisplayRecord {
    DisplayRecord {
        layer: p.layer.clone(),
        filter: p.filter,
        step: p.step,
        scale: p.s,
        rotation_deg: -p.r.to_degrees(),
        px_x: p.tx * width as f64,
        px_y: p.ty * height as f64,
    }
}

pub fn from_display(d: &DisplayRecord, width: usize, height: usize) -> ThetaRecord {
    ThetaRecord {
        layer: d.layer.clone(),
        filter: d.filter,
        step: d.step,
        s: d.scale,
        r: (-d.rotation_deg).to_radians(),
        tx: d.px_x / width as f64,
        ty: d.px_y / height as f64,
    }
}

/// Cumulative pose after some number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Sum of rotations, radians.
    pub rotation: f64,
    /// Product of scales.
    pub scale: f64,
    /// The composed map.
    #[serde(skip, default = "identity_matrix")]
    pub matrix: AffineMatrix,
}

fn identity_matrix() -> AffineMatrix {
    AffineMatrix::IDENTITY
}

impl Pose {
    pub const ORIGIN: Pose = Pose {
        x: 0.0,
        y: 0.0,
        rotation: 0.0,
        scale: 1.0,
        matrix: AffineMatrix::IDENTITY,
    };
}

/// `poses[k]` is the pose after `k` steps; `poses[0]` is the origin.
///
/// The map after `k` steps is `A_1 A_2 ... A_k`: slice `k + 1` of a filter
/// reads slice 1 through it, so its translation is where the sampling window
/// has moved to.
pub fn trajectory(thetas: &[AffineParams]) -> Result<Vec<Pose>> {
    if thetas.is_empty() {
        return Err(Error::contract("a trajectory needs at least one step"));
    }
    let mut poses = vec![Pose::ORIGIN];
    for p in thetas {
        let prev = *poses.last().expect("non-empty");
        let matrix = prev.matrix.then(&affine::compose(p)?);
        let (x, y) = matrix.translation();
        poses.push(Pose {
            x,
            y,
            rotation: prev.rotation + p.r,
            scale: prev.scale * p.s,
            matrix,
        });
    }
    Ok(poses)
}

/// Mean and population standard deviation of one parameter type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub name: &'static str,
    pub mean: f64,
    pub std: f64,
}

impl StatRow {
    pub fn mean_e3(&self) -> f64 {
        self.mean * 1e3
    }

    pub fn std_e3(&self) -> f64 {
        self.std * 1e3
    }
}

/// Rows `s`, `r`, `p_x`, `p_y` over `|s - 1|`, `|r|` (radians), `|t_x|`
/// and `|t_y|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsTable {
    pub rows: [StatRow; 4],
    pub count: usize,
}

pub const STAT_NAMES: [&str; 4] = ["s", "r", "p_x", "p_y"];

/// Absolute deviation from identity of each parameter type.
pub fn deviations(p: &ThetaRecord) -> [f64; 4] {
    [(p.s - 1.0).abs(), p.r.abs(), p.tx.abs(), p.ty.abs()]
}

pub fn stats(records: &[ThetaRecord]) -> Result<StatsTable> {
    if records.is_empty() {
        return Err(Error::contract("statistics need at least one record"));
    }
    let n = records.len() as f64;
    let mut sums = [0.0; 4];
    for r in records {
        for (s, d) in sums.iter_mut().zip(deviations(r)) {
            *s += d;
        }
    }
    let means = sums.map(|s| s / n);
    let mut sq = [0.0; 4];
    for r in records {
        for ((q, d), m) in sq.iter_mut().zip(deviations(r)).zip(means) {
            *q += (d - m) * (d - m);
        }
    }
    let rows = std::array::from_fn(|i| StatRow {
        name: STAT_NAMES[i],
        mean: means[i],
        std: (sq[i] / n).sqrt(),
    });
    Ok(StatsTable {
        rows,
        count: records.len(),
    })
}

pub const BINS: usize = 61;

/// Signed deviation from identity: `s - 1`, `r`, `t_x`, `t_y`.
pub fn signed_deviations(p: &ThetaRecord) -> [f64; 4] {
    [p.s - 1.0, p.r, p.tx, p.ty]
}

pub const DEVIATION_NAMES: [&str; 4] = ["s-1", "r", "tx", "ty"];

/// Symmetric half-widths `[-h, h]` of the histogram axes. The joint
/// translation histogram uses one half-width for both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRanges {
    pub half_widths: [f64; 4],
    pub translation: f64,
}

/// Smallest half-width used when every value is zero.
pub const MIN_HALF_WIDTH: f64 = 1e-3;

/// Ranges covering the largest span of any model in the report.
pub fn shared_ranges(models: &[&[ThetaRecord]]) -> AxisRanges {
    let mut half = [MIN_HALF_WIDTH; 4];
    for recs in models {
        for r in recs.iter() {
            for (h, d) in half.iter_mut().zip(signed_deviations(r)) {
                *h = h.max(d.abs());
            }
        }
    }
    AxisRanges {
        half_widths: half,
        translation: half[2].max(half[3]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / self.counts.len() as f64
    }
}

/// `BINS x BINS` counts of `(t_x, t_y)`, `counts[ix * BINS + iy]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distributions {
    pub marginals: [Histogram; 4],
    pub joint: JointHistogram,
}

/// Bin of `v` on `[lo, hi]`; values outside land in the edge bins.
pub fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let f = ((v - lo) / (hi - lo) * bins as f64).floor();
    (f.max(0.0) as usize).min(bins - 1)
}

pub fn distributions(records: &[ThetaRecord], ranges: &AxisRanges) -> Result<Distributions> {
    if records.is_empty() {
        return Err(Error::contract("distributions need at least one record"));
    }
    let marginals = std::array::from_fn(|i| {
        let h = ranges.half_widths[i];
        let mut counts = vec![0; BINS];
        for r in records {
            counts[bin_index(signed_deviations(r)[i], -h, h, BINS)] += 1;
        }
        Histogram {
            name: DEVIATION_NAMES[i],
            lo: -h,
            hi: h,
            counts,
        }
    });
    let h = ranges.translation;
    let mut joint = vec![0; BINS * BINS];
    for r in records {
        joint[bin_index(r.tx, -h, h, BINS) * BINS + bin_index(r.ty, -h, h, BINS)] += 1;
    }
    Ok(Distributions {
        marginals,
        joint: JointHistogram {
            lo: -h,
            hi: h,
            counts: joint,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn rec(s: f64, r: f64, tx: f64, ty: f64) -> ThetaRecord {
        ThetaRecord {
            layer: "conv1".into(),
            filter: 0,
            step: 1,
            s,
            r,
            tx,
            ty,
        }
    }

    #[test]
    fn display_conversions() {
        let d = to_display(&rec(1.0, 0.0, 0.1, 0.0), 28, 28);
        assert!((d.px_x - 2.8).abs() < 1e-12);
        let d = to_display(&rec(1.0, 5f64.to_radians(), 0.0, 0.0), 28, 28);
        assert!((d.rotation_deg + 5.0).abs() < 1e-12);
        let d = to_display(&rec(1.0, 0.0, 0.0, 0.0), 7, 7);
        assert_eq!((d.scale, d.rotation_deg, d.px_x, d.px_y), (1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn identity_trajectory_stays_home() {
        let poses = trajectory(&[AffineParams::IDENTITY; 3]).unwrap();
        assert_eq!(poses.len(), 4);
        for p in poses {
            assert_eq!((p.x, p.y, p.rotation, p.scale), (0.0, 0.0, 0.0, 1.0));
        }
        assert!(trajectory(&[]).is_err());
    }

    #[test]
    fn constant_translation_walks_in_a_line() {
        let step = AffineParams::new(1.0, 0.0, 0.1, 0.0).unwrap();
        let xs: Vec<f64> = trajectory(&[step; 4]).unwrap().iter().map(|p| p.x).collect();
        for (x, want) in xs.iter().zip([0.0, 0.1, 0.2, 0.3, 0.4]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turns_rotate_the_second_displacement() {
        let step = AffineParams::new(1.0, FRAC_PI_2, 0.1, 0.0).unwrap();
        let p = trajectory(&[step; 2]).unwrap();
        let d1 = (p[1].x - p[0].x, p[1].y - p[0].y);
        let d2 = (p[2].x - p[1].x, p[2].y - p[1].y);
        // d2 = R(90°) d1
        assert!((d2.0 + d1.1).abs() < 1e-12 && (d2.1 - d1.0).abs() < 1e-12);
        assert!((p[2].rotation - 2.0 * FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn stats_of_two_scales() {
        let t = stats(&[rec(1.01, 0.0, 0.0, 0.0), rec(1.03, 0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(t.rows.map(|r| r.name), ["s", "r", "p_x", "p_y"]);
        assert!((t.rows[0].mean_e3() - 20.0).abs() < 1e-9);
        assert!((t.rows[0].std_e3() - 10.0).abs() < 1e-9);
        assert!(stats(&[]).is_err());
        let zero = stats(&vec![rec(1.0, 0.0, 0.0, 0.0); 3]).unwrap();
        assert!(zero.rows.iter().all(|r| r.mean == 0.0 && r.std == 0.0));
    }

    #[test]
    fn identity_mass_sits_in_the_centre_bin() {
        let recs = vec![rec(1.0, 0.0, 0.0, 0.0); 5];
        let d = distributions(&recs, &shared_ranges(&[&recs])).unwrap();
        for h in &d.marginals {
            assert_eq!(h.counts[BINS / 2], 5);
            assert_eq!(h.counts.iter().sum::<usize>(), 5);
        }
        assert_eq!(d.joint.counts[(BINS / 2) * BINS + BINS / 2], 5);
    }

    #[test]
    fn bin_counts_match_enumeration() {
        // three values at the centre of every t_x bin on [-0.61, 0.61]
        let width = 1.22 / BINS as f64;
        let recs: Vec<_> = (0..BINS)
            .flat_map(|i| {
                let c = -0.61 + (i as f64 + 0.5) * width;
                vec![rec(1.0, 0.0, c, 0.0); 3]
            })
            .collect();
        let ranges = AxisRanges {
            half_widths: [0.61; 4],
            translation: 0.61,
        };
        let d = distributions(&recs, &ranges).unwrap();
        assert!(d.marginals[2].counts.iter().all(|&c| c == 3));
        assert_eq!(d.marginals[3].counts[BINS / 2], 3 * BINS);
        for i in 0..BINS {
            assert_eq!(d.joint.counts[i * BINS + BINS / 2], 3);
        }
    }

    #[test]
    fn ranges_are_shared_across_models() {
        let a = vec![rec(1.2, 0.1, 0.05, -0.3)];
        let b = vec![rec(0.9, -0.4, 0.2, 0.0)];
        let ranges = shared_ranges(&[&a, &b]);
        let (da, db) = (
            distributions(&a, &ranges).unwrap(),
            distributions(&b, &ranges).unwrap(),
        );
        for (ha, hb) in da.marginals.iter().zip(&db.marginals) {
            assert_eq!((ha.lo, ha.hi), (hb.lo, hb.hi));
        }
        assert_eq!((da.joint.lo, da.joint.hi), (db.joint.lo, db.joint.hi));
        assert!((ranges.half_widths[0] - 0.2).abs() < 1e-12);
        assert_eq!(ranges.translation, 0.3);
    }

    proptest! {
        #[test]
        fn display_round_trip(
            s in 0.5f64..2.0, r in -3.0f64..3.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0,
            w in 1usize..64, h in 1usize..64,
        ) {
            let p = rec(s, r, tx, ty);
            let back = from_display(&to_display(&p, w, h), w, h);
            prop_assert!((back.s - s).abs() <= 1e-12);
            prop_assert!((back.r - r).abs() <= 1e-12);
            prop_assert!((back.tx - tx).abs() <= 1e-12);
            prop_assert!((back.ty - ty).abs() <= 1e-12);
        }

        #[test]
        fn concatenated_trajectories_compose(
            a in prop::collection::vec((0.8f64..1.2, -0.5f64..0.5, -0.3f64..0.3, -0.3f64..0.3), 1..5),
            b in prop::collection::vec((0.8f64..1.2, -0.5f64..0.5, -0.3f64..0.3, -0.3f64..0.3), 1..5),
        ) {
            let p = |v: &[(f64, f64, f64, f64)]| -> Vec<AffineParams> {
                v.iter().map(|&(s, r, x, y)| AffineParams::new(s, r, x, y).unwrap()).collect()
            };
            let (pa, pb) = (p(&a), p(&b));
            let whole = trajectory(&[pa.clone(), pb.clone()].concat()).unwrap();
            let ta = trajectory(&pa).unwrap();
            let tb = trajectory(&pb).unwrap();
            let end_a = ta.last().unwrap();
            for (k, pose) in tb.iter().enumerate() {
                let got = whole[pa.len() + k];
                let m = end_a.matrix.then(&pose.matrix);
                let (x, y) = m.translation();
                prop_assert!((got.x - x).abs() <= 1e-12 && (got.y - y).abs() <= 1e-12);
                prop_assert!((got.scale - end_a.scale * pose.scale).abs() <= 1e-12);
                prop_assert!((got.rotation - (end_a.rotation + pose.rotation)).abs() <= 1e-12);
            }
        }

        #[test]
        fn stats_ignore_record_order(
            vals in prop::collection::vec((0.8f64..1.2, -0.5f64..0.5, -0.3f64..0.3, -0.3f64..0.3), 1..30),
            rot in 0usize..30,
        ) {
            let recs: Vec<_> = vals.iter().map(|&(s, r, x, y)| rec(s, r, x, y)).collect();
            let mut shuffled = recs.clone();
            shuffled.rotate_left(rot % recs.len());
            shuffled.reverse();
            let (a, b) = (stats(&recs).unwrap(), stats(&shuffled).unwrap());
            for (x, y) in a.rows.iter().zip(&b.rows) {
                prop_assert!((x.mean - y.mean).abs() <= 1e-12 * x.mean.max(1.0));
                prop_assert!((x.std - y.std).abs() <= 1e-12 * x.std.max(1.0));
            }
        }
    }
}
