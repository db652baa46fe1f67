//! CSV tables and SVG figures. Every figure is drawn from rows read back
//! from its CSV, so a plot never shows numbers the table does not hold.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::probe::RecoveryRow;
use super::{Distributions, Pose, StatsTable, BINS};
use crate::error::{Error, Result};

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub layer: String,
    pub filter: usize,
    /// 0 is the starting pose.
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub rotation: f64,
    pub scale: f64,
}

pub fn trajectory_rows(layer: &str, filter: usize, poses: &[Pose]) -> Vec<TrajectoryRow> {
    poses
        .iter()
        .enumerate()
        .map(|(step, p)| TrajectoryRow {
            layer: layer.to_string(),
            filter,
            step,
            x: p.x,
            y: p.y,
            rotation: p.rotation,
            scale: p.scale,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub model: String,
    pub param: String,
    pub mean_e3: f64,
    pub std_e3: f64,
    pub count: usize,
    /// Always `population`.
    pub std_kind: String,
}

pub fn stats_rows(model: &str, table: &StatsTable) -> Vec<StatsRow> {
    table
        .rows
        .iter()
        .map(|r| StatsRow {
            model: model.to_string(),
            param: r.name.to_string(),
            mean_e3: r.mean_e3(),
            std_e3: r.std_e3(),
            count: table.count,
            std_kind: "population".into(),
        })
        .collect()
}

/// Fixed-width table: one line per parameter type, `mean ± std` per model,
/// both in units of 1e-3.
pub fn stats_text(rows: &[StatsRow]) -> String {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut out = format!("{:<6}", "x1e-3");
    for m in &models {
        write!(out, " {m:>22}").expect("string write");
    }
    out.push('\n');
    for param in super::STAT_NAMES {
        write!(out, "{param:<6}").expect("string write");
        for m in &models {
            match rows.iter().find(|r| r.model == *m && r.param == param) {
                Some(r) => write!(out, " {:>10.2} ± {:<9.2}", r.mean_e3, r.std_e3),
                None => write!(out, " {:>22}", "-"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub model: String,
    pub param: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub model: String,
    pub ix: usize,
    pub iy: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub fn histogram_rows(model: &str, d: &Distributions) -> (Vec<HistogramRow>, Vec<JointRow>) {
    let mut marg = Vec::new();
    for h in &d.marginals {
        for (bin, &count) in h.counts.iter().enumerate() {
            marg.push(HistogramRow {
                model: model.to_string(),
                param: h.name.to_string(),
                bin,
                lo: h.lo,
                hi: h.hi,
                count,
            });
        }
    }
    let mut joint = Vec::new();
    for ix in 0..BINS {
        for iy in 0..BINS {
            joint.push(JointRow {
                model: model.to_string(),
                ix,
                iy,
                lo: d.joint.lo,
                hi: d.joint.hi,
                count: d.joint.counts[ix * BINS + iy],
            });
        }
    }
    (marg, joint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCsvRow {
    pub class: String,
    pub channel: usize,
    pub weight: f64,
    pub tx: f64,
    pub ty: f64,
    pub agrees: bool,
    pub agreement: f64,
}

pub fn recovery_rows(rows: &[RecoveryRow]) -> Vec<RecoveryCsvRow> {
    rows.iter()
        .flat_map(|r| {
            r.channels.iter().map(|c| RecoveryCsvRow {
                class: r.class.clone(),
                channel: c.channel,
                weight: c.weight,
                tx: c.tx,
                ty: c.ty,
                agrees: c.agrees,
                agreement: r.agreement,
            })
        })
        .collect()
}

/// A value on a regular 2D grid, used for saliency maps and optimized frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelRow {
    pub panel: String,
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Rows of a `[W, H]` plane.
pub fn pixel_rows(panel: &str, width: usize, height: usize, values: &[f64]) -> Vec<PixelRow> {
    (0..width)
        .flat_map(|x| {
            (0..height).map(move |y| PixelRow {
                panel: panel.to_string(),
                x,
                y,
                value: values[x * height + y],
            })
        })
        .collect()
}

/// A point of a named curve: loss per epoch, activation per ascent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

const PANEL: f64 = 160.0;
const GAP: f64 = 40.0;
const MARGIN: f64 = 30.0;

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self {
            body: String::new(),
            width,
            height,
        }
    }

    fn raw(&mut self, s: impl AsRef<str>) {
        self.body.push_str(s.as_ref());
        self.body.push('\n');
    }

    fn text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let s = s.replace('&', "&amp;").replace('<', "&lt;");
        self.raw(format!(
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" font-family="sans-serif">{s}</text>"#
        ));
    }

    fn frame(&mut self, x: f64, y: f64, w: f64, h: f64) {
        self.raw(format!(
            r##"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#888"/>"##
        ));
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height,
        )
    }
}

fn grid_size(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (cols, n.div_ceil(cols).max(1))
}

/// One square panel per filter, path from blue start marker to red end
/// marker, with the same symmetric range on both axes of every panel.
pub fn trajectory_svg(title: &str, rows: &[TrajectoryRow]) -> Result<String> {
    let mut filters: Vec<(&str, usize)> = Vec::new();
    for r in rows {
        if !filters.contains(&(r.layer.as_str(), r.filter)) {
            filters.push((&r.layer, r.filter));
        }
    }
    if filters.is_empty() {
        return Err(Error::contract("no trajectory rows to plot"));
    }
    let half = rows.iter().fold(1e-6f64, |m, r| m.max(r.x.abs()).max(r.y.abs())) * 1.1;
    let (cols, lines) = grid_size(filters.len());
    let mut svg = Svg::new(
        MARGIN * 2.0 + cols as f64 * (PANEL + GAP),
        MARGIN * 2.0 + lines as f64 * (PANEL + GAP),
    );
    svg.text(MARGIN, MARGIN - 10.0, 14.0, title);
    for (i, &(layer, filter)) in filters.iter().enumerate() {
        let ox = MARGIN + (i % cols) as f64 * (PANEL + GAP);
        let oy = MARGIN + (i / cols) as f64 * (PANEL + GAP);
        let to_px = |x: f64, y: f64| {
            (
                ox + (x + half) / (2.0 * half) * PANEL,
                oy + (y + half) / (2.0 * half) * PANEL,
            )
        };
        let mut path: Vec<&TrajectoryRow> = rows
            .iter()
            .filter(|r| r.layer == layer && r.filter == filter)
            .collect();
        path.sort_by_key(|r| r.step);
        svg.raw(format!(
            r#"<g class="panel" data-layer="{layer}" data-filter="{filter}" data-x-range="{:.6e}" data-y-range="{:.6e}">"#,
            2.0 * half,
            2.0 * half
        ));
        svg.frame(ox, oy, PANEL, PANEL);
        let (cx, cy) = to_px(0.0, 0.0);
        svg.raw(format!(
            r##"<line x1="{ox:.1}" y1="{cy:.1}" x2="{:.1}" y2="{cy:.1}" stroke="#ddd"/><line x1="{cx:.1}" y1="{oy:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            ox + PANEL,
            oy + PANEL
        ));
        let pts: Vec<String> = path
            .iter()
            .map(|r| {
                let (x, y) = to_px(r.x, r.y);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.raw(format!(
            r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
            pts.join(" ")
        ));
        if let (Some(first), Some(last)) = (path.first(), path.last()) {
            let (sx, sy) = to_px(first.x, first.y);
            let (ex, ey) = to_px(last.x, last.y);
            svg.raw(format!(
                r#"<circle class="start" cx="{sx:.2}" cy="{sy:.2}" r="4" fill="blue"/>"#
            ));
            svg.raw(format!(
                r#"<circle class="end" cx="{ex:.2}" cy="{ey:.2}" r="4" fill="red"/>"#
            ));
        }
        svg.text(ox, oy + PANEL + 14.0, 11.0, &format!("{layer} #{filter}"));
        svg.raw("</g>");
    }
    Ok(svg.finish())
}

/// Marginal histograms, one row of panels per model and one column per
/// parameter. Panels in a column share both axes; differing bin ranges for
/// one parameter are rejected.
pub fn histogram_svg(rows: &[HistogramRow]) -> Result<String> {
    let mut models: Vec<&str> = Vec::new();
    let mut params: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !params.contains(&r.param.as_str()) {
            params.push(&r.param);
        }
    }
    if rows.is_empty() {
        return Err(Error::contract("no histogram rows to plot"));
    }
    let mut svg = Svg::new(
        MARGIN * 2.0 + params.len() as f64 * (PANEL + GAP),
        MARGIN * 2.0 + models.len() as f64 * (PANEL + GAP),
    );
    for (c, param) in params.iter().enumerate() {
        let col: Vec<&HistogramRow> = rows.iter().filter(|r| r.param == *param).collect();
        let (lo, hi) = (col[0].lo, col[0].hi);
        if col.iter().any(|r| r.lo != lo || r.hi != hi) {
            return Err(Error::contract(format!("models disagree on the {param} axis")));
        }
        let ymax = col.iter().map(|r| r.count).max().unwrap_or(0).max(1) as f64;
        for (m, model) in models.iter().enumerate() {
            let ox = MARGIN + c as f64 * (PANEL + GAP);
            let oy = MARGIN + m as f64 * (PANEL + GAP);
            let mut bars: Vec<&&HistogramRow> = col.iter().filter(|r| r.model == *model).collect();
            bars.sort_by_key(|r| r.bin);
            let bins = bars.len().max(1) as f64;
            svg.raw(format!(
                r#"<g class="panel" data-model="{model}" data-param="{param}" data-lo="{lo:.6e}" data-hi="{hi:.6e}" data-ymax="{ymax}">"#
            ));
            svg.frame(ox, oy, PANEL, PANEL);
            for b in bars {
                let h = b.count as f64 / ymax * PANEL;
                svg.raw(format!(
                    r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4477aa"/>"##,
                    ox + b.bin as f64 / bins * PANEL,
                    oy + PANEL - h,
                    PANEL / bins
                ));
            }
            svg.text(ox, oy - 4.0, 11.0, &format!("{model} {param} [{lo:.3}, {hi:.3}]"));
            svg.raw("</g>");
        }
    }
    Ok(svg.finish())
}

/// Joint `(t_x, t_y)` heatmaps, one square panel per model, all on one
/// range for both axes.
pub fn joint_svg(rows: &[JointRow]) -> Result<String> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let Some(first) = rows.first() else {
        return Err(Error::contract("no joint histogram rows to plot"));
    };
    let (lo, hi) = (first.lo, first.hi);
    if rows.iter().any(|r| r.lo != lo || r.hi != hi) {
        return Err(Error::contract("models disagree on the translation axes"));
    }
    let bins = rows.iter().map(|r| r.ix.max(r.iy) + 1).max().unwrap_or(1) as f64;
    let cmax = rows.iter().map(|r| r.count).max().unwrap_or(0).max(1) as f64;
    let mut svg = Svg::new(
        MARGIN * 2.0 + models.len() as f64 * (PANEL + GAP),
        MARGIN * 2.0 + PANEL + GAP,
    );
    for (m, model) in models.iter().enumerate() {
        let ox = MARGIN + m as f64 * (PANEL + GAP);
        let oy = MARGIN;
        svg.raw(format!(
            r#"<g class="panel" data-model="{model}" data-x-lo="{lo:.6e}" data-x-hi="{hi:.6e}" data-y-lo="{lo:.6e}" data-y-hi="{hi:.6e}">"#
        ));
        svg.frame(ox, oy, PANEL, PANEL);
        let cell = PANEL / bins;
        for r in rows.iter().filter(|r| r.model == *model && r.count > 0) {
            let shade = 1.0 - (r.count as f64 / cmax).sqrt();
            let v = (shade * 255.0).round() as u8;
            svg.raw(format!(
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({v},{v},255)"/>"#,
                ox + r.ix as f64 * cell,
                oy + r.iy as f64 * cell
            ));
        }
        svg.text(
            ox,
            oy - 4.0,
            11.0,
            &format!("{model} tx vs ty [{lo:.3}, {hi:.3}]"),
        );
        svg.raw("</g>");
    }
    Ok(svg.finish())
}

/// Heatmaps of pixel rows, one panel per name, diverging blue/red around 0.
pub fn pixel_svg(title: &str, rows: &[PixelRow]) -> Result<String> {
    let mut panels: Vec<&str> = Vec::new();
    for r in rows {
        if !panels.contains(&r.panel.as_str()) {
            panels.push(&r.panel);
        }
    }
    if panels.is_empty() {
        return Err(Error::contract("no pixel rows to plot"));
    }
    let vmax = rows.iter().fold(1e-12f64, |m, r| m.max(r.value.abs()));
    let (cols, lines) = grid_size(panels.len());
    let mut svg = Svg::new(
        MARGIN * 2.0 + cols as f64 * (PANEL + GAP),
        MARGIN * 2.0 + lines as f64 * (PANEL + GAP),
    );
    svg.text(MARGIN, MARGIN - 10.0, 14.0, title);
    for (i, name) in panels.iter().enumerate() {
        let ox = MARGIN + (i % cols) as f64 * (PANEL + GAP);
        let oy = MARGIN + (i / cols) as f64 * (PANEL + GAP);
        let pix: Vec<&PixelRow> = rows.iter().filter(|r| r.panel == *name).collect();
        let w = pix.iter().map(|r| r.x + 1).max().unwrap_or(1) as f64;
        let h = pix.iter().map(|r| r.y + 1).max().unwrap_or(1) as f64;
        let cell = PANEL / w.max(h);
        svg.raw(format!(r#"<g class="panel" data-name="{name}">"#));
        for r in pix {
            let v = r.value / vmax;
            let fade = ((1.0 - v.abs()) * 255.0).round() as u8;
            let fill = if v >= 0.0 {
                format!("rgb(255,{fade},{fade})")
            } else {
                format!("rgb({fade},{fade},255)")
            };
            svg.raw(format!(
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}"/>"#,
                ox + r.x as f64 * cell,
                oy + r.y as f64 * cell
            ));
        }
        svg.frame(ox, oy, w * cell, h * cell);
        svg.text(ox, oy + PANEL + 14.0, 11.0, name);
        svg.raw("</g>");
    }
    Ok(svg.finish())
}

const COLORS: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];

/// Line chart of one or more named series.
pub fn curve_svg(title: &str, x_label: &str, rows: &[CurveRow]) -> Result<String> {
    let mut series: Vec<&str> = Vec::new();
    for r in rows {
        if !series.contains(&r.series.as_str()) {
            series.push(&r.series);
        }
    }
    if rows.is_empty() {
        return Err(Error::contract("no curve rows to plot"));
    }
    let (x0, x1) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.x), b.max(r.x))
    });
    let (y0, y1) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| {
        (a.min(r.y), b.max(r.y))
    });
    let (xs, ys) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let (w, h) = (2.0 * PANEL, PANEL);
    let mut svg = Svg::new(w + 3.0 * MARGIN + 60.0, h + 3.0 * MARGIN);
    let (ox, oy) = (MARGIN + 40.0, MARGIN);
    svg.text(ox, oy - 10.0, 14.0, title);
    svg.frame(ox, oy, w, h);
    svg.text(ox, oy + h + 16.0, 10.0, &format!("{x0:.3}"));
    svg.text(ox + w - 30.0, oy + h + 16.0, 10.0, &format!("{x1:.3}"));
    svg.text(ox + w / 2.0 - 10.0, oy + h + 28.0, 11.0, x_label);
    svg.text(MARGIN - 25.0, oy + h, 10.0, &format!("{y0:.3}"));
    svg.text(MARGIN - 25.0, oy + 10.0, 10.0, &format!("{y1:.3}"));
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.series == *s)
            .map(|r| {
                format!(
                    "{:.2},{:.2}",
                    ox + (r.x - x0) / xs * w,
                    oy + h - (r.y - y0) / ys * h
                )
            })
            .collect();
        svg.raw(format!(
            r#"<polyline class="series" data-name="{s}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        ));
        svg.text(ox + w + 8.0, oy + 12.0 + 14.0 * i as f64, 10.0, s);
    }
    Ok(svg.finish())
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use crate::affine::AffineParams;

    #[test]
    fn trajectory_figure_marks_start_and_end() {
        let step = AffineParams::new(1.0, 0.1, 0.05, -0.02).unwrap();
        let mut rows = trajectory_rows("conv1", 0, &trajectory(&[step; 3]).unwrap());
        rows.extend(trajectory_rows(
            "conv1",
            1,
            &trajectory(&[AffineParams::IDENTITY; 3]).unwrap(),
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_csv(&path, &rows).unwrap();
        let back: Vec<TrajectoryRow> = read_csv(&path).unwrap();
        assert_eq!(back, rows);
        let svg = trajectory_svg("conv1", &back).unwrap();
        assert_eq!(svg.matches(r#"class="start""#).count(), 2);
        assert_eq!(svg.matches(r#"class="end""#).count(), 2);
        assert!(svg.contains(r#"fill="blue""#) && svg.contains(r#"fill="red""#));
    }

    #[test]
    fn stats_table_has_four_rows() {
        let rec = |s| ThetaRecord {
            layer: "a".into(),
            filter: 0,
            step: 1,
            s,
            r: 0.0,
            tx: 0.0,
            ty: 0.0,
        };
        let rows = stats_rows("m", &stats(&[rec(1.01), rec(1.03)]).unwrap());
        assert_eq!(
            rows.iter().map(|r| r.param.as_str()).collect::<Vec<_>>(),
            ["s", "r", "p_x", "p_y"]
        );
        let text = stats_text(&rows);
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("20.00 ± 10.00"));
    }

    #[test]
    fn histogram_panels_share_axes() {
        let rec = |tx: f64| ThetaRecord {
            layer: "a".into(),
            filter: 0,
            step: 1,
            s: 1.0,
            r: 0.0,
            tx,
            ty: -tx,
        };
        let a = vec![rec(0.1), rec(-0.2)];
        let b = vec![rec(0.4)];
        let ranges = shared_ranges(&[&a, &b]);
        let (mut marg, mut joint) = histogram_rows("a", &distributions(&a, &ranges).unwrap());
        let (m2, j2) = histogram_rows("b", &distributions(&b, &ranges).unwrap());
        marg.extend(m2);
        joint.extend(j2);
        let svg = histogram_svg(&marg).unwrap();
        let tx_panels: Vec<&str> = svg.lines().filter(|l| l.contains(r#"data-param="tx""#)).collect();
        assert_eq!(tx_panels.len(), 2);
        let range = |l: &str| {
            l.split("data-lo=")
                .nth(1)
                .unwrap()
                .split(' ')
                .take(2)
                .collect::<Vec<_>>()
                .join(" ")
        };
        assert_eq!(range(tx_panels[0]), range(tx_panels[1]));
        let jsvg = joint_svg(&joint).unwrap();
        for l in jsvg.lines().filter(|l| l.contains(r#"class="panel""#)) {
            let attr = |k: &str| {
                l.split(&format!("{k}=\""))
                    .nth(1)
                    .unwrap()
                    .split('"')
                    .next()
                    .unwrap()
                    .to_string()
            };
            assert_eq!(attr("data-x-lo"), attr("data-y-lo"));
            assert_eq!(attr("data-x-hi"), attr("data-y-hi"));
        }

        marg[0].hi *= 2.0;
        assert!(histogram_svg(&marg).is_err());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(trajectory_svg("t", &[]).is_err());
        assert!(histogram_svg(&[]).is_err());
        assert!(joint_svg(&[]).is_err());
        assert!(pixel_svg("p", &[]).is_err());
        assert!(curve_svg("c", "x", &[]).is_err());
    }

    #[test]
    fn curves_and_pixels_render() {
        let rows: Vec<CurveRow> = (0..5)
            .map(|i| CurveRow {
                series: "loss".into(),
                x: i as f64,
                y: 1.0 / (1.0 + i as f64),
            })
            .collect();
        assert!(curve_svg("loss", "epoch", &rows).unwrap().contains("polyline"));
        let px = pixel_rows("frame 0", 2, 3, &[0.0, 1.0, -1.0, 0.5, 0.2, 0.0]);
        assert_eq!(px[2].value, -1.0);
        assert_eq!((px[3].x, px[3].y), (1, 0));
        assert_eq!(pixel_svg("s", &px).unwrap().matches("<rect").count(), 1 + 6 + 1);
    }
}
