//! Deterministic SVG figures: 1-D histograms, 2-D scatter plots and
//! trajectory fans. Coordinates are printed with three decimals and nothing
//! time-dependent is emitted, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::sampler::{read_samples_csv, read_trajectory_csv};

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 44.0;
const MARGIN_R: f64 = 12.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 30.0;
const TITLE_H: f64 = 30.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotKind {
    Hist1d,
    Scatter2d,
    Trajectories,
}

/// One figure: a row of panels, one per input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub panel_titles: Vec<String>,
    #[serde(default)]
    pub title: String,
    pub output: PathBuf,
    /// Density drawn behind every hist1d panel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<GaussianMixture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_range: Option<[f64; 2]>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    60
}

impl PlotSpec {
    pub fn new(kind: PlotKind, inputs: Vec<PathBuf>, output: PathBuf) -> Self {
        Self {
            kind,
            inputs,
            panel_titles: Vec::new(),
            title: String::new(),
            output,
            overlay: None,
            x_range: None,
            y_range: None,
            bins: default_bins(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, r) in [("x_range", self.x_range), ("y_range", self.y_range)] {
            if let Some([lo, hi]) = r {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::config(key, format!("[{lo}, {hi}] is not a finite increasing range")));
                }
            }
        }
        if self.bins == 0 {
            return Err(Error::config("bins", "must be positive"));
        }
        if !self.panel_titles.is_empty() && self.panel_titles.len() != self.inputs.len() {
            return Err(Error::config(
                "panel_titles",
                format!("{} titles for {} inputs", self.panel_titles.len(), self.inputs.len()),
            ));
        }
        if let (PlotKind::Hist1d, Some(o)) = (self.kind, &self.overlay) {
            if o.dim() != 1 {
                return Err(Error::config("overlay", "hist1d overlays must be 1-D"));
            }
        }
        Ok(())
    }

    /// Resolves relative input and output paths against `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.inputs.iter_mut().for_each(fix);
        fix(&mut self.output);
        self
    }
}

/// Bin densities over `[lo, hi)`, normalized by the number of in-range values
/// so that `Σ density · width = 1` whenever any value falls in range.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v < hi {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        } else if v == hi {
            counts[bins - 1] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; bins];
    }
    counts.iter().map(|c| *c as f64 / (total as f64 * width)).collect()
}

enum PanelData {
    Hist(Vec<f64>),
    Scatter(Vec<[f64; 2]>, Vec<usize>),
    Traj(Vec<Vec<(f64, f64)>>),
}

struct Frame {
    x0: f64,
    y0: f64,
    xr: [f64; 2],
    yr: [f64; 2],
}

impl Frame {
    fn w() -> f64 {
        PANEL_W - MARGIN_L - MARGIN_R
    }

    fn h() -> f64 {
        PANEL_H - MARGIN_T - MARGIN_B
    }

    fn px(&self, x: f64) -> f64 {
        let f = ((x - self.xr[0]) / (self.xr[1] - self.xr[0])).clamp(0.0, 1.0);
        self.x0 + MARGIN_L + f * Self::w()
    }

    fn py(&self, y: f64) -> f64 {
        let f = ((y - self.yr[0]) / (self.yr[1] - self.yr[0])).clamp(0.0, 1.0);
        self.y0 + MARGIN_T + (1.0 - f) * Self::h()
    }
}

fn pad_range(lo: f64, hi: f64) -> [f64; 2] {
    if !(lo.is_finite() && hi.is_finite()) {
        return [-1.0, 1.0];
    }
    if hi - lo < 1e-9 {
        return [lo - 1.0, hi + 1.0];
    }
    let p = 0.05 * (hi - lo);
    [lo - p, hi + p]
}

fn min_max(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn load(spec: &PlotSpec) -> Result<Vec<PanelData>> {
    spec.inputs
        .iter()
        .map(|p| match spec.kind {
            PlotKind::Hist1d => {
                let b = read_samples_csv(p)?;
                if b.dim() != 1 {
                    return Err(Error::Shape(format!("{} is not 1-D", p.display())));
                }
                Ok(PanelData::Hist(b.points().to_vec()))
            }
            PlotKind::Scatter2d => {
                let b = read_samples_csv(p)?;
                if b.dim() != 2 {
                    return Err(Error::Shape(format!("{} is not 2-D", p.display())));
                }
                let pts = (0..b.len()).map(|i| [b.point(i)[0], b.point(i)[1]]).collect();
                Ok(PanelData::Scatter(pts, b.labels().to_vec()))
            }
            PlotKind::Trajectories => {
                let (_, rows) = read_trajectory_csv(p)?;
                let mut chains: Vec<Vec<(f64, f64)>> = Vec::new();
                for (chain, t, x) in rows {
                    if chains.len() <= chain {
                        chains.resize(chain + 1, Vec::new());
                    }
                    chains[chain].push((x[0], t as f64));
                }
                Ok(PanelData::Traj(chains))
            }
        })
        .collect()
}

/// Renders the figure described by `spec` to an SVG document.
pub fn render(spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let data = load(spec)?;
    Ok(render_panels(spec, &data))
}

pub fn render_to_file(spec: &PlotSpec) -> Result<()> {
    let svg = render(spec)?;
    std::fs::write(&spec.output, svg).map_err(|e| Error::io(&spec.output, e))
}

fn shared_ranges(spec: &PlotSpec, data: &[PanelData]) -> ([f64; 2], [f64; 2]) {
    let xs = data.iter().flat_map(|d| -> Box<dyn Iterator<Item = f64> + '_> {
        match d {
            PanelData::Hist(v) => Box::new(v.iter().copied()),
            PanelData::Scatter(p, _) => Box::new(p.iter().map(|q| q[0])),
            PanelData::Traj(c) => Box::new(c.iter().flatten().map(|q| q.0)),
        }
    });
    let (xlo, xhi) = min_max(xs);
    let xr = spec.x_range.unwrap_or_else(|| pad_range(xlo, xhi));
    let yr = match spec.y_range {
        Some(r) => r,
        None => match spec.kind {
            PlotKind::Scatter2d => {
                let ys = data.iter().flat_map(|d| match d {
                    PanelData::Scatter(p, _) => p.iter().map(|q| q[1]).collect::<Vec<_>>(),
                    _ => Vec::new(),
                });
                let (lo, hi) = min_max(ys);
                pad_range(lo, hi)
            }
            PlotKind::Trajectories => {
                let (lo, hi) = min_max(data.iter().flat_map(|d| match d {
                    PanelData::Traj(c) => c.iter().flatten().map(|q| q.1).collect::<Vec<_>>(),
                    _ => Vec::new(),
                }));
                if lo.is_finite() {
                    [lo, hi.max(lo + 1.0)]
                } else {
                    [0.0, 1.0]
                }
            }
            PlotKind::Hist1d => {
                let mut top: f64 = 0.0;
                for d in data {
                    if let PanelData::Hist(v) = d {
                        for h in histogram(v, xr[0], xr[1], spec.bins) {
                            top = top.max(h);
                        }
                    }
                }
                if let Some(g) = &spec.overlay {
                    for i in 0..=400 {
                        let x = xr[0] + (xr[1] - xr[0]) * i as f64 / 400.0;
                        top = top.max(g.density(&[x]));
                    }
                }
                [0.0, if top > 0.0 { top * 1.1 } else { 1.0 }]
            }
        },
    };
    (xr, yr)
}

fn ticks(r: [f64; 2]) -> Vec<f64> {
    (0..5).map(|i| r[0] + (r[1] - r[0]) * i as f64 / 4.0).collect()
}

fn render_panels(spec: &PlotSpec, data: &[PanelData]) -> String {
    let n = data.len().max(1);
    let width = PANEL_W * n as f64;
    let height = PANEL_H + TITLE_H;
    let (xr, yr) = shared_ranges(spec, data);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(&spec.title)
    );
    for (p, d) in data.iter().enumerate() {
        let f = Frame {
            x0: p as f64 * PANEL_W,
            y0: TITLE_H,
            xr,
            yr,
        };
        let _ = writeln!(s, r#"<g class="panel" id="panel-{p}">"#);
        let title = spec.panel_titles.get(p).cloned().unwrap_or_default();
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
            f.x0 + MARGIN_L + Frame::w() / 2.0,
            f.y0 + 16.0,
            escape(&title)
        );
        match d {
            PanelData::Hist(v) => {
                if let Some(g) = &spec.overlay {
                    let mut path = format!("M{:.3},{:.3}", f.px(xr[0]), f.py(0.0));
                    for i in 0..=400 {
                        let x = xr[0] + (xr[1] - xr[0]) * i as f64 / 400.0;
                        let _ = write!(path, " L{:.3},{:.3}", f.px(x), f.py(g.density(&[x])));
                    }
                    let _ = write!(path, " L{:.3},{:.3} Z", f.px(xr[1]), f.py(0.0));
                    let _ = writeln!(
                        s,
                        r##"<path class="overlay" d="{path}" fill="#7f7f7f" fill-opacity="0.35" stroke="#555555" stroke-width="0.8"/>"##
                    );
                }
                let dens = histogram(v, xr[0], xr[1], spec.bins);
                let bw = (xr[1] - xr[0]) / spec.bins as f64;
                for (i, h) in dens.iter().enumerate() {
                    if *h <= 0.0 {
                        continue;
                    }
                    let (l, r) = (f.px(xr[0] + i as f64 * bw), f.px(xr[0] + (i + 1) as f64 * bw));
                    let (top, base) = (f.py(*h), f.py(0.0));
                    let _ = writeln!(
                        s,
                        r#"<rect class="bar" x="{l:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="{}" fill-opacity="0.6"/>"#,
                        r - l,
                        base - top,
                        COLORS[p % COLORS.len()]
                    );
                }
            }
            PanelData::Scatter(pts, labels) => {
                for (q, l) in pts.iter().zip(labels) {
                    let _ = writeln!(
                        s,
                        r#"<circle class="pt" cx="{:.3}" cy="{:.3}" r="1.2" fill="{}" fill-opacity="0.5"/>"#,
                        f.px(q[0]),
                        f.py(q[1]),
                        COLORS[l % COLORS.len()]
                    );
                }
            }
            PanelData::Traj(chains) => {
                for (c, chain) in chains.iter().enumerate() {
                    let pts: Vec<String> = chain.iter().map(|(x, t)| format!("{:.3},{:.3}", f.px(*x), f.py(*t))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline class="traj" points="{}" fill="none" stroke="{}" stroke-opacity="0.6" stroke-width="0.8"/>"#,
                        pts.join(" "),
                        COLORS[c % COLORS.len()]
                    );
                }
            }
        }
        // Axes drawn last so they stay on top.
        let _ = writeln!(
            s,
            r#"<rect class="axes" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="black" stroke-width="1"/>"#,
            f.x0 + MARGIN_L,
            f.y0 + MARGIN_T,
            Frame::w(),
            Frame::h()
        );
        for x in ticks(xr) {
            let _ = writeln!(
                s,
                r#"<text class="tick" x="{:.3}" y="{:.3}" text-anchor="middle">{x:.2}</text>"#,
                f.px(x),
                f.y0 + PANEL_H - MARGIN_B + 12.0
            );
        }
        for y in ticks(yr) {
            let _ = writeln!(
                s,
                r#"<text class="tick" x="{:.3}" y="{:.3}" text-anchor="end">{y:.2}</text>"#,
                f.x0 + MARGIN_L - 4.0,
                f.py(y) + 3.0
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
