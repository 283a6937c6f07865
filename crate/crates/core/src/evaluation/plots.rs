//! Minimal SVG charts for experiment artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::surfaces::GridSpec;

use super::{ExperimentReport, Histogram, TraversalTable, Varied};

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12"><rect width="100%" height="100%" fill="white"/><text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (f.x0 + t * (f.x1 - f.x0), f.y0 + t * (f.y1 - f.y0));
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            f.px(xv),
            H - PAD + 16.0,
            tick(xv),
            PAD - 6.0,
            f.py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text><text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        W / 2.0,
        H - 14.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// Bar chart of a `log10|e|` histogram.
pub fn histogram_svg(title: &str, h: &Histogram) -> String {
    let edges = h.bin_edges();
    let top = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let f = Frame {
        x0: h.min,
        x1: h.max,
        y0: 0.0,
        y1: top * 1.05,
    };
    let mut out = String::new();
    open(&mut out, title);
    for (k, &c) in h.counts.iter().enumerate() {
        let (xa, xb) = (f.px(edges[k]), f.px(edges[k + 1]));
        let (ya, yb) = (f.py(c as f64), f.py(0.0));
        let _ = write!(
            out,
            r#"<rect x="{xa:.1}" y="{ya:.1}" width="{:.1}" height="{:.1}" fill="{}" stroke="white"/>"#,
            (xb - xa).max(0.0),
            (yb - ya).max(0.0),
            PALETTE[0]
        );
    }
    axes(&mut out, &f, "log10 |error|", "count");
    out.push_str("</svg>");
    out
}

/// Polyline chart with a legend.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let f = Frame::new(pts.clone().map(|p| p.0), pts.map(|p| p.1));
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, x_label, y_label);
    for (k, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/><text x="{}" y="{}" fill="{colour}">{}</text>"#,
            path.join(" "),
            W - PAD + 4.0 - 120.0,
            PAD + 14.0 * k as f64,
            escape(name)
        );
    }
    out.push_str("</svg>");
    out
}

/// Heatmap of a surface: log-moneyness across, maturity down.
pub fn heatmap_svg(title: &str, grid: &GridSpec, values: &[f64]) -> String {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (n_m, n_t) = (grid.n_m(), grid.n_tau());
    let (cw, ch) = ((W - 2.0 * PAD) / n_m as f64, (H - 2.0 * PAD) / n_t as f64);
    let mut out = String::new();
    open(&mut out, title);
    for j in 0..n_t {
        for i in 0..n_m {
            let t = ((values[grid.flat_index(i, j)] - lo) / span).clamp(0.0, 1.0);
            let (r, g, b) = ((255.0 * t) as u8, (80.0 + 100.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8);
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},{g},{b})"/>"#,
                PAD + i as f64 * cw,
                PAD + j as f64 * ch,
                cw + 0.3,
                ch + 0.3
            );
        }
    }
    let m = grid.m_values();
    let tau = grid.tau_values();
    let _ = write!(
        out,
        r#"<text x="{PAD}" y="{}" >m {:.2}</text><text x="{}" y="{}" text-anchor="end">m {:.2}</text><text x="{}" y="{}" text-anchor="end">tau {:.2}</text><text x="{}" y="{}" text-anchor="end">tau {:.2}</text><text x="{}" y="{}" text-anchor="end">vol {} .. {}</text>"#,
        H - PAD + 16.0,
        m[0],
        W - PAD,
        H - PAD + 16.0,
        m[m.len() - 1],
        PAD - 4.0,
        PAD + 10.0,
        tau[0],
        PAD - 4.0,
        H - PAD,
        tau[tau.len() - 1],
        W - PAD,
        H - 14.0,
        tick(lo),
        tick(hi)
    );
    out.push_str("</svg>");
    out
}

/// Smile slices at the first, middle and last maturity for every row of a traversal.
pub fn traversal_slices_svg(table: &TraversalTable, grid: &GridSpec) -> Vec<(String, String)> {
    let n_t = grid.n_tau();
    let picks = [0, n_t / 2, n_t - 1];
    let label = match table.varied {
        Varied::Latent(i) => format!("z{}", i + 1),
        Varied::Feature(f) => f.to_string(),
    };
    picks
        .iter()
        .map(|&j| {
            let series: Vec<(String, Vec<(f64, f64)>)> = table
                .rows
                .iter()
                .zip(&table.surfaces)
                .map(|(row, s)| {
                    let pts = (0..grid.n_m())
                        .map(|i| (grid.m_values()[i], s[grid.flat_index(i, j)]))
                        .collect();
                    (format!("{label} = {}", tick(row.value)), pts)
                })
                .collect();
            let tau = grid.tau_values()[j];
            (
                format!("traversal_{label}_tau{j}.svg"),
                line_plot_svg(&format!("{label} sweep, tau = {tau:.2}"), "log-moneyness", "implied vol", &series),
            )
        })
        .collect()
}

/// Writes every chart derivable from `report` into `dir`.
pub fn write_report_plots(report: &ExperimentReport, grid: &GridSpec, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, String)> = Vec::new();
    for e in &report.errors {
        files.push((
            format!("hist_{}.svg", e.feature),
            histogram_svg(&format!("{} control error (n = {})", e.feature, report.n), &e.histogram),
        ));
    }
    for t in &report.traversals {
        files.extend(traversal_slices_svg(t, grid));
        let label = match t.varied {
            Varied::Latent(i) => format!("z{}", i + 1),
            Varied::Feature(f) => f.to_string(),
        };
        let series = t
            .features
            .iter()
            .map(|&f| (f.to_string(), t.values().into_iter().zip(t.column(f)).collect()))
            .collect::<Vec<_>>();
        files.push((
            format!("traversal_{label}_features.svg"),
            line_plot_svg(&format!("extracted features vs {label}"), &label, "feature value", &series),
        ));
        if let Some(s) = t.surfaces.get(t.surfaces.len() / 2) {
            files.push((format!("traversal_{label}_heatmap.svg"), heatmap_svg(&format!("{label} midpoint surface"), grid, s)));
        }
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let h = Histogram::log10_abs(&[1e-3, 2e-3, 1e-5]);
        let svg = histogram_svg("a < b", &h);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<rect").count(), 1 + 25);
        let grid = GridSpec::default();
        let values: Vec<f64> = (0..grid.len()).map(|k| 0.2 + 1e-4 * k as f64).collect();
        let svg = heatmap_svg("s", &grid, &values);
        assert_eq!(svg.matches("<rect").count(), 1 + grid.len());
        let svg = line_plot_svg("l", "x", "y", &[("flat".into(), vec![(0.0, 1.0), (1.0, 1.0)])]);
        assert!(svg.contains("<polyline"));
    }
}
