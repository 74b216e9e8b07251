//! SVG line charts of training and convergence CSVs: a mean line with a
//! shaded mean ± SD band.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Series,
}

/// Columns of a CSV file by header name. Empty cells become NaN.
pub fn read_columns(path: &Path, wanted: &[&str]) -> Result<HashMap<String, Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?
        .clone();
    let mut idx = Vec::new();
    for w in wanted {
        let i = headers
            .iter()
            .position(|h| h == *w)
            .ok_or_else(|| Error::Csv(format!("{}: missing column `{w}`", path.display())))?;
        idx.push(i);
    }
    let mut cols: HashMap<String, Vec<f64>> = wanted.iter().map(|w| (w.to_string(), Vec::new())).collect();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        for (w, &i) in wanted.iter().zip(&idx) {
            let cell = rec.get(i).unwrap_or("");
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    Error::Csv(format!("{}: row {}: column `{w}` is not a number: {cell:?}", path.display(), line + 2))
                })?
            };
            cols.get_mut(*w).expect("inserted").push(v);
        }
    }
    Ok(cols)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 80.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 60.0;

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let vals: Vec<f64> = values.filter(|v| v.is_finite() && (!log || *v > 0.0)).collect();
        let (mut lo, mut hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if vals.is_empty() {
            (lo, hi) = if log { (0.1, 10.0) } else { (0.0, 1.0) };
        }
        if log {
            let (l, h) = (lo.log10().floor(), hi.log10().ceil());
            let h = if h <= l { l + 1.0 } else { h };
            Self {
                lo: 10f64.powf(l),
                hi: 10f64.powf(h),
                log,
            }
        } else {
            if hi - lo <= 1e-12 * (1.0 + lo.abs()) {
                let pad = if lo == 0.0 { 1.0 } else { 0.5 * lo.abs() };
                lo -= pad;
                hi += pad;
            }
            Self { lo, hi, log }
        }
    }

    fn frac(&self, v: f64) -> f64 {
        if self.log {
            (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().round() as i32, self.hi.log10().round() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=4).map(|k| self.lo + (self.hi - self.lo) * k as f64 / 4.0).collect()
        }
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one chart. Points that are not finite (or not positive on a log
/// axis) are skipped.
pub fn render_svg(chart: &Chart) -> String {
    let s = &chart.series;
    let keep = |i: usize| {
        s.x[i].is_finite()
            && s.mean[i].is_finite()
            && (!chart.log_x || s.x[i] > 0.0)
            && (!chart.log_y || s.mean[i] > 0.0)
    };
    let idx: Vec<usize> = (0..s.x.len()).filter(|&i| keep(i)).collect();
    let sd = |i: usize| if s.sd[i].is_finite() { s.sd[i] } else { 0.0 };
    let upper = |i: usize| s.mean[i] + sd(i);
    let lower = |i: usize| {
        let v = s.mean[i] - sd(i);
        if chart.log_y && v <= 0.0 {
            s.mean[i] * 1e-3
        } else {
            v
        }
    };
    let xa = Axis::fit(idx.iter().map(|&i| s.x[i]), chart.log_x);
    let ya = Axis::fit(idx.iter().flat_map(|&i| [lower(i), upper(i)]), chart.log_y);
    let (pw, ph) = (W - ML - MR, H - MT - MB);
    let px = |v: f64| ML + pw * xa.frac(v);
    let py = |v: f64| MT + ph * (1.0 - ya.frac(v).clamp(-0.05, 1.05));

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(&chart.title)
    );
    for t in xa.ticks() {
        let x = px(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{MT}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            MT + ph,
            MT + ph + 16.0,
            label(t)
        );
    }
    for t in ya.ticks() {
        let y = py(t);
        let _ = writeln!(
            out,
            r##"<line x1="{ML}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            ML + pw,
            ML - 6.0,
            y + 4.0,
            label(t)
        );
    }
    let _ = writeln!(
        out,
        r#"<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        ML + pw / 2.0,
        H - 16.0,
        esc(&chart.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        MT + ph / 2.0,
        MT + ph / 2.0,
        esc(&chart.y_label)
    );
    if !idx.is_empty() {
        let mut band: Vec<String> = idx.iter().map(|&i| format!("{:.2},{:.2}", px(s.x[i]), py(upper(i)))).collect();
        band.extend(idx.iter().rev().map(|&i| format!("{:.2},{:.2}", px(s.x[i]), py(lower(i)))));
        let _ = writeln!(
            out,
            r##"<polygon class="band" points="{}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##,
            band.join(" ")
        );
        let line: Vec<String> = idx.iter().map(|&i| format!("{:.2},{:.2}", px(s.x[i]), py(s.mean[i]))).collect();
        let _ = writeln!(
            out,
            r##"<polyline class="mean" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            line.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `loss.svg` and `rel_error.svg` from `aggregate.csv`, and
/// `convergence.svg` from `convergence.csv`, for whichever of the two files
/// exist in `dir`.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let agg = dir.join("aggregate.csv");
    let conv = dir.join("convergence.csv");
    if !agg.exists() && !conv.exists() {
        return Err(Error::InvalidArgument(format!(
            "no aggregate.csv or convergence.csv in {}",
            dir.display()
        )));
    }
    if agg.exists() {
        let c = read_columns(
            &agg,
            &["step", "mean_val_loss", "sd_val_loss", "mean_rel_error", "sd_rel_error"],
        )?;
        let charts = [
            ("loss.svg", "Validation loss", "loss", "mean_val_loss", "sd_val_loss"),
            ("rel_error.svg", "Relative error of Y0", "relative error", "mean_rel_error", "sd_rel_error"),
        ];
        for (file, title, ylab, m, s) in charts {
            let chart = Chart {
                title: title.into(),
                x_label: "iteration".into(),
                y_label: ylab.into(),
                log_x: false,
                log_y: true,
                series: Series {
                    x: c["step"].clone(),
                    mean: c[m].clone(),
                    sd: c[s].clone(),
                },
            };
            let path = dir.join(file);
            std::fs::write(&path, render_svg(&chart))?;
            written.push(path);
        }
    }
    if conv.exists() {
        let c = read_columns(&conv, &["h", "mean_rel_error", "sd_rel_error"])?;
        let chart = Chart {
            title: "Relative error of Y0 against h".into(),
            x_label: "h".into(),
            y_label: "relative error".into(),
            log_x: true,
            log_y: true,
            series: Series {
                x: c["h"].clone(),
                mean: c["mean_rel_error"].clone(),
                sd: c["sd_rel_error"].clone(),
            },
        };
        let path = dir.join("convergence.svg");
        std::fs::write(&path, render_svg(&chart))?;
        written.push(path);
    }
    Ok(written)
}
