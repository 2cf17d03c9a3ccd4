use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use super::decay::{DecayFit, Regimes};
use super::som::SomModel;
use super::stats::LogSummary;
use crate::interface::ComplexityLabel;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("SOM has no neurons")]
    EmptySom,
    #[error("nothing to report")]
    NothingToReport,
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    /// (attempt, percent of successful runs)
    pub points: Vec<(f64, f64)>,
    pub fit: DecayFit<f64>,
    pub regimes: Regimes,
}

impl DecayReport {
    pub fn new(points: Vec<(f64, f64)>, fit: DecayFit<f64>) -> Self {
        let regimes = fit.regimes();
        DecayReport { points, fit, regimes }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub som: Option<&'a SomModel<f64>>,
    pub decay: Option<&'a DecayReport>,
    pub logs: Option<&'a LogSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackedBars {
    pub attempts: Vec<u32>,
    pub series: Vec<(ComplexityLabel, Vec<u64>)>,
}

/// Successful runs per attempt, split by complexity label. Attempts with no
/// success at all are left out.
pub fn stacked_bars(summary: &LogSummary) -> StackedBars {
    let attempts: Vec<u32> = summary.histogram.keys().copied().collect();
    let series = [ComplexityLabel::Basic, ComplexityLabel::Standard, ComplexityLabel::Complex]
        .into_iter()
        .map(|label| {
            let counts = attempts
                .iter()
                .map(|a| summary.histogram[a].get(&label).copied().unwrap_or(0))
                .collect();
            (label, counts)
        })
        .collect();
    StackedBars { attempts, series }
}

fn write(dir: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> Result<(), ReportError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| ReportError::Io { path: path.clone(), source })?;
    written.push(path);
    Ok(())
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report values serialize")
}

/// Writes whatever the inputs allow: `u_matrix.json`, `hit_map.json`,
/// `decay_fit.json`, `stacked_bar.json` and an SVG next to each.
pub fn emit_reports(inputs: ReportInputs<'_>, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if inputs.som.is_none() && inputs.decay.is_none() && inputs.logs.is_none() {
        return Err(ReportError::NothingToReport);
    }
    if inputs.som.is_some_and(|s| s.grid.is_empty()) {
        return Err(ReportError::EmptySom);
    }
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io { path: out_dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    if let Some(som) = inputs.som {
        let rows = |v: &[f64]| v.chunks(som.grid.cols).map(|c| c.to_vec()).collect::<Vec<_>>();
        let hits: Vec<f64> = som.hit_counts.iter().map(|&h| h as f64).collect();
        let u = json!({
            "rows": som.grid.rows,
            "cols": som.grid.cols,
            "layout": "even-q",
            "values": rows(&som.u_matrix),
        });
        let h = json!({
            "rows": som.grid.rows,
            "cols": som.grid.cols,
            "layout": "even-q",
            "counts": som.hit_counts.chunks(som.grid.cols).collect::<Vec<_>>(),
            "quantization_error": som.quantization_error,
            "topological_error": som.topological_error,
        });
        write(out_dir, "u_matrix.json", &pretty(&u), &mut written)?;
        write(out_dir, "hit_map.json", &pretty(&h), &mut written)?;
        write(out_dir, "u_matrix.svg", &hex_svg(som, &som.u_matrix, "U-matrix"), &mut written)?;
        write(out_dir, "hit_map.svg", &hex_svg(som, &hits, "hits"), &mut written)?;
    }
    if let Some(decay) = inputs.decay {
        write(out_dir, "decay_fit.json", &pretty(decay), &mut written)?;
        write(out_dir, "decay_fit.svg", &decay_svg(decay), &mut written)?;
    }
    if let Some(logs) = inputs.logs {
        let bars = stacked_bars(logs);
        write(out_dir, "stacked_bar.json", &pretty(&bars), &mut written)?;
        write(out_dir, "stacked_bar.svg", &bars_svg(&bars), &mut written)?;
    }
    Ok(written)
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn svg_open(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
}

fn hex_svg(som: &SomModel<f64>, values: &[f64], title: &str) -> String {
    let size = 14.0;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = (som.grid.cols as f64 * 1.5 + 1.0) * size + 20.0;
    let height = (som.grid.rows as f64 + 1.0) * size * 3f64.sqrt() + 40.0;
    let mut out = String::new();
    svg_open(&mut out, width, height);
    let _ = writeln!(out, r#"<text x="10" y="14">{title}</text>"#);
    for (i, &v) in values.iter().enumerate() {
        let (row, col) = som.grid.offset(i);
        // flat-top hexes; even columns sit half a cell lower
        let cx = 10.0 + size + col as f64 * 1.5 * size;
        let shift = if col % 2 == 0 { 0.5 } else { 0.0 };
        let cy = 24.0 + size + (row as f64 + shift) * size * 3f64.sqrt();
        let shade = (255.0 * (1.0 - (v - lo) / span)).round() as u8;
        let pts: Vec<String> = (0..6)
            .map(|k| {
                let a = std::f64::consts::PI / 3.0 * k as f64;
                format!("{:.2},{:.2}", cx + size * a.cos(), cy + size * a.sin())
            })
            .collect();
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="rgb({shade},{shade},{shade})" stroke="#888"/>"##,
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

fn decay_svg(d: &DecayReport) -> String {
    let x_max = d.points.iter().map(|p| p.0).fold(1.0, f64::max);
    let y_max = d.points.iter().map(|p| p.1).fold(d.fit.a + d.fit.c, f64::max) * 1.1;
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / y_max * (H - 2.0 * PAD);
    let mut out = String::new();
    svg_open(&mut out, W, H);
    let band = |out: &mut String, from: f64, to: f64, fill: &str| {
        let (x0, x1) = (sx(from.max(0.0)), sx(to.min(x_max)));
        if x1 > x0 {
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.1}" y="{PAD}" width="{:.1}" height="{:.1}" fill="{fill}" opacity="0.3"/>"#,
                x1 - x0,
                H - 2.0 * PAD
            );
        }
    };
    band(&mut out, -0.5, 0.5, "#9ecae1");
    if let Some((a, b)) = d.regimes.steep {
        band(&mut out, a as f64 - 0.5, b as f64 + 0.5, "#fdd0a2");
        band(&mut out, b as f64 + 0.5, x_max + 0.5, "#c7e9c0");
    }
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{0}" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let curve: Vec<String> = (0..=100)
        .map(|i| {
            let x = x_max * i as f64 / 100.0;
            format!("{:.1},{:.1}", sx(x), sy(d.fit.eval(x)))
        })
        .collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="crimson"/>"#, curve.join(" "));
    for &(x, y) in &d.points {
        let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3"/>"#, sx(x), sy(y));
    }
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="20">S(x) = {:.2} exp(-{:.3} x) + {:.2}   RMSE {:.2}</text>"#,
        d.fit.a, d.fit.b, d.fit.c, d.fit.rmse
    );
    out.push_str("</svg>\n");
    out
}

fn bars_svg(bars: &StackedBars) -> String {
    let colors = ["#74c476", "#6baed6", "#fd8d3c"];
    let totals: Vec<u64> = (0..bars.attempts.len())
        .map(|i| bars.series.iter().map(|(_, c)| c[i]).sum())
        .collect();
    let y_max = totals.iter().copied().max().unwrap_or(1).max(1) as f64;
    let slot = (W - 2.0 * PAD) / bars.attempts.len().max(1) as f64;
    let mut out = String::new();
    svg_open(&mut out, W, H);
    for (i, attempt) in bars.attempts.iter().enumerate() {
        let mut base = H - PAD;
        for ((_, counts), color) in bars.series.iter().zip(colors) {
            let h = counts[i] as f64 / y_max * (H - 2.0 * PAD);
            if h > 0.0 {
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{color}"/>"#,
                    PAD + i as f64 * slot + slot * 0.1,
                    base - h,
                    slot * 0.8
                );
            }
            base -= h;
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{attempt}</text>"#,
            PAD + (i as f64 + 0.5) * slot,
            H - PAD + 14.0
        );
    }
    for (k, ((label, _), color)) in bars.series.iter().zip(colors).enumerate() {
        let y = 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{0}" y="{1}" width="10" height="10" fill="{color}"/><text x="{2}" y="{3}">{label:?}</text>"#,
            W - 110.0,
            y - 9.0,
            W - 95.0,
            y
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{aggregate_logs, fit_decay, train_som, SomConfig};

    fn zero_shot_logs() -> LogSummary {
        let docs: Vec<_> = (0..4)
            .map(|_| json!({"status": "success", "total_attempts": 0, "model_switches": 0, "complexity_label": "basic"}))
            .collect();
        aggregate_logs(&docs).unwrap()
    }

    #[test]
    fn zero_shot_only_is_one_column() {
        let bars = stacked_bars(&zero_shot_logs());
        assert_eq!(bars.attempts, vec![0]);
        assert_eq!(bars.series[0], (ComplexityLabel::Basic, vec![4]));
    }

    #[test]
    fn writes_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let points: Vec<(f64, f64)> = (0..8).map(|x| (x as f64, 10.0 * (-0.5 * x as f64).exp() + 5.0)).collect();
        let decay = DecayReport::new(points.clone(), fit_decay(&points).unwrap());
        let cfg = SomConfig { rows: 3, cols: 3, iterations: 20, batch_size: 2, ..SomConfig::default() };
        let som = train_som(&[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg).unwrap();
        let logs = zero_shot_logs();
        let inputs = ReportInputs { som: Some(&som), decay: Some(&decay), logs: Some(&logs) };
        let files = emit_reports(inputs, dir.path()).unwrap();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        for want in ["u_matrix.json", "hit_map.json", "decay_fit.json", "stacked_bar.json", "decay_fit.svg"] {
            assert!(names.iter().any(|n| n == want), "{want} missing");
        }
        let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("decay_fit.json")).unwrap()).unwrap();
        assert_eq!(fit["regimes"]["zero_shot"], 0);
    }

    #[test]
    fn empty_som_is_an_error() {
        let som = SomModel::<f64> {
            grid: crate::analytics::HexGrid::new(0, 0),
            weights: vec![],
            quantization_error: 0.0,
            topological_error: 0.0,
            hit_counts: vec![],
            u_matrix: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let inputs = ReportInputs { som: Some(&som), ..Default::default() };
        assert!(matches!(emit_reports(inputs, dir.path()), Err(ReportError::EmptySom)));
    }
}
