//! `report.json` / `report.csv` and sweep tables with SVG line plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::evaluate::{MetricsReport, SweepAxis, SweepResult, Target, METRICS};
use crate::error::{IoContext, Result};

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).at(path)?;
    std::fs::write(path, text + "\n").at(path)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("subject,metric,value\n");
    for s in &report.subjects {
        for (m, v) in &s.metrics {
            let _ = writeln!(out, "{},{m},{v}", s.subject);
        }
    }
    for (m, s) in &report.summary {
        let _ = writeln!(out, "mean,{m},{}", s.mean);
        let _ = writeln!(out, "sem,{m},{}", fmt_opt(s.sem));
    }
    out
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let json = dir.join("report.json");
    write_json(report, &json)?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report_csv(report)).at(&csv)?;
    Ok(vec![json, csv])
}

pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("model_kind,metric,delta,window_end,duration,mean,sem\n");
    let mut kinds: Vec<&String> = sweep.points.iter().flat_map(|p| p.values.keys()).collect();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        for metric in METRICS {
            for p in &sweep.points {
                if let Some(s) = p.values.get(kind).and_then(|v| v.get(metric)) {
                    let _ = writeln!(
                        out,
                        "{kind},{metric},{},{},{},{},{}",
                        p.delta,
                        p.window_end,
                        p.window.d,
                        s.mean,
                        fmt_opt(s.sem)
                    );
                }
            }
        }
        for target in Target::ALL {
            let metric = format!("id_low_{}", target.name());
            for p in &sweep.points {
                if let Some(s) = p.neighbor_id.get(kind).and_then(|v| v.get(target.name())) {
                    let _ = writeln!(
                        out,
                        "{kind},{metric},{},{},{},{},{}",
                        p.delta,
                        p.window_end,
                        p.window.d,
                        s.mean,
                        fmt_opt(s.sem)
                    );
                }
            }
        }
    }
    out
}

struct Series {
    label: String,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn x_of(sweep: &SweepResult, p: &super::evaluate::SweepPoint) -> f64 {
    match sweep.axis {
        SweepAxis::Delta => p.window_end,
        SweepAxis::Duration => p.window.d,
    }
}

fn panels(sweep: &SweepResult) -> Vec<(String, Vec<Series>)> {
    let mut kinds: Vec<&String> = sweep.points.iter().flat_map(|p| p.values.keys()).collect();
    kinds.sort();
    kinds.dedup();
    let mut out = Vec::new();
    for metric in METRICS {
        let series = kinds
            .iter()
            .enumerate()
            .map(|(i, kind)| Series {
                label: kind.to_string(),
                color: COLORS[i % COLORS.len()],
                points: sweep
                    .points
                    .iter()
                    .filter_map(|p| p.values.get(*kind)?.get(metric).map(|s| (x_of(sweep, p), s.mean)))
                    .filter(|(_, y)| y.is_finite())
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        out.push((metric.to_string(), series));
    }
    let series = Target::ALL
        .iter()
        .enumerate()
        .map(|(i, t)| Series {
            label: format!("general, {} image", t.name()),
            color: COLORS[i % COLORS.len()],
            points: sweep
                .points
                .iter()
                .filter_map(|p| p.neighbor_id.get("general")?.get(t.name()).map(|s| (x_of(sweep, p), s.mean)))
                .filter(|(_, y)| y.is_finite())
                .collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    out.push(("id_low by target".to_string(), series));
    out
}

/// One panel per metric, one polyline per series; delta sweeps shade the
/// stimulus interval on the window-end axis.
pub fn sweep_svg(sweep: &SweepResult) -> String {
    let panels = panels(sweep);
    let cols = 3usize;
    let rows = panels.len().div_ceil(cols);
    let (w, h) = (cols as f64 * (PANEL_W + MARGIN) + MARGIN, rows as f64 * (PANEL_H + 2.0 * MARGIN) + MARGIN);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let xs: Vec<f64> = sweep.points.iter().map(|p| x_of(sweep, p)).collect();
    let mut x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if sweep.axis == SweepAxis::Delta {
        x_lo = x_lo.min(sweep.stimulus_interval.0);
        x_hi = x_hi.max(sweep.stimulus_interval.1);
    }
    if !(x_hi > x_lo) {
        x_lo -= 1.0;
        x_hi += 1.0;
    }
    let x_label = match sweep.axis {
        SweepAxis::Delta => "window end (s after onset)",
        SweepAxis::Duration => "window duration (s)",
    };
    for (i, (title, series)) in panels.iter().enumerate() {
        let ox = MARGIN + (i % cols) as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN + (i / cols) as f64 * (PANEL_H + 2.0 * MARGIN);
        let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
        let mut y_lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let mut y_hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(y_hi > y_lo) {
            y_lo = if y_lo.is_finite() { y_lo - 1.0 } else { 0.0 };
            y_hi = if y_hi.is_finite() { y_hi + 1.0 } else { 1.0 };
        }
        let px = |x: f64| ox + (x - x_lo) / (x_hi - x_lo) * PANEL_W;
        let py = |y: f64| oy + PANEL_H - (y - y_lo) / (y_hi - y_lo) * PANEL_H;
        let _ = writeln!(svg, "<g class=\"panel\" data-metric=\"{title}\">");
        if sweep.axis == SweepAxis::Delta {
            let (a, b) = sweep.stimulus_interval;
            let _ = writeln!(
                svg,
                "<rect class=\"stimulus\" x=\"{:.2}\" y=\"{oy:.2}\" width=\"{:.2}\" height=\"{PANEL_H}\" fill=\"#cccccc\" fill-opacity=\"0.5\"/>",
                px(a),
                px(b) - px(a)
            );
        }
        let _ = writeln!(
            svg,
            "<rect x=\"{ox:.2}\" y=\"{oy:.2}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#333333\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{title}</text>",
            ox + PANEL_W / 2.0,
            oy - 8.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{x_label}</text>",
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 28.0
        );
        let _ =
            writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{y_hi:.3}</text>", ox - 4.0, oy + 10.0);
        let _ =
            writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{y_lo:.3}</text>", ox - 4.0, oy + PANEL_H);
        let _ = writeln!(svg, "<text x=\"{ox:.2}\" y=\"{:.2}\">{x_lo:.1}</text>", oy + PANEL_H + 14.0);
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{x_hi:.1}</text>",
            ox + PANEL_W,
            oy + PANEL_H + 14.0
        );
        for (k, s) in series.iter().enumerate() {
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                svg,
                "<polyline data-series=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
                s.label,
                s.color,
                pts.join(" ")
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{}\">{}</text>",
                ox + 6.0,
                oy + 14.0 + 12.0 * k as f64,
                s.color,
                s.label
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `sweep_<name>.json`, `.csv` and `.svg` into `dir`.
pub fn emit_sweep(sweep: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let stem = format!("sweep_{}", sweep.name);
    let json = dir.join(format!("{stem}.json"));
    write_json(sweep, &json)?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, sweep_csv(sweep)).at(&csv)?;
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, sweep_svg(sweep)).at(&svg)?;
    Ok(vec![json, csv, svg])
}
