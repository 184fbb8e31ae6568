//! Minimal SVG line charts with shaded ±3σ bands.

use std::fmt::Write as _;

use crate::config::Recipe;
use crate::results::{CellDetail, ResultRow};

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: (f64, f64, f64, f64) = (56.0, 16.0, 28.0, 44.0); // left, right, top, bottom
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Points are `(x, mean, std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64, f64)>,
    pub dashed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, 0.0);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(chart: &Chart) -> (f64, f64, f64, f64) {
    let pts = chart.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, m, sd) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - 3.0 * sd);
        y1 = y1.max(m + 3.0 * sd);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    (x0, x1, y0 - pad, y1 + pad)
}

fn panel(out: &mut String, chart: &Chart, ox: f64) {
    let (l, r, t, b) = MARGIN;
    let (x0, x1, y0, y1) = bounds(chart);
    let pw = W - l - r;
    let ph = H - t - b;
    let sx = |x: f64| ox + l + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| t + ph - (y - y0) / (y1 - y0) * ph;
    let _ = writeln!(out, r##"<g font-family="sans-serif" font-size="11">"##);
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="16" text-anchor="middle" font-size="13">{}</text>"##,
        ox + W / 2.0,
        esc(&chart.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{t:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##,
        ox + l
    );
    for v in ticks(x0, x1) {
        let x = sx(v);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            t + ph,
            t + ph + 4.0,
            t + ph + 16.0,
            fmt_tick(v)
        );
    }
    for v in ticks(y0, y1) {
        let y = sy(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#444"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            ox + l - 4.0,
            ox + l,
            ox + l - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
        ox + l + pw / 2.0,
        H - 8.0,
        esc(&chart.x_label)
    );
    let _ = writeln!(
        out,
        r##"<text transform="translate({:.1},{:.1}) rotate(-90)" text-anchor="middle">{}</text>"##,
        ox + 14.0,
        t + ph / 2.0,
        esc(&chart.y_label)
    );
    for (i, s) in chart.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<(f64, f64, f64)> = s
            .points
            .iter()
            .copied()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.is_empty() {
            continue;
        }
        if pts.iter().any(|p| p.2 > 0.0) {
            let mut poly = String::new();
            for &(x, m, sd) in &pts {
                let _ = write!(poly, "{:.1},{:.1} ", sx(x), sy(m + 3.0 * sd));
            }
            for &(x, m, sd) in pts.iter().rev() {
                let _ = write!(poly, "{:.1},{:.1} ", sx(x), sy(m - 3.0 * sd));
            }
            let _ = writeln!(
                out,
                r##"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"##,
                poly.trim_end()
            );
        }
        let line: Vec<String> = pts.iter().map(|&(x, m, _)| format!("{:.1},{:.1}", sx(x), sy(m))).collect();
        let dash = if s.dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>"##,
            line.join(" ")
        );
        for &(x, m, _) in &pts {
            let _ = writeln!(out, r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"##, sx(x), sy(m));
        }
        let ly = t + 12.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"##,
            ox + l + 8.0,
            ox + l + 26.0,
            ox + l + 30.0,
            ly + 4.0,
            esc(&s.label)
        );
    }
    out.push_str("</g>\n");
}

/// Panels laid out left to right.
pub fn render(charts: &[Chart]) -> String {
    let n = charts.len().max(1) as f64;
    let mut out = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{H:.0}" viewBox="0 0 {:.0} {H:.0}">
<rect width="100%" height="100%" fill="white"/>
"##,
        W * n,
        W * n
    );
    for (i, c) in charts.iter().enumerate() {
        panel(&mut out, c, W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

fn tag(cell_id: &str) -> &str {
    cell_id.split(':').next().unwrap_or(cell_id)
}

/// Successful rows grouped by cell id in first-seen order, each with its
/// detail record.
fn cells<'a>(
    rows: &'a [ResultRow],
    details: &'a [Option<CellDetail>],
) -> Vec<(&'a str, Vec<(&'a ResultRow, Option<&'a CellDetail>)>)> {
    let mut out: Vec<(&str, Vec<_>)> = Vec::new();
    for (r, d) in rows.iter().zip(details) {
        if !r.is_ok() {
            continue;
        }
        match out.iter_mut().find(|(id, _)| *id == r.cell_id) {
            Some((_, v)) => v.push((r, d.as_ref())),
            None => out.push((&r.cell_id, vec![(r, d.as_ref())])),
        }
    }
    out
}

fn stat(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.filter(|x| x.is_finite()).collect();
    mean_std(&v)
}

type XFn = fn(&ResultRow) -> Option<f64>;

/// Mean metric against a per-row x; one series per key, the dense baseline
/// as a dashed flat line across the x range.
fn metric_chart(
    title: &str,
    x_label: &str,
    rows: &[ResultRow],
    details: &[Option<CellDetail>],
    x: XFn,
    key: fn(&ResultRow) -> String,
) -> Chart {
    let mut series: Vec<Series> = Vec::new();
    let mut dense: Vec<(String, (f64, f64))> = Vec::new();
    let mut y_label = String::new();
    for (id, members) in cells(rows, details) {
        let (m, sd) = stat(members.iter().filter_map(|(r, _)| r.metric_value));
        y_label = members[0].0.metric_name.clone();
        if tag(id) == "dense" {
            dense.push((members[0].0.task.clone(), (m, sd)));
            continue;
        }
        let (xm, _) = stat(members.iter().filter_map(|(r, _)| x(r)));
        let k = key(members[0].0);
        match series.iter_mut().find(|s| s.label == k) {
            Some(s) => s.points.push((xm, m, sd)),
            None => series.push(Series {
                label: k,
                points: vec![(xm, m, sd)],
                dashed: false,
            }),
        }
    }
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).filter(|x| x.is_finite()).collect();
    let (lo, hi) = xs.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    for (task, (m, sd)) in dense {
        if lo <= hi {
            series.push(Series {
                label: format!("dense {task}"),
                points: vec![(lo, m, sd), (hi, m, sd)],
                dashed: true,
            });
        }
    }
    Chart {
        title: title.into(),
        x_label: x_label.into(),
        y_label,
        series,
    }
}

fn curve(points: impl Iterator<Item = Vec<(f64, f64)>>) -> Vec<(f64, f64, f64)> {
    let runs: Vec<Vec<(f64, f64)>> = points.collect();
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, &(x, _))| {
            let (m, sd) = stat(runs.iter().filter_map(|r| r.get(i).map(|p| p.1)));
            (x, m, sd)
        })
        .collect()
}

fn per_layer_chart(rows: &[ResultRow], details: &[Option<CellDetail>]) -> Chart {
    let mut series = Vec::new();
    for (id, members) in cells(rows, details) {
        let r0 = members[0].0;
        if tag(id) == "dense" || r0.scope != "global" {
            continue;
        }
        let pts = curve(members.iter().filter_map(|(_, d)| *d).map(|d| {
            d.layers
                .iter()
                .filter(|l| l.name.ends_with("/weight"))
                .enumerate()
                .map(|(i, l)| (i as f64, l.sparsity()))
                .collect()
        }));
        series.push(Series {
            label: format!("global p={}", r0.p_target.unwrap_or(f64::NAN)),
            points: pts,
            dashed: false,
        });
    }
    Chart {
        title: "Per-layer pruned fraction (global)".into(),
        x_label: "weight layer index".into(),
        y_label: "pruned fraction".into(),
        series,
    }
}

fn early_bird_chart(rows: &[ResultRow], details: &[Option<CellDetail>]) -> Chart {
    let mut series = Vec::new();
    for (id, members) in cells(rows, details) {
        if tag(id) != "early_bird" {
            continue;
        }
        let ds: Vec<&CellDetail> = members.iter().filter_map(|(_, d)| *d).collect();
        let p = members[0].0.p_target.unwrap_or(f64::NAN);
        let probe = |f: fn(&lth_core::earlybird::ProbeRecord) -> Option<f64>| {
            curve(ds.iter().map(|d| {
                d.probes
                    .iter()
                    .map(|r| (r.iteration as f64, f(r).unwrap_or(f64::NAN)))
                    .collect()
            }))
        };
        series.push(Series {
            label: format!("IoU prev p={p}"),
            points: probe(|r| r.iou_prev),
            dashed: false,
        });
        series.push(Series {
            label: format!("IoU final p={p}"),
            points: probe(|r| r.iou_final),
            dashed: true,
        });
        if series.iter().all(|s| !s.label.starts_with("dense")) {
            series.push(Series {
                label: format!("dense {}", members[0].0.metric_name),
                points: curve(ds.iter().map(|d| {
                    d.dense_history
                        .iter()
                        .map(|e| (e.iteration as f64, e.metric))
                        .collect()
                })),
                dashed: false,
            });
        }
    }
    Chart {
        title: "Mask IoU and metric vs probe iteration".into(),
        x_label: "iteration".into(),
        y_label: "IoU / metric".into(),
        series,
    }
}

fn convergence_charts(rows: &[ResultRow], details: &[Option<CellDetail>]) -> Vec<Chart> {
    let mut charts: Vec<Chart> = Vec::new();
    for (id, members) in cells(rows, details) {
        let task = members[0].0.task.clone();
        let ds: Vec<&CellDetail> = members.iter().filter_map(|(_, d)| *d).collect();
        let label = if tag(id) == "dense" {
            "dense".to_string()
        } else {
            format!("ticket p={}", members[0].0.p_target.unwrap_or(f64::NAN))
        };
        let s = Series {
            label,
            points: curve(ds.iter().map(|d| d.history.iter().map(|e| (e.epoch, e.val_loss)).collect())),
            dashed: tag(id) == "dense",
        };
        match charts.iter_mut().find(|c| c.title.ends_with(&task)) {
            Some(c) => c.series.push(s),
            None => charts.push(Chart {
                title: format!("Validation loss {task}"),
                x_label: "epoch".into(),
                y_label: "val loss".into(),
                series: vec![s],
            }),
        }
    }
    charts
}

/// The recipe's figure as an SVG document.
pub fn recipe_figure(recipe: Recipe, rows: &[ResultRow], details: &[Option<CellDetail>]) -> String {
    let sparsity: XFn = |r| r.sparsity_exact;
    let by_mode = |r: &ResultRow| format!("{} {}", tag(&r.cell_id), r.task);
    let charts = match recipe {
        Recipe::SparsitySweep => vec![metric_chart(
            "Metric vs network sparsity",
            "network sparsity",
            rows,
            details,
            sparsity,
            |r| format!("T={} {} {}", r.rounds.unwrap_or(0), r.scope, r.task),
        )],
        Recipe::ResettingSweep => vec![metric_chart(
            "Metric vs rewind iteration",
            "rewind iteration",
            rows,
            details,
            |r| r.rewind_iter.map(|j| j as f64),
            |r| format!("p={} {}", r.p_target.unwrap_or(f64::NAN), r.task),
        )],
        Recipe::ModulePruning => vec![metric_chart(
            "Metric by pruned module subset",
            "network sparsity",
            rows,
            details,
            sparsity,
            |r| format!("p={}", r.p_target.unwrap_or(f64::NAN)),
        )],
        Recipe::RoundsSweep => vec![metric_chart(
            "Metric vs pruning rounds",
            "rounds",
            rows,
            details,
            |r| r.rounds.map(|t| t as f64),
            |r| format!("p={} {}", r.p_target.unwrap_or(f64::NAN), r.task),
        )],
        Recipe::ScopeCompare => vec![
            per_layer_chart(rows, details),
            metric_chart(
                "Global vs layer-wise",
                "network sparsity",
                rows,
                details,
                sparsity,
                |r| r.scope.clone(),
            ),
        ],
        Recipe::EarlyBird => vec![early_bird_chart(rows, details)],
        Recipe::TransferCompare | Recipe::CrossTask => vec![metric_chart(
            "Transfer vs direct pruning",
            "network sparsity",
            rows,
            details,
            sparsity,
            by_mode,
        )],
        Recipe::Convergence => convergence_charts(rows, details),
    };
    render(&charts)
}
