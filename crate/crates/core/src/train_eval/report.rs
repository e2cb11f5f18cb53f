//! CSV tables and SVG plots for evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::evaluate::{BinnedRow, EvalRecord, EvalReport, Method, SummaryRow};
use super::TrainError;

/// Shortest round-trip formatting; NaN becomes an empty cell.
fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "n", "subset", "graphs", "variables", "r2", "mse", "kl", "bp_convergence"])?;
    for r in rows {
        out.write_record([
            r.method.name().to_string(),
            r.n.map_or_else(|| "all".to_string(), |n| n.to_string()),
            r.subset.clone(),
            r.graphs.to_string(),
            r.variables.to_string(),
            num(r.r2),
            num(r.mse),
            num(r.kl),
            num(r.bp_convergence),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_binned_csv<W: Write>(rows: &[BinnedRow], w: W) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "metric_name", "bin_lo", "bin_hi", "mean", "ci_lo", "ci_hi", "count"])?;
    for r in rows {
        let b = &r.bin;
        out.write_record([
            r.method.name().to_string(),
            r.metric_name.clone(),
            num(b.bin_lo),
            num(b.bin_hi),
            num(b.mean),
            num(b.ci_lo),
            num(b.ci_hi),
            b.count.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One row per variable: graph, variable, prediction columns, target
/// columns and convergence flag.
pub fn write_predictions_csv<W: Write>(records: &[EvalRecord], w: W) -> Result<(), TrainError> {
    let mut out = csv::Writer::from_writer(w);
    let width = records.first().and_then(|r| r.targets.first()).map_or(1, Vec::len);
    let mut header = vec!["method".to_string(), "graph_id".into(), "variable".into()];
    header.extend((0..width).map(|c| format!("pred_{c}")));
    header.extend((0..width).map(|c| format!("target_{c}")));
    header.push("bp_converged".into());
    out.write_record(&header)?;
    for r in records {
        for (v, (p, t)) in r.predictions.iter().zip(&r.targets).enumerate() {
            let mut row = vec![r.method.name().to_string(), r.graph_id.to_string(), v.to_string()];
            row.extend(p.iter().map(|&x| num(x)));
            row.extend(t.iter().map(|&x| num(x)));
            row.push(r.bp_converged.map_or_else(String::new, |c| c.to_string()));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(v), a.1.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        Self { x: range(&mut xs.clone()), y: range(&mut ys.clone()) }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }

    fn axes(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
            W / 2.0,
            escape(title),
            H - PAD,
            W - PAD,
            H - PAD,
            H - PAD,
            W / 2.0,
            H - 16.0,
            escape(xlabel),
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
        for k in 0..=4 {
            let fx = self.x.0 + (self.x.1 - self.x.0) * k as f64 / 4.0;
            let fy = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                self.px(fx),
                H - PAD + 16.0,
                tick(fx),
                PAD - 6.0,
                self.py(fy) + 4.0,
                tick(fy)
            );
        }
    }
}

fn tick(v: f64) -> String {
    format!("{:.3}", v)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(svg: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 110.0,
            y - 9.0,
            COLORS[i % COLORS.len()],
            W - PAD - 95.0,
            y,
            escape(name)
        );
    }
}

/// Line plot of binned means with confidence-interval whiskers, one line
/// per method, for a single metric.
pub fn binned_svg(rows: &[BinnedRow], metric: &str, xlabel: &str) -> String {
    let mut by_method: BTreeMap<Method, Vec<&BinnedRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric_name == metric) {
        by_method.entry(r.method).or_default().push(r);
    }
    let all: Vec<&BinnedRow> = by_method.values().flatten().copied().collect();
    let mid = |r: &BinnedRow| 0.5 * (r.bin.bin_lo + r.bin.bin_hi);
    let frame = Frame::new(
        all.iter().map(|r| mid(r)),
        all.iter().flat_map(|r| [r.bin.ci_lo, r.bin.ci_hi, r.bin.mean]),
    );
    let mut svg = String::new();
    frame.axes(&mut svg, &format!("{metric} by {xlabel}"), xlabel, metric);
    for (i, rows) in by_method.values().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> =
            rows.iter().map(|r| format!("{:.2},{:.2}", frame.px(mid(r)), frame.py(r.bin.mean))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        for r in rows {
            let x = frame.px(mid(r));
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                frame.py(r.bin.ci_lo),
                frame.py(r.bin.ci_hi),
                frame.py(r.bin.mean)
            );
        }
    }
    legend(&mut svg, &by_method.keys().map(|m| m.name().to_string()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Scatter of predicted against target values (first output column), one
/// colour per method, with the identity line.
pub fn scatter_svg(records: &[EvalRecord], column: usize) -> String {
    let mut by_method: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let pts = by_method.entry(r.method).or_default();
        for (p, t) in r.predictions.iter().zip(&r.targets) {
            if let (Some(&p), Some(&t)) = (p.get(column), t.get(column)) {
                if p.is_finite() && t.is_finite() {
                    pts.push((t, p));
                }
            }
        }
    }
    let all: Vec<(f64, f64)> = by_method.values().flatten().copied().collect();
    let both = all.iter().flat_map(|&(a, b)| [a, b]);
    let frame = Frame::new(both.clone(), both);
    let mut svg = String::new();
    frame.axes(&mut svg, "predicted vs target", "target", "prediction");
    let (lo, hi) = (frame.x.0.max(frame.y.0), frame.x.1.min(frame.y.1));
    let _ = writeln!(
        svg,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        frame.px(lo),
        frame.py(lo),
        frame.px(hi),
        frame.py(hi)
    );
    for (i, pts) in by_method.values().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for &(t, p) in pts {
            let _ =
                writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.5"/>"#, frame.px(t), frame.py(p));
        }
    }
    legend(&mut svg, &by_method.keys().map(|m| m.name().to_string()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Writes summary.csv, binned_aspl.csv, binned_cc.csv, predictions.csv and
/// SVG plots into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    write_summary_csv(&report.summary, fs::File::create(dir.join("summary.csv"))?)?;
    write_binned_csv(&report.binned_aspl, fs::File::create(dir.join("binned_aspl.csv"))?)?;
    write_binned_csv(&report.binned_cc, fs::File::create(dir.join("binned_cc.csv"))?)?;
    write_predictions_csv(&report.records, fs::File::create(dir.join("predictions.csv"))?)?;
    let mut metrics: Vec<&str> = report.binned_aspl.iter().map(|r| r.metric_name.as_str()).collect();
    metrics.dedup();
    metrics.sort_unstable();
    metrics.dedup();
    for m in metrics {
        fs::write(dir.join(format!("binned_aspl_{m}.svg")), binned_svg(&report.binned_aspl, m, "aspl"))?;
        fs::write(dir.join(format!("binned_cc_{m}.svg")), binned_svg(&report.binned_cc, m, "clustering"))?;
    }
    fs::write(dir.join("scatter.svg"), scatter_svg(&report.records, 0))?;
    Ok(())
}
