//! Convergence tables, CSV output and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConditionSummary, HarnessError};
use crate::metrics::{aggregate, gap_percent, Aggregate};
use crate::optimizer::RunTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub iteration: usize,
    pub gap: Aggregate,
}

/// Gap% of the best-so-far cost per iteration, aggregated over runs. Row 0
/// is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub cell: String,
    pub reference_cost: f64,
    pub rows: Vec<ConvergenceRow>,
}

pub fn convergence_table(
    cell: &str,
    traces: &[&RunTrace],
    reference_cost: f64,
) -> Result<ConvergenceTable, HarnessError> {
    let first = traces
        .first()
        .ok_or_else(|| HarnessError::Report(format!("no traces for {cell}")))?;
    let iterations = first.records.len();
    if let Some(t) = traces.iter().find(|t| t.records.len() != iterations) {
        return Err(HarnessError::Report(format!(
            "inconsistent iteration counts in {cell}: {iterations} vs {}",
            t.records.len()
        )));
    }
    let curves: Vec<Vec<f64>> = traces.iter().map(|t| t.best_curve()).collect();
    let rows = (0..=iterations)
        .map(|i| {
            let gaps = curves
                .iter()
                .map(|c| gap_percent(c[i], reference_cost))
                .collect::<Result<Vec<f64>, _>>()?;
            Ok(ConvergenceRow {
                iteration: i,
                gap: aggregate(&gaps)?,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(ConvergenceTable {
        cell: cell.to_owned(),
        reference_cost,
        rows,
    })
}

/// Shortest round-trip form, keeping a trailing `.0` on whole numbers.
fn num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn opt_pair(a: &Option<Aggregate>) -> [String; 2] {
    match a {
        Some(a) => [num(a.mean), num(a.std)],
        None => [String::new(), String::new()],
    }
}

pub fn write_summary_csv(summaries: &[ConditionSummary], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "case",
        "backend",
        "k",
        "cost_mean",
        "cost_std",
        "ce_mean",
        "ce_std",
        "gap_mean",
        "gap_std",
        "reference",
        "runs_completed",
    ])?;
    for s in summaries {
        let mut row = vec![s.case.clone(), s.backend.clone(), u8::from(s.knowledge).to_string()];
        row.extend(opt_pair(&s.total_cost));
        row.extend(opt_pair(&s.ce));
        row.extend(opt_pair(&s.final_gap));
        row.push(num(s.reference_cost));
        row.push(s.runs_completed.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|err| HarnessError::io(path, err))
}

pub fn write_convergence_csv(table: &ConvergenceTable, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "gap_mean", "gap_std", "gap_min", "gap_max"])?;
    for r in &table.rows {
        w.write_record([
            r.iteration.to_string(),
            num(r.gap.mean),
            num(r.gap.std),
            num(r.gap.min),
            num(r.gap.max),
        ])?;
    }
    w.flush().map_err(|err| HarnessError::io(path, err))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line plot of mean Gap% with a shaded band of one standard deviation.
pub fn convergence_svg(table: &ConvergenceTable) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 64.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 36.0;
    const BOTTOM: f64 = 52.0;

    let rows = &table.rows;
    let upper: Vec<f64> = rows.iter().map(|r| r.gap.mean + r.gap.std).collect();
    let lower: Vec<f64> = rows.iter().map(|r| r.gap.mean - r.gap.std).collect();
    let mut y_lo = lower.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let mut y_hi = upper.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !y_hi.is_finite() || y_hi - y_lo < 1e-9 {
        y_lo -= 1.0;
        y_hi = y_lo + 2.0;
    }
    let x_max = rows.last().map_or(1, |r| r.iteration.max(1)) as f64;
    let px = |i: usize| LEFT + (i as f64 / x_max) * (W - LEFT - RIGHT);
    let py = |v: f64| TOP + (y_hi - v) / (y_hi - y_lo) * (H - TOP - BOTTOM);

    let mut band = String::new();
    for (k, r) in rows.iter().enumerate() {
        let _ = write!(band, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, px(r.iteration), py(upper[k]));
    }
    for (k, r) in rows.iter().enumerate().rev() {
        let _ = write!(band, "L{:.2},{:.2} ", px(r.iteration), py(lower[k]));
    }
    band.push('Z');
    let mean: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(k, r)| format!("{}{:.2},{:.2}", if k == 0 { "M" } else { "L" }, px(r.iteration), py(r.gap.mean)))
        .collect();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        W / 2.0,
        xml_escape(&table.cell)
    );
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(svg, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r#"<g font-family="sans-serif" font-size="11">"#);
    for t in 0..=5 {
        let it = (x_max * t as f64 / 5.0).round() as usize;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{it}</text>"#,
            px(it),
            y1 + 16.0
        );
        let v = y_lo + (y_hi - y_lo) * t as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Iteration</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Gap (%)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r##"<path class="std-band" d="{band}" fill="#4c72b0" fill-opacity="0.25" stroke="none"/>"##
    );
    let _ = writeln!(
        svg,
        r##"<path class="mean" d="{}" fill="none" stroke="#4c72b0" stroke-width="2"/>"##,
        mean.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

/// File-name-safe version of a cell id.
pub fn file_stem(cell: &str) -> String {
    cell.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `summary.csv` plus one convergence CSV and SVG per table.
pub fn emit_report(
    summaries: &[ConditionSummary],
    tables: &[ConvergenceTable],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|err| HarnessError::io(out_dir, err))?;
    let mut written = Vec::new();
    let summary = out_dir.join("summary.csv");
    write_summary_csv(summaries, &summary)?;
    written.push(summary);
    for table in tables {
        let stem = file_stem(&table.cell);
        let csv_path = out_dir.join(format!("convergence_{stem}.csv"));
        write_convergence_csv(table, &csv_path)?;
        let svg_path = out_dir.join(format!("convergence_{stem}.svg"));
        std::fs::write(&svg_path, convergence_svg(table)).map_err(|err| HarnessError::io(&svg_path, err))?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}
