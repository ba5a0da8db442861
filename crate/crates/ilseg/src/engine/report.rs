//! Report rendering: collects every metrics file under a results directory
//! and renders comparison tables, stage-retention tables, and the
//! retention-versus-shift plot, in machine-readable (TSV/JSON) and
//! human-readable (Markdown/SVG) forms. Rendering is a pure function of the
//! inputs, so regeneration is byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::engine::shift::ShiftStudyTable;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

#[derive(Debug, serde::Serialize)]
pub struct CombinedReport {
    /// Final-stage report per strategy (including the joint reference).
    pub final_reports: Vec<MetricsReport>,
    /// Every stage report, for the retention tables.
    pub stage_reports: Vec<MetricsReport>,
    pub shift_tables: Vec<ShiftStudyTable>,
}

#[derive(Debug)]
pub struct ReportOutcome {
    pub report_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

fn collect_inputs(results_dir: &Path) -> Result<(Vec<MetricsReport>, Vec<ShiftStudyTable>)> {
    let mut reports = Vec::new();
    let mut shifts = Vec::new();
    let mut entries: Vec<PathBuf> = walkdir::WalkDir::new(results_dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    entries.sort();
    for path in entries {
        match path.file_name().and_then(|n| n.to_str()) {
            Some("metrics.json") => {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let report: MetricsReport = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Data(format!("bad {}: {e}", path.display())))?;
                reports.push(report);
            }
            Some("shift_retention.json") => {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let table: ShiftStudyTable = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Data(format!("bad {}: {e}", path.display())))?;
                shifts.push(table);
            }
            _ => {}
        }
    }
    Ok((reports, shifts))
}

/// Final-stage report per strategy.
fn final_reports(reports: &[MetricsReport]) -> Vec<MetricsReport> {
    let mut best: BTreeMap<String, &MetricsReport> = BTreeMap::new();
    for r in reports {
        match best.get(&r.strategy) {
            Some(existing) if existing.stage >= r.stage => {}
            _ => {
                best.insert(r.strategy.clone(), r);
            }
        }
    }
    best.into_values().cloned().collect()
}

fn comparison_tsv(finals: &[MetricsReport]) -> String {
    let mut out = String::from(
        "strategy\tdataset\tclass\tdice_mean\tdice_std\thd95_mean\thd95_std\thd95_excluded\n",
    );
    for report in finals {
        for row in &report.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                report.strategy,
                row.dataset,
                row.class_id,
                fmt(row.stats.dice_mean),
                fmt(row.stats.dice_std),
                fmt(row.stats.hd95_mean),
                fmt(row.stats.hd95_std),
                row.stats.hd95_excluded,
            ));
        }
    }
    out
}

fn comparison_markdown(finals: &[MetricsReport]) -> String {
    let mut out = String::from("## Final-stage comparison\n\n");
    out.push_str("| strategy | dataset | class | Dice (mean ± std) | HD95 (mean ± std) |\n");
    out.push_str("|---|---|---|---|---|\n");
    for report in finals {
        for row in &report.rows {
            let dice = if row.stats.dice_mean.is_nan() {
                "nan".to_string()
            } else {
                format!("{:.3} ± {:.3}", row.stats.dice_mean, row.stats.dice_std)
            };
            let hd = if row.stats.hd95_mean.is_nan() {
                "nan".to_string()
            } else {
                format!("{:.2} ± {:.2}", row.stats.hd95_mean, row.stats.hd95_std)
            };
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                report.strategy, row.dataset, row.class_id, dice, hd
            ));
        }
    }
    out
}

/// Per-strategy class-by-stage Dice matrix.
fn retention_markdown(reports: &[MetricsReport]) -> String {
    let mut by_strategy: BTreeMap<String, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        by_strategy.entry(r.strategy.clone()).or_default().push(r);
    }
    let mut out = String::from("## Dice by stage (retention)\n");
    for (strategy, mut stage_reports) in by_strategy {
        stage_reports.sort_by_key(|r| r.stage);
        stage_reports.dedup_by_key(|r| r.stage);
        if stage_reports.len() < 2 {
            continue;
        }
        out.push_str(&format!("\n### {strategy}\n\n"));
        out.push_str("| dataset | class |");
        for r in &stage_reports {
            out.push_str(&format!(" after stage {} |", r.stage));
        }
        out.push_str("\n|---|---|");
        for _ in &stage_reports {
            out.push_str("---|");
        }
        out.push('\n');
        // Row set follows the final report (it has every dataset).
        let last = stage_reports.last().unwrap();
        for row in &last.rows {
            out.push_str(&format!("| {} | {} |", row.dataset, row.class_id));
            for r in &stage_reports {
                let cell = r
                    .rows
                    .iter()
                    .find(|x| x.dataset == row.dataset && x.class_id == row.class_id)
                    .map(|x| {
                        if x.stats.dice_mean.is_nan() {
                            "nan".to_string()
                        } else {
                            format!("{:.3}", x.stats.dice_mean)
                        }
                    })
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
    }
    out
}

/// Line plot of mean retention against the shift level, one polyline per
/// strategy.
fn shift_svg(table: &ShiftStudyTable) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let x_of = |delta: f64| ml + delta * plot_w;
    let y_of = |r: f64| mt + (1.1 - r.clamp(0.0, 1.1)) / 1.1 * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let x = x_of(tick);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - mb,
            h - mb + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{tick:.2}</text>\n",
            h - mb + 20.0
        ));
        let y = y_of(tick);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{ml}\" y2=\"{y:.1}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{tick:.2}</text>\n",
            ml - 10.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">shift level</text>\n",
        ml + plot_w / 2.0,
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"15\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 15 {:.1})\">old-class retention</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));

    for (si, strategy) in table.strategies.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut points = Vec::new();
        for &delta in &table.deltas {
            if let Some(r) = table.mean_retention(delta, strategy) {
                points.push(format!("{:.1},{:.1}", x_of(delta), y_of(r)));
            }
        }
        if points.len() >= 2 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        }
        for p in &points {
            let (x, y) = p.split_once(',').unwrap();
            svg.push_str(&format!(
                "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = mt + 16.0 * si as f64 + 10.0;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            ml + 10.0,
            ly
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{strategy}</text>\n",
            ml + 28.0,
            ly + 10.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn shift_markdown(table: &ShiftStudyTable) -> String {
    let mut out = String::from(
        "## Retention vs shift\n\nExploratory: retention of knowledge-distilling \
         strategies as the second stage's data distribution is shifted away from \
         the first stage's. Direction, not magnitude, is the observable.\n\n",
    );
    out.push_str("| delta | strategy | mean retention |\n|---|---|---|\n");
    for &delta in &table.deltas {
        for strategy in &table.strategies {
            let cell = table
                .mean_retention(delta, strategy)
                .map(|r| format!("{r:.3}"))
                .unwrap_or_else(|| "nan".into());
            out.push_str(&format!("| {delta:.2} | {strategy} | {cell} |\n"));
        }
    }
    out
}

/// Renders every table and plot from the metric files under `results_dir`
/// into `report_dir`. Fails explicitly when no results are present.
pub fn render_report(results_dir: &Path, report_dir: &Path) -> Result<ReportOutcome> {
    let (reports, shifts) = collect_inputs(results_dir)?;
    if reports.is_empty() && shifts.is_empty() {
        return Err(Error::NoResults(results_dir.to_path_buf()));
    }
    std::fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let mut files = Vec::new();
    let mut markdown = String::from("# Incremental segmentation results\n\n");

    let finals = final_reports(&reports);
    if !finals.is_empty() {
        let tsv_path = report_dir.join("comparison.tsv");
        std::fs::write(&tsv_path, comparison_tsv(&finals)).map_err(|e| Error::io(&tsv_path, e))?;
        files.push(tsv_path);
        markdown.push_str(&comparison_markdown(&finals));
        markdown.push('\n');
        markdown.push_str(&retention_markdown(&reports));
        markdown.push('\n');
    }
    for (i, table) in shifts.iter().enumerate() {
        let suffix = if shifts.len() == 1 {
            String::new()
        } else {
            format!("_{i}")
        };
        let tsv_path = report_dir.join(format!("shift_retention{suffix}.tsv"));
        std::fs::write(&tsv_path, table.to_tsv()).map_err(|e| Error::io(&tsv_path, e))?;
        files.push(tsv_path);
        let svg_path = report_dir.join(format!("retention_vs_shift{suffix}.svg"));
        std::fs::write(&svg_path, shift_svg(table)).map_err(|e| Error::io(&svg_path, e))?;
        files.push(svg_path);
        markdown.push_str(&shift_markdown(table));
        markdown.push('\n');
    }

    let md_path = report_dir.join("report.md");
    std::fs::write(&md_path, &markdown).map_err(|e| Error::io(&md_path, e))?;
    files.push(md_path);

    let combined = CombinedReport {
        final_reports: finals,
        stage_reports: reports,
        shift_tables: shifts,
    };
    let json_path = report_dir.join("combined.json");
    let json = serde_json::to_vec_pretty(&combined).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    files.push(json_path);

    Ok(ReportOutcome {
        report_dir: report_dir.to_path_buf(),
        files,
    })
}
