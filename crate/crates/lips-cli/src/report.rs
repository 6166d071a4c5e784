//! Report rendering: per-stage cost rows as Markdown tables or CSV with
//! the fixed column set `config, stage, macs, params, share_pct`.

use std::fmt::Write as _;

use lips_core::cost::{CostReport, Stage};

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub config: String,
    pub stage: String,
    pub macs: u64,
    pub params: u64,
    pub share_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Csv,
}

/// One row per stage plus a `total` row.
pub fn stage_rows(config: &str, report: &CostReport) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = Stage::ALL
        .iter()
        .map(|&stage| ReportRow {
            config: config.to_string(),
            stage: stage.name().to_string(),
            macs: report.stage_macs(stage),
            params: report.stage_params(stage),
            share_pct: report.share_pct(stage),
        })
        .collect();
    rows.push(total_row(config, report));
    rows
}

/// The `total` summary row alone, for compact sweep tables.
pub fn total_row(config: &str, report: &CostReport) -> ReportRow {
    ReportRow {
        config: config.to_string(),
        stage: "total".to_string(),
        macs: report.total_macs(),
        params: report.total_params(),
        share_pct: 100.0,
    }
}

pub fn render(rows: &[ReportRow], format: Format) -> String {
    match format {
        Format::Csv => render_csv(rows),
        Format::Markdown => render_markdown(rows),
    }
}

fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("config,stage,macs,params,share_pct\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6}",
            row.config, row.stage, row.macs, row.params, row.share_pct
        );
    }
    out
}

fn render_markdown(rows: &[ReportRow]) -> String {
    let mut cells: Vec<[String; 5]> = vec![[
        "config".into(),
        "stage".into(),
        "macs".into(),
        "params".into(),
        "share_pct".into(),
    ]];
    for row in rows {
        cells.push([
            row.config.clone(),
            row.stage.clone(),
            row.macs.to_string(),
            row.params.to_string(),
            format!("{:.1}", row.share_pct),
        ]);
    }
    let mut widths = [0usize; 5];
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }

    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        out.push('|');
        for (cell, &w) in row.iter().zip(&widths) {
            let _ = write!(out, " {cell:>w$} |", w = w);
        }
        out.push('\n');
        if i == 0 {
            out.push('|');
            for &w in &widths {
                let _ = write!(out, "{}|", "-".repeat(w + 2));
            }
            out.push('\n');
        }
    }
    out
}
