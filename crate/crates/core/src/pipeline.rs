//! Report directories: per-student analysis and cross-run comparison tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compression::CompressionMap;
use crate::diagnostics::{self, format_value};
use crate::error::{Error, Result};
use crate::kd;
use crate::model::{MoeModel, Sequence};
use crate::scenario::{self, Outcome, Paradigm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub spot_checks: usize,
    pub seed: u64,
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            spot_checks: 100,
            seed: 0,
            temperature: 1.0,
            epsilon: 1e-8,
        }
    }
}

/// Headline numbers of one analysis, stored as `summary.json` metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub method: String,
    pub sequences: usize,
    pub tokens: usize,
    pub kd_loss: f64,
    pub best: f64,
    pub common: f64,
    pub worst: f64,
    pub max_residual: f64,
}

/// Compares `student` with `teacher` on `corpus` and writes into `out`:
/// `l1.csv`, `overlap.csv`, `entropy.csv`, `summary.json`, `census.csv` and
/// `decomposition.json`.
pub fn analyze(
    teacher: &MoeModel,
    student: &MoeModel,
    map: Option<&CompressionMap>,
    corpus: &[Sequence],
    out: impl AsRef<Path>,
    options: &AnalyzeOptions,
) -> Result<AnalysisSummary> {
    let out = out.as_ref();
    if corpus.is_empty() {
        return Err(Error::arg("analysis corpus is empty"));
    }
    if let Some(m) = map {
        m.validate(teacher, student)?;
    }
    let ref_trace = diagnostics::unmasked_trace(teacher, corpus)?;
    let stu_trace = diagnostics::unmasked_trace(student, corpus)?;
    let reports = diagnostics::layer_reports(&ref_trace, &stu_trace, map)?;
    let census = scenario::scenario_census(teacher, student, map, corpus)?;
    let checks = scenario::spot_check(teacher, student, map, corpus, options.spot_checks, options.seed)?;
    let kd_loss = kd::evaluate_kd_loss(teacher, student, corpus, options.temperature, options.epsilon)?;

    let summary = AnalysisSummary {
        method: map.map_or("none", CompressionMap::method).to_string(),
        sequences: corpus.len(),
        tokens: ref_trace.n_tokens(),
        kd_loss,
        best: census.outcome_fraction(Outcome::Best),
        common: census.outcome_fraction(Outcome::Common),
        worst: census.outcome_fraction(Outcome::Worst),
        max_residual: checks.iter().map(|c| c.residual).fold(0.0, f64::max),
    };
    diagnostics::emit_report(&reports, out, &serde_json::to_value(&summary)?)?;
    census.write_csv(out.join("census.csv"))?;
    let decomposition = serde_json::json!({
        "paradigm": Paradigm::of(map),
        "seed": options.seed,
        "max_residual": summary.max_residual,
        "checks": checks,
    });
    let mut text = serde_json::to_string_pretty(&decomposition)?;
    text.push('\n');
    fs::write(out.join("decomposition.json"), text)?;
    Ok(summary)
}

/// Reads the summary written by [`analyze`], naming the directory on failure.
pub fn read_summary(dir: impl AsRef<Path>) -> Result<AnalysisSummary> {
    let dir = dir.as_ref();
    let missing = |what: &str| Error::input(format!("{}: missing or unreadable {what}", dir.display()));
    if !dir.join("census.csv").is_file() {
        return Err(missing("census.csv"));
    }
    let text = fs::read_to_string(dir.join("summary.json")).map_err(|_| missing("summary.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|_| missing("summary.json"))?;
    serde_json::from_value(value["metadata"].clone()).map_err(|_| missing("summary.json metadata"))
}

/// Results of one analysis directory.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRecord {
    pub summary: AnalysisSummary,
    pub mean_overlap: f64,
    pub mean_l1: f64,
}

fn read_record(dir: &Path) -> Result<AnalysisRecord> {
    let summary = read_summary(dir)?;
    let text = fs::read_to_string(dir.join("summary.json"))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let field = |k: &str| {
        v[k].as_f64()
            .ok_or_else(|| Error::input(format!("{}: summary.json lacks {k}", dir.display())))
    };
    Ok(AnalysisRecord {
        summary,
        mean_overlap: field("mean_overlap")?,
        mean_l1: field("mean_l1")?,
    })
}

/// One comparison row: a compressed student and, when present, its
/// router-calibrated counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub student: String,
    pub base: AnalysisRecord,
    pub calibrated: Option<AnalysisRecord>,
}

/// Analysis directories inside a run directory are named `analysis_<student>`
/// and `analysis_<student>_R`. A directory that is itself an analysis is one
/// row on its own.
pub fn collect_rows(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if run_dirs.is_empty() {
        return Err(Error::arg("at least one run directory is required"));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let run = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        if dir.join("summary.json").is_file() {
            rows.push(ReportRow {
                run: run.clone(),
                student: run,
                base: read_record(dir)?,
                calibrated: None,
            });
            continue;
        }
        let entries = fs::read_dir(dir).map_err(|e| Error::input(format!("{}: {e}", dir.display())))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("analysis_"))
            .collect();
        names.sort();
        let bases: Vec<&String> = names.iter().filter(|n| !n.ends_with("_R")).collect();
        if bases.is_empty() {
            return Err(Error::input(format!(
                "{}: no analysis directories found",
                dir.display()
            )));
        }
        for name in bases {
            let calibrated_name = format!("{name}_R");
            let calibrated = if names.contains(&calibrated_name) {
                Some(read_record(&dir.join(&calibrated_name))?)
            } else {
                None
            };
            rows.push(ReportRow {
                run: run.clone(),
                student: name.trim_start_matches("analysis_").to_string(),
                base: read_record(&dir.join(name))?,
                calibrated,
            });
        }
    }
    Ok(rows)
}

/// Column order of `report.csv`.
pub const REPORT_COLUMNS: [&str; 16] = [
    "run",
    "student",
    "method",
    "tokens",
    "kd_loss",
    "kd_loss_R",
    "mean_overlap",
    "mean_overlap_R",
    "mean_l1",
    "mean_l1_R",
    "best",
    "best_R",
    "common",
    "common_R",
    "worst",
    "worst_R",
];

/// Builds `(csv, text)` comparison tables for the given run directories.
pub fn report_tables(run_dirs: &[PathBuf]) -> Result<(String, String)> {
    let rows = collect_rows(run_dirs)?;
    let mut csv = REPORT_COLUMNS.join(",");
    csv.push('\n');
    let mut text = String::new();
    let line = |cells: [&str; 11]| {
        format!(
            "{:<20} {:<20} {:<7} {:>12} {:>12} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7}\n",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cells[4],
            cells[5],
            cells[6],
            cells[7],
            cells[8],
            cells[9],
            cells[10]
        )
    };
    text.push_str(&line([
        "run",
        "student",
        "method",
        "kd_loss",
        "kd_loss_R",
        "overlap",
        "overlap_R",
        "l1",
        "l1_R",
        "best",
        "best_R",
    ]));
    for row in &rows {
        let b = &row.base;
        let c = row.calibrated.as_ref();
        let full = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), format_value);
        let fields = [
            row.run.clone(),
            row.student.clone(),
            b.summary.method.clone(),
            b.summary.tokens.to_string(),
            format_value(b.summary.kd_loss),
            full(c.map(|r| r.summary.kd_loss)),
            format_value(b.mean_overlap),
            full(c.map(|r| r.mean_overlap)),
            format_value(b.mean_l1),
            full(c.map(|r| r.mean_l1)),
            format_value(b.summary.best),
            full(c.map(|r| r.summary.best)),
            format_value(b.summary.common),
            full(c.map(|r| r.summary.common)),
            format_value(b.summary.worst),
            full(c.map(|r| r.summary.worst)),
        ];
        csv.push_str(&fields.join(","));
        csv.push('\n');
        let short = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.p$}"));
        text.push_str(&line([
            &row.run,
            &row.student,
            &b.summary.method,
            &short(Some(b.summary.kd_loss), 6),
            &short(c.map(|r| r.summary.kd_loss), 6),
            &short(Some(b.mean_overlap), 4),
            &short(c.map(|r| r.mean_overlap), 4),
            &short(Some(b.mean_l1), 4),
            &short(c.map(|r| r.mean_l1), 4),
            &short(Some(b.summary.best), 3),
            &short(c.map(|r| r.summary.best), 3),
        ]));
    }
    Ok((csv, text))
}
