//! CSV artifact schemas and fixed-width summary tables.
//!
//! Schema version 1. Empty cells mean "not available" (e.g. an undefined
//! R² or the seed of the deterministic baseline).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::crossval::{CvSummary, TaskMetric};
use crate::eval::footprint::FootprintReport;
use crate::eval::robustness::{OmissionDelta, RobustnessRow};
use crate::signals::Direction;
use crate::synthgen::Profile;

pub const SCHEMA_VERSION: u32 = 1;

pub const SUMMARY_CSV: &str = "metrics/summary.csv";
pub const TASKS_CSV: &str = "metrics/task_metrics.csv";
pub const STATS_CSV: &str = "stats/mann_whitney.csv";
pub const CURVES_CSV: &str = "robustness/curves.csv";
pub const DELTAS_CSV: &str = "robustness/deltas.csv";
pub const ROBUSTNESS_TASKS_CSV: &str = "robustness/task_metrics.csv";
pub const FOOTPRINT_CSV: &str = "footprint/footprint.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub model: String,
    pub input: String,
    pub profile: String,
    pub direction: String,
    pub finger: String,
    pub train_rep: usize,
    pub test_rep: usize,
    pub seed: Option<u64>,
    pub omission_rate: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
    pub r2_undefined: bool,
}

impl From<&TaskMetric> for TaskRow {
    fn from(m: &TaskMetric) -> Self {
        Self {
            model: m.model.to_string(),
            input: m.model.input_name().to_string(),
            profile: m.profile.to_string(),
            direction: m.direction.to_string(),
            finger: m.finger.to_string(),
            train_rep: m.train_rep,
            test_rep: m.test_rep,
            seed: m.seed,
            omission_rate: m.omission_rate,
            rmse: m.report.rmse,
            mae: m.report.mae,
            r2: m.report.r2,
            r2_undefined: m.report.r2_undefined,
        }
    }
}

/// `direction` is `both` for rows pooled over directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub profile: String,
    pub input: String,
    pub model: String,
    pub direction: String,
    pub n_tasks: usize,
    pub n_seeds: usize,
    pub rmse_mean: f64,
    pub rmse_sd_tasks: f64,
    pub rmse_sd_seeds: f64,
    pub mae_mean: f64,
    pub mae_sd_tasks: f64,
    pub r2_mean: Option<f64>,
    pub r2_sd_tasks: Option<f64>,
    pub r2_flagged: usize,
}

pub fn direction_label(d: Option<Direction>) -> String {
    d.map_or_else(|| "both".to_string(), |d| d.to_string())
}

impl From<&CvSummary> for SummaryRow {
    fn from(s: &CvSummary) -> Self {
        Self {
            profile: s.profile.to_string(),
            input: s.model.input_name().to_string(),
            model: s.model.to_string(),
            direction: direction_label(s.direction),
            n_tasks: s.n_tasks,
            n_seeds: s.n_seeds,
            rmse_mean: s.rmse_mean,
            rmse_sd_tasks: s.rmse_sd_tasks,
            rmse_sd_seeds: s.rmse_sd_seeds,
            mae_mean: s.mae_mean,
            mae_sd_tasks: s.mae_sd_tasks,
            r2_mean: s.r2_mean,
            r2_sd_tasks: s.r2_sd_tasks,
            r2_flagged: s.r2_flagged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub profile: String,
    pub model: String,
    pub omission_pct: f64,
    pub n_tasks: usize,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub r2_mean: Option<f64>,
    pub r2_sd: Option<f64>,
}

impl From<&RobustnessRow> for CurveRow {
    fn from(r: &RobustnessRow) -> Self {
        Self {
            profile: r.profile.to_string(),
            model: r.model.to_string(),
            omission_pct: (r.omission_rate * 1000.0).round() / 10.0,
            n_tasks: r.n_tasks,
            rmse_mean: r.rmse_mean,
            rmse_sd: r.rmse_sd,
            mae_mean: r.mae_mean,
            mae_sd: r.mae_sd,
            r2_mean: r.r2_mean,
            r2_sd: r.r2_sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub profile: String,
    pub model: String,
    pub from_pct: f64,
    pub to_pct: f64,
    pub rmse_from: f64,
    pub rmse_to: f64,
    pub delta_rmse: f64,
    pub relative_increase: f64,
}

impl From<&OmissionDelta> for DeltaRow {
    fn from(d: &OmissionDelta) -> Self {
        Self {
            profile: d.profile.to_string(),
            model: d.model.to_string(),
            from_pct: (d.from_rate * 1000.0).round() / 10.0,
            to_pct: (d.to_rate * 1000.0).round() / 10.0,
            rmse_from: d.rmse_from,
            rmse_to: d.rmse_to,
            delta_rmse: d.delta_rmse,
            relative_increase: d.relative_increase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub profile: String,
    pub model_a: String,
    pub model_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub profile: String,
    pub direction: String,
    pub model: String,
    pub input: String,
    pub total_params: usize,
    pub trainable_params: usize,
    pub parameter_memory: usize,
    pub parameter_memory_bound: usize,
    pub decomposition_memory: usize,
    pub latency_ms: f64,
    pub full_matrix_total: usize,
    /// `trained` or `initial` parameter values.
    pub values: String,
}

impl FootprintRow {
    pub fn new(profile: Profile, direction: Direction, input: &str, f: &FootprintReport, trained: bool) -> Self {
        Self {
            profile: profile.to_string(),
            direction: direction.to_string(),
            model: f.label.clone(),
            input: input.to_string(),
            total_params: f.total_params,
            trainable_params: f.trainable_params,
            parameter_memory: f.parameter_memory,
            parameter_memory_bound: f.parameter_memory_bound,
            decomposition_memory: f.decomposition_memory,
            latency_ms: f.latency_ms,
            full_matrix_total: f.full_matrix_total,
            values: if trained { "trained" } else { "initial" }.to_string(),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn pm(mean: f64, sd: f64) -> String {
    format!("{mean:.3} ± {sd:.3}")
}

fn pm_opt(mean: Option<f64>, sd: Option<f64>) -> String {
    match (mean, sd) {
        (Some(m), Some(s)) => pm(m, s),
        _ => "n/a".to_string(),
    }
}

fn render_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
}

const MODEL_ORDER: [&str; 4] = ["baseline", "li", "lif", "encoded-li"];

fn model_rank(m: &str) -> usize {
    MODEL_ORDER.iter().position(|x| *x == m).unwrap_or(MODEL_ORDER.len())
}

/// Decoder performance per profile × input × decoder × direction. Cells
/// expected from the grid of present profiles, decoders and directions
/// but absent from the file are flagged.
pub fn performance_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from("Decoder performance (held-out folds; mean ± sd across tasks)\n\n");
    let profiles: BTreeSet<&str> = rows.iter().map(|r| r.profile.as_str()).collect();
    let mut models: Vec<(&str, &str)> = rows.iter().map(|r| (r.model.as_str(), r.input.as_str())).collect();
    models.sort_by_key(|(m, _)| (model_rank(m), m.to_string()));
    models.dedup();
    let mut directions: Vec<&str> = rows.iter().map(|r| r.direction.as_str()).collect();
    directions.sort_by_key(|d| match *d {
        "flexion" => 0,
        "extension" => 1,
        _ => 2,
    });
    directions.dedup();
    let index: BTreeMap<(&str, &str, &str), &SummaryRow> =
        rows.iter().map(|r| ((r.profile.as_str(), r.model.as_str(), r.direction.as_str()), r)).collect();
    let mut table = Vec::new();
    let mut gaps = 0;
    for p in &profiles {
        for d in &directions {
            for (m, input) in &models {
                let row = match index.get(&(*p, *m, *d)) {
                    Some(r) => vec![
                        p.to_string(),
                        input.to_string(),
                        m.to_string(),
                        d.to_string(),
                        pm(r.rmse_mean, r.rmse_sd_tasks),
                        pm(r.mae_mean, r.mae_sd_tasks),
                        pm_opt(r.r2_mean, r.r2_sd_tasks),
                    ],
                    None => {
                        gaps += 1;
                        vec![p.to_string(), input.to_string(), m.to_string(), d.to_string(), "MISSING".into(), "MISSING".into(), "MISSING".into()]
                    }
                };
                table.push(row);
            }
        }
    }
    render_table(&mut out, &["Profile", "Input", "Decoder", "Direction", "RMSE (%MVC)", "MAE (%MVC)", "R²"], &table);
    if gaps > 0 {
        let _ = writeln!(out, "\n{gaps} expected cell(s) missing");
    }
    out
}

/// Degradation under spike omission, one block of rows per model.
pub fn robustness_table_text(rows: &[CurveRow]) -> String {
    let mut out = String::from("Spike-omission robustness (mean ± sd across tasks)\n\n");
    let mut sorted: Vec<&CurveRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.profile.as_str(), model_rank(&a.model), a.model.as_str())
            .cmp(&(b.profile.as_str(), model_rank(&b.model), b.model.as_str()))
            .then(a.omission_pct.total_cmp(&b.omission_pct))
    });
    let table: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            vec![
                r.profile.clone(),
                r.model.clone(),
                format!("{}", r.omission_pct),
                pm(r.rmse_mean, r.rmse_sd),
                pm(r.mae_mean, r.mae_sd),
                pm_opt(r.r2_mean, r.r2_sd),
            ]
        })
        .collect();
    render_table(&mut out, &["Profile", "Model", "Omission Level (%)", "RMSE (%MVC)", "MAE (%MVC)", "R²"], &table);
    out
}

pub fn deltas_table_text(rows: &[DeltaRow]) -> String {
    let mut out = String::from("RMSE change from lowest to highest omission level\n\n");
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.profile.clone(),
                r.model.clone(),
                format!("{} → {}", r.from_pct, r.to_pct),
                format!("{:+.3}", r.delta_rmse),
                format!("{:+.1}%", 100.0 * r.relative_increase),
            ]
        })
        .collect();
    render_table(&mut out, &["Profile", "Model", "Omission (%)", "ΔRMSE (%MVC)", "Relative"], &table);
    out
}

pub fn footprint_table_text(rows: &[FootprintRow]) -> String {
    let mut out = String::from("Static footprint (4 bytes per stored value)\n\n");
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.profile.clone(),
                r.model.clone(),
                r.direction.clone(),
                r.total_params.to_string(),
                r.trainable_params.to_string(),
                r.parameter_memory.to_string(),
                r.decomposition_memory.to_string(),
                format!("{}", r.latency_ms),
            ]
        })
        .collect();
    render_table(
        &mut out,
        &["Profile", "Model", "Direction", "Total", "Trainable", "Param mem (B)", "Decomp mem (B)", "Latency (ms)"],
        &table,
    );
    out
}

/// Renders every table whose artifact is present. Fails only when none
/// is; otherwise missing artifacts are listed at the end.
pub fn report_tables(run_dir: &Path) -> Result<String> {
    let mut out = String::new();
    let mut missing = Vec::new();
    let mut found = 0;
    let mut section = |rel: &str, render: &dyn Fn(&Path) -> Result<String>, out: &mut String| -> Result<()> {
        let path = run_dir.join(rel);
        if path.is_file() {
            found += 1;
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&render(&path)?);
        } else {
            missing.push(rel.to_string());
        }
        Ok(())
    };
    section(SUMMARY_CSV, &|p| Ok(performance_table(&read_csv(p)?)), &mut out)?;
    section(CURVES_CSV, &|p| Ok(robustness_table_text(&read_csv(p)?)), &mut out)?;
    section(DELTAS_CSV, &|p| Ok(deltas_table_text(&read_csv(p)?)), &mut out)?;
    section(FOOTPRINT_CSV, &|p| Ok(footprint_table_text(&read_csv(p)?)), &mut out)?;
    if found == 0 {
        return Err(Error::Data(format!(
            "no report artifacts in {}; missing: {}",
            run_dir.display(),
            missing.join(", ")
        )));
    }
    if !missing.is_empty() {
        let _ = writeln!(out, "\nMissing artifacts (tables omitted): {}", missing.join(", "));
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(profile: &str, model: &str, dir: &str) -> SummaryRow {
        SummaryRow {
            profile: profile.into(),
            input: "motor-units".into(),
            model: model.into(),
            direction: dir.into(),
            n_tasks: 10,
            n_seeds: 1,
            rmse_mean: 1.0,
            rmse_sd_tasks: 0.1,
            rmse_sd_seeds: 0.0,
            mae_mean: 0.5,
            mae_sd_tasks: 0.05,
            r2_mean: Some(0.9),
            r2_sd_tasks: Some(0.01),
            r2_flagged: 0,
        }
    }

    #[test]
    fn three_decoder_rows_per_direction() {
        let rows: Vec<SummaryRow> = ["flexion", "extension"]
            .iter()
            .flat_map(|d| ["baseline", "li", "lif"].map(|m| summary("s1", m, d)))
            .collect();
        let t = performance_table(&rows);
        for d in ["flexion", "extension"] {
            assert_eq!(t.lines().filter(|l| l.contains(d)).count(), 3);
        }
        assert!(!t.contains("MISSING"));
    }

    #[test]
    fn gaps_are_flagged() {
        let rows = vec![summary("s1", "li", "flexion"), summary("s1", "lif", "extension")];
        let t = performance_table(&rows);
        assert_eq!(t.matches("MISSING").count(), 6);
        assert!(t.contains("2 expected cell(s) missing"));
    }

    #[test]
    fn six_omission_rows_per_model() {
        let rows: Vec<CurveRow> = ["baseline", "li", "lif"]
            .iter()
            .flat_map(|m| {
                (0..6).map(move |k| CurveRow {
                    profile: "s1".into(),
                    model: m.to_string(),
                    omission_pct: 10.0 * k as f64,
                    n_tasks: 20,
                    rmse_mean: 1.0 + k as f64,
                    rmse_sd: 0.1,
                    mae_mean: 0.5,
                    mae_sd: 0.1,
                    r2_mean: None,
                    r2_sd: None,
                })
            })
            .collect();
        let t = robustness_table_text(&rows);
        for m in ["baseline", "li", "lif"] {
            assert_eq!(t.lines().filter(|l| l.split_whitespace().nth(1) == Some(m)).count(), 6);
        }
    }

    #[test]
    fn empty_directory_lists_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = report_tables(dir.path()).unwrap_err().to_string();
        assert!(err.contains(SUMMARY_CSV) && err.contains(CURVES_CSV), "{err}");
    }

    #[test]
    fn partial_run_flags_missing_tables() {
        let dir = tempfile::tempdir().unwrap();
        write_csv(&dir.path().join(SUMMARY_CSV), &[summary("s2", "li", "flexion")]).unwrap();
        let text = report_tables(dir.path()).unwrap();
        assert!(text.contains("Decoder performance"));
        assert!(text.contains("Missing artifacts") && text.contains(CURVES_CSV));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let mut rows = vec![summary("s1", "li", "both")];
        rows[0].r2_mean = None;
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv::<SummaryRow>(&p).unwrap(), rows);
    }
}
