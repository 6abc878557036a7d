//! CSV and Markdown run reports.
//!
//! Both formats are rendered from the same rows with the same number
//! formatting, so they carry identical numeric content.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use codesign_core::diversity::{self, DiversityReport};
use codesign_core::model::{EvaluationResult, ParamMap, RunState, RunStatus, Termination};

use crate::store::{write_atomic, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Csv,
    Md,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Md => "md",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("run has not finished its coarse stage (status {0:?})")]
    NotReady(RunStatus),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Shortest round-trip decimal; empty when absent.
pub fn fmt_num(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

const COLUMNS: [&str; 13] = [
    "section",
    "origin",
    "iteration",
    "phase",
    "morphology",
    "reward",
    "status",
    "fitness",
    "volume",
    "efficiency",
    "accepted",
    "metric",
    "value",
];

#[derive(Debug, Clone, Default, PartialEq)]
struct Row {
    section: &'static str,
    origin: String,
    iteration: String,
    phase: String,
    morphology: String,
    reward: String,
    status: String,
    fitness: String,
    volume: String,
    efficiency: String,
    accepted: String,
    metric: String,
    value: String,
}

impl Row {
    fn result(section: &'static str, r: &EvaluationResult) -> Row {
        Row {
            section,
            morphology: r.pair.morphology_id.clone(),
            reward: r.pair.reward_id.clone(),
            status: r.status.as_str().to_string(),
            fitness: fmt_num(r.fitness),
            volume: fmt_num(r.volume),
            efficiency: fmt_num(r.efficiency),
            ..Row::default()
        }
    }

    fn metric(name: String, value: Option<f64>) -> Row {
        Row {
            section: "diversity",
            metric: name,
            value: fmt_num(value),
            ..Row::default()
        }
    }

    fn cells(&self) -> [&str; 13] {
        [
            self.section,
            &self.origin,
            &self.iteration,
            &self.phase,
            &self.morphology,
            &self.reward,
            &self.status,
            &self.fitness,
            &self.volume,
            &self.efficiency,
            &self.accepted,
            &self.metric,
            &self.value,
        ]
    }
}

/// Diversity of the coarse-stage proposals.
pub fn proposal_diversity(state: &RunState) -> DiversityReport {
    let morphs: Vec<ParamMap> = state.morphologies.iter().map(|m| m.values.clone()).collect();
    let rewards: Vec<&str> = state.rewards.iter().map(|r| r.source.as_str()).collect();
    diversity::report(&morphs, &rewards, &state.schema)
}

struct Tables {
    best: Option<Row>,
    best_coarse: Option<Row>,
    grid: Vec<Row>,
    diversity: Vec<Row>,
    fine: Vec<Row>,
}

fn tables(state: &RunState) -> Tables {
    let grid = state
        .grid_keys()
        .iter()
        .map(|k| match state.grid.get(k) {
            Some(r) => Row::result("grid", r),
            None => Row {
                section: "grid",
                morphology: k.morphology_id.clone(),
                reward: k.reward_id.clone(),
                status: "pending".into(),
                ..Row::default()
            },
        })
        .collect();
    let d = proposal_diversity(state);
    let mut diversity: Vec<Row> = d
        .per_param_cv
        .iter()
        .map(|(k, v)| Row::metric(format!("cv:{k}"), *v))
        .collect();
    diversity.push(Row::metric("cv_aggregate".into(), d.aggregate_cv));
    diversity.push(Row::metric("self_bleu".into(), d.self_bleu));
    let mut fine = Vec::new();
    for (origin, steps) in &state.fine_trajectories {
        for s in steps {
            let mut row = Row::result("fine", &s.result);
            row.origin = origin.to_string();
            row.iteration = s.iteration.to_string();
            row.phase = s.phase.as_str().to_string();
            row.accepted = s.accepted.to_string();
            fine.push(row);
        }
    }
    Tables {
        best: state.best_overall().map(|r| Row::result("best", r)),
        best_coarse: state.best_coarse().map(|r| Row::result("best_coarse", r)),
        grid,
        diversity,
        fine,
    }
}

pub fn render_csv(state: &RunState) -> String {
    let t = tables(state);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).expect("in-memory write");
    let all = t
        .best
        .iter()
        .chain(t.best_coarse.iter())
        .chain(t.grid.iter())
        .chain(t.diversity.iter())
        .chain(t.fine.iter());
    for row in all {
        w.write_record(row.cells()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

fn md_table(out: &mut String, headers: &[&str], rows: impl Iterator<Item = Vec<String>>) {
    let _ = writeln!(out, "| {} |", headers.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(headers.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn result_cols(r: &Row) -> Vec<String> {
    vec![
        r.morphology.clone(),
        r.reward.clone(),
        r.status.clone(),
        r.fitness.clone(),
        r.volume.clone(),
        r.efficiency.clone(),
    ]
}

const RESULT_HEADERS: [&str; 6] = ["morphology", "reward", "status", "fitness", "volume", "efficiency"];

pub fn render_md(state: &RunState) -> String {
    let t = tables(state);
    let mut out = String::from("# Run report\n\n");
    let _ = writeln!(out, "Status: {:?}\n", state.status);
    if let Some(reason) = &state.abort_reason {
        let _ = writeln!(out, "Abort reason: {reason}\n");
    }
    out.push_str("## Best pair\n\n");
    match (&t.best, &t.best_coarse) {
        (Some(b), Some(c)) => md_table(
            &mut out,
            &["", "morphology", "reward", "status", "fitness", "volume", "efficiency"],
            [("overall", b), ("coarse", c)].into_iter().map(|(label, r)| {
                let mut cols = vec![label.to_string()];
                cols.extend(result_cols(r));
                cols
            }),
        ),
        _ => out.push_str("No best pair: no evaluation finished with status ok.\n\n"),
    }
    let _ = writeln!(out, "## Coarse grid ({} cells)\n", t.grid.len());
    md_table(&mut out, &RESULT_HEADERS, t.grid.iter().map(result_cols));
    out.push_str("## Diversity of proposals\n\n");
    md_table(
        &mut out,
        &["metric", "value"],
        t.diversity.iter().map(|r| vec![r.metric.clone(), r.value.clone()]),
    );
    out.push_str("## Fine trajectories\n\n");
    if state.fine_trajectories.is_empty() {
        out.push_str("No refinement steps.\n\n");
    }
    for (origin, outcome) in &state.fine_outcomes {
        let how = match &outcome.termination {
            Termination::Converged => "converged".to_string(),
            Termination::IterationCap => "iteration cap".to_string(),
            Termination::ProviderFailure(d) => format!("provider failure: {d}"),
        };
        let _ = writeln!(
            out,
            "- {origin}: {} iteration(s), {how}, final {}_{} efficiency {}",
            outcome.iterations,
            outcome.best.pair.morphology_id,
            outcome.best.pair.reward_id,
            fmt_num(outcome.best.efficiency)
        );
    }
    if !state.fine_outcomes.is_empty() {
        out.push('\n');
    }
    if !t.fine.is_empty() {
        let mut headers = vec!["origin", "iteration", "phase"];
        headers.extend(RESULT_HEADERS);
        headers.push("accepted");
        md_table(
            &mut out,
            &headers,
            t.fine.iter().map(|r| {
                let mut cols = vec![r.origin.clone(), r.iteration.clone(), r.phase.clone()];
                cols.extend(result_cols(r));
                cols.push(r.accepted.clone());
                cols
            }),
        );
    }
    out
}

pub fn render(state: &RunState, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(state),
        ReportFormat::Md => render_md(state),
    }
}

/// Writes `report.<ext>` into `dir`. The coarse grid must be complete.
pub fn write_report(state: &RunState, format: ReportFormat, dir: &Path) -> Result<PathBuf, ReportError> {
    let grid_complete = !state.grid.is_empty() && state.grid.len() == state.grid_keys().len();
    match state.status {
        RunStatus::Coarse => return Err(ReportError::NotReady(state.status)),
        RunStatus::Aborted if !grid_complete => return Err(ReportError::NotReady(state.status)),
        _ => {}
    }
    let path = dir.join(format!("report.{}", format.extension()));
    write_atomic(&path, render(state, format).as_bytes())?;
    Ok(path)
}
