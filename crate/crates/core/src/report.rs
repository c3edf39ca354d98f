//! Session reports: success table, per-trial cursor traces, activation
//! timelines and decoder fit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::FitReport;
use crate::recording::{EventKind, SessionRecording, TrialEndOutcome};
use crate::robot::{self, Gesture, Rgb, BLACK};
use crate::task::{self, Direction, ProtocolPhase, RunSummary, TestMode, TrialOutcome, TrialResult};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mode: TestMode,
    /// Direction code, or `overall`.
    pub direction: String,
    pub n_trials: usize,
    pub n_hits: usize,
    pub success_rate: f64,
    /// Spread of per-run success rates.
    pub success_sd: f64,
    /// Binomial standard deviation over individual trials.
    pub trial_sd: f64,
    pub mean_time_to_target: Option<f64>,
    /// Formatted as `rate (sd)`, e.g. `83.3% (11.7%)`.
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u32,
    pub mode: TestMode,
    pub run: usize,
    pub direction: Direction,
    pub outcome: TrialOutcome,
    pub time_to_target: Option<f64>,
    pub wrong_direction_time: f64,
    pub activation_gaps: usize,
    pub duty_cycle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub partial: bool,
    pub reason: Option<String>,
    pub table: Vec<TableRow>,
    pub trials: Vec<TrialRecord>,
    pub fit_report: Option<FitReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_s: f64,
    pub trial: u32,
    pub mode: TestMode,
    pub x: f64,
    pub y: f64,
    /// Gesture the position sign would command in offline mode.
    pub offline_gesture: Gesture,
    pub offline_eyes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub trial: u32,
    pub direction: Direction,
    pub segment: usize,
    /// Seconds after target onset.
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub report: Report,
    pub traces: Vec<TraceRow>,
    pub activation: Vec<ActivationRow>,
}

impl ReportBundle {
    /// Writes `report.json`, `table.csv`, `trials.csv`, `traces.csv` and `activation.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        write_csv(&dir.join("table.csv"), &self.report.table)?;
        write_csv(&dir.join("trials.csv"), &self.report.trials)?;
        write_csv(&dir.join("traces.csv"), &self.traces)?;
        write_csv(&dir.join("activation.csv"), &self.activation)?;
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `rate (sd)` in percent, one decimal, trailing `.0` dropped.
pub fn format_cell(rate: f64, sd: f64) -> String {
    let pct = |x: f64| {
        let s = format!("{:.1}", x * 100.0);
        s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
    };
    format!("{}% ({}%)", pct(rate), pct(sd))
}

struct OpenTrial {
    mode: TestMode,
    block: usize,
    run: usize,
    direction: Option<Direction>,
    shown_at: f64,
}

pub fn generate_report(rec: &SessionRecording) -> ReportBundle {
    let (dead_zone, tick_s) = rec
        .config
        .as_ref()
        .map(|c| (c.protocol.dead_zone, 1.0 / c.protocol.update_hz))
        .unwrap_or((0.02, 1.0 / 16.0));

    // trial id -> (mode, block, run, direction, shown_at)
    let mut open: BTreeMap<u32, OpenTrial> = BTreeMap::new();
    let mut finished: Vec<(u32, OpenTrial, TrialResult)> = Vec::new();
    let mut block = 0usize;
    let mut phase: Option<ProtocolPhase> = None;
    for e in &rec.events {
        match &e.kind {
            EventKind::PhaseStart { phase: p } => {
                if matches!(p, ProtocolPhase::Test(_)) && matches!(phase, Some(ProtocolPhase::Test(_))) {
                    block += 1;
                }
                phase = Some(*p);
            }
            EventKind::TrialStart { trial, phase: ProtocolPhase::Test(mode), run } => {
                open.insert(*trial, OpenTrial { mode: *mode, block, run: *run, direction: None, shown_at: e.t_s });
            }
            EventKind::TargetShown { trial, direction, .. } => {
                if let Some(t) = open.get_mut(trial) {
                    t.direction = Some(*direction);
                    t.shown_at = e.t_s;
                }
            }
            EventKind::TrialEnd { trial, outcome, wrong_direction_time } => {
                let Some(t) = open.remove(trial) else { continue };
                let Some(direction) = t.direction else { continue };
                let outcome = match outcome {
                    TrialEndOutcome::Hit => TrialOutcome::Hit,
                    TrialEndOutcome::Timeout => TrialOutcome::Timeout,
                    _ => continue,
                };
                let time_to_target = match outcome {
                    TrialOutcome::Hit => Some(e.t_s - t.shown_at),
                    TrialOutcome::Timeout => None,
                };
                let result = TrialResult {
                    direction,
                    outcome,
                    time_to_target,
                    wrong_direction_time: wrong_direction_time.unwrap_or(0.0),
                };
                finished.push((*trial, t, result));
            }
            _ => {}
        }
    }

    let mut ticks_by_trial: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    for row in &rec.cursor {
        ticks_by_trial.entry(row.trial).or_default().push((row.t_s - tick_s, row.active));
    }

    let mut trials = Vec::new();
    let mut activation = Vec::new();
    for (id, t, result) in &finished {
        let ticks = ticks_by_trial.get(id).cloned().unwrap_or_default();
        let timeline = robot::activation_timeline(&ticks, tick_s);
        for (i, seg) in timeline.segments.iter().enumerate() {
            activation.push(ActivationRow {
                trial: *id,
                direction: result.direction,
                segment: i,
                start_s: seg.start_s - t.shown_at,
                end_s: seg.end_s - t.shown_at,
            });
        }
        trials.push(TrialRecord {
            trial: *id,
            mode: t.mode,
            run: t.run,
            direction: result.direction,
            outcome: result.outcome,
            time_to_target: result.time_to_target,
            wrong_direction_time: result.wrong_direction_time,
            activation_gaps: timeline.gaps,
            duty_cycle: timeline.duty_cycle,
        });
    }

    let mut table = Vec::new();
    for mode in TestMode::ALL {
        let mut runs: BTreeMap<(usize, usize), Vec<TrialResult>> = BTreeMap::new();
        for (_, t, r) in finished.iter().filter(|(_, t, _)| t.mode == mode) {
            runs.entry((t.block, t.run)).or_default().push(*r);
        }
        let runs: Vec<Vec<TrialResult>> = runs.into_values().collect();
        if let Ok(summary) = task::summarize(&runs) {
            table.extend(table_rows(mode, &summary));
        }
    }

    let mode_of: BTreeMap<u32, TestMode> = finished.iter().map(|(id, t, _)| (*id, t.mode)).collect();
    let mut traces = Vec::new();
    let mut eyes: Rgb = BLACK;
    for row in &rec.cursor {
        let Some(&mode) = mode_of.get(&row.trial) else { continue };
        let cmd = robot::map_offline([row.x, row.y], mode, dead_zone, eyes);
        eyes = cmd.eye_rgb;
        traces.push(TraceRow {
            t_s: row.t_s,
            trial: row.trial,
            mode,
            x: row.x,
            y: row.y,
            offline_gesture: cmd.gesture,
            offline_eyes: format!("#{:02x}{:02x}{:02x}", cmd.eye_rgb[0], cmd.eye_rgb[1], cmd.eye_rgb[2]),
        });
    }

    ReportBundle {
        report: Report {
            partial: !rec.status.complete || table.is_empty(),
            reason: rec.status.reason.clone().or_else(|| table.is_empty().then(|| "no completed test trials".into())),
            table,
            trials,
            fit_report: rec.model.as_ref().map(|m| m.fit_report.clone()),
        },
        traces,
        activation,
    }
}

fn table_rows(mode: TestMode, s: &RunSummary) -> Vec<TableRow> {
    let row = |direction: String, d: &task::DirectionStats| {
        let p = d.success_rate;
        TableRow {
            mode,
            direction,
            n_trials: d.n_trials,
            n_hits: d.n_hits,
            success_rate: p,
            success_sd: d.success_sd,
            trial_sd: (p * (1.0 - p)).sqrt(),
            mean_time_to_target: d.mean_time_to_target,
            cell: format_cell(p, d.success_sd),
        }
    };
    let mut rows: Vec<TableRow> = s.per_direction.iter().map(|(d, stats)| row(d.code().to_string(), stats)).collect();
    rows.push(row("overall".into(), &s.overall));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::CursorRow;
    use crate::signal::SignalConfig;

    fn synthetic_recording(outcomes: &[(Direction, bool)], run_length: usize) -> SessionRecording {
        let mut rec = SessionRecording::new(SignalConfig::default());
        rec.status.complete = true;
        let mode = TestMode::Horizontal1D;
        rec.push_event(0.0, EventKind::PhaseStart { phase: ProtocolPhase::Test(mode) });
        let mut t = 0.0;
        for (i, &(direction, hit)) in outcomes.iter().enumerate() {
            let trial = i as u32;
            rec.push_event(t, EventKind::TrialStart { trial, phase: ProtocolPhase::Test(mode), run: i / run_length });
            t += 2.0;
            rec.push_event(t, EventKind::TargetShown { trial, direction, center: [0.85, 0.0], radius: 0.15 });
            t += if hit { 2.0 } else { 15.0 };
            let outcome = if hit { TrialEndOutcome::Hit } else { TrialEndOutcome::Timeout };
            rec.push_event(t, EventKind::TrialEnd { trial, outcome, wrong_direction_time: Some(0.0) });
        }
        rec
    }

    #[test]
    fn perfect_horizontal_row() {
        let outcomes: Vec<_> = (0..24).map(|i| (if i % 2 == 0 { Direction::Right } else { Direction::Left }, true)).collect();
        let report = generate_report(&synthetic_recording(&outcomes, 6)).report;
        let overall = report.table.iter().find(|r| r.direction == "overall").unwrap();
        assert_eq!(overall.cell, "100% (0%)");
        assert_eq!(overall.n_trials, 24);
        assert!(!report.partial);
    }

    #[test]
    fn vertical_style_cell() {
        assert_eq!(format_cell(25.0 / 30.0, 0.11667), "83.3% (11.7%)");
    }

    #[test]
    fn empty_test_phase_is_partial() {
        let mut rec = SessionRecording::new(SignalConfig::default());
        rec.status.complete = true;
        let report = generate_report(&rec).report;
        assert!(report.partial);
        assert!(report.table.is_empty());
    }

    #[test]
    fn two_wrong_way_intervals_make_two_gaps() {
        let mut rec = synthetic_recording(&[(Direction::Right, true)], 6);
        // target shown at 2.0 s; ticks end 1/16 s after their start
        let pattern = [true, true, false, false, true, true, true, false, true, true];
        for (i, &active) in pattern.iter().enumerate() {
            rec.cursor.push(CursorRow { t_s: 2.0 + (i + 1) as f64 / 16.0, trial: 0, x: 0.1 * i as f64, y: 0.0, active });
        }
        let bundle = generate_report(&rec);
        assert_eq!(bundle.report.trials[0].activation_gaps, 2);
        assert_eq!(bundle.activation.len(), 3);
        assert_eq!(bundle.activation[0].start_s, 0.0);
        assert_eq!(bundle.traces[0].offline_gesture, Gesture::Idle);
        assert_eq!(bundle.traces[1].offline_gesture, Gesture::RightHand);
    }
}
