//! Linear velocity decoder.
//!
//! Each axis is an independent linear model over the lag-embedded feature
//! vector: `u[t] = a0 + Σ_n Σ_k b_nk · e_n[t - k·stride]` (and likewise `v`).
//! Coefficients are stored in [`LagWindow::feature_vector`] order, intercept
//! first.
//!
//! Calibration solves the (optionally ridge-penalised) least-squares problem
//! with a Householder QR of the column-equilibrated design matrix. The
//! intercept is never penalised.
//!
//! [`LagWindow::feature_vector`]: crate::signal::LagWindow::feature_vector

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recording::{EventKind, SessionRecording};
use crate::signal::{window::embed_at, BandFilter, SampleFrame, SignalConfig, SignalError};
use crate::task::ProtocolPhase;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Pivot magnitude, relative to the largest, below which the equilibrated
/// design is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("no training trials found in the recording")]
    EmptyTraining,
    #[error("training data contains non-finite values at row {row}")]
    Data { row: usize },
    #[error("design matrix is rank deficient ({rows} rows, {cols} columns); retry with ridge_lambda > 0")]
    Singular { rows: usize, cols: usize },
    #[error("observed {axis} velocity has zero variance; correlation undefined")]
    UndefinedCorrelation { axis: char, report: FitReport },
    #[error("cannot evaluate on an empty training set")]
    EmptyEvaluation,
    #[error("unsupported model format_version {0}")]
    FormatVersion(u32),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rows of `(features, u, v)` in a flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    width: usize,
    features: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    pub trial_ids: Vec<u32>,
}

impl TrainingSet {
    pub fn new(width: usize) -> Self {
        Self { width, features: Vec::new(), u: Vec::new(), v: Vec::new(), trial_ids: Vec::new() }
    }

    pub fn push(&mut self, features: &[f64], u: f64, v: f64) -> Result<(), DecoderError> {
        if features.len() != self.width {
            return Err(DecoderError::Config(format!(
                "row has {} features, training set width is {}",
                features.len(),
                self.width
            )));
        }
        self.features.extend_from_slice(features);
        self.u.push(u);
        self.v.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> (&[f64], f64, f64) {
        (&self.features[i * self.width..(i + 1) * self.width], self.u[i], self.v[i])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64, f64)> {
        (0..self.len()).map(|i| self.row(i))
    }

    /// Rows needed before an unpenalised fit is considered well posed.
    pub fn recommended_rows(&self) -> usize {
        10 * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `None` when the observed series is constant.
    pub pearson_r_x: Option<f64>,
    pub pearson_r_y: Option<f64>,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub n_rows: usize,
    pub ridge_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: SignalConfig,
    pub axis_x: Vec<f64>,
    pub axis_y: Vec<f64>,
    pub fit_report: FitReport,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: SignalConfig,
    axis_x: Vec<f64>,
    axis_y: Vec<f64>,
    fit_report: FitReport,
    format_version: u32,
}

impl DecoderModel {
    pub fn new(config: SignalConfig, axis_x: Vec<f64>, axis_y: Vec<f64>, fit_report: FitReport) -> Result<Self, DecoderError> {
        config.validate()?;
        let n = config.feature_len();
        if axis_x.len() != n || axis_y.len() != n {
            return Err(DecoderError::Config(format!(
                "coefficient vectors have lengths {}/{}, configuration needs {n}",
                axis_x.len(),
                axis_y.len()
            )));
        }
        if axis_x.iter().chain(&axis_y).any(|c| !c.is_finite()) {
            return Err(DecoderError::Config("non-finite coefficient".into()));
        }
        Ok(Self { config, axis_x, axis_y, fit_report })
    }

    /// Rejects use with any configuration other than the one frozen at fit time.
    pub fn check_config(&self, cfg: &SignalConfig) -> Result<(), DecoderError> {
        if *cfg != self.config {
            return Err(DecoderError::Config(format!(
                "model was fit with {:?}, session uses {:?}",
                self.config, cfg
            )));
        }
        Ok(())
    }

    pub fn predict(&self, features: &[f64]) -> Result<(f64, f64), DecoderError> {
        if features.len() != self.axis_x.len() {
            return Err(DecoderError::Config(format!(
                "feature vector has {} entries, model expects {}",
                features.len(),
                self.axis_x.len()
            )));
        }
        let dot = |c: &[f64]| c.iter().zip(features).map(|(a, b)| a * b).sum::<f64>();
        Ok((dot(&self.axis_x), dot(&self.axis_y)))
    }

    pub fn to_json(&self) -> Result<String, DecoderError> {
        let file = ModelFile {
            config: self.config,
            axis_x: self.axis_x.clone(),
            axis_y: self.axis_y.clone(),
            fit_report: self.fit_report.clone(),
            format_version: MODEL_FORMAT_VERSION,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DecoderError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_FORMAT_VERSION {
            return Err(DecoderError::FormatVersion(version));
        }
        let file: ModelFile = serde_json::from_value(raw)?;
        Self::new(file.config, file.axis_x, file.axis_y, file.fit_report)
    }

    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Builds the calibration set from the training trials of a recording.
///
/// The whole signal stream is filtered from its first sample (when the
/// configuration enables the front-end filter), then one row is emitted per
/// sample whose full lag window lies inside a training trial.
pub fn assemble_training_set(recording: &SessionRecording, cfg: &SignalConfig) -> Result<TrainingSet, DecoderError> {
    cfg.validate()?;
    if recording.signal_config.n_channels != cfg.n_channels {
        return Err(DecoderError::Config(format!(
            "recording has {} channels, decoder configured for {}",
            recording.signal_config.n_channels, cfg.n_channels
        )));
    }
    let trials = training_trials(recording, cfg);
    if trials.is_empty() {
        return Err(DecoderError::EmptyTraining);
    }
    let frames = conditioned_frames(&recording.frames, cfg)?;
    let first_t = frames.first().map(|f| f.t).unwrap_or(0);
    let reference: HashMap<u64, (f64, f64)> = recording.reference.iter().map(|r| (r.t, (r.u, r.v))).collect();

    let cold = cfg.window_len() - 1;
    let mut set = TrainingSet::new(cfg.feature_len());
    let mut row = vec![0.0; cfg.feature_len()];
    for (trial, start, end) in trials {
        for t in start + cold as u64..end {
            let Some(&(u, v)) = reference.get(&t) else { continue };
            let idx = (t - first_t) as usize;
            if idx >= frames.len() {
                break;
            }
            embed_at(&frames, idx + 1, cfg, &mut row);
            set.push(&row, u, v)?;
            set.trial_ids.push(trial);
        }
    }
    if set.is_empty() {
        return Err(DecoderError::EmptyTraining);
    }
    Ok(set)
}

/// Applies the configured front end to a whole stream.
pub fn conditioned_frames(frames: &[SampleFrame], cfg: &SignalConfig) -> Result<Vec<SampleFrame>, DecoderError> {
    if !cfg.front_end_filter {
        for f in frames {
            f.check(cfg.n_channels)?;
        }
        return Ok(frames.to_vec());
    }
    let mut filter = BandFilter::new(cfg)?;
    Ok(frames.iter().map(|f| filter.step(f)).collect::<Result<_, _>>()?)
}

/// `(trial id, first sample, one past last sample)` for each training trial.
fn training_trials(recording: &SessionRecording, cfg: &SignalConfig) -> Vec<(u32, u64, u64)> {
    let to_sample = |t_s: f64| (t_s * cfg.sample_rate_hz).round() as u64;
    let mut open: Option<(u32, u64)> = None;
    let mut trials = Vec::new();
    for event in &recording.events {
        match &event.kind {
            EventKind::TrialStart { trial, phase: ProtocolPhase::Training(_), .. } => {
                open = Some((*trial, to_sample(event.t_s)));
            }
            EventKind::TrialEnd { trial, .. } => {
                if let Some((id, start)) = open.take() {
                    if id == *trial {
                        trials.push((id, start, to_sample(event.t_s)));
                    }
                }
            }
            _ => {}
        }
    }
    trials
}

/// Fits both axes by penalised least squares.
pub fn fit(ts: &TrainingSet, ridge_lambda: f64, cfg: &SignalConfig) -> Result<DecoderModel, DecoderError> {
    if ts.width() != cfg.feature_len() {
        return Err(DecoderError::Config(format!(
            "training set width {} does not match configuration ({})",
            ts.width(),
            cfg.feature_len()
        )));
    }
    let (axis_x, axis_y) = solve_least_squares(ts, ridge_lambda)?;
    let mut model = DecoderModel::new(*cfg, axis_x, axis_y, placeholder_report(ts.len(), ridge_lambda))?;
    model.fit_report = fit_metrics(&model, ts, ridge_lambda);
    Ok(model)
}

fn placeholder_report(n_rows: usize, ridge_lambda: f64) -> FitReport {
    FitReport { pearson_r_x: None, pearson_r_y: None, rmse_x: 0.0, rmse_y: 0.0, n_rows, ridge_lambda }
}

/// Solves `min ‖Xθ − y‖² + λ‖θ[1..]‖²` for the u and v targets.
pub fn solve_least_squares(ts: &TrainingSet, ridge_lambda: f64) -> Result<(Vec<f64>, Vec<f64>), DecoderError> {
    if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
        return Err(DecoderError::Config(format!("ridge_lambda must be a nonnegative number, got {ridge_lambda}")));
    }
    let (m, p) = (ts.len(), ts.width());
    if p == 0 {
        return Err(DecoderError::Config("training set has no feature columns".into()));
    }
    if let Some(row) = (0..m).find(|&i| {
        let (f, u, v) = ts.row(i);
        !(u.is_finite() && v.is_finite() && f.iter().all(|x| x.is_finite()))
    }) {
        return Err(DecoderError::Data { row });
    }
    let penalised = if ridge_lambda > 0.0 { p - 1 } else { 0 };
    let rows = m + penalised;
    if rows < p {
        return Err(DecoderError::Singular { rows: m, cols: p });
    }

    let root = ridge_lambda.sqrt();
    let mut design = DMatrix::from_fn(rows, p, |i, j| {
        if i < m {
            ts.features[i * p + j]
        } else if j == i - m + 1 {
            root
        } else {
            0.0
        }
    });
    let mut rhs = DMatrix::from_fn(rows, 2, |i, j| match (i < m, j) {
        (true, 0) => ts.u[i],
        (true, _) => ts.v[i],
        _ => 0.0,
    });

    // Equilibrate columns so the rank test is scale free.
    let mut scale = vec![0.0; p];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = design.column(j).norm();
        if norm == 0.0 {
            return Err(DecoderError::Singular { rows: m, cols: p });
        }
        *s = 1.0 / norm;
        design.column_mut(j).scale_mut(*s);
    }

    let qr = design.qr();
    let r = qr.r();
    let max_pivot = r.diagonal().iter().fold(0.0f64, |a, d| a.max(d.abs()));
    if r.diagonal().iter().any(|d| d.abs() <= RANK_TOLERANCE * max_pivot) {
        return Err(DecoderError::Singular { rows: m, cols: p });
    }
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, p).into_owned();
    let z = r
        .solve_upper_triangular(&top)
        .ok_or(DecoderError::Singular { rows: m, cols: p })?;

    let unscale = |col: usize| -> Vec<f64> { (0..p).map(|j| z[(j, col)] * scale[j]).collect() };
    Ok((unscale(0), unscale(1)))
}

fn fit_metrics(model: &DecoderModel, ts: &TrainingSet, ridge_lambda: f64) -> FitReport {
    let mut report = match evaluate(model, ts) {
        Ok(r) => r,
        Err(DecoderError::UndefinedCorrelation { report, .. }) => report,
        Err(_) => placeholder_report(ts.len(), ridge_lambda),
    };
    report.ridge_lambda = ridge_lambda;
    report
}

/// Pearson r and RMSE per axis between observed and decoded velocities.
pub fn evaluate(model: &DecoderModel, ts: &TrainingSet) -> Result<FitReport, DecoderError> {
    if ts.is_empty() {
        return Err(DecoderError::EmptyEvaluation);
    }
    let mut pred_u = Vec::with_capacity(ts.len());
    let mut pred_v = Vec::with_capacity(ts.len());
    for (features, _, _) in ts.rows() {
        let (u, v) = model.predict(features)?;
        pred_u.push(u);
        pred_v.push(v);
    }
    let report = FitReport {
        pearson_r_x: pearson(&ts.u, &pred_u),
        pearson_r_y: pearson(&ts.v, &pred_v),
        rmse_x: rmse(&ts.u, &pred_u),
        rmse_y: rmse(&ts.v, &pred_v),
        n_rows: ts.len(),
        ridge_lambda: model.fit_report.ridge_lambda,
    };
    match (report.pearson_r_x, report.pearson_r_y) {
        (None, _) => Err(DecoderError::UndefinedCorrelation { axis: 'x', report }),
        (_, None) => Err(DecoderError::UndefinedCorrelation { axis: 'y', report }),
        _ => Ok(report),
    }
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return None;
    }
    let mean = |x: &[f64]| x[..n].iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize, k: usize) -> SignalConfig {
        SignalConfig { n_channels: n, lag_count: k, ..Default::default() }
    }

    fn random_set(rows: usize, width: usize, seed: u64, theta: Option<(&[f64], &[f64])>) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts = TrainingSet::new(width);
        for _ in 0..rows {
            let mut f: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
            f[0] = 1.0;
            let (u, v) = match theta {
                Some((tx, ty)) => (dot(tx, &f), dot(ty, &f)),
                None => (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            ts.push(&f, u, v).unwrap();
        }
        ts
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Independent oracle: explicit XᵀX / Xᵀy and Gauss-Jordan elimination
    /// with partial pivoting.
    fn normal_equations(ts: &TrainingSet, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let p = ts.width();
        let mut a = vec![vec![0.0; p + 2]; p];
        for (f, u, v) in ts.rows() {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += f[i] * f[j];
                }
                a[i][p] += f[i] * u;
                a[i][p + 1] += f[i] * v;
            }
        }
        for (i, row) in a.iter_mut().enumerate().skip(1) {
            row[i] += lambda;
        }
        for col in 0..p {
            let pivot = (col..p).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, pivot);
            let d = a[col][col];
            a[col].iter_mut().for_each(|x| *x /= d);
            let pivot_row = a[col].clone();
            for (r, row) in a.iter_mut().enumerate() {
                if r != col {
                    let factor = row[col];
                    row.iter_mut().zip(&pivot_row).for_each(|(x, c)| *x -= factor * c);
                }
            }
        }
        (a.iter().map(|r| r[p]).collect(), a.iter().map(|r| r[p + 1]).collect())
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn noiseless_rows_recover_coefficients() {
        let c = cfg(4, 2);
        let width = c.feature_len();
        let tx: Vec<f64> = (0..width).map(|i| (i as f64 * 0.37).sin()).collect();
        let ty: Vec<f64> = (0..width).map(|i| (i as f64 * 0.11).cos() - 0.2).collect();
        let ts = random_set(400, width, 3, Some((&tx, &ty)));
        let model = fit(&ts, 0.0, &c).unwrap();
        let inf = |x: &[f64]| x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(max_abs_diff(&model.axis_x, &tx) / inf(&tx) <= 1e-6);
        assert!(max_abs_diff(&model.axis_y, &ty) / inf(&ty) <= 1e-6);
        for (f, u, v) in ts.rows() {
            let (pu, pv) = model.predict(f).unwrap();
            assert!((pu - u).abs() <= 1e-6 && (pv - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn matches_normal_equation_oracle() {
        let c = cfg(3, 1);
        let ts = random_set(50, c.feature_len(), 11, None);
        let (ox, oy) = normal_equations(&ts, 0.0);
        let model = fit(&ts, 0.0, &c).unwrap();
        assert!(max_abs_diff(&model.axis_x, &ox) <= 1e-9);
        assert!(max_abs_diff(&model.axis_y, &oy) <= 1e-9);
    }

    #[test]
    fn ridge_matches_penalised_normal_equations() {
        let c = cfg(3, 1);
        let ts = random_set(60, c.feature_len(), 12, None);
        let (ox, oy) = normal_equations(&ts, 2.5);
        let (x, y) = solve_least_squares(&ts, 2.5).unwrap();
        assert!(max_abs_diff(&x, &ox) <= 1e-9);
        assert!(max_abs_diff(&y, &oy) <= 1e-9);
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let c = cfg(3, 2);
        let ts = random_set(200, c.feature_len(), 5, None);
        for lambda in [0.0, 0.7] {
            let (x, _) = solve_least_squares(&ts, lambda).unwrap();
            let p = ts.width();
            let mut grad = vec![0.0; p];
            let mut gram_max = 0.0f64;
            for (f, u, _) in ts.rows() {
                let r = dot(&x, f) - u;
                for j in 0..p {
                    grad[j] += f[j] * r;
                    gram_max = gram_max.max((f[j] * f[j]).abs());
                }
            }
            for j in 1..p {
                grad[j] += lambda * x[j];
            }
            let scale = gram_max * ts.len() as f64;
            assert!(grad.iter().all(|g| g.abs() <= 1e-8 * scale), "{grad:?}");
        }
    }

    #[test]
    fn underdetermined_fit_is_singular() {
        let c = SignalConfig::default();
        let ts = random_set(84, 85, 1, None);
        assert!(matches!(fit(&ts, 0.0, &c), Err(DecoderError::Singular { rows: 84, cols: 85 })));
        assert!(fit(&ts, 0.1, &c).is_ok());
    }

    #[test]
    fn duplicated_column_is_singular_without_ridge() {
        let mut ts = TrainingSet::new(3);
        for i in 0..40 {
            let x = (i as f64 * 0.3).sin();
            ts.push(&[1.0, x, x], x, -x).unwrap();
        }
        assert!(matches!(solve_least_squares(&ts, 0.0), Err(DecoderError::Singular { .. })));
        assert!(solve_least_squares(&ts, 1e-3).is_ok());
    }

    #[test]
    fn non_finite_rows_are_rejected() {
        let mut ts = TrainingSet::new(2);
        ts.push(&[1.0, 0.5], 1.0, 0.0).unwrap();
        ts.push(&[1.0, f64::NAN], 1.0, 0.0).unwrap();
        assert!(matches!(solve_least_squares(&ts, 0.0), Err(DecoderError::Data { row: 1 })));
    }

    #[test]
    fn intercept_only_model() {
        let c = cfg(2, 1);
        let mut ax = vec![0.0; c.feature_len()];
        let mut ay = ax.clone();
        ax[0] = 0.3;
        ay[0] = -0.1;
        let model = DecoderModel::new(c, ax, ay, placeholder_report(0, 0.0)).unwrap();
        assert_eq!(model.predict(&[1.0, 4.0, -2.0, 7.0, 0.5]).unwrap(), (0.3, -0.1));
    }

    #[test]
    fn hand_computed_dot_product() {
        let c = SignalConfig { n_channels: 1, lag_count: 0, ..Default::default() };
        let model = DecoderModel::new(c, vec![1.0, 2.0], vec![0.0, -1.0], placeholder_report(0, 0.0)).unwrap();
        assert_eq!(model.predict(&[1.0, 0.5]).unwrap(), (2.0, -0.5));
        assert!(matches!(model.predict(&[1.0]), Err(DecoderError::Config(_))));
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let c = cfg(2, 1);
        let model = DecoderModel::new(c, vec![0.0; 5], vec![0.0; 5], placeholder_report(0, 0.0)).unwrap();
        assert!(model.check_config(&c).is_ok());
        assert!(model.check_config(&SignalConfig { lag_stride: 2, ..c }).is_err());
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let obs = [0.1, -0.4, 0.9, 0.3];
        assert_eq!(pearson(&obs, &obs), Some(1.0));
        assert_eq!(rmse(&obs, &obs), 0.0);
        let neg: Vec<f64> = obs.iter().map(|x| -x).collect();
        assert!((pearson(&obs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
    }

    #[test]
    fn constant_target_reports_rmse_only() {
        let c = cfg(1, 0);
        let mut ts = TrainingSet::new(2);
        for i in 0..30 {
            let x = i as f64 / 10.0;
            ts.push(&[1.0, x], 2.0 * x, 0.0).unwrap();
        }
        let model = fit(&ts, 0.0, &c).unwrap();
        assert_eq!(model.fit_report.pearson_r_y, None);
        match evaluate(&model, &ts) {
            Err(DecoderError::UndefinedCorrelation { axis: 'y', report }) => {
                assert!(report.rmse_y < 1e-12);
                assert!((report.pearson_r_x.unwrap() - 1.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn model_file_round_trip_and_version_check() {
        let c = cfg(3, 1);
        let ts = random_set(80, c.feature_len(), 2, None);
        let model = fit(&ts, 0.0, &c).unwrap();
        let text = model.to_json().unwrap();
        let back = DecoderModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(DecoderModel::from_json(&bumped), Err(DecoderError::FormatVersion(2))));
    }

    #[test]
    fn repeated_fits_are_bit_identical() {
        let c = cfg(3, 1);
        let ts = random_set(70, c.feature_len(), 9, None);
        assert_eq!(fit(&ts, 0.0, &c).unwrap(), fit(&ts, 0.0, &c).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn channel_permutation_leaves_predictions(seed in 0u64..1000) {
            // 3 channels, K=1: blocks of 2 taps after the intercept.
            let c = cfg(3, 1);
            let ts = random_set(60, c.feature_len(), seed, None);
            let perm = [1usize, 2, 0];
            let mut permuted = TrainingSet::new(ts.width());
            for (f, u, v) in ts.rows() {
                let mut g = vec![1.0];
                for &src in &perm {
                    g.extend_from_slice(&f[1 + src * 2..3 + src * 2]);
                }
                permuted.push(&g, u, v).unwrap();
            }
            let a = fit(&ts, 0.0, &c).unwrap();
            let b = fit(&permuted, 0.0, &c).unwrap();
            for (slot, &src) in perm.iter().enumerate() {
                for k in 0..2 {
                    prop_assert!((b.axis_x[1 + slot * 2 + k] - a.axis_x[1 + src * 2 + k]).abs() <= 1e-9);
                }
            }
            for i in 0..ts.len() {
                let (pa, _) = a.predict(ts.row(i).0).unwrap();
                let (pb, _) = b.predict(permuted.row(i).0).unwrap();
                prop_assert!((pa - pb).abs() <= 1e-9);
            }
        }

        #[test]
        fn voltage_scaling_rescales_slopes(seed in 0u64..1000, s in 0.01f64..100.0) {
            let c = cfg(2, 1);
            let ts = random_set(50, c.feature_len(), seed, None);
            let mut scaled = TrainingSet::new(ts.width());
            for (f, u, v) in ts.rows() {
                let g: Vec<f64> = f.iter().enumerate().map(|(j, x)| if j == 0 { *x } else { x * s }).collect();
                scaled.push(&g, u, v).unwrap();
            }
            let a = fit(&ts, 0.0, &c).unwrap();
            let b = fit(&scaled, 0.0, &c).unwrap();
            for j in 1..ts.width() {
                prop_assert!((b.axis_x[j] * s - a.axis_x[j]).abs() <= 1e-6 * (1.0 + a.axis_x[j].abs()));
            }
            for i in 0..ts.len() {
                let (pa, qa) = a.predict(ts.row(i).0).unwrap();
                let (pb, qb) = b.predict(scaled.row(i).0).unwrap();
                prop_assert!((pa - pb).abs() <= 1e-6 && (qa - qb).abs() <= 1e-6);
            }
        }

        #[test]
        fn noise_channel_barely_moves_ridge_predictions(seed in 0u64..1000) {
            // Targets are an exact function of channel 0; channel 1 is noise.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut base, mut extra) = (TrainingSet::new(2), TrainingSet::new(3));
            for _ in 0..400 {
                let x: f64 = rng.random_range(-1.0..1.0);
                let noise: f64 = rng.random_range(-1.0..1.0);
                base.push(&[1.0, x], 0.5 * x + 0.1, -x).unwrap();
                extra.push(&[1.0, x, noise], 0.5 * x + 0.1, -x).unwrap();
            }
            let lambda = 1e-6;
            let (a, _) = solve_least_squares(&base, lambda).unwrap();
            let (b, _) = solve_least_squares(&extra, lambda).unwrap();
            for i in 0..base.len() {
                let pa = dot(&a, base.row(i).0);
                let pb = dot(&b, extra.row(i).0);
                prop_assert!((pa - pb).abs() <= 1e-6);
            }
        }
    }
}
