//! Per-panel output models: a panel's expected production is estimated from
//! the simultaneous output of n other panels, so the residual
//! `observed - predicted` isolates panel-local loss from array-wide weather.
//! Three estimator kinds (row-mean, least squares, bootstrapped tree
//! ensemble), plus median-profile removal of recurring daily transients like
//! static shade.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DaySlice, SLOTS_PER_DAY};
use crate::forest::{bootstrap_indices, fit_regression_tree, Tree, TreeParams};
use crate::seeds;

/// Minimum complete training rows per model parameter (inputs + target).
pub const MIN_ROWS_PER_PARAM: usize = 10;
/// Days of residual history needed before a seasonal profile is trusted.
pub const SEASONAL_MIN_DAYS: usize = 7;
/// Trailing window of residual history the seasonal profile is computed over.
pub const SEASONAL_WINDOW_DAYS: usize = 14;
/// Predictions are clamped to this multiple of the target's nameplate.
pub const PREDICTION_CLAMP_FACTOR: f64 = 1.25;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("need {needed} complete training rows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("model has no input panels")]
    NoInputs,
    #[error("target panel `{0}` listed among inputs")]
    TargetAmongInputs(String),
    #[error("panel `{0}` absent from the day's data")]
    MissingInputPanel(String),
    #[error("vector lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need {needed} days of residual history, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    NaiveMean,
    Linear,
    Ensemble,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::NaiveMean => "naive-mean",
            ModelKind::Linear => "linear",
            ModelKind::Ensemble => "ensemble",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive-mean" | "naive" => Ok(ModelKind::NaiveMean),
            "linear" => Ok(ModelKind::Linear),
            "ensemble" => Ok(ModelKind::Ensemble),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelParams {
    NaiveMean,
    Linear { weights: Vec<f64>, intercept: f64, ridge_fallback: bool },
    Ensemble { trees: Vec<Tree> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub days: usize,
    pub rows: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionModel {
    pub target_panel_id: String,
    pub input_panel_ids: Vec<String>,
    pub kind: ModelKind,
    pub nameplate_w: f64,
    pub params: ModelParams,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of bootstrapped trees in an ensemble.
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Least-squares intercept; turning it off restores the pure
    /// weighted-sum form.
    pub with_intercept: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { trees: 50, max_depth: 12, min_leaf: 5, with_intercept: true, seed: 0 }
    }
}

/// Complete (inputs, target) training rows gathered across day slices.
fn training_rows(
    target: &str,
    inputs: &[String],
    training: &[DaySlice],
) -> Result<(Vec<Vec<f64>>, Vec<f64>), ModelError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for day in training {
        if day.is_empty() {
            continue;
        }
        let tcol = day
            .panel_index(target)
            .ok_or_else(|| ModelError::MissingInputPanel(target.to_string()))?;
        let icols: Vec<usize> = inputs
            .iter()
            .map(|id| {
                day.panel_index(id)
                    .ok_or_else(|| ModelError::MissingInputPanel(id.clone()))
            })
            .collect::<Result<_, _>>()?;
        for row in 0..day.num_rows() {
            let Some(y) = day.get(row, tcol) else { continue };
            let x: Option<Vec<f64>> = icols.iter().map(|&c| day.get(row, c)).collect();
            if let Some(x) = x {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    Ok((xs, ys))
}

/// Sort training rows by content so fitted parameters (and bootstrap draws)
/// do not depend on the order rows arrived in.
fn canonicalize_rows(xs: &mut [Vec<f64>], ys: &mut [f64]) {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| {
        xs[a]
            .iter()
            .zip(&xs[b])
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| ys[a].total_cmp(&ys[b]))
    });
    let sorted_x: Vec<Vec<f64>> = order.iter().map(|&i| xs[i].clone()).collect();
    let sorted_y: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    xs.clone_from_slice(&sorted_x);
    ys.copy_from_slice(&sorted_y);
}

/// Solve the symmetric system `a x = b` by Gaussian elimination with partial
/// pivoting; `None` when effectively singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        .max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in (col + 1)..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Least squares of target on inputs via normal equations; ridge fallback
/// (lambda = 1e-6) when the design is singular, e.g. duplicated inputs.
fn fit_linear(
    xs: &[Vec<f64>],
    ys: &[f64],
    with_intercept: bool,
) -> (Vec<f64>, f64, bool) {
    let n = xs[0].len();
    let dims = n + usize::from(with_intercept);
    let row_of = |x: &[f64]| -> Vec<f64> {
        let mut r = x.to_vec();
        if with_intercept {
            r.push(1.0);
        }
        r
    };
    let mut xtx = vec![vec![0.0; dims]; dims];
    let mut xty = vec![0.0; dims];
    for (x, &y) in xs.iter().zip(ys) {
        let r = row_of(x);
        for i in 0..dims {
            for j in 0..dims {
                xtx[i][j] += r[i] * r[j];
            }
            xty[i] += r[i] * y;
        }
    }
    let (solution, ridge) = match solve_dense(xtx.clone(), xty.clone()) {
        Some(s) => (s, false),
        None => {
            for (i, row) in xtx.iter_mut().enumerate() {
                row[i] += 1e-6;
            }
            (
                solve_dense(xtx, xty).expect("ridge-regularized system is nonsingular"),
                true,
            )
        }
    };
    let mut weights = solution;
    let intercept = if with_intercept { weights.pop().unwrap() } else { 0.0 };
    (weights, intercept, ridge)
}

/// Fit a model of `target` from `inputs` on the training days.
pub fn fit(
    kind: ModelKind,
    target: &str,
    inputs: &[String],
    training: &[DaySlice],
    nameplate_w: f64,
    cfg: &FitConfig,
) -> Result<PredictionModel, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::NoInputs);
    }
    if inputs.iter().any(|id| id == target) {
        return Err(ModelError::TargetAmongInputs(target.to_string()));
    }
    let (mut xs, mut ys) = training_rows(target, inputs, training)?;
    let needed = MIN_ROWS_PER_PARAM * (inputs.len() + 1);
    if xs.len() < needed {
        return Err(ModelError::InsufficientData { needed, got: xs.len() });
    }
    canonicalize_rows(&mut xs, &mut ys);

    let params = match kind {
        ModelKind::NaiveMean => ModelParams::NaiveMean,
        ModelKind::Linear => {
            let (weights, intercept, ridge_fallback) =
                fit_linear(&xs, &ys, cfg.with_intercept);
            ModelParams::Linear { weights, intercept, ridge_fallback }
        }
        ModelKind::Ensemble => {
            let tree_params = TreeParams {
                max_depth: cfg.max_depth,
                min_leaf: cfg.min_leaf,
                features_per_split: inputs.len().div_ceil(3),
            };
            let trees: Vec<Tree> = (0..cfg.trees)
                .map(|b| {
                    let mut rng = seeds::rng(cfg.seed, "tree", &[b as u64]);
                    let picks = bootstrap_indices(&mut rng, xs.len());
                    let bx: Vec<Vec<f64>> = picks.iter().map(|&i| xs[i].clone()).collect();
                    let by: Vec<f64> = picks.iter().map(|&i| ys[i]).collect();
                    fit_regression_tree(&bx, &by, &tree_params, &mut rng)
                })
                .collect();
            ModelParams::Ensemble { trees }
        }
    };

    Ok(PredictionModel {
        target_panel_id: target.to_string(),
        input_panel_ids: inputs.to_vec(),
        kind,
        nameplate_w,
        params,
        meta: TrainingMeta {
            days: training.iter().filter(|d| !d.is_empty()).count(),
            rows: xs.len(),
            seed: cfg.seed,
        },
    })
}

fn raw_prediction(params: &ModelParams, x: &[f64]) -> f64 {
    match params {
        ModelParams::NaiveMean => x.iter().sum::<f64>() / x.len() as f64,
        ModelParams::Linear { weights, intercept, .. } => {
            weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + intercept
        }
        ModelParams::Ensemble { trees } => {
            trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
        }
    }
}

/// Predict the target's output for each row of a day. Rows with any missing
/// input yield a missing prediction; the rest are clamped to
/// `[0, 1.25 x nameplate]`.
pub fn predict(model: &PredictionModel, day: &DaySlice) -> Result<Vec<Option<f64>>, ModelError> {
    let icols: Vec<usize> = model
        .input_panel_ids
        .iter()
        .map(|id| {
            day.panel_index(id)
                .ok_or_else(|| ModelError::MissingInputPanel(id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let hi = PREDICTION_CLAMP_FACTOR * model.nameplate_w;
    Ok((0..day.num_rows())
        .map(|row| {
            let x: Option<Vec<f64>> = icols.iter().map(|&c| day.get(row, c)).collect();
            x.map(|x| raw_prediction(&model.params, &x).clamp(0.0, hi))
        })
        .collect())
}

/// Elementwise `observed - predicted`; missing propagates.
pub fn residual(
    observed: &[Option<f64>],
    predicted: &[Option<f64>],
) -> Result<Vec<Option<f64>>, ModelError> {
    if observed.len() != predicted.len() {
        return Err(ModelError::LengthMismatch { a: observed.len(), b: predicted.len() });
    }
    Ok(observed
        .iter()
        .zip(predicted)
        .map(|(o, p)| Some((*o)? - (*p)?))
        .collect())
}

/// One day's residuals scattered onto the 288-slot time-of-day grid.
pub type SlotSeries = Vec<Option<f64>>;

pub fn residual_by_slot(slots: &[usize], residual: &[Option<f64>]) -> SlotSeries {
    let mut out: SlotSeries = vec![None; SLOTS_PER_DAY];
    for (&slot, r) in slots.iter().zip(residual) {
        out[slot] = *r;
    }
    out
}

/// Median residual per time-of-day slot — the recurring daily component
/// (static shade, systematic model bias). Slots never observed stay 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalProfile {
    values: Vec<f64>,
}

impl SeasonalProfile {
    pub fn zero() -> Self {
        Self { values: vec![0.0; SLOTS_PER_DAY] }
    }

    pub fn at(&self, slot: usize) -> f64 {
        self.values[slot]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_unstable_by(f64::total_cmp);
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    }
}

/// Median-per-slot profile over ≥ `min_days` days of residual history.
/// Callers must exclude days already flagged faulty.
pub fn seasonal_decompose(
    history: &[SlotSeries],
    min_days: usize,
) -> Result<SeasonalProfile, ModelError> {
    if history.len() < min_days {
        return Err(ModelError::InsufficientHistory { needed: min_days, got: history.len() });
    }
    let mut values = vec![0.0; SLOTS_PER_DAY];
    for (slot, value) in values.iter_mut().enumerate() {
        let mut column: Vec<f64> = history.iter().filter_map(|day| day[slot]).collect();
        if !column.is_empty() {
            *value = median(&mut column);
        }
    }
    Ok(SeasonalProfile { values })
}

/// Per-timestamp decomposition of one panel-day against a model and seasonal
/// profile, with the day-level loss ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub panel_id: String,
    pub date: NaiveDate,
    pub slots: Vec<usize>,
    pub observed: Vec<Option<f64>>,
    pub predicted: Vec<Option<f64>>,
    pub residual: Vec<Option<f64>>,
    pub seasonal: Vec<f64>,
    /// `residual - seasonal`: negative values are unexplained production loss.
    pub anomaly_loss: Vec<Option<f64>>,
    /// Unexplained loss as a fraction of predicted output over the day.
    pub daily_loss_ratio: f64,
}

pub fn loss_estimate(
    model: &PredictionModel,
    day: &DaySlice,
    seasonal: &SeasonalProfile,
) -> Result<LossEstimate, ModelError> {
    let tcol = day
        .panel_index(&model.target_panel_id)
        .ok_or_else(|| ModelError::MissingInputPanel(model.target_panel_id.clone()))?;
    let observed = day.column(tcol);
    let predicted = predict(model, day)?;
    let resid = residual(&observed, &predicted)?;
    let seasonal_rows: Vec<f64> = day.slots().iter().map(|&s| seasonal.at(s)).collect();
    let anomaly_loss: Vec<Option<f64>> = resid
        .iter()
        .zip(&seasonal_rows)
        .map(|(r, s)| r.map(|r| r - s))
        .collect();

    let mut loss_sum = 0.0;
    let mut pred_sum = 0.0;
    for (a, p) in anomaly_loss.iter().zip(&predicted) {
        if let (Some(a), Some(p)) = (a, p) {
            loss_sum += (-a).max(0.0);
            pred_sum += p;
        }
    }
    let daily_loss_ratio = if pred_sum > 0.0 { loss_sum / pred_sum } else { 0.0 };

    Ok(LossEstimate {
        panel_id: model.target_panel_id.clone(),
        date: day.date,
        slots: day.slots().to_vec(),
        observed,
        predicted,
        residual: resid,
        seasonal: seasonal_rows,
        anomaly_loss,
        daily_loss_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 6, 1).unwrap()
    }

    /// A slice whose target (last column) is an exact linear blend of inputs.
    fn synthetic_day(rows: usize, weights: &[f64], intercept: f64) -> DaySlice {
        let n = weights.len();
        let mut ids: Vec<String> = (0..n).map(|i| format!("in{i}")).collect();
        ids.push("target".into());
        let data: Vec<(usize, Vec<Option<f64>>)> = (0..rows)
            .map(|r| {
                let x: Vec<f64> =
                    (0..n).map(|j| 50.0 + ((r * (j + 3) + j * 17) % 91) as f64).collect();
                let y = weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + intercept;
                let mut row: Vec<Option<f64>> = x.into_iter().map(Some).collect();
                row.push(Some(y));
                (r + 60, row)
            })
            .collect();
        DaySlice::from_rows(date(), ids, data).unwrap()
    }

    fn input_ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("in{i}")).collect()
    }

    #[test]
    fn naive_mean_is_the_row_mean() {
        let day = synthetic_day(40, &[0.5, 0.5], 0.0);
        let model = fit(
            ModelKind::NaiveMean,
            "target",
            &input_ids(2),
            std::slice::from_ref(&day),
            320.0,
            &FitConfig::default(),
        )
        .unwrap();
        let two = DaySlice::from_rows(
            date(),
            vec!["in0".into(), "in1".into(), "target".into()],
            vec![(100, vec![Some(100.0), Some(200.0), Some(0.0)])],
        )
        .unwrap();
        assert_eq!(predict(&model, &two).unwrap(), vec![Some(150.0)]);
    }

    #[test]
    fn linear_recovers_exact_dependence() {
        let day = synthetic_day(60, &[1.0, 0.0, 0.0], 0.0);
        let model = fit(
            ModelKind::Linear,
            "target",
            &input_ids(3),
            std::slice::from_ref(&day),
            320.0,
            &FitConfig::default(),
        )
        .unwrap();
        let ModelParams::Linear { weights, intercept, ridge_fallback } = &model.params else {
            panic!("expected linear params")
        };
        assert!((weights[0] - 1.0).abs() < 1e-8, "{weights:?}");
        assert!(weights[1].abs() < 1e-8 && weights[2].abs() < 1e-8);
        assert!(intercept.abs() < 1e-8);
        assert!(!ridge_fallback);
    }

    #[test]
    fn linear_weights_ignore_row_order() {
        let day = synthetic_day(80, &[0.3, 0.7], 5.0);
        // reverse the row order by rebuilding the slice backwards
        let ids = day.panel_ids().to_vec();
        let rows_rev: Vec<(usize, Vec<Option<f64>>)> = (0..day.num_rows())
            .rev()
            .enumerate()
            .map(|(i, r)| (i + 60, (0..day.num_panels()).map(|c| day.get(r, c)).collect()))
            .collect();
        let reversed = DaySlice::from_rows(date(), ids, rows_rev).unwrap();

        let cfg = FitConfig::default();
        let a = fit(ModelKind::Linear, "target", &input_ids(2), std::slice::from_ref(&day), 320.0, &cfg)
            .unwrap();
        let b =
            fit(ModelKind::Linear, "target", &input_ids(2), std::slice::from_ref(&reversed), 320.0, &cfg)
                .unwrap();
        let (ModelParams::Linear { weights: wa, .. }, ModelParams::Linear { weights: wb, .. }) =
            (&a.params, &b.params)
        else {
            panic!()
        };
        for (x, y) in wa.iter().zip(wb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_inputs_trigger_ridge() {
        // in1 duplicates in0 exactly
        let ids = vec!["in0".into(), "in1".into(), "target".into()];
        let rows: Vec<(usize, Vec<Option<f64>>)> = (0..40)
            .map(|r| {
                let v = 50.0 + (r % 13) as f64 * 7.0;
                (r + 60, vec![Some(v), Some(v), Some(2.0 * v)])
            })
            .collect();
        let day = DaySlice::from_rows(date(), ids, rows).unwrap();
        let model = fit(
            ModelKind::Linear,
            "target",
            &input_ids(2),
            std::slice::from_ref(&day),
            320.0,
            &FitConfig::default(),
        )
        .unwrap();
        let ModelParams::Linear { weights, ridge_fallback, .. } = &model.params else {
            panic!()
        };
        assert!(*ridge_fallback);
        assert!(weights.iter().all(|w| w.is_finite()));
        // the two duplicated inputs share the predictive weight
        assert!((weights[0] + weights[1] - 2.0).abs() < 1e-3, "{weights:?}");
    }

    #[test]
    fn ensemble_prediction_is_mean_of_trees() {
        let day = synthetic_day(90, &[0.6, 0.4], 0.0);
        let model = fit(
            ModelKind::Ensemble,
            "target",
            &input_ids(2),
            std::slice::from_ref(&day),
            320.0,
            &FitConfig { trees: 7, ..FitConfig::default() },
        )
        .unwrap();
        let ModelParams::Ensemble { trees } = &model.params else { panic!() };
        let probe = DaySlice::from_rows(
            date(),
            vec!["in0".into(), "in1".into(), "target".into()],
            vec![(150, vec![Some(80.0), Some(90.0), None])],
        )
        .unwrap();
        let got = predict(&model, &probe).unwrap()[0].unwrap();
        let mean =
            trees.iter().map(|t| t.predict(&[80.0, 90.0])).sum::<f64>() / trees.len() as f64;
        assert!((got - mean).abs() < 1e-12);
    }

    #[test]
    fn ensemble_deterministic_under_seed() {
        let day = synthetic_day(80, &[0.5, 0.5], 0.0);
        let cfg = FitConfig { trees: 5, seed: 42, ..FitConfig::default() };
        let a = fit(ModelKind::Ensemble, "target", &input_ids(2), std::slice::from_ref(&day), 320.0, &cfg)
            .unwrap();
        let b = fit(ModelKind::Ensemble, "target", &input_ids(2), std::slice::from_ref(&day), 320.0, &cfg)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predictions_clamp_to_nameplate_margin() {
        let ids = vec!["in0".into(), "target".into()];
        let rows: Vec<(usize, Vec<Option<f64>>)> = (0..30)
            .map(|r| (r + 60, vec![Some(100.0 + r as f64), Some(900.0 + 2.0 * r as f64)]))
            .collect();
        let day = DaySlice::from_rows(date(), ids.clone(), rows).unwrap();
        let model = fit(
            ModelKind::Linear,
            "target",
            &input_ids(1),
            std::slice::from_ref(&day),
            320.0,
            &FitConfig::default(),
        )
        .unwrap();
        let out = predict(&model, &day).unwrap();
        for v in out.into_iter().flatten() {
            assert!(v <= 1.25 * 320.0);
        }
    }

    #[test]
    fn missing_inputs_yield_missing_predictions() {
        let day = synthetic_day(40, &[0.5, 0.5], 0.0);
        let model = fit(
            ModelKind::NaiveMean,
            "target",
            &input_ids(2),
            std::slice::from_ref(&day),
            320.0,
            &FitConfig::default(),
        )
        .unwrap();
        let holey = DaySlice::from_rows(
            date(),
            vec!["in0".into(), "in1".into(), "target".into()],
            vec![
                (100, vec![Some(10.0), None, Some(1.0)]),
                (101, vec![Some(10.0), Some(30.0), Some(1.0)]),
            ],
        )
        .unwrap();
        assert_eq!(predict(&model, &holey).unwrap(), vec![None, Some(20.0)]);
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let day = synthetic_day(20, &[0.4, 0.3, 0.3], 0.0); // needs 40 rows
        let err = fit(
            ModelKind::Linear,
            "target",
            &input_ids(3),
            std::slice::from_ref(&day),
            320.0,
            &FitConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, ModelError::InsufficientData { needed: 40, got: 20 });
    }

    #[test]
    fn residual_definition_and_identity() {
        assert_eq!(
            residual(&[Some(5.0), None], &[Some(5.0), Some(1.0)]).unwrap(),
            vec![Some(0.0), None]
        );
        assert_eq!(
            residual(&[Some(0.0), Some(0.0)], &[Some(250.0), Some(260.0)]).unwrap(),
            vec![Some(-250.0), Some(-260.0)]
        );
        // reconstruction: predicted + residual == observed
        let observed = [Some(123.456), Some(0.1), None];
        let predicted = [Some(120.0), Some(0.3), Some(4.0)];
        let r = residual(&observed, &predicted).unwrap();
        for i in 0..2 {
            let back = predicted[i].unwrap() + r[i].unwrap();
            assert!((back - observed[i].unwrap()).abs() < 1e-12);
        }
        assert!(matches!(
            residual(&[Some(1.0)], &[Some(1.0), Some(2.0)]),
            Err(ModelError::LengthMismatch { a: 1, b: 2 })
        ));
    }

    fn dip_series(dip_slots: std::ops::Range<usize>, dip: f64) -> SlotSeries {
        let mut day: SlotSeries = vec![None; SLOTS_PER_DAY];
        for slot in 80..220 {
            day[slot] = Some(if dip_slots.contains(&slot) { -dip } else { 0.0 });
        }
        day
    }

    #[test]
    fn seasonal_reproduces_a_static_dip() {
        let history: Vec<SlotSeries> = (0..10).map(|_| dip_series(108..120, 80.0)).collect();
        let profile = seasonal_decompose(&history, SEASONAL_MIN_DAYS).unwrap();
        assert_eq!(profile.at(110), -80.0);
        assert_eq!(profile.at(150), 0.0);
        assert_eq!(profile.at(0), 0.0); // never observed
    }

    #[test]
    fn seasonal_removal_is_idempotent() {
        let history: Vec<SlotSeries> = (0..8).map(|_| dip_series(100..130, 55.0)).collect();
        let profile = seasonal_decompose(&history, SEASONAL_MIN_DAYS).unwrap();
        let removed: Vec<SlotSeries> = history
            .iter()
            .map(|day| {
                day.iter()
                    .enumerate()
                    .map(|(slot, v)| v.map(|v| v - profile.at(slot)))
                    .collect()
            })
            .collect();
        let again = seasonal_decompose(&removed, SEASONAL_MIN_DAYS).unwrap();
        assert!(again.max_abs() < 1e-12);
    }

    #[test]
    fn seasonal_requires_history() {
        let history: Vec<SlotSeries> = (0..6).map(|_| dip_series(0..1, 0.0)).collect();
        assert_eq!(
            seasonal_decompose(&history, SEASONAL_MIN_DAYS).unwrap_err(),
            ModelError::InsufficientHistory { needed: 7, got: 6 }
        );
    }

    #[test]
    fn loss_estimate_on_a_dead_day() {
        let train = synthetic_day(60, &[0.5, 0.5], 0.0);
        let model = fit(
            ModelKind::Linear,
            "target",
            &input_ids(2),
            std::slice::from_ref(&train),
            320.0,
            &FitConfig::default(),
        )
        .unwrap();
        // inputs healthy at 100 W, target dead
        let rows: Vec<(usize, Vec<Option<f64>>)> =
            (0..20).map(|r| (r + 100, vec![Some(100.0), Some(100.0), Some(0.0)])).collect();
        let day = DaySlice::from_rows(date(), train.panel_ids().to_vec(), rows).unwrap();
        let est = loss_estimate(&model, &day, &SeasonalProfile::zero()).unwrap();
        assert!((est.daily_loss_ratio - 1.0).abs() < 1e-9, "{}", est.daily_loss_ratio);
        assert!(est.anomaly_loss.iter().all(|a| a.unwrap() < -99.0));
        // identity holds row-wise
        for i in 0..est.slots.len() {
            let back = est.predicted[i].unwrap() + est.residual[i].unwrap();
            assert!((back - est.observed[i].unwrap()).abs() < 1e-12);
        }
    }
}
