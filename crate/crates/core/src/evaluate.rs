//! Accuracy metrics and seeded study harnesses. The studies rebuild the
//! whole pipeline on simulated arrays — fit, detect, classify — under many
//! seeds, and emit long-format rows plus a mean/IQR summary so results can
//! be plotted or asserted. Every study is a pure function of its parameters.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, Result};
use chrono::{Datelike as _, NaiveDate};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    classify, classify_systemwide, extract_features, fit_forest, FaultClass, FeatureVector,
    SystemWideClass, DEFAULT_TREES,
};
use crate::data::{segment_days, ArrayLayout, DaySlice, PanelSpec};
use crate::detector::{
    build_candidates, detect_array, label_day, select_model, CandidateSet, DetectorConfig,
    Detection, PanelModels, SubsetStrategy,
};
use crate::forecaster::{fit_forecaster, ForecastModel, ForecasterConfig};
use crate::predictors::{fit, predict, FitConfig, ModelKind};
use crate::seeds;
use crate::simulator::{
    simulate, single_plane_layout, four_plane_layout, FaultKind, FaultSpec, SimConfig, SimOutput,
    WeatherProfile,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("observed values sum to zero; the normalizer is undefined")]
    ZeroMeanObserved,
    #[error("no overlapping non-missing pairs")]
    EmptyInput,
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("class `{0}` is not in the declared class set")]
    UnknownClass(String),
}

/// Mean absolute error normalized by the mean observed value, over
/// non-missing pairs. The shared denominator sidesteps division by zero at
/// individual dark samples.
pub fn mape(observed: &[Option<f64>], inferred: &[Option<f64>]) -> Result<f64, EvalError> {
    if observed.len() != inferred.len() {
        return Err(EvalError::LengthMismatch(observed.len(), inferred.len()));
    }
    let pairs: Vec<(f64, f64)> = observed
        .iter()
        .zip(inferred)
        .filter_map(|(o, i)| Some(((*o)?, (*i)?)))
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let m = pairs.len() as f64;
    let mean_obs = pairs.iter().map(|(o, _)| o).sum::<f64>() / m;
    if mean_obs == 0.0 {
        return Err(EvalError::ZeroMeanObserved);
    }
    Ok(pairs.iter().map(|(o, i)| (o - i).abs() / mean_obs).sum::<f64>() / m)
}

/// `mape` over fully-present vectors.
pub fn mape_values(observed: &[f64], inferred: &[f64]) -> Result<f64, EvalError> {
    let o: Vec<Option<f64>> = observed.iter().copied().map(Some).collect();
    let i: Vec<Option<f64>> = inferred.iter().copied().map(Some).collect();
    mape(&o, &i)
}

/// Truth-by-predicted counts over a fixed class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<usize>, // row-major, rows = truth
}

impl ConfusionMatrix {
    pub fn new(classes: &[String]) -> Self {
        Self { classes: classes.to_vec(), counts: vec![0; classes.len() * classes.len()] }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn index_of(&self, class: &str) -> Result<usize, EvalError> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| EvalError::UnknownClass(class.to_string()))
    }

    pub fn record(&mut self, truth: &str, pred: &str) -> Result<(), EvalError> {
        let t = self.index_of(truth)?;
        let p = self.index_of(pred)?;
        self.counts[t * self.classes.len() + p] += 1;
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes.len() + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> usize {
        (0..self.classes.len()).map(|p| self.count(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> usize {
        (0..self.classes.len()).map(|t| self.count(t, pred)).sum()
    }
}

/// Tally predictions against truth.
pub fn confusion(
    pred: &[String],
    truth: &[String],
    classes: &[String],
) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, t) in pred.iter().zip(truth) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

/// Metric bundle; ratios with a zero denominator are reported absent, never
/// coerced to 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mape: Option<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Recall per truth class (diagonal over row sum).
    pub per_class_recall: BTreeMap<String, Option<f64>>,
}

/// Collapse a confusion matrix to positive-vs-rest and compute accuracy,
/// sensitivity, specificity.
pub fn binary_metrics(cm: &ConfusionMatrix, positive: &str) -> Result<MetricsReport, EvalError> {
    let pos = cm.index_of(positive)?;
    let tp = cm.count(pos, pos);
    let fn_ = cm.row_sum(pos) - tp;
    let fp = cm.col_sum(pos) - tp;
    let total = cm.total();
    let tn = total - tp - fn_ - fp;

    let ratio = |num: usize, den: usize| {
        if den > 0 {
            Some(num as f64 / den as f64)
        } else {
            None
        }
    };
    let per_class_recall = cm
        .classes
        .iter()
        .enumerate()
        .map(|(t, name)| (name.clone(), ratio(cm.count(t, t), cm.row_sum(t))))
        .collect();
    Ok(MetricsReport {
        mape: None,
        accuracy: ratio(tp + tn, total),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        per_class_recall,
    })
}

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyKind {
    /// Naive-mean vs linear vs ensemble prediction error.
    ModelComparison,
    /// Ensemble error vs number of training days {1, 2, 4, 8}.
    TrainingSize,
    /// Ensemble error vs number of input panels {1, 3, 5, 7}.
    PanelCount,
    /// Same-plane vs mixed-plane inputs on a four-plane roof.
    RoofGeometry,
    /// Sunny vs overcast prediction error.
    Weather,
    /// One fault per day: detection recall, false flags, classification.
    SingleFault,
    /// Three concurrent faults per day plus a selection audit.
    ConcurrentFault,
    /// Four-panel worked example: two corrupted panels, selector must pick
    /// the untouched pair.
    SelectionExample,
    /// Full-array snow days must escalate to system-wide reports.
    SystemWide,
}

pub const ALL_STUDIES: [StudyKind; 9] = [
    StudyKind::ModelComparison,
    StudyKind::TrainingSize,
    StudyKind::PanelCount,
    StudyKind::RoofGeometry,
    StudyKind::Weather,
    StudyKind::SingleFault,
    StudyKind::ConcurrentFault,
    StudyKind::SelectionExample,
    StudyKind::SystemWide,
];

impl std::fmt::Display for StudyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StudyKind::ModelComparison => "model-comparison",
            StudyKind::TrainingSize => "training-size",
            StudyKind::PanelCount => "panel-count",
            StudyKind::RoofGeometry => "roof-geometry",
            StudyKind::Weather => "weather",
            StudyKind::SingleFault => "single-fault",
            StudyKind::ConcurrentFault => "concurrent-fault",
            StudyKind::SelectionExample => "selection-example",
            StudyKind::SystemWide => "system-wide",
        })
    }
}

impl std::str::FromStr for StudyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_STUDIES
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown study `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyParams {
    pub seeds: usize,
    pub base_seed: u64,
}

impl Default for StudyParams {
    fn default() -> Self {
        Self { seeds: 20, base_seed: 42 }
    }
}

/// One (condition, seed, metric) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub study: String,
    pub condition: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub study: String,
    pub condition: String,
    pub metric: String,
    pub mean: f64,
    pub iqr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub params: StudyParams,
    pub summary: Vec<SummaryRow>,
    pub rows: Vec<LongRow>,
}

impl StudyReport {
    /// Mean of a metric over seeds within one condition.
    pub fn mean_of(&self, condition: &str, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.condition == condition && s.metric == metric)
            .map(|s| s.mean)
    }

    /// Sum of a metric's per-seed values within one condition.
    pub fn sum_of(&self, condition: &str, metric: &str) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.condition == condition && r.metric == metric)
            .map(|r| r.value)
            .sum()
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = lo + 1;
    if hi >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(study: &str, rows: &[LongRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.condition.clone(), r.metric.clone())).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((condition, metric), mut values)| {
            values.sort_by(f64::total_cmp);
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let iqr = quantile(&values, 0.75) - quantile(&values, 0.25);
            SummaryRow { study: study.to_string(), condition, metric, mean, iqr, n }
        })
        .collect()
}

/// Run one study; per-seed trials execute in parallel and merge by seed
/// order, so the report is a pure function of `(kind, params)`.
pub fn run_study(kind: StudyKind, params: &StudyParams) -> Result<StudyReport> {
    let name = kind.to_string();
    let rows: Vec<LongRow> = match kind {
        StudyKind::SingleFault => single_fault_study(params)?,
        StudyKind::SystemWide => system_wide_study(params)?,
        _ => {
            let per_seed: Result<Vec<Vec<LongRow>>> = (0..params.seeds as u64)
                .into_par_iter()
                .map(|trial| match kind {
                    StudyKind::ModelComparison => model_comparison_seed(trial, params.base_seed),
                    StudyKind::TrainingSize => training_size_seed(trial, params.base_seed),
                    StudyKind::PanelCount => panel_count_seed(trial, params.base_seed),
                    StudyKind::RoofGeometry => roof_geometry_seed(trial, params.base_seed),
                    StudyKind::Weather => weather_seed(trial, params.base_seed),
                    StudyKind::ConcurrentFault => concurrent_fault_seed(trial, params.base_seed),
                    StudyKind::SelectionExample => selection_example_seed(trial, params.base_seed),
                    StudyKind::SingleFault | StudyKind::SystemWide => unreachable!(),
                })
                .collect();
            per_seed?.into_iter().flatten().collect()
        }
    };
    Ok(StudyReport {
        study: name.clone(),
        params: *params,
        summary: summarize(&name, &rows),
        rows,
    })
}

/// Write `study.csv` (summary), `study_long.csv` (per-seed rows) and
/// `study.json` into `dir`. Output bytes depend only on the report.
pub fn write_study(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut summary = csv::Writer::from_path(dir.join("study.csv"))?;
    summary.write_record(["study", "condition", "metric", "mean", "iqr", "n"])?;
    for s in &report.summary {
        summary.write_record([
            s.study.as_str(),
            s.condition.as_str(),
            s.metric.as_str(),
            &s.mean.to_string(),
            &s.iqr.to_string(),
            &s.n.to_string(),
        ])?;
    }
    summary.flush()?;

    let mut long = csv::Writer::from_path(dir.join("study_long.csv"))?;
    long.write_record(["study", "condition", "seed", "metric", "value"])?;
    for r in &report.rows {
        long.write_record([
            r.study.as_str(),
            r.condition.as_str(),
            &r.seed.to_string(),
            r.metric.as_str(),
            &r.value.to_string(),
        ])?;
    }
    long.flush()?;

    let mut json = std::fs::File::create(dir.join("study.json"))?;
    writeln!(json, "{}", serde_json::to_string_pretty(report)?)?;
    Ok(())
}

// --- shared scene helpers ---------------------------------------------------

fn day_range(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
}

fn june(n: usize) -> Vec<NaiveDate> {
    day_range(NaiveDate::from_ymd_opt(2021, 6, 1).unwrap(), n)
}

fn january(n: usize) -> Vec<NaiveDate> {
    day_range(NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(), n)
}

/// Simulation settings for the studies: inverter clipping at 96% of panel
/// capacity makes the panel-to-panel relation piecewise around noon, which is
/// exactly the regime where tree ensembles outclass a single linear fit.
fn study_sim_cfg() -> SimConfig {
    SimConfig { clip_fraction: 0.96, ..SimConfig::default() }
}

fn others_sorted(layout: &ArrayLayout, target: &str) -> Vec<String> {
    let mut out: Vec<String> =
        layout.others(target).iter().map(|p| p.panel_id.clone()).collect();
    out.sort();
    out
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fit `kind` for one target and score it on held-out days.
fn holdout_mape(
    kind: ModelKind,
    layout: &ArrayLayout,
    target: &str,
    inputs: Vec<String>,
    train: &[DaySlice],
    test: &[DaySlice],
    fit_seed: u64,
) -> Result<f64> {
    let cap = layout.panel(target).ok_or_else(|| anyhow!("panel {target} missing"))?.capacity_w;
    let cfg = FitConfig { seed: fit_seed, ..FitConfig::default() };
    let model = fit(kind, target, &inputs, train, cap, &cfg)?;
    let mut obs = Vec::new();
    let mut pred = Vec::new();
    for day in test {
        let col = day.panel_index(target).ok_or_else(|| anyhow!("panel {target} missing"))?;
        obs.extend(day.column(col));
        pred.extend(predict(&model, day)?);
    }
    Ok(mape(&obs, &pred)?)
}

/// Simulate a fault-free block and split it into train/test slices.
fn sim_split(
    layout: &ArrayLayout,
    dates: &[NaiveDate],
    profile: WeatherProfile,
    train_days: usize,
    sim_seed: u64,
) -> Result<(Vec<DaySlice>, Vec<DaySlice>)> {
    let sim = simulate(layout, dates, profile, &[], sim_seed, &study_sim_cfg())?;
    let days = segment_days(&sim.matrix, layout.daylight_epsilon_w(0.01));
    let (train, test) = days.split_at(train_days);
    Ok((train.to_vec(), test.to_vec()))
}

// --- prediction studies -----------------------------------------------------

fn model_comparison_seed(trial: u64, base: u64) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(base, "model-comparison", &[trial]);
    let layout = single_plane_layout(12);
    let (train, test) =
        sim_split(&layout, &june(10), WeatherProfile::Sunny, 4, seeds::derive(seed, "sim", &[]))?;
    let mut rows = Vec::new();
    for kind in [ModelKind::NaiveMean, ModelKind::Linear, ModelKind::Ensemble] {
        let mut per_panel = Vec::new();
        for (i, p) in layout.panels.iter().enumerate() {
            per_panel.push(holdout_mape(
                kind,
                &layout,
                &p.panel_id,
                others_sorted(&layout, &p.panel_id),
                &train,
                &test,
                seeds::derive(seed, "fit", &[i as u64]),
            )?);
        }
        rows.push(LongRow {
            study: StudyKind::ModelComparison.to_string(),
            condition: kind.to_string(),
            seed: trial,
            metric: "mape".into(),
            value: mean(&per_panel),
        });
    }
    Ok(rows)
}

fn training_size_seed(trial: u64, base: u64) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(base, "training-size", &[trial]);
    let layout = single_plane_layout(12);
    let (pool, test) =
        sim_split(&layout, &june(12), WeatherProfile::Sunny, 8, seeds::derive(seed, "sim", &[]))?;
    let mut rows = Vec::new();
    for days in [1usize, 2, 4, 8] {
        let train = &pool[..days];
        let mut per_panel = Vec::new();
        for (i, p) in layout.panels.iter().enumerate() {
            per_panel.push(holdout_mape(
                ModelKind::Ensemble,
                &layout,
                &p.panel_id,
                others_sorted(&layout, &p.panel_id),
                train,
                &test,
                seeds::derive(seed, "fit", &[days as u64, i as u64]),
            )?);
        }
        rows.push(LongRow {
            study: StudyKind::TrainingSize.to_string(),
            condition: format!("days-{days}"),
            seed: trial,
            metric: "mape".into(),
            value: mean(&per_panel),
        });
    }
    Ok(rows)
}

fn panel_count_seed(trial: u64, base: u64) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(base, "panel-count", &[trial]);
    let layout = single_plane_layout(12);
    let (train, test) =
        sim_split(&layout, &june(10), WeatherProfile::Sunny, 4, seeds::derive(seed, "sim", &[]))?;
    let mut rows = Vec::new();
    for n in [1usize, 3, 5, 7] {
        let mut per_panel = Vec::new();
        for (i, p) in layout.panels.iter().enumerate() {
            // nested input sets: a seeded shuffle of the neighbors, truncated
            let mut pool = others_sorted(&layout, &p.panel_id);
            let mut rng = seeds::rng(seed, "inputs", &[i as u64]);
            use rand::seq::SliceRandom;
            pool.shuffle(&mut rng);
            let mut inputs: Vec<String> = pool.into_iter().take(n).collect();
            inputs.sort();
            per_panel.push(holdout_mape(
                ModelKind::Ensemble,
                &layout,
                &p.panel_id,
                inputs,
                &train,
                &test,
                seeds::derive(seed, "fit", &[n as u64, i as u64]),
            )?);
        }
        rows.push(LongRow {
            study: StudyKind::PanelCount.to_string(),
            condition: format!("inputs-{n}"),
            seed: trial,
            metric: "mape".into(),
            value: mean(&per_panel),
        });
    }
    Ok(rows)
}

fn roof_geometry_seed(trial: u64, base: u64) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(base, "roof-geometry", &[trial]);
    let layout = four_plane_layout(3);
    let (train, test) =
        sim_split(&layout, &june(10), WeatherProfile::Sunny, 4, seeds::derive(seed, "sim", &[]))?;
    let mut rows = Vec::new();
    for condition in ["same-plane", "mixed-plane"] {
        let mut per_panel = Vec::new();
        for (i, p) in layout.panels.iter().enumerate() {
            let mut inputs: Vec<String> = if condition == "same-plane" {
                layout.plane_mates(&p.panel_id).iter().map(|m| m.panel_id.clone()).collect()
            } else {
                let mut off_plane: Vec<String> = layout
                    .others(&p.panel_id)
                    .iter()
                    .filter(|o| o.roof_plane != p.roof_plane)
                    .map(|o| o.panel_id.clone())
                    .collect();
                off_plane.sort();
                let mut rng = seeds::rng(seed, "mixed", &[i as u64]);
                use rand::seq::SliceRandom;
                off_plane.shuffle(&mut rng);
                off_plane.into_iter().take(2).collect()
            };
            inputs.sort();
            per_panel.push(holdout_mape(
                ModelKind::Ensemble,
                &layout,
                &p.panel_id,
                inputs,
                &train,
                &test,
                seeds::derive(seed, "fit", &[i as u64]),
            )?);
        }
        rows.push(LongRow {
            study: StudyKind::RoofGeometry.to_string(),
            condition: condition.into(),
            seed: trial,
            metric: "mape".into(),
            value: mean(&per_panel),
        });
    }
    Ok(rows)
}

fn weather_seed(trial: u64, base: u64) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(base, "weather", &[trial]);
    let layout = single_plane_layout(12);
    let mut rows = Vec::new();
    for (condition, profile) in
        [("sunny", WeatherProfile::Sunny), ("overcast", WeatherProfile::Overcast)]
    {
        // identical sim seed for both conditions: same gains, same noise
        // stream, only the sky differs, so the comparison is paired
        let (train, test) =
            sim_split(&layout, &june(10), profile, 4, seeds::derive(seed, "sim", &[]))?;
        let mut per_panel = Vec::new();
        for (i, p) in layout.panels.iter().enumerate() {
            per_panel.push(holdout_mape(
                ModelKind::Ensemble,
                &layout,
                &p.panel_id,
                others_sorted(&layout, &p.panel_id),
                &train,
                &test,
                seeds::derive(seed, "fit", &[i as u64]),
            )?);
        }
        rows.push(LongRow {
            study: StudyKind::Weather.to_string(),
            condition: condition.into(),
            seed: trial,
            metric: "mape".into(),
            value: mean(&per_panel),
        });
    }
    Ok(rows)
}

// --- detection / classification studies ------------------------------------

struct TrainedArray {
    sim: SimOutput,
    train: Vec<DaySlice>,
    models: PanelModels,
}

/// Simulate a block with injected faults, then fit candidate sets and
/// forecasters on the (fault-free) leading training days.
fn trained_block(
    layout: &ArrayLayout,
    dates: &[NaiveDate],
    profile: WeatherProfile,
    train_days: usize,
    faults: &[FaultSpec],
    strategy_for: impl Fn(usize) -> SubsetStrategy,
    inputs_per_model: usize,
    seed: u64,
) -> Result<TrainedArray> {
    let sim = simulate(layout, dates, profile, faults, seeds::derive(seed, "sim", &[]), &study_sim_cfg())?;
    let days = segment_days(&sim.matrix, layout.daylight_epsilon_w(0.01));
    let train: Vec<DaySlice> = days[..train_days].to_vec();

    let mut candidates: BTreeMap<String, CandidateSet> = BTreeMap::new();
    let mut forecasters: BTreeMap<String, ForecastModel> = BTreeMap::new();
    for (i, p) in layout.panels.iter().enumerate() {
        let fit_cfg =
            FitConfig { seed: seeds::derive(seed, "cand", &[i as u64]), ..FitConfig::default() };
        candidates.insert(
            p.panel_id.clone(),
            build_candidates(layout, &p.panel_id, inputs_per_model, strategy_for(i), &train, &fit_cfg)?,
        );
        forecasters.insert(
            p.panel_id.clone(),
            fit_forecaster(
                &p.panel_id,
                p.capacity_w,
                &train,
                &sim.weather,
                &ForecasterConfig::default(),
            )?,
        );
    }
    Ok(TrainedArray { sim, train, models: PanelModels { candidates, forecasters } })
}

fn run_detection(array: &TrainedArray, layout: &ArrayLayout, dates: &[NaiveDate]) -> Vec<Detection> {
    detect_array(
        &array.sim.matrix,
        layout,
        &array.models,
        &array.sim.weather,
        dates,
        &array.train,
        &DetectorConfig::default(),
        &ForecasterConfig::default(),
    )
}

struct SingleFaultSeed {
    rows: Vec<LongRow>,
    /// Detected fault days with truth labels, for cross-seed classification.
    features: Vec<(FeatureVector, FaultClass)>,
}

/// Fault-cause class corresponding to an injected fault kind.
pub fn fault_class_of(kind: FaultKind) -> FaultClass {
    match kind {
        FaultKind::Snow => FaultClass::Snow,
        // water drops are a (mild) surface obstruction, same family as
        // occlusion; the studies never inject them at detectable severity
        FaultKind::Occlusion | FaultKind::WaterDrops => FaultClass::Occlusion,
        FaultKind::OpenCircuit => FaultClass::OpenCircuit,
    }
}

/// One seed of the single-fault study: a summer block (occlusion and open
/// circuit) and a winter block (snow), 5 fault days and 5 clean days each.
fn single_fault_seed(trial: u64, base: u64) -> Result<SingleFaultSeed> {
    let seed = seeds::derive(base, "single-fault", &[trial]);
    let layout = single_plane_layout(12);
    let summer: &[(FaultKind, f64)] = &[
        (FaultKind::Occlusion, 0.4),
        (FaultKind::Occlusion, 0.7),
        (FaultKind::Occlusion, 0.9),
        (FaultKind::OpenCircuit, 1.0),
        (FaultKind::OpenCircuit, 1.0),
    ];
    let winter: &[(FaultKind, f64)] = &[(FaultKind::Snow, 1.0); 5];

    let mut detected = 0usize;
    let mut fault_days = 0usize;
    let mut false_flag_days = 0usize;
    let mut free_days = 0usize;
    let mut features = Vec::new();

    for (block, (dates, kinds)) in
        [(june(14), summer), (january(14), winter)].into_iter().enumerate()
    {
        let analysis: Vec<NaiveDate> = dates[4..].to_vec();
        let block_fault_dates: Vec<NaiveDate> =
            analysis.iter().step_by(2).copied().collect();
        let block_free_dates: Vec<NaiveDate> =
            analysis.iter().skip(1).step_by(2).copied().collect();

        let mut faults = Vec::new();
        let mut truth_by_date: BTreeMap<NaiveDate, (String, FaultClass)> = BTreeMap::new();
        for (k, (&date, &(kind, severity))) in
            block_fault_dates.iter().zip(kinds.iter()).enumerate()
        {
            let panel_ix = seeds::rng(seed, "faultpanel", &[block as u64, k as u64])
                .random_range(0..layout.panels.len());
            let panel_id = layout.panels[panel_ix].panel_id.clone();
            faults.push(FaultSpec::all_day(&panel_id, date, kind, severity));
            truth_by_date.insert(date, (panel_id, fault_class_of(kind)));
        }

        let array = trained_block(
            &layout,
            &dates,
            WeatherProfile::Sunny,
            4,
            &faults,
            |_| SubsetStrategy::SamePlaneFirst,
            2,
            seeds::derive(seed, "block", &[block as u64]),
        )?;
        let detections = run_detection(&array, &layout, &analysis);
        let day_slices: BTreeMap<NaiveDate, DaySlice> =
            segment_days(&array.sim.matrix, layout.daylight_epsilon_w(0.01))
                .into_iter()
                .map(|d| (d.date, d))
                .collect();

        fault_days += block_fault_dates.len();
        free_days += block_free_dates.len();
        for &date in &block_fault_dates {
            let (panel_id, truth) = &truth_by_date[&date];
            let hit = detections
                .iter()
                .find(|d| d.report.date == date && &d.report.panel_id == panel_id)
                .filter(|d| d.report.flagged);
            if let Some(hit) = hit {
                detected += 1;
                if let Some(loss) = &hit.loss {
                    let fv = extract_features(
                        &hit.report,
                        loss,
                        &day_slices[&date],
                        &array.sim.weather,
                        layout.panel(panel_id).unwrap().capacity_w,
                        seeds::derive(seed, "feat", &[block as u64, date.ordinal() as u64]),
                    )?;
                    features.push((fv, *truth));
                }
            }
        }
        for &date in &block_free_dates {
            if detections.iter().any(|d| d.report.date == date && d.report.flagged) {
                false_flag_days += 1;
            }
        }
    }

    let study = StudyKind::SingleFault.to_string();
    let row = |metric: &str, value: f64| LongRow {
        study: study.clone(),
        condition: "single-fault".into(),
        seed: trial,
        metric: metric.into(),
        value,
    };
    Ok(SingleFaultSeed {
        rows: vec![
            row("fault_days", fault_days as f64),
            row("detected", detected as f64),
            row("free_days", free_days as f64),
            row("false_flag_days", false_flag_days as f64),
        ],
        features,
    })
}

/// Detection across seeds in parallel, then leave-one-seed-out
/// classification so every fault day is scored by a forest that never saw it.
fn single_fault_study(params: &StudyParams) -> Result<Vec<LongRow>> {
    let per_seed: Result<Vec<SingleFaultSeed>> = (0..params.seeds as u64)
        .into_par_iter()
        .map(|trial| single_fault_seed(trial, params.base_seed))
        .collect();
    let per_seed = per_seed?;

    let mut rows = Vec::new();
    let study = StudyKind::SingleFault.to_string();
    for (trial, outcome) in per_seed.iter().enumerate() {
        rows.extend(outcome.rows.clone());

        let pooled: Vec<(FeatureVector, FaultClass)> = per_seed
            .iter()
            .enumerate()
            .filter(|(other, _)| *other != trial)
            .flat_map(|(_, o)| o.features.iter().cloned())
            .collect();
        let forest = fit_forest(
            &pooled,
            DEFAULT_TREES,
            seeds::derive(params.base_seed, "forest", &[trial as u64]),
        )
        .map_err(|e| anyhow!("classifier training failed: {e}"))?;
        let mut correct = 0usize;
        for (fv, truth) in &outcome.features {
            let (pred, _) = classify(&forest, fv);
            if pred == *truth {
                correct += 1;
            }
        }
        let row = |metric: &str, value: f64| LongRow {
            study: study.clone(),
            condition: "single-fault".into(),
            seed: trial as u64,
            metric: metric.into(),
            value,
        };
        rows.push(row("class_total", outcome.features.len() as f64));
        rows.push(row("class_correct", correct as f64));
    }
    Ok(rows)
}

/// One seed of the concurrent-fault study: five analysis days, each with
/// snow + occlusion + open circuit on three distinct panels.
fn concurrent_fault_seed(trial: u64, base: u64) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(base, "concurrent-fault", &[trial]);
    let layout = single_plane_layout(12);
    let dates = june(9);
    let analysis: Vec<NaiveDate> = dates[4..].to_vec();

    let kinds = [
        (FaultKind::Snow, 1.0),
        (FaultKind::Occlusion, 0.7),
        (FaultKind::OpenCircuit, 1.0),
    ];
    let mut faults = Vec::new();
    let mut faulted_by_date: BTreeMap<NaiveDate, Vec<String>> = BTreeMap::new();
    for (d, &date) in analysis.iter().enumerate() {
        let picks =
            rand::seq::index::sample(&mut seeds::rng(seed, "faultpanel", &[d as u64]), 12, 3);
        for (slot, &(kind, severity)) in kinds.iter().enumerate() {
            let panel_id = layout.panels[picks.index(slot)].panel_id.clone();
            faults.push(FaultSpec::all_day(&panel_id, date, kind, severity));
            faulted_by_date.entry(date).or_default().push(panel_id);
        }
    }

    let array = trained_block(
        &layout,
        &dates,
        WeatherProfile::Sunny,
        4,
        &faults,
        |i| SubsetStrategy::RandomSubsets {
            count: 25,
            seed: seeds::derive(seed, "subsets", &[i as u64]),
        },
        3,
        seeds::derive(seed, "block", &[]),
    )?;
    let detections = run_detection(&array, &layout, &analysis);

    let mut joint_success = 0usize;
    let mut faulted_flagged = 0usize;
    let mut false_flags = 0usize;
    for (&date, faulted) in &faulted_by_date {
        let day: Vec<&Detection> =
            detections.iter().filter(|d| d.report.date == date).collect();
        let hits = faulted
            .iter()
            .filter(|id| day.iter().any(|d| &d.report.panel_id == *id && d.report.flagged))
            .count();
        let extra = day
            .iter()
            .filter(|d| d.report.flagged && !faulted.contains(&d.report.panel_id))
            .count();
        faulted_flagged += hits;
        false_flags += extra;
        if hits == faulted.len() && extra == 0 {
            joint_success += 1;
        }
    }

    // audit: whenever a clean candidate existed, the used model must not
    // touch a noisy input
    let mut violations = 0usize;
    let mut audited = 0usize;
    for &date in &analysis {
        let labels = label_day(
            &array.sim.matrix,
            &layout,
            &array.models.forecasters,
            &array.sim.weather,
            date,
            &ForecasterConfig::default(),
        )
        .map_err(|e| anyhow!("audit labeling failed: {e}"))?;
        let noisy: Vec<&str> =
            labels.iter().filter(|l| l.is_noisy()).map(|l| l.panel_id.as_str()).collect();
        for p in &layout.panels {
            let set = &array.models.candidates[&p.panel_id];
            let clean_exists = set.candidates.iter().any(|c| {
                c.input_panel_ids.iter().all(|i| !noisy.contains(&i.as_str()))
            });
            let report = detections
                .iter()
                .find(|d| d.report.date == date && d.report.panel_id == p.panel_id)
                .map(|d| &d.report);
            if let Some(report) = report {
                if let Some(inputs) = &report.model_inputs {
                    audited += 1;
                    let touched = inputs.iter().any(|i| noisy.contains(&i.as_str()));
                    if clean_exists && touched {
                        violations += 1;
                    }
                }
            }
        }
    }

    let study = StudyKind::ConcurrentFault.to_string();
    let row = |metric: &str, value: f64| LongRow {
        study: study.clone(),
        condition: "concurrent-fault".into(),
        seed: trial,
        metric: metric.into(),
        value,
    };
    Ok(vec![
        row("fault_days", analysis.len() as f64),
        row("joint_success", joint_success as f64),
        row("faulted_panel_days", (analysis.len() * 3) as f64),
        row("faulted_flagged", faulted_flagged as f64),
        row("false_flag_panel_days", false_flags as f64),
        row("audited_panel_days", audited as f64),
        row("selection_violations", violations as f64),
    ])
}

/// One trial of the four-panel worked example: panels A and B are corrupted,
/// so the selector must predict A from the untouched pair {C, D}.
fn selection_example_seed(trial: u64, base: u64) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(base, "selection-example", &[trial]);
    let layout = ArrayLayout {
        latitude_deg: 42.4,
        longitude_deg: -72.5,
        panels: ["A", "B", "C", "D"]
            .iter()
            .map(|id| PanelSpec {
                panel_id: id.to_string(),
                roof_plane: "south".into(),
                tilt_deg: 30.0,
                azimuth_deg: 180.0,
                capacity_w: 320.0,
                panel_gain: 1.0,
            })
            .collect(),
    };
    let dates = june(5);
    let fault_date = dates[4];
    let faults = vec![
        FaultSpec::all_day("A", fault_date, FaultKind::OpenCircuit, 1.0),
        FaultSpec::all_day("B", fault_date, FaultKind::Occlusion, 0.8),
    ];
    let array = trained_block(
        &layout,
        &dates,
        WeatherProfile::Sunny,
        4,
        &faults,
        |_| SubsetStrategy::AllSubsets,
        2,
        seeds::derive(seed, "block", &[]),
    )?;
    let labels = label_day(
        &array.sim.matrix,
        &layout,
        &array.models.forecasters,
        &array.sim.weather,
        fault_date,
        &ForecasterConfig::default(),
    )
    .map_err(|e| anyhow!("labeling failed: {e}"))?;
    let chosen = select_model(&array.models.candidates["A"], &labels)
        .map_err(|e| anyhow!("selection failed: {e}"))?;
    let picked_cd = chosen.input_panel_ids == ["C".to_string(), "D".to_string()];
    Ok(vec![LongRow {
        study: StudyKind::SelectionExample.to_string(),
        condition: "selection-example".into(),
        seed: trial,
        metric: "selected_cd".into(),
        value: if picked_cd { 1.0 } else { 0.0 },
    }])
}

/// 40 winter analysis days alternating full-array snow and clear weather;
/// snow days must escalate to system-wide reports classified as full snow.
fn system_wide_study(params: &StudyParams) -> Result<Vec<LongRow>> {
    let seed = seeds::derive(params.base_seed, "system-wide", &[]);
    let layout = single_plane_layout(12);
    let dates = january(44);
    let analysis: Vec<NaiveDate> = dates[4..].to_vec();
    let snow_dates: Vec<NaiveDate> = analysis.iter().step_by(2).copied().collect();

    let mut faults = Vec::new();
    for &date in &snow_dates {
        for p in &layout.panels {
            faults.push(FaultSpec::all_day(&p.panel_id, date, FaultKind::Snow, 1.0));
        }
    }
    let array = trained_block(
        &layout,
        &dates,
        WeatherProfile::Sunny,
        4,
        &faults,
        |_| SubsetStrategy::SamePlaneFirst,
        2,
        seeds::derive(seed, "block", &[]),
    )?;
    let detections = run_detection(&array, &layout, &analysis);

    let study = StudyKind::SystemWide.to_string();
    let mut rows = Vec::new();
    for (ordinal, &date) in analysis.iter().enumerate() {
        let day: Vec<&Detection> =
            detections.iter().filter(|d| d.report.date == date).collect();
        let all_system = day.iter().all(|d| d.report.system_wide);
        let any_system = day.iter().any(|d| d.report.system_wide);
        let any_flagged = day.iter().any(|d| d.report.flagged);
        let is_snow = snow_dates.contains(&date);
        let condition = if is_snow { "snow-day" } else { "normal-day" };
        let mut push = |metric: &str, value: f64| {
            rows.push(LongRow {
                study: study.clone(),
                condition: condition.into(),
                seed: ordinal as u64,
                metric: metric.into(),
                value,
            });
        };
        push("system_wide_all", if all_system { 1.0 } else { 0.0 });
        push("system_wide_any", if any_system { 1.0 } else { 0.0 });
        push("any_flagged", if any_flagged { 1.0 } else { 0.0 });
        if is_snow && all_system {
            let reports: Vec<_> = day.iter().map(|d| d.report.clone()).collect();
            let verdict = classify_systemwide(&reports, &array.sim.weather)
                .map_err(|e| anyhow!("system-wide classification failed: {e}"))?;
            push("full_snow", if verdict == SystemWideClass::FullSnow { 1.0 } else { 0.0 });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn mape_matches_hand_arithmetic() {
        assert_eq!(mape(&some(&[100.0, 300.0]), &some(&[100.0, 300.0])).unwrap(), 0.0);
        let v = mape(&some(&[100.0, 300.0]), &some(&[110.0, 290.0])).unwrap();
        assert!((v - 0.05).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn mape_tolerates_true_zeros() {
        // a zero observation must not blow up: the denominator is the mean
        let v = mape(&some(&[0.0, 100.0]), &some(&[10.0, 90.0])).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mape_error_cases() {
        assert_eq!(
            mape(&some(&[0.0, 0.0]), &some(&[1.0, 2.0])).unwrap_err(),
            EvalError::ZeroMeanObserved
        );
        assert_eq!(mape(&[None, None], &[None, Some(1.0)]).unwrap_err(), EvalError::EmptyInput);
        assert_eq!(
            mape(&some(&[1.0]), &some(&[1.0, 2.0])).unwrap_err(),
            EvalError::LengthMismatch(1, 2)
        );
    }

    #[test]
    fn mape_skips_missing_pairs() {
        let obs = vec![Some(100.0), None, Some(300.0)];
        let inf = vec![Some(110.0), Some(999.0), Some(290.0)];
        assert!((mape(&obs, &inf).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn mape_is_scale_invariant() {
        let obs = [120.0, 80.0, 310.0, 55.0];
        let inf = [118.0, 91.0, 300.0, 70.0];
        let base = mape_values(&obs, &inf).unwrap();
        for c in [0.5, 2.0, 7.3] {
            let so: Vec<f64> = obs.iter().map(|v| v * c).collect();
            let si: Vec<f64> = inf.iter().map(|v| v * c).collect();
            assert!((mape_values(&so, &si).unwrap() - base).abs() < 1e-12);
        }
    }

    fn classes() -> Vec<String> {
        vec!["Snow".into(), "Occlusion".into(), "OpenCircuit".into()]
    }

    #[test]
    fn confusion_counts_and_conservation() {
        let truth: Vec<String> =
            ["Snow", "Snow", "Occlusion", "OpenCircuit"].iter().map(|s| s.to_string()).collect();
        let pred: Vec<String> =
            ["Snow", "Occlusion", "Occlusion", "OpenCircuit"].iter().map(|s| s.to_string()).collect();
        let cm = confusion(&pred, &truth, &classes()).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.row_sum(0), 2);
        assert_eq!(cm.total(), 4);
        // all-correct case is diagonal
        let cm2 = confusion(&truth, &truth, &classes()).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm2.count(t, p) > 0, t == p && cm2.row_sum(t) > 0);
            }
        }
    }

    #[test]
    fn confusion_rejects_unknown_class() {
        let err =
            confusion(&["Hail".to_string()], &["Snow".to_string()], &classes()).unwrap_err();
        assert_eq!(err, EvalError::UnknownClass("Hail".into()));
    }

    #[test]
    fn binary_metrics_perfect_and_absent() {
        // TP=97 TN=17 FP=0 FN=0
        let mut cm = ConfusionMatrix::new(&["pos".into(), "neg".into()]);
        for _ in 0..97 {
            cm.record("pos", "pos").unwrap();
        }
        for _ in 0..17 {
            cm.record("neg", "neg").unwrap();
        }
        let m = binary_metrics(&cm, "pos").unwrap();
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, Some(1.0));

        // no positive instances at all: sensitivity undefined, not 0 or 1
        let mut cm = ConfusionMatrix::new(&["pos".into(), "neg".into()]);
        for _ in 0..5 {
            cm.record("neg", "neg").unwrap();
        }
        let m = binary_metrics(&cm, "pos").unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.specificity, Some(1.0));
    }

    #[test]
    fn accuracy_is_prevalence_weighted_mean_of_sens_spec() {
        let mut rng = seeds::rng(7, "cm", &[]);
        for _ in 0..100 {
            let mut cm = ConfusionMatrix::new(&["pos".into(), "neg".into()]);
            let counts: Vec<usize> = (0..4).map(|_| rng.random_range(0..30)).collect();
            for (i, &c) in counts.iter().enumerate() {
                let (t, p) = (["pos", "neg"][i / 2], ["pos", "neg"][i % 2]);
                for _ in 0..c {
                    cm.record(t, p).unwrap();
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let m = binary_metrics(&cm, "pos").unwrap();
            let n = cm.total() as f64;
            let pos_n = cm.row_sum(0) as f64;
            let neg_n = cm.row_sum(1) as f64;
            if let (Some(acc), Some(sens), Some(spec)) =
                (m.accuracy, m.sensitivity, m.specificity)
            {
                let weighted = sens * pos_n / n + spec * neg_n / n;
                assert!((acc - weighted).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantiles_and_iqr() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn summary_groups_by_condition_and_metric() {
        let rows = vec![
            LongRow { study: "s".into(), condition: "a".into(), seed: 0, metric: "m".into(), value: 1.0 },
            LongRow { study: "s".into(), condition: "a".into(), seed: 1, metric: "m".into(), value: 3.0 },
            LongRow { study: "s".into(), condition: "b".into(), seed: 0, metric: "m".into(), value: 5.0 },
        ];
        let summary = summarize("s", &rows);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary[0].condition, "a");
        assert_eq!(summary[0].mean, 2.0);
        assert_eq!(summary[0].n, 2);
    }

    #[test]
    fn model_comparison_smoke() {
        let report =
            run_study(StudyKind::ModelComparison, &StudyParams { seeds: 2, base_seed: 5 })
                .unwrap();
        assert_eq!(report.rows.len(), 6); // 2 seeds x 3 model kinds
        assert!(report.rows.iter().all(|r| r.value.is_finite() && r.value >= 0.0));
        assert_eq!(report.summary.len(), 3);
    }

    #[test]
    fn selection_example_smoke() {
        let report =
            run_study(StudyKind::SelectionExample, &StudyParams { seeds: 2, base_seed: 5 })
                .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.value == 1.0), "selector missed {{C,D}}");
    }

    #[test]
    fn study_outputs_are_byte_stable() {
        let report = StudyReport {
            study: "demo".into(),
            params: StudyParams { seeds: 1, base_seed: 0 },
            summary: summarize(
                "demo",
                &[LongRow {
                    study: "demo".into(),
                    condition: "c".into(),
                    seed: 0,
                    metric: "m".into(),
                    value: 1.0 / 3.0,
                }],
            ),
            rows: vec![LongRow {
                study: "demo".into(),
                condition: "c".into(),
                seed: 0,
                metric: "m".into(),
                value: 1.0 / 3.0,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let a_dir = dir.path().join("a");
        let b_dir = dir.path().join("b");
        write_study(&report, &a_dir).unwrap();
        write_study(&report, &b_dir).unwrap();
        for name in ["study.csv", "study_long.csv", "study.json"] {
            let a = std::fs::read(a_dir.join(name)).unwrap();
            let b = std::fs::read(b_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical writes");
        }
        assert!(String::from_utf8(std::fs::read(a_dir.join("study_long.csv")).unwrap())
            .unwrap()
            .contains("0.3333333333333333"));
    }
}
