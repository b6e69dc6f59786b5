//! Per-panel fault detection. For each panel, an ensemble of candidate
//! models — each predicting the panel from a different neighbor subset — is
//! trained ahead of time. On an analysis day, neighbors whose output diverges
//! from their weather forecast are labeled noisy, the best candidate whose
//! inputs are all clean is applied, and the panel-day is flagged when the
//! unexplained loss is both deep and persistent. When no panel has a clean
//! model and the whole array is dark, the day escalates to a system-wide
//! report instead of per-panel verdicts.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{segment_days, ArrayLayout, DaySlice, PanelMatrix, WeatherSeries, SLOTS_PER_DAY};
use crate::forecaster::{
    self, forecast, ForecastError, ForecastModel, ForecasterConfig, InputLabel, PanelDayEnergy,
};
use crate::predictors::{
    fit, loss_estimate, residual_by_slot, seasonal_decompose, FitConfig, LossEstimate, ModelError,
    ModelKind, PredictionModel, SeasonalProfile, SlotSeries, SEASONAL_MIN_DAYS,
    SEASONAL_WINDOW_DAYS,
};
use crate::seeds;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("{available} other panels available, {needed} inputs requested")]
    TooFewPanels { available: usize, needed: usize },
    #[error("every candidate model touches a noisy panel")]
    NoCleanModel,
    #[error("no input label provided for panel `{0}`")]
    MissingLabel(String),
    #[error("panel `{0}` not in layout")]
    UnknownPanel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// How candidate input subsets are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetStrategy {
    /// The target's roof-plane mates, plus up to 10 single-swap variants.
    SamePlaneFirst,
    /// Every subset when there are at most `MAX_CANDIDATES`; random otherwise.
    AllSubsets,
    /// `count` distinct subsets drawn under `seed`.
    RandomSubsets { count: usize, seed: u64 },
}

/// Cap on candidate subsets per panel; keeps wide arrays tractable.
pub const MAX_CANDIDATES: usize = 200;
const MAX_SWAP_VARIANTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// A sample is lossy when `anomaly_loss < -pointwise_deficit x predicted`.
    pub pointwise_deficit: f64,
    /// Fraction of daylight samples that must be lossy to flag.
    pub persistence_min: f64,
    /// Day-level unexplained-loss fraction that must be reached to flag.
    pub loss_ratio_min: f64,
    /// Array daily energy below this fraction of nameplate daily energy
    /// (together with no clean model anywhere) escalates to system-wide.
    pub system_floor_fraction: f64,
    /// Confidence multiplier when falling back to a model with noisy inputs.
    pub fallback_confidence: f64,
    /// Daylight threshold as a fraction of array nameplate.
    pub daylight_epsilon_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pointwise_deficit: 0.2,
            persistence_min: 0.5,
            loss_ratio_min: 0.15,
            system_floor_fraction: 0.05,
            fallback_confidence: 0.5,
            daylight_epsilon_fraction: 0.01,
        }
    }
}

/// The candidate models for one target panel. Subsets are pairwise distinct,
/// never include the target, and are stored in lexicographic input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub target_panel_id: String,
    pub candidates: Vec<PredictionModel>,
}

/// One panel-day verdict. `model_inputs` is `None` exactly when no per-panel
/// model was applied (system-wide day, or an error degraded the entry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub panel_id: String,
    pub date: NaiveDate,
    pub flagged: bool,
    pub daily_loss_ratio: f64,
    /// Fraction of daylight samples whose loss exceeded the pointwise cut.
    pub persistence: f64,
    pub model_inputs: Option<Vec<String>>,
    pub system_wide: bool,
    pub class_label: Option<String>,
    pub confidence: f64,
    pub warning: Option<String>,
}

impl FaultReport {
    fn unflagged(panel_id: &str, date: NaiveDate, warning: String) -> Self {
        Self {
            panel_id: panel_id.to_string(),
            date,
            flagged: false,
            daily_loss_ratio: 0.0,
            persistence: 0.0,
            model_inputs: None,
            system_wide: false,
            class_label: None,
            confidence: 0.0,
            warning: Some(warning),
        }
    }
}

/// Number of k-subsets of an n-set, saturating.
fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// All k-subsets of `pool` in lexicographic index order.
fn enumerate_subsets(pool: &[String], k: usize) -> Vec<Vec<String>> {
    let n = pool.len();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| pool[i].clone()).collect());
        // advance the rightmost index that can still move
        let mut pos = k;
        while pos > 0 {
            pos -= 1;
            if idx[pos] != pos + n - k {
                idx[pos] += 1;
                for j in pos + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return out;
            }
        }
        if k == 0 {
            return out;
        }
    }
}

/// `count` distinct k-subsets of `pool` under `seed`, lexicographic order.
fn random_subsets(pool: &[String], k: usize, count: usize, seed: u64) -> Vec<Vec<String>> {
    if binomial(pool.len(), k) <= count as u128 {
        return enumerate_subsets(pool, k);
    }
    let mut rng = seeds::rng(seed, "subset", &[]);
    let mut chosen: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut attempts = 0usize;
    while chosen.len() < count && attempts < 1000 + 50 * count {
        attempts += 1;
        let mut subset: Vec<String> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .iter()
            .map(|i| pool[i].clone())
            .collect();
        subset.sort();
        chosen.insert(subset);
    }
    chosen.into_iter().collect()
}

fn subsets_for(
    layout: &ArrayLayout,
    target: &str,
    n: usize,
    strategy: SubsetStrategy,
    fallback_seed: u64,
) -> Result<Vec<Vec<String>>, DetectError> {
    let mut others: Vec<String> =
        layout.others(target).iter().map(|p| p.panel_id.clone()).collect();
    others.sort();
    if others.len() < n {
        return Err(DetectError::TooFewPanels { available: others.len(), needed: n });
    }
    let subsets = match strategy {
        SubsetStrategy::AllSubsets => {
            if binomial(others.len(), n) <= MAX_CANDIDATES as u128 {
                enumerate_subsets(&others, n)
            } else {
                random_subsets(&others, n, MAX_CANDIDATES, fallback_seed)
            }
        }
        SubsetStrategy::RandomSubsets { count, seed } => random_subsets(&others, n, count, seed),
        SubsetStrategy::SamePlaneFirst => {
            let mut mates: Vec<String> =
                layout.plane_mates(target).iter().map(|p| p.panel_id.clone()).collect();
            mates.sort();
            let mut base: Vec<String> = mates.iter().take(n).cloned().collect();
            for id in &others {
                if base.len() == n {
                    break;
                }
                if !base.contains(id) {
                    base.push(id.clone());
                }
            }
            base.sort();
            let mut out = vec![base.clone()];
            let mut seen: BTreeSet<Vec<String>> = out.iter().cloned().collect();
            'swaps: for drop_idx in 0..base.len() {
                for candidate in &others {
                    if base.contains(candidate) {
                        continue;
                    }
                    let mut variant = base.clone();
                    variant[drop_idx] = candidate.clone();
                    variant.sort();
                    if seen.insert(variant.clone()) {
                        out.push(variant);
                        if out.len() > MAX_SWAP_VARIANTS {
                            break 'swaps;
                        }
                    }
                }
            }
            out
        }
    };
    Ok(subsets)
}

/// Fit one ensemble model per input subset for `target`.
pub fn build_candidates(
    layout: &ArrayLayout,
    target: &str,
    n: usize,
    strategy: SubsetStrategy,
    training: &[DaySlice],
    fit_cfg: &FitConfig,
) -> Result<CandidateSet, DetectError> {
    let spec = layout.panel(target).ok_or_else(|| DetectError::UnknownPanel(target.into()))?;
    let subsets = subsets_for(layout, target, n, strategy, fit_cfg.seed)?;
    let mut candidates = Vec::with_capacity(subsets.len());
    for (i, subset) in subsets.iter().enumerate() {
        let mut cfg = *fit_cfg;
        cfg.seed = seeds::derive(fit_cfg.seed, "candidate", &[i as u64]);
        candidates.push(fit(ModelKind::Ensemble, target, subset, training, spec.capacity_w, &cfg)?);
    }
    Ok(CandidateSet { target_panel_id: target.to_string(), candidates })
}

fn noisy_count(model: &PredictionModel, noisy: &BTreeSet<&str>) -> usize {
    model.input_panel_ids.iter().filter(|id| noisy.contains(id.as_str())).count()
}

/// Candidate order used everywhere: fewest noisy inputs, then lexicographic
/// input subset.
fn ranked<'a>(
    set: &'a CandidateSet,
    labels: &[InputLabel],
) -> Result<Vec<(usize, &'a PredictionModel)>, DetectError> {
    let labeled: BTreeSet<&str> = labels.iter().map(|l| l.panel_id.as_str()).collect();
    for c in &set.candidates {
        for id in &c.input_panel_ids {
            if !labeled.contains(id.as_str()) {
                return Err(DetectError::MissingLabel(id.clone()));
            }
        }
    }
    let noisy: BTreeSet<&str> =
        labels.iter().filter(|l| l.is_noisy()).map(|l| l.panel_id.as_str()).collect();
    let mut order: Vec<(usize, &PredictionModel)> =
        set.candidates.iter().map(|c| (noisy_count(c, &noisy), c)).collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.input_panel_ids.cmp(&b.1.input_panel_ids)));
    Ok(order)
}

/// First candidate, in deterministic order, whose inputs are all Normal.
pub fn select_model<'a>(
    set: &'a CandidateSet,
    labels: &[InputLabel],
) -> Result<&'a PredictionModel, DetectError> {
    let order = ranked(set, labels)?;
    match order.first() {
        Some(&(0, model)) => Ok(model),
        _ => Err(DetectError::NoCleanModel),
    }
}

/// Best-effort candidate when no clean one exists: fewest noisy inputs.
/// Returns the model and its noisy-input count.
pub fn select_fallback<'a>(
    set: &'a CandidateSet,
    labels: &[InputLabel],
) -> Result<(&'a PredictionModel, usize), DetectError> {
    let order = ranked(set, labels)?;
    order.first().map(|&(k, m)| (m, k)).ok_or(DetectError::NoCleanModel)
}

/// Apply a chosen model to one panel-day and decide flagged/unflagged.
/// `class_label` is left empty for the classifier stage.
pub fn detect_day(
    model: &PredictionModel,
    day: &DaySlice,
    seasonal: &SeasonalProfile,
    cfg: &DetectorConfig,
) -> Result<(FaultReport, LossEstimate), DetectError> {
    let loss = loss_estimate(model, day, seasonal)?;
    let mut lossy = 0usize;
    let mut total = 0usize;
    for (a, p) in loss.anomaly_loss.iter().zip(&loss.predicted) {
        if let (Some(a), Some(p)) = (a, p) {
            total += 1;
            if *a < -cfg.pointwise_deficit * p {
                lossy += 1;
            }
        }
    }
    let persistence = if total > 0 { lossy as f64 / total as f64 } else { 0.0 };
    let flagged =
        persistence >= cfg.persistence_min && loss.daily_loss_ratio >= cfg.loss_ratio_min;
    let report = FaultReport {
        panel_id: model.target_panel_id.clone(),
        date: day.date,
        flagged,
        daily_loss_ratio: loss.daily_loss_ratio,
        persistence,
        model_inputs: Some(model.input_panel_ids.clone()),
        system_wide: false,
        class_label: None,
        confidence: 1.0,
        warning: None,
    };
    Ok((report, loss))
}

/// Everything `detect_array` produces for one panel-day: the verdict plus the
/// loss decomposition the classifier consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub report: FaultReport,
    pub loss: Option<LossEstimate>,
}

/// Trained per-panel state entering detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelModels {
    pub candidates: BTreeMap<String, CandidateSet>,
    pub forecasters: BTreeMap<String, ForecastModel>,
}

/// Per-panel trailing residual history; drives the seasonal profile.
struct SeasonalState {
    window: BTreeMap<String, VecDeque<(NaiveDate, SlotSeries)>>,
}

impl SeasonalState {
    fn new(panel_ids: &[String]) -> Self {
        Self {
            window: panel_ids.iter().map(|id| (id.clone(), VecDeque::new())).collect(),
        }
    }

    fn profile(&self, panel_id: &str, date: NaiveDate) -> SeasonalProfile {
        let Some(entries) = self.window.get(panel_id) else {
            return SeasonalProfile::zero();
        };
        let cutoff = date - chrono::TimeDelta::days(SEASONAL_WINDOW_DAYS as i64);
        let recent: Vec<SlotSeries> = entries
            .iter()
            .filter(|(d, _)| *d < date && *d >= cutoff)
            .map(|(_, s)| s.clone())
            .collect();
        seasonal_decompose(&recent, SEASONAL_MIN_DAYS).unwrap_or_else(|_| SeasonalProfile::zero())
    }

    fn push(&mut self, panel_id: &str, date: NaiveDate, series: SlotSeries) {
        if let Some(entries) = self.window.get_mut(panel_id) {
            entries.push_back((date, series));
            while entries.len() > SEASONAL_WINDOW_DAYS {
                entries.pop_front();
            }
        }
    }
}

/// Label every panel of `day` Normal/Noisy from forecast divergence.
pub fn label_day(
    matrix: &PanelMatrix,
    layout: &ArrayLayout,
    forecasters: &BTreeMap<String, ForecastModel>,
    weather: &WeatherSeries,
    date: NaiveDate,
    fcfg: &ForecasterConfig,
) -> Result<Vec<InputLabel>, DetectError> {
    let mut energies = Vec::with_capacity(matrix.num_panels());
    for (col, id) in matrix.panel_ids().iter().enumerate() {
        let spec = layout.panel(id).ok_or_else(|| DetectError::UnknownPanel(id.clone()))?;
        let model =
            forecasters.get(id).ok_or_else(|| DetectError::UnknownPanel(id.clone()))?;
        let fc = forecast(model, date, weather, fcfg)?;
        energies.push(PanelDayEnergy {
            panel_id: id.clone(),
            observed: matrix.daily_total(col, date),
            forecast: fc.iter().sum(),
            nameplate_daily: spec.capacity_w * SLOTS_PER_DAY as f64,
        });
    }
    Ok(forecaster::label_inputs(date, &energies, fcfg))
}

/// Run detection over `dates`. The date loop is sequential: each day's
/// residuals feed the trailing seasonal window used on later days.
/// `seasonal_seed` slices (typically the training days) pre-fill that window.
pub fn detect_array(
    matrix: &PanelMatrix,
    layout: &ArrayLayout,
    models: &PanelModels,
    weather: &WeatherSeries,
    dates: &[NaiveDate],
    seasonal_seed: &[DaySlice],
    cfg: &DetectorConfig,
    fcfg: &ForecasterConfig,
) -> Vec<Detection> {
    let mut state = SeasonalState::new(matrix.panel_ids());
    for day in seasonal_seed {
        for id in matrix.panel_ids() {
            if let Some(set) = models.candidates.get(id) {
                if let Some(model) = set.candidates.first() {
                    if let Ok(loss) = loss_estimate(model, day, &SeasonalProfile::zero()) {
                        state.push(id, day.date, residual_by_slot(&loss.slots, &loss.residual));
                    }
                }
            }
        }
    }

    let eps = layout.daylight_epsilon_w(cfg.daylight_epsilon_fraction);
    let days: BTreeMap<NaiveDate, DaySlice> =
        segment_days(matrix, eps).into_iter().map(|d| (d.date, d)).collect();
    let nameplate_daily = layout.total_capacity_w() * SLOTS_PER_DAY as f64;

    let mut out = Vec::new();
    for &date in dates {
        let Some(day) = days.get(&date) else {
            for id in matrix.panel_ids() {
                out.push(Detection {
                    report: FaultReport::unflagged(id, date, "date not in power data".into()),
                    loss: None,
                });
            }
            continue;
        };

        let labels = match label_day(matrix, layout, &models.forecasters, weather, date, fcfg) {
            Ok(labels) => labels,
            Err(e) => {
                for id in matrix.panel_ids() {
                    out.push(Detection {
                        report: FaultReport::unflagged(id, date, format!("input labeling failed: {e}")),
                        loss: None,
                    });
                }
                continue;
            }
        };

        // First pass: clean-model detection per panel.
        let mut day_results: Vec<(String, Result<(FaultReport, LossEstimate), DetectError>)> =
            Vec::new();
        let mut clean_anywhere = false;
        for id in matrix.panel_ids() {
            let result = match models.candidates.get(id) {
                None => Err(DetectError::UnknownPanel(id.clone())),
                Some(set) => select_model(set, &labels).and_then(|model| {
                    clean_anywhere = true;
                    detect_day(model, day, &state.profile(id, date), cfg)
                }),
            };
            day_results.push((id.clone(), result));
        }

        let array_energy: f64 = (0..matrix.num_panels())
            .map(|col| matrix.daily_total(col, date))
            .sum();
        let system_day = !clean_anywhere
            && array_energy < cfg.system_floor_fraction * nameplate_daily;

        if system_day {
            for id in matrix.panel_ids() {
                // deficit vs forecast, already floor-protected by labeling
                let ratio = labels
                    .iter()
                    .find(|l| &l.panel_id == id)
                    .map_or(1.0, |l| l.divergence.clamp(0.0, 1.0));
                out.push(Detection {
                    report: FaultReport {
                        panel_id: id.clone(),
                        date,
                        flagged: true,
                        daily_loss_ratio: ratio,
                        persistence: 1.0,
                        model_inputs: None,
                        system_wide: true,
                        class_label: None,
                        confidence: 1.0,
                        warning: None,
                    },
                    loss: None,
                });
            }
            continue;
        }

        for (id, result) in day_results {
            let resolved = match result {
                Ok(pair) => Ok(pair),
                Err(DetectError::NoCleanModel) => models
                    .candidates
                    .get(&id)
                    .ok_or_else(|| DetectError::UnknownPanel(id.clone()))
                    .and_then(|set| select_fallback(set, &labels))
                    .and_then(|(model, k)| {
                        detect_day(model, day, &state.profile(&id, date), cfg).map(
                            |(mut report, loss)| {
                                report.confidence *= cfg.fallback_confidence;
                                report.warning = Some(format!(
                                    "no clean candidate; best model has {k} noisy input(s)"
                                ));
                                (report, loss)
                            },
                        )
                    }),
                Err(e) => Err(e),
            };
            match resolved {
                Ok((report, loss)) => {
                    state.push(&id, date, residual_by_slot(&loss.slots, &loss.residual));
                    out.push(Detection { report, loss: Some(loss) });
                }
                Err(e) => out.push(Detection {
                    report: FaultReport::unflagged(&id, date, format!("detection failed: {e}")),
                    loss: None,
                }),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PanelSpec, WeatherSample};
    use crate::forecaster::InputStatus;
    use chrono::TimeDelta;

    fn layout_with(ids: &[(&str, &str)]) -> ArrayLayout {
        ArrayLayout {
            latitude_deg: 42.4,
            longitude_deg: -72.5,
            panels: ids
                .iter()
                .map(|&(id, plane)| PanelSpec {
                    panel_id: id.to_string(),
                    roof_plane: plane.to_string(),
                    tilt_deg: 30.0,
                    azimuth_deg: 180.0,
                    capacity_w: 320.0,
                    panel_gain: 1.0,
                })
                .collect(),
        }
    }

    fn date(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 6, day).unwrap()
    }

    fn bell(slot: usize) -> f64 {
        if (90..200).contains(&slot) {
            let x = (slot as f64 - 145.0) / 55.0;
            300.0 * (1.0 - x * x)
        } else {
            0.0
        }
    }

    /// Days where every panel tracks a shared bell curve with a tiny
    /// deterministic per-panel, per-slot wiggle (so trees have structure).
    fn synthetic_days(ids: &[&str], days: u32) -> Vec<DaySlice> {
        (1..=days)
            .map(|d| {
                let rows = (90..200)
                    .map(|s| {
                        let row = ids
                            .iter()
                            .enumerate()
                            .map(|(i, _)| {
                                let wiggle =
                                    1.0 + 0.01 * ((s * (i + 3) + d as usize) % 7) as f64 / 7.0;
                                Some(bell(s) * wiggle)
                            })
                            .collect();
                        (s, row)
                    })
                    .collect();
                DaySlice::from_rows(
                    date(d),
                    ids.iter().map(|s| s.to_string()).collect(),
                    rows,
                )
                .unwrap()
            })
            .collect()
    }

    fn labels_for(ids: &[&str], noisy: &[&str]) -> Vec<InputLabel> {
        ids.iter()
            .map(|id| InputLabel {
                panel_id: id.to_string(),
                date: date(9),
                label: if noisy.contains(id) { InputStatus::Noisy } else { InputStatus::Normal },
                divergence: if noisy.contains(id) { 0.9 } else { 0.0 },
            })
            .collect()
    }

    fn quick_fit() -> FitConfig {
        FitConfig { trees: 5, max_depth: 4, min_leaf: 5, with_intercept: true, seed: 7 }
    }

    #[test]
    fn all_subsets_enumerates_pairs() {
        let layout = layout_with(&[("A", "south"), ("B", "south"), ("C", "south"), ("D", "south")]);
        let training = synthetic_days(&["A", "B", "C", "D"], 3);
        let set = build_candidates(
            &layout,
            "A",
            2,
            SubsetStrategy::AllSubsets,
            &training,
            &quick_fit(),
        )
        .unwrap();
        let subsets: Vec<Vec<String>> =
            set.candidates.iter().map(|c| c.input_panel_ids.clone()).collect();
        assert_eq!(
            subsets,
            vec![
                vec!["B".to_string(), "C".to_string()],
                vec!["B".to_string(), "D".to_string()],
                vec!["C".to_string(), "D".to_string()],
            ]
        );
    }

    #[test]
    fn too_few_panels_rejected() {
        let layout = layout_with(&[("A", "south"), ("B", "south"), ("C", "south")]);
        let training = synthetic_days(&["A", "B", "C"], 3);
        let err = build_candidates(
            &layout,
            "A",
            3,
            SubsetStrategy::AllSubsets,
            &training,
            &quick_fit(),
        )
        .unwrap_err();
        assert!(matches!(err, DetectError::TooFewPanels { available: 2, needed: 3 }));
    }

    #[test]
    fn random_subsets_reproducible_and_distinct() {
        let ids: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
        let a = random_subsets(&ids, 3, 5, 99);
        let b = random_subsets(&ids, 3, 5, 99);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let distinct: BTreeSet<&Vec<String>> = a.iter().collect();
        assert_eq!(distinct.len(), 5);
        let c = random_subsets(&ids, 3, 5, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn same_plane_first_leads_with_mates() {
        let layout = layout_with(&[
            ("A", "south"),
            ("B", "south"),
            ("C", "south"),
            ("D", "east"),
            ("E", "east"),
        ]);
        let subsets = subsets_for(&layout, "A", 2, SubsetStrategy::SamePlaneFirst, 0).unwrap();
        assert_eq!(subsets[0], vec!["B".to_string(), "C".to_string()]);
        assert!(subsets.len() <= 1 + MAX_SWAP_VARIANTS);
        let all: BTreeSet<&Vec<String>> = subsets.iter().collect();
        assert_eq!(all.len(), subsets.len(), "variants must be distinct");
    }

    fn three_candidate_set() -> CandidateSet {
        let layout = layout_with(&[("A", "south"), ("B", "south"), ("C", "south"), ("D", "south")]);
        let training = synthetic_days(&["A", "B", "C", "D"], 3);
        build_candidates(&layout, "A", 2, SubsetStrategy::AllSubsets, &training, &quick_fit())
            .unwrap()
    }

    #[test]
    fn selection_skips_noisy_inputs() {
        let set = three_candidate_set();
        let labels = labels_for(&["A", "B", "C", "D"], &["A", "B"]);
        let chosen = select_model(&set, &labels).unwrap();
        assert_eq!(chosen.input_panel_ids, vec!["C".to_string(), "D".to_string()]);
    }

    #[test]
    fn selection_is_lexicographic_when_all_clean() {
        let set = three_candidate_set();
        let labels = labels_for(&["A", "B", "C", "D"], &[]);
        let chosen = select_model(&set, &labels).unwrap();
        assert_eq!(chosen.input_panel_ids, vec!["B".to_string(), "C".to_string()]);
    }

    #[test]
    fn all_noisy_is_no_clean_model() {
        let set = three_candidate_set();
        let labels = labels_for(&["A", "B", "C", "D"], &["A", "B", "C", "D"]);
        assert!(matches!(select_model(&set, &labels), Err(DetectError::NoCleanModel)));
    }

    #[test]
    fn selection_never_touches_noisy_exhaustively() {
        let set = three_candidate_set();
        let ids = ["A", "B", "C", "D"];
        for mask in 0..16u32 {
            let noisy: Vec<&str> =
                ids.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, s)| *s).collect();
            let labels = labels_for(&ids, &noisy);
            match select_model(&set, &labels) {
                Ok(model) => {
                    for input in &model.input_panel_ids {
                        assert!(!noisy.contains(&input.as_str()), "mask {mask:04b}");
                    }
                }
                Err(DetectError::NoCleanModel) => {
                    // every candidate must indeed touch the noisy set
                    for c in &set.candidates {
                        assert!(
                            c.input_panel_ids.iter().any(|i| noisy.contains(&i.as_str())),
                            "mask {mask:04b} wrongly rejected {:?}",
                            c.input_panel_ids
                        );
                    }
                }
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn missing_label_is_an_error() {
        let set = three_candidate_set();
        let labels = labels_for(&["A", "B"], &[]);
        assert!(matches!(select_model(&set, &labels), Err(DetectError::MissingLabel(_))));
    }

    #[test]
    fn dead_panel_day_flags_and_normal_day_does_not() {
        let set = three_candidate_set();
        let labels = labels_for(&["A", "B", "C", "D"], &[]);
        let model = select_model(&set, &labels).unwrap();
        let cfg = DetectorConfig::default();

        let normal = &synthetic_days(&["A", "B", "C", "D"], 1)[0];
        let (report, _) = detect_day(model, normal, &SeasonalProfile::zero(), &cfg).unwrap();
        assert!(!report.flagged);
        assert!(report.daily_loss_ratio < 0.1);

        // same day with panel A zeroed out
        let rows = (90..200)
            .map(|s| {
                (
                    s,
                    vec![Some(0.0), Some(bell(s)), Some(bell(s)), Some(bell(s))],
                )
            })
            .collect();
        let dead = DaySlice::from_rows(
            date(9),
            vec!["A".into(), "B".into(), "C".into(), "D".into()],
            rows,
        )
        .unwrap();
        let (report, loss) = detect_day(model, &dead, &SeasonalProfile::zero(), &cfg).unwrap();
        assert!(report.flagged);
        assert!(report.daily_loss_ratio > 0.9, "ratio {}", report.daily_loss_ratio);
        assert!(report.persistence > 0.99);
        assert!(loss.anomaly_loss.iter().flatten().all(|&a| a <= 0.0));
    }

    #[test]
    fn brief_shallow_dip_stays_unflagged() {
        let set = three_candidate_set();
        let labels = labels_for(&["A", "B", "C", "D"], &[]);
        let model = select_model(&set, &labels).unwrap();
        // 10% dip on 6 of 110 samples: persistence ~0.05, far below 0.5
        let rows = (90..200)
            .map(|s| {
                let a = if (120..126).contains(&s) { bell(s) * 0.9 } else { bell(s) };
                (s, vec![Some(a), Some(bell(s)), Some(bell(s)), Some(bell(s))])
            })
            .collect();
        let day = DaySlice::from_rows(
            date(9),
            vec!["A".into(), "B".into(), "C".into(), "D".into()],
            rows,
        )
        .unwrap();
        let (report, _) =
            detect_day(model, &day, &SeasonalProfile::zero(), &DetectorConfig::default()).unwrap();
        assert!(!report.flagged);
    }

    /// Full detect_array pass on synthetic data: one clean day, one day with a
    /// dead panel, one dark day that must escalate to system-wide.
    #[test]
    fn detect_array_handles_per_panel_and_system_faults() {
        let ids = ["A", "B", "C", "D"];
        let layout = layout_with(&[("A", "south"), ("B", "south"), ("C", "south"), ("D", "south")]);
        let training = synthetic_days(&ids, 3);

        let mut candidates = BTreeMap::new();
        let mut forecasters = BTreeMap::new();
        let weather_train: Vec<WeatherSample> = (1..=3)
            .flat_map(|d| {
                (0..24).map(move |h| WeatherSample {
                    timestamp: crate::data::slot_timestamp(date(d), 0) + TimeDelta::hours(h),
                    cloud_cover: 0.0,
                    snow_depth_cm: 0.0,
                    is_forecast: false,
                })
            })
            .collect();
        let weather_train = WeatherSeries::new(weather_train).unwrap();
        for id in &ids {
            candidates.insert(
                id.to_string(),
                build_candidates(
                    &layout,
                    id,
                    2,
                    SubsetStrategy::AllSubsets,
                    &training,
                    &quick_fit(),
                )
                .unwrap(),
            );
            forecasters.insert(
                id.to_string(),
                forecaster::fit_forecaster(
                    id,
                    320.0,
                    &training,
                    &weather_train,
                    &ForecasterConfig::default(),
                )
                .unwrap(),
            );
        }
        let models = PanelModels { candidates, forecasters };

        // analysis days 4 (clean), 5 (A dead), 6 (all dark)
        let start = crate::data::slot_timestamp(date(4), 0);
        let mut cells: Vec<Option<f64>> = Vec::new();
        for d in 4..=6u32 {
            for s in 0..SLOTS_PER_DAY {
                for (i, _) in ids.iter().enumerate() {
                    let lit = (90..200).contains(&s);
                    let v = if !lit {
                        0.0
                    } else if d == 6 {
                        1.0 // array total 4 W — dark, below 1% of 1280 W
                    } else if d == 5 && i == 0 {
                        0.0
                    } else {
                        let wiggle = 1.0 + 0.01 * ((s * (i + 3) + d as usize) % 7) as f64 / 7.0;
                        bell(s) * wiggle
                    };
                    cells.push(Some(v));
                }
            }
        }
        let matrix = PanelMatrix::new(
            ids.iter().map(|s| s.to_string()).collect(),
            start,
            cells,
        )
        .unwrap();
        let weather_run: Vec<WeatherSample> = (4..=6)
            .flat_map(|d| {
                (0..24).map(move |h| WeatherSample {
                    timestamp: crate::data::slot_timestamp(date(d), 0) + TimeDelta::hours(h),
                    cloud_cover: 0.0,
                    snow_depth_cm: 0.0,
                    is_forecast: false,
                })
            })
            .collect();
        let weather_run = WeatherSeries::new(weather_run).unwrap();

        let dates = vec![date(4), date(5), date(6)];
        let detections = detect_array(
            &matrix,
            &layout,
            &models,
            &weather_run,
            &dates,
            &training,
            &DetectorConfig::default(),
            &ForecasterConfig::default(),
        );
        assert_eq!(detections.len(), 12);

        let by_key: BTreeMap<(NaiveDate, &str), &Detection> = detections
            .iter()
            .map(|d| ((d.report.date, d.report.panel_id.as_str()), d))
            .collect();

        for id in &ids {
            assert!(!by_key[&(date(4), *id)].report.flagged, "clean day flag on {id}");
        }
        assert!(by_key[&(date(5), "A")].report.flagged);
        assert!(by_key[&(date(5), "A")].report.daily_loss_ratio > 0.9);
        for id in ["B", "C", "D"] {
            assert!(!by_key[&(date(5), id)].report.flagged, "false flag on {id}");
        }
        for id in &ids {
            let r = &by_key[&(date(6), *id)].report;
            assert!(r.flagged && r.system_wide, "system-wide miss on {id}");
            assert!(r.model_inputs.is_none());
        }
    }

    #[test]
    fn fallback_halves_confidence_and_warns() {
        let layout = layout_with(&[("A", "south"), ("B", "south"), ("C", "south")]);
        let training = synthetic_days(&["A", "B", "C"], 3);
        let set = build_candidates(
            &layout,
            "A",
            2,
            SubsetStrategy::AllSubsets,
            &training,
            &quick_fit(),
        )
        .unwrap();
        assert_eq!(set.candidates.len(), 1, "C(2,2) = 1 candidate");
        let labels = labels_for(&["A", "B", "C"], &["B"]);
        assert!(matches!(select_model(&set, &labels), Err(DetectError::NoCleanModel)));
        let (model, k) = select_fallback(&set, &labels).unwrap();
        assert_eq!(k, 1);
        let day = &synthetic_days(&["A", "B", "C"], 1)[0];
        let (mut report, _) =
            detect_day(model, day, &SeasonalProfile::zero(), &DetectorConfig::default()).unwrap();
        report.confidence *= DetectorConfig::default().fallback_confidence;
        assert_eq!(report.confidence, 0.5);
    }

    #[test]
    fn binomial_matches_known_values() {
        assert_eq!(binomial(3, 2), 3);
        assert_eq!(binomial(30, 5), 142_506);
        assert_eq!(binomial(4, 0), 1);
        assert_eq!(binomial(2, 3), 0);
    }
}
