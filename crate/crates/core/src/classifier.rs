//! Fault-cause classification for flagged panel-days. A random forest over a
//! 44-value feature vector (40 sampled loss fractions, calendar month, snow
//! depth, mean neighbor correlation, capacity ratio) separates snow cover,
//! partial occlusion, and open-circuit failure. Dark system-wide days skip
//! the forest entirely: recent snowfall means full snow cover, otherwise a
//! system-level electrical fault.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, TimeDelta};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DaySlice, WeatherSeries};
use crate::detector::FaultReport;
use crate::forest::{bootstrap_indices, fit_classification_tree, Tree, TreeParams};
use crate::ingest::pearson_complete;
use crate::predictors::LossEstimate;
use crate::seeds;

/// Loss fractions sampled per day.
pub const LOSS_SAMPLE_COUNT: usize = 40;
/// Total feature vector width.
pub const FEATURE_COUNT: usize = LOSS_SAMPLE_COUNT + 4;
/// Trees in the forest. Odd, to reduce exact vote ties.
pub const DEFAULT_TREES: usize = 101;
/// Minimum training examples per class that appears in training.
pub const MIN_PER_CLASS: usize = 5;
/// Features considered per split: ceil(sqrt(44)).
pub const FEATURES_PER_SPLIT: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("report is not flagged; nothing to classify")]
    NotFlagged,
    #[error("no usable loss samples on the flagged day")]
    NoSamples,
    #[error("class {class} has {count} examples, need {needed}")]
    ClassTooSmall { class: FaultClass, count: usize, needed: usize },
    #[error("empty training set")]
    EmptyTraining,
    #[error("no system-wide report present for the date")]
    NotSystemWide,
}

/// Per-panel fault causes, in fixed tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultClass {
    Snow,
    Occlusion,
    OpenCircuit,
}

pub const CLASSES: [FaultClass; 3] =
    [FaultClass::Snow, FaultClass::Occlusion, FaultClass::OpenCircuit];

impl FaultClass {
    pub fn index(self) -> usize {
        match self {
            FaultClass::Snow => 0,
            FaultClass::Occlusion => 1,
            FaultClass::OpenCircuit => 2,
        }
    }
}

impl std::fmt::Display for FaultClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FaultClass::Snow => "Snow",
            FaultClass::Occlusion => "Occlusion",
            FaultClass::OpenCircuit => "OpenCircuit",
        })
    }
}

impl std::str::FromStr for FaultClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Snow" => Ok(FaultClass::Snow),
            "Occlusion" => Ok(FaultClass::Occlusion),
            "OpenCircuit" => Ok(FaultClass::OpenCircuit),
            other => Err(format!("unknown fault class `{other}`")),
        }
    }
}

/// Causes of a system-wide dark day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemWideClass {
    FullSnow,
    SystemElectrical,
}

impl std::fmt::Display for SystemWideClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SystemWideClass::FullSnow => "FullSnow",
            SystemWideClass::SystemElectrical => "SystemElectrical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// 40 loss fractions in [0, 1] at sampled daylight points.
    pub loss_samples: Vec<f64>,
    /// Calendar month 1-12.
    pub month: u32,
    /// Daily maximum snow depth, centimeters.
    pub snow_depth_cm: f64,
    /// Mean pairwise correlation with the other panels over the day.
    pub corr_mean: f64,
    /// Day-max observed power over nameplate, clamped to [0, 1].
    pub capacity_ratio: f64,
}

impl FeatureVector {
    /// Flatten to the fixed 44-value layout the trees split on.
    pub fn as_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FEATURE_COUNT);
        v.extend_from_slice(&self.loss_samples);
        v.push(self.month as f64);
        v.push(self.snow_depth_cm);
        v.push(self.corr_mean);
        v.push(self.capacity_ratio);
        v
    }
}

/// Mean pairwise-complete correlation between `target` and every other panel
/// over the day; pairs with under 3 overlapping samples are skipped.
fn mean_correlation(day: &DaySlice, target_col: usize) -> f64 {
    let target = day.column(target_col);
    let mut sum = 0.0;
    let mut count = 0usize;
    for col in 0..day.num_panels() {
        if col == target_col {
            continue;
        }
        let (r, overlap) = pearson_complete(&target, &day.column(col));
        if overlap >= 3 {
            sum += r;
            count += 1;
        }
    }
    if count > 0 {
        sum / count as f64
    } else {
        0.0
    }
}

/// Build the feature vector for one flagged panel-day. Indices are drawn
/// without replacement from the day's usable samples (with replacement when
/// fewer than 40 exist) and sorted, all under `seed`.
pub fn extract_features(
    report: &FaultReport,
    loss: &LossEstimate,
    day: &DaySlice,
    weather: &WeatherSeries,
    nameplate_w: f64,
    seed: u64,
) -> Result<FeatureVector, ClassifyError> {
    if !report.flagged {
        return Err(ClassifyError::NotFlagged);
    }
    let pool: Vec<f64> = loss
        .anomaly_loss
        .iter()
        .zip(&loss.predicted)
        .filter_map(|(a, p)| match (a, p) {
            (Some(a), Some(p)) if *p > 0.0 => Some((-a / p).clamp(0.0, 1.0)),
            _ => None,
        })
        .collect();
    if pool.is_empty() {
        return Err(ClassifyError::NoSamples);
    }

    let mut rng = seeds::rng(seed, "featsample", &[]);
    let mut indices: Vec<usize> = if pool.len() >= LOSS_SAMPLE_COUNT {
        rand::seq::index::sample(&mut rng, pool.len(), LOSS_SAMPLE_COUNT).into_vec()
    } else {
        (0..LOSS_SAMPLE_COUNT).map(|_| rng.random_range(0..pool.len())).collect()
    };
    indices.sort_unstable();
    let loss_samples: Vec<f64> = indices.iter().map(|&i| pool[i]).collect();

    let target_col = day.panel_index(&report.panel_id).ok_or(ClassifyError::NoSamples)?;
    let capacity_ratio = day
        .column(target_col)
        .into_iter()
        .flatten()
        .fold(0.0, f64::max)
        / nameplate_w;

    Ok(FeatureVector {
        loss_samples,
        month: report.date.month(),
        snow_depth_cm: weather.snow_depth_on(report.date),
        corr_mean: mean_correlation(day, target_col),
        capacity_ratio: capacity_ratio.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub trees: usize,
    pub seed: u64,
    pub class_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestClassifier {
    pub trees: Vec<Tree>,
    /// Classes present in training; votes for others can never occur.
    pub trained_classes: Vec<FaultClass>,
    pub meta: ClassifierMeta,
}

/// Fit a random forest: bootstrap per tree, Gini splits, 7 features per
/// split. Training order is canonicalized first, so shuffling the examples
/// changes nothing.
pub fn fit_forest(
    training: &[(FeatureVector, FaultClass)],
    trees: usize,
    seed: u64,
) -> Result<ForestClassifier, ClassifyError> {
    if training.is_empty() {
        return Err(ClassifyError::EmptyTraining);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for class in CLASSES {
        let count = training.iter().filter(|(_, c)| *c == class).count();
        if count > 0 {
            if count < MIN_PER_CLASS {
                return Err(ClassifyError::ClassTooSmall {
                    class,
                    count,
                    needed: MIN_PER_CLASS,
                });
            }
            counts.insert(class.to_string(), count);
        }
    }

    let mut rows: Vec<(Vec<f64>, usize)> =
        training.iter().map(|(f, c)| (f.as_values(), c.index())).collect();
    rows.sort_by(|a, b| {
        let by_x = a.0.iter().zip(&b.0).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne());
        by_x.unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.1.cmp(&b.1))
    });
    let xs: Vec<Vec<f64>> = rows.iter().map(|(x, _)| x.clone()).collect();
    let ys: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();

    let params = TreeParams { max_depth: 20, min_leaf: 1, features_per_split: FEATURES_PER_SPLIT };
    let fitted = (0..trees)
        .map(|b| {
            let mut rng = seeds::rng(seed, "ctree", &[b as u64]);
            let picks = bootstrap_indices(&mut rng, xs.len());
            let bx: Vec<Vec<f64>> = picks.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<usize> = picks.iter().map(|&i| ys[i]).collect();
            fit_classification_tree(&bx, &by, CLASSES.len(), &params, &mut rng)
        })
        .collect();

    Ok(ForestClassifier {
        trees: fitted,
        trained_classes: CLASSES
            .into_iter()
            .filter(|c| counts.contains_key(&c.to_string()))
            .collect(),
        meta: ClassifierMeta { trees, seed, class_counts: counts },
    })
}

/// Votes per class, indexed by `FaultClass::index`.
pub fn vote_counts(forest: &ForestClassifier, features: &FeatureVector) -> [usize; 3] {
    let x = features.as_values();
    let mut votes = [0usize; 3];
    for tree in &forest.trees {
        let class = tree.predict(&x).round() as usize;
        votes[class.min(2)] += 1;
    }
    votes
}

/// Majority vote; ties go to the earlier class in the fixed order. Confidence
/// is the winning vote share.
pub fn classify(forest: &ForestClassifier, features: &FeatureVector) -> (FaultClass, f64) {
    let votes = vote_counts(forest, features);
    let mut best = 0usize;
    for i in 1..3 {
        if votes[i] > votes[best] {
            best = i;
        }
    }
    (CLASSES[best], votes[best] as f64 / forest.trees.len() as f64)
}

/// Disambiguate a system-wide dark day: full snow cover if any snow depth was
/// reported on the date or the day before (cover outlasts snowfall), else a
/// system-level electrical fault.
pub fn classify_systemwide(
    reports: &[FaultReport],
    weather: &WeatherSeries,
) -> Result<SystemWideClass, ClassifyError> {
    let date: NaiveDate = reports
        .iter()
        .find(|r| r.system_wide)
        .map(|r| r.date)
        .ok_or(ClassifyError::NotSystemWide)?;
    let recent_snow = weather.snow_depth_on(date) > 0.0
        || weather.snow_depth_on(date - TimeDelta::days(1)) > 0.0;
    Ok(if recent_snow { SystemWideClass::FullSnow } else { SystemWideClass::SystemElectrical })
}
