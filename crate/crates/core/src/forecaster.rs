//! Weather-driven per-panel forecaster. Its only job is to gate model inputs:
//! a panel whose observed daily energy diverges hard from its weather-driven
//! forecast is labeled a noisy input and excluded from candidate models. It
//! is never used to detect faults directly — forecasts are too error-prone
//! for that.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{slot_timestamp, DaySlice, WeatherSeries, SLOTS_PER_DAY};

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("need {needed} training days with weather coverage, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("weather data does not overlap the training days")]
    NoWeatherOverlap,
    #[error("weather gap of {gap_minutes} min within daylight (max {max_minutes})")]
    WeatherGap { gap_minutes: i64, max_minutes: i64 },
    #[error("panel `{0}` absent from history")]
    UnknownPanel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    /// Daily-energy divergence above this labels a panel Noisy.
    pub noisy_threshold: f64,
    /// Cloud response when history cannot identify one (cloudless history).
    pub default_cloud_response: f64,
    /// Divergence denominator floor, as a fraction of daily nameplate energy.
    pub divergence_floor_fraction: f64,
    /// Largest tolerated weather gap within daylight when forecasting.
    pub max_weather_gap_minutes: i64,
    /// Fault-free days with weather coverage needed to fit.
    pub min_training_days: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            noisy_threshold: 0.35,
            default_cloud_response: 0.75,
            divergence_floor_fraction: 0.02,
            max_weather_gap_minutes: 60,
            min_training_days: 3,
        }
    }
}

/// Upper-envelope clear-output profiles (per calendar month) and a scalar
/// cloud attenuation coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub panel_id: String,
    pub nameplate_w: f64,
    /// month (1-12) -> watts per time-of-day slot
    pub monthly_profiles: BTreeMap<u32, Vec<f64>>,
    /// Envelope across all training days, for months never trained on.
    pub fallback_profile: Vec<f64>,
    pub cloud_response: f64,
    /// True when the history was cloudless and the default was used.
    pub cloud_response_defaulted: bool,
}

impl ForecastModel {
    fn profile_for(&self, date: NaiveDate) -> &[f64] {
        self.monthly_profiles
            .get(&date.month())
            .map_or(&self.fallback_profile, Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputStatus {
    Normal,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLabel {
    pub panel_id: String,
    pub date: NaiveDate,
    pub label: InputStatus,
    pub divergence: f64,
}

impl InputLabel {
    pub fn is_noisy(&self) -> bool {
        self.label == InputStatus::Noisy
    }
}

/// Fit a forecaster for one panel from fault-free history. The caller vouches
/// that `history` days are fault-free; days without any weather sample are
/// skipped.
pub fn fit_forecaster(
    panel_id: &str,
    nameplate_w: f64,
    history: &[DaySlice],
    weather: &WeatherSeries,
    cfg: &ForecasterConfig,
) -> Result<ForecastModel, ForecastError> {
    if weather.is_empty() {
        return Err(ForecastError::NoWeatherOverlap);
    }
    let covered: Vec<&DaySlice> = history
        .iter()
        .filter(|d| !d.is_empty())
        .filter(|d| weather.samples().iter().any(|s| s.timestamp.date_naive() == d.date))
        .collect();
    if covered.is_empty() {
        return Err(ForecastError::NoWeatherOverlap);
    }
    if covered.len() < cfg.min_training_days {
        return Err(ForecastError::InsufficientHistory {
            needed: cfg.min_training_days,
            got: covered.len(),
        });
    }

    let mut monthly: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut fallback = vec![0.0f64; SLOTS_PER_DAY];
    for day in &covered {
        let col = day
            .panel_index(panel_id)
            .ok_or_else(|| ForecastError::UnknownPanel(panel_id.to_string()))?;
        let profile = monthly
            .entry(day.date.month())
            .or_insert_with(|| vec![0.0; SLOTS_PER_DAY]);
        for row in 0..day.num_rows() {
            if let Some(v) = day.get(row, col) {
                let slot = day.slot(row);
                profile[slot] = profile[slot].max(v);
                fallback[slot] = fallback[slot].max(v);
            }
        }
    }

    // least-squares scalar c in observed ~ profile * (1 - c * cloud)
    let mut num = 0.0;
    let mut den = 0.0;
    for day in &covered {
        let col = day.panel_index(panel_id).expect("checked above");
        let profile = &monthly[&day.date.month()];
        for row in 0..day.num_rows() {
            let Some(obs) = day.get(row, col) else { continue };
            let slot = day.slot(row);
            let p = profile[slot];
            if p <= 0.0 {
                continue;
            }
            let Some((cc, _)) = weather.cloud_cover_at(slot_timestamp(day.date, slot)) else {
                continue;
            };
            num += (p - obs) * (p * cc);
            den += (p * cc) * (p * cc);
        }
    }
    let (cloud_response, defaulted) = if den > 0.0 {
        ((num / den).clamp(0.0, 1.5), false)
    } else {
        (cfg.default_cloud_response, true)
    };

    Ok(ForecastModel {
        panel_id: panel_id.to_string(),
        nameplate_w,
        monthly_profiles: monthly,
        fallback_profile: fallback,
        cloud_response,
        cloud_response_defaulted: defaulted,
    })
}

/// Forecast the panel's output for every time-of-day slot of `date`:
/// `profile x max(0, 1 - c x cloud_cover)`, clamped to `[0, nameplate]`.
pub fn forecast(
    model: &ForecastModel,
    date: NaiveDate,
    weather: &WeatherSeries,
    cfg: &ForecasterConfig,
) -> Result<Vec<f64>, ForecastError> {
    let profile = model.profile_for(date);
    let lit: Vec<usize> = (0..SLOTS_PER_DAY).filter(|&s| profile[s] > 0.0).collect();
    if let (Some(&first), Some(&last)) = (lit.first(), lit.last()) {
        let gap = weather
            .max_gap_seconds(slot_timestamp(date, first), slot_timestamp(date, last));
        if gap > cfg.max_weather_gap_minutes * 60 {
            return Err(ForecastError::WeatherGap {
                gap_minutes: gap / 60,
                max_minutes: cfg.max_weather_gap_minutes,
            });
        }
    }
    Ok((0..SLOTS_PER_DAY)
        .map(|slot| {
            if profile[slot] <= 0.0 {
                return 0.0;
            }
            let (cc, _) = weather
                .cloud_cover_at(slot_timestamp(date, slot))
                .expect("gap check guarantees samples");
            (profile[slot] * (1.0 - model.cloud_response * cc).max(0.0))
                .clamp(0.0, model.nameplate_w)
        })
        .collect())
}

/// Daily energies (in watt-samples) entering divergence labeling for one
/// panel-date.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDayEnergy {
    pub panel_id: String,
    pub observed: f64,
    pub forecast: f64,
    pub nameplate_daily: f64,
}

/// Label every panel Normal/Noisy by daily-energy divergence from forecast.
/// The denominator floor keeps near-zero winter forecasts from exploding the
/// ratio.
pub fn label_inputs(
    date: NaiveDate,
    panels: &[PanelDayEnergy],
    cfg: &ForecasterConfig,
) -> Vec<InputLabel> {
    panels
        .iter()
        .map(|p| {
            let floor = cfg.divergence_floor_fraction * p.nameplate_daily;
            let divergence = (p.observed - p.forecast).abs() / p.forecast.max(floor);
            let label = if divergence > cfg.noisy_threshold {
                InputStatus::Noisy
            } else {
                InputStatus::Normal
            };
            InputLabel { panel_id: p.panel_id.clone(), date, label, divergence }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WeatherSample;
    use chrono::TimeDelta;

    fn date(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 6, day).unwrap()
    }

    /// Bell-ish profile over slots 90..200, zero elsewhere.
    fn bell(slot: usize) -> f64 {
        if (90..200).contains(&slot) {
            let x = (slot as f64 - 145.0) / 55.0;
            300.0 * (1.0 - x * x)
        } else {
            0.0
        }
    }

    fn day_with_attenuation(d: NaiveDate, factor: f64) -> DaySlice {
        let ids = vec!["p1".into(), "other".into()];
        let rows: Vec<(usize, Vec<Option<f64>>)> = (90..200)
            .map(|s| (s, vec![Some(bell(s) * factor), Some(bell(s) * factor)]))
            .collect();
        DaySlice::from_rows(d, ids, rows).unwrap()
    }

    fn hourly_weather(dates: &[(NaiveDate, f64)]) -> WeatherSeries {
        let mut samples = Vec::new();
        for &(d, cc) in dates {
            for h in 0..24 {
                samples.push(WeatherSample {
                    timestamp: slot_timestamp(d, 0) + TimeDelta::hours(h),
                    cloud_cover: cc,
                    snow_depth_cm: 0.0,
                    is_forecast: false,
                });
            }
        }
        WeatherSeries::new(samples).unwrap()
    }

    #[test]
    fn cloudless_history_defaults_cloud_response() {
        let days: Vec<DaySlice> = (1..=3).map(|i| day_with_attenuation(date(i), 1.0)).collect();
        let weather =
            hourly_weather(&[(date(1), 0.0), (date(2), 0.0), (date(3), 0.0)]);
        let m = fit_forecaster("p1", 320.0, &days, &weather, &ForecasterConfig::default())
            .unwrap();
        assert!(m.cloud_response_defaulted);
        assert_eq!(m.cloud_response, 0.75);
        // envelope equals the observed maximum
        assert_eq!(m.monthly_profiles[&6][145], bell(145));
        assert_eq!(m.monthly_profiles[&6][0], 0.0);
    }

    #[test]
    fn exact_attenuation_recovers_c() {
        // day 1 cloudless defines the envelope; days 2-4 attenuated by
        // exactly (1 - 0.5 * cc)
        let spec = [(date(1), 0.0), (date(2), 0.2), (date(3), 0.5), (date(4), 0.8)];
        let days: Vec<DaySlice> =
            spec.iter().map(|&(d, cc)| day_with_attenuation(d, 1.0 - 0.5 * cc)).collect();
        let weather = hourly_weather(&spec);
        let m = fit_forecaster("p1", 320.0, &days, &weather, &ForecasterConfig::default())
            .unwrap();
        assert!(!m.cloud_response_defaulted);
        assert!((m.cloud_response - 0.5).abs() < 1e-6, "c = {}", m.cloud_response);
    }

    #[test]
    fn empty_weather_is_no_overlap() {
        let days: Vec<DaySlice> = (1..=3).map(|i| day_with_attenuation(date(i), 1.0)).collect();
        let weather = WeatherSeries::new(vec![]).unwrap();
        assert_eq!(
            fit_forecaster("p1", 320.0, &days, &weather, &ForecasterConfig::default())
                .unwrap_err(),
            ForecastError::NoWeatherOverlap
        );
    }

    #[test]
    fn too_few_covered_days_is_insufficient() {
        let days: Vec<DaySlice> = (1..=2).map(|i| day_with_attenuation(date(i), 1.0)).collect();
        let weather = hourly_weather(&[(date(1), 0.0), (date(2), 0.0)]);
        assert_eq!(
            fit_forecaster("p1", 320.0, &days, &weather, &ForecasterConfig::default())
                .unwrap_err(),
            ForecastError::InsufficientHistory { needed: 3, got: 2 }
        );
    }

    fn fitted_model() -> (ForecastModel, ForecasterConfig) {
        let cfg = ForecasterConfig::default();
        let days: Vec<DaySlice> = (1..=3).map(|i| day_with_attenuation(date(i), 1.0)).collect();
        let weather =
            hourly_weather(&[(date(1), 0.0), (date(2), 0.0), (date(3), 0.0)]);
        let mut m = fit_forecaster("p1", 320.0, &days, &weather, &cfg).unwrap();
        m.cloud_response = 1.0;
        m.cloud_response_defaulted = false;
        (m, cfg)
    }

    #[test]
    fn forecast_tracks_cloud_cover() {
        let (m, cfg) = fitted_model();
        // clear day: forecast equals the profile
        let clear = hourly_weather(&[(date(10), 0.0)]);
        let fc = forecast(&m, date(10), &clear, &cfg).unwrap();
        assert_eq!(fc[145], m.monthly_profiles[&6][145]);
        // fully overcast with c = 1: forecast is zero
        let dark = hourly_weather(&[(date(11), 1.0)]);
        let fc = forecast(&m, date(11), &dark, &cfg).unwrap();
        assert!(fc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forecast_requires_weather_coverage() {
        let (m, cfg) = fitted_model();
        let elsewhere = hourly_weather(&[(date(20), 0.0)]);
        assert!(matches!(
            forecast(&m, date(10), &elsewhere, &cfg),
            Err(ForecastError::WeatherGap { .. })
        ));
    }

    #[test]
    fn labels_split_on_divergence() {
        let cfg = ForecasterConfig::default();
        // forecast well above the divergence floor (2% of nameplate = 1843)
        let panels = vec![
            PanelDayEnergy {
                panel_id: "ok".into(),
                observed: 20_000.0,
                forecast: 20_000.0,
                nameplate_daily: 92_160.0,
            },
            PanelDayEnergy {
                panel_id: "dead".into(),
                observed: 0.0,
                forecast: 20_000.0,
                nameplate_daily: 92_160.0,
            },
        ];
        let labels = label_inputs(date(5), &panels, &cfg);
        assert_eq!(labels[0].label, InputStatus::Normal);
        assert_eq!(labels[0].divergence, 0.0);
        assert_eq!(labels[1].label, InputStatus::Noisy);
        assert!((labels[1].divergence - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deeper_deficits_never_flip_noisy_back_to_normal() {
        let cfg = ForecasterConfig::default();
        let mut last = 0.0;
        for k in (0..=10).rev() {
            let obs = 100.0 * k as f64; // forecast 1000, observed shrinking
            let labels = label_inputs(
                date(5),
                &[PanelDayEnergy {
                    panel_id: "p".into(),
                    observed: obs,
                    forecast: 1000.0,
                    nameplate_daily: 92160.0,
                }],
                &cfg,
            );
            assert!(labels[0].divergence >= last);
            last = labels[0].divergence;
        }
    }
}
