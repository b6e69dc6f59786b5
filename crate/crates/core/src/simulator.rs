//! Deterministic array simulator with fault injection.
//!
//! Generates labeled per-panel power data from solar geometry (declination,
//! hour angle, cosine incidence), a weather attenuation profile, per-panel
//! gain variation, optional static shade obstructions, and injected faults.
//! Every random concern draws from its own sub-seeded stream so that faults
//! injected on one panel leave all other columns bit-identical.

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    slot_timestamp, ArrayLayout, DataError, PanelMatrix, PanelSpec, WeatherSample, WeatherSeries,
    SLOTS_PER_DAY,
};
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("fault references unknown panel `{0}`")]
    UnknownPanel(String),
    #[error("no dates given")]
    NoDates,
    #[error("dates must be consecutive and increasing (gap after {0})")]
    NonConsecutiveDates(NaiveDate),
    #[error("invalid fault: {0}")]
    BadFault(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeatherProfile {
    Sunny,
    Overcast,
    Scattered,
}

impl std::fmt::Display for WeatherProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeatherProfile::Sunny => "sunny",
            WeatherProfile::Overcast => "overcast",
            WeatherProfile::Scattered => "scattered",
        })
    }
}

impl std::str::FromStr for WeatherProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sunny" => Ok(WeatherProfile::Sunny),
            "overcast" => Ok(WeatherProfile::Overcast),
            "scattered" => Ok(WeatherProfile::Scattered),
            other => Err(format!("unknown weather profile `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultKind {
    Snow,
    Occlusion,
    OpenCircuit,
    WaterDrops,
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FaultKind::Snow => "Snow",
            FaultKind::Occlusion => "Occlusion",
            FaultKind::OpenCircuit => "OpenCircuit",
            FaultKind::WaterDrops => "WaterDrops",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FaultKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Snow" => Ok(FaultKind::Snow),
            "Occlusion" => Ok(FaultKind::Occlusion),
            "OpenCircuit" => Ok(FaultKind::OpenCircuit),
            "WaterDrops" => Ok(FaultKind::WaterDrops),
            other => Err(format!("unknown fault kind `{other}`")),
        }
    }
}

/// One injected fault on one panel-date. `start_slot..end_slot` bounds the
/// affected time-of-day window; the default is the whole day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub panel_id: String,
    pub date: NaiveDate,
    pub kind: FaultKind,
    pub severity: f64,
    pub start_slot: usize,
    pub end_slot: usize,
}

impl FaultSpec {
    pub fn all_day(panel_id: &str, date: NaiveDate, kind: FaultKind, severity: f64) -> Self {
        Self {
            panel_id: panel_id.to_string(),
            date,
            kind,
            severity,
            start_slot: 0,
            end_slot: SLOTS_PER_DAY,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(SimError::BadFault(format!(
                "severity {} outside [0, 1]",
                self.severity
            )));
        }
        if self.kind == FaultKind::WaterDrops && self.severity > 0.15 {
            return Err(SimError::BadFault(
                "WaterDrops severity above 0.15 would no longer be a transient".into(),
            ));
        }
        if self.start_slot >= self.end_slot || self.end_slot > SLOTS_PER_DAY {
            return Err(SimError::BadFault("empty or out-of-range slot window".into()));
        }
        Ok(())
    }

    fn covers(&self, slot: usize) -> bool {
        (self.start_slot..self.end_slot).contains(&slot)
    }
}

/// A static obstruction (chimney, tree line) dimming one panel in a fixed
/// daily window. Shade is a transient factor, not a fault: it never appears
/// in ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadeSpec {
    pub panel_id: String,
    pub start_slot: usize,
    pub end_slot: usize,
    pub depth: f64,
}

/// Ground-truth label for one injected fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub panel_id: String,
    pub date: NaiveDate,
    pub kind: FaultKind,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub matrix: PanelMatrix,
    pub weather: WeatherSeries,
    pub truth: Vec<TruthRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Multiplicative Gaussian noise sigma per sample.
    pub noise_sigma: f64,
    /// Per-panel gain draw bounds.
    pub gain_low: f64,
    pub gain_high: f64,
    /// Skylight floor while the sun is up, as a fraction of capacity. Keeps
    /// every sun-up row above the 1%-of-nameplate daylight cut.
    pub diffuse_fraction: f64,
    /// Overcast attenuation: base plus smooth noise amplitude.
    pub overcast_base: f64,
    pub overcast_noise: f64,
    /// Deepest scattered-cloud dip (factor bottoms out at 1 - this).
    pub scattered_dip_max: f64,
    /// Snow-covered panels still trickle up to this fraction of clear-sky.
    pub snow_residual_max: f64,
    /// Snow depth reported by weather on snow-fault dates.
    pub snow_depth_cm: f64,
    /// Weather sample stride in 5-minute slots.
    pub weather_every_slots: usize,
    /// Micro-inverter output cap as a fraction of panel capacity. 1.0 means
    /// the inverter never clips; real inverters are often rated slightly
    /// below the panel, flattening high-gain panels around noon.
    pub clip_fraction: f64,
    pub shades: Vec<ShadeSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            gain_low: 0.93,
            gain_high: 1.07,
            diffuse_fraction: 0.05,
            overcast_base: 0.25,
            overcast_noise: 0.1,
            scattered_dip_max: 0.7,
            snow_residual_max: 0.05,
            snow_depth_cm: 10.0,
            weather_every_slots: 6,
            clip_fraction: 1.0,
            shades: Vec::new(),
        }
    }
}

/// Solar declination in radians for a day of year.
fn declination_rad(day_of_year: u32) -> f64 {
    (23.45f64).to_radians() * (std::f64::consts::TAU * (284.0 + day_of_year as f64) / 365.0).sin()
}

/// Sun elevation and azimuth (degrees; azimuth clockwise from north) at a
/// wall-clock instant. Wall clock is treated as solar time.
pub fn sun_position(latitude_deg: f64, ts: DateTime<Utc>) -> (f64, f64) {
    let lat = latitude_deg.to_radians();
    let decl = declination_rad(ts.date_naive().ordinal());
    let solar_hour = ts.time().num_seconds_from_midnight() as f64 / 3600.0;
    let hour_angle = (15.0 * (solar_hour - 12.0)).to_radians();

    let sin_el = lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos();
    let elevation = sin_el.asin();
    let azimuth = hour_angle
        .sin()
        .atan2(hour_angle.cos() * lat.sin() - decl.tan() * lat.cos())
        + std::f64::consts::PI;
    (elevation.to_degrees(), azimuth.to_degrees())
}

/// Cosine of the incidence angle between the sun direction and a panel
/// normal, given sun elevation/azimuth in degrees.
fn cos_incidence(elevation_deg: f64, azimuth_deg: f64, panel: &PanelSpec) -> f64 {
    let el = elevation_deg.to_radians();
    let tilt = panel.tilt_deg.to_radians();
    let daz = (azimuth_deg - panel.azimuth_deg).to_radians();
    el.sin() * tilt.cos() + el.cos() * tilt.sin() * daz.cos()
}

/// Geometric clear-sky output: capacity x gain x max(0, cos incidence),
/// zero below the horizon, clipped at capacity.
pub fn clear_sky_power(panel: &PanelSpec, ts: DateTime<Utc>, latitude_deg: f64) -> f64 {
    let (el, az) = sun_position(latitude_deg, ts);
    if el <= 0.0 {
        return 0.0;
    }
    let beam = cos_incidence(el, az, panel).max(0.0);
    (panel.capacity_w * panel.panel_gain * beam).min(panel.capacity_w)
}

fn date_key(date: NaiveDate) -> u64 {
    date.num_days_from_ce() as u64
}

/// Smooth standard-normal-marginal AR(1) series over the day's slots, with a
/// roughly 30-minute correlation length.
fn ar1_series(mut rng: impl Rng, len: usize) -> Vec<f64> {
    let alpha: f64 = (-5.0f64 / 30.0).exp();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(len);
    let mut x: f64 = normal.sample(&mut rng);
    out.push(x);
    for _ in 1..len {
        x = alpha * x + (1.0 - alpha * alpha).sqrt() * normal.sample(&mut rng);
        out.push(x);
    }
    out
}

fn squash01(x: f64) -> f64 {
    0.5 * (1.0 + (x / 1.6).tanh())
}

/// Array-level weather factor per slot plus the cloud-cover series to emit.
fn weather_factors(
    profile: WeatherProfile,
    date: NaiveDate,
    seed: u64,
    cfg: &SimConfig,
) -> Vec<f64> {
    match profile {
        WeatherProfile::Sunny => vec![1.0; SLOTS_PER_DAY],
        WeatherProfile::Overcast => {
            let rng = seeds::rng(seed, "overcast", &[date_key(date)]);
            ar1_series(rng, SLOTS_PER_DAY)
                .into_iter()
                .map(|x| cfg.overcast_base + cfg.overcast_noise * squash01(x))
                .collect()
        }
        WeatherProfile::Scattered => {
            let rng = seeds::rng(seed, "scatter", &[date_key(date)]);
            ar1_series(rng, SLOTS_PER_DAY)
                .into_iter()
                .map(|x| 1.0 - cfg.scattered_dip_max * dip_level(x))
                .collect()
        }
    }
}

/// Maps the AR(1) state to a dip depth in [0, 1]; clear most of the time,
/// dipping on upper excursions.
fn dip_level(x: f64) -> f64 {
    ((x - 0.6) / 1.8).clamp(0.0, 1.0)
}

/// Generate power, weather, and ground truth for consecutive `dates`.
pub fn simulate(
    layout: &ArrayLayout,
    dates: &[NaiveDate],
    profile: WeatherProfile,
    faults: &[FaultSpec],
    seed: u64,
    cfg: &SimConfig,
) -> Result<SimOutput, SimError> {
    layout.validate()?;
    if dates.is_empty() {
        return Err(SimError::NoDates);
    }
    for pair in dates.windows(2) {
        if pair[1] != pair[0].succ_opt().expect("date range") {
            return Err(SimError::NonConsecutiveDates(pair[0]));
        }
    }
    for f in faults {
        f.validate()?;
        if layout.panel(&f.panel_id).is_none() {
            return Err(SimError::UnknownPanel(f.panel_id.clone()));
        }
    }
    for s in &cfg.shades {
        if layout.panel(&s.panel_id).is_none() {
            return Err(SimError::UnknownPanel(s.panel_id.clone()));
        }
    }

    let n = layout.panels.len();
    let gains: Vec<f64> = (0..n)
        .map(|i| {
            seeds::rng(seed, "gain", &[i as u64])
                .random_range(cfg.gain_low..cfg.gain_high)
        })
        .collect();

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut cells: Vec<Option<f64>> = Vec::with_capacity(dates.len() * SLOTS_PER_DAY * n);
    let mut weather_rows: Vec<WeatherSample> = Vec::new();

    for &date in dates {
        let wf = weather_factors(profile, date, seed, cfg);
        // sun geometry shared across panels
        let sun: Vec<(f64, f64)> = (0..SLOTS_PER_DAY)
            .map(|s| sun_position(layout.latitude_deg, slot_timestamp(date, s)))
            .collect();

        // per-panel streams for this date
        let mut noise_rngs: Vec<_> = (0..n)
            .map(|i| seeds::rng(seed, "noise", &[i as u64, date_key(date)]))
            .collect();
        let jitter: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                if profile == WeatherProfile::Scattered {
                    ar1_series(
                        seeds::rng(seed, "scatterjitter", &[i as u64, date_key(date)]),
                        SLOTS_PER_DAY,
                    )
                } else {
                    vec![0.0; SLOTS_PER_DAY]
                }
            })
            .collect();
        let snow_residual: Vec<f64> = (0..n)
            .map(|i| {
                seeds::rng(seed, "snow", &[i as u64, date_key(date)])
                    .random_range(0.0..cfg.snow_residual_max)
            })
            .collect();

        let day_faults: Vec<&FaultSpec> = faults.iter().filter(|f| f.date == date).collect();
        let snow_today = day_faults.iter().any(|f| f.kind == FaultKind::Snow);

        for slot in 0..SLOTS_PER_DAY {
            let (el, az) = sun[slot];
            for (i, panel) in layout.panels.iter().enumerate() {
                let noise = 1.0 + cfg.noise_sigma * normal.sample(&mut noise_rngs[i]);
                if el <= 0.0 {
                    cells.push(Some(0.0));
                    continue;
                }
                let beam = cos_incidence(el, az, panel).max(0.0);
                let irr = cfg.diffuse_fraction + (1.0 - cfg.diffuse_fraction) * beam;
                let base = panel.capacity_w * gains[i] * irr;

                let weather = match profile {
                    WeatherProfile::Scattered => {
                        // recover the array dip level, then jitter it per panel
                        let base_level = (1.0 - wf[slot]) / cfg.scattered_dip_max;
                        let level =
                            (base_level * (1.0 + 0.5 * jitter[i][slot])).clamp(0.0, 1.0);
                        1.0 - cfg.scattered_dip_max * level
                    }
                    _ => wf[slot],
                };

                let mut shade = 1.0;
                for s in cfg.shades.iter().filter(|s| s.panel_id == panel.panel_id) {
                    if (s.start_slot..s.end_slot).contains(&slot) {
                        shade *= 1.0 - s.depth;
                    }
                }

                let mut fault = 1.0;
                for f in day_faults.iter().filter(|f| f.panel_id == panel.panel_id) {
                    if !f.covers(slot) {
                        continue;
                    }
                    fault *= match f.kind {
                        FaultKind::Snow => (1.0 - f.severity).max(snow_residual[i]),
                        FaultKind::Occlusion => 1.0 - f.severity,
                        FaultKind::OpenCircuit => 0.0,
                        FaultKind::WaterDrops => 1.0 - f.severity,
                    };
                }

                // the inverter caps DC power after all attenuation
                let capped = (base * weather * shade * fault)
                    .min(cfg.clip_fraction * panel.capacity_w)
                    .min(panel.capacity_w);
                let watts = (capped * noise).max(0.0);
                cells.push(Some(watts));
            }

            if slot % cfg.weather_every_slots == 0 {
                let cloud_cover = match profile {
                    WeatherProfile::Sunny => 0.0,
                    _ => (1.0 - wf[slot]).clamp(0.0, 1.0),
                };
                weather_rows.push(WeatherSample {
                    timestamp: slot_timestamp(date, slot),
                    cloud_cover,
                    snow_depth_cm: if snow_today { cfg.snow_depth_cm } else { 0.0 },
                    is_forecast: false,
                });
            }
        }
    }

    let panel_ids: Vec<String> = layout.panels.iter().map(|p| p.panel_id.clone()).collect();
    let matrix = PanelMatrix::new(panel_ids, slot_timestamp(dates[0], 0), cells)?;
    let weather = WeatherSeries::new(weather_rows)?;
    let truth = faults
        .iter()
        .map(|f| TruthRecord {
            panel_id: f.panel_id.clone(),
            date: f.date,
            kind: f.kind,
            severity: if f.kind == FaultKind::OpenCircuit { 1.0 } else { f.severity },
        })
        .collect();
    Ok(SimOutput { matrix, weather, truth })
}

/// Canonical single-plane layout: `n` south-facing 320 W panels.
pub fn single_plane_layout(n: usize) -> ArrayLayout {
    ArrayLayout {
        latitude_deg: 42.4,
        longitude_deg: -72.5,
        panels: (1..=n)
            .map(|i| PanelSpec {
                panel_id: format!("p{i:02}"),
                roof_plane: "south".into(),
                tilt_deg: 30.0,
                azimuth_deg: 180.0,
                capacity_w: 320.0,
                panel_gain: 1.0,
            })
            .collect(),
    }
}

/// Canonical four-plane layout with `per_plane` panels on each plane.
pub fn four_plane_layout(per_plane: usize) -> ArrayLayout {
    let planes = [
        ("east", 30.0, 95.0),
        ("south", 35.0, 180.0),
        ("west", 30.0, 265.0),
        ("garage", 12.0, 180.0),
    ];
    let mut panels = Vec::new();
    let mut ix = 0;
    for (name, tilt, az) in planes {
        for _ in 0..per_plane {
            ix += 1;
            panels.push(PanelSpec {
                panel_id: format!("p{ix:02}"),
                roof_plane: name.into(),
                tilt_deg: tilt,
                azimuth_deg: az,
                capacity_w: 320.0,
                panel_gain: 1.0,
            });
        }
    }
    ArrayLayout { latitude_deg: 42.4, longitude_deg: -72.5, panels }
}
