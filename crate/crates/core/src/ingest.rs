//! CSV ingestion and day labeling: parse per-panel power, weather, and layout
//! files into the canonical types, and compute per-panel-day capacity /
//! correlation labels.

use std::io::{Read, Write};

use chrono::{DateTime, FixedOffset, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    ArrayLayout, DataError, DaySlice, PanelMatrix, PanelSpec, WeatherSample, WeatherSeries,
    STEP_SECONDS,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("timestamps not strictly increasing at line {line}")]
    NonMonotonicTimestamps { line: usize },
    #[error("negative power {value} W at line {line} (values below -1 W are rejected)")]
    NegativePower { value: f64, line: usize },
    #[error("line {line}: cannot parse timestamp `{value}`")]
    BadTimestamp { line: usize, value: String },
    #[error("line {line}: cannot parse number `{value}`")]
    BadNumber { line: usize, value: String },
    #[error("line {line}: cannot parse boolean `{value}`")]
    BadBool { line: usize, value: String },
    #[error("panel `{0}` has no readings in the day")]
    AllMissing(String),
    #[error("panels `{a}` and `{b}` share only {overlap} daylight samples (need >= 3)")]
    InsufficientOverlap { a: String, b: String, overlap: usize },
    #[error("panel `{0}` not present")]
    UnknownPanel(String),
    #[error("panel `{panel}` reports {watts} W, over 2x its {capacity_w} W nameplate")]
    ImplausiblePower { panel: String, watts: f64, capacity_w: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Thresholds for day segmentation and labeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    /// A row is daylight iff array-total power exceeds this fraction of array
    /// nameplate.
    pub daylight_epsilon_fraction: f64,
    /// Capacity level is High iff day-max/nameplate reaches this ratio.
    pub capacity_high_threshold: f64,
    /// Mean Pearson r at or above this is Strong.
    pub corr_strong: f64,
    /// Mean Pearson r at or above this (but under `corr_strong`) is Moderate.
    pub corr_moderate: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            daylight_epsilon_fraction: 0.01,
            capacity_high_threshold: 0.6,
            corr_strong: 0.9,
            corr_moderate: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapacityLevel {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationLevel {
    Strong,
    Moderate,
    Low,
}

/// Panel-day condition vocabulary. Ingest never assigns these; they come from
/// ground truth or the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DayCondition {
    Normal,
    PartialShaded,
    ObjectCover,
    LowPowerDefect,
    ProductionIssue,
    UnknownIssue,
}

/// Conditions consistent with a (capacity, correlation) pair; empty when the
/// pair has no defined reading.
pub fn condition_candidates(
    capacity: CapacityLevel,
    correlation: CorrelationLevel,
) -> &'static [DayCondition] {
    match (capacity, correlation) {
        (CapacityLevel::High, CorrelationLevel::Strong) => &[DayCondition::Normal],
        (CapacityLevel::High, CorrelationLevel::Moderate) => {
            &[DayCondition::PartialShaded, DayCondition::ObjectCover]
        }
        (CapacityLevel::Low, CorrelationLevel::Low) => {
            &[DayCondition::LowPowerDefect, DayCondition::ProductionIssue]
        }
        (CapacityLevel::High, CorrelationLevel::Low) => &[DayCondition::UnknownIssue],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayLabel {
    pub panel_id: String,
    pub date: chrono::NaiveDate,
    pub capacity: CapacityLevel,
    pub capacity_ratio: f64,
    pub correlation: CorrelationLevel,
    pub corr_mean: f64,
}

fn snap_to_grid(secs: i64) -> i64 {
    (secs + STEP_SECONDS / 2).div_euclid(STEP_SECONDS) * STEP_SECONDS
}

/// Parse a timestamp cell. Strings with an explicit offset are converted to
/// the wall clock of `tz_offset_minutes`; naive strings are taken as already
/// being in that wall clock. Internally all instants are wall-clock times
/// tagged UTC, so day boundaries fall at local midnight.
fn parse_timestamp(s: &str, tz_offset_minutes: i32, line: usize) -> Result<DateTime<Utc>, IngestError> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        let offset = FixedOffset::east_opt(tz_offset_minutes * 60)
            .expect("offset checked at CLI boundary");
        return Ok(dt.with_timezone(&offset).naive_local().and_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(naive.and_utc());
        }
    }
    Err(IngestError::BadTimestamp { line, value: s.to_string() })
}

fn parse_power_cell(s: &str, line: usize) -> Result<Option<f64>, IngestError> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| IngestError::BadNumber { line, value: s.to_string() })?;
    if v < -1.0 {
        return Err(IngestError::NegativePower { value: v, line });
    }
    Ok(Some(v.max(0.0))) // [-1, 0) is inverter noise; clamp to zero
}

/// Parse a power CSV (`timestamp,<panel_id>,...`) onto the gapless 5-minute
/// grid. Off-grid timestamps snap to the nearest grid point; rows that snap
/// to the same instant are averaged per panel; absent instants become
/// missing-only rows.
pub fn parse_power_csv(reader: impl Read, tz_offset_minutes: i32) -> Result<PanelMatrix, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();

    let header = records
        .next()
        .ok_or_else(|| IngestError::MalformedHeader("empty file".into()))??;
    if header.get(0).map(str::trim) != Some("timestamp") {
        return Err(IngestError::MalformedHeader(
            "first column must be `timestamp`".into(),
        ));
    }
    let panel_ids: Vec<String> =
        header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if panel_ids.len() < 2 {
        return Err(IngestError::MalformedHeader(
            "need at least 2 panel columns".into(),
        ));
    }
    if panel_ids.iter().any(String::is_empty) {
        return Err(IngestError::MalformedHeader("empty panel id".into()));
    }

    // (snapped grid seconds, per-panel sums and counts) for duplicate averaging
    let mut rows: Vec<(i64, Vec<f64>, Vec<u32>)> = Vec::new();
    let mut prev_raw: Option<DateTime<Utc>> = None;
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        let line = i + 2;
        let ts = parse_timestamp(
            rec.get(0).unwrap_or(""),
            tz_offset_minutes,
            line,
        )?;
        // Monotonicity is judged on raw timestamps; snapping may still merge
        // raw-increasing neighbors onto one grid point, which averages below.
        if prev_raw.is_some_and(|prev| ts <= prev) {
            return Err(IngestError::NonMonotonicTimestamps { line });
        }
        prev_raw = Some(ts);
        let snapped = snap_to_grid(ts.timestamp());
        if rows.last().map(|(t, _, _)| *t) != Some(snapped) {
            rows.push((snapped, vec![0.0; panel_ids.len()], vec![0; panel_ids.len()]));
        }
        let (_, sums, counts) = rows.last_mut().unwrap();
        for col in 0..panel_ids.len() {
            if let Some(v) = parse_power_cell(rec.get(col + 1).unwrap_or(""), line)? {
                sums[col] += v;
                counts[col] += 1;
            }
        }
    }
    if rows.is_empty() {
        return Err(DataError::EmptyMatrix.into());
    }

    let first = rows[0].0;
    let last = rows.last().unwrap().0;
    let n_rows = ((last - first) / STEP_SECONDS + 1) as usize;
    let width = panel_ids.len();
    let mut cells: Vec<Option<f64>> = vec![None; n_rows * width];
    for (secs, sums, counts) in rows {
        let r = ((secs - first) / STEP_SECONDS) as usize;
        for col in 0..width {
            if counts[col] > 0 {
                cells[r * width + col] = Some(sums[col] / f64::from(counts[col]));
            }
        }
    }
    let start = DateTime::from_timestamp(first, 0).expect("valid epoch seconds");
    Ok(PanelMatrix::new(panel_ids, start, cells)?)
}

/// Write a matrix back to power CSV form. Together with [`parse_power_csv`]
/// this round-trips bit-exactly.
pub fn write_power_csv(matrix: &PanelMatrix, writer: impl Write) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(matrix.panel_ids().iter().cloned());
    w.write_record(&header)?;
    for row in 0..matrix.num_rows() {
        let mut rec = vec![matrix.timestamp(row).format("%Y-%m-%dT%H:%M:%SZ").to_string()];
        for col in 0..matrix.num_panels() {
            rec.push(match matrix.get(row, col) {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_weather_csv(
    reader: impl Read,
    tz_offset_minutes: i32,
) -> Result<WeatherSeries, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| IngestError::MalformedHeader("empty file".into()))??;
    let expect = ["timestamp", "cloud_cover", "snow_depth", "is_forecast"];
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expect {
        return Err(IngestError::MalformedHeader(format!(
            "expected `{}`",
            expect.join(",")
        )));
    }
    let mut samples = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |ix: usize| -> Result<f64, IngestError> {
            let s = rec.get(ix).unwrap_or("").trim();
            s.parse()
                .map_err(|_| IngestError::BadNumber { line, value: s.to_string() })
        };
        let flag = rec.get(3).unwrap_or("").trim();
        let is_forecast = match flag {
            "true" | "1" => true,
            "false" | "0" => false,
            _ => return Err(IngestError::BadBool { line, value: flag.to_string() }),
        };
        samples.push(WeatherSample {
            timestamp: parse_timestamp(rec.get(0).unwrap_or(""), tz_offset_minutes, line)?,
            cloud_cover: num(1)?,
            snow_depth_cm: num(2)?,
            is_forecast,
        });
    }
    Ok(WeatherSeries::new(samples)?)
}

pub fn write_weather_csv(weather: &WeatherSeries, writer: impl Write) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "cloud_cover", "snow_depth", "is_forecast"])?;
    for s in weather.samples() {
        w.write_record(&[
            s.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            format!("{}", s.cloud_cover),
            format!("{}", s.snow_depth_cm),
            s.is_forecast.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a layout CSV (`panel_id,roof_plane,tilt_deg,azimuth_deg,capacity_w`).
/// The file carries no site coordinates, so they are passed in.
pub fn parse_layout_csv(
    reader: impl Read,
    latitude_deg: f64,
    longitude_deg: f64,
) -> Result<ArrayLayout, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| IngestError::MalformedHeader("empty file".into()))??;
    let expect = ["panel_id", "roof_plane", "tilt_deg", "azimuth_deg", "capacity_w"];
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expect {
        return Err(IngestError::MalformedHeader(format!(
            "expected `{}`",
            expect.join(",")
        )));
    }
    let mut panels = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |ix: usize| -> Result<f64, IngestError> {
            let s = rec.get(ix).unwrap_or("").trim();
            s.parse()
                .map_err(|_| IngestError::BadNumber { line, value: s.to_string() })
        };
        panels.push(PanelSpec {
            panel_id: rec.get(0).unwrap_or("").trim().to_string(),
            roof_plane: rec.get(1).unwrap_or("").trim().to_string(),
            tilt_deg: num(2)?,
            azimuth_deg: num(3)?,
            capacity_w: num(4)?,
            panel_gain: 1.0,
        });
    }
    let layout = ArrayLayout { latitude_deg, longitude_deg, panels };
    layout.validate()?;
    Ok(layout)
}

pub fn write_layout_csv(layout: &ArrayLayout, writer: impl Write) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["panel_id", "roof_plane", "tilt_deg", "azimuth_deg", "capacity_w"])?;
    for p in &layout.panels {
        w.write_record(&[
            p.panel_id.clone(),
            p.roof_plane.clone(),
            format!("{}", p.tilt_deg),
            format!("{}", p.azimuth_deg),
            format!("{}", p.capacity_w),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Guard against unit errors: no reading may exceed twice a panel's nameplate.
pub fn validate_power_scale(
    matrix: &PanelMatrix,
    layout: &ArrayLayout,
) -> Result<(), IngestError> {
    for (col, id) in matrix.panel_ids().iter().enumerate() {
        let spec = layout
            .panel(id)
            .ok_or_else(|| IngestError::UnknownPanel(id.clone()))?;
        for row in 0..matrix.num_rows() {
            if let Some(v) = matrix.get(row, col) {
                if v > 2.0 * spec.capacity_w {
                    return Err(IngestError::ImplausiblePower {
                        panel: id.clone(),
                        watts: v,
                        capacity_w: spec.capacity_w,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Ratio of the day's maximum output to nameplate, with its High/Low level.
pub fn capacity_level(
    day: &DaySlice,
    panel_id: &str,
    nameplate_w: f64,
    cfg: &IngestConfig,
) -> Result<(CapacityLevel, f64), IngestError> {
    let col = day
        .panel_index(panel_id)
        .ok_or_else(|| IngestError::UnknownPanel(panel_id.to_string()))?;
    let max = day
        .column(col)
        .into_iter()
        .flatten()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(IngestError::AllMissing(panel_id.to_string()));
    }
    let ratio = max / nameplate_w;
    let level = if ratio >= cfg.capacity_high_threshold {
        CapacityLevel::High
    } else {
        CapacityLevel::Low
    };
    Ok((level, ratio))
}

/// Pearson correlation over pairwise-complete observations, with the number
/// of complete pairs. Zero-variance series correlate at 0, never NaN.
pub fn pearson_complete(x: &[Option<f64>], y: &[Option<f64>]) -> (f64, usize) {
    let pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    let m = pairs.len();
    if m == 0 {
        return (0.0, 0);
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / m as f64;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / m as f64;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in &pairs {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx <= 0.0 || dy <= 0.0 {
        return (0.0, m);
    }
    (num / (dx.sqrt() * dy.sqrt()), m)
}

/// Mean Pearson r between a panel and every other panel over the day's
/// daylight samples, with its Strong/Moderate/Low level.
pub fn correlation_level(
    day: &DaySlice,
    panel_id: &str,
    cfg: &IngestConfig,
) -> Result<(CorrelationLevel, f64), IngestError> {
    let col = day
        .panel_index(panel_id)
        .ok_or_else(|| IngestError::UnknownPanel(panel_id.to_string()))?;
    let own = day.column(col);
    let mut sum = 0.0;
    let mut n = 0usize;
    for other in 0..day.num_panels() {
        if other == col {
            continue;
        }
        let (r, overlap) = pearson_complete(&own, &day.column(other));
        if overlap < 3 {
            return Err(IngestError::InsufficientOverlap {
                a: panel_id.to_string(),
                b: day.panel_ids()[other].clone(),
                overlap,
            });
        }
        sum += r;
        n += 1;
    }
    let r_mean = sum / n as f64;
    let level = if r_mean >= cfg.corr_strong {
        CorrelationLevel::Strong
    } else if r_mean >= cfg.corr_moderate {
        CorrelationLevel::Moderate
    } else {
        CorrelationLevel::Low
    };
    Ok((level, r_mean))
}

/// Capacity and correlation labels for every panel of every non-empty day.
pub fn label_days(
    slices: &[DaySlice],
    layout: &ArrayLayout,
    cfg: &IngestConfig,
) -> Result<Vec<DayLabel>, IngestError> {
    let mut out = Vec::new();
    for day in slices.iter().filter(|d| !d.is_empty()) {
        for id in day.panel_ids() {
            let spec = layout
                .panel(id)
                .ok_or_else(|| IngestError::UnknownPanel(id.clone()))?;
            let (capacity, capacity_ratio) = capacity_level(day, id, spec.capacity_w, cfg)?;
            let (correlation, corr_mean) = correlation_level(day, id, cfg)?;
            out.push(DayLabel {
                panel_id: id.clone(),
                date: day.date,
                capacity,
                capacity_ratio,
                correlation,
                corr_mean,
            });
        }
    }
    Ok(out)
}
