//! Core data plane: the time-aligned panel power matrix, day slicing, weather
//! series, and array layout shared by every other module.

use chrono::{DateTime, Datelike, NaiveDate, NaiveTime, TimeDelta, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample spacing of the canonical grid.
pub const STEP_SECONDS: i64 = 300;
/// Number of 5-minute slots in a day.
pub const SLOTS_PER_DAY: usize = 288;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("matrix needs at least 2 panels, got {0}")]
    TooFewPanels(usize),
    #[error("duplicate panel id `{0}`")]
    DuplicatePanelId(String),
    #[error("timestamp {0} is not aligned to the 5-minute grid")]
    OffGridTimestamp(DateTime<Utc>),
    #[error("{cells} cells do not form whole rows of width {width}")]
    RaggedGrid { cells: usize, width: usize },
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("cloud_cover {0} outside [0, 1]")]
    CloudCoverRange(f64),
    #[error("snow_depth {0} cm is negative")]
    NegativeSnowDepth(f64),
    #[error("weather timestamps not strictly increasing at index {0}")]
    UnorderedWeather(usize),
    #[error("layout has no panels")]
    EmptyLayout,
    #[error("panel `{panel}`: tilt {tilt}° outside [0, 90]")]
    BadTilt { panel: String, tilt: f64 },
    #[error("panel `{panel}`: azimuth {azimuth}° outside [0, 360)")]
    BadAzimuth { panel: String, azimuth: f64 },
    #[error("panel `{panel}`: capacity {capacity} W must be positive")]
    BadCapacity { panel: String, capacity: f64 },
    #[error("panel `{panel}`: gain {gain} outside (0.8, 1.2)")]
    BadGain { panel: String, gain: f64 },
}

/// Time-of-day slot (0..288) of a grid-aligned instant.
pub fn slot_of(ts: DateTime<Utc>) -> usize {
    (ts.time().num_seconds_from_midnight() as i64 / STEP_SECONDS) as usize
}

/// Instant for `date` at time-of-day `slot`.
pub fn slot_timestamp(date: NaiveDate, slot: usize) -> DateTime<Utc> {
    let t = NaiveTime::from_num_seconds_from_midnight_opt((slot as i64 * STEP_SECONDS) as u32, 0)
        .expect("slot within day");
    date.and_time(t).and_utc()
}

/// Per-panel power observations on a gapless 5-minute grid.
///
/// Rows are instants, columns are panels; cells are watts or missing. The grid
/// is anchored at `start` so uniform spacing holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelMatrix {
    panel_ids: Vec<String>,
    start: DateTime<Utc>,
    cells: Vec<Option<f64>>, // row-major
}

impl PanelMatrix {
    pub fn new(
        panel_ids: Vec<String>,
        start: DateTime<Utc>,
        cells: Vec<Option<f64>>,
    ) -> Result<Self, DataError> {
        if panel_ids.len() < 2 {
            return Err(DataError::TooFewPanels(panel_ids.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &panel_ids {
            if !seen.insert(id.as_str()) {
                return Err(DataError::DuplicatePanelId(id.clone()));
            }
        }
        if start.timestamp().rem_euclid(STEP_SECONDS) != 0 {
            return Err(DataError::OffGridTimestamp(start));
        }
        if cells.is_empty() {
            return Err(DataError::EmptyMatrix);
        }
        if cells.len() % panel_ids.len() != 0 {
            return Err(DataError::RaggedGrid { cells: cells.len(), width: panel_ids.len() });
        }
        Ok(Self { panel_ids, start, cells })
    }

    pub fn num_panels(&self) -> usize {
        self.panel_ids.len()
    }

    pub fn num_rows(&self) -> usize {
        self.cells.len() / self.panel_ids.len()
    }

    pub fn panel_ids(&self) -> &[String] {
        &self.panel_ids
    }

    pub fn panel_index(&self, id: &str) -> Option<usize> {
        self.panel_ids.iter().position(|p| p == id)
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn timestamp(&self, row: usize) -> DateTime<Utc> {
        self.start + TimeDelta::seconds(row as i64 * STEP_SECONDS)
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.panel_ids.len() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Option<f64>) {
        let w = self.panel_ids.len();
        self.cells[row * w + col] = value;
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        let w = self.panel_ids.len();
        &self.cells[row * w..(row + 1) * w]
    }

    /// Array-total power in a row; missing cells count as zero.
    pub fn array_total(&self, row: usize) -> f64 {
        self.row(row).iter().flatten().sum()
    }

    /// Dates present, in order.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut out: Vec<NaiveDate> = Vec::new();
        for r in 0..self.num_rows() {
            let d = self.timestamp(r).date_naive();
            if out.last() != Some(&d) {
                out.push(d);
            }
        }
        out
    }

    /// Sum of non-missing watts for one panel over rows of `date`.
    pub fn daily_total(&self, col: usize, date: NaiveDate) -> f64 {
        (0..self.num_rows())
            .filter(|&r| self.timestamp(r).date_naive() == date)
            .filter_map(|r| self.get(r, col))
            .sum()
    }
}

/// The daylight rows of one calendar date, with their time-of-day slots and
/// the row indices they came from in the source matrix.
///
/// A date that never clears the daylight threshold (full snow cover, dead
/// inverter) yields an empty slice so downstream stages can still see the day.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySlice {
    pub date: NaiveDate,
    panel_ids: Vec<String>,
    slots: Vec<usize>,
    source_rows: Vec<usize>,
    cells: Vec<Option<f64>>, // row-major kept rows × panels
}

impl DaySlice {
    pub fn empty(date: NaiveDate, panel_ids: Vec<String>) -> Self {
        Self { date, panel_ids, slots: Vec::new(), source_rows: Vec::new(), cells: Vec::new() }
    }

    /// Build a slice from explicit `(slot, row)` pairs; slots must be strictly
    /// increasing and within the day.
    pub fn from_rows(
        date: NaiveDate,
        panel_ids: Vec<String>,
        rows: Vec<(usize, Vec<Option<f64>>)>,
    ) -> Result<Self, DataError> {
        let width = panel_ids.len();
        let mut slice = Self::empty(date, panel_ids);
        for (i, (slot, row)) in rows.into_iter().enumerate() {
            if slot >= SLOTS_PER_DAY || slice.slots.last().is_some_and(|&prev| prev >= slot) {
                return Err(DataError::OffGridTimestamp(slot_timestamp(date, slot % SLOTS_PER_DAY)));
            }
            if row.len() != width {
                return Err(DataError::RaggedGrid { cells: row.len(), width });
            }
            slice.slots.push(slot);
            slice.source_rows.push(i);
            slice.cells.extend(row);
        }
        Ok(slice)
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_rows(&self) -> usize {
        self.slots.len()
    }

    pub fn num_panels(&self) -> usize {
        self.panel_ids.len()
    }

    pub fn panel_ids(&self) -> &[String] {
        &self.panel_ids
    }

    pub fn panel_index(&self, id: &str) -> Option<usize> {
        self.panel_ids.iter().position(|p| p == id)
    }

    pub fn slot(&self, row: usize) -> usize {
        self.slots[row]
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn source_rows(&self) -> &[usize] {
        &self.source_rows
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.panel_ids.len() + col]
    }

    pub fn column(&self, col: usize) -> Vec<Option<f64>> {
        (0..self.num_rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn array_total(&self, row: usize) -> f64 {
        let w = self.panel_ids.len();
        self.cells[row * w..(row + 1) * w].iter().flatten().sum()
    }

    /// Sum of non-missing watts for one panel over the slice.
    pub fn panel_total(&self, col: usize) -> f64 {
        self.column(col).into_iter().flatten().sum()
    }
}

/// Split a matrix into per-date slices keeping only daylight rows: rows whose
/// array-total power exceeds `daylight_epsilon_w`. Every daylight row lands in
/// exactly one slice; dark dates yield empty slices.
pub fn segment_days(matrix: &PanelMatrix, daylight_epsilon_w: f64) -> Vec<DaySlice> {
    let ids = matrix.panel_ids().to_vec();
    let mut out: Vec<DaySlice> = Vec::new();
    for row in 0..matrix.num_rows() {
        let ts = matrix.timestamp(row);
        let date = ts.date_naive();
        if out.last().map(|s| s.date) != Some(date) {
            out.push(DaySlice::empty(date, ids.clone()));
        }
        if matrix.array_total(row) > daylight_epsilon_w {
            let slice = out.last_mut().unwrap();
            slice.slots.push(slot_of(ts));
            slice.source_rows.push(row);
            slice.cells.extend_from_slice(matrix.row(row));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherSample {
    pub timestamp: DateTime<Utc>,
    pub cloud_cover: f64,
    pub snow_depth_cm: f64,
    pub is_forecast: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeatherSeries {
    samples: Vec<WeatherSample>,
}

impl WeatherSeries {
    pub fn new(samples: Vec<WeatherSample>) -> Result<Self, DataError> {
        for (i, s) in samples.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.cloud_cover) {
                return Err(DataError::CloudCoverRange(s.cloud_cover));
            }
            if s.snow_depth_cm < 0.0 {
                return Err(DataError::NegativeSnowDepth(s.snow_depth_cm));
            }
            if i > 0 && samples[i - 1].timestamp >= s.timestamp {
                return Err(DataError::UnorderedWeather(i));
            }
        }
        Ok(Self { samples })
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[WeatherSample] {
        &self.samples
    }

    /// Cloud cover at the sample nearest to `ts`, with the distance in
    /// seconds. `None` on an empty series.
    pub fn cloud_cover_at(&self, ts: DateTime<Utc>) -> Option<(f64, i64)> {
        let nearest = self
            .samples
            .iter()
            .min_by_key(|s| (s.timestamp - ts).num_seconds().abs())?;
        Some((nearest.cloud_cover, (nearest.timestamp - ts).num_seconds().abs()))
    }

    /// Largest stretch of `[from, to]` uncovered by samples, in seconds.
    pub fn max_gap_seconds(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> i64 {
        let span: Vec<_> =
            self.samples.iter().map(|s| s.timestamp).filter(|t| *t >= from && *t <= to).collect();
        if span.is_empty() {
            return (to - from).num_seconds();
        }
        let mut gap = (span[0] - from).num_seconds().max((to - *span.last().unwrap()).num_seconds());
        for pair in span.windows(2) {
            gap = gap.max((pair[1] - pair[0]).num_seconds());
        }
        gap
    }

    /// Maximum snow depth reported on `date` (0 when no samples).
    pub fn snow_depth_on(&self, date: NaiveDate) -> f64 {
        self.samples
            .iter()
            .filter(|s| s.timestamp.date_naive() == date)
            .map(|s| s.snow_depth_cm)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub panel_id: String,
    pub roof_plane: String,
    pub tilt_deg: f64,
    pub azimuth_deg: f64,
    pub capacity_w: f64,
    /// Per-panel efficiency multiplier. 1.0 unless the simulator assigned one.
    #[serde(default = "default_gain")]
    pub panel_gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

/// Site location plus per-panel geometry. Latitude/longitude only matter to
/// the simulator; detection needs the panels alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayLayout {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub panels: Vec<PanelSpec>,
}

impl ArrayLayout {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.panels.is_empty() {
            return Err(DataError::EmptyLayout);
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.panels {
            if !seen.insert(p.panel_id.as_str()) {
                return Err(DataError::DuplicatePanelId(p.panel_id.clone()));
            }
            if !(0.0..=90.0).contains(&p.tilt_deg) {
                return Err(DataError::BadTilt { panel: p.panel_id.clone(), tilt: p.tilt_deg });
            }
            if !(0.0..360.0).contains(&p.azimuth_deg) {
                return Err(DataError::BadAzimuth {
                    panel: p.panel_id.clone(),
                    azimuth: p.azimuth_deg,
                });
            }
            if p.capacity_w <= 0.0 {
                return Err(DataError::BadCapacity {
                    panel: p.panel_id.clone(),
                    capacity: p.capacity_w,
                });
            }
            if p.panel_gain <= 0.8 || p.panel_gain >= 1.2 {
                return Err(DataError::BadGain { panel: p.panel_id.clone(), gain: p.panel_gain });
            }
        }
        Ok(())
    }

    pub fn total_capacity_w(&self) -> f64 {
        self.panels.iter().map(|p| p.capacity_w).sum()
    }

    pub fn panel(&self, id: &str) -> Option<&PanelSpec> {
        self.panels.iter().find(|p| p.panel_id == id)
    }

    /// Other panels on the same roof plane as `id`, in layout order.
    pub fn plane_mates(&self, id: &str) -> Vec<&PanelSpec> {
        match self.panel(id) {
            Some(target) => self
                .panels
                .iter()
                .filter(|p| p.panel_id != id && p.roof_plane == target.roof_plane)
                .collect(),
            None => Vec::new(),
        }
    }

    /// All panels except `id`, in layout order.
    pub fn others(&self, id: &str) -> Vec<&PanelSpec> {
        self.panels.iter().filter(|p| p.panel_id != id).collect()
    }

    /// Daylight threshold in watts for a given fraction of array nameplate.
    pub fn daylight_epsilon_w(&self, fraction: f64) -> f64 {
        fraction * self.total_capacity_w()
    }
}

/// Month number (1–12) of a date.
pub fn month_of(date: NaiveDate) -> u32 {
    date.month()
}
