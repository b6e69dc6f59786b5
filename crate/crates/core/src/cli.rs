//! Command-line pipeline: simulate → ingest → train → detect → classify →
//! evaluate → report. Every artifact-producing run writes a
//! `run_manifest.json` recording the resolved configuration, the seed, and a
//! SHA-256 digest of each input file, so outputs can be traced and reproduced
//! byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::classifier::{
    classify, classify_systemwide, extract_features, fit_forest, DEFAULT_TREES,
};
use crate::data::{segment_days, ArrayLayout, DaySlice, PanelMatrix, WeatherSeries};
use crate::detector::{
    build_candidates, detect_array, CandidateSet, Detection, DetectorConfig, FaultReport,
    PanelModels, SubsetStrategy,
};
use crate::evaluate::{fault_class_of, run_study, write_study, StudyParams, ALL_STUDIES};
use crate::forecaster::{fit_forecaster, ForecastModel, ForecasterConfig};
use crate::ingest::{
    label_days, parse_layout_csv, parse_power_csv, parse_weather_csv, validate_power_scale,
    write_layout_csv, write_power_csv, write_weather_csv, IngestConfig,
};
use crate::model_io::{
    load_detections, load_models, save_detections, save_models, ModelDocument,
};
use crate::predictors::FitConfig;
use crate::seeds;
use crate::simulator::{
    four_plane_layout, simulate, single_plane_layout, FaultKind, FaultSpec, SimConfig,
    TruthRecord, WeatherProfile,
};

/// Failures split by exit code: usage errors (bad flags, unparseable or
/// missing settings) exit 1, data errors (I/O, malformed files, pipeline
/// failures) exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

macro_rules! data_error_from {
    ($($t:ty),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*}
}

data_error_from!(
    std::io::Error,
    csv::Error,
    serde_json::Error,
    anyhow::Error,
    crate::data::DataError,
    crate::ingest::IngestError,
    crate::simulator::SimError,
    crate::predictors::ModelError,
    crate::forecaster::ForecastError,
    crate::detector::DetectError,
    crate::classifier::ClassifyError,
    crate::evaluate::EvalError,
    crate::model_io::ModelIoError,
);

/// Parse and execute; returns the process exit code (0 success, 1 usage
/// error, 2 data error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pvwatch",
    version = crate::VERSION,
    about = "Per-panel solar fault detection from micro-inverter telemetry"
)]
struct Cli {
    /// Flat `key = value` config file mirroring the long flags; flags
    /// override file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic array dataset with optional injected faults.
    Simulate(SimulateArgs),
    /// Normalize raw CSVs onto the 5-minute grid and label panel-days.
    Ingest(IngestArgs),
    /// Fit per-panel candidate models and forecasters; with labeled fault
    /// days, also fit the fault-cause classifier.
    Train(TrainArgs),
    /// Detect per-panel faults over a date range.
    Detect(DetectArgs),
    /// Attach fault-cause labels to flagged detections.
    Classify(ClassifyArgs),
    /// Run a named study and write summary/long CSVs plus JSON.
    Evaluate(EvaluateArgs),
    /// Render reports.csv as a per-date fault roster.
    Report(ReportArgs),
    /// Print the tool version.
    Version,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Simulate(a) => run_simulate(a, config),
        Command::Ingest(a) => run_ingest(a, config),
        Command::Train(a) => run_train(a, config),
        Command::Detect(a) => run_detect(a, config),
        Command::Classify(a) => run_classify(a, config),
        Command::Evaluate(a) => run_evaluate(a, config),
        Command::Report(a) => run_report(a, config),
        Command::Version => {
            println!("{}", crate::VERSION);
            Ok(())
        }
    }
}

// --- configuration resolution ----------------------------------------------

/// Merges flag values over config-file values over defaults, recording every
/// setting actually used so the manifest can reproduce the run.
#[derive(Debug)]
struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Resolver {
    fn load(config: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(CliError::Usage(format!(
                        "config line {}: expected `key = value`, got `{line}`",
                        i + 1
                    )));
                };
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self { file, used: BTreeMap::new() })
    }

    fn value<T: FromStr + ToString>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw.parse().map_err(|_| {
                    CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`"))
                })?,
                None => default,
            },
        };
        self.used.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn optional<T: FromStr + ToString>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(raw.parse().map_err(|_| {
                    CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`"))
                })?),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.used.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        match self.optional_path(key, flag) {
            Some(p) => Ok(p),
            None => Err(CliError::Usage(format!(
                "missing required setting `{key}` (pass --{key} or set `{key}` in the config file)"
            ))),
        }
    }

    /// Paths are resolved but never recorded in the manifest's `config` map:
    /// input files appear there as content digests instead, and recording the
    /// output directory would make byte-identical runs look different.
    fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.file.get(key).map(PathBuf::from))
    }
}

// --- manifest ---------------------------------------------------------------

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool_version: String,
    command: String,
    /// Master seed of the run; absent for seedless subcommands.
    seed: Option<u64>,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, InputDigest>,
    outputs: Vec<String>,
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: Option<u64>,
    config: BTreeMap<String, String>,
    inputs: &[(&str, &Path)],
    outputs: &[String],
) -> Result<(), CliError> {
    let mut digests = BTreeMap::new();
    for (name, path) in inputs {
        digests.insert(
            name.to_string(),
            InputDigest { path: path.display().to_string(), sha256: sha256_hex(path)? },
        );
    }
    let manifest = RunManifest {
        tool_version: crate::VERSION.to_string(),
        command: command.to_string(),
        seed,
        config,
        inputs: digests,
        outputs: outputs.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out_dir.join("run_manifest.json"), text)?;
    Ok(())
}

// --- shared file helpers -----------------------------------------------------

fn open(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

struct LoadedInputs {
    matrix: PanelMatrix,
    weather: WeatherSeries,
    layout: ArrayLayout,
}

fn load_inputs(
    power: &Path,
    weather: &Path,
    layout: &Path,
    tz_offset_minutes: i32,
    latitude: f64,
    longitude: f64,
) -> Result<LoadedInputs, CliError> {
    let matrix = parse_power_csv(open(power)?, tz_offset_minutes)?;
    let weather = parse_weather_csv(open(weather)?, tz_offset_minutes)?;
    let layout = parse_layout_csv(open(layout)?, latitude, longitude)?;
    validate_power_scale(&matrix, &layout)?;
    Ok(LoadedInputs { matrix, weather, layout })
}

/// Print detector warnings (fallback models, labeling failures) to stderr.
fn surface_warnings(detections: &[Detection]) {
    for d in detections {
        if let Some(w) = &d.report.warning {
            eprintln!("warning: {} {}: {w}", d.report.date, d.report.panel_id);
        }
    }
}

// --- reports.csv -------------------------------------------------------------

const REPORT_COLUMNS: [&str; 8] = [
    "date",
    "panel_id",
    "flagged",
    "daily_loss_ratio",
    "persistence",
    "model_inputs",
    "class_label",
    "confidence",
];

/// System-wide rows carry this marker in the `model_inputs` column, since no
/// neighbor model was involved.
const SYSTEM_WIDE_MARKER: &str = "system-wide";

/// Write reports sorted by date, then panel id, so re-runs are
/// byte-identical.
pub fn write_reports_csv(
    reports: &[FaultReport],
    writer: impl std::io::Write,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_COLUMNS)?;
    let mut sorted: Vec<&FaultReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.panel_id.cmp(&b.panel_id)));
    for r in sorted {
        let inputs_cell = if r.system_wide {
            SYSTEM_WIDE_MARKER.to_string()
        } else {
            r.model_inputs.as_ref().map(|v| v.join(";")).unwrap_or_default()
        };
        w.write_record(&[
            r.date.to_string(),
            r.panel_id.clone(),
            r.flagged.to_string(),
            r.daily_loss_ratio.to_string(),
            r.persistence.to_string(),
            inputs_cell,
            r.class_label.clone().unwrap_or_default(),
            r.confidence.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_reports_csv(reader: impl std::io::Read) -> Result<Vec<FaultReport>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != REPORT_COLUMNS {
        return Err(CliError::Data(format!(
            "reports file must have columns `{}`",
            REPORT_COLUMNS.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |ix: usize| rec.get(ix).unwrap_or("").trim();
        let num = |ix: usize| -> Result<f64, CliError> {
            cell(ix).parse().map_err(|_| {
                CliError::Data(format!("reports line {line}: bad number `{}`", cell(ix)))
            })
        };
        let date: NaiveDate = cell(0).parse().map_err(|_| {
            CliError::Data(format!("reports line {line}: bad date `{}`", cell(0)))
        })?;
        let flagged: bool = cell(2).parse().map_err(|_| {
            CliError::Data(format!("reports line {line}: bad flag `{}`", cell(2)))
        })?;
        let (system_wide, model_inputs) = match cell(5) {
            "" => (false, None),
            SYSTEM_WIDE_MARKER => (true, None),
            joined => (false, Some(joined.split(';').map(str::to_string).collect())),
        };
        let class_label = match cell(6) {
            "" => None,
            label => Some(label.to_string()),
        };
        out.push(FaultReport {
            panel_id: cell(1).to_string(),
            date,
            flagged,
            daily_loss_ratio: num(3)?,
            persistence: num(4)?,
            model_inputs,
            system_wide,
            class_label,
            confidence: num(7)?,
            warning: None,
        });
    }
    Ok(out)
}

/// Human-readable per-date fault roster.
pub fn render_roster(reports: &[FaultReport]) -> String {
    let mut by_date: BTreeMap<NaiveDate, Vec<&FaultReport>> = BTreeMap::new();
    for r in reports {
        by_date.entry(r.date).or_default().push(r);
    }
    let mut out = String::new();
    let total_flagged = reports.iter().filter(|r| r.flagged).count();
    out.push_str(&format!(
        "fault roster: {} panel-day reports over {} day(s), {} flagged\n",
        reports.len(),
        by_date.len(),
        total_flagged
    ));
    for (date, day) in &by_date {
        let mut day = day.clone();
        day.sort_by(|a, b| a.panel_id.cmp(&b.panel_id));
        out.push_str(&format!("\n{date}\n"));
        if day.iter().any(|r| r.system_wide) {
            let label = day
                .iter()
                .find_map(|r| r.class_label.as_deref())
                .unwrap_or("unclassified");
            out.push_str(&format!(
                "  SYSTEM-WIDE: whole-array production loss ({label})\n"
            ));
            continue;
        }
        let flagged: Vec<&&FaultReport> = day.iter().filter(|r| r.flagged).collect();
        if flagged.is_empty() {
            out.push_str("  no faults\n");
            continue;
        }
        for r in flagged {
            let cause = r.class_label.as_deref().unwrap_or("unclassified");
            out.push_str(&format!(
                "  {}  lost {:.0}% of expected output, persistence {:.2}, cause {} (confidence {:.2})\n",
                r.panel_id,
                r.daily_loss_ratio * 100.0,
                r.persistence,
                cause,
                r.confidence
            ));
        }
    }
    out
}

// --- fault / truth CSVs ------------------------------------------------------

/// Parse `panel_id,date,kind,severity` into all-day fault specs.
fn parse_faults_csv(reader: impl std::io::Read) -> Result<Vec<FaultSpec>, CliError> {
    Ok(parse_truth_csv(reader)?
        .into_iter()
        .map(|t| FaultSpec::all_day(&t.panel_id, t.date, t.kind, t.severity))
        .collect())
}

fn parse_truth_csv(reader: impl std::io::Read) -> Result<Vec<TruthRecord>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expect = ["panel_id", "date", "kind", "severity"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(CliError::Data(format!(
            "fault schedule must have columns `{}`",
            expect.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |ix: usize| rec.get(ix).unwrap_or("").trim();
        out.push(TruthRecord {
            panel_id: cell(0).to_string(),
            date: cell(1).parse().map_err(|_| {
                CliError::Data(format!("faults line {line}: bad date `{}`", cell(1)))
            })?,
            kind: cell(2).parse::<FaultKind>().map_err(|e| {
                CliError::Data(format!("faults line {line}: {e}"))
            })?,
            severity: cell(3).parse().map_err(|_| {
                CliError::Data(format!("faults line {line}: bad severity `{}`", cell(3)))
            })?,
        });
    }
    Ok(out)
}

fn write_truth_csv(truth: &[TruthRecord], writer: impl std::io::Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["panel_id", "date", "kind", "severity"])?;
    for t in truth {
        w.write_record(&[
            t.panel_id.clone(),
            t.date.to_string(),
            t.kind.to_string(),
            t.severity.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// --- subcommands -------------------------------------------------------------

#[derive(Args)]
struct SimulateArgs {
    /// Layout CSV to simulate; omit to use a built-in layout.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Built-in layout: `single` (one south plane) or `four` (four planes).
    #[arg(long)]
    layout_kind: Option<String>,
    /// Panel count for `single`; panels per plane for `four`.
    #[arg(long)]
    panels: Option<usize>,
    /// First simulated date (YYYY-MM-DD).
    #[arg(long)]
    start: Option<NaiveDate>,
    /// Number of consecutive days to simulate.
    #[arg(long)]
    days: Option<usize>,
    /// Sky model: sunny, overcast, or scattered.
    #[arg(long)]
    profile: Option<WeatherProfile>,
    /// Master seed for panel gains, weather, and meter noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Inverter output cap as a fraction of panel capacity (1.0 = no clip).
    #[arg(long)]
    clip_fraction: Option<f64>,
    /// Fault schedule CSV (`panel_id,date,kind,severity`), applied all-day.
    #[arg(long)]
    faults: Option<PathBuf>,
    /// Site latitude in degrees, north positive.
    #[arg(long)]
    latitude: Option<f64>,
    /// Site longitude in degrees, east positive.
    #[arg(long)]
    longitude: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_simulate(args: SimulateArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::load(config)?;
    let out = r.required_path("out", args.out)?;
    let layout_path = r.optional_path("layout", args.layout);
    let layout_kind = r.value("layout-kind", args.layout_kind, "single".to_string())?;
    let panels = r.value("panels", args.panels, 12usize)?;
    let start =
        r.value("start", args.start, NaiveDate::from_ymd_opt(2021, 6, 1).expect("valid date"))?;
    let days = r.value("days", args.days, 10usize)?;
    let profile = r.value("profile", args.profile, WeatherProfile::Sunny)?;
    let seed = r.value("seed", args.seed, 42u64)?;
    let clip_fraction = r.value("clip-fraction", args.clip_fraction, 1.0f64)?;
    let latitude = r.value("latitude", args.latitude, 42.4f64)?;
    let longitude = r.value("longitude", args.longitude, -72.5f64)?;
    let faults_path = r.optional_path("faults", args.faults);

    let layout = match &layout_path {
        Some(p) => parse_layout_csv(open(p)?, latitude, longitude)?,
        None => match layout_kind.as_str() {
            "single" => single_plane_layout(panels),
            "four" => four_plane_layout(panels),
            other => {
                return Err(CliError::Usage(format!(
                    "layout-kind must be `single` or `four`, got `{other}`"
                )))
            }
        },
    };
    let faults = match &faults_path {
        Some(p) => parse_faults_csv(open(p)?)?,
        None => Vec::new(),
    };
    let dates: Vec<NaiveDate> =
        (0..days).map(|i| start + chrono::Days::new(i as u64)).collect();
    if dates.is_empty() {
        return Err(CliError::Usage("days must be at least 1".into()));
    }
    let cfg = SimConfig { clip_fraction, ..SimConfig::default() };
    let sim = simulate(&layout, &dates, profile, &faults, seed, &cfg)?;

    std::fs::create_dir_all(&out)?;
    write_power_csv(&sim.matrix, create(&out.join("power.csv"))?)?;
    write_weather_csv(&sim.weather, create(&out.join("weather.csv"))?)?;
    write_layout_csv(&layout, create(&out.join("layout.csv"))?)?;
    write_truth_csv(&sim.truth, create(&out.join("truth.csv"))?)?;

    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(p) = &layout_path {
        inputs.push(("layout", p));
    }
    if let Some(p) = &faults_path {
        inputs.push(("faults", p));
    }
    let outputs: Vec<String> =
        ["power.csv", "weather.csv", "layout.csv", "truth.csv"].map(String::from).to_vec();
    write_manifest(&out, "simulate", Some(seed), r.used, &inputs, &outputs)
}

#[derive(Args)]
struct IngestArgs {
    /// Power CSV: `timestamp` plus one watts column per panel.
    #[arg(long)]
    power: Option<PathBuf>,
    /// Weather CSV: `timestamp,cloud_cover,snow_depth,is_forecast`.
    #[arg(long)]
    weather: Option<PathBuf>,
    /// Layout CSV: per-panel plane, tilt, azimuth, and nameplate watts.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Minutes east of UTC of the site's wall clock.
    #[arg(long)]
    tz_offset_minutes: Option<i32>,
    /// Site latitude in degrees, north positive.
    #[arg(long)]
    latitude: Option<f64>,
    /// Site longitude in degrees, east positive.
    #[arg(long)]
    longitude: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_ingest(args: IngestArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::load(config)?;
    let out = r.required_path("out", args.out)?;
    let power = r.required_path("power", args.power)?;
    let weather = r.required_path("weather", args.weather)?;
    let layout = r.required_path("layout", args.layout)?;
    let tz = r.value("tz-offset-minutes", args.tz_offset_minutes, 0i32)?;
    let latitude = r.value("latitude", args.latitude, 42.4f64)?;
    let longitude = r.value("longitude", args.longitude, -72.5f64)?;

    let loaded = load_inputs(&power, &weather, &layout, tz, latitude, longitude)?;
    let cfg = IngestConfig::default();
    let days = segment_days(
        &loaded.matrix,
        loaded.layout.daylight_epsilon_w(cfg.daylight_epsilon_fraction),
    );
    let labels = label_days(&days, &loaded.layout, &cfg)?;

    std::fs::create_dir_all(&out)?;
    write_power_csv(&loaded.matrix, create(&out.join("power.csv"))?)?;
    write_weather_csv(&loaded.weather, create(&out.join("weather.csv"))?)?;
    write_layout_csv(&loaded.layout, create(&out.join("layout.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&out.join("day_labels.csv"))?);
    w.write_record([
        "panel_id",
        "date",
        "capacity",
        "capacity_ratio",
        "correlation",
        "corr_mean",
    ])?;
    for l in &labels {
        w.write_record(&[
            l.panel_id.clone(),
            l.date.to_string(),
            format!("{:?}", l.capacity),
            l.capacity_ratio.to_string(),
            format!("{:?}", l.correlation),
            l.corr_mean.to_string(),
        ])?;
    }
    w.flush()?;

    let outputs: Vec<String> =
        ["power.csv", "weather.csv", "layout.csv", "day_labels.csv"].map(String::from).to_vec();
    write_manifest(
        &out,
        "ingest",
        None,
        r.used,
        &[("power", &power), ("weather", &weather), ("layout", &layout)],
        &outputs,
    )
}

/// Parse a candidate-input strategy string: `same-plane`, `all-subsets`, or
/// `random:<count>`. Random subsets draw from a stream derived from the
/// master seed per target panel.
fn parse_strategy(s: &str, subset_seed: u64) -> Result<SubsetStrategy, CliError> {
    match s {
        "same-plane" => Ok(SubsetStrategy::SamePlaneFirst),
        "all-subsets" => Ok(SubsetStrategy::AllSubsets),
        other => match other.strip_prefix("random:") {
            Some(count) => {
                let count: usize = count.parse().map_err(|_| {
                    CliError::Usage(format!("strategy `random:<count>`: bad count `{count}`"))
                })?;
                if count == 0 {
                    return Err(CliError::Usage("strategy random count must be positive".into()));
                }
                Ok(SubsetStrategy::RandomSubsets { count, seed: subset_seed })
            }
            None => Err(CliError::Usage(format!(
                "strategy must be `same-plane`, `all-subsets`, or `random:<count>`, got `{other}`"
            ))),
        },
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Power CSV: `timestamp` plus one watts column per panel.
    #[arg(long)]
    power: Option<PathBuf>,
    /// Weather CSV: `timestamp,cloud_cover,snow_depth,is_forecast`.
    #[arg(long)]
    weather: Option<PathBuf>,
    /// Layout CSV: per-panel plane, tilt, azimuth, and nameplate watts.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Input panels per candidate model.
    #[arg(long)]
    inputs: Option<usize>,
    /// Candidate enumeration: same-plane, all-subsets, or random:<count>.
    #[arg(long)]
    strategy: Option<String>,
    /// Trees per regression ensemble.
    #[arg(long)]
    trees: Option<usize>,
    /// Trees in the fault-cause classifier forest.
    #[arg(long)]
    forest_trees: Option<usize>,
    /// Master seed for fitting; stored in models.json for downstream stages.
    #[arg(long)]
    seed: Option<u64>,
    /// Labeled fault days (`panel_id,date,kind,severity`). These days are
    /// excluded from regression training and used to fit the classifier.
    #[arg(long)]
    faults: Option<PathBuf>,
    /// Minutes east of UTC of the site's wall clock.
    #[arg(long)]
    tz_offset_minutes: Option<i32>,
    /// Site latitude in degrees, north positive.
    #[arg(long)]
    latitude: Option<f64>,
    /// Site longitude in degrees, east positive.
    #[arg(long)]
    longitude: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_train(args: TrainArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::load(config)?;
    let out = r.required_path("out", args.out)?;
    let power = r.required_path("power", args.power)?;
    let weather = r.required_path("weather", args.weather)?;
    let layout = r.required_path("layout", args.layout)?;
    let inputs_n = r.value("inputs", args.inputs, 2usize)?;
    let strategy_raw = r.value("strategy", args.strategy, "same-plane".to_string())?;
    let trees = r.value("trees", args.trees, FitConfig::default().trees)?;
    let forest_trees = r.value("forest-trees", args.forest_trees, DEFAULT_TREES)?;
    let seed = r.value("seed", args.seed, 42u64)?;
    let tz = r.value("tz-offset-minutes", args.tz_offset_minutes, 0i32)?;
    let latitude = r.value("latitude", args.latitude, 42.4f64)?;
    let longitude = r.value("longitude", args.longitude, -72.5f64)?;
    let faults_path = r.optional_path("faults", args.faults);

    let loaded = load_inputs(&power, &weather, &layout, tz, latitude, longitude)?;
    let truth = match &faults_path {
        Some(p) => parse_truth_csv(open(p)?)?,
        None => Vec::new(),
    };
    let fault_dates: BTreeSet<NaiveDate> = truth.iter().map(|t| t.date).collect();

    let all_days = segment_days(&loaded.matrix, loaded.layout.daylight_epsilon_w(0.01));
    let train_days: Vec<DaySlice> = all_days
        .iter()
        .filter(|d| !d.is_empty() && !fault_dates.contains(&d.date))
        .cloned()
        .collect();
    if train_days.is_empty() {
        return Err(CliError::Data(
            "no fault-free training days in the power data".into(),
        ));
    }

    let mut candidates: BTreeMap<String, CandidateSet> = BTreeMap::new();
    let mut forecasters: BTreeMap<String, ForecastModel> = BTreeMap::new();
    for (i, p) in loaded.layout.panels.iter().enumerate() {
        let strategy = parse_strategy(&strategy_raw, seeds::derive(seed, "subset", &[i as u64]))?;
        let fit_cfg = FitConfig {
            trees,
            seed: seeds::derive(seed, "cand", &[i as u64]),
            ..FitConfig::default()
        };
        candidates.insert(
            p.panel_id.clone(),
            build_candidates(
                &loaded.layout,
                &p.panel_id,
                inputs_n,
                strategy,
                &train_days,
                &fit_cfg,
            )?,
        );
        forecasters.insert(
            p.panel_id.clone(),
            fit_forecaster(
                &p.panel_id,
                p.capacity_w,
                &train_days,
                &loaded.weather,
                &ForecasterConfig::default(),
            )?,
        );
    }
    let models = PanelModels { candidates, forecasters };

    let classifier = if truth.is_empty() {
        None
    } else {
        let analysis: Vec<NaiveDate> = fault_dates.iter().copied().collect();
        let detections = detect_array(
            &loaded.matrix,
            &loaded.layout,
            &models,
            &loaded.weather,
            &analysis,
            &train_days,
            &DetectorConfig::default(),
            &ForecasterConfig::default(),
        );
        surface_warnings(&detections);
        let day_map: BTreeMap<NaiveDate, &DaySlice> =
            all_days.iter().map(|d| (d.date, d)).collect();
        let truth_map: BTreeMap<(String, NaiveDate), FaultKind> = truth
            .iter()
            .map(|t| ((t.panel_id.clone(), t.date), t.kind))
            .collect();
        let mut samples = Vec::new();
        for det in &detections {
            if !det.report.flagged || det.report.system_wide {
                continue;
            }
            let key = (det.report.panel_id.clone(), det.report.date);
            let (Some(kind), Some(loss), Some(day)) =
                (truth_map.get(&key), &det.loss, day_map.get(&det.report.date))
            else {
                continue;
            };
            let nameplate = loaded
                .layout
                .panel(&det.report.panel_id)
                .map(|p| p.capacity_w)
                .unwrap_or_default();
            let panel_ix = loaded
                .layout
                .panels
                .iter()
                .position(|p| p.panel_id == det.report.panel_id)
                .unwrap_or_default();
            let fv = extract_features(
                &det.report,
                loss,
                day,
                &loaded.weather,
                nameplate,
                seeds::derive(
                    seed,
                    "feat",
                    &[det.report.date.ordinal() as u64, panel_ix as u64],
                ),
            )?;
            samples.push((fv, fault_class_of(*kind)));
        }
        Some(fit_forest(&samples, forest_trees, seeds::derive(seed, "forest", &[]))?)
    };

    std::fs::create_dir_all(&out)?;
    let doc = ModelDocument::new(seed, models, classifier);
    save_models(&doc, &out.join("models.json"))?;

    let mut inputs: Vec<(&str, &Path)> =
        vec![("power", &power), ("weather", &weather), ("layout", &layout)];
    if let Some(p) = &faults_path {
        inputs.push(("faults", p));
    }
    write_manifest(&out, "train", Some(seed), r.used, &inputs, &["models.json".to_string()])
}

#[derive(Args)]
struct DetectArgs {
    /// Power CSV: `timestamp` plus one watts column per panel.
    #[arg(long)]
    power: Option<PathBuf>,
    /// Weather CSV: `timestamp,cloud_cover,snow_depth,is_forecast`.
    #[arg(long)]
    weather: Option<PathBuf>,
    /// Layout CSV: per-panel plane, tilt, azimuth, and nameplate watts.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Trained model document from `train`.
    #[arg(long)]
    models: Option<PathBuf>,
    /// First date to analyze (default: first date in the power data).
    #[arg(long)]
    from: Option<NaiveDate>,
    /// Last date to analyze (default: last date in the power data).
    #[arg(long)]
    to: Option<NaiveDate>,
    /// Minutes east of UTC of the site's wall clock.
    #[arg(long)]
    tz_offset_minutes: Option<i32>,
    /// Site latitude in degrees, north positive.
    #[arg(long)]
    latitude: Option<f64>,
    /// Site longitude in degrees, east positive.
    #[arg(long)]
    longitude: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_detect(args: DetectArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::load(config)?;
    let out = r.required_path("out", args.out)?;
    let power = r.required_path("power", args.power)?;
    let weather = r.required_path("weather", args.weather)?;
    let layout = r.required_path("layout", args.layout)?;
    let models_path = r.required_path("models", args.models)?;
    let from = r.optional("from", args.from)?;
    let to = r.optional("to", args.to)?;
    let tz = r.value("tz-offset-minutes", args.tz_offset_minutes, 0i32)?;
    let latitude = r.value("latitude", args.latitude, 42.4f64)?;
    let longitude = r.value("longitude", args.longitude, -72.5f64)?;

    let loaded = load_inputs(&power, &weather, &layout, tz, latitude, longitude)?;
    let doc = load_models(&models_path)?;

    let analysis: Vec<NaiveDate> = loaded
        .matrix
        .dates()
        .into_iter()
        .filter(|d| from.is_none_or(|f| *d >= f) && to.is_none_or(|t| *d <= t))
        .collect();
    if analysis.is_empty() {
        return Err(CliError::Data("no dates to analyze in the requested range".into()));
    }
    // days before the analysis window warm up the transient-removal profile
    let warmup: Vec<DaySlice> = segment_days(&loaded.matrix, loaded.layout.daylight_epsilon_w(0.01))
        .into_iter()
        .filter(|d| d.date < analysis[0])
        .collect();

    let detections = detect_array(
        &loaded.matrix,
        &loaded.layout,
        &doc.models,
        &loaded.weather,
        &analysis,
        &warmup,
        &DetectorConfig::default(),
        &ForecasterConfig::default(),
    );
    surface_warnings(&detections);

    std::fs::create_dir_all(&out)?;
    let reports: Vec<FaultReport> = detections.iter().map(|d| d.report.clone()).collect();
    write_reports_csv(&reports, create(&out.join("reports.csv"))?)?;
    save_detections(&detections, &out.join("detections.json"))?;

    write_manifest(
        &out,
        "detect",
        Some(doc.seed),
        r.used,
        &[
            ("power", &power),
            ("weather", &weather),
            ("layout", &layout),
            ("models", &models_path),
        ],
        &["reports.csv".to_string(), "detections.json".to_string()],
    )
}

#[derive(Args)]
struct ClassifyArgs {
    /// Power CSV: `timestamp` plus one watts column per panel.
    #[arg(long)]
    power: Option<PathBuf>,
    /// Weather CSV: `timestamp,cloud_cover,snow_depth,is_forecast`.
    #[arg(long)]
    weather: Option<PathBuf>,
    /// Layout CSV: per-panel plane, tilt, azimuth, and nameplate watts.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Trained model document containing a classifier.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Detection output from `detect`.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Seed for loss-sample drawing during feature extraction.
    #[arg(long)]
    seed: Option<u64>,
    /// Minutes east of UTC of the site's wall clock.
    #[arg(long)]
    tz_offset_minutes: Option<i32>,
    /// Site latitude in degrees, north positive.
    #[arg(long)]
    latitude: Option<f64>,
    /// Site longitude in degrees, east positive.
    #[arg(long)]
    longitude: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_classify(args: ClassifyArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::load(config)?;
    let out = r.required_path("out", args.out)?;
    let power = r.required_path("power", args.power)?;
    let weather = r.required_path("weather", args.weather)?;
    let layout = r.required_path("layout", args.layout)?;
    let models_path = r.required_path("models", args.models)?;
    let detections_path = r.required_path("detections", args.detections)?;
    let seed = r.value("seed", args.seed, 0u64)?;
    let tz = r.value("tz-offset-minutes", args.tz_offset_minutes, 0i32)?;
    let latitude = r.value("latitude", args.latitude, 42.4f64)?;
    let longitude = r.value("longitude", args.longitude, -72.5f64)?;

    let loaded = load_inputs(&power, &weather, &layout, tz, latitude, longitude)?;
    let doc = load_models(&models_path)?;
    let forest = doc.classifier.as_ref().ok_or_else(|| {
        CliError::Data(
            "models document has no classifier; run `train` with --faults to fit one".into(),
        )
    })?;
    let mut detections = load_detections(&detections_path)?;
    let day_map: BTreeMap<NaiveDate, DaySlice> =
        segment_days(&loaded.matrix, loaded.layout.daylight_epsilon_w(0.01))
            .into_iter()
            .map(|d| (d.date, d))
            .collect();

    // system-wide days are classified once, as a whole-array event
    let system_dates: BTreeSet<NaiveDate> = detections
        .iter()
        .filter(|d| d.report.system_wide)
        .map(|d| d.report.date)
        .collect();
    let mut system_verdicts: BTreeMap<NaiveDate, String> = BTreeMap::new();
    for &date in &system_dates {
        let reports: Vec<FaultReport> = detections
            .iter()
            .filter(|d| d.report.date == date && d.report.system_wide)
            .map(|d| d.report.clone())
            .collect();
        let verdict = classify_systemwide(&reports, &loaded.weather)?;
        system_verdicts.insert(date, verdict.to_string());
    }

    for det in &mut detections {
        if det.report.system_wide {
            det.report.class_label = system_verdicts.get(&det.report.date).cloned();
            continue;
        }
        if !det.report.flagged {
            continue;
        }
        let (Some(loss), Some(day)) = (&det.loss, day_map.get(&det.report.date)) else {
            eprintln!(
                "warning: {} {}: no loss decomposition or day data; left unclassified",
                det.report.date, det.report.panel_id
            );
            continue;
        };
        let Some(spec) = loaded.layout.panel(&det.report.panel_id) else {
            eprintln!(
                "warning: {} {}: panel not in layout; left unclassified",
                det.report.date, det.report.panel_id
            );
            continue;
        };
        let panel_ix = loaded
            .layout
            .panels
            .iter()
            .position(|p| p.panel_id == det.report.panel_id)
            .expect("panel found above");
        let fv = extract_features(
            &det.report,
            loss,
            day,
            &loaded.weather,
            spec.capacity_w,
            seeds::derive(seed, "feat", &[det.report.date.ordinal() as u64, panel_ix as u64]),
        )?;
        let (class, vote_share) = classify(forest, &fv);
        det.report.class_label = Some(class.to_string());
        // a fallback model's discounted confidence carries through
        det.report.confidence *= vote_share;
    }

    std::fs::create_dir_all(&out)?;
    let reports: Vec<FaultReport> = detections.iter().map(|d| d.report.clone()).collect();
    write_reports_csv(&reports, create(&out.join("reports.csv"))?)?;
    save_detections(&detections, &out.join("detections.json"))?;

    write_manifest(
        &out,
        "classify",
        Some(seed),
        r.used,
        &[
            ("power", &power),
            ("weather", &weather),
            ("layout", &layout),
            ("models", &models_path),
            ("detections", &detections_path),
        ],
        &["reports.csv".to_string(), "detections.json".to_string()],
    )
}

#[derive(Args)]
struct EvaluateArgs {
    /// Study name, or `all` for every study.
    #[arg(long)]
    study: Option<String>,
    /// Seeded trials per study.
    #[arg(long)]
    seeds: Option<usize>,
    /// Seed the per-trial seeds are derived from.
    #[arg(long)]
    base_seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_evaluate(args: EvaluateArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::load(config)?;
    let out = r.required_path("out", args.out)?;
    let study = r.value("study", args.study, "all".to_string())?;
    let default_seeds = StudyParams::default().seeds;
    let seeds_n = r.value("seeds", args.seeds, default_seeds)?;
    let base_seed = r.value("base-seed", args.base_seed, StudyParams::default().base_seed)?;
    if seeds_n == 0 {
        return Err(CliError::Usage("seeds must be at least 1".into()));
    }
    let params = StudyParams { seeds: seeds_n, base_seed };

    let kinds = if study == "all" {
        ALL_STUDIES.to_vec()
    } else {
        vec![study
            .parse()
            .map_err(|e: String| CliError::Usage(format!("{e}; use `all` or a study name")))?]
    };

    let mut outputs = Vec::new();
    for kind in kinds {
        let report = run_study(kind, &params)?;
        let dir = if study == "all" { out.join(kind.to_string()) } else { out.clone() };
        write_study(&report, &dir)?;
        for s in &report.summary {
            println!(
                "{} [{}] {} = {:.4} (iqr {:.4}, n {})",
                s.study, s.condition, s.metric, s.mean, s.iqr, s.n
            );
        }
        for file in ["study.csv", "study_long.csv", "study.json"] {
            outputs.push(if study == "all" {
                format!("{kind}/{file}")
            } else {
                file.to_string()
            });
        }
    }
    write_manifest(&out, "evaluate", Some(base_seed), r.used, &[], &outputs)
}

#[derive(Args)]
struct ReportArgs {
    /// reports.csv produced by `detect` or `classify`.
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_report(args: ReportArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::load(config)?;
    let out = r.required_path("out", args.out)?;
    let reports_path = r.required_path("reports", args.reports)?;
    let reports = parse_reports_csv(open(&reports_path)?)?;
    let text = render_roster(&reports);
    print!("{text}");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("summary.txt"), &text)?;
    write_manifest(
        &out,
        "report",
        None,
        r.used,
        &[("reports", &reports_path)],
        &["summary.txt".to_string()],
    )
}
