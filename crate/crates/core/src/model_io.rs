//! Persistence for trained models and detection output, as versioned JSON.
//! The document format number is independent of the crate version: it only
//! changes when the schema does, so model files survive tool upgrades.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ForestClassifier;
use crate::detector::{Detection, PanelModels};
use crate::VERSION;

/// Schema number this build reads and writes.
pub const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model document format {found}; this build reads format {supported}")]
    UnsupportedFormat { found: u32, supported: u32 },
}

/// Everything detection and classification need at run time: per-panel
/// candidate models and forecasters, plus an optional fault-cause forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: u32,
    pub tool_version: String,
    /// Master seed the models were trained under.
    pub seed: u64,
    pub models: PanelModels,
    pub classifier: Option<ForestClassifier>,
}

impl ModelDocument {
    pub fn new(seed: u64, models: PanelModels, classifier: Option<ForestClassifier>) -> Self {
        Self { format: FORMAT, tool_version: VERSION.to_string(), seed, models, classifier }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ModelIoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn save_models(doc: &ModelDocument, path: &Path) -> Result<(), ModelIoError> {
    write_json(doc, path)
}

pub fn load_models(path: &Path) -> Result<ModelDocument, ModelIoError> {
    let doc: ModelDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.format != FORMAT {
        return Err(ModelIoError::UnsupportedFormat { found: doc.format, supported: FORMAT });
    }
    Ok(doc)
}

/// Save per-panel-day detection output (verdicts plus loss decompositions);
/// this is the hand-off from `detect` to `classify`.
pub fn save_detections(detections: &[Detection], path: &Path) -> Result<(), ModelIoError> {
    write_json(&detections, path)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>, ModelIoError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::FaultReport;
    use crate::predictors::{ModelKind, ModelParams, PredictionModel, TrainingMeta};
    use chrono::NaiveDate;
    use std::collections::BTreeMap;

    fn sample_document() -> ModelDocument {
        let model = PredictionModel {
            target_panel_id: "a".into(),
            input_panel_ids: vec!["b".into(), "c".into()],
            kind: ModelKind::NaiveMean,
            nameplate_w: 320.0,
            params: ModelParams::NaiveMean,
            meta: TrainingMeta { days: 4, rows: 100, seed: 9 },
        };
        let mut candidates = BTreeMap::new();
        candidates.insert(
            "a".to_string(),
            crate::detector::CandidateSet {
                target_panel_id: "a".into(),
                candidates: vec![model],
            },
        );
        ModelDocument::new(
            9,
            PanelModels { candidates, forecasters: BTreeMap::new() },
            None,
        )
    }

    #[test]
    fn models_round_trip() {
        let doc = sample_document();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.json");
        save_models(&doc, &path).unwrap();
        let loaded = load_models(&path).unwrap();
        assert_eq!(loaded, doc);
        assert_eq!(loaded.tool_version, VERSION);
    }

    #[test]
    fn rejects_unknown_format() {
        let mut doc = sample_document();
        doc.format = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.json");
        save_models(&doc, &path).unwrap();
        match load_models(&path) {
            Err(ModelIoError::UnsupportedFormat { found: 99, supported }) => {
                assert_eq!(supported, FORMAT)
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn detections_round_trip() {
        let detections = vec![Detection {
            report: FaultReport {
                panel_id: "a".into(),
                date: NaiveDate::from_ymd_opt(2021, 6, 5).unwrap(),
                flagged: true,
                daily_loss_ratio: 0.42,
                persistence: 0.9,
                model_inputs: Some(vec!["b".into(), "c".into()]),
                system_wide: false,
                class_label: None,
                confidence: 1.0,
                warning: None,
            },
            loss: None,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detections.json");
        save_detections(&detections, &path).unwrap();
        assert_eq!(load_detections(&path).unwrap(), detections);
    }
}
