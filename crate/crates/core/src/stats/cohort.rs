//! Pairwise Dice over a prediction/reference cohort, joined with clinical
//! covariates, followed by group comparisons and rank correlations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{spearman, t_test_independent, TTestVariant};
use crate::segdb::{Registry, SegDbError};
use crate::volume::{self, Geometry};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("clinical table: {0}")]
    Clinical(String),
    #[error(transparent)]
    Segment(#[from] SegDbError),
    #[error("evaluation config: {0}")]
    Config(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CohortError {
    CohortError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    /// A covariate name, or `segment_id`.
    pub grouping: String,
    pub group1: String,
    pub group2: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub model: String,
    /// Reference label value to segment id.
    pub reference_labels: BTreeMap<i64, String>,
    /// Prediction label value to segment id; defaults to `reference_labels`.
    #[serde(default)]
    pub prediction_labels: Option<BTreeMap<i64, String>>,
    /// Prediction segment id to the reference segment it is merged into.
    #[serde(default)]
    pub aggregation: BTreeMap<String, String>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
    #[serde(default)]
    pub correlations: Vec<String>,
    #[serde(default)]
    pub variant: TTestVariant,
}

impl EvalConfig {
    pub fn from_yaml(text: &str) -> Result<EvalConfig, CohortError> {
        serde_yaml::from_str(text).map_err(|e| CohortError::Config(e.to_string()))
    }

    fn validate(&self, registry: &Registry) -> Result<(), CohortError> {
        let ids = self
            .reference_labels
            .values()
            .chain(self.prediction_labels.iter().flat_map(|m| m.values()))
            .chain(self.aggregation.keys())
            .chain(self.aggregation.values());
        for id in ids {
            registry.resolve_class(id)?;
        }
        let unique: BTreeSet<_> = self.reference_labels.values().collect();
        if unique.len() != self.reference_labels.len() {
            return Err(CohortError::Config("reference labels map two values to one segment".into()));
        }
        if self.reference_labels.contains_key(&0) {
            return Err(CohortError::Config("label 0 is background".into()));
        }
        Ok(())
    }

    /// Prediction label value to reference label value.
    fn label_mapping(&self) -> BTreeMap<i64, i64> {
        let by_segment: BTreeMap<&str, i64> =
            self.reference_labels.iter().map(|(&v, s)| (s.as_str(), v)).collect();
        let pred = self.prediction_labels.as_ref().unwrap_or(&self.reference_labels);
        let mut mapping = BTreeMap::new();
        for (&value, segment) in pred {
            let target = self.aggregation.get(segment).unwrap_or(segment);
            match by_segment.get(target.as_str()) {
                Some(&r) => {
                    mapping.insert(value, r);
                }
                None => warn!("prediction segment {segment} has no reference counterpart; ignored"),
            }
        }
        mapping
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortRow {
    pub case_id: String,
    pub model: String,
    pub segment_id: String,
    pub dice: f64,
    pub covariates: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    MissingReference,
    MissingPrediction,
    GeometryMismatch,
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub case_id: String,
    pub reason: ExclusionReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CohortEvaluation {
    pub rows: Vec<CohortRow>,
    pub exclusions: Vec<Exclusion>,
}

fn case_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CohortError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"));
        if let (Some(stem), true) = (stem, path.is_file()) {
            if out.insert(stem.to_string(), path.clone()).is_some() {
                warn!("case {stem} has both .nii and .nii.gz files in {}", dir.display());
            }
        }
    }
    Ok(out)
}

/// Reads a clinical CSV keyed by `case_id`; column names are lowercased.
pub fn read_clinical(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, String>>, CohortError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CohortError::Clinical(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let key = headers
        .iter()
        .position(|h| h == "case_id")
        .ok_or_else(|| CohortError::Clinical("missing case_id column".into()))?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CohortError::Clinical(e.to_string()))?;
        let case_id = record[key].trim().to_string();
        let covariates = headers
            .iter()
            .zip(record.iter())
            .enumerate()
            .filter(|(i, _)| *i != key)
            .map(|(_, (h, v))| (h.clone(), v.trim().to_string()))
            .collect();
        if out.insert(case_id.clone(), covariates).is_some() {
            return Err(CohortError::Clinical(format!("duplicate case_id {case_id}")));
        }
    }
    Ok(out)
}

pub fn evaluate_cohort(
    pred_dir: &Path,
    ref_dir: &Path,
    clinical_csv: Option<&Path>,
    config: &EvalConfig,
    registry: &Registry,
) -> Result<CohortEvaluation, CohortError> {
    config.validate(registry)?;
    let clinical = match clinical_csv {
        Some(p) => read_clinical(p)?,
        None => BTreeMap::new(),
    };
    let preds = case_files(pred_dir)?;
    let refs = case_files(ref_dir)?;
    let mapping = config.label_mapping();
    let ids: Vec<i64> = config.reference_labels.keys().copied().collect();
    let cases: BTreeSet<&String> = preds.keys().chain(refs.keys()).collect();

    let mut eval = CohortEvaluation::default();
    let mut exclude = |case_id: &str, reason, detail: String| {
        warn!("excluding case {case_id}: {detail}");
        eval.exclusions.push(Exclusion { case_id: case_id.to_string(), reason, detail });
    };
    let mut rows = Vec::new();
    for case_id in cases {
        let (pred_path, ref_path) = match (preds.get(case_id), refs.get(case_id)) {
            (Some(p), Some(r)) => (p, r),
            (None, _) => {
                exclude(case_id, ExclusionReason::MissingPrediction, "no prediction volume".into());
                continue;
            }
            (_, None) => {
                exclude(case_id, ExclusionReason::MissingReference, "no reference volume".into());
                continue;
            }
        };
        let (pred, reference) = match (volume::read_nifti(pred_path), volume::read_nifti(ref_path)) {
            (Ok(p), Ok(r)) => (p, r),
            (Err(e), _) | (_, Err(e)) => {
                exclude(case_id, ExclusionReason::Unreadable, e.to_string());
                continue;
            }
        };
        match volume::compare_geometry(&pred, &reference) {
            Geometry::ShapeMismatch => {
                let detail = format!("shape {:?} vs {:?}", pred.dims, reference.dims);
                exclude(case_id, ExclusionReason::GeometryMismatch, detail);
                continue;
            }
            Geometry::AffineDiffers(d) => {
                warn!("case {case_id}: affines differ by {d:.3e}; comparing voxel-wise")
            }
            Geometry::Match => {}
        }
        let merged = volume::merge_labels(&pred, &mapping);
        let dice = volume::per_segment_dice(&merged, &reference, &ids)
            .map_err(|e| CohortError::Config(e.to_string()))?;
        let covariates = clinical.get(case_id).cloned().unwrap_or_else(|| {
            if clinical_csv.is_some() {
                warn!("case {case_id} has no clinical record");
            }
            BTreeMap::new()
        });
        for d in dice {
            rows.push(CohortRow {
                case_id: case_id.clone(),
                model: config.model.clone(),
                segment_id: config.reference_labels[&d.label].clone(),
                dice: d.dice,
                covariates: covariates.clone(),
            });
        }
    }
    eval.rows = rows;
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TTestRow {
    pub model: String,
    /// `<grouping>:<group1>-<group2>`
    pub grouping: String,
    pub estimate: f64,
    pub p: f64,
    pub t: f64,
    pub df: f64,
    pub n1: usize,
    pub n2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub model: String,
    pub covariate: String,
    pub cor_s: f64,
    pub p_s: f64,
    pub n: usize,
}

fn group_value<'a>(row: &'a CohortRow, grouping: &str) -> Option<&'a str> {
    if grouping == "segment_id" {
        Some(&row.segment_id)
    } else {
        row.covariates.get(grouping).map(String::as_str)
    }
}

/// Runs every comparison and correlation once per model. Tests that cannot
/// be computed are logged and left out.
pub fn run_statistics(
    rows: &[CohortRow],
    comparisons: &[Comparison],
    correlations: &[String],
    variant: TTestVariant,
) -> (Vec<TTestRow>, Vec<CorrelationRow>) {
    let models: BTreeSet<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    let mut tests = Vec::new();
    let mut cors = Vec::new();
    for model in models {
        let of_model: Vec<&CohortRow> = rows.iter().filter(|r| r.model == model).collect();
        for c in comparisons {
            let grouping = c.grouping.to_ascii_lowercase();
            let pick = |g: &str| -> Vec<f64> {
                of_model
                    .iter()
                    .filter(|r| group_value(r, &grouping) == Some(g))
                    .map(|r| r.dice)
                    .collect()
            };
            let label = format!("{grouping}:{}-{}", c.group1, c.group2);
            match t_test_independent(&pick(&c.group1), &pick(&c.group2), variant) {
                Ok(r) => tests.push(TTestRow {
                    model: model.to_string(),
                    grouping: label,
                    estimate: r.estimate,
                    p: r.p,
                    t: r.t,
                    df: r.df,
                    n1: r.n1,
                    n2: r.n2,
                }),
                Err(e) => warn!("{model} {label}: {e}"),
            }
        }
        for covariate in correlations {
            let covariate = covariate.to_ascii_lowercase();
            let (x, y): (Vec<f64>, Vec<f64>) = of_model
                .iter()
                .filter_map(|r| {
                    let v = r.covariates.get(&covariate)?.parse::<f64>().ok()?;
                    Some((v, r.dice))
                })
                .unzip();
            match spearman(&x, &y) {
                Ok(s) => cors.push(CorrelationRow {
                    model: model.to_string(),
                    covariate,
                    cor_s: s.rho,
                    p_s: s.p,
                    n: s.n,
                }),
                Err(e) => warn!("{model} dice~{covariate}: {e}"),
            }
        }
    }
    (tests, cors)
}

pub const COHORT_CSV: &str = "cohort.csv";
pub const TTESTS_CSV: &str = "ttests.csv";
pub const CORRELATIONS_CSV: &str = "correlations.csv";

fn write_csv(path: &Path, header: &[&str], records: Vec<Vec<String>>) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in records {
        w.write_record(&r).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes `cohort.csv`, `ttests.csv` and `correlations.csv` into `out_dir`.
pub fn export_stats(
    rows: &[CohortRow],
    tests: &[TTestRow],
    correlations: &[CorrelationRow],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CohortError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let covariates: BTreeSet<&String> = rows.iter().flat_map(|r| r.covariates.keys()).collect();
    let mut header = vec!["case_id", "model", "segment_id", "dice"];
    header.extend(covariates.iter().map(|c| c.as_str()));
    let cohort = rows
        .iter()
        .map(|r| {
            let mut rec = vec![r.case_id.clone(), r.model.clone(), r.segment_id.clone(), r.dice.to_string()];
            rec.extend(covariates.iter().map(|c| r.covariates.get(*c).cloned().unwrap_or_default()));
            rec
        })
        .collect();
    let ttests = tests
        .iter()
        .map(|t| vec![t.model.clone(), t.grouping.clone(), t.estimate.to_string(), t.p.to_string()])
        .collect();
    let cors = correlations
        .iter()
        .map(|c| {
            vec![c.model.clone(), c.covariate.clone(), c.cor_s.to_string(), c.p_s.to_string(), c.n.to_string()]
        })
        .collect();
    let paths = [COHORT_CSV, TTESTS_CSV, CORRELATIONS_CSV].map(|n| out_dir.join(n));
    write_csv(&paths[0], &header, cohort)?;
    write_csv(&paths[1], &["model", "grouping", "estimate", "p"], ttests)?;
    write_csv(&paths[2], &["model", "covariate", "cor_s", "p_s", "n"], cors)?;
    Ok(paths.to_vec())
}
