//! Reproducibility tests: fetch sample and reference data, run a workflow,
//! and diff the outputs into a YAML report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use glob::{MatchOptions, Pattern};
use indexmap::IndexMap;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::segdb::Registry;
use crate::volume::{self, Geometry};
use crate::workflow::{self, ExitCode, ModuleRegistry, RunOptions, Workflow, WorkflowError};

/// Segments with Dice strictly below this value are deviations.
pub const DICE_THRESHOLD: f64 = 0.99;

const COMPLETE_MARKER: &str = ".complete";

#[derive(Debug, Error)]
pub enum TestError {
    #[error("test spec: {0}")]
    Spec(String),
    #[error("fetching {source_ref}: {message}")]
    FetchFailed { source_ref: String, message: String },
    #[error("{source_ref}: sha256 is {actual}, expected {expected}")]
    DigestMismatch { source_ref: String, expected: String, actual: String },
    #[error("{source_ref}: {message}")]
    BadArchive { source_ref: String, message: String },
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TestError {
    TestError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentKind {
    Segmentation,
    Keyvalue,
    Binary,
}

fn default_workflow() -> String {
    "default".into()
}

fn default_threshold() -> f64 {
    DICE_THRESHOLD
}

/// Contents of a workspace's `test.yml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    #[serde(default = "default_workflow")]
    pub workflow: String,
    /// Directory, archive file or http(s) URL of an archive.
    pub sample: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_digest: Option<String>,
    /// Path glob to comparison kind; first match wins, unmatched files are binary.
    #[serde(default)]
    pub rules: IndexMap<String, ContentKind>,
    /// Non-standard: overrides the 0.99 Dice threshold.
    #[serde(default = "default_threshold")]
    pub dice_threshold: f64,
    /// `Module.param=value` overrides applied to the workflow.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub config: Vec<String>,
}

impl TestSpec {
    pub fn from_yaml(text: &str) -> Result<TestSpec, TestError> {
        let spec: TestSpec = serde_yaml::from_str(text).map_err(|e| TestError::Spec(e.to_string()))?;
        spec.rule_set()?;
        if !(spec.dice_threshold > 0.0 && spec.dice_threshold <= 1.0) {
            return Err(TestError::Spec("dice_threshold must be in (0, 1]".into()));
        }
        Ok(spec)
    }

    pub fn rule_set(&self) -> Result<Rules, TestError> {
        let mut rules = Vec::new();
        for (glob, kind) in &self.rules {
            let p = Pattern::new(glob).map_err(|e| TestError::Spec(format!("rule `{glob}`: {e}")))?;
            rules.push((p, *kind));
        }
        Ok(Rules(rules))
    }
}

/// Ordered glob rules selecting a comparison kind per relative path.
#[derive(Debug, Clone, Default)]
pub struct Rules(Vec<(Pattern, ContentKind)>);

impl Rules {
    pub fn new(rules: &[(&str, ContentKind)]) -> Result<Rules, TestError> {
        let mut out = Vec::new();
        for (g, k) in rules {
            out.push((Pattern::new(g).map_err(|e| TestError::Spec(e.to_string()))?, *k));
        }
        Ok(Rules(out))
    }

    pub fn kind_for(&self, rel: &str) -> ContentKind {
        let opts = MatchOptions { require_literal_separator: true, ..MatchOptions::new() };
        self.0
            .iter()
            .find(|(p, _)| p.matches_with(rel, opts))
            .map_or(ContentKind::Binary, |(_, k)| *k)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn normalize_digest(d: &str) -> String {
    d.trim().trim_start_matches("sha256:").to_ascii_lowercase()
}

fn is_web_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

fn download(url: &str) -> Result<Vec<u8>, TestError> {
    let failed = |message: String| TestError::FetchFailed { source_ref: url.to_string(), message };
    let response = ureq::get(url).call().map_err(|e| failed(e.to_string()))?;
    let mut bytes = Vec::new();
    response.into_reader().read_to_end(&mut bytes).map_err(|e| failed(e.to_string()))?;
    Ok(bytes)
}

fn extract(source: &str, bytes: &[u8], dest: &Path) -> Result<(), TestError> {
    let bad = |message: String| TestError::BadArchive { source_ref: source.to_string(), message };
    fs::create_dir_all(dest).map_err(|e| io_err(dest, e))?;
    if bytes.starts_with(b"PK\x03\x04") || bytes.starts_with(b"PK\x05\x06") {
        let mut zip = zip::ZipArchive::new(std::io::Cursor::new(bytes)).map_err(|e| bad(e.to_string()))?;
        zip.extract(dest).map_err(|e| bad(e.to_string()))
    } else if bytes.starts_with(&[0x1f, 0x8b]) {
        let gz = flate2::read::GzDecoder::new(bytes);
        tar::Archive::new(gz).unpack(dest).map_err(|e| bad(e.to_string()))
    } else {
        Err(bad("not a zip or tar.gz archive".into()))
    }
}

/// A lone top-level directory in an extracted archive becomes the data root.
fn data_root(dir: &Path) -> PathBuf {
    let entries: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
        Err(_) => return dir.to_path_buf(),
    };
    match entries.as_slice() {
        [only] if only.is_dir() => only.clone(),
        _ => dir.to_path_buf(),
    }
}

/// Resolves a sample or reference source to a local directory. Directories
/// are used in place; archives are extracted once into `cache_dir`.
pub fn fetch_test_data(
    source: &str,
    digest: Option<&str>,
    base: &Path,
    cache_dir: &Path,
) -> Result<PathBuf, TestError> {
    let pinned = digest.map(normalize_digest);
    let local = if is_web_url(source) {
        None
    } else if let Some(rest) = source.strip_prefix("file://") {
        Some(PathBuf::from(rest))
    } else {
        let p = Path::new(source);
        Some(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
    };
    if let Some(path) = &local {
        if path.is_dir() {
            return Ok(path.clone());
        }
        if !path.is_file() {
            return Err(TestError::FetchFailed { source_ref: source.into(), message: "no such file or directory".into() });
        }
    }

    let mut key_material = match &local {
        Some(p) => fs::canonicalize(p).map_err(|e| io_err(p, e))?.to_string_lossy().into_owned(),
        None => source.to_string(),
    };
    key_material.push('\n');
    key_material.push_str(pinned.as_deref().unwrap_or(""));
    let local_bytes = match &local {
        Some(p) => {
            let b = fs::read(p).map_err(|e| io_err(p, e))?;
            key_material.push('\n');
            key_material.push_str(&sha256_hex(&b));
            Some(b)
        }
        None => None,
    };
    let entry = cache_dir.join(sha256_hex(key_material.as_bytes()));
    let data = entry.join("data");
    if entry.join(COMPLETE_MARKER).is_file() {
        info!("{source}: using cached copy {}", entry.display());
        return Ok(data_root(&data));
    }

    let bytes = match local_bytes {
        Some(b) => b,
        None => download(source)?,
    };
    let actual = sha256_hex(&bytes);
    if let Some(expected) = pinned {
        if expected != actual {
            return Err(TestError::DigestMismatch { source_ref: source.into(), expected, actual });
        }
    }
    fs::create_dir_all(cache_dir).map_err(|e| io_err(cache_dir, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".partial-")
        .tempdir_in(cache_dir)
        .map_err(|e| io_err(cache_dir, e))?;
    extract(source, &bytes, &staging.path().join("data"))?;
    fs::write(staging.path().join(COMPLETE_MARKER), &actual).map_err(|e| io_err(staging.path(), e))?;
    if entry.exists() {
        fs::remove_dir_all(&entry).map_err(|e| io_err(&entry, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, &entry).map_err(|e| io_err(&entry, e))?;
    Ok(data_root(&data))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonFile {
    pub path: String,
    pub size_reference: u64,
    pub size_sample: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDiff {
    pub common: Vec<CommonFile>,
    /// Present in the sample output only.
    pub extra: Vec<String>,
    /// Present in the reference only.
    pub missing: Vec<String>,
}

fn list_files(root: &Path) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    if !root.is_dir() {
        return out;
    }
    for entry in WalkDir::new(root).follow_links(true).into_iter().filter_map(Result::ok) {
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(rel) = entry.path().strip_prefix(root) else { continue };
        let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        let size = entry.metadata().map_or(0, |m| m.len());
        out.insert(rel.join("/"), size);
    }
    out
}

pub fn compare_trees(sample: &Path, reference: &Path) -> TreeDiff {
    let s = list_files(sample);
    let r = list_files(reference);
    let mut diff = TreeDiff::default();
    for (path, &size_reference) in &r {
        match s.get(path) {
            Some(&size_sample) => diff.common.push(CommonFile { path: path.clone(), size_reference, size_sample }),
            None => diff.missing.push(path.clone()),
        }
    }
    diff.extra = s.keys().filter(|p| !r.contains_key(*p)).cloned().collect();
    diff
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub dice: f64,
    pub label: i64,
    pub voxels_reference: u64,
    pub voxels_sample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangedValue {
    pub key: String,
    pub reference: Value,
    pub sample: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContentDiff {
    Segmentation { flagged: Vec<i64>, segments: Vec<SegmentEntry> },
    Keyvalue { changed: Vec<ChangedValue>, extra_keys: Vec<String>, missing_keys: Vec<String> },
    Binary { equal: bool },
}

impl ContentDiff {
    pub fn is_deviation(&self) -> bool {
        match self {
            ContentDiff::Segmentation { flagged, .. } => !flagged.is_empty(),
            ContentDiff::Keyvalue { changed, extra_keys, missing_keys } => {
                !changed.is_empty() || !extra_keys.is_empty() || !missing_keys.is_empty()
            }
            ContentDiff::Binary { equal } => !equal,
        }
    }
}

pub fn is_flagged(dice: f64, threshold: f64) -> bool {
    dice < threshold
}

fn binary_diff(sample: &Path, reference: &Path) -> Result<ContentDiff, String> {
    let a = fs::read(sample).map_err(|e| format!("{}: {e}", sample.display()))?;
    let b = fs::read(reference).map_err(|e| format!("{}: {e}", reference.display()))?;
    Ok(ContentDiff::Binary { equal: a == b })
}

fn segmentation_diff(sample: &Path, reference: &Path, threshold: f64) -> Result<ContentDiff, String> {
    let a = volume::read_nifti(sample).map_err(|e| format!("{}: {e}", sample.display()))?;
    let b = volume::read_nifti(reference).map_err(|e| format!("{}: {e}", reference.display()))?;
    match volume::compare_geometry(&a, &b) {
        Geometry::ShapeMismatch => return Err(format!("shapes differ: {:?} vs {:?}", a.dims, b.dims)),
        Geometry::AffineDiffers(d) => warn!("{}: affines differ by {d:.3e}", sample.display()),
        Geometry::Match => {}
    }
    let labels: Vec<i64> = a.labels().union(&b.labels()).copied().collect();
    let rows = volume::per_segment_dice(&a, &b, &labels).map_err(|e| e.to_string())?;
    let segments: Vec<SegmentEntry> = rows
        .into_iter()
        .map(|r| SegmentEntry { dice: r.dice, label: r.label, voxels_reference: r.voxels_b, voxels_sample: r.voxels_a })
        .collect();
    let flagged = segments.iter().filter(|s| is_flagged(s.dice, threshold)).map(|s| s.label).collect();
    Ok(ContentDiff::Segmentation { flagged, segments })
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                flatten_into(&join(k), x, out);
            }
        }
        Value::Array(a) if !a.is_empty() => {
            for (i, x) in a.iter().enumerate() {
                flatten_into(&join(&i.to_string()), x, out);
            }
        }
        leaf => {
            let key = if prefix.is_empty() { "$".to_string() } else { prefix.to_string() };
            out.insert(key, leaf.clone());
        }
    }
}

/// Flattens nested data to dotted keys; array elements use their index.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

/// Reads JSON, YAML or CSV into a flat key map. CSV cells become `row.column`.
pub fn read_keyvalue(path: &Path) -> Result<BTreeMap<String, Value>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let doc: Value = match ext.as_str() {
        "csv" => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers = reader.headers().map_err(|e| e.to_string())?.clone();
            let mut out = BTreeMap::new();
            for (i, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| e.to_string())?;
                for (h, cell) in headers.iter().zip(rec.iter()) {
                    out.insert(format!("{i}.{h}"), Value::String(cell.to_string()));
                }
            }
            return Ok(out);
        }
        "yml" | "yaml" => serde_yaml::from_str(&text).map_err(|e| e.to_string())?,
        "json" => serde_json::from_str(&text).map_err(|e| e.to_string())?,
        _ => serde_json::from_str(&text).or_else(|_| serde_yaml::from_str(&text)).map_err(|e| e.to_string())?,
    };
    Ok(flatten(&doc))
}

fn same_value(a: &Value, b: &Value) -> bool {
    let num = |v: &Value| match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    if a == b {
        return true;
    }
    match (num(a), num(b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// Key differences: `missing_keys` are only in the reference, `extra_keys`
/// only in the sample.
pub fn diff_keyvalue(sample: &BTreeMap<String, Value>, reference: &BTreeMap<String, Value>) -> ContentDiff {
    let s: BTreeSet<&String> = sample.keys().collect();
    let r: BTreeSet<&String> = reference.keys().collect();
    let changed = s
        .intersection(&r)
        .filter(|k| !same_value(&sample[**k], &reference[**k]))
        .map(|k| ChangedValue { key: (*k).clone(), reference: reference[*k].clone(), sample: sample[*k].clone() })
        .collect();
    ContentDiff::Keyvalue {
        changed,
        extra_keys: s.difference(&r).map(|k| (*k).clone()).collect(),
        missing_keys: r.difference(&s).map(|k| (*k).clone()).collect(),
    }
}

/// Compares one file pair. Unreadable content falls back to byte equality
/// and the reason is returned alongside.
pub fn compare_content(
    sample: &Path,
    reference: &Path,
    kind: ContentKind,
    threshold: f64,
) -> (ContentKind, ContentDiff, Option<String>) {
    let attempt = match kind {
        ContentKind::Segmentation => segmentation_diff(sample, reference, threshold),
        ContentKind::Keyvalue => read_keyvalue(sample)
            .and_then(|a| read_keyvalue(reference).map(|b| diff_keyvalue(&a, &b))),
        ContentKind::Binary => binary_diff(sample, reference),
    };
    match attempt {
        Ok(d) => (kind, d, None),
        Err(reason) => {
            warn!("{reason}; comparing bytes instead");
            let d = binary_diff(sample, reference).unwrap_or(ContentDiff::Binary { equal: false });
            (ContentKind::Binary, d, Some(reason))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Deviation,
    Error,
}

impl Verdict {
    pub fn exit_code(self) -> ExitCode {
        match self {
            Verdict::Pass => ExitCode::Ok,
            Verdict::Deviation => ExitCode::TestDeviation,
            Verdict::Error => ExitCode::RunFailure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub content: ContentDiff,
    pub deviation: bool,
    pub kind: ContentKind,
    pub path: String,
    pub size_reference: u64,
    pub size_sample: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSets {
    pub extra: Vec<String>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub deviations: usize,
    pub files_checked: usize,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub compared: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub files: FileSets,
    pub summary: ReportSummary,
}

impl TestReport {
    pub fn errored(message: String) -> TestReport {
        TestReport {
            compared: Vec::new(),
            error: Some(message),
            files: FileSets::default(),
            summary: ReportSummary { deviations: 0, files_checked: 0, verdict: Verdict::Error },
        }
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("report is plain data")
    }

    pub fn from_yaml(text: &str) -> Result<TestReport, serde_yaml::Error> {
        serde_yaml::from_str(text)
    }
}

/// Diffs a sample output tree against a reference tree.
pub fn compare_dirs(sample: &Path, reference: &Path, rules: &Rules, threshold: f64) -> TestReport {
    let tree = compare_trees(sample, reference);
    let mut compared = Vec::new();
    for f in &tree.common {
        let rel = Path::new(&f.path);
        let (kind, content, warning) =
            compare_content(&sample.join(rel), &reference.join(rel), rules.kind_for(&f.path), threshold);
        compared.push(FileEntry {
            deviation: content.is_deviation(),
            content,
            kind,
            path: f.path.clone(),
            size_reference: f.size_reference,
            size_sample: f.size_sample,
            warning,
        });
    }
    let deviations = tree.missing.len() + tree.extra.len() + compared.iter().filter(|e| e.deviation).count();
    TestReport {
        summary: ReportSummary {
            deviations,
            files_checked: compared.len(),
            verdict: if deviations == 0 { Verdict::Pass } else { Verdict::Deviation },
        },
        compared,
        error: None,
        files: FileSets { extra: tree.extra, missing: tree.missing },
    }
}

/// Everything a reproducibility test needs besides its `TestSpec`.
pub struct TestRun<'a> {
    pub workflow: &'a Workflow,
    pub modules: &'a ModuleRegistry,
    pub segdb: &'a Registry,
    /// Directory that relative test data sources are resolved against.
    pub base_dir: &'a Path,
    /// Receives `outputs/` and `report.yml`.
    pub output_dir: &'a Path,
    pub cache_dir: &'a Path,
}

/// Fetches data, runs the workflow on the sample and writes `report.yml`.
pub fn run_reproducibility_test(spec: &TestSpec, run: &TestRun) -> Result<TestReport, TestError> {
    let rules = spec.rule_set()?;
    let sample = fetch_test_data(&spec.sample, spec.sample_digest.as_deref(), run.base_dir, run.cache_dir)?;
    let reference =
        fetch_test_data(&spec.reference, spec.reference_digest.as_deref(), run.base_dir, run.cache_dir)?;
    let outputs = run.output_dir.join("outputs");
    if outputs.exists() {
        fs::remove_dir_all(&outputs).map_err(|e| io_err(&outputs, e))?;
    }
    let w = workflow::apply_overrides(run.workflow.clone(), &spec.config, run.modules)?;
    let opts = RunOptions { input_dir: sample, output_dir: outputs.clone(), ..Default::default() };
    let report = match workflow::execute_workflow(&w, run.modules, run.segdb, &opts) {
        Ok(log) if log.exit == ExitCode::Ok => compare_dirs(&outputs, &reference, &rules, spec.dice_threshold),
        Ok(log) => {
            let mut lines = vec![format!("workflow exited with {:?}", log.exit)];
            for s in &log.steps {
                if let Some(m) = &s.message {
                    lines.push(format!("{}: {m}", s.module));
                }
                for inv in s.invocations.iter().filter(|i| i.status == workflow::InvocationStatus::Failed) {
                    lines.push(format!("{} on {}: {}", s.module, inv.instance, inv.message.as_deref().unwrap_or("")));
                }
            }
            TestReport::errored(lines.join("\n"))
        }
        Err(e @ WorkflowError::Io { .. }) => TestReport::errored(e.to_string()),
        Err(e) => return Err(e.into()),
    };
    let path = run.output_dir.join("report.yml");
    fs::write(&path, report.to_yaml()).map_err(|e| io_err(&path, e))?;
    Ok(report)
}
