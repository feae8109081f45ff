//! Model metadata (`meta.json`) validation and repository queries.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::segdb::Registry;

/// JSON-Schema describing the accepted documents.
pub const SCHEMA: &str = include_str!("../data/meta.schema.json");

pub const TASKS: [&str; 3] = ["segmentation", "prediction", "feature_extraction"];

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("not valid JSON: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ValidationIssue {
    pub path: String,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}: {}: {}", self.path, self.message)
    }
}

pub fn has_errors(issues: &[ValidationIssue]) -> bool {
    issues.iter().any(|i| i.severity == Severity::Error)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub description: String,
    pub intended_use: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaInput {
    pub format: String,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slicethickness: Option<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaOutput {
    #[serde(rename = "type")]
    pub output_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub architecture: String,
    pub training_data: String,
    pub evaluation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refs {
    pub code_url: String,
    pub paper_url: String,
    pub citation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct License {
    pub code: String,
    pub weights: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub id: String,
    pub name: String,
    pub title: String,
    pub summary: Summary,
    pub task: String,
    pub inputs: Vec<MetaInput>,
    pub outputs: Vec<MetaOutput>,
    pub model: ModelInfo,
    pub refs: Refs,
    pub license: License,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example_images: Option<Vec<Value>>,
}

#[derive(Clone, Copy)]
enum Kind {
    Str,
    Bool,
    Url,
    Task,
    Object(&'static [Field]),
    Array(&'static Kind),
    /// Array of objects, at least one element.
    Items(&'static [Field]),
    Any,
}

struct Field {
    key: &'static str,
    required: bool,
    kind: Kind,
}

const fn req(key: &'static str, kind: Kind) -> Field {
    Field { key, required: true, kind }
}

const fn opt(key: &'static str, kind: Kind) -> Field {
    Field { key, required: false, kind }
}

const SUMMARY: &[Field] = &[req("description", Kind::Str), req("intended_use", Kind::Str)];
const INPUT: &[Field] = &[
    req("format", Kind::Str),
    req("modality", Kind::Str),
    opt("contrast", Kind::Bool),
    opt("slicethickness", Kind::Str),
    req("description", Kind::Str),
];
const OUTPUT: &[Field] = &[
    req("type", Kind::Str),
    opt("classes", Kind::Array(&Kind::Str)),
    req("description", Kind::Str),
];
const MODEL: &[Field] = &[
    req("architecture", Kind::Str),
    req("training_data", Kind::Str),
    req("evaluation", Kind::Str),
];
const REFS: &[Field] = &[req("code_url", Kind::Url), req("paper_url", Kind::Url), req("citation", Kind::Str)];
const LICENSE: &[Field] = &[req("code", Kind::Str), req("weights", Kind::Str)];
const DOCUMENT: &[Field] = &[
    req("id", Kind::Str),
    req("name", Kind::Str),
    req("title", Kind::Str),
    req("summary", Kind::Object(SUMMARY)),
    req("task", Kind::Task),
    req("inputs", Kind::Items(INPUT)),
    req("outputs", Kind::Items(OUTPUT)),
    req("model", Kind::Object(MODEL)),
    req("refs", Kind::Object(REFS)),
    req("license", Kind::Object(LICENSE)),
    opt("example_images", Kind::Array(&Kind::Any)),
];

struct Checker<'a> {
    registry: &'a Registry,
    issues: Vec<ValidationIssue>,
}

impl Checker<'_> {
    fn push(&mut self, path: &str, severity: Severity, message: impl Into<String>) {
        self.issues.push(ValidationIssue { path: path.to_string(), severity, message: message.into() });
    }

    fn string(&mut self, path: &str, v: &Value) -> Option<String> {
        let Some(s) = v.as_str() else {
            self.push(path, Severity::Error, format!("expected a string, found {}", type_name(v)));
            return None;
        };
        let t = s.trim();
        if t.is_empty() {
            self.push(path, Severity::Warning, "empty value");
        } else if t.starts_with('<') && t.ends_with('>') {
            self.push(path, Severity::Warning, format!("placeholder value {t}"));
        }
        Some(t.to_string())
    }

    fn check(&mut self, path: &str, v: &Value, kind: Kind) {
        match kind {
            Kind::Any => {}
            Kind::Str => {
                self.string(path, v);
            }
            Kind::Bool => {
                if !v.is_boolean() {
                    self.push(path, Severity::Error, format!("expected a boolean, found {}", type_name(v)));
                }
            }
            Kind::Url => {
                if let Some(s) = self.string(path, v) {
                    if !s.is_empty() && !(s.starts_with('<') && s.ends_with('>')) && !is_web_url(&s) {
                        self.push(path, Severity::Warning, format!("`{s}` is not an http(s) URL"));
                    }
                }
            }
            Kind::Task => match v.as_str() {
                Some(t) if TASKS.contains(&t) => {}
                Some(t) => self.push(
                    path,
                    Severity::Error,
                    format!("task `{t}` is not one of {}", TASKS.join(", ")),
                ),
                None => self.push(path, Severity::Error, format!("expected a string, found {}", type_name(v))),
            },
            Kind::Object(fields) => self.object(path, v, fields),
            Kind::Array(item) => match v.as_array() {
                Some(items) => {
                    for (i, x) in items.iter().enumerate() {
                        self.check(&format!("{path}[{i}]"), x, *item);
                    }
                }
                None => self.push(path, Severity::Error, format!("expected an array, found {}", type_name(v))),
            },
            Kind::Items(fields) => match v.as_array() {
                Some(items) if items.is_empty() => self.push(path, Severity::Error, "must not be empty"),
                Some(items) => {
                    for (i, x) in items.iter().enumerate() {
                        self.object(&format!("{path}[{i}]"), x, fields);
                    }
                }
                None => self.push(path, Severity::Error, format!("expected an array, found {}", type_name(v))),
            },
        }
    }

    fn object(&mut self, path: &str, v: &Value, fields: &[Field]) {
        let Some(map) = v.as_object() else {
            self.push(path, Severity::Error, format!("expected an object, found {}", type_name(v)));
            return;
        };
        for f in fields {
            let sub = format!("{path}.{}", f.key);
            match map.get(f.key) {
                Some(Value::Null) if !f.required => {}
                Some(x) => self.check(&sub, x, f.kind),
                None if f.required => self.push(&sub, Severity::Error, "required key is missing"),
                None => {}
            }
        }
        for key in map.keys() {
            if !fields.iter().any(|f| f.key == key) {
                self.push(&format!("{path}.{key}"), Severity::Warning, "unknown key");
            }
        }
    }

    fn classes(&mut self, doc: &Value) {
        let Some(outputs) = doc.get("outputs").and_then(Value::as_array) else { return };
        let mut any_classes = false;
        for (i, out) in outputs.iter().enumerate() {
            let Some(classes) = out.get("classes").and_then(Value::as_array) else { continue };
            any_classes |= !classes.is_empty();
            for (j, c) in classes.iter().enumerate() {
                if let Some(id) = c.as_str() {
                    if let Err(e) = self.registry.resolve_class(id) {
                        self.push(&format!("$.outputs[{i}].classes[{j}]"), Severity::Error, e.to_string());
                    }
                }
            }
        }
        if doc.get("task").and_then(Value::as_str) == Some("segmentation") && !any_classes {
            self.push("$.outputs", Severity::Error, "segmentation models need an output with classes");
        }
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn is_web_url(s: &str) -> bool {
    url::Url::parse(s).is_ok_and(|u| matches!(u.scheme(), "http" | "https") && u.host().is_some())
}

/// All issues for a parsed document, ordered by json path.
pub fn validate_meta(doc: &Value, registry: &Registry) -> Vec<ValidationIssue> {
    let mut c = Checker { registry, issues: Vec::new() };
    c.object("$", doc, DOCUMENT);
    if doc.is_object() {
        c.classes(doc);
    }
    let mut issues = c.issues;
    issues.sort();
    issues.dedup();
    issues
}

pub fn validate_meta_str(text: &str, registry: &Registry) -> Result<Vec<ValidationIssue>, MetaError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| MetaError::Parse(e.to_string()))?;
    Ok(validate_meta(&doc, registry))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFilter {
    pub modality: Option<String>,
    pub task: Option<String>,
    pub output_class: Option<String>,
}

impl ModelFilter {
    pub fn matches(&self, m: &ModelMeta) -> bool {
        let modality = self.modality.as_ref().map_or(true, |want| {
            m.inputs.iter().any(|i| i.modality.eq_ignore_ascii_case(want))
        });
        let task = self.task.as_ref().map_or(true, |t| m.task.eq_ignore_ascii_case(t));
        let class = self
            .output_class
            .as_ref()
            .map_or(true, |c| m.outputs.iter().any(|o| o.classes.iter().any(|k| k == c)));
        modality && task && class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoundModel {
    pub dir: PathBuf,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelQuery {
    pub models: Vec<FoundModel>,
    pub warnings: Vec<String>,
}

/// Scans `<repo>/<model>/meta.json` and returns the valid documents that
/// satisfy every filter field, ordered by directory name.
pub fn query_models(repo: &Path, filter: &ModelFilter, registry: &Registry) -> Result<ModelQuery, MetaError> {
    let mut result = ModelQuery::default();
    let mut note = |msg: String| {
        warn!("{msg}");
        result.warnings.push(msg);
    };
    if let Some(class) = &filter.output_class {
        if let Err(e) = registry.resolve_class(class) {
            note(format!("output class filter: {e}"));
            return Ok(result);
        }
    }
    let io = |e: std::io::Error| MetaError::Io { path: repo.to_path_buf(), message: e.to_string() };
    let mut dirs: Vec<PathBuf> = fs::read_dir(repo)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    let mut models = Vec::new();
    for dir in dirs {
        let path = dir.join("meta.json");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                note(format!("{}: {e}", path.display()));
                continue;
            }
        };
        let issues = match validate_meta_str(&text, registry) {
            Ok(i) => i,
            Err(e) => {
                note(format!("{}: {e}", path.display()));
                continue;
            }
        };
        if let Some(first) = issues.iter().find(|i| i.severity == Severity::Error) {
            note(format!("{}: skipped, {first}", path.display()));
            continue;
        }
        match serde_json::from_str::<ModelMeta>(&text) {
            Ok(meta) if filter.matches(&meta) => models.push(FoundModel { dir, meta }),
            Ok(_) => {}
            Err(e) => note(format!("{}: {e}", path.display())),
        }
    }
    result.models = models;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn complete() -> Value {
        json!({
            "id": "3a7d2c1e-lungs",
            "name": "lung_threshold",
            "title": "Lung threshold",
            "summary": {"description": "Segments both lungs.", "intended_use": "Research only."},
            "task": "segmentation",
            "inputs": [{"format": "DICOM", "modality": "CT", "contrast": false,
                        "slicethickness": "2.5mm", "description": "chest CT"}],
            "outputs": [{"type": "Segmentation", "classes": ["LEFT_LUNG", "RIGHT_LUNG"],
                         "description": "lung masks"}],
            "model": {"architecture": "threshold", "training_data": "none", "evaluation": "none"},
            "refs": {"code_url": "https://example.org/code", "paper_url": "https://example.org/paper",
                     "citation": "Doe et al."},
            "license": {"code": "MIT", "weights": "CC-BY-4.0"}
        })
    }

    fn issues(doc: &Value) -> Vec<ValidationIssue> {
        validate_meta(doc, &Registry::bundled())
    }

    #[test]
    fn complete_document_is_clean() {
        assert_eq!(issues(&complete()), []);
        let meta: ModelMeta = serde_json::from_value(complete()).unwrap();
        assert_eq!(meta.outputs[0].classes, ["LEFT_LUNG", "RIGHT_LUNG"]);
    }

    #[test]
    fn task_outside_enumeration() {
        let mut doc = complete();
        doc["task"] = json!("detection");
        let found = issues(&doc);
        assert_eq!(found.len(), 1);
        assert_eq!((found[0].path.as_str(), found[0].severity), ("$.task", Severity::Error));
    }

    #[test]
    fn misspelled_class_cites_hint() {
        let mut doc = complete();
        doc["outputs"][0]["classes"][0] = json!("LEFT_LUNGG");
        let found = issues(&doc);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].path, "$.outputs[0].classes[0]");
        assert!(found[0].message.contains("LEFT_LUNG?"), "{}", found[0].message);
        doc["outputs"][0]["classes"][0] = json!("LEFT_LUNG+TUMOR");
        assert_eq!(issues(&doc), []);
    }

    #[test]
    fn structure_errors_and_warnings() {
        let mut doc = complete();
        doc.as_object_mut().unwrap().remove("license");
        doc["inputs"][0]["contrast"] = json!("yes");
        doc["refs"]["paper_url"] = json!("doi:10.1/xyz");
        doc["summary"]["intended_use"] = json!("<intended use>");
        doc["extra"] = json!(1);
        doc["outputs"][0]["classes"] = json!([]);
        let found: Vec<(String, Severity)> = issues(&doc).into_iter().map(|i| (i.path, i.severity)).collect();
        let expected = [
            ("$.extra", Severity::Warning),
            ("$.inputs[0].contrast", Severity::Error),
            ("$.license", Severity::Error),
            ("$.outputs", Severity::Error),
            ("$.refs.paper_url", Severity::Warning),
            ("$.summary.intended_use", Severity::Warning),
        ];
        let expected: Vec<(String, Severity)> = expected.iter().map(|(p, s)| (p.to_string(), *s)).collect();
        assert_eq!(found, expected);
    }

    #[test]
    fn non_json_is_parse_error() {
        assert!(matches!(validate_meta_str("{nope", &Registry::bundled()), Err(MetaError::Parse(_))));
        let found = validate_meta_str("[]", &Registry::bundled()).unwrap();
        assert!(has_errors(&found));
    }

    #[test]
    fn schema_agrees_with_validator() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        fn compare(schema: &Value, fields: &[Field], at: &str) {
            let props = schema["properties"].as_object().unwrap();
            let keys: Vec<&str> = fields.iter().map(|f| f.key).collect();
            let mut schema_keys: Vec<&str> = props.keys().map(String::as_str).collect();
            schema_keys.sort();
            let mut sorted = keys.clone();
            sorted.sort();
            assert_eq!(schema_keys, sorted, "{at}");
            let required: Vec<&str> =
                schema["required"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
            let ours: Vec<&str> = fields.iter().filter(|f| f.required).map(|f| f.key).collect();
            assert_eq!(required, ours, "{at}");
            for f in fields {
                match f.kind {
                    Kind::Object(sub) => compare(&props[f.key], sub, f.key),
                    Kind::Items(sub) => compare(&props[f.key]["items"], sub, f.key),
                    _ => {}
                }
            }
        }
        compare(&schema, DOCUMENT, "$");
        let tasks: Vec<&str> =
            schema["properties"]["task"]["enum"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert_eq!(tasks, TASKS);
    }
}
