//! Semantic descriptors, queries and the per-run file graph.
//!
//! A descriptor annotates a file with a type and ordered `key=value`
//! attributes (`nifti:mod=seg:roi=LEFT_LUNG`). A query uses the same
//! syntax, plus `|` alternation, `*` existence checks, the `any` file type
//! and `{name}` placeholders that are bound from module configuration.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder bindings, usually the resolved configuration of a module.
pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("syntax error at position {position} in `{text}`: {reason}")]
    Syntax {
        text: String,
        position: usize,
        reason: String,
    },
    #[error("placeholder `{{{0}}}` has no binding")]
    UnboundPlaceholder(String),
    #[error("output path {} is already registered by `{owner}`", path.display())]
    PathCollision { path: PathBuf, owner: String },
    #[error("`{0}` is not a bare file name")]
    InvalidBasename(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("instance `{0}` already exists")]
    DuplicateInstance(String),
    #[error("invalid instance id `{0}`")]
    InvalidInstanceId(String),
    #[error("io error at {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

fn syntax(text: &str, position: usize, reason: impl Into<String>) -> SemanticError {
    SemanticError::Syntax {
        text: text.to_string(),
        position,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FileType {
    Dicom,
    Nifti,
    Mha,
    Json,
    Csv,
    Yaml,
    Tiff,
    Png,
    Txt,
    Unknown,
}

impl FileType {
    pub const ALL: [FileType; 10] = [
        FileType::Dicom,
        FileType::Nifti,
        FileType::Mha,
        FileType::Json,
        FileType::Csv,
        FileType::Yaml,
        FileType::Tiff,
        FileType::Png,
        FileType::Txt,
        FileType::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FileType::Dicom => "DICOM",
            FileType::Nifti => "NIFTI",
            FileType::Mha => "MHA",
            FileType::Json => "JSON",
            FileType::Csv => "CSV",
            FileType::Yaml => "YAML",
            FileType::Tiff => "TIFF",
            FileType::Png => "PNG",
            FileType::Txt => "TXT",
            FileType::Unknown => "UNKNOWN",
        }
    }

    /// Case-insensitive token lookup. Unrecognized tokens yield `None`.
    pub fn from_token(token: &str) -> Option<FileType> {
        let upper = token.to_ascii_uppercase();
        FileType::ALL.into_iter().find(|t| t.as_str() == upper)
    }
}

impl fmt::Display for FileType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A file type plus ordered descriptive attributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticType {
    pub file_type: FileType,
    pub attributes: IndexMap<String, String>,
}

impl SemanticType {
    pub fn new(file_type: FileType) -> Self {
        SemanticType {
            file_type,
            attributes: IndexMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.attributes.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_type.as_str())?;
        for (k, v) in &self.attributes {
            write!(f, ":{k}={v}")?;
        }
        Ok(())
    }
}

impl Serialize for SemanticType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SemanticType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_descriptor(&text).map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for SemanticType {
    type Err = SemanticError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_descriptor(s)
    }
}

/// One piece of a query value: literal text or a `{name}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValuePart {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValuePattern(pub Vec<ValuePart>);

impl ValuePattern {
    pub fn literal(s: &str) -> Self {
        ValuePattern(vec![ValuePart::Literal(s.to_string())])
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter_map(|p| match p {
            ValuePart::Placeholder(n) => Some(n.as_str()),
            ValuePart::Literal(_) => None,
        })
    }

    pub fn bind(&self, bindings: &Bindings) -> Result<String, SemanticError> {
        let mut out = String::new();
        for part in &self.0 {
            match part {
                ValuePart::Literal(s) => out.push_str(s),
                ValuePart::Placeholder(n) => out.push_str(
                    bindings
                        .get(n)
                        .ok_or_else(|| SemanticError::UnboundPlaceholder(n.clone()))?,
                ),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for ValuePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for part in &self.0 {
            match part {
                ValuePart::Literal(s) => f.write_str(s)?,
                ValuePart::Placeholder(n) => write!(f, "{{{n}}}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TermOp {
    EqualsAny(Vec<ValuePattern>),
    Exists,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTerm {
    pub key: String,
    pub op: TermOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticQuery {
    /// `None` is the `any` file type.
    pub file_type: Option<FileType>,
    pub terms: Vec<QueryTerm>,
}

impl SemanticQuery {
    pub fn placeholders(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for term in &self.terms {
            if let TermOp::EqualsAny(values) = &term.op {
                for v in values {
                    out.extend(v.placeholders());
                }
            }
        }
        out
    }

    pub fn matches(&self, t: &SemanticType, bindings: &Bindings) -> Result<bool, SemanticError> {
        query_matches(self, t, bindings)
    }
}

impl fmt::Display for SemanticQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.file_type {
            Some(t) => f.write_str(t.as_str())?,
            None => f.write_str("ANY")?,
        }
        for term in &self.terms {
            write!(f, ":{}=", term.key)?;
            match &term.op {
                TermOp::Exists => f.write_str("*")?,
                TermOp::EqualsAny(values) => {
                    for (i, v) in values.iter().enumerate() {
                        if i > 0 {
                            f.write_str("|")?;
                        }
                        write!(f, "{v}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for SemanticQuery {
    type Err = SemanticError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_query(s)
    }
}

impl Serialize for SemanticQuery {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SemanticQuery {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_query(&text).map_err(serde::de::Error::custom)
    }
}

/// Splits `text` on `:` and yields `(offset, segment)` pairs.
fn segments(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == ':' {
            out.push((start, &text[start..i]));
            start = i + 1;
        }
    }
    out.push((start, &text[start..]));
    out
}

fn parse_file_type(text: &str, token: &str, allow_any: bool) -> Result<Option<FileType>, SemanticError> {
    if token.is_empty() {
        return Err(syntax(text, 0, "missing file type"));
    }
    if allow_any && token.eq_ignore_ascii_case("any") {
        return Ok(None);
    }
    if !token.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(syntax(text, 0, format!("invalid file type `{token}`")));
    }
    match FileType::from_token(token) {
        Some(t) => Ok(Some(t)),
        None => {
            log::warn!("unknown file type `{token}` in `{text}`, using UNKNOWN");
            Ok(Some(FileType::Unknown))
        }
    }
}

fn parse_key(text: &str, offset: usize, raw: &str) -> Result<String, SemanticError> {
    if raw.is_empty() {
        return Err(syntax(text, offset, "empty key"));
    }
    let key = raw.to_ascii_lowercase();
    let mut chars = key.chars();
    let first_ok = chars.next().is_some_and(|c| c.is_ascii_lowercase());
    if !first_ok || !chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
        return Err(syntax(text, offset, format!("invalid key `{raw}`")));
    }
    Ok(key)
}

/// Splits a `key=value` segment, rejecting a missing `=`.
fn split_pair<'a>(text: &str, offset: usize, seg: &'a str) -> Result<(&'a str, &'a str, usize), SemanticError> {
    match seg.find('=') {
        Some(eq) => Ok((&seg[..eq], &seg[eq + 1..], offset + eq + 1)),
        None => Err(syntax(text, offset, format!("expected key=value, found `{seg}`"))),
    }
}

/// Parses a descriptor of the form `FTYPE(:key=value)*`.
pub fn parse_descriptor(text: &str) -> Result<SemanticType, SemanticError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(syntax(text, 0, "empty descriptor"));
    }
    let segs = segments(trimmed);
    let file_type = parse_file_type(trimmed, segs[0].1, false)?.unwrap_or(FileType::Unknown);
    let mut attributes = IndexMap::new();
    for &(offset, seg) in &segs[1..] {
        let (raw_key, value, value_offset) = split_pair(trimmed, offset, seg)?;
        let key = parse_key(trimmed, offset, raw_key)?;
        if value.is_empty() {
            return Err(syntax(trimmed, value_offset, format!("empty value for `{key}`")));
        }
        if value.contains('=') {
            return Err(syntax(trimmed, value_offset, "`=` is not allowed in values"));
        }
        if attributes.insert(key.clone(), value.to_string()).is_some() {
            return Err(syntax(trimmed, offset, format!("duplicate key `{key}`")));
        }
    }
    Ok(SemanticType {
        file_type,
        attributes,
    })
}

fn is_placeholder_name(name: &str) -> bool {
    let mut chars = name.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_value_pattern(text: &str, offset: usize, raw: &str) -> Result<ValuePattern, SemanticError> {
    if raw.is_empty() {
        return Err(syntax(text, offset, "empty value"));
    }
    let mut parts = Vec::new();
    let mut literal = String::new();
    let mut rest = raw;
    let mut pos = offset;
    while let Some(c) = rest.chars().next() {
        match c {
            '{' => {
                let close = rest
                    .find('}')
                    .ok_or_else(|| syntax(text, pos, "unterminated placeholder"))?;
                let name = &rest[1..close];
                if !is_placeholder_name(name) {
                    return Err(syntax(text, pos, format!("invalid placeholder `{name}`")));
                }
                if !literal.is_empty() {
                    parts.push(ValuePart::Literal(std::mem::take(&mut literal)));
                }
                parts.push(ValuePart::Placeholder(name.to_string()));
                rest = &rest[close + 1..];
                pos += close + 1;
            }
            '}' => return Err(syntax(text, pos, "unbalanced `}`")),
            '=' | '*' => return Err(syntax(text, pos, format!("unexpected `{c}` in value"))),
            _ => {
                literal.push(c);
                rest = &rest[c.len_utf8()..];
                pos += c.len_utf8();
            }
        }
    }
    if !literal.is_empty() {
        parts.push(ValuePart::Literal(literal));
    }
    Ok(ValuePattern(parts))
}

/// Parses a query: descriptor syntax plus `|`, `*`, `any` and `{name}`.
pub fn parse_query(text: &str) -> Result<SemanticQuery, SemanticError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(syntax(text, 0, "empty query"));
    }
    let segs = segments(trimmed);
    let file_type = parse_file_type(trimmed, segs[0].1, true)?;
    let mut terms: Vec<QueryTerm> = Vec::new();
    for &(offset, seg) in &segs[1..] {
        let (raw_key, value, value_offset) = split_pair(trimmed, offset, seg)?;
        let key = parse_key(trimmed, offset, raw_key)?;
        if terms.iter().any(|t| t.key == key) {
            return Err(syntax(trimmed, offset, format!("duplicate key `{key}`")));
        }
        let op = if value == "*" {
            TermOp::Exists
        } else {
            let mut alternatives = Vec::new();
            let mut alt_offset = value_offset;
            for alt in value.split('|') {
                alternatives.push(parse_value_pattern(trimmed, alt_offset, alt)?);
                alt_offset += alt.len() + 1;
            }
            TermOp::EqualsAny(alternatives)
        };
        terms.push(QueryTerm { key, op });
    }
    Ok(SemanticQuery { file_type, terms })
}

/// Tests a type against a query. Extra attributes on `t` never cause a
/// mismatch; every placeholder must be bound.
pub fn query_matches(q: &SemanticQuery, t: &SemanticType, bindings: &Bindings) -> Result<bool, SemanticError> {
    // Bind first so an unbound placeholder is reported even when the type
    // check alone would already reject.
    let mut bound = Vec::with_capacity(q.terms.len());
    for term in &q.terms {
        let values = match &term.op {
            TermOp::Exists => None,
            TermOp::EqualsAny(values) => Some(
                values
                    .iter()
                    .map(|v| v.bind(bindings))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        bound.push((term.key.as_str(), values));
    }
    if let Some(ft) = q.file_type {
        if ft != t.file_type {
            return Ok(false);
        }
    }
    Ok(bound.iter().all(|(key, values)| match (t.get(key), values) {
        (None, _) => false,
        (Some(_), None) => true,
        (Some(actual), Some(allowed)) => allowed.iter().any(|v| v == actual),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataHandle {
    pub path: PathBuf,
    pub semantic_type: SemanticType,
    pub producer: String,
    pub confirmed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceStatus {
    Active,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub attributes: BTreeMap<String, String>,
    handles: Vec<DataHandle>,
    pub status: InstanceStatus,
}

impl Instance {
    pub fn new(id: &str) -> Self {
        Instance {
            id: id.to_string(),
            attributes: BTreeMap::new(),
            handles: Vec::new(),
            status: InstanceStatus::Active,
        }
    }

    pub fn handles(&self) -> &[DataHandle] {
        &self.handles
    }

    /// Attribute lookup with the implicit `id` attribute.
    pub fn attribute(&self, key: &str) -> Option<&str> {
        if key == "id" {
            return Some(&self.id);
        }
        self.attributes.get(key).map(String::as_str)
    }

    pub fn is_active(&self) -> bool {
        self.status == InstanceStatus::Active
    }

    /// Placeholder bindings: every attribute plus `id`.
    pub fn bindings(&self) -> Bindings {
        let mut b = self.attributes.clone();
        b.insert("id".to_string(), self.id.clone());
        b
    }
}

/// All confirmed handles of `inst` whose type matches `q`, in registration order.
pub fn resolve_inputs(inst: &Instance, q: &SemanticQuery, bindings: &Bindings) -> Result<Vec<DataHandle>, SemanticError> {
    let mut out = Vec::new();
    for h in inst.handles.iter().filter(|h| h.confirmed) {
        if query_matches(q, &h.semantic_type, bindings)? {
            out.push(h.clone());
        }
    }
    Ok(out)
}

fn valid_path_component(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\', '\0'])
}

/// The per-run graph of instances and their data handles.
#[derive(Debug)]
pub struct RunGraph {
    workdir: PathBuf,
    instances: Vec<Instance>,
    index: HashMap<String, usize>,
    registered: HashMap<PathBuf, (usize, usize)>,
}

impl RunGraph {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        RunGraph {
            workdir: workdir.into(),
            instances: Vec::new(),
            index: HashMap::new(),
            registered: HashMap::new(),
        }
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn active_ids(&self) -> Vec<String> {
        self.instances
            .iter()
            .filter(|i| i.is_active())
            .map(|i| i.id.clone())
            .collect()
    }

    pub fn instance(&self, id: &str) -> Result<&Instance, SemanticError> {
        self.index
            .get(id)
            .map(|&i| &self.instances[i])
            .ok_or_else(|| SemanticError::UnknownInstance(id.to_string()))
    }

    fn position(&self, id: &str) -> Result<usize, SemanticError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| SemanticError::UnknownInstance(id.to_string()))
    }

    pub fn add_instance(&mut self, id: &str, attributes: BTreeMap<String, String>) -> Result<&Instance, SemanticError> {
        if !valid_path_component(id) {
            return Err(SemanticError::InvalidInstanceId(id.to_string()));
        }
        if self.index.contains_key(id) {
            return Err(SemanticError::DuplicateInstance(id.to_string()));
        }
        let mut inst = Instance::new(id);
        inst.attributes = attributes;
        self.index.insert(id.to_string(), self.instances.len());
        self.instances.push(inst);
        Ok(self.instances.last().expect("just pushed"))
    }

    pub fn set_status(&mut self, id: &str, status: InstanceStatus) -> Result<(), SemanticError> {
        let i = self.position(id)?;
        self.instances[i].status = status;
        Ok(())
    }

    /// Adds an existing file (for example an imported input) as a confirmed handle.
    pub fn add_existing(
        &mut self,
        id: &str,
        path: &Path,
        semantic_type: SemanticType,
        producer: &str,
    ) -> Result<DataHandle, SemanticError> {
        let i = self.position(id)?;
        if let Some(&(owner_inst, owner_handle)) = self.registered.get(path) {
            let owner = &self.instances[owner_inst].handles[owner_handle];
            return Err(SemanticError::PathCollision {
                path: path.to_path_buf(),
                owner: owner.producer.clone(),
            });
        }
        let handle = DataHandle {
            path: path.to_path_buf(),
            semantic_type,
            producer: producer.to_string(),
            confirmed: path.exists(),
        };
        self.registered
            .insert(path.to_path_buf(), (i, self.instances[i].handles.len()));
        self.instances[i].handles.push(handle.clone());
        Ok(handle)
    }

    /// Directory where `producer` writes files for instance `id`.
    pub fn producer_dir(&self, id: &str, producer: &str) -> PathBuf {
        self.workdir.join(id).join(producer)
    }

    /// Allocates `<workdir>/<instance>/<producer>/<basename>` for a declared
    /// output. Re-registration by the same producer returns the same handle.
    pub fn register_output(
        &mut self,
        id: &str,
        descriptor: &SemanticType,
        basename: &str,
        producer: &str,
    ) -> Result<DataHandle, SemanticError> {
        if !valid_path_component(basename) {
            return Err(SemanticError::InvalidBasename(basename.to_string()));
        }
        if !valid_path_component(producer) {
            return Err(SemanticError::InvalidBasename(producer.to_string()));
        }
        let i = self.position(id)?;
        let dir = self.producer_dir(id, producer);
        let path = dir.join(basename);
        if let Some(&(owner_inst, owner_handle)) = self.registered.get(&path) {
            let existing = &self.instances[owner_inst].handles[owner_handle];
            if owner_inst == i && existing.producer == producer {
                return Ok(existing.clone());
            }
            return Err(SemanticError::PathCollision {
                path,
                owner: existing.producer.clone(),
            });
        }
        std::fs::create_dir_all(&dir).map_err(|e| SemanticError::Io {
            path: dir.clone(),
            message: e.to_string(),
        })?;
        let handle = DataHandle {
            path: path.clone(),
            semantic_type: descriptor.clone(),
            producer: producer.to_string(),
            confirmed: false,
        };
        self.registered
            .insert(path, (i, self.instances[i].handles.len()));
        self.instances[i].handles.push(handle.clone());
        Ok(handle)
    }

    /// Marks a registered output as written. Returns whether the file exists.
    pub fn confirm(&mut self, path: &Path) -> bool {
        let Some(&(i, h)) = self.registered.get(path) else {
            return false;
        };
        let exists = path.exists();
        self.instances[i].handles[h].confirmed = exists;
        exists
    }

    pub fn resolve(&self, id: &str, q: &SemanticQuery, bindings: &Bindings) -> Result<Vec<DataHandle>, SemanticError> {
        resolve_inputs(self.instance(id)?, q, bindings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> SemanticType {
        parse_descriptor(s).unwrap()
    }

    fn q(s: &str) -> SemanticQuery {
        parse_query(s).unwrap()
    }

    fn no_bindings() -> Bindings {
        Bindings::new()
    }

    #[test]
    fn descriptor_examples() {
        assert_eq!(t("nifti:mod=ct"), SemanticType::new(FileType::Nifti).with("mod", "ct"));
        assert_eq!(t("dicom"), SemanticType::new(FileType::Dicom));
        let lungs = t("nifti:mod=seg:roi=LEFT_LUNG,RIGHT_LUNG");
        assert_eq!(lungs.get("roi"), Some("LEFT_LUNG,RIGHT_LUNG"));
        assert_eq!(t(&lungs.to_string()), lungs);
    }

    #[test]
    fn descriptor_normalizes_case() {
        let d = t("Nifti:MOD=ct");
        assert_eq!(d.file_type, FileType::Nifti);
        assert_eq!(d.to_string(), "NIFTI:mod=ct");
    }

    #[test]
    fn descriptor_attribute_order_preserved() {
        let d = t("json:zeta=1:alpha=2");
        let keys: Vec<_> = d.attributes.keys().cloned().collect();
        assert_eq!(keys, ["zeta", "alpha"]);
    }

    #[test]
    fn descriptor_unknown_file_type_is_tolerated() {
        assert_eq!(t("nrrd:mod=ct").file_type, FileType::Unknown);
    }

    #[test]
    fn descriptor_errors() {
        for bad in ["", "nifti:mod", "nifti:=ct", "nifti:mod=", "nifti:1x=a", "nifti:mod=a:mod=b", "nifti:a=b=c"] {
            assert!(
                matches!(parse_descriptor(bad), Err(SemanticError::Syntax { .. })),
                "{bad:?} should fail"
            );
        }
        match parse_descriptor("nifti:mod=ct:=x") {
            Err(SemanticError::Syntax { position, .. }) => assert_eq!(position, 13),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn query_examples() {
        let alt = q("nifti:mod=ct|mr");
        assert_eq!(alt.file_type, Some(FileType::Nifti));
        assert_eq!(
            alt.terms,
            vec![QueryTerm {
                key: "mod".into(),
                op: TermOp::EqualsAny(vec![ValuePattern::literal("ct"), ValuePattern::literal("mr")]),
            }]
        );
        let any = q("any:roi=*");
        assert_eq!(any.file_type, None);
        assert_eq!(any.terms[0].op, TermOp::Exists);
        let ph = q("nifti:mod={target_mod}");
        assert_eq!(ph.placeholders(), vec!["target_mod"]);
        let mut b = Bindings::new();
        b.insert("target_mod".into(), "ct".into());
        assert!(query_matches(&ph, &t("nifti:mod=ct"), &b).unwrap());
    }

    #[test]
    fn query_display_round_trips() {
        for s in ["NIFTI:mod=ct|mr", "ANY:roi=*", "NIFTI:mod=pre_{m}_x:roi=A|B"] {
            assert_eq!(q(s).to_string(), s);
            assert_eq!(q(&q(s).to_string()), q(s));
        }
    }

    #[test]
    fn query_errors() {
        for bad in ["", "nifti:mod=ct|", "nifti:mod={", "nifti:mod={1x}", "nifti:mod=a}", "nifti:mod=c*t"] {
            assert!(parse_query(bad).is_err(), "{bad:?} should fail");
        }
    }

    #[test]
    fn matching_examples() {
        let b = no_bindings();
        assert!(query_matches(&q("nifti:mod=ct"), &t("nifti:mod=ct:origin=dicom"), &b).unwrap());
        assert!(!query_matches(&q("nifti:mod=ct"), &t("nifti"), &b).unwrap());
        let alt = q("any:mod=ct|mr");
        for ft in ["nifti", "mha"] {
            for m in ["ct", "mr"] {
                assert!(query_matches(&alt, &t(&format!("{ft}:mod={m}")), &b).unwrap());
            }
        }
        assert!(!query_matches(&q("mha:mod=ct"), &t("nifti:mod=ct"), &b).unwrap());
        assert!(query_matches(&q("any"), &t("txt"), &b).unwrap());
    }

    #[test]
    fn unbound_placeholder_is_an_error() {
        let err = query_matches(&q("nifti:mod={m}"), &t("dicom"), &no_bindings()).unwrap_err();
        assert_eq!(err, SemanticError::UnboundPlaceholder("m".into()));
    }

    fn graph_with_handles(dir: &Path) -> (RunGraph, Vec<DataHandle>) {
        let mut g = RunGraph::new(dir);
        g.add_instance("1.2.3", BTreeMap::new()).unwrap();
        let mut hs = Vec::new();
        for (d, name, producer) in [
            ("nifti:mod=ct", "a.nii.gz", "Conv"),
            ("nifti:mod=seg", "b.nii.gz", "Runner"),
            ("nifti:mod=ct:origin=x", "c.nii.gz", "Other"),
        ] {
            let h = g.register_output("1.2.3", &t(d), name, producer).unwrap();
            std::fs::write(&h.path, b"x").unwrap();
            assert!(g.confirm(&h.path));
            hs.push(h);
        }
        (g, hs)
    }

    #[test]
    fn resolve_filters_in_registration_order() {
        let dir = tempfile::tempdir().unwrap();
        let (g, hs) = graph_with_handles(dir.path());
        let b = no_bindings();
        let got = g.resolve("1.2.3", &q("nifti:mod=ct"), &b).unwrap();
        assert_eq!(got, vec![hs[0].clone().confirmed_copy(), hs[2].clone().confirmed_copy()]);
        assert!(g.resolve("1.2.3", &q("nifti:mod=mr"), &b).unwrap().is_empty());
    }

    impl DataHandle {
        fn confirmed_copy(mut self) -> Self {
            self.confirmed = true;
            self
        }
    }

    #[test]
    fn unconfirmed_handles_are_invisible() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = RunGraph::new(dir.path());
        g.add_instance("a", BTreeMap::new()).unwrap();
        g.register_output("a", &t("nifti:mod=ct"), "x.nii", "P").unwrap();
        assert!(g.resolve("a", &q("nifti"), &no_bindings()).unwrap().is_empty());
    }

    #[test]
    fn register_output_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = RunGraph::new(dir.path());
        g.add_instance("1.2.3", BTreeMap::new()).unwrap();
        let d = t("nifti:mod=seg");
        let h = g.register_output("1.2.3", &d, "seg.nii.gz", "ThresholdRunner").unwrap();
        assert_eq!(h.path, dir.path().join("1.2.3/ThresholdRunner/seg.nii.gz"));
        assert!(!h.confirmed);
        assert!(h.path.parent().unwrap().is_dir());
        let again = g.register_output("1.2.3", &d, "seg.nii.gz", "ThresholdRunner").unwrap();
        assert_eq!(again, h);
        assert_eq!(g.instance("1.2.3").unwrap().handles().len(), 1);
        let other = g.register_output("1.2.3", &d, "seg.nii.gz", "OtherRunner").unwrap();
        assert_ne!(other.path, h.path);
    }

    #[test]
    fn register_output_rejects_bad_basenames_and_collisions() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = RunGraph::new(dir.path());
        g.add_instance("a", BTreeMap::new()).unwrap();
        let d = t("txt");
        for bad in ["", "..", "a/b", "."] {
            assert!(matches!(
                g.register_output("a", &d, bad, "P"),
                Err(SemanticError::InvalidBasename(_))
            ));
        }
        let path = dir.path().join("a/P/out.txt");
        g.add_existing("a", &path, d.clone(), "Importer").unwrap();
        assert!(matches!(
            g.register_output("a", &d, "out.txt", "P"),
            Err(SemanticError::PathCollision { .. })
        ));
    }

    #[test]
    fn instance_ids_are_unique_and_path_safe() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = RunGraph::new(dir.path());
        g.add_instance("x", BTreeMap::new()).unwrap();
        assert!(matches!(g.add_instance("x", BTreeMap::new()), Err(SemanticError::DuplicateInstance(_))));
        assert!(matches!(g.add_instance("../y", BTreeMap::new()), Err(SemanticError::InvalidInstanceId(_))));
    }
}
