//! Segment registry: identifiers, display colors and category codes.
//!
//! Findings (tumors, cysts, ...) are annotated relative to a containing
//! structure with the composite form `CONTEXT+FINDING`, e.g.
//! `LEFT_LUNG+TUMOR`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED: &str = include_str!("../data/segdb.csv");

/// Maximum edit distance for "did you mean" hints.
const HINT_DISTANCE: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegDbError {
    #[error("unknown segment id `{id}`{}", hint_suffix(.hints))]
    UnknownSegmentId { id: String, hints: Vec<String> },
    #[error("`{0}` is not a composite annotation of the form CONTEXT+FINDING")]
    Syntax(String),
    #[error("`{0}` is not a finding and cannot follow `+`")]
    NotAFinding(String),
    #[error("invalid registry at line {line}: {reason}")]
    InvalidRegistry { line: usize, reason: String },
}

fn hint_suffix(hints: &[String]) -> String {
    if hints.is_empty() {
        String::new()
    } else {
        format!(" (did you mean {}?)", hints.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentDef {
    pub id: String,
    pub name: String,
    pub rgb: [u8; 3],
    pub category: String,
    #[serde(rename = "type")]
    pub type_code: String,
    pub modifier: Option<String>,
    pub is_finding: bool,
}

#[derive(Debug, Deserialize)]
struct Row {
    id: String,
    name: String,
    r: u8,
    g: u8,
    b: u8,
    category: String,
    #[serde(rename = "type")]
    type_code: String,
    modifier: Option<String>,
    is_finding: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeAnnotation {
    pub context: SegmentDef,
    pub finding: SegmentDef,
}

impl fmt::Display for CompositeAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.context.id, self.finding.id)
    }
}

fn is_upper_snake(id: &str) -> bool {
    let mut chars = id.chars();
    chars.next().is_some_and(|c| c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

/// Immutable registry keyed by segment id.
#[derive(Debug, Clone)]
pub struct Registry {
    segments: BTreeMap<String, SegmentDef>,
}

impl Registry {
    /// The registry shipped with the crate.
    pub fn bundled() -> Registry {
        Registry::from_csv(BUNDLED).expect("bundled registry is valid")
    }

    pub fn from_csv(text: &str) -> Result<Registry, SegDbError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut segments = BTreeMap::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let invalid = |reason: String| SegDbError::InvalidRegistry { line, reason };
            let row = row.map_err(|e| invalid(e.to_string()))?;
            if !is_upper_snake(&row.id) {
                return Err(invalid(format!("id `{}` is not UPPER_SNAKE", row.id)));
            }
            if row.category.trim().is_empty() || row.type_code.trim().is_empty() {
                return Err(invalid(format!("`{}` needs category and type codes", row.id)));
            }
            let def = SegmentDef {
                id: row.id.clone(),
                name: row.name,
                rgb: [row.r, row.g, row.b],
                category: row.category,
                type_code: row.type_code,
                modifier: row.modifier.filter(|m| !m.is_empty()),
                is_finding: row.is_finding,
            };
            if segments.insert(row.id.clone(), def).is_some() {
                return Err(invalid(format!("duplicate id `{}`", row.id)));
            }
        }
        Ok(Registry { segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SegmentDef> {
        self.segments.values()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.segments.contains_key(id)
    }

    /// Ids within edit distance 2 of `id`, compared case-insensitively.
    pub fn hints(&self, id: &str) -> Vec<String> {
        let wanted = id.to_ascii_uppercase();
        let mut scored: Vec<(usize, &String)> = self
            .segments
            .keys()
            .map(|k| (strsim::levenshtein(&wanted, k), k))
            .filter(|(d, _)| *d <= HINT_DISTANCE)
            .collect();
        scored.sort();
        scored.into_iter().map(|(_, k)| k.clone()).collect()
    }

    /// Exact, case-sensitive lookup.
    pub fn lookup(&self, id: &str) -> Result<&SegmentDef, SegDbError> {
        self.segments.get(id).ok_or_else(|| SegDbError::UnknownSegmentId {
            id: id.to_string(),
            hints: self.hints(id),
        })
    }

    pub fn parse_composite(&self, text: &str) -> Result<CompositeAnnotation, SegDbError> {
        let parts: Vec<&str> = text.trim().split('+').collect();
        let [context, finding] = parts.as_slice() else {
            return Err(SegDbError::Syntax(text.to_string()));
        };
        if context.is_empty() || finding.is_empty() {
            return Err(SegDbError::Syntax(text.to_string()));
        }
        let context = self.lookup(context)?.clone();
        let finding = self.lookup(finding)?.clone();
        if !finding.is_finding {
            return Err(SegDbError::NotAFinding(finding.id));
        }
        Ok(CompositeAnnotation { context, finding })
    }

    /// Resolves either a plain id or a composite annotation.
    pub fn resolve_class(&self, text: &str) -> Result<(), SegDbError> {
        if text.contains('+') {
            self.parse_composite(text).map(|_| ())
        } else {
            self.lookup(text).map(|_| ())
        }
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::bundled()
    }
}
