//! The built-in module toolbox and declarative command modules.

mod command;
mod filter;
mod importers;
mod organizer;
mod report;
mod threshold;

use std::path::{Component, Path};
use std::sync::Arc;

pub use command::{CommandModule, CommandSpec};
pub use filter::InstanceFilter;
pub use importers::{DicomImporter, FileImporter};
pub use organizer::DataOrganizer;
pub use report::ReportExporter;
pub use threshold::{threshold_mask, ThresholdRunner};

use crate::semantic::{parse_descriptor, parse_query, DataHandle, RunGraph, SemanticQuery, SemanticType};
use crate::workflow::{Category, Module, ModuleDescriptor, ModuleError, ParamSpec, Scope};

pub fn builtin() -> Vec<Arc<dyn Module>> {
    vec![
        Arc::new(DicomImporter::new()),
        Arc::new(FileImporter::new()),
        Arc::new(InstanceFilter::new()),
        Arc::new(ThresholdRunner::new()),
        Arc::new(ReportExporter::new()),
        Arc::new(DataOrganizer::new()),
    ]
}

fn descriptor(
    name: &str,
    category: Category,
    scope: Scope,
    description: &str,
    params: Vec<ParamSpec>,
    inputs: &[&str],
    outputs: &[&str],
) -> ModuleDescriptor {
    ModuleDescriptor {
        name: name.into(),
        category,
        scope,
        description: description.into(),
        params,
        inputs: inputs.iter().map(|q| parse_query(q).expect("static query")).collect(),
        outputs: outputs.iter().map(|d| parse_descriptor(d).expect("static descriptor")).collect(),
    }
}

/// The one confirmed handle matching `query` for instance `id`.
fn single_input(graph: &RunGraph, id: &str, query: &SemanticQuery) -> Result<DataHandle, ModuleError> {
    let inst = graph.instance(id)?;
    let mut found = graph.resolve(id, query, &inst.bindings())?;
    match found.len() {
        0 => Err(ModuleError::MissingInput(query.to_string())),
        1 => Ok(found.remove(0)),
        count => Err(ModuleError::AmbiguousInput { query: query.to_string(), count }),
    }
}

/// Registers, writes and confirms an output file.
fn write_output(
    graph: &mut RunGraph,
    id: &str,
    producer: &str,
    descriptor: &SemanticType,
    basename: &str,
    bytes: &[u8],
) -> Result<DataHandle, ModuleError> {
    let handle = graph.register_output(id, descriptor, basename, producer)?;
    std::fs::write(&handle.path, bytes).map_err(|e| ModuleError::io(&handle.path, e))?;
    graph.confirm(&handle.path);
    Ok(handle)
}

/// True for relative paths that stay below their base directory.
fn is_contained(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

/// Replaces `{name}` placeholders through `lookup`; returns the first
/// unresolved name on failure.
fn substitute(pattern: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| after.to_string())?;
        let name = &after[..close];
        out.push_str(&lookup(name).ok_or_else(|| name.to_string())?);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn placeholder_names(pattern: &str) -> Vec<&str> {
    let mut names = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else { break };
        names.push(&after[..close]);
        rest = &after[close + 1..];
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution() {
        let lookup = |k: &str| (k == "id").then(|| "s1".to_string());
        assert_eq!(substitute("{id}/seg.nii.gz", lookup), Ok("s1/seg.nii.gz".into()));
        assert_eq!(substitute("{nope}/x", lookup), Err("nope".into()));
        assert_eq!(substitute("plain", lookup), Ok("plain".into()));
        assert_eq!(placeholder_names("{a}/{b}.x"), ["a", "b"]);
    }

    #[test]
    fn containment() {
        assert!(is_contained("a/b.nii.gz"));
        assert!(is_contained("./a"));
        assert!(!is_contained("../a"));
        assert!(!is_contained("a/../../b"));
        assert!(!is_contained("/abs"));
        assert!(!is_contained(""));
    }
}
