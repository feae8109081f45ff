use std::fs;
use std::path::Path;

use log::{info, warn};
use serde_json::Value;
use walkdir::WalkDir;

use super::{descriptor, is_contained, placeholder_names, substitute};
use crate::segdb::Registry;
use crate::semantic::{parse_query, SemanticQuery};
use crate::workflow::{
    Category, Module, ModuleDescriptor, ModuleError, Outcome, ParamSpec, ParamType, Params, RunContext, Scope,
};

/// Copies matched data into the output directory.
pub struct DataOrganizer {
    desc: ModuleDescriptor,
}

impl DataOrganizer {
    pub fn new() -> Self {
        DataOrganizer {
            desc: descriptor(
                "DataOrganizer",
                Category::Organizer,
                Scope::PerInstance,
                "Copies files matching each rule's query to a path pattern below the output directory.",
                vec![
                    ParamSpec::new(
                        "targets",
                        ParamType::List,
                        Value::Array(vec![]),
                        "`query -> pattern` strings or {query, path} maps; patterns use {attribute}, {id}, {basename}",
                    ),
                    ParamSpec::new("overwrite", ParamType::Bool, Value::Bool(false), "replace existing files"),
                ],
                &[],
                &[],
            ),
        }
    }
}

impl Default for DataOrganizer {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Rule {
    pub query: SemanticQuery,
    pub pattern: String,
}

pub(crate) fn parse_rules(values: &[Value]) -> Result<Vec<Rule>, String> {
    let mut rules = Vec::new();
    for v in values {
        let (query, pattern) = match v {
            Value::String(s) => {
                let (q, p) = s.split_once("->").ok_or_else(|| format!("`{s}` is not `query -> pattern`"))?;
                (q.trim().to_string(), p.trim().to_string())
            }
            Value::Object(m) => {
                let get = |k: &str| m.get(k).and_then(Value::as_str).map(str::to_string);
                (get("query").ok_or("target needs `query`")?, get("path").ok_or("target needs `path`")?)
            }
            other => return Err(format!("unsupported target {other}")),
        };
        let query = parse_query(&query).map_err(|e| e.to_string())?;
        if !is_contained(&pattern) {
            return Err(format!("target `{pattern}` must be a relative path without `..`"));
        }
        if placeholder_names(&pattern).iter().any(|n| n.is_empty()) {
            return Err(format!("target `{pattern}` has an empty placeholder"));
        }
        rules.push(Rule { query, pattern });
    }
    Ok(rules)
}

fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    if src.is_dir() {
        for entry in WalkDir::new(src).follow_links(true).sort_by_file_name() {
            let entry = entry?;
            let rel = entry.path().strip_prefix(src).expect("walk stays below root");
            let target = dst.join(rel);
            if entry.file_type().is_dir() {
                fs::create_dir_all(&target)?;
            } else {
                fs::copy(entry.path(), &target)?;
            }
        }
        Ok(())
    } else {
        fs::copy(src, dst).map(|_| ())
    }
}

impl Module for DataOrganizer {
    fn descriptor(&self) -> &ModuleDescriptor {
        &self.desc
    }

    fn check_config(&self, params: &Params, _segdb: &Registry) -> Result<(), String> {
        if parse_rules(params.list("targets"))?.is_empty() {
            return Err("targets must list at least one rule".into());
        }
        Ok(())
    }

    fn run_instance(&self, ctx: &mut RunContext, id: &str, params: &Params) -> Result<Outcome, ModuleError> {
        let rules = parse_rules(params.list("targets")).map_err(ModuleError::Config)?;
        let overwrite = params.bool("overwrite").unwrap_or(false);
        let inst = ctx.graph.instance(id)?;
        let bindings = inst.bindings();
        let mut jobs = Vec::new();
        for rule in &rules {
            for handle in ctx.graph.resolve(id, &rule.query, &bindings)? {
                let basename = handle.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let rel = substitute(&rule.pattern, |name| {
                    if name == "basename" {
                        Some(basename.clone())
                    } else {
                        inst.attribute(name).map(str::to_string)
                    }
                })
                .map_err(ModuleError::UnresolvablePlaceholder)?;
                if !is_contained(&rel) {
                    return Err(ModuleError::Config(format!("target `{rel}` leaves the output directory")));
                }
                jobs.push((handle.path.clone(), ctx.output_dir.join(rel)));
            }
        }
        for (src, dst) in jobs {
            if dst.exists() && !overwrite {
                warn!("{id}: {} exists, not overwriting", dst.display());
                continue;
            }
            if dst.is_dir() {
                fs::remove_dir_all(&dst).map_err(|e| ModuleError::io(&dst, e))?;
            }
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| ModuleError::io(parent, e))?;
            }
            copy_tree(&src, &dst).map_err(|e| ModuleError::io(&dst, e))?;
            info!("{id}: {} -> {}", src.display(), dst.display());
        }
        Ok(Outcome::Done)
    }
}
