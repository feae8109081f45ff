use serde_json::Value;

use super::descriptor;
use crate::segdb::Registry;
use crate::semantic::parse_query;
use crate::workflow::{
    Category, Module, ModuleDescriptor, ModuleError, Outcome, ParamSpec, ParamType, Params, RunContext, Scope,
};

/// Drops instances by attribute value or by file availability.
pub struct InstanceFilter {
    desc: ModuleDescriptor,
}

impl InstanceFilter {
    pub fn new() -> Self {
        InstanceFilter {
            desc: descriptor(
                "InstanceFilter",
                Category::Filter,
                Scope::PerInstance,
                "Keeps instances whose attribute `key` is one of `values`, or that have data matching `require`.",
                vec![
                    ParamSpec::new("key", ParamType::Str, Value::Null, "attribute to test"),
                    ParamSpec::new("values", ParamType::List, Value::Null, "accepted attribute values"),
                    ParamSpec::new("require", ParamType::Str, Value::Null, "semantic query that must resolve"),
                ],
                &[],
                &[],
            ),
        }
    }
}

impl Default for InstanceFilter {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

impl Module for InstanceFilter {
    fn descriptor(&self) -> &ModuleDescriptor {
        &self.desc
    }

    fn check_config(&self, params: &Params, _segdb: &Registry) -> Result<(), String> {
        let attribute = params.get("key").is_some() || params.get("values").is_some();
        match (attribute, params.str("require")) {
            (true, Some(_)) => Err("set either key/values or require, not both".into()),
            (false, None) => Err("set key/values or require".into()),
            (false, Some(q)) => parse_query(q).map(|_| ()).map_err(|e| e.to_string()),
            (true, None) => {
                if params.str("key").is_none() {
                    return Err("values given without key".into());
                }
                let values = params.list("values");
                if values.is_empty() {
                    return Err("values must list at least one accepted value".into());
                }
                if values.iter().any(|v| scalar_text(v).is_none()) {
                    return Err("values must be scalars".into());
                }
                Ok(())
            }
        }
    }

    fn run_instance(&self, ctx: &mut RunContext, id: &str, params: &Params) -> Result<Outcome, ModuleError> {
        let inst = ctx.graph.instance(id)?;
        if let Some(q) = params.str("require") {
            let query = parse_query(q)?;
            let found = ctx.graph.resolve(id, &query, &inst.bindings())?;
            return Ok(if found.is_empty() {
                Outcome::Dropped(format!("no data matches `{query}`"))
            } else {
                Outcome::Done
            });
        }
        let key = params.str("key").ok_or_else(|| ModuleError::Config("key is required".into()))?;
        let allowed: Vec<String> = params.list("values").iter().filter_map(scalar_text).collect();
        Ok(match inst.attribute(key) {
            Some(v) if allowed.iter().any(|a| a == v) => Outcome::Done,
            Some(v) => Outcome::Dropped(format!("{key}={v} not in [{}]", allowed.join(", "))),
            None => Outcome::Dropped(format!("no attribute {key}")),
        })
    }
}
