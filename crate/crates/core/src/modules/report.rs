use std::collections::BTreeSet;
use std::fs;

use log::warn;
use serde_json::{Map, Value};

use super::{descriptor, is_contained, write_output};
use crate::segdb::Registry;
use crate::semantic::{FileType, SemanticType};
use crate::workflow::{Category, Module, ModuleDescriptor, ModuleError, ParamSpec, ParamType, Params, RunContext, Scope};

/// Collects instance attributes and published values into reports.
pub struct ReportExporter {
    desc: ModuleDescriptor,
}

impl ReportExporter {
    pub fn new() -> Self {
        ReportExporter {
            desc: descriptor(
                "ReportExporter",
                Category::Exporter,
                Scope::PerRun,
                "Writes a JSON report per instance and an aggregate CSV with one row per instance.",
                vec![
                    ParamSpec::new(
                        "fields",
                        ParamType::List,
                        Value::Array(vec![]),
                        "`label=source` strings or {label, source} maps; a source is an attribute or Producer.key",
                    ),
                    ParamSpec::new("format", ParamType::Str, Value::from("json,csv"), "json, csv or both"),
                    ParamSpec::new(
                        "aggregate_path",
                        ParamType::Str,
                        Value::from("report.csv"),
                        "CSV path relative to the output directory",
                    ),
                ],
                &[],
                &["json:type=report"],
            ),
        }
    }
}

impl Default for ReportExporter {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Field {
    pub label: String,
    pub source: String,
}

pub(crate) fn parse_fields(values: &[Value]) -> Result<Vec<Field>, String> {
    let mut fields = Vec::new();
    for v in values {
        let field = match v {
            Value::String(s) => match s.split_once('=') {
                Some((l, src)) => Field { label: l.trim().into(), source: src.trim().into() },
                None => Field { label: s.trim().into(), source: s.trim().into() },
            },
            Value::Object(m) => {
                let get = |k: &str| m.get(k).and_then(Value::as_str).map(str::to_string);
                let source = get("source").ok_or("field map needs `source`")?;
                Field { label: get("label").unwrap_or_else(|| source.clone()), source }
            }
            other => return Err(format!("unsupported field entry {other}")),
        };
        if field.label.is_empty() || field.source.is_empty() {
            return Err(format!("empty label or source in {v}"));
        }
        fields.push(field);
    }
    let labels: BTreeSet<&str> = fields.iter().map(|f| f.label.as_str()).collect();
    if labels.len() != fields.len() {
        return Err("report labels must be unique".into());
    }
    Ok(fields)
}

fn formats(params: &Params) -> Result<(bool, bool), String> {
    let (mut json, mut csv) = (false, false);
    for f in params.str("format").unwrap_or("json").split(',') {
        match f.trim().to_ascii_lowercase().as_str() {
            "json" => json = true,
            "csv" => csv = true,
            other => return Err(format!("unknown report format `{other}`")),
        }
    }
    Ok((json, csv))
}

fn lookup(ctx: &RunContext, id: &str, source: &str) -> Option<Value> {
    let inst = ctx.graph.instance(id).ok()?;
    if let Some(v) = inst.attribute(source) {
        return Some(Value::String(v.to_string()));
    }
    let (producer, key) = source.split_once('.')?;
    let path = ctx.graph.producer_dir(id, producer).join("values.json");
    let doc: Value = serde_json::from_slice(&fs::read(path).ok()?).ok()?;
    doc.get(key).cloned()
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Module for ReportExporter {
    fn descriptor(&self) -> &ModuleDescriptor {
        &self.desc
    }

    fn check_config(&self, params: &Params, _segdb: &Registry) -> Result<(), String> {
        let fields = parse_fields(params.list("fields"))?;
        if fields.is_empty() {
            return Err("fields must name at least one value".into());
        }
        let (_, csv) = formats(params)?;
        if csv {
            let path = params.str("aggregate_path").ok_or("aggregate_path is required")?;
            if !is_contained(path) {
                return Err(format!("aggregate_path `{path}` must stay inside the output directory"));
            }
        }
        Ok(())
    }

    fn run_once(&self, ctx: &mut RunContext, params: &Params) -> Result<(), ModuleError> {
        let fields = parse_fields(params.list("fields")).map_err(ModuleError::Config)?;
        let (json, csv) = formats(params).map_err(ModuleError::Config)?;
        let mut rows = Vec::new();
        for id in ctx.graph.active_ids() {
            let mut doc = Map::new();
            for f in &fields {
                let v = lookup(ctx, &id, &f.source).unwrap_or_else(|| {
                    warn!("{id}: no value for `{}`", f.source);
                    Value::Null
                });
                doc.insert(f.label.clone(), v);
            }
            if json {
                let bytes = serde_json::to_vec_pretty(&doc).expect("json map");
                let t = SemanticType::new(FileType::Json).with("type", "report");
                let producer = ctx.producer.clone();
                write_output(&mut ctx.graph, &id, &producer, &t, "report.json", &bytes)?;
            }
            rows.push(fields.iter().map(|f| cell(&doc[&f.label])).collect::<Vec<_>>());
        }
        if csv {
            let rel = params.str("aggregate_path").unwrap_or("report.csv");
            let path = ctx.output_dir.join(rel);
            let mut w = csv::Writer::from_writer(Vec::new());
            let write_err = |e: csv::Error| ModuleError::io(&path, e);
            w.write_record(fields.iter().map(|f| f.label.as_str())).map_err(write_err)?;
            for r in rows {
                w.write_record(&r).map_err(write_err)?;
            }
            let bytes = w.into_inner().map_err(|e| ModuleError::io(&path, e))?;
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| ModuleError::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| ModuleError::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn field_forms() {
        let f = parse_fields(&[json!("uid=SeriesInstanceUID"), json!("Modality"), json!({"source": "T.x", "label": "x"})])
            .unwrap();
        let pairs: Vec<(&str, &str)> = f.iter().map(|f| (f.label.as_str(), f.source.as_str())).collect();
        assert_eq!(pairs, [("uid", "SeriesInstanceUID"), ("Modality", "Modality"), ("x", "T.x")]);
        assert!(parse_fields(&[json!("a"), json!("a=b")]).is_err());
        assert!(parse_fields(&[json!(3)]).is_err());
    }
}
