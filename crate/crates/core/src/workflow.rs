//! Workflow files, module registry and the sequential run engine.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::segdb::{Registry, SegDbError};
use crate::semantic::{InstanceStatus, RunGraph, SemanticError, SemanticQuery, SemanticType};
use crate::volume::VolumeError;

/// Process exit status shared by the CLI commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitCode {
    Ok,
    Config,
    RunFailure,
    NoInstances,
    TestDeviation,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        match self {
            ExitCode::Ok => 0,
            ExitCode::Config => 2,
            ExitCode::RunFailure => 3,
            ExitCode::NoInstances => 4,
            ExitCode::TestDeviation => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Importer,
    Filter,
    Converter,
    Processor,
    Runner,
    Exporter,
    Organizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "per-run", alias = "run", alias = "per_run")]
    PerRun,
    #[serde(rename = "per-instance", alias = "instance", alias = "per_instance")]
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Bool,
    Int,
    Float,
    #[serde(alias = "string")]
    Str,
    List,
    Map,
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamType::Bool => "bool",
            ParamType::Int => "int",
            ParamType::Float => "float",
            ParamType::Str => "str",
            ParamType::List => "list",
            ParamType::Map => "map",
        };
        f.write_str(s)
    }
}

fn value_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_i64() || n.is_u64() => "int",
        Value::Number(_) => "float",
        Value::String(_) => "str",
        Value::Array(_) => "list",
        Value::Object(_) => "map",
    }
}

impl ParamType {
    /// Converts `v` to this type. Null always passes and means "unset".
    pub fn coerce(self, v: &Value) -> Option<Value> {
        match (self, v) {
            (_, Value::Null) => Some(Value::Null),
            (ParamType::Bool, Value::Bool(_)) => Some(v.clone()),
            (ParamType::Int, Value::Number(n)) if n.is_i64() || n.is_u64() => Some(v.clone()),
            (ParamType::Float, Value::Number(n)) => n.as_f64().map(Value::from),
            (ParamType::Str, Value::String(_)) => Some(v.clone()),
            (ParamType::Str, Value::Number(n)) => Some(Value::String(n.to_string())),
            (ParamType::Str, Value::Bool(b)) => Some(Value::String(b.to_string())),
            (ParamType::List, Value::Array(_)) => Some(v.clone()),
            (ParamType::Map, Value::Object(_)) => Some(v.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub default: Value,
    #[serde(default)]
    pub description: String,
}

impl ParamSpec {
    pub fn new(name: &str, ty: ParamType, default: Value, description: &str) -> Self {
        ParamSpec { name: name.into(), ty, default, description: description.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleDescriptor {
    pub name: String,
    pub category: Category,
    pub scope: Scope,
    pub description: String,
    pub params: Vec<ParamSpec>,
    pub inputs: Vec<SemanticQuery>,
    pub outputs: Vec<SemanticType>,
}

impl ModuleDescriptor {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Fully resolved parameters of one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params(pub IndexMap<String, Value>);

impl Params {
    /// The value of `key`, treating null as absent.
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key).filter(|v| !v.is_null())
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(Value::as_str)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_f64)
    }

    pub fn i64(&self, key: &str) -> Option<i64> {
        self.get(key).and_then(Value::as_i64)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.get(key).and_then(Value::as_bool)
    }

    pub fn list(&self, key: &str) -> &[Value] {
        self.get(key).and_then(Value::as_array).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Error)]
pub enum ModuleError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no input matches `{0}`")]
    MissingInput(String),
    #[error("{count} inputs match `{query}`, expected exactly one")]
    AmbiguousInput { query: String, count: usize },
    #[error("command failed: {0}")]
    CommandFailed(String),
    #[error("declared output {} was not written", .0.display())]
    MissingOutput(PathBuf),
    #[error("cannot resolve placeholder `{0}`")]
    UnresolvablePlaceholder(String),
    #[error(transparent)]
    Segment(#[from] SegDbError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

impl ModuleError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        ModuleError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

/// What happened to one instance in a per-instance step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// The step did not apply; the instance stays active.
    Skipped(String),
    /// The instance is removed from the rest of the run.
    Dropped(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedInput {
    pub path: PathBuf,
    pub reason: String,
}

/// Shared state handed to every module invocation.
pub struct RunContext<'a> {
    pub graph: RunGraph,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub segdb: &'a Registry,
    /// Name under which the current step registers outputs.
    pub producer: String,
    skipped: Vec<SkippedInput>,
}

impl<'a> RunContext<'a> {
    pub fn new(workdir: &Path, input_dir: &Path, output_dir: &Path, segdb: &'a Registry) -> Self {
        RunContext {
            graph: RunGraph::new(workdir),
            input_dir: input_dir.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            segdb,
            producer: String::new(),
            skipped: Vec::new(),
        }
    }

    /// Records an input file that a module ignored.
    pub fn skip_input(&mut self, path: &Path, reason: impl Into<String>) {
        let reason = reason.into();
        warn!("skipping {}: {reason}", path.display());
        self.skipped.push(SkippedInput { path: path.to_path_buf(), reason });
    }
}

pub trait Module: Send + Sync {
    fn descriptor(&self) -> &ModuleDescriptor;

    /// Checks resolved parameters before anything runs.
    fn check_config(&self, _params: &Params, _segdb: &Registry) -> Result<(), String> {
        Ok(())
    }

    fn run_once(&self, _ctx: &mut RunContext, _params: &Params) -> Result<(), ModuleError> {
        Err(ModuleError::Config(format!("{} has no per-run behavior", self.descriptor().name)))
    }

    fn run_instance(&self, _ctx: &mut RunContext, _id: &str, _params: &Params) -> Result<Outcome, ModuleError> {
        Err(ModuleError::Config(format!("{} has no per-instance behavior", self.descriptor().name)))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkflowError {
    #[error("workflow schema: {0}")]
    Schema(String),
    #[error("unknown module `{name}`{}{}", hint(.hints), context(.origin))]
    UnknownModule { name: String, hints: Vec<String>, origin: Option<String> },
    #[error("module {module} has no parameter `{param}`{}", context(.origin))]
    UnknownParam { module: String, param: String, origin: Option<String> },
    #[error("{module}.{param} expects {expected}, found {found}{}", context(.origin))]
    ParamType { module: String, param: String, expected: ParamType, found: String, origin: Option<String> },
    #[error("override `{0}` is not of the form Module.param=value")]
    InvalidOverride(String),
    #[error("{module}: {message}")]
    InvalidConfig { module: String, message: String },
    #[error("module definition {}: {message}", path.display())]
    Definition { path: PathBuf, message: String },
    #[error("module `{0}` is registered twice")]
    DuplicateModule(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

fn hint(hints: &[String]) -> String {
    if hints.is_empty() {
        String::new()
    } else {
        format!(" (did you mean {}?)", hints.join(", "))
    }
}

fn context(origin: &Option<String>) -> String {
    origin.as_ref().map_or(String::new(), |s| format!(" in `{s}`"))
}

impl WorkflowError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            WorkflowError::Io { .. } => ExitCode::RunFailure,
            _ => ExitCode::Config,
        }
    }
}

pub fn valid_module_name(name: &str) -> bool {
    let mut chars = name.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Module lookup by name, in registration order.
#[derive(Clone, Default)]
pub struct ModuleRegistry {
    modules: IndexMap<String, Arc<dyn Module>>,
}

impl fmt::Debug for ModuleRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.modules.keys()).finish()
    }
}

impl ModuleRegistry {
    pub fn empty() -> Self {
        ModuleRegistry::default()
    }

    /// The built-in toolbox.
    pub fn builtin() -> Self {
        let mut r = ModuleRegistry::empty();
        for m in crate::modules::builtin() {
            r.register(m).expect("built-in names are unique");
        }
        r
    }

    pub fn register(&mut self, module: Arc<dyn Module>) -> Result<(), WorkflowError> {
        let name = module.descriptor().name.clone();
        if self.modules.contains_key(&name) {
            return Err(WorkflowError::DuplicateModule(name));
        }
        self.modules.insert(name, module);
        Ok(())
    }

    /// Registers every `*.yml`/`*.yaml` module definition in `dir`.
    pub fn load_definitions(&mut self, dir: &Path) -> Result<usize, WorkflowError> {
        let io = |e: std::io::Error| WorkflowError::Io { path: dir.to_path_buf(), message: e.to_string() };
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "yml" || e == "yaml"))
            .collect();
        files.sort();
        for path in &files {
            let module = crate::modules::CommandModule::from_file(path)?;
            self.register(Arc::new(module))?;
        }
        Ok(files.len())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Module>> {
        self.modules.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modules.keys().map(String::as_str)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &ModuleDescriptor> {
        self.modules.values().map(|m| m.descriptor())
    }

    fn unknown(&self, name: &str, origin: Option<String>) -> WorkflowError {
        let wanted = name.to_ascii_lowercase();
        let hints = self
            .modules
            .keys()
            .filter(|k| strsim::levenshtein(&k.to_ascii_lowercase(), &wanted) <= 2)
            .cloned()
            .collect();
        WorkflowError::UnknownModule { name: name.to_string(), hints, origin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSpec {
    pub module: String,
    /// Parameters given on the step itself (and by overrides).
    pub params: IndexMap<String, Value>,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Workflow {
    pub name: String,
    pub description: String,
    pub steps: Vec<StepSpec>,
    /// Per-module parameters from the top-level `modules` block.
    pub global_config: IndexMap<String, IndexMap<String, Value>>,
}

fn check_param(
    desc: &ModuleDescriptor,
    key: &str,
    value: &Value,
    source: Option<&str>,
) -> Result<Value, WorkflowError> {
    let spec = desc.param(key).ok_or_else(|| WorkflowError::UnknownParam {
        module: desc.name.clone(),
        param: key.to_string(),
        origin: source.map(str::to_string),
    })?;
    spec.ty.coerce(value).ok_or_else(|| WorkflowError::ParamType {
        module: desc.name.clone(),
        param: key.to_string(),
        expected: spec.ty,
        found: value_kind(value).to_string(),
        origin: source.map(str::to_string),
    })
}

fn yaml_to_json(v: serde_yaml::Value, at: &str) -> Result<Value, WorkflowError> {
    serde_json::to_value(v).map_err(|e| WorkflowError::Schema(format!("{at}: {e}")))
}

fn param_map(
    desc: &ModuleDescriptor,
    map: serde_yaml::Mapping,
    at: &str,
) -> Result<IndexMap<String, Value>, WorkflowError> {
    let mut out = IndexMap::new();
    for (k, v) in map {
        let serde_yaml::Value::String(key) = k else {
            return Err(WorkflowError::Schema(format!("{at}: parameter names must be strings")));
        };
        let v = yaml_to_json(v, at)?;
        let v = check_param(desc, &key, &v, None)?;
        out.insert(key, v);
    }
    Ok(out)
}

/// Parses a workflow file and checks modules and parameter types.
pub fn load_workflow(text: &str, modules: &ModuleRegistry) -> Result<Workflow, WorkflowError> {
    let doc: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| WorkflowError::Schema(e.to_string()))?;
    let serde_yaml::Value::Mapping(mut top) = doc else {
        return Err(WorkflowError::Schema("expected a mapping at the top level".into()));
    };
    let general = top.remove("general");
    let execute = top.remove("execute");
    let globals = top.remove("modules");
    for (k, _) in &top {
        warn!("ignoring unknown workflow key {}", serde_yaml::to_string(k).unwrap_or_default().trim());
    }

    let (mut name, mut description) = (String::from("unnamed"), String::new());
    match general {
        None | Some(serde_yaml::Value::Null) => {}
        Some(serde_yaml::Value::Mapping(g)) => {
            let text_of = |key: &str| -> Result<Option<String>, WorkflowError> {
                match g.get(key) {
                    None | Some(serde_yaml::Value::Null) => Ok(None),
                    Some(serde_yaml::Value::String(s)) => Ok(Some(s.clone())),
                    Some(_) => Err(WorkflowError::Schema(format!("general.{key} must be a string"))),
                }
            };
            if let Some(n) = text_of("name")? {
                name = n;
            }
            if let Some(d) = text_of("description")? {
                description = d;
            }
        }
        Some(_) => return Err(WorkflowError::Schema("`general` must be a mapping".into())),
    }

    let entries = match execute {
        None => return Err(WorkflowError::Schema("missing `execute`".into())),
        Some(serde_yaml::Value::Sequence(s)) => s,
        Some(_) => return Err(WorkflowError::Schema("`execute` must be a list".into())),
    };
    if entries.is_empty() {
        return Err(WorkflowError::Schema("`execute` must list at least one module".into()));
    }
    let mut steps = Vec::new();
    for (i, entry) in entries.into_iter().enumerate() {
        let at = format!("execute[{i}]");
        let (module, params) = match entry {
            serde_yaml::Value::String(s) => (s, serde_yaml::Mapping::new()),
            serde_yaml::Value::Mapping(mut m) => match m.remove("module") {
                Some(serde_yaml::Value::String(s)) => (s, m),
                _ => return Err(WorkflowError::Schema(format!("{at}: entry without `module`"))),
            },
            _ => return Err(WorkflowError::Schema(format!("{at}: expected a module name or mapping"))),
        };
        let m = modules.get(&module).ok_or_else(|| modules.unknown(&module, None))?;
        let desc = m.descriptor();
        steps.push(StepSpec { module, params: param_map(desc, params, &at)?, scope: desc.scope });
    }

    let mut global_config = IndexMap::new();
    match globals {
        None | Some(serde_yaml::Value::Null) => {}
        Some(serde_yaml::Value::Mapping(g)) => {
            for (k, v) in g {
                let serde_yaml::Value::String(module) = k else {
                    return Err(WorkflowError::Schema("`modules` keys must be module names".into()));
                };
                let m = modules.get(&module).ok_or_else(|| modules.unknown(&module, None))?;
                let params = match v {
                    serde_yaml::Value::Mapping(p) => p,
                    serde_yaml::Value::Null => serde_yaml::Mapping::new(),
                    _ => return Err(WorkflowError::Schema(format!("modules.{module} must be a mapping"))),
                };
                let params = param_map(m.descriptor(), params, &format!("modules.{module}"))?;
                global_config.insert(module, params);
            }
        }
        Some(_) => return Err(WorkflowError::Schema("`modules` must be a mapping".into())),
    }

    Ok(Workflow { name, description, steps, global_config })
}

/// Applies `Module.param=value` overrides to every step running `Module`.
pub fn apply_overrides(
    mut w: Workflow,
    overrides: &[String],
    modules: &ModuleRegistry,
) -> Result<Workflow, WorkflowError> {
    for o in overrides {
        let (lhs, raw) = o.split_once('=').ok_or_else(|| WorkflowError::InvalidOverride(o.clone()))?;
        let (module, param) = lhs.split_once('.').ok_or_else(|| WorkflowError::InvalidOverride(o.clone()))?;
        if module.is_empty() || param.is_empty() {
            return Err(WorkflowError::InvalidOverride(o.clone()));
        }
        let Some(m) = modules.get(module) else {
            return Err(modules.unknown(module, Some(o.clone())));
        };
        if !w.steps.iter().any(|s| s.module == module) {
            return Err(WorkflowError::UnknownModule {
                name: module.to_string(),
                hints: Vec::new(),
                origin: Some(o.clone()),
            });
        }
        let parsed: Value = if raw.trim().is_empty() {
            Value::String(String::new())
        } else {
            serde_yaml::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
        };
        let value = check_param(m.descriptor(), param, &parsed, Some(o))?;
        for step in w.steps.iter_mut().filter(|s| s.module == module) {
            step.params.insert(param.to_string(), value.clone());
        }
    }
    Ok(w)
}

/// Defaults, then the `modules` block, then the step's own parameters.
pub fn effective_params(w: &Workflow, step: &StepSpec, desc: &ModuleDescriptor) -> Params {
    let mut p: IndexMap<String, Value> =
        desc.params.iter().map(|s| (s.name.clone(), s.default.clone())).collect();
    if let Some(g) = w.global_config.get(&step.module) {
        p.extend(g.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    p.extend(step.params.iter().map(|(k, v)| (k.clone(), v.clone())));
    Params(p)
}

/// Runs every module's configuration check.
pub fn validate_workflow(w: &Workflow, modules: &ModuleRegistry, segdb: &Registry) -> Result<(), WorkflowError> {
    if w.steps.is_empty() {
        return Err(WorkflowError::Schema("workflow has no steps".into()));
    }
    for step in &w.steps {
        let m = modules.get(&step.module).ok_or_else(|| modules.unknown(&step.module, None))?;
        let desc = m.descriptor();
        m.check_config(&effective_params(w, step, desc), segdb)
            .map_err(|message| WorkflowError::InvalidConfig { module: step.module.clone(), message })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InvocationStatus {
    Ok,
    Skipped,
    Dropped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRecord {
    pub instance: String,
    pub status: InvocationStatus,
    pub message: Option<String>,
    pub seq_start: u64,
    pub seq_end: u64,
    /// Confirmed outputs registered during this invocation.
    pub produced: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub module: String,
    pub scope: Scope,
    pub status: StepStatus,
    pub message: Option<String>,
    pub seq_start: u64,
    pub seq_end: u64,
    pub elapsed_secs: f64,
    pub invocations: Vec<InstanceRecord>,
    pub skipped_inputs: Vec<SkippedInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceSummary {
    pub id: String,
    pub status: InstanceStatus,
    pub attributes: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunLog {
    pub workflow: String,
    pub steps: Vec<StepRecord>,
    pub instances: Vec<InstanceSummary>,
    pub exit: ExitCode,
    /// Set when the working directory outlives the run.
    pub workdir: Option<PathBuf>,
}

/// Step and instance statuses without timings, for run-to-run comparison.
pub type RunSignature = (Vec<(String, StepStatus, Vec<(String, InvocationStatus)>)>, Vec<(String, InstanceStatus)>);

impl RunLog {
    pub fn signature(&self) -> RunSignature {
        let steps = self
            .steps
            .iter()
            .map(|s| {
                let inv = s.invocations.iter().map(|r| (r.instance.clone(), r.status)).collect();
                (s.module.clone(), s.status, inv)
            })
            .collect();
        let instances = self.instances.iter().map(|i| (i.id.clone(), i.status)).collect();
        (steps, instances)
    }

    pub fn active_instances(&self) -> usize {
        self.instances.iter().filter(|i| i.status == InstanceStatus::Active).count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Intermediate files go here; a temporary directory is used when unset.
    pub workdir: Option<PathBuf>,
    /// Keep the temporary working directory after the run.
    pub keep_workdir: bool,
}

enum Workdir {
    Given(PathBuf),
    Temp(tempfile::TempDir),
}

/// Runs `w` step by step. Only configuration problems and an unusable
/// output or working directory are returned as errors; everything else is
/// recorded in the log.
pub fn execute_workflow(
    w: &Workflow,
    modules: &ModuleRegistry,
    segdb: &Registry,
    opts: &RunOptions,
) -> Result<RunLog, WorkflowError> {
    validate_workflow(w, modules, segdb)?;
    let io = |path: &Path, e: std::io::Error| WorkflowError::Io { path: path.to_path_buf(), message: e.to_string() };
    std::fs::create_dir_all(&opts.output_dir).map_err(|e| io(&opts.output_dir, e))?;
    let workdir = match &opts.workdir {
        Some(p) => {
            std::fs::create_dir_all(p).map_err(|e| io(p, e))?;
            Workdir::Given(p.clone())
        }
        None => Workdir::Temp(tempfile::Builder::new().prefix("medpipe-").tempdir().map_err(|e| io(Path::new("tmp"), e))?),
    };
    let root = match &workdir {
        Workdir::Given(p) => p.clone(),
        Workdir::Temp(t) => t.path().to_path_buf(),
    };

    let mut ctx = RunContext::new(&root, &opts.input_dir, &opts.output_dir, segdb);
    let mut seq = 0u64;
    let mut next = || {
        seq += 1;
        seq
    };
    let mut steps = Vec::new();
    let mut fatal = false;
    let mut seen: IndexMap<&str, usize> = IndexMap::new();
    for (index, step) in w.steps.iter().enumerate() {
        let module = modules.get(&step.module).expect("validated");
        let desc = module.descriptor();
        let params = effective_params(w, step, desc);
        let n = seen.entry(step.module.as_str()).or_default();
        *n += 1;
        ctx.producer = if *n == 1 { step.module.clone() } else { format!("{}_{}", step.module, n) };
        info!("step {}: {}", index + 1, step.module);
        let started = Instant::now();
        let seq_start = next();
        let mut record = StepRecord {
            index,
            module: step.module.clone(),
            scope: desc.scope,
            status: StepStatus::Ok,
            message: None,
            seq_start,
            seq_end: seq_start,
            elapsed_secs: 0.0,
            invocations: Vec::new(),
            skipped_inputs: Vec::new(),
        };
        match desc.scope {
            Scope::PerRun => {
                if let Err(e) = module.run_once(&mut ctx, &params) {
                    warn!("{} failed: {e}", step.module);
                    record.status = StepStatus::Failed;
                    record.message = Some(e.to_string());
                    fatal = true;
                }
            }
            Scope::PerInstance => {
                let ids = ctx.graph.active_ids();
                let mut failed = 0;
                for id in &ids {
                    let seq_start = next();
                    let before = ctx.graph.instance(id).map_or(0, |i| i.handles().len());
                    let (status, message) = match module.run_instance(&mut ctx, id, &params) {
                        Ok(Outcome::Done) => (InvocationStatus::Ok, None),
                        Ok(Outcome::Skipped(r)) => (InvocationStatus::Skipped, Some(r)),
                        Ok(Outcome::Dropped(r)) => {
                            ctx.graph.set_status(id, InstanceStatus::Skipped).expect("known instance");
                            (InvocationStatus::Dropped, Some(r))
                        }
                        Err(e) => {
                            warn!("{} failed on {id}: {e}", step.module);
                            ctx.graph.set_status(id, InstanceStatus::Failed).expect("known instance");
                            failed += 1;
                            (InvocationStatus::Failed, Some(e.to_string()))
                        }
                    };
                    let produced = ctx
                        .graph
                        .instance(id)
                        .map(|i| {
                            i.handles()[before.min(i.handles().len())..]
                                .iter()
                                .filter(|h| h.confirmed)
                                .map(|h| h.path.clone())
                                .collect()
                        })
                        .unwrap_or_default();
                    record.invocations.push(InstanceRecord {
                        instance: id.clone(),
                        status,
                        message,
                        seq_start,
                        seq_end: next(),
                        produced,
                    });
                }
                record.status = if ids.is_empty() {
                    StepStatus::Skipped
                } else if failed == ids.len() {
                    StepStatus::Failed
                } else {
                    StepStatus::Ok
                };
            }
        }
        record.skipped_inputs = std::mem::take(&mut ctx.skipped);
        record.elapsed_secs = started.elapsed().as_secs_f64();
        record.seq_end = next();
        steps.push(record);
        if fatal {
            break;
        }
    }

    let instances: Vec<InstanceSummary> = ctx
        .graph
        .instances()
        .iter()
        .map(|i| InstanceSummary { id: i.id.clone(), status: i.status, attributes: i.attributes.clone() })
        .collect();
    let active = instances.iter().filter(|i| i.status == InstanceStatus::Active).count();
    let exit = if fatal {
        ExitCode::RunFailure
    } else if active == 0 {
        ExitCode::NoInstances
    } else {
        ExitCode::Ok
    };
    let workdir = match workdir {
        Workdir::Given(p) => Some(p),
        Workdir::Temp(t) if opts.keep_workdir => Some(t.keep()),
        Workdir::Temp(_) => None,
    };
    Ok(RunLog { workflow: w.name.clone(), steps, instances, exit, workdir })
}
