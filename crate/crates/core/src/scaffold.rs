//! Model workspaces: generation, validation and the demo cohort.
//!
//! A workspace holds `Dockerfile`, `meta.json`, `config/<workflow>.yml`,
//! optional `modules/*.yml` definitions and a `test.yml`.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::Value;
use thiserror::Error;

use crate::meta::{self, Severity, ValidationIssue};
use crate::segdb::Registry;
use crate::testing::TestSpec;
use crate::volume::{self, DataType, VolumeGrid};
use crate::workflow::{self, ExitCode, ModuleRegistry, RunOptions, Workflow, WorkflowError};

pub const BASE_IMAGE_LINE: &str = "FROM mhubai/base:latest";
pub const MODELS_REPO_LINE: &str = "ARG MHUB_MODELS_REPO";
pub const ENTRYPOINT_LINE: &str = r#"ENTRYPOINT ["mhub.run"]"#;
pub const DEFAULT_CMD_LINE: &str = r#"CMD ["--workflow", "default"]"#;

/// Mount points inside the container.
pub const CONTAINER_INPUT: &str = "/app/data/input_data";
pub const CONTAINER_OUTPUT: &str = "/app/data/output_data";

pub const DEMO_NAME: &str = "threshold_demo";
pub const DEMO_CASES: usize = 4;

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("{} is not empty (use --force to write into it)", .0.display())]
    NonEmptyDir(PathBuf),
    #[error("invalid model name `{0}`: use lowercase letters, digits and underscores")]
    InvalidName(String),
    #[error("{} is not a model workspace: {message}", path.display())]
    NotWorkspace { path: PathBuf, message: String },
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ScaffoldError {
    ScaffoldError::Io { path: path.to_path_buf(), message: e.to_string() }
}

pub fn valid_model_name(name: &str) -> bool {
    name.starts_with(|c: char| c.is_ascii_lowercase())
        && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

pub fn import_line(name: &str) -> String {
    format!("RUN buildutils/import_mhub_model.sh {name} ${{MHUB_MODELS_REPO}}")
}

pub fn recipe(name: &str) -> String {
    format!(
        "{BASE_IMAGE_LINE}\n\n{MODELS_REPO_LINE}\n{}\n\n{ENTRYPOINT_LINE}\n{DEFAULT_CMD_LINE}\n",
        import_line(name)
    )
}

/// The command that runs a published model image on local folders.
pub fn run_command(name: &str, input: &str, output: &str) -> Vec<String> {
    vec![
        "docker".into(),
        "run".into(),
        "--rm".into(),
        "-v".into(),
        format!("{input}:{CONTAINER_INPUT}:ro"),
        "-v".into(),
        format!("{output}:{CONTAINER_OUTPUT}"),
        format!("mhubai/{name}"),
    ]
}

pub fn run_command_line(name: &str, input: &str, output: &str) -> String {
    run_command(name, input, output).join(" ")
}

fn default_workflow(name: &str) -> String {
    format!(
        "general:
  name: {name}
  description: Threshold segmentation of NIfTI volumes.
execute:
- module: FileImporter
  pattern: '*.nii.gz'
  descriptor: nifti:mod=ct
- module: ThresholdRunner
  threshold: 100.0
  roi: BODY
- module: DataOrganizer
  targets:
  - nifti:mod=seg -> {{id}}/seg.nii.gz
  - json:type=values -> {{id}}/values.json
"
    )
}

const MODULE_STUB: &str = "# Wraps an external tool. Tokens: {input:<query>}, {output:<descriptor>:<file>}, {param:<name>}.
name: CopyVolume
category: processor
description: Copies the input volume.
inputs: [nifti:mod=ct]
outputs: [nifti:mod=ct:copy=true]
argv: [cp, '{input:nifti:mod=ct}', '{output:nifti:mod=ct:copy=true:copy.nii.gz}']
";

const TEST_SPEC: &str = "workflow: default
sample: data/sample
reference: data/reference
rules:
  '**/*.nii.gz': segmentation
  '**/*.json': keyvalue
  '**/*.csv': keyvalue
";

fn meta_skeleton(name: &str) -> String {
    let doc = serde_json::json!({
        "id": "<uuid>",
        "name": name,
        "title": "<title>",
        "summary": {"description": "<description>", "intended_use": "<intended use>"},
        "task": "segmentation",
        "inputs": [{"format": "NIfTI", "modality": "CT", "description": "<input description>"}],
        "outputs": [{"type": "Segmentation", "classes": ["BODY"], "description": "<output description>"}],
        "model": {"architecture": "<architecture>", "training_data": "<training data>", "evaluation": "<evaluation>"},
        "refs": {"code_url": "<code url>", "paper_url": "<paper url>", "citation": "<citation>"},
        "license": {"code": "<code license>", "weights": "<weights license>"}
    });
    serde_json::to_string_pretty(&doc).expect("static document") + "\n"
}

fn readme(name: &str) -> String {
    format!(
        "# {name}\n\nRun on a local folder of input data:\n\n    {}\n\nTest against the sample data:\n\n    medpipe test --workspace . --output /tmp/{name}-test\n",
        run_command_line(name, "$PWD/input", "$PWD/output")
    )
}

/// A model workspace directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Workspace, ScaffoldError> {
        if !root.join("config").is_dir() {
            return Err(ScaffoldError::NotWorkspace { path: root.to_path_buf(), message: "no config directory".into() });
        }
        Ok(Workspace { root: root.to_path_buf() })
    }

    /// Model name from `meta.json`, falling back to the directory name.
    pub fn name(&self) -> String {
        fs::read_to_string(self.root.join("meta.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .and_then(|v| v.get("name").and_then(Value::as_str).map(str::to_string))
            .or_else(|| self.root.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_default()
    }

    pub fn workflow_path(&self, workflow: &str) -> PathBuf {
        self.root.join("config").join(format!("{workflow}.yml"))
    }

    pub fn workflows(&self) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(self.root.join("config"))
            .into_iter()
            .flatten()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "yml"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        names.sort();
        names
    }

    /// Built-in modules plus the definitions in `modules/`.
    pub fn modules(&self) -> Result<ModuleRegistry, WorkflowError> {
        let mut reg = ModuleRegistry::builtin();
        let dir = self.root.join("modules");
        if dir.is_dir() {
            reg.load_definitions(&dir)?;
        }
        Ok(reg)
    }

    pub fn load_workflow(&self, workflow: &str, modules: &ModuleRegistry) -> Result<Workflow, WorkflowError> {
        let path = self.workflow_path(workflow);
        let text = fs::read_to_string(&path)
            .map_err(|e| WorkflowError::Io { path: path.clone(), message: e.to_string() })?;
        workflow::load_workflow(&text, modules)
    }

    pub fn test_spec(&self) -> Result<TestSpec, String> {
        let path = self.root.join("test.yml");
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        TestSpec::from_yaml(&text).map_err(|e| e.to_string())
    }
}

fn is_empty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map_or(true, |mut rd| rd.next().is_none())
}

/// Writes a new workspace for model `name` into `dir`.
pub fn scaffold(name: &str, dir: &Path, force: bool) -> Result<Workspace, ScaffoldError> {
    if !valid_model_name(name) {
        return Err(ScaffoldError::InvalidName(name.into()));
    }
    if dir.exists() && !force && !is_empty_dir(dir) {
        return Err(ScaffoldError::NonEmptyDir(dir.to_path_buf()));
    }
    let files = [
        ("Dockerfile", recipe(name)),
        ("meta.json", meta_skeleton(name)),
        ("config/default.yml", default_workflow(name)),
        ("modules/copy_volume.yml", MODULE_STUB.to_string()),
        ("test.yml", TEST_SPEC.to_string()),
        ("README.md", readme(name)),
    ];
    for (rel, text) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    info!("scaffolded {name} in {}", dir.display());
    Ok(Workspace { root: dir.to_path_buf() })
}

fn issue(path: &str, severity: Severity, message: impl Into<String>) -> ValidationIssue {
    ValidationIssue { path: path.into(), severity, message: message.into() }
}

fn normalize(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Checks the build recipe against the template rules.
pub fn check_recipe(text: &str, name: &str) -> Vec<ValidationIssue> {
    let lines: Vec<String> = text
        .lines()
        .map(normalize)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let has = |want: &str| lines.iter().any(|l| *l == normalize(want));
    let mut out = Vec::new();
    if lines.first().map(String::as_str) != Some(BASE_IMAGE_LINE) {
        out.push(issue("recipe.from_base", Severity::Error, format!("must start with `{BASE_IMAGE_LINE}`")));
    }
    if !has(MODELS_REPO_LINE) {
        out.push(issue("recipe.models_repo_arg", Severity::Error, format!("missing `{MODELS_REPO_LINE}`")));
    }
    let import = import_line(name);
    if !has(&import) {
        out.push(issue("recipe.import_model", Severity::Error, format!("missing `{import}`")));
    }
    if !has(ENTRYPOINT_LINE) {
        out.push(issue("recipe.entrypoint", Severity::Error, format!("missing `{ENTRYPOINT_LINE}`")));
    }
    if !has(DEFAULT_CMD_LINE) {
        out.push(issue("recipe.default_cmd", Severity::Error, format!("missing `{DEFAULT_CMD_LINE}`")));
    }
    out
}

/// Runs every workspace check; the result is sorted by location.
pub fn validate_workspace(ws: &Workspace, segdb: &Registry) -> Vec<ValidationIssue> {
    let mut out = Vec::new();
    let name = ws.name();
    if !valid_model_name(&name) {
        out.push(issue("workspace.name", Severity::Error, format!("`{name}` is not a valid model name")));
    }

    match fs::read_to_string(ws.root.join("Dockerfile")) {
        Ok(text) => out.extend(check_recipe(&text, &name)),
        Err(e) => out.push(issue("recipe.missing", Severity::Error, format!("Dockerfile: {e}"))),
    }

    match fs::read_to_string(ws.root.join("meta.json")) {
        Ok(text) => match meta::validate_meta_str(&text, segdb) {
            Ok(found) => out.extend(found.into_iter().map(|i| ValidationIssue { path: format!("meta{}", &i.path[1..]), ..i })),
            Err(e) => out.push(issue("meta", Severity::Error, e.to_string())),
        },
        Err(e) => out.push(issue("meta", Severity::Error, format!("meta.json: {e}"))),
    }

    match ws.modules() {
        Ok(modules) => {
            let names = ws.workflows();
            if !names.iter().any(|n| n == "default") {
                out.push(issue("workflow.default_missing", Severity::Error, "config/default.yml is required"));
            }
            for n in names {
                let checked = ws
                    .load_workflow(&n, &modules)
                    .and_then(|w| workflow::validate_workflow(&w, &modules, segdb));
                if let Err(e) = checked {
                    out.push(issue(&format!("workflow.{n}"), Severity::Error, e.to_string()));
                }
            }
        }
        Err(e) => out.push(issue("modules", Severity::Error, e.to_string())),
    }

    if ws.root.join("test.yml").exists() {
        if let Err(e) = ws.test_spec() {
            out.push(issue("test", Severity::Error, e));
        }
    } else {
        out.push(issue("test", Severity::Warning, "no test.yml"));
    }
    out.sort();
    out
}

/// Synthetic CT-like volume: a bright ellipsoid over a structured background.
pub fn demo_volume(case: usize) -> VolumeGrid {
    let dims = [24, 20, 12];
    let centre = [10.0 + case as f64, 9.0 + (case % 2) as f64, 6.0];
    let radii = [6.0 + (case % 3) as f64, 5.0, 3.0 + (case % 2) as f64];
    let mut voxels = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let r: f64 = [x, y, z]
                    .iter()
                    .zip(centre.iter().zip(&radii))
                    .map(|(&p, (&c, &rad))| ((p as f64 - c) / rad).powi(2))
                    .sum();
                let noise = ((x * 7 + y * 13 + z * 5 + case * 11) % 40) as f64;
                voxels.push(if r <= 1.0 { 300.0 + noise } else { noise - 20.0 });
            }
        }
    }
    let mut g = VolumeGrid::from_voxels(dims, DataType::I16, voxels).expect("dims match voxels");
    g.spacing = [0.8, 0.8, 2.5];
    for (i, s) in g.spacing.iter().enumerate() {
        g.affine[i][i] = *s;
    }
    g
}

/// Writes `case_NN.nii.gz` files into `dir`.
pub fn write_demo_cohort(dir: &Path, cases: usize) -> Result<Vec<PathBuf>, ScaffoldError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    (0..cases)
        .map(|c| {
            let path = dir.join(format!("case_{c:02}.nii.gz"));
            volume::write_nifti(&demo_volume(c), &path).map_err(|e| io_err(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Scaffolds the threshold demo with a synthetic sample and a reference
/// produced by running the default workflow once.
pub fn create_demo(dir: &Path, force: bool) -> Result<Workspace, ScaffoldError> {
    let ws = scaffold(DEMO_NAME, dir, force)?;
    let sample = dir.join("data/sample");
    let reference = dir.join("data/reference");
    for d in [&sample, &reference] {
        if d.exists() {
            fs::remove_dir_all(d).map_err(|e| io_err(d, e))?;
        }
    }
    write_demo_cohort(&sample, DEMO_CASES)?;
    let modules = ws.modules()?;
    let w = ws.load_workflow("default", &modules)?;
    let opts = RunOptions { input_dir: sample, output_dir: reference, ..Default::default() };
    let log = workflow::execute_workflow(&w, &modules, &Registry::bundled(), &opts)?;
    if log.exit != ExitCode::Ok {
        return Err(io_err(dir, format!("demo reference run ended with {:?}", log.exit)));
    }
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_has_template_lines() {
        let r = recipe("lung_model");
        for line in [
            "FROM mhubai/base:latest",
            "ARG MHUB_MODELS_REPO",
            "RUN buildutils/import_mhub_model.sh lung_model ${MHUB_MODELS_REPO}",
            r#"ENTRYPOINT ["mhub.run"]"#,
            r#"CMD ["--workflow", "default"]"#,
        ] {
            assert!(r.lines().any(|l| l == line), "{line}");
        }
        assert_eq!(check_recipe(&r, "lung_model"), []);
        let found: Vec<String> = check_recipe(&r, "other").into_iter().map(|i| i.path).collect();
        assert_eq!(found, ["recipe.import_model"]);
    }

    #[test]
    fn base_image_must_come_first() {
        let r = format!("FROM ubuntu\n{}", recipe("m"));
        let found: Vec<String> = check_recipe(&r, "m").into_iter().map(|i| i.path).collect();
        assert_eq!(found, ["recipe.from_base"]);
        let commented = format!("# header\n\n{}", recipe("m"));
        assert_eq!(check_recipe(&commented, "m"), []);
    }

    #[test]
    fn names() {
        assert!(valid_model_name("lung_seg2"));
        for bad in ["", "2lung", "Lung", "a-b", "a b", "../x"] {
            assert!(!valid_model_name(bad), "{bad}");
        }
    }

    #[test]
    fn scaffold_validates_with_warnings_only() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = scaffold("my_model", tmp.path(), false).unwrap();
        let found = validate_workspace(&ws, &Registry::bundled());
        assert!(!meta::has_errors(&found), "{found:?}");
        assert!(found.iter().any(|i| i.path.starts_with("meta.")));
        assert_eq!(ws.name(), "my_model");
        assert!(matches!(scaffold("my_model", tmp.path(), false), Err(ScaffoldError::NonEmptyDir(_))));
        assert!(scaffold("my_model", tmp.path(), true).is_ok());
    }

    #[test]
    fn demo_volumes_differ_per_case() {
        assert_ne!(demo_volume(0).voxels, demo_volume(1).voxels);
        assert_eq!(demo_volume(2), demo_volume(2));
    }
}
