use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use log::{debug, info};
use serde::Deserialize;
use serde_json::Value;

use crate::segdb::Registry;
use crate::semantic::{parse_descriptor, parse_query, SemanticQuery, SemanticType};
use crate::workflow::{
    valid_module_name, Category, Module, ModuleDescriptor, ModuleError, Outcome, ParamSpec, ParamType, Params,
    RunContext, Scope, WorkflowError,
};

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDef {
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub default: Value,
    #[serde(default)]
    pub description: String,
}

/// A module definition file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub name: String,
    pub category: Category,
    #[serde(default = "per_instance")]
    pub scope: Scope,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: IndexMap<String, ParamDef>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    pub argv: Vec<String>,
    #[serde(default)]
    pub expected_exit: i32,
    /// Seconds; no limit when absent.
    #[serde(default)]
    pub timeout: Option<f64>,
}

fn per_instance() -> Scope {
    Scope::PerInstance
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Lit(String),
    Input(SemanticQuery),
    Output { descriptor: SemanticType, basename: String },
    Param(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Arg {
    pieces: Vec<Piece>,
    /// `{input:...}*`: one argument per matching file.
    expand: bool,
}

/// Splits one argv element into literal text and substitution tokens.
fn parse_arg(text: &str) -> Result<Arg, String> {
    let mut pieces = Vec::new();
    let mut lit = String::new();
    let mut expand = false;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        let rest = &text[i..];
        let kind = ["input:", "output:", "param:"].into_iter().find(|k| rest[1.min(rest.len())..].starts_with(k));
        let (true, Some(kind)) = (bytes[i] == b'{', kind) else {
            let ch = rest.chars().next().expect("non-empty");
            lit.push(ch);
            i += ch.len_utf8();
            continue;
        };
        let mut depth = 0;
        let mut end = None;
        for (j, c) in rest.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(j);
                        break;
                    }
                }
                _ => {}
            }
        }
        let end = end.ok_or_else(|| format!("unclosed token in `{text}`"))?;
        let body = &rest[1 + kind.len()..end];
        if !lit.is_empty() {
            pieces.push(Piece::Lit(std::mem::take(&mut lit)));
        }
        let piece = match kind {
            "input:" => Piece::Input(parse_query(body).map_err(|e| e.to_string())?),
            "output:" => {
                let (d, b) = body.rsplit_once(':').ok_or_else(|| format!("`{body}` needs <descriptor>:<basename>"))?;
                Piece::Output {
                    descriptor: parse_descriptor(d).map_err(|e| e.to_string())?,
                    basename: b.to_string(),
                }
            }
            _ => Piece::Param(body.to_string()),
        };
        let is_input = matches!(piece, Piece::Input(_));
        pieces.push(piece);
        i += end + 1;
        if is_input && text[i..].starts_with('*') {
            if i == bytes.len() - 1 && pieces.len() == 1 && text.starts_with('{') {
                expand = true;
                i += 1;
            } else {
                return Err(format!("`*` expansion must apply to a whole argument in `{text}`"));
            }
        }
    }
    if !lit.is_empty() {
        pieces.push(Piece::Lit(lit));
    }
    Ok(Arg { pieces, expand })
}

/// An external program wrapped as a per-instance module.
#[derive(Debug)]
pub struct CommandModule {
    desc: ModuleDescriptor,
    argv: Vec<Arg>,
    expected_exit: i32,
    timeout: Option<Duration>,
}

impl CommandModule {
    pub fn from_spec(spec: CommandSpec) -> Result<CommandModule, String> {
        if !valid_module_name(&spec.name) {
            return Err(format!("invalid module name `{}`", spec.name));
        }
        if spec.scope != Scope::PerInstance {
            return Err("command modules run per instance; per-run scope is not supported".into());
        }
        if spec.argv.is_empty() {
            return Err("argv must not be empty".into());
        }
        let mut params = Vec::new();
        for (name, def) in &spec.params {
            if matches!(def.ty, ParamType::List | ParamType::Map) {
                return Err(format!("param {name}: only scalar types can be substituted"));
            }
            if def.ty.coerce(&def.default).is_none() {
                return Err(format!("param {name}: default does not match type {}", def.ty));
            }
            params.push(ParamSpec::new(name, def.ty, def.ty.coerce(&def.default).expect("checked"), &def.description));
        }
        let argv = spec
            .argv
            .iter()
            .map(|a| parse_arg(a))
            .collect::<Result<Vec<_>, _>>()?;
        if argv[0].expand || argv[0].pieces.iter().any(|p| matches!(p, Piece::Input(_) | Piece::Output { .. })) {
            return Err("the program name must not be a file token".into());
        }
        let mut inputs: Vec<SemanticQuery> =
            spec.inputs.iter().map(|q| parse_query(q).map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
        let mut outputs: Vec<SemanticType> =
            spec.outputs.iter().map(|d| parse_descriptor(d).map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
        let mut basenames = Vec::new();
        for piece in argv.iter().flat_map(|a| &a.pieces) {
            match piece {
                Piece::Input(q) if !inputs.contains(q) => inputs.push(q.clone()),
                Piece::Output { descriptor, basename } => {
                    if basename.is_empty() || basename.contains(['/', '\\']) || basename == "." || basename == ".." {
                        return Err(format!("invalid output basename `{basename}`"));
                    }
                    if basenames.contains(basename) {
                        return Err(format!("output basename `{basename}` used twice"));
                    }
                    basenames.push(basename.clone());
                    if !outputs.contains(descriptor) {
                        outputs.push(descriptor.clone());
                    }
                }
                Piece::Param(name) if !spec.params.contains_key(name) => {
                    return Err(format!("argv uses undeclared param `{name}`"));
                }
                _ => {}
            }
        }
        if basenames.is_empty() {
            return Err("argv must contain at least one {output:...} token".into());
        }
        if let Some(t) = spec.timeout {
            if !(t > 0.0 && t.is_finite()) {
                return Err("timeout must be a positive number of seconds".into());
            }
        }
        Ok(CommandModule {
            desc: ModuleDescriptor {
                name: spec.name,
                category: spec.category,
                scope: spec.scope,
                description: spec.description,
                params,
                inputs,
                outputs,
            },
            argv,
            expected_exit: spec.expected_exit,
            timeout: spec.timeout.map(Duration::from_secs_f64),
        })
    }

    pub fn from_yaml(text: &str) -> Result<CommandModule, String> {
        let spec: CommandSpec = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
        CommandModule::from_spec(spec)
    }

    pub fn from_file(path: &Path) -> Result<CommandModule, WorkflowError> {
        let err = |message: String| WorkflowError::Definition { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        CommandModule::from_yaml(&text).map_err(err)
    }
}

fn param_text(params: &Params, name: &str) -> Result<String, ModuleError> {
    match params.get(name) {
        None => Err(ModuleError::Config(format!("param {name} has no value"))),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(v) => Ok(v.to_string()),
    }
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn wait(mut child: std::process::Child, timeout: Option<Duration>) -> Result<std::process::ExitStatus, ModuleError> {
    let started = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Ok(status),
            Ok(None) => {}
            Err(e) => return Err(ModuleError::CommandFailed(e.to_string())),
        }
        if let Some(limit) = timeout {
            if started.elapsed() > limit {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ModuleError::CommandFailed(format!("timed out after {:.1}s", limit.as_secs_f64())));
            }
        }
        std::thread::sleep(POLL);
    }
}

impl Module for CommandModule {
    fn descriptor(&self) -> &ModuleDescriptor {
        &self.desc
    }

    fn check_config(&self, params: &Params, _segdb: &Registry) -> Result<(), String> {
        for p in &self.desc.params {
            if params.get(&p.name).is_none() {
                return Err(format!("param {} has no value", p.name));
            }
        }
        Ok(())
    }

    fn run_instance(&self, ctx: &mut RunContext, id: &str, params: &Params) -> Result<Outcome, ModuleError> {
        let bindings = ctx.graph.instance(id)?.bindings();
        let producer = ctx.producer.clone();
        let mut argv: Vec<String> = Vec::new();
        let mut outputs: Vec<PathBuf> = Vec::new();
        for arg in &self.argv {
            if arg.expand {
                let Piece::Input(q) = &arg.pieces[0] else { unreachable!("expand implies an input token") };
                let found = ctx.graph.resolve(id, q, &bindings)?;
                if found.is_empty() {
                    return Err(ModuleError::MissingInput(q.to_string()));
                }
                argv.extend(found.iter().map(|h| path_text(&h.path)));
                continue;
            }
            let mut text = String::new();
            for piece in &arg.pieces {
                match piece {
                    Piece::Lit(s) => text.push_str(s),
                    Piece::Param(name) => text.push_str(&param_text(params, name)?),
                    Piece::Input(q) => {
                        let found = ctx.graph.resolve(id, q, &bindings)?;
                        match found.as_slice() {
                            [] => return Err(ModuleError::MissingInput(q.to_string())),
                            [h] => text.push_str(&path_text(&h.path)),
                            more => {
                                return Err(ModuleError::AmbiguousInput { query: q.to_string(), count: more.len() })
                            }
                        }
                    }
                    Piece::Output { descriptor, basename } => {
                        let h = ctx.graph.register_output(id, descriptor, basename, &producer)?;
                        if h.path.exists() {
                            fs::remove_file(&h.path).map_err(|e| ModuleError::io(&h.path, e))?;
                        }
                        text.push_str(&path_text(&h.path));
                        outputs.push(h.path);
                    }
                }
            }
            argv.push(text);
        }

        let log_dir = ctx.graph.producer_dir(id, &producer);
        let cwd = ctx.graph.workdir().join(id);
        fs::create_dir_all(&log_dir).map_err(|e| ModuleError::io(&log_dir, e))?;
        let stdout_path = log_dir.join("stdout.log");
        let stderr_path = log_dir.join("stderr.log");
        let stdout = File::create(&stdout_path).map_err(|e| ModuleError::io(&stdout_path, e))?;
        let stderr = File::create(&stderr_path).map_err(|e| ModuleError::io(&stderr_path, e))?;
        debug!("{id}: {argv:?}");
        let child = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(&cwd)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|e| ModuleError::CommandFailed(format!("cannot start `{}`: {e}", argv[0])))?;
        let status = wait(child, self.timeout)?;
        match status.code() {
            Some(c) if c == self.expected_exit => {}
            Some(c) => {
                return Err(ModuleError::CommandFailed(format!(
                    "`{}` exited with {c} (expected {}), see {}",
                    argv[0],
                    self.expected_exit,
                    stderr_path.display()
                )))
            }
            None => return Err(ModuleError::CommandFailed(format!("`{}` was terminated by a signal", argv[0]))),
        }
        for path in outputs {
            let written = fs::metadata(&path).is_ok_and(|m| m.len() > 0 || m.is_dir());
            if !written || !ctx.graph.confirm(&path) {
                return Err(ModuleError::MissingOutput(path));
            }
        }
        info!("{id}: {} finished", self.desc.name);
        Ok(Outcome::Done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(argv: &str) -> Result<CommandModule, String> {
        CommandModule::from_yaml(&format!("name: Copy\ncategory: runner\nparams:\n  n: {{type: int, default: 2}}\nargv: {argv}\n"))
    }

    #[test]
    fn token_parsing() {
        let a = parse_arg("{input:nifti:mod=ct}").unwrap();
        assert_eq!(a.pieces, [Piece::Input(parse_query("nifti:mod=ct").unwrap())]);
        let a = parse_arg("--out={output:nifti:mod=seg:roi=HEART:seg.nii.gz}").unwrap();
        assert_eq!(
            a.pieces,
            [
                Piece::Lit("--out=".into()),
                Piece::Output { descriptor: parse_descriptor("nifti:mod=seg:roi=HEART").unwrap(), basename: "seg.nii.gz".into() }
            ]
        );
        let a = parse_arg("{input:dicom:series={id}}*").unwrap();
        assert!(a.expand);
        assert_eq!(a.pieces, [Piece::Input(parse_query("dicom:series={id}").unwrap())]);
        assert!(parse_arg("x{input:nifti}*").is_err());
        assert!(parse_arg("{input:nifti").is_err());
        assert_eq!(parse_arg("{other}").unwrap().pieces, [Piece::Lit("{other}".into())]);
        assert_eq!(parse_arg("-n{param:n}").unwrap().pieces, [Piece::Lit("-n".into()), Piece::Param("n".into())]);
    }

    #[test]
    fn definition_checks() {
        assert!(module("[cp, '{input:nifti:mod=ct}', '{output:nifti:mod=ct2:copy.nii.gz}']").is_ok());
        assert!(module("[cp, '{input:nifti:mod=ct}']").unwrap_err().contains("output"));
        assert!(module("[cp, '{param:zz}', '{output:nifti:a.nii}']").unwrap_err().contains("zz"));
        assert!(module("[cp, '{output:nifti:a/b.nii}']").is_err());
        assert!(module("['{input:nifti}', '{output:nifti:a.nii}']").is_err());
        assert!(CommandModule::from_yaml("name: X\ncategory: runner\nscope: per-run\nargv: [a, '{output:json:a.json}']\n").is_err());
        assert!(CommandModule::from_yaml("name: X\ncategory: sorter\nargv: [a]\n").is_err());
    }
}
