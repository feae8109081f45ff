use std::io::Read;
use std::path::{Path, PathBuf};
use std::process;

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use medpipe::meta::{self, ModelFilter, Severity};
use medpipe::scaffold::{self, Workspace, CONTAINER_INPUT, CONTAINER_OUTPUT};
use medpipe::segdb::Registry;
use medpipe::stats::{self, EvalConfig};
use medpipe::testing::{self, ContentKind, Rules, TestRun};
use medpipe::workflow::{self, RunOptions};
use medpipe::ExitCode;

/// Reproducible medical-imaging pipelines.
#[derive(Parser, Debug)]
#[command(name = "medpipe", version, after_help = "Parameter overrides: --config:<Module>.<param>=<value> (repeatable)")]
struct Cli {
    /// Log progress.
    #[arg(long, global = true)]
    verbose: bool,
    /// Log everything, including external command lines.
    #[arg(long, global = true)]
    debug: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a workflow on an input directory.
    Run {
        #[arg(long, default_value = ".")]
        workspace: PathBuf,
        /// Workflow name under config/, a path to a YAML file, or `-` for stdin.
        #[arg(long, default_value = "default")]
        workflow: String,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Directory for intermediate files (a temporary one otherwise).
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Keep the temporary working directory.
        #[arg(long)]
        keep_workdir: bool,
    },
    /// Run the workspace's reproducibility test.
    Test {
        #[arg(long, default_value = ".")]
        workspace: PathBuf,
        /// Receives outputs/ and report.yml.
        #[arg(long)]
        output: PathBuf,
        /// Download and extraction cache.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Compare an output tree against a reference tree.
    Compare {
        sample: PathBuf,
        reference: PathBuf,
        /// `glob=kind` with kind segmentation, keyvalue or binary; first match wins.
        #[arg(long = "rule")]
        rules: Vec<String>,
        #[arg(long, default_value_t = testing::DICE_THRESHOLD)]
        dice_threshold: f64,
        /// Write the YAML report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check a workspace: build recipe, metadata, workflows, module definitions, test spec.
    Validate {
        #[arg(default_value = ".")]
        workspace: PathBuf,
    },
    /// List models in a repository directory matching all filters.
    Models {
        repo: PathBuf,
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        task: Option<String>,
        /// Output class id, e.g. LEFT_LUNG.
        #[arg(long = "class")]
        output_class: Option<String>,
    },
    /// Query the segment registry.
    Segdb {
        #[command(subcommand)]
        query: SegdbQuery,
    },
    /// Evaluate predictions against references and run the cohort statistics.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        clinical: Option<PathBuf>,
        /// Evaluation config (YAML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Create a new model workspace.
    Scaffold {
        name: String,
        dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Create the threshold demo workspace with sample and reference data.
    Demo {
        dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand, Debug)]
enum SegdbQuery {
    /// Print one segment.
    Lookup { id: String },
    /// Parse `CONTEXT+FINDING`.
    Composite { text: String },
    /// Print all segments.
    List,
}

#[derive(Debug)]
struct Failure {
    code: ExitCode,
    message: String,
}

impl Failure {
    fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure::new(ExitCode::Config, message)
    }
}

impl From<workflow::WorkflowError> for Failure {
    fn from(e: workflow::WorkflowError) -> Self {
        Failure::new(e.exit_code(), e.to_string())
    }
}

/// Splits `--config:Module.param=value` arguments from the rest.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--config:") {
            Some(o) => overrides.push(o.to_string()),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

/// `MHUB_CONTAINER` forces the answer either way (`0`/`false` for no).
fn in_container() -> bool {
    match std::env::var("MHUB_CONTAINER") {
        Ok(v) => !matches!(v.trim().to_ascii_lowercase().as_str(), "0" | "false" | "no" | ""),
        Err(_) => Path::new("/.dockerenv").exists(),
    }
}

fn io_dir(given: Option<PathBuf>, container_default: &str, flag: &str) -> Result<PathBuf, Failure> {
    match given {
        Some(p) => Ok(p),
        None if in_container() => Ok(PathBuf::from(container_default)),
        None => Err(Failure::config(format!("{flag} is required outside a container"))),
    }
}

fn open_workspace(dir: &Path) -> Result<Workspace, Failure> {
    Workspace::open(dir).map_err(|e| Failure::config(e.to_string()))
}

fn workflow_text(ws: &Workspace, name: &str) -> Result<String, Failure> {
    if name == "-" {
        let mut text = String::new();
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| Failure::config(format!("reading workflow from stdin: {e}")))?;
        return Ok(text);
    }
    let direct = Path::new(name);
    let path = if direct.is_file() { direct.to_path_buf() } else { ws.workflow_path(name) };
    std::fs::read_to_string(&path).map_err(|e| Failure::config(format!("workflow `{name}` ({}): {e}", path.display())))
}

fn cmd_run(
    workspace: &Path,
    name: &str,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    workdir: Option<PathBuf>,
    keep_workdir: bool,
    overrides: &[String],
) -> Result<ExitCode, Failure> {
    let input_dir = io_dir(input, CONTAINER_INPUT, "--input")?;
    let output_dir = io_dir(output, CONTAINER_OUTPUT, "--output")?;
    let ws = open_workspace(workspace)?;
    let modules = ws.modules()?;
    let w = workflow::load_workflow(&workflow_text(&ws, name)?, &modules)?;
    let w = workflow::apply_overrides(w, overrides, &modules)?;
    let opts = RunOptions { input_dir, output_dir, workdir, keep_workdir };
    let log = workflow::execute_workflow(&w, &modules, &Registry::bundled(), &opts)?;
    for s in &log.steps {
        let failed = s.invocations.iter().filter(|i| i.status == workflow::InvocationStatus::Failed).count();
        eprintln!(
            "{:>2} {:<18} {:?} ({} invocations, {failed} failed, {:.2}s)",
            s.index, s.module, s.status, s.invocations.len(), s.elapsed_secs
        );
    }
    eprintln!("{} active instance(s); exit {:?}", log.active_instances(), log.exit);
    if let Some(dir) = &log.workdir {
        eprintln!("working directory kept at {}", dir.display());
    }
    Ok(log.exit)
}

fn cmd_test(workspace: &Path, output: &Path, cache: Option<PathBuf>, overrides: &[String]) -> Result<ExitCode, Failure> {
    let ws = open_workspace(workspace)?;
    let mut spec = ws.test_spec().map_err(Failure::config)?;
    spec.config.extend(overrides.iter().cloned());
    let modules = ws.modules()?;
    let w = ws.load_workflow(&spec.workflow, &modules)?;
    let cache_dir = cache.unwrap_or_else(|| ws.root.join(".cache"));
    let run = TestRun {
        workflow: &w,
        modules: &modules,
        segdb: &Registry::bundled(),
        base_dir: &ws.root,
        output_dir: output,
        cache_dir: &cache_dir,
    };
    let report = testing::run_reproducibility_test(&spec, &run).map_err(|e| match e {
        testing::TestError::Workflow(w) => Failure::from(w),
        testing::TestError::Spec(m) => Failure::config(m),
        other => Failure::new(ExitCode::RunFailure, other.to_string()),
    })?;
    print_report_summary(&report);
    eprintln!("report written to {}", output.join("report.yml").display());
    Ok(report.summary.verdict.exit_code())
}

fn print_report_summary(report: &testing::TestReport) {
    for m in &report.files.missing {
        eprintln!("missing: {m}");
    }
    for e in &report.files.extra {
        eprintln!("extra:   {e}");
    }
    for f in report.compared.iter().filter(|f| f.deviation) {
        eprintln!("differs: {}", f.path);
    }
    if let Some(e) = &report.error {
        eprintln!("error: {e}");
    }
    eprintln!(
        "{:?}: {} file(s) compared, {} deviation(s)",
        report.summary.verdict, report.summary.files_checked, report.summary.deviations
    );
}

fn parse_rule(text: &str) -> Result<(String, ContentKind), Failure> {
    let (glob, kind) = text.rsplit_once('=').ok_or_else(|| Failure::config(format!("rule `{text}` is not glob=kind")))?;
    let kind = match kind.trim() {
        "segmentation" => ContentKind::Segmentation,
        "keyvalue" => ContentKind::Keyvalue,
        "binary" => ContentKind::Binary,
        other => return Err(Failure::config(format!("unknown content kind `{other}`"))),
    };
    Ok((glob.trim().to_string(), kind))
}

fn cmd_compare(
    sample: &Path,
    reference: &Path,
    rules: &[String],
    threshold: f64,
    report_path: Option<PathBuf>,
) -> Result<ExitCode, Failure> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Failure::config("--dice-threshold must be in (0, 1]"));
    }
    for d in [sample, reference] {
        if !d.is_dir() {
            return Err(Failure::config(format!("{} is not a directory", d.display())));
        }
    }
    let parsed = rules.iter().map(|r| parse_rule(r)).collect::<Result<Vec<_>, _>>()?;
    let borrowed: Vec<(&str, ContentKind)> = parsed.iter().map(|(g, k)| (g.as_str(), *k)).collect();
    let rules = Rules::new(&borrowed).map_err(|e| Failure::config(e.to_string()))?;
    let report = testing::compare_dirs(sample, reference, &rules, threshold);
    match report_path {
        Some(p) => std::fs::write(&p, report.to_yaml())
            .map_err(|e| Failure::new(ExitCode::RunFailure, format!("{}: {e}", p.display())))?,
        None => print!("{}", report.to_yaml()),
    }
    print_report_summary(&report);
    Ok(report.summary.verdict.exit_code())
}

fn cmd_validate(workspace: &Path) -> Result<ExitCode, Failure> {
    let ws = open_workspace(workspace)?;
    let issues = scaffold::validate_workspace(&ws, &Registry::bundled());
    for i in &issues {
        eprintln!("{i}");
    }
    let errors = issues.iter().filter(|i| i.severity == Severity::Error).count();
    eprintln!("{errors} error(s), {} warning(s)", issues.len() - errors);
    Ok(if errors == 0 { ExitCode::Ok } else { ExitCode::Config })
}

fn cmd_models(repo: &Path, filter: ModelFilter) -> Result<ExitCode, Failure> {
    let found = meta::query_models(repo, &filter, &Registry::bundled()).map_err(|e| Failure::config(e.to_string()))?;
    for w in &found.warnings {
        warn!("{w}");
    }
    for m in &found.models {
        println!("{}\t{}\t{}", m.meta.name, m.meta.task, m.dir.display());
    }
    Ok(ExitCode::Ok)
}

fn cmd_segdb(query: SegdbQuery) -> Result<ExitCode, Failure> {
    let reg = Registry::bundled();
    let line = |s: &medpipe::segdb::SegmentDef| {
        format!("{}\t{}\t{}\t#{:02x}{:02x}{:02x}", s.id, s.name, s.category, s.rgb[0], s.rgb[1], s.rgb[2])
    };
    match query {
        SegdbQuery::Lookup { id } => {
            let s = reg.lookup(&id).map_err(|e| Failure::config(e.to_string()))?;
            println!("{}", line(s));
        }
        SegdbQuery::Composite { text } => {
            let c = reg.parse_composite(&text).map_err(|e| Failure::config(e.to_string()))?;
            println!("{c}\t{}\t{}", c.context.name, c.finding.name);
        }
        SegdbQuery::List => {
            for s in reg.iter() {
                println!("{}", line(s));
            }
        }
    }
    Ok(ExitCode::Ok)
}

fn cmd_evaluate(
    predictions: &Path,
    references: &Path,
    clinical: Option<&Path>,
    config: &Path,
    output: &Path,
) -> Result<ExitCode, Failure> {
    let text = std::fs::read_to_string(config).map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
    let cfg = EvalConfig::from_yaml(&text).map_err(|e| Failure::config(e.to_string()))?;
    let reg = Registry::bundled();
    let eval = stats::evaluate_cohort(predictions, references, clinical, &cfg, &reg).map_err(|e| match e {
        stats::CohortError::Io { .. } => Failure::new(ExitCode::RunFailure, e.to_string()),
        other => Failure::config(other.to_string()),
    })?;
    for x in &eval.exclusions {
        warn!("excluded {}: {:?} {}", x.case_id, x.reason, x.detail);
    }
    if eval.rows.is_empty() {
        return Err(Failure::new(ExitCode::NoInstances, "no case could be evaluated"));
    }
    let (tests, cors) = stats::run_statistics(&eval.rows, &cfg.comparisons, &cfg.correlations, cfg.variant);
    let written = stats::export_stats(&eval.rows, &tests, &cors, output)
        .map_err(|e| Failure::new(ExitCode::RunFailure, e.to_string()))?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(ExitCode::Ok)
}

fn dispatch(cli: Cli, overrides: &[String]) -> Result<ExitCode, Failure> {
    if !overrides.is_empty() && !matches!(cli.command, Command::Run { .. } | Command::Test { .. }) {
        return Err(Failure::config("--config overrides apply to run and test only"));
    }
    for o in overrides {
        let ok = o.split_once('=').and_then(|(k, _)| k.split_once('.')).is_some_and(|(m, p)| !m.is_empty() && !p.is_empty());
        if !ok {
            return Err(Failure::config(format!("override `--config:{o}` is not of the form Module.param=value")));
        }
    }
    match cli.command {
        Command::Run { workspace, workflow, input, output, workdir, keep_workdir } => {
            cmd_run(&workspace, &workflow, input, output, workdir, keep_workdir, overrides)
        }
        Command::Test { workspace, output, cache } => cmd_test(&workspace, &output, cache, overrides),
        Command::Compare { sample, reference, rules, dice_threshold, report } => {
            cmd_compare(&sample, &reference, &rules, dice_threshold, report)
        }
        Command::Validate { workspace } => cmd_validate(&workspace),
        Command::Models { repo, modality, task, output_class } => {
            cmd_models(&repo, ModelFilter { modality, task, output_class })
        }
        Command::Segdb { query } => cmd_segdb(query),
        Command::Evaluate { predictions, references, clinical, config, output } => {
            cmd_evaluate(&predictions, &references, clinical.as_deref(), &config, &output)
        }
        Command::Scaffold { name, dir, force } => {
            scaffold::scaffold(&name, &dir, force).map_err(|e| Failure::config(e.to_string()))?;
            eprintln!("created {}", dir.display());
            eprintln!("{}", scaffold::run_command_line(&name, "$PWD/input", "$PWD/output"));
            Ok(ExitCode::Ok)
        }
        Command::Demo { dir, force } => {
            scaffold::create_demo(&dir, force).map_err(|e| Failure::config(e.to_string()))?;
            eprintln!("demo workspace with sample and reference data in {}", dir.display());
            Ok(ExitCode::Ok)
        }
    }
}

fn main() {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let level = if cli.debug {
        log::LevelFilter::Debug
    } else if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    info!("medpipe {}", env!("CARGO_PKG_VERSION"));
    let code = match dispatch(cli, &overrides) {
        Ok(code) => code,
        Err(f) => {
            error!("{}", f.message);
            f.code
        }
    };
    process::exit(code.code());
}
