use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use medpipe::modules::CommandModule;
use medpipe::scaffold::{demo_volume, write_demo_cohort};
use medpipe::segdb::Registry;
use medpipe::semantic::InstanceStatus;
use medpipe::workflow::{
    execute_workflow, load_workflow, InvocationStatus, ModuleRegistry, RunLog, RunOptions, StepStatus,
};
use medpipe::ExitCode;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

fn run(text: &str, modules: &ModuleRegistry, input: &Path, output: &Path) -> RunLog {
    let w = load_workflow(text, modules).unwrap();
    let opts = RunOptions { input_dir: input.into(), output_dir: output.into(), ..Default::default() };
    execute_workflow(&w, modules, &Registry::bundled(), &opts).unwrap()
}

fn digest_tree(root: &Path) -> BTreeMap<PathBuf, String> {
    WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().to_path_buf(), hex::encode(Sha256::digest(fs::read(e.path()).unwrap()))))
        .collect()
}

const DEMO: &str = "execute:
- FileImporter
- {module: ThresholdRunner, threshold: 100.0}
- module: DataOrganizer
  targets: ['nifti:mod=seg -> {id}/seg.nii.gz']
";

#[test]
fn every_instance_step_records_each_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_demo_cohort(&input, 2).unwrap();
    let log = run(DEMO, &ModuleRegistry::builtin(), &input, &tmp.path().join("out"));
    assert_eq!(log.exit, ExitCode::Ok);
    let ids: BTreeSet<String> = log.instances.iter().map(|i| i.id.clone()).collect();
    assert_eq!(ids.len(), 2);
    for step in log.steps.iter().skip(1) {
        let seen: BTreeSet<String> = step.invocations.iter().map(|r| r.instance.clone()).collect();
        assert_eq!(seen, ids, "{}", step.module);
        assert!(step.invocations.iter().all(|r| r.status == InvocationStatus::Ok));
    }
    assert!(tmp.path().join("out/case_01/seg.nii.gz").is_file());
}

#[test]
fn repeated_runs_have_identical_logs_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_demo_cohort(&input, 3).unwrap();
    let m = ModuleRegistry::builtin();
    let a = run(DEMO, &m, &input, &tmp.path().join("a"));
    let b = run(DEMO, &m, &input, &tmp.path().join("b"));
    assert_eq!(a.signature(), b.signature());
    let strip = |root: &Path| -> BTreeMap<PathBuf, String> {
        digest_tree(root).into_iter().map(|(p, d)| (p.strip_prefix(root).unwrap().to_path_buf(), d)).collect()
    };
    assert_eq!(strip(&tmp.path().join("a")), strip(&tmp.path().join("b")));
}

fn with_command(yaml: &str) -> ModuleRegistry {
    let mut m = ModuleRegistry::builtin();
    m.register(Arc::new(CommandModule::from_yaml(yaml).unwrap())).unwrap();
    m
}

#[test]
fn failure_is_isolated_to_one_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_demo_cohort(&input, 3).unwrap();
    let m = with_command(
        r#"name: PickyCopy
category: processor
outputs: [nifti:mod=ct:copy=yes]
argv: [sh, -c, 'case "$1" in */case_01.nii.gz) exit 7;; esac; cp "$1" "$2"', sh, '{input:nifti:mod=ct}', '{output:nifti:mod=ct:copy=yes:copy.nii.gz}']
"#,
    );
    let text = "execute:
- FileImporter
- PickyCopy
- {module: ThresholdRunner, input: 'nifti:copy=yes'}
- module: DataOrganizer
  targets: ['nifti:mod=seg -> {id}.nii.gz']
";
    let out = tmp.path().join("out");
    let log = run(text, &m, &input, &out);
    assert_eq!(log.exit, ExitCode::Ok);
    let status: BTreeMap<&str, InstanceStatus> = log.instances.iter().map(|i| (i.id.as_str(), i.status)).collect();
    assert_eq!(status["case_01"], InstanceStatus::Failed);
    assert_eq!(status["case_00"], InstanceStatus::Active);
    assert_eq!(status["case_02"], InstanceStatus::Active);
    let picky = &log.steps[1];
    assert_eq!(picky.status, StepStatus::Ok);
    let failed: Vec<&str> = picky
        .invocations
        .iter()
        .filter(|r| r.status == InvocationStatus::Failed)
        .map(|r| r.instance.as_str())
        .collect();
    assert_eq!(failed, ["case_01"]);
    // later steps skip the failed instance
    assert!(log.steps[2].invocations.iter().all(|r| r.instance != "case_01"));
    let written: BTreeSet<String> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(written, BTreeSet::from(["case_00.nii.gz".to_string(), "case_02.nii.gz".to_string()]));
}

#[test]
fn all_instances_failing_is_a_run_failure_with_no_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_demo_cohort(&input, 2).unwrap();
    let m = with_command("name: Broken\ncategory: runner\nargv: ['false', '{output:json:x.json}']\n");
    let log = run("execute: [FileImporter, Broken]", &m, &input, &tmp.path().join("out"));
    assert_eq!(log.steps[1].status, StepStatus::Failed);
    assert_eq!(log.exit, ExitCode::NoInstances);
}

#[test]
fn command_runs_once_per_instance_and_inputs_stay_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_demo_cohort(&input, 4).unwrap();
    let counter = tmp.path().join("count.txt");
    let m = with_command(&format!(
        "name: Counted
category: processor
params: {{tag: {{type: str, default: hello}}}}
argv: [sh, -c, 'echo \"$3\" >> {}; cp \"$1\" \"$2\"', sh, '{{input:nifti:mod=ct}}', '{{output:nifti:mod=ct:n=1:c.nii.gz}}', '{{param:tag}}']
",
        counter.display()
    ));
    let before = digest_tree(&input);
    let log = run("execute: [FileImporter, {module: Counted, tag: tick}]", &m, &input, &tmp.path().join("out"));
    assert_eq!(log.exit, ExitCode::Ok);
    let lines: Vec<String> = fs::read_to_string(&counter).unwrap().lines().map(str::to_string).collect();
    assert_eq!(lines, vec!["tick".to_string(); 4]);
    assert_eq!(digest_tree(&input), before);
}

#[test]
fn recursive_pattern_matches_a_directory_walk() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    let layout = ["a.nii.gz", "x/b.nii.gz", "x/y/c.nii.gz", "x/y/z/d.nii.gz", "x/notes.txt", "e.nii", "x/y/f.nii.gz.bak"];
    let g = demo_volume(0);
    for rel in layout {
        let p = input.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        if rel.ends_with(".nii.gz") {
            medpipe::volume::write_nifti(&g, &p).unwrap();
        } else {
            fs::write(&p, b"x").unwrap();
        }
    }
    let expected: BTreeSet<String> = WalkDir::new(&input)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.file_name().to_string_lossy().ends_with(".nii.gz"))
        .map(|e| e.path().strip_prefix(&input).unwrap().to_string_lossy().replace('\\', "/"))
        .collect();
    let log = run("execute: [{module: FileImporter, pattern: '**/*.nii.gz'}]", &ModuleRegistry::builtin(), &input, &tmp.path().join("out"));
    let got: BTreeSet<String> = log.instances.iter().map(|i| i.attributes["source_file"].clone()).collect();
    assert_eq!(got, expected);
    let log = run("execute: [{module: FileImporter, pattern: '*.nii.gz'}]", &ModuleRegistry::builtin(), &input, &tmp.path().join("out2"));
    let got: Vec<&str> = log.instances.iter().map(|i| i.attributes["source_file"].as_str()).collect();
    assert_eq!(got, ["a.nii.gz"]);
}
