use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use walkdir::WalkDir;

fn medpipe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_medpipe"));
    c.env("MHUB_CONTAINER", "0");
    c
}

fn run(args: &[&str]) -> Output {
    medpipe().args(args).output().expect("spawn medpipe")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect()
}

fn demo(dir: &Path) {
    let o = run(&["demo", s(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn demo_validates_and_passes_its_test() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    demo(&ws);
    assert_eq!(code(&run(&["validate", s(&ws)])), 0);
    let out = tmp.path().join("test");
    let o = run(&["test", "--workspace", s(&ws), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.yml")).unwrap();
    assert!(report.contains("verdict: pass"), "{report}");
}

#[test]
fn overridden_threshold_is_a_deviation() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    demo(&ws);
    let out = tmp.path().join("test");
    let o = run(&["test", "--workspace", s(&ws), "--output", s(&out), "--config:ThresholdRunner.threshold=330"]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("report.yml")).unwrap().contains("verdict: deviation"));
}

#[test]
fn stdin_workflow_matches_file_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    demo(&ws);
    let input = ws.join("data/sample");
    let out_file = tmp.path().join("from_file");
    let o = run(&["run", "--workspace", s(&ws), "--workflow", "default", "--input", s(&input), "--output", s(&out_file)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let out_stdin = tmp.path().join("from_stdin");
    let mut child = medpipe()
        .args(["run", "--workspace", s(&ws), "--workflow", "-", "--input", s(&input), "--output", s(&out_stdin)])
        .stdin(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let text = fs::read(ws.join("config/default.yml")).unwrap();
    child.stdin.take().unwrap().write_all(&text).unwrap();
    assert_eq!(child.wait().unwrap().code(), Some(0));

    let a = tree(&out_file);
    assert_eq!(a.len(), 8);
    assert_eq!(a, tree(&out_stdin));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    assert_eq!(code(&run(&["scaffold", "my_model", s(&ws)])), 0);
    assert_eq!(code(&run(&["scaffold", "my_model", s(&ws)])), 2);
    assert_eq!(code(&run(&["scaffold", "my_model", s(&ws), "--force"])), 0);
    assert_eq!(code(&run(&["scaffold", "Bad-Name", s(&tmp.path().join("x"))])), 2);

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = tmp.path().join("out");
    let base = ["run", "--workspace", s(&ws), "--input", s(&empty), "--output", s(&out)];
    assert_eq!(code(&run(&base)), 4);
    // outside a container the directories must be given
    assert_eq!(code(&run(&["run", "--workspace", s(&ws)])), 2);
    let with = |o: &str| {
        let mut v = base.to_vec();
        v.push(o);
        code(&run(&v))
    };
    assert_eq!(with("--config:ThresholdRunner.threshold=high"), 2);
    assert_eq!(with("--config:ThresholdRunner.nope=1"), 2);
    assert_eq!(with("--config:Missing.x=1"), 2);
    assert_eq!(with("--config:novalue"), 2);
    assert_eq!(code(&run(&["run", "--workspace", s(&ws), "--workflow", "absent", "--input", s(&empty), "--output", s(&out)])), 2);
    assert_eq!(code(&run(&["nonsense"])), 2);
}

#[test]
fn validate_names_missing_recipe_line() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    assert_eq!(code(&run(&["scaffold", "lungs", s(&ws)])), 0);
    let recipe = fs::read_to_string(ws.join("Dockerfile")).unwrap();
    fs::write(ws.join("Dockerfile"), recipe.replace("ENTRYPOINT [\"mhub.run\"]\n", "")).unwrap();
    let o = run(&["validate", s(&ws)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("recipe.entrypoint"));
}

#[test]
fn segdb_queries_print_to_stdout() {
    let o = run(&["segdb", "lookup", "LEFT_LUNG"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("LEFT_LUNG\t"));
    let o = run(&["segdb", "composite", "LEFT_LUNG+TUMOR"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().next().unwrap().split('\t').next(), Some("LEFT_LUNG+TUMOR"));
    let o = run(&["segdb", "lookup", "LEFT_LUNGG"]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
}

#[test]
fn compare_reports_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(b.join("sub")).unwrap();
    fs::write(a.join("r.json"), r#"{"a": 1}"#).unwrap();
    fs::write(b.join("r.json"), r#"{"a": 1.0}"#).unwrap();
    let o = run(&["compare", s(&a), s(&b), "--rule", "*.json=keyvalue"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    fs::write(b.join("sub/seg.nii.gz"), b"x").unwrap();
    let o = run(&["compare", s(&a), s(&b), "--rule", "*.json=keyvalue"]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stdout).contains("- sub/seg.nii.gz"));
}
