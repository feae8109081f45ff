use std::fs;
use std::path::Path;

use medpipe::meta::{query_models, ModelFilter};
use medpipe::segdb::Registry;
use proptest::prelude::*;
use serde_json::json;

fn write_model(repo: &Path, dir: &str, modality: &str, task: &str, classes: &[&str]) {
    let doc = json!({
        "id": format!("{dir}-id"),
        "name": dir,
        "title": dir,
        "summary": {"description": "d", "intended_use": "research"},
        "task": task,
        "inputs": [{"format": "DICOM", "modality": modality, "description": "scan"}],
        "outputs": [{"type": if task == "segmentation" { "Segmentation" } else { "Prediction" }, "classes": classes, "description": "o"}],
        "model": {"architecture": "a", "training_data": "t", "evaluation": "e"},
        "refs": {"code_url": "https://example.org", "paper_url": "https://example.org", "citation": "c"},
        "license": {"code": "MIT", "weights": "MIT"}
    });
    fs::create_dir_all(repo.join(dir)).unwrap();
    fs::write(repo.join(dir).join("meta.json"), serde_json::to_string_pretty(&doc).unwrap()).unwrap();
}

fn fixture() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    write_model(tmp.path(), "lungmask", "CT", "segmentation", &["LEFT_LUNG", "RIGHT_LUNG"]);
    write_model(tmp.path(), "lobes", "CT", "segmentation", &["LEFT_UPPER_LUNG_LOBE", "RIGHT_LOWER_LUNG_LOBE"]);
    write_model(tmp.path(), "prostate_mr", "MR", "prediction", &["TUMOR"]);
    fs::create_dir_all(tmp.path().join("broken")).unwrap();
    fs::write(tmp.path().join("broken/meta.json"), "{").unwrap();
    tmp
}

fn names(repo: &Path, filter: &ModelFilter) -> Vec<String> {
    query_models(repo, filter, &Registry::bundled()).unwrap().models.into_iter().map(|m| m.meta.name).collect()
}

fn filter(modality: Option<&str>, task: Option<&str>, class: Option<&str>) -> ModelFilter {
    ModelFilter {
        modality: modality.map(str::to_string),
        task: task.map(str::to_string),
        output_class: class.map(str::to_string),
    }
}

#[test]
fn three_model_repository() {
    let repo = fixture();
    let all = query_models(repo.path(), &ModelFilter::default(), &Registry::bundled()).unwrap();
    let found: Vec<&str> = all.models.iter().map(|m| m.meta.name.as_str()).collect();
    assert_eq!(found, ["lobes", "lungmask", "prostate_mr"]);
    assert!(all.warnings.iter().any(|w| w.contains("broken")));

    assert_eq!(names(repo.path(), &filter(Some("CT"), None, None)), ["lobes", "lungmask"]);
    assert_eq!(names(repo.path(), &filter(Some("ct"), Some("segmentation"), Some("LEFT_LUNG"))), ["lungmask"]);
    assert_eq!(names(repo.path(), &filter(None, Some("prediction"), None)), ["prostate_mr"]);
    assert!(names(repo.path(), &filter(Some("MR"), Some("segmentation"), None)).is_empty());

    let unknown = query_models(repo.path(), &filter(None, None, Some("LEFT_LUNGG")), &Registry::bundled()).unwrap();
    assert!(unknown.models.is_empty());
    assert!(unknown.warnings.iter().any(|w| w.contains("LEFT_LUNG")));
}

fn opt(values: &'static [&'static str]) -> impl Strategy<Value = Option<&'static str>> {
    prop::option::of(prop::sample::select(values))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adding_a_constraint_only_narrows(
        m in opt(&["CT", "MR", "PET"]),
        t in opt(&["segmentation", "prediction"]),
        c in opt(&["LEFT_LUNG", "TUMOR", "RIGHT_LOWER_LUNG_LOBE"]),
        extra in 0usize..3,
        value in prop::sample::select(&["CT", "segmentation", "TUMOR"][..]),
    ) {
        let repo = fixture();
        let base = filter(m, t, c);
        let mut narrowed = base.clone();
        match extra {
            0 => narrowed.modality = Some(value.to_string()),
            1 => narrowed.task = Some(value.to_string()),
            _ => narrowed.output_class = Some(value.to_string()),
        }
        let wide = names(repo.path(), &base);
        if base.modality.is_some() && extra == 0 || base.task.is_some() && extra == 1 || base.output_class.is_some() && extra == 2 {
            return Ok(());
        }
        for n in names(repo.path(), &narrowed) {
            prop_assert!(wide.contains(&n));
        }
    }
}
