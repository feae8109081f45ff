use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use glob::{MatchOptions, Pattern};
use log::{info, warn};
use serde_json::Value;
use walkdir::WalkDir;

use super::descriptor;
use crate::dicom::group_series;
use crate::semantic::{parse_descriptor, FileType, SemanticType};
use crate::workflow::{Category, Module, ModuleDescriptor, ModuleError, ParamSpec, ParamType, Params, RunContext, Scope};

/// All regular files below `root`, in a stable order.
fn walk_files(ctx: &mut RunContext, root: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(true).sort_by_file_name() {
        match entry {
            Ok(e) if e.file_type().is_file() => files.push(e.into_path()),
            Ok(_) => {}
            Err(e) => {
                let path = e.path().map_or_else(|| root.to_path_buf(), Path::to_path_buf);
                ctx.skip_input(&path, e.to_string());
            }
        }
    }
    files
}

/// Sorts DICOM files into one instance per series.
pub struct DicomImporter {
    desc: ModuleDescriptor,
}

impl DicomImporter {
    pub fn new() -> Self {
        DicomImporter {
            desc: descriptor(
                "DicomImporter",
                Category::Importer,
                Scope::PerRun,
                "Scans the input directory and creates one instance per DICOM series.",
                vec![ParamSpec::new(
                    "link",
                    ParamType::Bool,
                    Value::Bool(false),
                    "symlink series files instead of copying them",
                )],
                &[],
                &["dicom"],
            ),
        }
    }
}

impl Default for DicomImporter {
    fn default() -> Self {
        Self::new()
    }
}

fn place(src: &Path, dst: &Path, link: bool) -> std::io::Result<()> {
    #[cfg(unix)]
    if link {
        let src = fs::canonicalize(src)?;
        return std::os::unix::fs::symlink(src, dst);
    }
    let _ = link;
    fs::copy(src, dst).map(|_| ())
}

impl Module for DicomImporter {
    fn descriptor(&self) -> &ModuleDescriptor {
        &self.desc
    }

    fn run_once(&self, ctx: &mut RunContext, params: &Params) -> Result<(), ModuleError> {
        let link = params.bool("link").unwrap_or(false);
        let root = ctx.input_dir.clone();
        if !root.is_dir() {
            return Err(ModuleError::io(&root, "input directory does not exist"));
        }
        let files = walk_files(ctx, &root);
        let sorting = group_series(&files);
        for s in &sorting.skipped {
            ctx.skip_input(&s.path, s.reason.clone());
        }
        for group in sorting.groups {
            let id = group.series_uid.clone();
            let attrs = BTreeMap::from([
                ("SeriesInstanceUID".to_string(), group.series_uid.clone()),
                ("StudyInstanceUID".to_string(), group.study_uid.clone()),
                ("Modality".to_string(), group.modality.clone()),
                ("file_count".to_string(), group.files.len().to_string()),
            ]);
            if let Err(e) = ctx.graph.add_instance(&id, attrs) {
                for f in &group.files {
                    ctx.skip_input(&f.path, e.to_string());
                }
                continue;
            }
            let dir = ctx.graph.producer_dir(&id, &ctx.producer).join("dicom");
            fs::create_dir_all(&dir).map_err(|e| ModuleError::io(&dir, e))?;
            for (i, f) in group.files.iter().enumerate() {
                let name = f.path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
                let dst = dir.join(format!("{:04}_{name}", i + 1));
                place(&f.path, &dst, link).map_err(|e| ModuleError::io(&dst, e))?;
            }
            let mut t = SemanticType::new(FileType::Dicom);
            if !group.modality.is_empty() {
                t = t.with("mod", &group.modality.to_ascii_lowercase());
            }
            let producer = ctx.producer.clone();
            ctx.graph.add_existing(&id, &dir, t, &producer)?;
            info!("series {id}: {} files", group.files.len());
        }
        Ok(())
    }
}

/// Creates one instance per file matching a glob pattern.
pub struct FileImporter {
    desc: ModuleDescriptor,
}

impl FileImporter {
    pub fn new() -> Self {
        FileImporter {
            desc: descriptor(
                "FileImporter",
                Category::Importer,
                Scope::PerRun,
                "Imports files matching a glob pattern, one instance per file.",
                vec![
                    ParamSpec::new(
                        "pattern",
                        ParamType::Str,
                        Value::from("*.nii.gz"),
                        "glob relative to the input directory; use **/ to descend",
                    ),
                    ParamSpec::new(
                        "descriptor",
                        ParamType::Str,
                        Value::from("nifti:mod=ct"),
                        "semantic type given to every imported file",
                    ),
                    ParamSpec::new(
                        "id_source",
                        ParamType::Str,
                        Value::from("stem"),
                        "instance id from the file name (stem) or its directory (parent)",
                    ),
                ],
                &[],
                &[],
            ),
        }
    }
}

impl Default for FileImporter {
    fn default() -> Self {
        Self::new()
    }
}

/// File name without its extension; `.gz` counts as part of a double extension.
pub(crate) fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let name = name.strip_suffix(".gz").unwrap_or(&name);
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Module for FileImporter {
    fn descriptor(&self) -> &ModuleDescriptor {
        &self.desc
    }

    fn check_config(&self, params: &Params, _segdb: &crate::segdb::Registry) -> Result<(), String> {
        let pattern = params.str("pattern").ok_or("pattern is required")?;
        Pattern::new(pattern).map_err(|e| format!("pattern `{pattern}`: {e}"))?;
        let d = params.str("descriptor").ok_or("descriptor is required")?;
        parse_descriptor(d).map_err(|e| e.to_string())?;
        match params.str("id_source") {
            Some("stem" | "parent") => Ok(()),
            other => Err(format!("id_source must be stem or parent, got {other:?}")),
        }
    }

    fn run_once(&self, ctx: &mut RunContext, params: &Params) -> Result<(), ModuleError> {
        let cfg = |k: &str| params.str(k).ok_or_else(|| ModuleError::Config(format!("{k} is required")));
        let pattern = Pattern::new(cfg("pattern")?).map_err(|e| ModuleError::Config(e.to_string()))?;
        let semantic = parse_descriptor(cfg("descriptor")?)?;
        let by_parent = cfg("id_source")? == "parent";
        let root = ctx.input_dir.clone();
        if !root.is_dir() {
            return Err(ModuleError::io(&root, "input directory does not exist"));
        }
        let options = MatchOptions { require_literal_separator: true, ..MatchOptions::new() };
        let mut seen = BTreeSet::new();
        let mut matched = 0;
        for path in walk_files(ctx, &root) {
            let Ok(rel) = path.strip_prefix(&root) else { continue };
            let rel = rel.to_string_lossy().replace('\\', "/");
            if !pattern.matches_with(&rel, options) {
                continue;
            }
            matched += 1;
            let id = if by_parent {
                path.parent()
                    .filter(|p| *p != root)
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| file_stem(&path))
            } else {
                file_stem(&path)
            };
            if !seen.insert(id.clone()) {
                ctx.skip_input(&path, format!("instance id `{id}` already imported"));
                continue;
            }
            let attrs = BTreeMap::from([("source_file".to_string(), rel.clone())]);
            if let Err(e) = ctx.graph.add_instance(&id, attrs) {
                ctx.skip_input(&path, e.to_string());
                continue;
            }
            let producer = ctx.producer.clone();
            ctx.graph.add_existing(&id, &path, semantic.clone(), &producer)?;
        }
        if matched == 0 {
            warn!("no files in {} match `{}`", root.display(), pattern.as_str());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems() {
        assert_eq!(file_stem(Path::new("a/case01.nii.gz")), "case01");
        assert_eq!(file_stem(Path::new("case.01.nii")), "case.01");
        assert_eq!(file_stem(Path::new("x.mha")), "x");
        assert_eq!(file_stem(Path::new("noext")), "noext");
    }
}
