use serde::Serialize;
use serde_json::Value;

use super::{descriptor, single_input, write_output};
use crate::segdb::Registry;
use crate::semantic::{parse_query, FileType, SemanticType};
use crate::volume::{self, DataType, VolumeGrid};
use crate::workflow::{
    Category, Module, ModuleDescriptor, ModuleError, Outcome, ParamSpec, ParamType, Params, RunContext, Scope,
};

/// Binary mask: 1 where the voxel is at or above `threshold`.
pub fn threshold_mask(g: &VolumeGrid, threshold: f64) -> VolumeGrid {
    let voxels = g.voxels.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
    g.with_voxels(DataType::U8, voxels)
}

/// Minimal segmentation model used by the demo workspace.
pub struct ThresholdRunner {
    desc: ModuleDescriptor,
}

impl ThresholdRunner {
    pub fn new() -> Self {
        ThresholdRunner {
            desc: descriptor(
                "ThresholdRunner",
                Category::Runner,
                Scope::PerInstance,
                "Segments voxels at or above a threshold into a binary mask.",
                vec![
                    ParamSpec::new("threshold", ParamType::Float, Value::from(0.0), "inclusive lower bound"),
                    ParamSpec::new("roi", ParamType::Str, Value::from("BODY"), "segment id of the mask"),
                    ParamSpec::new("input", ParamType::Str, Value::from("nifti:mod=ct"), "image query"),
                ],
                &["nifti:mod=ct"],
                &["nifti:mod=seg", "json:type=values"],
            ),
        }
    }
}

impl Default for ThresholdRunner {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize)]
struct Values<'a> {
    roi: &'a str,
    threshold: f64,
    voxels_segmented: usize,
    voxels_total: usize,
}

impl Module for ThresholdRunner {
    fn descriptor(&self) -> &ModuleDescriptor {
        &self.desc
    }

    fn check_config(&self, params: &Params, segdb: &Registry) -> Result<(), String> {
        let roi = params.str("roi").ok_or("roi is required")?;
        segdb.lookup(roi).map_err(|e| e.to_string())?;
        let input = params.str("input").ok_or("input is required")?;
        parse_query(input).map_err(|e| e.to_string())?;
        if !params.f64("threshold").is_some_and(f64::is_finite) {
            return Err("threshold must be a finite number".into());
        }
        Ok(())
    }

    fn run_instance(&self, ctx: &mut RunContext, id: &str, params: &Params) -> Result<Outcome, ModuleError> {
        let threshold = params.f64("threshold").unwrap_or(0.0);
        let roi = params.str("roi").unwrap_or("BODY");
        ctx.segdb.lookup(roi)?;
        let query = parse_query(params.str("input").unwrap_or("nifti:mod=ct"))?;
        let input = single_input(&ctx.graph, id, &query)?;
        let image = volume::read_nifti(&input.path)?;
        let mask = threshold_mask(&image, threshold);
        let seg = SemanticType::new(FileType::Nifti).with("mod", "seg").with("roi", roi);
        let producer = ctx.producer.clone();
        let handle = ctx.graph.register_output(id, &seg, "seg.nii.gz", &producer)?;
        volume::write_nifti(&mask, &handle.path)?;
        ctx.graph.confirm(&handle.path);
        let values = Values { roi, threshold, voxels_segmented: mask.count_nonzero(), voxels_total: mask.len() };
        let json = serde_json::to_vec_pretty(&values).expect("plain struct");
        let t = SemanticType::new(FileType::Json).with("type", "values");
        write_output(&mut ctx.graph, id, &producer, &t, "values.json", &json)?;
        Ok(Outcome::Done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[f64]) -> VolumeGrid {
        VolumeGrid::from_voxels([v.len(), 1, 1], DataType::F32, v.to_vec()).unwrap()
    }

    #[test]
    fn threshold_boundaries() {
        assert_eq!(threshold_mask(&grid(&[-5.0, 1.0, 2.9]), 3.0).count_nonzero(), 0);
        assert_eq!(threshold_mask(&grid(&[3.0; 4]), 3.0).count_nonzero(), 4);
        let ramp: Vec<f64> = (0..10).map(f64::from).collect();
        let mask = threshold_mask(&grid(&ramp), 5.0);
        assert_eq!(mask.count_nonzero(), 5);
        assert_eq!(mask.datatype, DataType::U8);
    }
}
