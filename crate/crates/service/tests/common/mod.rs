#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mvinpaint::segmentation::AnnotationSet;
use mvinpaint::synthetic::{SyntheticConfig, SyntheticScene};
use mvinpaint::Mask;
use mvinpaint_service::Store;
use serde_json::json;

/// Small synthetic occluder scene exported as a dataset directory.
pub fn synthetic_dir(root: &Path, size: u32, views: usize) -> PathBuf {
    let dir = root.join("dataset");
    let syn = SyntheticScene::occluder(SyntheticConfig {
        width: size,
        height: size,
        n_train: views,
        n_test: 2,
        ..SyntheticConfig::default()
    })
    .unwrap();
    syn.export(&dir, "demo").unwrap();
    dir
}

/// Clicks at the center of the object in view 0, read from the exported
/// ground-truth mask.
pub fn clicks(dataset: &Path) -> AnnotationSet {
    let m = Mask::load_png(&dataset.join("gt_masks/000.png")).unwrap();
    let (x0, y0, x1, y1) = m.bbox().unwrap();
    let (cx, cy) = ((x0 + x1) / 2, (y0 + y1) / 2);
    assert!(m.get(cx, cy));
    AnnotationSet {
        source_view: 0,
        positive: vec![[cx as f64 + 0.5, cy as f64 + 0.5]],
        negative: Vec::new(),
    }
}

pub fn store(root: &Path) -> Store {
    Store::open(&root.join("data")).unwrap()
}

/// Segment config small enough for tests.
pub fn quick_segment() -> serde_json::Value {
    json!({"grid_resolution": 16, "geometry_iterations": 250, "iterations": 150, "stages": 2})
}

pub fn quick_inpaint() -> serde_json::Value {
    json!({
        "grid_resolution": 16, "original_iterations": 250, "iterations": 150,
        "patch_factor": 4, "masks": "segment"
    })
}
