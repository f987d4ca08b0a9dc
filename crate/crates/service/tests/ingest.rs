mod common;

use std::fs;
use std::path::Path;

use mvinpaint::dataset::{FrameEntry, IntrinsicsEntry, TransformsFile};
use mvinpaint::{Image, Pose};
use mvinpaint_service::{export, ingest, ServiceError};
use nalgebra::Vector3;

fn toy_scene(dir: &Path, views: usize) -> TransformsFile {
    fs::create_dir_all(dir.join("images")).unwrap();
    let mut frames = Vec::new();
    for k in 0..views {
        let img = Image::from_fn(8, 6, |x, y| [x as f64 / 8.0, y as f64 / 6.0, k as f64 / views as f64]);
        let file = format!("images/{k:02}.png");
        img.save_png(&dir.join(&file)).unwrap();
        let pose = Pose::look_at(
            Vector3::new(k as f64 * 0.3, 0.1, 0.0),
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::y(),
        )
        .unwrap();
        frames.push(FrameEntry {
            file,
            matrix: pose.to_row_major().to_vec(),
        });
    }
    let t = TransformsFile {
        scene_id: None,
        intrinsics: IntrinsicsEntry {
            fx: 10.0,
            fy: 10.0,
            cx: 4.0,
            cy: 3.0,
            w: 8,
            h: 6,
        },
        frames,
        near: Some(1.0),
        far: Some(9.0),
        bounds: None,
        mask_dir: None,
        depth_dir: None,
        units: Some("meters".into()),
    };
    t.save(&dir.join("transforms.json")).unwrap();
    t
}

#[test]
fn three_view_toy_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("toy");
    toy_scene(&dir, 3);
    let (m, loaded) = ingest(&dir, None).unwrap();
    assert_eq!(m.id, "toy");
    assert_eq!(m.frames.len(), 3);
    assert_eq!(loaded.scene.view_count(), 3);
    assert_eq!(m.near, 1.0);
}

#[test]
fn reflection_rejected_with_frame_index() {
    let tmp = tempfile::tempdir().unwrap();
    let mut t = toy_scene(tmp.path(), 3);
    for r in 0..3 {
        t.frames[1].matrix[r * 4] *= -1.0;
    }
    t.save(&tmp.path().join("transforms.json")).unwrap();
    let err = ingest(tmp.path(), Some("x")).unwrap_err();
    assert!(err.is_validation());
    let msg = err.to_string();
    assert!(msg.contains("frames[1].matrix"), "{msg}");
    assert!(msg.contains("determinant"), "{msg}");
}

#[test]
fn schema_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    toy_scene(tmp.path(), 2);
    let path = tmp.path().join("transforms.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["frames"][1]["matrix"] = serde_json::json!("not a matrix");
    fs::write(&path, v.to_string()).unwrap();
    let msg = ingest(tmp.path(), Some("x")).unwrap_err().to_string();
    assert!(msg.contains("frames[1].matrix"), "{msg}");

    v["frames"][1]["matrix"] = serde_json::json!([1.0, 0.0]);
    fs::write(&path, v.to_string()).unwrap();
    let msg = ingest(tmp.path(), Some("x")).unwrap_err().to_string();
    assert!(msg.contains("frames[1].matrix"), "{msg}");
}

#[test]
fn missing_image_listed() {
    let tmp = tempfile::tempdir().unwrap();
    toy_scene(tmp.path(), 3);
    fs::remove_file(tmp.path().join("images/01.png")).unwrap();
    match ingest(tmp.path(), Some("x")) {
        Err(ServiceError::Core(mvinpaint::Error::MissingFiles(f))) => {
            assert_eq!(f, vec!["images/01.png".to_string()])
        }
        other => panic!("expected missing files, got {:?}", other.map(|r| r.0)),
    }
}

#[test]
fn image_size_mismatch_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    toy_scene(tmp.path(), 2);
    Image::new(5, 5).save_png(&tmp.path().join("images/01.png")).unwrap();
    let err = ingest(tmp.path(), Some("x")).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("frames[1]"));
}

#[test]
fn bad_ids_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    toy_scene(tmp.path(), 2);
    for id in ["", "../up", "a b", "ü"] {
        assert!(matches!(ingest(tmp.path(), Some(id)), Err(ServiceError::Validation(_))), "{id:?}");
    }
}

#[test]
fn export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    toy_scene(&src, 4);
    let (m, _) = ingest(&src, Some("round")).unwrap();
    let out = tmp.path().join("out");
    export(&m, &src, &out).unwrap();
    let (back, _) = ingest(&out, None).unwrap();
    assert_eq!(back, m);
    for f in &m.frames {
        assert_eq!(fs::read(src.join(&f.file)).unwrap(), fs::read(out.join(&f.file)).unwrap());
    }
}

#[test]
fn synthetic_export_round_trip_with_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = common::synthetic_dir(tmp.path(), 24, 4);
    let t = TransformsFile::load(&dir.join("transforms.json")).unwrap();
    TransformsFile {
        mask_dir: Some("gt_masks".into()),
        ..t
    }
    .save(&dir.join("transforms.json"))
    .unwrap();
    let (m, loaded) = ingest(&dir, None).unwrap();
    assert_eq!(m.id, "demo");
    assert_eq!(loaded.masks().unwrap().unwrap().len(), 4);
    let out = tmp.path().join("copy");
    export(&m, &dir, &out).unwrap();
    let (back, copy) = ingest(&out, None).unwrap();
    assert_eq!(back, m);
    assert_eq!(copy.masks().unwrap(), loaded.masks().unwrap());
}

#[test]
fn store_rejects_duplicate_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    toy_scene(&src, 2);
    let store = common::store(tmp.path());
    store.ingest(&src, Some("a")).unwrap();
    assert!(matches!(store.ingest(&src, Some("a")), Err(ServiceError::Conflict(_))));
    assert_eq!(store.list().unwrap(), vec!["a".to_string()]);
    assert!(matches!(store.manifest("b"), Err(ServiceError::NotFound(_))));
}

/// Every check above, for the acceptance runner.
#[allow(dead_code)]
pub const CHECKS: &[(&str, fn())] = &[
    ("three_view_toy_scene", three_view_toy_scene),
    ("reflection_rejected_with_frame_index", reflection_rejected_with_frame_index),
    ("schema_errors_name_the_field", schema_errors_name_the_field),
    ("missing_image_listed", missing_image_listed),
    ("image_size_mismatch_rejected", image_size_mismatch_rejected),
    ("bad_ids_rejected", bad_ids_rejected),
    ("export_round_trip", export_round_trip),
    ("synthetic_export_round_trip_with_masks", synthetic_export_round_trip_with_masks),
    ("store_rejects_duplicate_ids", store_rejects_duplicate_ids),
];
