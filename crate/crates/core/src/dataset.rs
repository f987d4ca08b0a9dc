//! `transforms.json` scene description.
//!
//! ```json
//! {
//!   "scene_id": "desk",
//!   "intrinsics": {"fx": 80.0, "fy": 80.0, "cx": 32.0, "cy": 32.0, "w": 64, "h": 64},
//!   "frames": [{"file": "images/000.png", "matrix": [16 floats, row-major camera-to-world]}],
//!   "near": 4.5, "far": 12.5,
//!   "bounds": {"min": [x, y, z], "max": [x, y, z]},
//!   "mask_dir": "masks", "depth_dir": "depths", "units": "meters"
//! }
//! ```
//!
//! Only `intrinsics` and `frames` are required.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::geometry::{Intrinsics, Pose};
use crate::imaging::{Image, Mask, ScalarMap};
use crate::scene::Scene;

pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: u32,
    pub h: u32,
}

impl From<&Intrinsics> for IntrinsicsEntry {
    fn from(i: &Intrinsics) -> Self {
        IntrinsicsEntry {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            w: i.width,
            h: i.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub matrix: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    pub intrinsics: IntrinsicsEntry,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Aabb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

/// A validation failure located by a JSON-style field path.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl TransformsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("{}: {}", e.path(), e.inner()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Schema-level checks that do not need the image files.
    pub fn issues(&self) -> Vec<FieldIssue> {
        let mut out = Vec::new();
        let mut issue = |path: String, message: String| out.push(FieldIssue { path, message });
        let i = &self.intrinsics;
        if let Err(e) = Intrinsics::new(i.fx, i.fy, i.cx, i.cy, i.w, i.h) {
            issue("intrinsics".into(), e.to_string());
        }
        if self.frames.is_empty() {
            issue("frames".into(), "at least one frame is required".into());
        }
        for (k, f) in self.frames.iter().enumerate() {
            if f.file.is_empty() {
                issue(format!("frames[{k}].file"), "empty file name".into());
            }
            if let Err(e) = Pose::from_row_major(&f.matrix) {
                issue(format!("frames[{k}].matrix"), e.to_string());
            }
        }
        let (near, far) = (
            self.near.unwrap_or(DEFAULT_NEAR),
            self.far.unwrap_or(DEFAULT_FAR),
        );
        if !(near >= 0.0 && near < far) {
            issue("near/far".into(), format!("need 0 <= near < far, got {near}, {far}"));
        }
        if let Some(b) = &self.bounds {
            if let Err(e) = Aabb::new(b.min, b.max) {
                issue("bounds".into(), e.to_string());
            }
        }
        out
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let i = &self.intrinsics;
        Intrinsics::new(i.fx, i.fy, i.cx, i.cy, i.w, i.h)
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        self.frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                Pose::from_row_major(&f.matrix)
                    .map_err(|e| Error::domain(format!("frames[{k}].matrix: {e}")))
            })
            .collect()
    }
}

/// A scene directory after validation.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub root: PathBuf,
    pub transforms: TransformsFile,
    pub scene: Scene,
}

impl LoadedScene {
    pub fn image_path(&self, view: usize) -> PathBuf {
        self.root.join(&self.transforms.frames[view].file)
    }

    /// Masks from `mask_dir`, one PNG per frame named like the image.
    pub fn masks(&self) -> Result<Option<Vec<Mask>>> {
        let Some(dir) = &self.transforms.mask_dir else {
            return Ok(None);
        };
        read_per_frame(&self.root.join(dir), &self.transforms, "png", Mask::load_png).map(Some)
    }

    pub fn depths(&self) -> Result<Option<Vec<ScalarMap>>> {
        let Some(dir) = &self.transforms.depth_dir else {
            return Ok(None);
        };
        read_per_frame(&self.root.join(dir), &self.transforms, "pfm", ScalarMap::load_pfm).map(Some)
    }
}

/// Stem of a frame's image file, used to name per-view artifacts.
pub fn frame_stem(frame: &FrameEntry) -> String {
    Path::new(&frame.file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| frame.file.clone())
}

pub fn read_per_frame<T>(
    dir: &Path,
    transforms: &TransformsFile,
    ext: &str,
    load: impl Fn(&Path) -> Result<T>,
) -> Result<Vec<T>> {
    let paths: Vec<PathBuf> = transforms
        .frames
        .iter()
        .map(|f| dir.join(format!("{}.{ext}", frame_stem(f))))
        .collect();
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    paths.iter().map(|p| load(p)).collect()
}

/// Loads and validates a scene directory containing `transforms.json`.
pub fn load_scene(root: &Path) -> Result<LoadedScene> {
    let transforms = TransformsFile::load(&root.join("transforms.json"))?;
    let issues = transforms.issues();
    if !issues.is_empty() {
        return Err(Error::Config(
            issues
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    let intrinsics = transforms.intrinsics()?;
    let poses = transforms.poses()?;
    let missing: Vec<String> = transforms
        .frames
        .iter()
        .filter(|f| !root.join(&f.file).is_file())
        .map(|f| f.file.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let mut images = Vec::with_capacity(poses.len());
    for (k, f) in transforms.frames.iter().enumerate() {
        let img = Image::load_png(&root.join(&f.file))?;
        if img.dims() != (intrinsics.width as usize, intrinsics.height as usize) {
            return Err(Error::Shape(format!(
                "frames[{k}].file {} is {}x{}, intrinsics say {}x{}",
                f.file, img.width, img.height, intrinsics.width, intrinsics.height
            )));
        }
        images.push(img);
    }
    let scene = Scene {
        intrinsics,
        poses,
        images,
        names: transforms.frames.iter().map(|f| f.file.clone()).collect(),
        near: transforms.near.unwrap_or(DEFAULT_NEAR),
        far: transforms.far.unwrap_or(DEFAULT_FAR),
        bounds: transforms.bounds,
    };
    scene.validate()?;
    Ok(LoadedScene {
        root: root.to_path_buf(),
        transforms,
        scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TransformsFile {
        TransformsFile {
            scene_id: None,
            intrinsics: IntrinsicsEntry {
                fx: 10.0,
                fy: 10.0,
                cx: 4.0,
                cy: 4.0,
                w: 8,
                h: 8,
            },
            frames: vec![FrameEntry {
                file: "images/a.png".into(),
                matrix: Pose::identity().to_row_major().to_vec(),
            }],
            near: None,
            far: None,
            bounds: None,
            mask_dir: None,
            depth_dir: None,
            units: None,
        }
    }

    #[test]
    fn reflection_reported_with_frame_path() {
        let mut t = sample();
        t.frames[0].matrix[10] = -1.0;
        let issues = t.issues();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "frames[0].matrix");
        assert!(issues[0].message.contains("determinant"));
    }

    #[test]
    fn optional_fields_omitted_when_absent() {
        let text = serde_json::to_string(&sample()).unwrap();
        assert!(!text.contains("mask_dir"));
        let back: TransformsFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sample());
    }
}
