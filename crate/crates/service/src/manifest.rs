//! Scene manifests: ingest a `transforms.json` directory, export it back.

use std::fs;
use std::path::{Path, PathBuf};

use mvinpaint::dataset::{load_scene, FrameEntry, IntrinsicsEntry, LoadedScene, TransformsFile};
use mvinpaint::dataset::{DEFAULT_FAR, DEFAULT_NEAR};
use mvinpaint::field::Aabb;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub id: String,
    pub intrinsics: IntrinsicsEntry,
    /// Image paths relative to the scene root, with row-major camera-to-world
    /// matrices.
    pub frames: Vec<FrameEntry>,
    pub near: f64,
    pub far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Aabb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl SceneManifest {
    pub fn from_transforms(id: &str, t: &TransformsFile) -> Self {
        SceneManifest {
            id: id.to_string(),
            intrinsics: t.intrinsics,
            frames: t.frames.clone(),
            near: t.near.unwrap_or(DEFAULT_NEAR),
            far: t.far.unwrap_or(DEFAULT_FAR),
            bounds: t.bounds,
            mask_dir: t.mask_dir.clone(),
            depth_dir: t.depth_dir.clone(),
            units: t.units.clone(),
        }
    }

    pub fn to_transforms(&self) -> TransformsFile {
        TransformsFile {
            scene_id: Some(self.id.clone()),
            intrinsics: self.intrinsics,
            frames: self.frames.clone(),
            near: Some(self.near),
            far: Some(self.far),
            bounds: self.bounds,
            mask_dir: self.mask_dir.clone(),
            depth_dir: self.depth_dir.clone(),
            units: self.units.clone(),
        }
    }

    pub fn view_count(&self) -> usize {
        self.frames.len()
    }
}

pub fn validate_id(id: &str) -> ServiceResult<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Validation(format!(
            "scene id {id:?} must be 1-64 characters of [A-Za-z0-9_-]"
        )))
    }
}

/// Validates a scene directory and returns its manifest. Every image is
/// decoded once. The id comes from `id`, then `scene_id` in the file, then
/// the directory name.
pub fn ingest(path: &Path, id: Option<&str>) -> ServiceResult<(SceneManifest, LoadedScene)> {
    let loaded = load_scene(path)?;
    let id = match id.map(str::to_string).or_else(|| loaded.transforms.scene_id.clone()) {
        Some(id) => id,
        None => path
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "scene".into()),
    };
    validate_id(&id)?;
    if let Some(dir) = &loaded.transforms.mask_dir {
        loaded.masks().map_err(|e| prefixed("mask_dir", dir, e))?;
    }
    if let Some(dir) = &loaded.transforms.depth_dir {
        loaded.depths().map_err(|e| prefixed("depth_dir", dir, e))?;
    }
    Ok((SceneManifest::from_transforms(&id, &loaded.transforms), loaded))
}

fn prefixed(field: &str, dir: &str, e: mvinpaint::Error) -> ServiceError {
    match e {
        mvinpaint::Error::MissingFiles(f) => ServiceError::Core(mvinpaint::Error::MissingFiles(f)),
        other => ServiceError::Validation(format!("{field} ({dir}): {other}")),
    }
}

/// Writes `transforms.json` and copies every referenced file from `source`
/// into `dest`, so that `ingest(dest)` yields `manifest` again.
pub fn export(manifest: &SceneManifest, source: &Path, dest: &Path) -> ServiceResult<()> {
    let mut files: Vec<PathBuf> = manifest.frames.iter().map(|f| PathBuf::from(&f.file)).collect();
    for dir in [&manifest.mask_dir, &manifest.depth_dir].into_iter().flatten() {
        let d = source.join(dir);
        if d.is_dir() {
            for entry in fs::read_dir(&d).map_err(|e| io(&d, e))? {
                let entry = entry.map_err(|e| io(&d, e))?;
                if entry.path().is_file() {
                    files.push(Path::new(dir).join(entry.file_name()));
                }
            }
        }
    }
    for rel in files {
        let (from, to) = (source.join(&rel), dest.join(&rel));
        if from == to {
            continue;
        }
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        fs::copy(&from, &to).map_err(|e| io(&from, e))?;
    }
    fs::create_dir_all(dest).map_err(|e| io(dest, e))?;
    manifest.to_transforms().save(&dest.join("transforms.json"))?;
    Ok(())
}

fn io(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Core(mvinpaint::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
