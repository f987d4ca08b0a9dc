//! On-disk layout under the data root:
//!
//! ```text
//! scenes/{id}/transforms.json, images/..., annotations.json
//! scenes/{id}/stages/...            job artifacts
//! jobs/{job_id}.json                job snapshots
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mvinpaint::dataset::{frame_stem, load_scene, LoadedScene};
use mvinpaint::segmentation::AnnotationSet;

use crate::error::{ServiceError, ServiceResult};
use crate::manifest::{export, ingest, validate_id, SceneManifest};

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: &Path) -> ServiceResult<Self> {
        for sub in ["scenes", "jobs"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
        }
        Ok(Store {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scene_dir(&self, id: &str) -> PathBuf {
        self.root.join("scenes").join(id)
    }

    pub fn stage_dir(&self, id: &str) -> PathBuf {
        self.scene_dir(id).join("stages")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    /// Validates `path`, copies it into the store and returns the manifest.
    pub fn ingest(&self, path: &Path, id: Option<&str>) -> ServiceResult<SceneManifest> {
        let (manifest, _) = ingest(path, id)?;
        let dest = self.scene_dir(&manifest.id);
        if dest.exists() {
            return Err(ServiceError::Conflict(format!("scene {} already exists", manifest.id)));
        }
        if let Err(e) = export(&manifest, path, &dest) {
            let _ = fs::remove_dir_all(&dest);
            return Err(e);
        }
        log::info!("ingested scene {} with {} views", manifest.id, manifest.view_count());
        Ok(manifest)
    }

    pub fn list(&self) -> ServiceResult<Vec<String>> {
        let dir = self.root.join("scenes");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("transforms.json").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn manifest(&self, id: &str) -> ServiceResult<SceneManifest> {
        let dir = self.existing(id)?;
        let t = mvinpaint::dataset::TransformsFile::load(&dir.join("transforms.json"))?;
        Ok(SceneManifest::from_transforms(id, &t))
    }

    pub fn load(&self, id: &str) -> ServiceResult<LoadedScene> {
        let dir = self.existing(id)?;
        Ok(load_scene(&dir)?)
    }

    pub fn stems(&self, id: &str) -> ServiceResult<Vec<String>> {
        Ok(self.manifest(id)?.frames.iter().map(frame_stem).collect())
    }

    pub fn view_path(&self, id: &str, view: usize) -> ServiceResult<PathBuf> {
        let m = self.manifest(id)?;
        let f = m
            .frames
            .get(view)
            .ok_or_else(|| ServiceError::NotFound(format!("view {view} of scene {id}")))?;
        Ok(self.scene_dir(id).join(&f.file))
    }

    pub fn save_annotations(&self, id: &str, ann: &AnnotationSet) -> ServiceResult<()> {
        let m = self.manifest(id)?;
        ann.validate(m.view_count(), m.intrinsics.w as usize, m.intrinsics.h as usize)
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        ann.save(&self.scene_dir(id).join("annotations.json"))?;
        Ok(())
    }

    pub fn annotations(&self, id: &str) -> ServiceResult<AnnotationSet> {
        let path = self.existing(id)?.join("annotations.json");
        if !path.is_file() {
            return Err(ServiceError::NotFound(format!("annotations for scene {id}")));
        }
        Ok(AnnotationSet::load(&path)?)
    }

    fn existing(&self, id: &str) -> ServiceResult<PathBuf> {
        validate_id(id).map_err(|_| ServiceError::NotFound(format!("scene {id}")))?;
        let dir = self.scene_dir(id);
        if dir.join("transforms.json").is_file() {
            Ok(dir)
        } else {
            Err(ServiceError::NotFound(format!("scene {id}")))
        }
    }
}

pub(crate) fn io(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Core(mvinpaint::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
