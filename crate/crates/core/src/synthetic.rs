//! Analytic ray-traced test scenes: a smoothly textured back wall, an optional
//! static prop box and an occluder box that plays the unwanted object.
//!
//! Every view can be rendered with or without the occluder, which gives exact
//! object masks, exact depths (ray distance) and object-free ground truth.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameEntry, IntrinsicsEntry, TransformsFile};
use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::geometry::{pixel_direction, Intrinsics, PixelCoord, Point3, Pose};
use crate::imaging::{Image, Mask, ScalarMap};
use crate::scene::Scene;

/// Sum of axis-aligned sinusoids, slow enough for coarse grids to represent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallTexture {
    pub base: [f64; 3],
    pub amplitude: [f64; 3],
    pub period: [f64; 3],
}

impl WallTexture {
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let tau = std::f64::consts::TAU;
        [
            self.base[0] + self.amplitude[0] * (tau * x / self.period[0] + 0.3).sin(),
            self.base[1] + self.amplitude[1] * (tau * y / self.period[1]).sin(),
            self.base[2] + self.amplitude[2] * (tau * (x + y) / self.period[2] + 1.1).sin(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrim {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
    /// Part of the object to remove.
    pub object: bool,
}

impl BoxPrim {
    fn intersect(&self, o: &Point3, d: &Vector3<f64>) -> Option<f64> {
        let aabb = Aabb {
            min: self.min,
            max: self.max,
        };
        let (t0, t1) = aabb.intersect(o, d)?;
        if t1 < 1e-9 {
            return None;
        }
        Some(if t0 > 1e-9 { t0 } else { t1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    /// The wall is the plane z = wall_z, facing -z.
    pub wall_z: f64,
    pub wall_half_extent: [f64; 2],
    pub wall_texture: WallTexture,
    pub boxes: Vec<BoxPrim>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub color: [f64; 3],
    pub object: bool,
}

impl World {
    pub fn trace(&self, o: &Point3, d: &Vector3<f64>, include_object: bool) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if d.z.abs() > 1e-12 {
            let t = (self.wall_z - o.z) / d.z;
            let p = o + d * t;
            if t > 1e-9
                && p.x.abs() <= self.wall_half_extent[0]
                && p.y.abs() <= self.wall_half_extent[1]
            {
                best = Some(Hit {
                    t,
                    color: self.wall_texture.color(p.x, p.y),
                    object: false,
                });
            }
        }
        for b in &self.boxes {
            if b.object && !include_object {
                continue;
            }
            if let Some(t) = b.intersect(o, d) {
                if best.map_or(true, |h| t < h.t) {
                    best = Some(Hit {
                        t,
                        color: b.color,
                        object: b.object,
                    });
                }
            }
        }
        best
    }

    /// Ray distance to the wall plane, ignoring every box.
    pub fn wall_distance(&self, o: &Point3, d: &Vector3<f64>) -> Option<f64> {
        let t = (self.wall_z - o.z) / d.z;
        (t > 0.0 && t.is_finite()).then_some(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub width: u32,
    pub height: u32,
    pub n_train: usize,
    pub n_test: usize,
    /// Add a static box that stays in the scene.
    pub with_prop: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 64,
            height: 64,
            n_train: 16,
            n_test: 4,
            with_prop: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruthView {
    pub image: Image,
    /// Ray distance to the first surface; 0 where nothing is hit.
    pub depth: ScalarMap,
    /// Pixels whose center ray hits the object first.
    pub object_mask: Mask,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub world: World,
    pub intrinsics: Intrinsics,
    pub train_poses: Vec<Pose>,
    pub test_poses: Vec<Pose>,
    pub near: f64,
    pub far: f64,
    pub bounds: Aabb,
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

fn rig(n: usize, phase: f64) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let r = ((i as f64 + phase) / n as f64).sqrt();
            let a = i as f64 * GOLDEN_ANGLE + phase * 3.0;
            let eye = Vector3::new(2.5 * r * a.cos(), 1.2 * r * a.sin(), 0.0);
            Pose::look_at(eye, Vector3::new(0.0, 0.0, 10.0), Vector3::y())
                .expect("rig poses are well formed")
        })
        .collect()
}

impl SyntheticScene {
    /// Forward-facing capture of a textured wall with a red occluder box in
    /// front of it.
    pub fn occluder(config: SyntheticConfig) -> Result<Self> {
        if config.n_train == 0 {
            return Err(Error::Config("synthetic scene needs training views".into()));
        }
        let intrinsics = Intrinsics::centered(
            1.25 * config.width as f64,
            config.width,
            config.height,
        )?;
        let mut boxes = vec![BoxPrim {
            min: [-0.7, -0.8, 5.8],
            max: [1.3, 1.2, 7.2],
            color: [0.85, 0.22, 0.18],
            object: true,
        }];
        if config.with_prop {
            boxes.push(BoxPrim {
                min: [-4.6, 0.6, 8.4],
                max: [-3.0, 2.4, 9.6],
                color: [0.2, 0.55, 0.35],
                object: false,
            });
        }
        let world = World {
            wall_z: 10.0,
            wall_half_extent: [12.0, 12.0],
            wall_texture: WallTexture {
                base: [0.6, 0.52, 0.42],
                amplitude: [0.2, 0.18, 0.15],
                period: [2.2, 1.8, 2.6],
            },
            boxes,
        };
        Ok(SyntheticScene {
            world,
            intrinsics,
            train_poses: rig(config.n_train, 0.5),
            test_poses: rig(config.n_test.max(1), 0.2)
                .into_iter()
                .take(config.n_test)
                .collect(),
            near: 4.5,
            far: 14.0,
            bounds: Aabb::new([-7.0, -5.2, 5.0], [7.0, 5.2, 10.5])?,
        })
    }

    pub fn render(&self, pose: &Pose, include_object: bool) -> GroundTruthView {
        let (w, h) = (self.intrinsics.width as usize, self.intrinsics.height as usize);
        let hits: Vec<Option<Hit>> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let d = pixel_direction(&self.intrinsics, pose, &PixelCoord::center(x, y, 0));
                self.world.trace(&pose.center(), &d, include_object)
            })
            .collect();
        GroundTruthView {
            image: Image::from_fn(w, h, |x, y| hits[y * w + x].map_or([0.0; 3], |h| h.color)),
            depth: ScalarMap::from_fn(w, h, |x, y| hits[y * w + x].map_or(0.0, |h| h.t)),
            object_mask: Mask::from_fn(w, h, |x, y| hits[y * w + x].is_some_and(|h| h.object)),
        }
    }

    pub fn train_views(&self, include_object: bool) -> Vec<GroundTruthView> {
        self.train_poses
            .iter()
            .map(|p| self.render(p, include_object))
            .collect()
    }

    pub fn test_views(&self, include_object: bool) -> Vec<GroundTruthView> {
        self.test_poses
            .iter()
            .map(|p| self.render(p, include_object))
            .collect()
    }

    /// Training scene with the object present.
    pub fn scene(&self) -> Scene {
        let views = self.train_views(true);
        self.scene_from(&views)
    }

    pub fn scene_from(&self, views: &[GroundTruthView]) -> Scene {
        Scene {
            intrinsics: self.intrinsics,
            poses: self.train_poses.clone(),
            images: views.iter().map(|v| v.image.clone()).collect(),
            names: (0..views.len()).map(|i| format!("{i:03}.png")).collect(),
            near: self.near,
            far: self.far,
            bounds: Some(self.bounds),
        }
    }

    pub fn object_masks(&self) -> Vec<Mask> {
        self.train_views(true)
            .into_iter()
            .map(|v| v.object_mask)
            .collect()
    }

    /// Writes a dataset directory: `images/`, `transforms.json`, ground-truth
    /// masks in `gt_masks/`, and object-free test views under `test/`.
    pub fn export(&self, dir: &Path, scene_id: &str) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        for sub in ["images", "gt_masks", "test/images", "test/masks"] {
            mkdir(&dir.join(sub))?;
        }
        let train = self.train_views(true);
        let mut frames = Vec::new();
        for (i, (view, pose)) in train.iter().zip(&self.train_poses).enumerate() {
            let name = format!("{i:03}.png");
            view.image.save_png(&dir.join("images").join(&name))?;
            view.object_mask
                .save_png(&dir.join("gt_masks").join(&name))?;
            frames.push(FrameEntry {
                file: format!("images/{name}"),
                matrix: pose.to_row_major().to_vec(),
            });
        }
        let mut test_frames = Vec::new();
        for (i, pose) in self.test_poses.iter().enumerate() {
            let name = format!("{i:03}.png");
            let clean = self.render(pose, false);
            let with_object = self.render(pose, true);
            clean.image.save_png(&dir.join("test/images").join(&name))?;
            with_object
                .object_mask
                .save_png(&dir.join("test/masks").join(&name))?;
            test_frames.push(FrameEntry {
                file: format!("images/{name}"),
                matrix: pose.to_row_major().to_vec(),
            });
        }
        let transforms = TransformsFile {
            scene_id: Some(scene_id.to_string()),
            intrinsics: IntrinsicsEntry::from(&self.intrinsics),
            frames,
            near: Some(self.near),
            far: Some(self.far),
            bounds: Some(self.bounds),
            mask_dir: None,
            depth_dir: None,
            units: Some("synthetic scene units".into()),
        };
        transforms.save(&dir.join("transforms.json"))?;
        let test = TransformsFile {
            frames: test_frames,
            ..transforms
        };
        test.save(&dir.join("test/transforms.json"))
    }
}

/// Pixels with a 4-neighbour of the opposite value, on either side of the edge.
pub fn mask_boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = mask.get(x, y);
            let differs = (x > 0 && mask.get(x - 1, y) != v)
                || (x + 1 < w && mask.get(x + 1, y) != v)
                || (y > 0 && mask.get(x, y - 1) != v)
                || (y + 1 < h && mask.get(x, y + 1) != v);
            if differs {
                out.push((x, y));
            }
        }
    }
    out
}

/// Flips a random `fraction` of the boundary pixels.
pub fn corrupt_mask_boundary(mask: &Mask, fraction: f64, rng: &mut impl Rng) -> Mask {
    let boundary = mask_boundary(mask);
    let k = ((fraction.clamp(0.0, 1.0) * boundary.len() as f64).round() as usize).min(boundary.len());
    let mut out = mask.clone();
    for i in index::sample(rng, boundary.len(), k) {
        let (x, y) = boundary[i];
        out.set(x, y, !mask.get(x, y));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_visible_in_every_training_view() {
        let s = SyntheticScene::occluder(SyntheticConfig {
            n_train: 12,
            ..Default::default()
        })
        .unwrap();
        for v in s.train_views(true) {
            let n = v.object_mask.count();
            assert!(n > 200 && n < 1500, "object area {n}");
            assert!(v.depth.data.iter().all(|&d| d > s.near && d < s.far));
        }
        for v in s.train_views(false) {
            assert!(v.object_mask.is_empty());
        }
    }

    #[test]
    fn surfaces_inside_bounds() {
        let s = SyntheticScene::occluder(SyntheticConfig::default()).unwrap();
        for (v, pose) in s.train_views(true).iter().zip(&s.train_poses) {
            for y in 0..v.depth.height {
                for x in 0..v.depth.width {
                    let d = pixel_direction(&s.intrinsics, pose, &PixelCoord::center(x, y, 0));
                    let p = pose.center() + d * v.depth.get(x, y);
                    assert!(s.bounds.contains(&p), "hit {p:?} outside bounds");
                }
            }
        }
    }
}
