use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::geometry::{generate_ray, world_to_pixel, Intrinsics, PixelCoord, Pose, Ray};
use crate::imaging::Image;
use crate::renderer::{RenderOptions, SampleMode};

/// Posed image collection sharing one set of intrinsics.
#[derive(Debug, Clone)]
pub struct Scene {
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
    pub images: Vec<Image>,
    pub names: Vec<String>,
    /// Ray distance bounds used for every camera.
    pub near: f64,
    pub far: f64,
    /// Explicit field bounds; computed from the cameras when absent.
    pub bounds: Option<Aabb>,
}

impl Scene {
    pub fn new(
        intrinsics: Intrinsics,
        poses: Vec<Pose>,
        images: Vec<Image>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let names = (0..poses.len()).map(|i| format!("{i:03}.png")).collect();
        let scene = Scene {
            intrinsics,
            poses,
            images,
            names,
            near,
            far,
            bounds: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.poses.is_empty() {
            return Err(Error::domain("scene has no views"));
        }
        if self.poses.len() != self.images.len() || self.names.len() != self.poses.len() {
            return Err(Error::Shape(format!(
                "{} poses, {} images, {} names",
                self.poses.len(),
                self.images.len(),
                self.names.len()
            )));
        }
        let (w, h) = (self.intrinsics.width as usize, self.intrinsics.height as usize);
        for (i, img) in self.images.iter().enumerate() {
            if img.dims() != (w, h) {
                return Err(Error::Shape(format!(
                    "view {i} is {}x{}, intrinsics say {w}x{h}",
                    img.width, img.height
                )));
            }
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::domain(format!(
                "invalid ray bounds near={} far={}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// File stems of the view names, used for per-view artifact files.
    pub fn stems(&self) -> Vec<String> {
        self.names
            .iter()
            .map(|n| {
                std::path::Path::new(n)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| n.clone())
            })
            .collect()
    }

    pub fn view_count(&self) -> usize {
        self.poses.len()
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    pub fn pixel_ray(&self, view: usize, x: usize, y: usize) -> Result<Ray> {
        generate_ray(
            &self.intrinsics,
            &self.poses[view],
            &PixelCoord::center(x, y, view),
            self.near,
            self.far,
        )
    }

    pub fn field_bounds(&self) -> Result<Aabb> {
        match self.bounds {
            Some(b) => Ok(b),
            None => frustum_bounds(&self.intrinsics, &self.poses, self.near, self.far, true),
        }
    }

    pub fn render_options(&self, n_samples: usize, mode: SampleMode, seed: u64) -> RenderOptions {
        RenderOptions {
            n_samples,
            mode,
            near: self.near,
            far: self.far,
            seed,
            early_stop_transmittance: None,
        }
    }

    /// Subset of views, in the given order.
    pub fn select(&self, views: &[usize]) -> Scene {
        Scene {
            intrinsics: self.intrinsics,
            poses: views.iter().map(|&i| self.poses[i]).collect(),
            images: views.iter().map(|&i| self.images[i].clone()).collect(),
            names: views.iter().map(|&i| self.names[i].clone()).collect(),
            near: self.near,
            far: self.far,
            bounds: self.bounds,
        }
    }
}

/// Axis-aligned bounds of the camera frustums truncated at `far`.
///
/// With `intersect` set, only the region seen by every camera is kept, which
/// gives much tighter boxes for forward-facing captures. The intersection is
/// estimated on a lattice inside the union box.
pub fn frustum_bounds(
    intr: &Intrinsics,
    poses: &[Pose],
    near: f64,
    far: f64,
    intersect: bool,
) -> Result<Aabb> {
    let (w, h) = (intr.width as f64, intr.height as f64);
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for pose in poses {
        for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let ray = generate_ray(intr, pose, &PixelCoord::new(u, v, 0), near, far)?;
            for t in [near, far] {
                let p = ray.at(t);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    let union = Aabb::new(lo.into(), hi.into())?;
    if !intersect || poses.len() < 2 {
        return Ok(union);
    }
    const STEPS: usize = 48;
    let ext = union.extent();
    let mut ilo = Vector3::repeat(f64::INFINITY);
    let mut ihi = Vector3::repeat(f64::NEG_INFINITY);
    for k in 0..=STEPS {
        for j in 0..=STEPS {
            for i in 0..=STEPS {
                let p = lo + Vector3::new(
                    ext.x * i as f64 / STEPS as f64,
                    ext.y * j as f64 / STEPS as f64,
                    ext.z * k as f64 / STEPS as f64,
                );
                let seen = poses.iter().all(|pose| {
                    let dist = (p - pose.center()).norm();
                    dist >= near
                        && dist <= far
                        && world_to_pixel(pose, intr, &p)
                            .map(|(px, _)| intr.contains(px.u, px.v))
                            .unwrap_or(false)
                });
                if seen {
                    ilo = ilo.inf(&p);
                    ihi = ihi.sup(&p);
                }
            }
        }
    }
    if !(ilo.x < ihi.x && ilo.y < ihi.y && ilo.z < ihi.z) {
        return Ok(union);
    }
    let margin = ext / STEPS as f64;
    Aabb::new(
        (ilo - margin).sup(&lo).into(),
        (ihi + margin).inf(&hi).into(),
    )
}
