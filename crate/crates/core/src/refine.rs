//! Mask refinement: masked source pixels that some other view sees unmasked
//! are filled from that view and unmasked.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_direction, world_to_pixel, PixelCoord, Point3, Pose, Ray};
use crate::imaging::{check_same_shape, Image, Mask, ScalarMap};
use crate::renderer::{pixel_stream, ray_rng, sample_ray, splitmix64, SampleMode};
use crate::scene::Scene;

const SNAP_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub n_samples: usize,
    pub sample_mode: SampleMode,
    pub seed: u64,
    /// Depth tolerance is `rel_tol * depth + abs_tol`.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_sweeps: usize,
    /// Write substituted depths to the output depth maps.
    pub refine_depths: bool,
    /// Fixed-point steps that move the accepted sample onto the target surface.
    pub snap_iterations: usize,
    /// Max distance in source pixels between the source pixel center and the
    /// reprojected target surface point.
    pub reproject_tol_px: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            n_samples: 192,
            sample_mode: SampleMode::Stratified,
            seed: 0,
            rel_tol: 0.01,
            abs_tol: 0.1,
            max_sweeps: 16,
            refine_depths: false,
            snap_iterations: 8,
            reproject_tol_px: 0.1,
        }
    }
}

impl RefineConfig {
    pub fn tolerance(&self, depth: f64) -> f64 {
        self.rel_tol * depth.abs() + self.abs_tol
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("refine n_samples must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0 && self.abs_tol >= 0.0) {
            return Err(Error::Config("refine tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

/// Working copies of every view plus the best source distance per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineState {
    pub images: Vec<Image>,
    pub depths: Vec<ScalarMap>,
    pub masks: Vec<Mask>,
    /// Distance of the accepted substitute point; infinite where none yet.
    pub best: Vec<Vec<f64>>,
    /// Pixels that may be refined: the masks at construction time.
    pub candidates: Vec<Mask>,
    pub sweeps: usize,
    pub changes: usize,
}

impl RefineState {
    pub fn new(images: Vec<Image>, depths: Vec<ScalarMap>, masks: Vec<Mask>) -> Result<Self> {
        if images.len() != depths.len() || images.len() != masks.len() {
            return Err(Error::Shape(format!(
                "{} images, {} depths, {} masks",
                images.len(),
                depths.len(),
                masks.len()
            )));
        }
        for ((i, d), m) in images.iter().zip(&depths).zip(&masks) {
            check_same_shape(i, d, "image and depth")?;
            check_same_shape(i, m, "image and mask")?;
        }
        Ok(RefineState {
            best: masks.iter().map(|m| vec![f64::INFINITY; m.data.len()]).collect(),
            candidates: masks.clone(),
            images,
            depths,
            masks,
            sweeps: 0,
            changes: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelUpdate {
    pub color: [f64; 3],
    /// New ray distance from the source camera.
    pub depth: f64,
    /// Distance of the substitute point from the source camera.
    pub distance: f64,
    pub target_view: usize,
}

/// Corner pixels and weights of a bilinear lookup (pixel centers at +0.5).
fn corners(u: f64, v: f64, w: usize, h: usize) -> [((usize, usize), f64); 4] {
    let fx = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    [
        ((x0, y0), (1.0 - ax) * (1.0 - ay)),
        ((x1, y0), ax * (1.0 - ay)),
        ((x0, y1), (1.0 - ax) * ay),
        ((x1, y1), ax * ay),
    ]
}

struct TargetView<'a> {
    image: &'a Image,
    depth: &'a ScalarMap,
    mask: &'a Mask,
}

impl TargetView<'_> {
    /// Bilinear depth and color at `(u, v)`. `None` when a contributing corner
    /// is masked or lies across a depth edge from the containing pixel.
    fn lookup(&self, u: f64, v: f64, px: (usize, usize), cfg: &RefineConfig) -> Option<(f64, [f64; 3])> {
        let d0 = self.depth.get(px.0, px.1);
        let mut d = 0.0;
        let mut c = [0.0; 3];
        for ((x, y), wt) in corners(u, v, self.depth.width, self.depth.height) {
            if wt == 0.0 {
                continue;
            }
            let dc = self.depth.get(x, y);
            if self.mask.get(x, y) || (dc - d0).abs() > cfg.tolerance(d0) {
                return None;
            }
            d += wt * dc;
            let p = self.image.get(x, y);
            (0..3).for_each(|k| c[k] += wt * p[k]);
        }
        Some((d, c))
    }
}

/// Projection of a world point into the target: continuous pixel, containing
/// pixel and distance to the target camera. `None` when behind the camera or
/// outside the hull of pixel centers.
fn project(scene: &Scene, view: usize, x: &Point3) -> Option<(PixelCoord, (usize, usize), f64)> {
    let pose = &scene.poses[view];
    let intr = &scene.intrinsics;
    let (q, _) = world_to_pixel(pose, intr, x).ok()?;
    let inside = q.u >= 0.5
        && q.v >= 0.5
        && q.u <= intr.width as f64 - 0.5
        && q.v <= intr.height as f64 - 0.5;
    if !inside {
        return None;
    }
    let px = intr.pixel_index(q.u, q.v)?;
    Some((q, px, (x - pose.center()).norm()))
}

/// Searches the source ray through `(x, y)` front to back for the first sample
/// that lands on an unmasked, depth-consistent target pixel.
pub fn refine_pixel(
    state: &RefineState,
    scene: &Scene,
    source_view: usize,
    x: usize,
    y: usize,
    target_view: usize,
    cfg: &RefineConfig,
) -> Option<PixelUpdate> {
    let ray = scene.pixel_ray(source_view, x, y).ok()?;
    let key = view_key(&scene.poses[source_view]);
    let mut rng = ray_rng(cfg.seed, key ^ pixel_stream(0, x, y));
    let samples = sample_ray(&ray, cfg.n_samples, cfg.sample_mode, &mut rng);
    let target = TargetView {
        image: &state.images[target_view],
        depth: &state.depths[target_view],
        mask: &state.masks[target_view],
    };
    let consistent = |t: f64| -> Option<(PixelCoord, (usize, usize))> {
        let (q, px, dist) = project(scene, target_view, &ray.at(t))?;
        if target.mask.get(px.0, px.1) {
            return None;
        }
        let d = target.depth.get(px.0, px.1);
        ((d - dist).abs() <= cfg.tolerance(d)).then_some((q, px))
    };
    let t_hit = samples.t.iter().copied().find(|&t| consistent(t).is_some())?;
    let t = if cfg.snap_iterations == 0 {
        t_hit
    } else {
        snap(scene, &ray, t_hit, target_view, &target, cfg)?
    };
    let (q, px) = consistent(t)?;
    let (d_t, color) = target.lookup(q.u, q.v, px, cfg)?;
    let tp = &scene.poses[target_view];
    let surface = tp.center() + pixel_direction(&scene.intrinsics, tp, &q) * d_t;
    let sp = &scene.poses[source_view];
    let (back, _) = world_to_pixel(sp, &scene.intrinsics, &surface).ok()?;
    let off = (back.u - (x as f64 + 0.5)).hypot(back.v - (y as f64 + 0.5));
    if off > cfg.reproject_tol_px {
        return None;
    }
    let src_center = sp.center();
    Some(PixelUpdate {
        color,
        depth: (surface - src_center).norm(),
        distance: (ray.at(t) - src_center).norm(),
        target_view,
    })
}

/// Moves `t` to where the source ray meets the surface seen by the target.
/// `None` if an iterate leaves the usable target region or does not settle.
fn snap(
    scene: &Scene,
    ray: &Ray,
    mut t: f64,
    target_view: usize,
    target: &TargetView<'_>,
    cfg: &RefineConfig,
) -> Option<f64> {
    let tp = &scene.poses[target_view];
    for _ in 0..cfg.snap_iterations {
        let (q, px, _) = project(scene, target_view, &ray.at(t))?;
        if target.mask.get(px.0, px.1) {
            return None;
        }
        let (d, _) = target.lookup(q.u, q.v, px, cfg)?;
        let surface = tp.center() + pixel_direction(&scene.intrinsics, tp, &q) * d;
        let next = (surface - ray.origin).dot(&ray.direction);
        if !(next.is_finite() && next > 0.0) {
            return None;
        }
        let step = (next - t).abs();
        t = next;
        if step < SNAP_EPS * t {
            return Some(t);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub sweeps: usize,
    pub pixels_refined: usize,
    pub masked_area_before: usize,
    pub masked_area_after: usize,
    pub converged: bool,
}

impl RefineStats {
    pub fn reduction_percent(&self) -> f64 {
        if self.masked_area_before == 0 {
            return 0.0;
        }
        100.0 * (self.masked_area_before - self.masked_area_after) as f64
            / self.masked_area_before as f64
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub images: Vec<Image>,
    pub depths: Vec<ScalarMap>,
    pub masks: Vec<Mask>,
    pub stats: RefineStats,
}

/// Identifies a camera by its pose rather than its position in the scene.
fn view_key(pose: &Pose) -> u64 {
    pose.to_row_major()
        .iter()
        .fold(0u64, |h, v| splitmix64(h ^ v.to_bits()))
}

/// One candidate per source pixel: the closest over all targets, ties broken
/// by the target's pose key so view order never matters. An already refined pixel is only replaced by a point
/// closer by more than the depth tolerance.
fn best_candidates(
    state: &RefineState,
    scene: &Scene,
    source: usize,
    cfg: &RefineConfig,
) -> Vec<(usize, PixelUpdate)> {
    let cand = &state.candidates[source];
    let w = cand.width;
    (0..cand.data.len())
        .filter(|&i| cand.data[i])
        .filter_map(|i| {
            let (x, y) = (i % w, i / w);
            let mut best: Option<PixelUpdate> = None;
            for t in (0..scene.view_count()).filter(|&t| t != source) {
                if let Some(u) = refine_pixel(state, scene, source, x, y, t, cfg) {
                    let closer = |b: &PixelUpdate| {
                        (u.distance, view_key(&scene.poses[u.target_view]))
                            < (b.distance, view_key(&scene.poses[b.target_view]))
                    };
                    if best.as_ref().is_none_or(closer) {
                        best = Some(u);
                    }
                }
            }
            let prev = state.best[source][i];
            best.filter(|b| prev.is_infinite() || b.distance < prev - cfg.tolerance(prev))
                .map(|b| (i, b))
        })
        .collect()
}

/// Keeps updates whose new depth agrees with at least one of the eight
/// neighbours in the depth map as it would be after this sweep.
fn gate(
    depth: &ScalarMap,
    updates: Vec<(usize, PixelUpdate)>,
    cfg: &RefineConfig,
) -> Vec<(usize, PixelUpdate)> {
    let (w, h) = (depth.width, depth.height);
    let mut after = depth.data.clone();
    for (i, u) in &updates {
        after[*i] = u.depth;
    }
    updates
        .into_iter()
        .filter(|(i, u)| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let tol = cfg.tolerance(u.depth);
            (-1..=1i64).any(|dy| {
                (-1..=1i64).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    (dx, dy) != (0, 0)
                        && nx >= 0
                        && ny >= 0
                        && nx < w as i64
                        && ny < h as i64
                        && (after[ny as usize * w + nx as usize] - u.depth).abs() <= tol
                })
            })
        })
        .collect()
}

/// One synchronous pass over all source views against a frozen snapshot.
/// Returns the number of accepted updates.
pub fn sweep(state: &mut RefineState, scene: &Scene, cfg: &RefineConfig) -> usize {
    let accepted: Vec<Vec<(usize, PixelUpdate)>> = (0..scene.view_count())
        .into_par_iter()
        .map(|s| gate(&state.depths[s], best_candidates(state, scene, s, cfg), cfg))
        .collect();
    let mut changes = 0;
    for (s, ups) in accepted.into_iter().enumerate() {
        for (i, u) in ups {
            state.images[s].data[i] = u.color;
            state.depths[s].data[i] = u.depth;
            state.masks[s].data[i] = false;
            state.best[s][i] = u.distance;
            changes += 1;
        }
    }
    state.sweeps += 1;
    state.changes += changes;
    changes
}

/// Sweeps until nothing changes or `max_sweeps` is reached.
pub fn refine_views(
    scene: &Scene,
    depths: &[ScalarMap],
    masks: &[Mask],
    cfg: &RefineConfig,
) -> Result<RefineOutput> {
    cfg.validate()?;
    scene.validate()?;
    let mut state = RefineState::new(scene.images.clone(), depths.to_vec(), masks.to_vec())?;
    let before: usize = masks.iter().map(Mask::count).sum();
    let mut converged = scene.view_count() < 2;
    if !converged {
        while state.sweeps < cfg.max_sweeps {
            if sweep(&mut state, scene, cfg) == 0 {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!(
            "refinement stopped after {} sweeps without reaching a fixpoint",
            cfg.max_sweeps
        );
    }
    let after: usize = state.masks.iter().map(Mask::count).sum();
    let stats = RefineStats {
        sweeps: state.sweeps,
        pixels_refined: before - after,
        masked_area_before: before,
        masked_area_after: after,
        converged,
    };
    Ok(RefineOutput {
        images: state.images,
        depths: if cfg.refine_depths {
            state.depths
        } else {
            depths.to_vec()
        },
        masks: state.masks,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};

    /// Fronto-parallel wall at z = 5 seen by identical cameras.
    fn wall_scene(views: usize) -> (Scene, Vec<ScalarMap>) {
        let intr = Intrinsics::centered(20.0, 16, 16).unwrap();
        let pose = Pose::identity();
        let img = Image::from_fn(16, 16, |x, y| [x as f64 / 16.0, y as f64 / 16.0, 0.5]);
        let depth = ScalarMap::from_fn(16, 16, |x, y| {
            let d = pixel_direction(&intr, &pose, &PixelCoord::center(x, y, 0));
            5.0 / d.z
        });
        let scene = Scene {
            intrinsics: intr,
            poses: vec![pose; views],
            images: vec![img; views],
            names: (0..views).map(|i| format!("{i}.png")).collect(),
            near: 1.0,
            far: 9.0,
            bounds: None,
        };
        (scene, vec![depth; views])
    }

    fn cfg() -> RefineConfig {
        RefineConfig {
            sample_mode: SampleMode::Midpoint,
            n_samples: 256,
            abs_tol: 0.05,
            ..RefineConfig::default()
        }
    }

    #[test]
    fn identical_target_returns_own_color() {
        let (scene, depths) = wall_scene(2);
        let mut masks = vec![Mask::new(16, 16); 2];
        masks[0].set(7, 9, true);
        let state = RefineState::new(scene.images.clone(), depths.clone(), masks).unwrap();
        let u = refine_pixel(&state, &scene, 0, 7, 9, 1, &cfg()).unwrap();
        let c = scene.images[0].get(7, 9);
        assert!((0..3).all(|k| (u.color[k] - c[k]).abs() < 1e-9));
        assert!((u.depth - depths[0].get(7, 9)).abs() < 1e-9);
        assert!((u.distance - depths[0].get(7, 9)).abs() < 1e-9);
    }

    #[test]
    fn fully_masked_target_gives_nothing() {
        let (scene, depths) = wall_scene(2);
        let masks = vec![Mask::full(16, 16); 2];
        let state = RefineState::new(scene.images.clone(), depths, masks).unwrap();
        assert!(refine_pixel(&state, &scene, 0, 3, 3, 1, &cfg()).is_none());
    }

    #[test]
    fn single_view_is_untouched() {
        let (scene, depths) = wall_scene(1);
        let masks = vec![Mask::from_fn(16, 16, |x, _| x < 5)];
        let out = refine_views(&scene, &depths, &masks, &cfg()).unwrap();
        assert_eq!(out.masks, masks);
        assert_eq!(out.images, scene.images);
        assert_eq!(out.stats.sweeps, 0);
        assert!(out.stats.converged);
    }

    #[test]
    fn disjoint_holes_fill_each_other() {
        let (scene, depths) = wall_scene(2);
        let masks = vec![
            Mask::from_fn(16, 16, |x, y| (4..8).contains(&x) && (4..8).contains(&y)),
            Mask::from_fn(16, 16, |x, y| (10..13).contains(&x) && (10..13).contains(&y)),
        ];
        let out = refine_views(&scene, &depths, &masks, &cfg()).unwrap();
        assert!(out.masks.iter().all(Mask::is_empty));
        assert_eq!(out.stats.pixels_refined, 25);
        for (a, b) in out.images.iter().zip(&scene.images) {
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((0..3).all(|k| (p[k] - q[k]).abs() < 1e-6));
            }
        }
    }
}
