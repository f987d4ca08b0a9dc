//! Multiview object segmentation: initial masks from clicks, mask transfer
//! between views, semantic-field fitting and thresholded mask rendering.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Channels, GridInit, RadianceGrid};
use crate::geometry::{pixel_to_world, ray_distance_to_camera_depth, world_to_pixel, PixelCoord};
use crate::imaging::{check_same_shape, Image, Mask, ScalarMap};
use crate::optim::{fit, FitControl, FitData, FitMode, FitReport, LossConfig, LossWeights, Schedule};
use crate::renderer::{render_view, RenderOptions, SampleMode};
use crate::scene::Scene;

/// Clicks on the source view, in continuous pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub source_view: usize,
    pub positive: Vec<[f64; 2]>,
    #[serde(default)]
    pub negative: Vec<[f64; 2]>,
}

impl AnnotationSet {
    pub fn validate(&self, views: usize, width: usize, height: usize) -> Result<()> {
        if self.source_view >= views {
            return Err(Error::domain(format!(
                "source_view {} out of range for {views} views",
                self.source_view
            )));
        }
        if self.positive.is_empty() {
            return Err(Error::domain("at least one positive point is required"));
        }
        for (kind, pts) in [("positive", &self.positive), ("negative", &self.negative)] {
            for (k, p) in pts.iter().enumerate() {
                let ok = p[0].is_finite()
                    && p[1].is_finite()
                    && p[0] >= 0.0
                    && p[1] >= 0.0
                    && p[0] < width as f64
                    && p[1] < height as f64;
                if !ok {
                    return Err(Error::domain(format!(
                        "{kind}[{k}] = ({}, {}) outside {width}x{height} image",
                        p[0], p[1]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn pixels(points: &[[f64; 2]]) -> Vec<(usize, usize)> {
        points
            .iter()
            .map(|p| (p[0].floor() as usize, p[1].floor() as usize))
            .collect()
    }

    pub fn positive_pixels(&self) -> Vec<(usize, usize)> {
        Self::pixels(&self.positive)
    }

    pub fn negative_pixels(&self) -> Vec<(usize, usize)> {
        Self::pixels(&self.negative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Initial { provider: String },
    Projected,
    Rendered { stage: usize },
    Dilated,
    Refined,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dilation {
    pub kernel: usize,
    pub iterations: usize,
}

/// One mask per view plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Mask>,
    pub provenance: Provenance,
    /// Earlier provenance steps, oldest first.
    pub history: Vec<Provenance>,
    pub dilation: Option<Dilation>,
}

impl MaskSet {
    pub fn new(masks: Vec<Mask>, provenance: Provenance) -> Self {
        MaskSet {
            masks,
            provenance,
            history: Vec::new(),
            dilation: None,
        }
    }

    /// Same masks history, new masks and provenance.
    pub fn derive(&self, masks: Vec<Mask>, provenance: Provenance) -> Self {
        let mut history = self.history.clone();
        history.push(self.provenance.clone());
        MaskSet {
            masks,
            provenance,
            history,
            dilation: self.dilation,
        }
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        if self.masks.len() != scene.view_count() {
            return Err(Error::Shape(format!(
                "{} masks for {} views",
                self.masks.len(),
                scene.view_count()
            )));
        }
        for (m, img) in self.masks.iter().zip(&scene.images) {
            check_same_shape(m, img, "mask")?;
        }
        Ok(())
    }

    pub fn dilated(&self, kernel: usize, iterations: usize) -> MaskSet {
        let masks = self
            .masks
            .par_iter()
            .map(|m| dilate(m, kernel, iterations))
            .collect();
        let mut out = self.derive(masks, Provenance::Dilated);
        out.dilation = Some(Dilation { kernel, iterations });
        out
    }

    pub fn total_area(&self) -> usize {
        self.masks.iter().map(Mask::count).sum()
    }

    /// Writes `{dir}/{stem}.png` for each view.
    pub fn save_dir(&self, dir: &Path, stems: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (m, stem) in self.masks.iter().zip(stems) {
            m.save_png(&dir.join(format!("{stem}.png")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path, stems: &[String], provenance: Provenance) -> Result<Self> {
        let paths: Vec<_> = stems.iter().map(|s| dir.join(format!("{s}.png"))).collect();
        let missing: Vec<String> = paths
            .iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let masks = paths.iter().map(|p| Mask::load_png(p)).collect::<Result<_>>()?;
        Ok(MaskSet::new(masks, provenance))
    }
}

/// Binary dilation with a square `kernel x kernel` element, repeated.
pub fn dilate(mask: &Mask, kernel: usize, iterations: usize) -> Mask {
    let r = kernel / 2;
    let mut cur = mask.clone();
    for _ in 0..iterations {
        cur = max_filter(&cur, r, false);
    }
    cur
}

/// Binary erosion; pixels outside the image count as set.
pub fn erode(mask: &Mask, kernel: usize, iterations: usize) -> Mask {
    let r = kernel / 2;
    let mut cur = mask.clone();
    for _ in 0..iterations {
        cur = max_filter(&cur, r, true);
    }
    cur
}

/// Dilation followed by erosion; never removes a set pixel.
pub fn close(mask: &Mask, kernel: usize) -> Mask {
    erode(&dilate(mask, kernel, 1), kernel, 1)
}

/// Separable square max filter; with `invert` it filters the complement.
fn max_filter(m: &Mask, r: usize, invert: bool) -> Mask {
    let (w, h) = (m.width, m.height);
    let get = |x: usize, y: usize| m.get(x, y) != invert;
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = (lo..=hi).any(|xx| get(xx, y));
        }
    }
    Mask::from_fn(w, h, |x, y| {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        (lo..=hi).any(|yy| rows[yy * w + x]) != invert
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionGrowConfig {
    /// Max RGB distance from the running region mean.
    pub color_tol: f64,
    /// Max RGB distance between neighbouring pixels.
    pub step_tol: f64,
    /// Max distance from the originating seed, as a fraction of the diagonal.
    pub max_radius: f64,
    pub close_kernel: usize,
}

impl Default for RegionGrowConfig {
    fn default() -> Self {
        RegionGrowConfig {
            color_tol: 0.15,
            step_tol: 0.08,
            max_radius: 0.5,
            close_kernel: 3,
        }
    }
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// 4-connected flood fill from `seeds` in color and position, never entering
/// `blockers`.
pub fn region_grow(
    image: &Image,
    seeds: &[(usize, usize)],
    blockers: &[(usize, usize)],
    cfg: &RegionGrowConfig,
) -> Mask {
    let (w, h) = image.dims();
    let mut blocked = Mask::new(w, h);
    for &(x, y) in blockers {
        blocked.set(x, y, true);
    }
    let mut region = Mask::new(w, h);
    let mut origin = vec![usize::MAX; w * h];
    let mut queue = VecDeque::new();
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (k, &(x, y)) in seeds.iter().enumerate() {
        if blocked.get(x, y) || region.get(x, y) {
            continue;
        }
        region.set(x, y, true);
        origin[y * w + x] = k;
        let c = image.get(x, y);
        (0..3).for_each(|i| sum[i] += c[i]);
        count += 1;
        queue.push_back((x, y));
    }
    let radius = cfg.max_radius * ((w * w + h * h) as f64).sqrt();
    while let Some((x, y)) = queue.pop_front() {
        let c = image.get(x, y);
        let seed = seeds[origin[y * w + x]];
        let mut nbrs = Vec::with_capacity(4);
        if x > 0 {
            nbrs.push((x - 1, y));
        }
        if x + 1 < w {
            nbrs.push((x + 1, y));
        }
        if y > 0 {
            nbrs.push((x, y - 1));
        }
        if y + 1 < h {
            nbrs.push((x, y + 1));
        }
        for (nx, ny) in nbrs {
            if region.get(nx, ny) || blocked.get(nx, ny) {
                continue;
            }
            let dx = nx as f64 - seed.0 as f64;
            let dy = ny as f64 - seed.1 as f64;
            if (dx * dx + dy * dy).sqrt() > radius {
                continue;
            }
            let q = image.get(nx, ny);
            let mean = sum.map(|s| s / count as f64);
            if color_dist(q, c) > cfg.step_tol || color_dist(q, mean) > cfg.color_tol {
                continue;
            }
            region.set(nx, ny, true);
            origin[ny * w + nx] = origin[y * w + x];
            (0..3).for_each(|i| sum[i] += q[i]);
            count += 1;
            queue.push_back((nx, ny));
        }
    }
    region
}

/// Source-view mask from clicks: region growing, one closing, then the
/// negative points are cleared again.
pub fn init_source_mask(image: &Image, ann: &AnnotationSet, cfg: &RegionGrowConfig) -> Result<Mask> {
    ann.validate(usize::MAX, image.width, image.height)?;
    let neg = ann.negative_pixels();
    let grown = region_grow(image, &ann.positive_pixels(), &neg, cfg);
    let mut m = if cfg.close_kernel > 1 {
        close(&grown, cfg.close_kernel)
    } else {
        grown
    };
    for (x, y) in neg {
        m.set(x, y, false);
    }
    Ok(m)
}

/// Transfers a source mask to another view through the source depth map
/// (ray distance). Every source pixel with positive depth is splatted into a
/// z-buffer; a target pixel is marked when its nearest splat is masked.
pub fn project_mask(
    source_mask: &Mask,
    source_depth: &ScalarMap,
    scene: &Scene,
    source_view: usize,
    target_view: usize,
) -> Result<Mask> {
    check_same_shape(source_mask, source_depth, "source mask and depth")?;
    let (w, h) = (scene.width(), scene.height());
    let intr = &scene.intrinsics;
    let (sp, tp) = (&scene.poses[source_view], &scene.poses[target_view]);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut hit = vec![false; w * h];
    if source_mask.is_empty() {
        return Ok(Mask::new(w, h));
    }
    for y in 0..source_depth.height {
        for x in 0..source_depth.width {
            let dist = source_depth.get(x, y);
            if !(dist > 0.0 && dist.is_finite()) {
                continue;
            }
            let px = PixelCoord::center(x, y, source_view);
            let z = ray_distance_to_camera_depth(intr, &px, dist);
            let world = pixel_to_world(sp, intr, z, &px)?;
            let Ok((q, cam_z)) = world_to_pixel(tp, intr, &world) else {
                continue;
            };
            let Some((tx, ty)) = intr.pixel_index(q.u, q.v) else {
                continue;
            };
            let i = ty * w + tx;
            if cam_z < zbuf[i] {
                zbuf[i] = cam_z;
                hit[i] = source_mask.get(x, y);
            }
        }
    }
    Ok(Mask {
        width: w,
        height: h,
        data: hit,
    })
}

/// Grid resolution and initial values for a fresh field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub resolution: [usize; 3],
    pub init: GridInit,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            resolution: [32; 3],
            init: GridInit {
                sigma: 3.0,
                ..GridInit::default()
            },
        }
    }
}

impl GridConfig {
    pub fn build(&self, scene: &Scene) -> Result<RadianceGrid> {
        RadianceGrid::new(self.resolution, scene.field_bounds()?, self.init)
    }
}

/// Schedule tuned for dense grids: fast density, slower color, decaying rates.
pub fn grid_schedule(iterations: usize, seed: u64) -> Schedule {
    let mut s = Schedule {
        iterations,
        rays_per_batch: 1024,
        n_samples: 48,
        lr_final_factor: 0.1,
        seed,
        ..Schedule::default()
    };
    s.adam.lr_density = 1.0;
    s.adam.lr_color = 0.02;
    s.adam.lr_logit = 0.05;
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub grid: GridConfig,
    /// Reconstruction fit used for mask transfer and as warm start.
    pub geometry_schedule: Schedule,
    pub schedule: Schedule,
    pub lambda_clf: f64,
    pub stages: usize,
    pub threshold: f64,
    pub render_samples: usize,
    /// Start the first semantic fit from the geometry fit's density and
    /// color, and each later stage from the previous stage's field.
    pub warm_start: bool,
    pub region_grow: RegionGrowConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            grid: GridConfig::default(),
            geometry_schedule: grid_schedule(1500, 0),
            schedule: grid_schedule(800, 1),
            lambda_clf: LossWeights::default().lambda_clf,
            stages: 2,
            threshold: 0.5,
            render_samples: 48,
            warm_start: true,
            region_grow: RegionGrowConfig::default(),
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        if !(self.lambda_clf >= 0.0 && self.lambda_clf.is_finite()) {
            return Err(Error::Config("lambda_clf must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        self.schedule.validate()?;
        self.geometry_schedule.validate()
    }

    pub fn render_options(&self, scene: &Scene) -> RenderOptions {
        scene.render_options(self.render_samples, SampleMode::Midpoint, 0)
    }
}

/// Plain color fit of the scene with the object present.
pub fn fit_geometry(
    scene: &Scene,
    grid: &GridConfig,
    schedule: &Schedule,
    control: Option<&FitControl>,
) -> Result<(RadianceGrid, FitReport)> {
    let mut g = grid.build(scene)?;
    let report = fit(
        &mut g,
        &FitData::new(scene),
        &LossConfig {
            mode: FitMode::Reconstruct,
            ..LossConfig::default()
        },
        schedule,
        control,
    )?;
    Ok((g, report))
}

/// Fits reconstruction plus objectness classification against `masks`.
/// With `warm`, density and color start from that grid.
pub fn fit_semantic_field(
    scene: &Scene,
    masks: &MaskSet,
    config: &SegmentConfig,
    warm: Option<&RadianceGrid>,
    control: Option<&FitControl>,
) -> Result<(RadianceGrid, FitReport)> {
    config.validate()?;
    masks.validate(scene)?;
    let mut grid = config.grid.build(scene)?;
    if let Some(w) = warm {
        grid.copy_channels_from(
            w,
            Channels {
                density: true,
                color: true,
                logit: false,
            },
        )?;
    }
    continue_semantic_fit(scene, masks, config, grid, control)
}

fn continue_semantic_fit(
    scene: &Scene,
    masks: &MaskSet,
    config: &SegmentConfig,
    mut grid: RadianceGrid,
    control: Option<&FitControl>,
) -> Result<(RadianceGrid, FitReport)> {
    let data = FitData {
        masks: Some(&masks.masks),
        ..FitData::new(scene)
    };
    let loss = LossConfig {
        mode: FitMode::Segment,
        weights: LossWeights {
            lambda_clf: config.lambda_clf,
            ..LossWeights::default()
        },
        ..LossConfig::default()
    };
    let report = fit(&mut grid, &data, &loss, &config.schedule, control)?;
    Ok((grid, report))
}

/// Rendered objectness probability `sigmoid(S)` per view.
pub fn render_probabilities(
    grid: &RadianceGrid,
    scene: &Scene,
    opts: &RenderOptions,
) -> Result<Vec<ScalarMap>> {
    scene
        .poses
        .iter()
        .map(|p| render_view(grid, &scene.intrinsics, p, opts).map(|r| r.probability()))
        .collect()
}

pub fn threshold_probabilities(probs: &[ScalarMap], threshold: f64) -> Vec<Mask> {
    probs
        .iter()
        .map(|p| Mask {
            width: p.width,
            height: p.height,
            data: p.data.iter().map(|&v| v > threshold).collect(),
        })
        .collect()
}

/// Masks where the rendered objectness probability exceeds `threshold`.
pub fn render_masks(
    grid: &RadianceGrid,
    scene: &Scene,
    threshold: f64,
    opts: &RenderOptions,
) -> Result<MaskSet> {
    let probs = render_probabilities(grid, scene, opts)?;
    Ok(MaskSet::new(
        threshold_probabilities(&probs, threshold),
        Provenance::Rendered { stage: 0 },
    ))
}

/// Inputs available to an initial-mask provider.
pub struct InitContext<'a> {
    pub scene: &'a Scene,
    pub annotations: Option<&'a AnnotationSet>,
    /// Reconstruction of the scene, present when the provider asks for it.
    pub geometry: Option<&'a RadianceGrid>,
    pub render: RenderOptions,
}

pub trait InitProvider: Send + Sync {
    fn id(&self) -> &'static str;
    fn needs_geometry(&self) -> bool;
    fn initial_masks(&self, ctx: &InitContext<'_>) -> Result<MaskSet>;
}

fn require_annotations<'a>(ctx: &InitContext<'a>) -> Result<&'a AnnotationSet> {
    let ann = ctx
        .annotations
        .ok_or_else(|| Error::Config("annotations are required".into()))?;
    ann.validate(ctx.scene.view_count(), ctx.scene.width(), ctx.scene.height())?;
    Ok(ann)
}

fn require_geometry<'a>(ctx: &InitContext<'a>) -> Result<&'a RadianceGrid> {
    ctx.geometry
        .ok_or_else(|| Error::Config("provider needs a reconstruction of the scene".into()))
}

fn source_projections(
    ctx: &InitContext<'_>,
    source_mask: &Mask,
    source_view: usize,
) -> Result<Vec<Mask>> {
    let geometry = require_geometry(ctx)?;
    let depth = render_view(
        geometry,
        &ctx.scene.intrinsics,
        &ctx.scene.poses[source_view],
        &ctx.render,
    )?
    .depth;
    (0..ctx.scene.view_count())
        .into_par_iter()
        .map(|v| {
            if v == source_view {
                Ok(source_mask.clone())
            } else {
                project_mask(source_mask, &depth, ctx.scene, source_view, v)
            }
        })
        .collect()
}

/// Source mask from clicks, transferred to the other views by depth and grown
/// there from the transferred pixels whose color matches the source object.
#[derive(Debug, Clone, Default)]
pub struct RegionGrowProvider {
    pub config: RegionGrowConfig,
}

impl InitProvider for RegionGrowProvider {
    fn id(&self) -> &'static str {
        "region_grow"
    }

    fn needs_geometry(&self) -> bool {
        true
    }

    fn initial_masks(&self, ctx: &InitContext<'_>) -> Result<MaskSet> {
        let ann = require_annotations(ctx)?;
        let sv = ann.source_view;
        let source_image = &ctx.scene.images[sv];
        let source = init_source_mask(source_image, ann, &self.config)?;
        let n = source.count().max(1) as f64;
        let mut mean = [0.0; 3];
        for (i, &m) in source.data.iter().enumerate() {
            if m {
                (0..3).for_each(|c| mean[c] += source_image.data[i][c] / n);
            }
        }
        let projected = source_projections(ctx, &source, sv)?;
        let masks = projected
            .into_par_iter()
            .enumerate()
            .map(|(v, proj)| {
                if v == sv {
                    return proj;
                }
                let img = &ctx.scene.images[v];
                let seeds: Vec<(usize, usize)> = (0..proj.data.len())
                    .filter(|&i| proj.data[i] && color_dist(img.data[i], mean) <= self.config.color_tol)
                    .map(|i| (i % proj.width, i / proj.width))
                    .collect();
                let grown = region_grow(img, &seeds, &[], &self.config);
                if self.config.close_kernel > 1 {
                    close(&grown, self.config.close_kernel)
                } else {
                    grown
                }
            })
            .collect();
        Ok(MaskSet::new(
            masks,
            Provenance::Initial {
                provider: self.id().into(),
            },
        ))
    }
}

/// Externally produced masks, one per view.
#[derive(Debug, Clone)]
pub struct FileMasksProvider {
    pub masks: Vec<Mask>,
}

impl InitProvider for FileMasksProvider {
    fn id(&self) -> &'static str {
        "file_masks"
    }

    fn needs_geometry(&self) -> bool {
        false
    }

    fn initial_masks(&self, ctx: &InitContext<'_>) -> Result<MaskSet> {
        let set = MaskSet::new(self.masks.clone(), Provenance::File);
        set.validate(ctx.scene)?;
        Ok(set)
    }
}

/// Source mask (given, or grown from clicks) transferred by depth only.
#[derive(Debug, Clone, Default)]
pub struct ProjectOnlyProvider {
    pub config: RegionGrowConfig,
    pub source_mask: Option<Mask>,
}

impl InitProvider for ProjectOnlyProvider {
    fn id(&self) -> &'static str {
        "project_only"
    }

    fn needs_geometry(&self) -> bool {
        true
    }

    fn initial_masks(&self, ctx: &InitContext<'_>) -> Result<MaskSet> {
        let ann = require_annotations(ctx)?;
        let sv = ann.source_view;
        let source = match &self.source_mask {
            Some(m) => {
                check_same_shape(m, &ctx.scene.images[sv], "source mask")?;
                m.clone()
            }
            None => init_source_mask(&ctx.scene.images[sv], ann, &self.config)?,
        };
        Ok(MaskSet::new(
            source_projections(ctx, &source, sv)?,
            Provenance::Projected,
        ))
    }
}

pub struct SegmentOutput {
    pub masks: MaskSet,
    pub grid: RadianceGrid,
    pub initial: MaskSet,
    /// Rendered masks after each stage, in order.
    pub stages: Vec<MaskSet>,
    pub geometry: Option<RadianceGrid>,
    pub reports: Vec<FitReport>,
}

/// Initial masks, then `config.stages` semantic fits, each supervised by the
/// previous stage's rendered masks.
pub fn segment(
    scene: &Scene,
    annotations: Option<&AnnotationSet>,
    provider: &dyn InitProvider,
    config: &SegmentConfig,
    control: Option<&FitControl>,
) -> Result<SegmentOutput> {
    config.validate()?;
    scene.validate()?;
    let mut reports = Vec::new();
    let geometry = if provider.needs_geometry() || config.warm_start {
        let (g, r) = fit_geometry(scene, &config.grid, &config.geometry_schedule, control)?;
        reports.push(r);
        Some(g)
    } else {
        None
    };
    let render = config.render_options(scene);
    let initial = provider.initial_masks(&InitContext {
        scene,
        annotations,
        geometry: geometry.as_ref(),
        render,
    })?;
    initial.validate(scene)?;
    let warm = if config.warm_start {
        geometry.as_ref()
    } else {
        None
    };
    let mut supervision = initial.clone();
    let mut stages = Vec::with_capacity(config.stages);
    let mut grid = None;
    for stage in 1..=config.stages {
        let (g, r) = match grid.take() {
            Some(prev) if config.warm_start => continue_semantic_fit(scene, &supervision, config, prev, control)?,
            _ => fit_semantic_field(scene, &supervision, config, warm, control)?,
        };
        reports.push(r);
        let rendered = render_masks(&g, scene, config.threshold, &render)?;
        let set = supervision.derive(rendered.masks, Provenance::Rendered { stage });
        stages.push(set.clone());
        supervision = set;
        grid = Some(g);
    }
    Ok(SegmentOutput {
        masks: supervision,
        grid: grid.expect("at least one stage"),
        initial,
        stages,
        geometry,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub accuracy: f64,
    pub iou: f64,
}

/// Percentages; IoU of two empty masks is 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub per_view: Vec<ViewMetrics>,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
}

pub fn mask_metrics(pred: &Mask, truth: &Mask) -> Result<ViewMetrics> {
    check_same_shape(pred, truth, "predicted and true masks")?;
    let (mut inter, mut union, mut correct) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
        correct += (p == t) as usize;
    }
    Ok(ViewMetrics {
        accuracy: 100.0 * correct as f64 / pred.data.len().max(1) as f64,
        iou: if union == 0 {
            100.0
        } else {
            100.0 * inter as f64 / union as f64
        },
    })
}

pub fn evaluate_masks(pred: &[Mask], truth: &[Mask]) -> Result<MaskMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted masks, {} true masks",
            pred.len(),
            truth.len()
        )));
    }
    let per_view = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| mask_metrics(p, t))
        .collect::<Result<Vec<_>>>()?;
    let n = per_view.len().max(1) as f64;
    Ok(MaskMetrics {
        mean_accuracy: per_view.iter().map(|m| m.accuracy).sum::<f64>() / n,
        mean_iou: per_view.iter().map(|m| m.iou).sum::<f64>() / n,
        per_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(w: usize, h: usize, x: usize, y: usize) -> Mask {
        let mut m = Mask::new(w, h);
        m.set(x, y, true);
        m
    }

    #[test]
    fn dilation_stamps() {
        let m = dot(41, 41, 20, 20);
        assert_eq!(dilate(&m, 5, 0), m);
        assert_eq!(dilate(&m, 5, 1).count(), 25);
        let five = dilate(&m, 5, 5);
        assert_eq!(five.count(), 441);
        assert_eq!(five.bbox(), Some((10, 10, 30, 30)));
    }

    #[test]
    fn closing_keeps_every_pixel() {
        let mut m = Mask::new(10, 10);
        for (x, y) in [(0, 0), (2, 0), (9, 9), (5, 5), (5, 7)] {
            m.set(x, y, true);
        }
        let c = close(&m, 3);
        assert!(m.is_subset_of(&c));
        assert!(c.get(1, 0) && c.get(5, 6));
    }

    fn two_tone() -> Image {
        Image::from_fn(32, 32, |x, y| {
            if (8..20).contains(&x) && (10..24).contains(&y) {
                [0.9, 0.1, 0.1]
            } else {
                [0.2, 0.5, 0.8]
            }
        })
    }

    #[test]
    fn region_grow_recovers_uniform_object() {
        let img = two_tone();
        let ann = AnnotationSet {
            source_view: 0,
            positive: vec![[12.5, 15.5]],
            negative: vec![],
        };
        let m = init_source_mask(&img, &ann, &RegionGrowConfig::default()).unwrap();
        let truth = Mask::from_fn(32, 32, |x, y| (8..20).contains(&x) && (10..24).contains(&y));
        assert!(mask_metrics(&m, &truth).unwrap().iou >= 95.0);
    }

    #[test]
    fn negative_point_is_unmasked() {
        let img = two_tone();
        let ann = AnnotationSet {
            source_view: 0,
            positive: vec![[12.5, 15.5]],
            negative: vec![[14.5, 15.5]],
        };
        let m = init_source_mask(&img, &ann, &RegionGrowConfig::default()).unwrap();
        assert!(!m.get(14, 15));
        assert!(m.get(12, 15));
    }

    #[test]
    fn seeds_are_always_in() {
        let img = Image::from_fn(16, 16, |x, y| [(x * 16 + y) as f64 / 256.0, 0.0, 1.0]);
        let pts: Vec<[f64; 2]> = (0..16).map(|i| [i as f64 + 0.5, 3.5]).collect();
        let ann = AnnotationSet {
            source_view: 0,
            positive: pts,
            negative: vec![],
        };
        let m = init_source_mask(&img, &ann, &RegionGrowConfig::default()).unwrap();
        assert!((0..16).all(|x| m.get(x, 3)));
    }

    #[test]
    fn no_positive_points_rejected() {
        let ann = AnnotationSet {
            source_view: 0,
            positive: vec![],
            negative: vec![],
        };
        assert!(init_source_mask(&two_tone(), &ann, &RegionGrowConfig::default()).is_err());
    }

    #[test]
    fn annotation_json_shape() {
        let ann: AnnotationSet =
            serde_json::from_str(r#"{"source_view": 2, "positive": [[1.5, 2.5]], "negative": []}"#)
                .unwrap();
        assert_eq!(ann.positive_pixels(), vec![(1, 2)]);
        let back: AnnotationSet = serde_json::from_str(&serde_json::to_string(&ann).unwrap()).unwrap();
        assert_eq!(back, ann);
    }

    #[test]
    fn metrics_disjoint_tenths() {
        let a = Mask::from_fn(10, 10, |_, y| y == 0);
        let b = Mask::from_fn(10, 10, |_, y| y == 1);
        let m = mask_metrics(&a, &b).unwrap();
        assert_eq!(m.iou, 0.0);
        assert!((m.accuracy - 80.0).abs() < 1e-12);
        assert_eq!(mask_metrics(&a, &a).unwrap(), ViewMetrics { accuracy: 100.0, iou: 100.0 });
        let e = Mask::new(4, 4);
        assert_eq!(mask_metrics(&e, &e).unwrap().iou, 100.0);
    }
}
