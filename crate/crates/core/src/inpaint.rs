//! 3D inpainting: 2D priors for color and depth, optional mask refinement,
//! and fitting the object-free field.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceGrid;
use crate::geometry::{Intrinsics, Pose};
use crate::imaging::{check_same_shape, Image, Mask, ScalarMap};
use crate::optim::{
    fit, perceptual_distance, FitControl, FitData, FitMode, FitReport, LossConfig, LossWeights,
    PatchSpec, PerceptualExtractor, Schedule,
};
use crate::refine::{refine_views, RefineConfig, RefineStats};
use crate::renderer::{render_view, RenderOptions, SampleMode};
use crate::scene::Scene;
use crate::segmentation::{dilate, fit_geometry, grid_schedule, Dilation, GridConfig};

/// A 2D inpainter for color images and depth maps.
pub trait InpaintProvider: Send + Sync {
    fn id(&self) -> &str;
    fn inpaint_rgb(&self, view: usize, image: &Image, mask: &Mask) -> Result<Image>;
    fn inpaint_depth(&self, view: usize, depth: &ScalarMap, mask: &Mask) -> Result<ScalarMap>;
}

/// Wraps a provider so that unmasked pixels come back bit-identical and every
/// output value is finite.
pub struct Enforced<P>(pub P);

fn composite<T: Copy>(original: &[T], fill: &[T], mask: &Mask) -> Vec<T> {
    original
        .iter()
        .zip(fill)
        .zip(&mask.data)
        .map(|((&o, &f), &m)| if m { f } else { o })
        .collect()
}

impl<P: InpaintProvider> InpaintProvider for Enforced<P> {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn inpaint_rgb(&self, view: usize, image: &Image, mask: &Mask) -> Result<Image> {
        check_same_shape(image, mask, "image and mask")?;
        let fill = self.0.inpaint_rgb(view, image, mask)?;
        check_same_shape(&fill, image, "inpainted image")?;
        let data = composite(&image.data, &fill.data, mask);
        if let Some(i) = data.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: format!("{} rgb output", self.id()),
                location: format!("view {view}, pixel {i}"),
            });
        }
        Ok(Image {
            width: image.width,
            height: image.height,
            data,
        })
    }

    fn inpaint_depth(&self, view: usize, depth: &ScalarMap, mask: &Mask) -> Result<ScalarMap> {
        check_same_shape(depth, mask, "depth and mask")?;
        let fill = self.0.inpaint_depth(view, depth, mask)?;
        check_same_shape(&fill, depth, "inpainted depth")?;
        let data = composite(&depth.data, &fill.data, mask);
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{} depth output", self.id()),
                location: format!("view {view}, pixel {i}"),
            });
        }
        Ok(ScalarMap {
            width: depth.width,
            height: depth.height,
            data,
        })
    }
}

impl<P: InpaintProvider + ?Sized> InpaintProvider for &P {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn inpaint_rgb(&self, view: usize, image: &Image, mask: &Mask) -> Result<Image> {
        (**self).inpaint_rgb(view, image, mask)
    }
    fn inpaint_depth(&self, view: usize, depth: &ScalarMap, mask: &Mask) -> Result<ScalarMap> {
        (**self).inpaint_depth(view, depth, mask)
    }
}

/// Fills masked pixels with the solution of the discrete Laplace equation.
/// Unmasked pixels are fixed; image borders are zero-flux.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonicProvider {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub omega: f64,
}

impl Default for HarmonicProvider {
    fn default() -> Self {
        HarmonicProvider {
            tolerance: 1e-6,
            max_iterations: 20_000,
            omega: 1.9,
        }
    }
}

pub fn harmonic_provider() -> HarmonicProvider {
    HarmonicProvider::default()
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

impl HarmonicProvider {
    /// Solves every channel in place with successive over-relaxation.
    pub fn solve(&self, channels: &mut [Vec<f64>], mask: &Mask) -> Result<()> {
        let (w, h) = (mask.width, mask.height);
        let unknown: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i]).collect();
        if unknown.is_empty() {
            return Ok(());
        }
        // Breadth-first from the known pixels: seeds the initial guess and
        // finds regions cut off from any known value.
        let mut seen: Vec<bool> = mask.data.iter().map(|m| !m).collect();
        let mut queue: VecDeque<usize> = (0..mask.data.len()).filter(|&i| !mask.data[i]).collect();
        while let Some(i) = queue.pop_front() {
            for j in neighbours(i, w, h) {
                if !seen[j] {
                    seen[j] = true;
                    for c in channels.iter_mut() {
                        c[j] = c[i];
                    }
                    queue.push_back(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::domain(
                "masked region has no unmasked boundary to inpaint from",
            ));
        }
        for c in channels.iter_mut() {
            let mut converged = false;
            for _ in 0..self.max_iterations {
                let mut residual = 0.0f64;
                for &i in &unknown {
                    let (mut sum, mut n) = (0.0, 0.0);
                    for j in neighbours(i, w, h) {
                        sum += c[j];
                        n += 1.0;
                    }
                    let r = sum / n - c[i];
                    residual = residual.max(r.abs());
                    c[i] += self.omega * r;
                }
                if residual < self.tolerance {
                    converged = true;
                    break;
                }
            }
            if !converged {
                log::warn!(
                    "harmonic fill stopped after {} iterations above tolerance",
                    self.max_iterations
                );
            }
        }
        Ok(())
    }
}

impl InpaintProvider for HarmonicProvider {
    fn id(&self) -> &str {
        "harmonic"
    }

    fn inpaint_rgb(&self, _view: usize, image: &Image, mask: &Mask) -> Result<Image> {
        check_same_shape(image, mask, "image and mask")?;
        let mut chans: Vec<Vec<f64>> = (0..3)
            .map(|c| image.data.iter().map(|p| p[c]).collect())
            .collect();
        self.solve(&mut chans, mask)?;
        Ok(Image::from_fn(image.width, image.height, |x, y| {
            let i = y * image.width + x;
            [chans[0][i], chans[1][i], chans[2][i]]
        }))
    }

    fn inpaint_depth(&self, _view: usize, depth: &ScalarMap, mask: &Mask) -> Result<ScalarMap> {
        check_same_shape(depth, mask, "depth and mask")?;
        let mut chans = vec![depth.data.clone()];
        self.solve(&mut chans, mask)?;
        Ok(ScalarMap {
            width: depth.width,
            height: depth.height,
            data: chans.pop().expect("one channel"),
        })
    }
}

/// Inpaintings produced elsewhere: `{dir}/{stem}.png` per view and optionally
/// `{dir}/depth/{stem}.pfm`. Without a depth directory, depth falls back to
/// the harmonic fill.
#[derive(Debug, Clone)]
pub struct DirectoryProvider {
    pub dir: PathBuf,
    pub rgb: Vec<PathBuf>,
    pub depth: Option<Vec<PathBuf>>,
    fallback: HarmonicProvider,
}

pub fn directory_provider(dir: &Path, stems: &[String]) -> Result<DirectoryProvider> {
    let rgb: Vec<PathBuf> = stems.iter().map(|s| dir.join(format!("{s}.png"))).collect();
    let depth_dir = dir.join("depth");
    let depth: Option<Vec<PathBuf>> = depth_dir.is_dir().then(|| {
        stems
            .iter()
            .map(|s| depth_dir.join(format!("{s}.pfm")))
            .collect()
    });
    let missing: Vec<String> = rgb
        .iter()
        .chain(depth.iter().flatten())
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let extra = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count();
    if extra != stems.len() {
        return Err(Error::Shape(format!(
            "{} has {extra} images for {} views",
            dir.display(),
            stems.len()
        )));
    }
    Ok(DirectoryProvider {
        dir: dir.to_path_buf(),
        rgb,
        depth,
        fallback: HarmonicProvider::default(),
    })
}

impl InpaintProvider for DirectoryProvider {
    fn id(&self) -> &str {
        "directory"
    }

    fn inpaint_rgb(&self, view: usize, image: &Image, _mask: &Mask) -> Result<Image> {
        let path = self
            .rgb
            .get(view)
            .ok_or_else(|| Error::Shape(format!("no stored inpainting for view {view}")))?;
        let stored = Image::load_png(path)?;
        check_same_shape(&stored, image, "stored inpainting")?;
        Ok(stored)
    }

    fn inpaint_depth(&self, view: usize, depth: &ScalarMap, mask: &Mask) -> Result<ScalarMap> {
        match &self.depth {
            Some(paths) => {
                let stored = ScalarMap::load_pfm(&paths[view])?;
                check_same_shape(&stored, depth, "stored depth inpainting")?;
                Ok(stored)
            }
            None => self.fallback.inpaint_depth(view, depth, mask),
        }
    }
}

/// Appearance and geometry priors for the inpainted fit.
#[derive(Debug, Clone)]
pub struct Priors {
    pub images: Vec<Image>,
    pub depths: Vec<ScalarMap>,
    pub masks: Vec<Mask>,
    pub provider: String,
}

pub fn inpaint_images(
    images: &[Image],
    masks: &[Mask],
    provider: &dyn InpaintProvider,
) -> Result<Vec<Image>> {
    let p = Enforced(provider);
    images
        .par_iter()
        .zip(masks)
        .enumerate()
        .map(|(v, (img, m))| p.inpaint_rgb(v, img, m))
        .collect()
}

pub fn inpaint_depths(
    depths: &[ScalarMap],
    masks: &[Mask],
    provider: &dyn InpaintProvider,
) -> Result<Vec<ScalarMap>> {
    let p = Enforced(provider);
    depths
        .par_iter()
        .zip(masks)
        .enumerate()
        .map(|(v, (d, m))| p.inpaint_depth(v, d, m))
        .collect()
}

/// Rendered ray-distance depth of every training view.
pub fn render_depths(
    grid: &RadianceGrid,
    scene: &Scene,
    opts: &RenderOptions,
) -> Result<Vec<ScalarMap>> {
    scene
        .poses
        .iter()
        .map(|p| render_view(grid, &scene.intrinsics, p, opts).map(|r| r.depth))
        .collect()
}

/// Renders the original field's depth maps and inpaints them under `masks`.
pub fn extract_depth_priors(
    original: &RadianceGrid,
    scene: &Scene,
    masks: &[Mask],
    provider: &dyn InpaintProvider,
    opts: &RenderOptions,
) -> Result<Vec<ScalarMap>> {
    let depths = render_depths(original, scene, opts)?;
    inpaint_depths(&depths, masks, provider)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintOptions {
    pub dilation: Dilation,
    pub grid: GridConfig,
    /// Fit of the scene with the object, used when no grid is supplied.
    pub original_schedule: Schedule,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub patch: PatchSpec,
    pub patch_sample_mode: SampleMode,
    pub refine: bool,
    pub refine_config: RefineConfig,
    /// Supervise depth with inpainted depth maps.
    pub depth_priors: bool,
    pub render_samples: usize,
    /// Start the inpainted fit from the original field.
    pub warm_start: bool,
}

impl Default for InpaintOptions {
    fn default() -> Self {
        InpaintOptions {
            dilation: Dilation {
                kernel: 5,
                iterations: 5,
            },
            grid: GridConfig {
                resolution: [64; 3],
                ..GridConfig::default()
            },
            original_schedule: grid_schedule(1500, 0),
            schedule: grid_schedule(1500, 2),
            weights: LossWeights::default(),
            patch: PatchSpec::default(),
            patch_sample_mode: SampleMode::Stratified,
            refine: true,
            refine_config: RefineConfig::default(),
            depth_priors: true,
            render_samples: 48,
            warm_start: true,
        }
    }
}

impl InpaintOptions {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.patch.validate()?;
        self.schedule.validate()?;
        self.original_schedule.validate()?;
        self.refine_config.validate()
    }

    pub fn render_options(&self, scene: &Scene) -> RenderOptions {
        scene.render_options(self.render_samples, SampleMode::Midpoint, 0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub original_ms: f64,
    pub refine_ms: f64,
    pub priors_ms: f64,
    pub fit_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintReport {
    pub provider: String,
    pub masked_area_dilated: usize,
    pub refine: Option<RefineStats>,
    pub original_fit: Option<FitReport>,
    pub fit: FitReport,
    pub timings: StageTimings,
}

pub struct InpaintInputs<'a> {
    pub scene: &'a Scene,
    /// Undilated object masks, one per view.
    pub masks: &'a [Mask],
    pub provider: &'a dyn InpaintProvider,
    /// Field fit to the scene with the object; fitted here when absent.
    pub original: Option<&'a RadianceGrid>,
    pub extractor: Option<&'a dyn PerceptualExtractor>,
    /// Where stage artifacts are written, if anywhere.
    pub stage_dir: Option<&'a Path>,
}

pub struct InpaintOutput {
    pub grid: RadianceGrid,
    pub original: RadianceGrid,
    pub dilated_masks: Vec<Mask>,
    pub priors: Priors,
    pub report: InpaintReport,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Dilate, fit or reuse the original field, optionally refine, build priors,
/// then fit the inpainted field.
pub fn inpaint_scene(
    inputs: &InpaintInputs<'_>,
    opts: &InpaintOptions,
    control: Option<&FitControl>,
) -> Result<InpaintOutput> {
    opts.validate()?;
    let scene = inputs.scene;
    scene.validate()?;
    if inputs.masks.len() != scene.view_count() {
        return Err(Error::Shape(format!(
            "{} masks for {} views",
            inputs.masks.len(),
            scene.view_count()
        )));
    }
    for m in inputs.masks {
        check_same_shape(m, &scene.images[0], "mask")?;
    }
    let stems = scene.stems();
    let dilated: Vec<Mask> = inputs
        .masks
        .par_iter()
        .map(|m| dilate(m, opts.dilation.kernel, opts.dilation.iterations))
        .collect();
    if let Some(dir) = inputs.stage_dir {
        save_masks(&dir.join("dilated_masks"), &dilated, &stems)?;
    }

    let t = Instant::now();
    let (original, original_fit) = match inputs.original {
        Some(g) => (g.clone(), None),
        None => {
            let (g, r) = fit_geometry(scene, &opts.grid, &opts.original_schedule, control)?;
            (g, Some(r))
        }
    };
    let original_ms = ms(t);
    let render = opts.render_options(scene);
    let depths = render_depths(&original, scene, &render)?;

    let t = Instant::now();
    let (images, depths, masks, depth_masks, refine) = if opts.refine {
        let out = refine_views(scene, &depths, &dilated, &opts.refine_config)?;
        if let Some(dir) = inputs.stage_dir {
            let d = dir.join("refined");
            save_images(&d, &out.images, &stems)?;
            save_masks(&d.join("masks"), &out.masks, &stems)?;
            save_depths(&d.join("depth"), &out.depths, &stems)?;
            write_json(&d.join("stats.json"), &out.stats)?;
        }
        // Unrefined depths still show the object wherever RGB was refined,
        // so depth is then inpainted under the full dilated masks.
        let depth_masks = if opts.refine_config.refine_depths {
            out.masks.clone()
        } else {
            dilated.clone()
        };
        (out.images, out.depths, out.masks, depth_masks, Some(out.stats))
    } else {
        (scene.images.clone(), depths, dilated.clone(), dilated.clone(), None)
    };
    let refine_ms = ms(t);

    let t = Instant::now();
    let prior_images = inpaint_images(&images, &masks, inputs.provider)?;
    let prior_depths = inpaint_depths(&depths, &depth_masks, inputs.provider)?;
    if let Some(dir) = inputs.stage_dir {
        save_images(&dir.join("priors_rgb"), &prior_images, &stems)?;
        save_depths(&dir.join("priors_depth"), &prior_depths, &stems)?;
    }
    let priors = Priors {
        images: prior_images,
        depths: prior_depths,
        masks,
        provider: inputs.provider.id().to_string(),
    };
    let priors_ms = ms(t);

    let t = Instant::now();
    let target = Scene {
        images,
        ..scene.clone()
    };
    let mut weights = opts.weights;
    if !opts.depth_priors {
        weights.lambda_depth = 0.0;
    }
    let data = FitData {
        scene: &target,
        masks: Some(&priors.masks),
        rgb_priors: Some(&priors.images),
        depth_priors: Some(&priors.depths),
        extractor: inputs.extractor,
    };
    let loss = LossConfig {
        mode: FitMode::Inpaint,
        weights,
        patch: opts.patch,
        patch_sample_mode: opts.patch_sample_mode,
        ..LossConfig::default()
    };
    let mut grid = if opts.warm_start {
        original.clone()
    } else {
        opts.grid.build(scene)?
    };
    let fit_report = fit(&mut grid, &data, &loss, &opts.schedule, control)?;
    let fit_ms = ms(t);

    let report = InpaintReport {
        provider: priors.provider.clone(),
        masked_area_dilated: dilated.iter().map(Mask::count).sum(),
        refine,
        original_fit,
        fit: fit_report,
        timings: StageTimings {
            original_ms,
            refine_ms,
            priors_ms,
            fit_ms,
        },
    };
    if let Some(dir) = inputs.stage_dir {
        grid.save(&dir.join("inpainted_grid.spgr"))?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(InpaintOutput {
        grid,
        original,
        dilated_masks: dilated,
        priors,
        report,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_images(dir: &Path, images: &[Image], stems: &[String]) -> Result<()> {
    mkdir(dir)?;
    for (img, s) in images.iter().zip(stems) {
        img.save_png(&dir.join(format!("{s}.png")))?;
    }
    Ok(())
}

fn save_masks(dir: &Path, masks: &[Mask], stems: &[String]) -> Result<()> {
    mkdir(dir)?;
    for (m, s) in masks.iter().zip(stems) {
        m.save_png(&dir.join(format!("{s}.png")))?;
    }
    Ok(())
}

fn save_depths(dir: &Path, depths: &[ScalarMap], stems: &[String]) -> Result<()> {
    mkdir(dir)?;
    for (d, s) in depths.iter().zip(stems) {
        d.save_pfm(&dir.join(format!("{s}.pfm")))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Grows an inclusive box by `fraction` of its size on every side, clamped to
/// the image.
pub fn expand_bbox(
    bbox: (usize, usize, usize, usize),
    width: usize,
    height: usize,
    fraction: f64,
) -> (usize, usize, usize, usize) {
    let (x0, y0, x1, y1) = bbox;
    let px = (fraction * (x1 - x0 + 1) as f64).round() as usize;
    let py = (fraction * (y1 - y0 + 1) as f64).round() as usize;
    (
        x0.saturating_sub(px),
        y0.saturating_sub(py),
        (x1 + px).min(width - 1),
        (y1 + py).min(height - 1),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewInpaintMetrics {
    /// Perceptual distance inside the expanded mask box.
    pub perceptual: f64,
    /// Mean squared error inside the expanded mask box.
    pub mse: f64,
    /// Mean absolute error over masked pixels, averaged over channels.
    pub masked_mae: f64,
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintMetrics {
    /// `None` for views whose mask is empty.
    pub per_view: Vec<Option<ViewInpaintMetrics>>,
    pub mean_perceptual: f64,
    pub mean_mse: f64,
    pub mean_masked_mae: f64,
}

impl InpaintMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,perceptual,mse,masked_mae,x0,y0,x1,y1\n");
        for (v, m) in self.per_view.iter().enumerate() {
            match m {
                Some(m) => out.push_str(&format!(
                    "{v},{},{},{},{},{},{},{}\n",
                    m.perceptual, m.mse, m.masked_mae, m.bbox.0, m.bbox.1, m.bbox.2, m.bbox.3
                )),
                None => out.push_str(&format!("{v},,,,,,,\n")),
            }
        }
        out
    }
}

/// Compares one rendered view with its object-free truth inside the mask's
/// bounding box grown by 10% per side.
pub fn compare_view(
    render: &Image,
    truth: &Image,
    mask: &Mask,
    ext: &dyn PerceptualExtractor,
) -> Result<Option<ViewInpaintMetrics>> {
    check_same_shape(render, truth, "render and truth")?;
    check_same_shape(render, mask, "render and mask")?;
    let Some(b) = mask.bbox() else {
        return Ok(None);
    };
    let bbox = expand_bbox(b, mask.width, mask.height, 0.1);
    let (w, h) = (bbox.2 - bbox.0 + 1, bbox.3 - bbox.1 + 1);
    let a = render.crop(bbox.0, bbox.1, w, h);
    let t = truth.crop(bbox.0, bbox.1, w, h);
    let mse = a
        .data
        .iter()
        .zip(&t.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3 * a.data.len()) as f64;
    let (mut abs, mut n) = (0.0, 0usize);
    for i in (0..mask.data.len()).filter(|&i| mask.data[i]) {
        abs += (0..3)
            .map(|c| (render.data[i][c] - truth.data[i][c]).abs())
            .sum::<f64>()
            / 3.0;
        n += 1;
    }
    Ok(Some(ViewInpaintMetrics {
        perceptual: perceptual_distance(ext, &a, &t)?,
        mse,
        masked_mae: abs / n as f64,
        bbox,
    }))
}

/// Renders each evaluation pose and compares it with the object-free truth.
pub fn evaluate_inpainting(
    grid: &RadianceGrid,
    intrinsics: &Intrinsics,
    poses: &[Pose],
    truth: &[Image],
    masks: &[Mask],
    ext: &dyn PerceptualExtractor,
    opts: &RenderOptions,
) -> Result<InpaintMetrics> {
    if poses.len() != truth.len() || poses.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} poses, {} truth images, {} masks",
            poses.len(),
            truth.len(),
            masks.len()
        )));
    }
    let mut per_view = Vec::with_capacity(poses.len());
    for (v, ((pose, t), m)) in poses.iter().zip(truth).zip(masks).enumerate() {
        let r = render_view(grid, intrinsics, pose, opts)?;
        let metrics = compare_view(&r.image, t, m, ext)?;
        if metrics.is_none() {
            log::warn!("evaluation view {v} has an empty mask; skipped");
        }
        per_view.push(metrics);
    }
    let valid: Vec<&ViewInpaintMetrics> = per_view.iter().flatten().collect();
    let n = valid.len().max(1) as f64;
    Ok(InpaintMetrics {
        mean_perceptual: valid.iter().map(|m| m.perceptual).sum::<f64>() / n,
        mean_mse: valid.iter().map(|m| m.mse).sum::<f64>() / n,
        mean_masked_mae: valid.iter().map(|m| m.masked_mae).sum::<f64>() / n,
        per_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::default_extractor;

    fn rect_mask(w: usize, h: usize, x: std::ops::Range<usize>, y: std::ops::Range<usize>) -> Mask {
        Mask::from_fn(w, h, |i, j| x.contains(&i) && y.contains(&j))
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(20, 16, [0.3, 0.6, 0.9]);
        let m = rect_mask(20, 16, 4..12, 3..9);
        let out = Enforced(harmonic_provider()).inpaint_rgb(0, &img, &m).unwrap();
        for p in &out.data {
            assert!((p[0] - 0.3).abs() < 1e-9 && (p[2] - 0.9).abs() < 1e-9);
        }
    }

    #[test]
    fn ramp_is_reproduced() {
        let img = Image::from_fn(32, 24, |x, _| [x as f64 / 31.0; 3]);
        let m = rect_mask(32, 24, 8..24, 6..18);
        let out = harmonic_provider().inpaint_rgb(0, &img, &m).unwrap();
        for (p, q) in out.data.iter().zip(&img.data) {
            assert!((p[0] - q[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn mask_reaching_borders_uses_remaining_boundary() {
        let d = ScalarMap::from_fn(16, 16, |_, y| 2.0 + y as f64);
        let m = rect_mask(16, 16, 0..16, 4..10);
        let out = Enforced(harmonic_provider()).inpaint_depth(0, &d, &m).unwrap();
        assert!((out.get(5, 7) - 9.0).abs() < 1e-3);
    }

    #[test]
    fn fully_masked_image_is_an_error() {
        let img = Image::filled(8, 8, [0.5; 3]);
        assert!(harmonic_provider()
            .inpaint_rgb(0, &img, &Mask::full(8, 8))
            .is_err());
    }

    struct Scribble;
    impl InpaintProvider for Scribble {
        fn id(&self) -> &str {
            "scribble"
        }
        fn inpaint_rgb(&self, _: usize, image: &Image, _: &Mask) -> Result<Image> {
            Ok(Image::filled(image.width, image.height, [1.0, 0.0, 1.0]))
        }
        fn inpaint_depth(&self, _: usize, depth: &ScalarMap, _: &Mask) -> Result<ScalarMap> {
            Ok(ScalarMap {
                data: vec![f64::NAN; depth.data.len()],
                ..depth.clone()
            })
        }
    }

    #[test]
    fn wrapper_restores_unmasked_pixels() {
        let img = Image::from_fn(10, 10, |x, y| [x as f64 / 10.0, y as f64 / 10.0, 0.2]);
        let m = rect_mask(10, 10, 2..5, 2..5);
        let out = Enforced(Scribble).inpaint_rgb(0, &img, &m).unwrap();
        for i in 0..100 {
            if m.data[i] {
                assert_eq!(out.data[i], [1.0, 0.0, 1.0]);
            } else {
                assert_eq!(out.data[i], img.data[i]);
            }
        }
    }

    #[test]
    fn wrapper_rejects_non_finite_fill() {
        let d = ScalarMap::new(6, 6);
        let m = rect_mask(6, 6, 1..3, 1..3);
        assert!(matches!(
            Enforced(Scribble).inpaint_depth(0, &d, &m),
            Err(Error::NonFinite { .. })
        ));
        assert!(Enforced(Scribble).inpaint_depth(0, &d, &Mask::new(6, 6)).is_ok());
    }

    #[test]
    fn bbox_grows_ten_percent_per_side() {
        let b = expand_bbox((200, 200, 299, 299), 1000, 1000, 0.1);
        assert_eq!(b, (190, 190, 309, 309));
        assert_eq!(b.2 - b.0 + 1, 120);
        assert_eq!(expand_bbox((0, 0, 9, 9), 12, 12, 0.1), (0, 0, 10, 10));
    }

    #[test]
    fn identical_render_scores_zero() {
        let img = Image::from_fn(24, 24, |x, y| [(x * y) as f64 / 576.0, 0.4, 0.1]);
        let m = rect_mask(24, 24, 6..14, 8..16);
        let r = compare_view(&img, &img, &m, &default_extractor()).unwrap().unwrap();
        assert_eq!((r.perceptual, r.mse, r.masked_mae), (0.0, 0.0, 0.0));
        assert!(compare_view(&img, &img, &Mask::new(24, 24), &default_extractor())
            .unwrap()
            .is_none());
    }
}
