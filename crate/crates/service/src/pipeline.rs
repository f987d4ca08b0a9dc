//! Job kinds, their configuration and the code that runs each one against a
//! stored scene. Artifacts land under `scenes/{id}/stages/`.

use std::fs;
use std::path::{Path, PathBuf};

use mvinpaint::dataset::load_scene;
use mvinpaint::inpaint::{
    directory_provider, evaluate_inpainting, harmonic_provider, inpaint_scene, render_depths,
    InpaintInputs, InpaintOptions, InpaintProvider,
};
use mvinpaint::optim::{default_extractor, FitControl, LossWeights};
use mvinpaint::refine::{refine_views, RefineConfig};
use mvinpaint::renderer::render_view;
use mvinpaint::segmentation::{
    dilate, evaluate_masks, fit_geometry, grid_schedule, segment, AnnotationSet, Dilation,
    FileMasksProvider, GridConfig, InitProvider, MaskSet, ProjectOnlyProvider, Provenance,
    RegionGrowProvider, SegmentConfig,
};
use mvinpaint::{Mask, Pose, RadianceGrid, Scene};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::store::{io, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Segment,
    Refine,
    Inpaint,
    Evaluate,
    Render,
}

impl JobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JobKind::Segment => "segment",
            JobKind::Refine => "refine",
            JobKind::Inpaint => "inpaint",
            JobKind::Evaluate => "evaluate",
            JobKind::Render => "render",
        }
    }
}

/// Where a job takes object masks from.
///
/// `auto` prefers the segmentation output and falls back to the scene's
/// `mask_dir`; `dir:PATH` reads `{stem}.png` from a directory.
fn default_mask_source() -> String {
    "auto".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentJobConfig {
    pub stages: usize,
    pub grid_resolution: usize,
    pub geometry_iterations: usize,
    pub iterations: usize,
    pub lambda_clf: f64,
    pub threshold: f64,
    pub seed: u64,
    /// `region_grow`, `project`, or `dir:PATH` for externally made masks.
    pub init: String,
    /// Mask PNG for the source view, used by `project`.
    pub source_mask: Option<String>,
    pub source_view: Option<usize>,
}

impl Default for SegmentJobConfig {
    fn default() -> Self {
        let c = SegmentConfig::default();
        SegmentJobConfig {
            stages: c.stages,
            grid_resolution: c.grid.resolution[0],
            geometry_iterations: c.geometry_schedule.iterations,
            iterations: c.schedule.iterations,
            lambda_clf: c.lambda_clf,
            threshold: c.threshold,
            seed: 0,
            init: "region_grow".into(),
            source_mask: None,
            source_view: None,
        }
    }
}

impl SegmentJobConfig {
    pub fn to_core(&self) -> SegmentConfig {
        SegmentConfig {
            grid: GridConfig {
                resolution: [self.grid_resolution; 3],
                ..GridConfig::default()
            },
            geometry_schedule: grid_schedule(self.geometry_iterations, self.seed),
            schedule: grid_schedule(self.iterations, self.seed.wrapping_add(1)),
            lambda_clf: self.lambda_clf,
            stages: self.stages,
            threshold: self.threshold,
            ..SegmentConfig::default()
        }
    }

    pub fn validate(&self) -> ServiceResult<()> {
        self.to_core().validate()?;
        match self.init.as_str() {
            "region_grow" => {}
            "project" if self.source_mask.is_some() => {}
            "project" => return invalid("init=project needs source_mask"),
            s if s.starts_with("dir:") => {}
            s => return invalid(format!("unknown init provider {s:?}")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineJobConfig {
    pub dilate_kernel: usize,
    pub dilate_iters: usize,
    /// Leave depth maps as they were; only colors and masks change.
    pub rgb_only: bool,
    pub n_samples: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_sweeps: usize,
    pub grid_resolution: usize,
    pub original_iterations: usize,
    pub seed: u64,
    #[serde(default = "default_mask_source")]
    pub masks: String,
}

impl Default for RefineJobConfig {
    fn default() -> Self {
        let o = InpaintOptions::default();
        let r = RefineConfig::default();
        RefineJobConfig {
            dilate_kernel: o.dilation.kernel,
            dilate_iters: o.dilation.iterations,
            rgb_only: true,
            n_samples: r.n_samples,
            rel_tol: r.rel_tol,
            abs_tol: r.abs_tol,
            max_sweeps: r.max_sweeps,
            grid_resolution: o.grid.resolution[0],
            original_iterations: o.original_schedule.iterations,
            seed: 0,
            masks: default_mask_source(),
        }
    }
}

impl RefineJobConfig {
    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            n_samples: self.n_samples,
            seed: self.seed,
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_sweeps: self.max_sweeps,
            refine_depths: !self.rgb_only,
            ..RefineConfig::default()
        }
    }

    pub fn validate(&self) -> ServiceResult<()> {
        self.refine_config().validate()?;
        check_dilation(self.dilate_kernel)?;
        check_resolution(self.grid_resolution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintJobConfig {
    /// `harmonic` or `dir:PATH`.
    pub provider: String,
    pub dilate_kernel: usize,
    pub dilate_iters: usize,
    pub lambda_lpips: f64,
    pub lambda_depth: f64,
    pub depth_prior: bool,
    pub refine: bool,
    pub rgb_only: bool,
    pub grid_resolution: usize,
    pub original_iterations: usize,
    pub iterations: usize,
    pub patch_factor: usize,
    pub seed: u64,
    #[serde(default = "default_mask_source")]
    pub masks: String,
}

impl Default for InpaintJobConfig {
    fn default() -> Self {
        let o = InpaintOptions::default();
        InpaintJobConfig {
            provider: "harmonic".into(),
            dilate_kernel: o.dilation.kernel,
            dilate_iters: o.dilation.iterations,
            lambda_lpips: o.weights.lambda_lpips,
            lambda_depth: o.weights.lambda_depth,
            depth_prior: o.depth_priors,
            refine: o.refine,
            rgb_only: !o.refine_config.refine_depths,
            grid_resolution: o.grid.resolution[0],
            original_iterations: o.original_schedule.iterations,
            iterations: o.schedule.iterations,
            patch_factor: o.patch.downscale_factor,
            seed: 0,
            masks: default_mask_source(),
        }
    }
}

impl InpaintJobConfig {
    pub fn to_core(&self) -> InpaintOptions {
        let d = InpaintOptions::default();
        let mut o = InpaintOptions {
            dilation: Dilation {
                kernel: self.dilate_kernel,
                iterations: self.dilate_iters,
            },
            grid: GridConfig {
                resolution: [self.grid_resolution; 3],
                ..d.grid
            },
            original_schedule: grid_schedule(self.original_iterations, self.seed),
            schedule: grid_schedule(self.iterations, self.seed.wrapping_add(2)),
            weights: LossWeights {
                lambda_lpips: self.lambda_lpips,
                lambda_depth: self.lambda_depth,
                ..d.weights
            },
            refine: self.refine,
            depth_priors: self.depth_prior,
            ..d
        };
        o.patch.downscale_factor = self.patch_factor;
        o.refine_config.refine_depths = !self.rgb_only;
        o.refine_config.seed = self.seed;
        o
    }

    pub fn validate(&self) -> ServiceResult<()> {
        self.to_core().validate()?;
        check_dilation(self.dilate_kernel)?;
        check_resolution(self.grid_resolution)?;
        if self.provider != "harmonic" && !self.provider.starts_with("dir:") {
            return invalid(format!("unknown provider {:?}", self.provider));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateJobConfig {
    /// Scene directory of object-free test views with their own
    /// `transforms.json`.
    pub truth: Option<String>,
    /// Evaluation masks inside `truth`, one PNG per test view.
    pub truth_masks: String,
    /// Ground-truth object masks for the training views, for segmentation
    /// accuracy and IoU.
    pub gt_masks: Option<String>,
    pub render_samples: usize,
}

impl Default for EvaluateJobConfig {
    fn default() -> Self {
        EvaluateJobConfig {
            truth: None,
            truth_masks: "masks".into(),
            gt_masks: None,
            render_samples: 48,
        }
    }
}

impl EvaluateJobConfig {
    pub fn validate(&self) -> ServiceResult<()> {
        if self.truth.is_none() && self.gt_masks.is_none() {
            return invalid("evaluate needs truth and/or gt_masks");
        }
        if self.render_samples == 0 {
            return invalid("render_samples must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridChoice {
    Inpainted,
    Original,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderJobConfig {
    /// Row-major camera-to-world matrices; empty renders the training poses.
    pub poses: Vec<Vec<f64>>,
    pub grid: GridChoice,
    pub render_samples: usize,
}

impl Default for RenderJobConfig {
    fn default() -> Self {
        RenderJobConfig {
            poses: Vec::new(),
            grid: GridChoice::Inpainted,
            render_samples: 48,
        }
    }
}

impl RenderJobConfig {
    pub fn validate(&self) -> ServiceResult<()> {
        for (k, p) in self.poses.iter().enumerate() {
            Pose::from_row_major(p).map_err(|e| ServiceError::Validation(format!("poses[{k}]: {e}")))?;
        }
        if self.render_samples == 0 {
            return invalid("render_samples must be >= 1");
        }
        Ok(())
    }
}

/// A validated job request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum JobSpec {
    Segment(SegmentJobConfig),
    Refine(RefineJobConfig),
    Inpaint(InpaintJobConfig),
    Evaluate(EvaluateJobConfig),
    Render(RenderJobConfig),
}

fn parse<T: DeserializeOwned + Default>(config: serde_json::Value) -> ServiceResult<T> {
    if config.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(config).map_err(|e| ServiceError::Validation(format!("config: {e}")))
}

impl JobSpec {
    /// Parses and validates `config` for `kind`; `null` means all defaults.
    pub fn from_request(kind: JobKind, config: serde_json::Value) -> ServiceResult<Self> {
        let spec = match kind {
            JobKind::Segment => JobSpec::Segment(parse(config)?),
            JobKind::Refine => JobSpec::Refine(parse(config)?),
            JobKind::Inpaint => JobSpec::Inpaint(parse(config)?),
            JobKind::Evaluate => JobSpec::Evaluate(parse(config)?),
            JobKind::Render => JobSpec::Render(parse(config)?),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> JobKind {
        match self {
            JobSpec::Segment(_) => JobKind::Segment,
            JobSpec::Refine(_) => JobKind::Refine,
            JobSpec::Inpaint(_) => JobKind::Inpaint,
            JobSpec::Evaluate(_) => JobKind::Evaluate,
            JobSpec::Render(_) => JobKind::Render,
        }
    }

    pub fn validate(&self) -> ServiceResult<()> {
        match self {
            JobSpec::Segment(c) => c.validate(),
            JobSpec::Refine(c) => c.validate(),
            JobSpec::Inpaint(c) => c.validate(),
            JobSpec::Evaluate(c) => c.validate(),
            JobSpec::Render(c) => c.validate(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            JobSpec::Segment(c) => c.seed,
            JobSpec::Refine(c) => c.seed,
            JobSpec::Inpaint(c) => c.seed,
            JobSpec::Evaluate(_) | JobSpec::Render(_) => 0,
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(mut m)) => m.remove("config").unwrap_or_default(),
            _ => serde_json::Value::Null,
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> ServiceResult<T> {
    Err(ServiceError::Validation(msg.into()))
}

fn check_dilation(kernel: usize) -> ServiceResult<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return invalid(format!("dilate_kernel must be odd, got {kernel}"));
    }
    Ok(())
}

fn check_resolution(r: usize) -> ServiceResult<()> {
    if r < 2 {
        return invalid(format!("grid_resolution must be >= 2, got {r}"));
    }
    Ok(())
}

/// Progress reporting and cancellation for a running job.
pub trait JobHooks: Sync {
    fn control(&self) -> &FitControl;
    /// Called when the job enters its `index`-th of `total` steps.
    fn step(&self, name: &str, index: usize, total: usize);
}

/// Hooks that only carry a control; used by the CLI.
pub struct PlainHooks(pub FitControl);

impl JobHooks for PlainHooks {
    fn control(&self) -> &FitControl {
        &self.0
    }

    fn step(&self, name: &str, index: usize, total: usize) {
        log::info!("step {}/{}: {name}", index + 1, total);
    }
}

/// Runs `spec` on scene `id`, returning artifact paths relative to the scene
/// directory. On cancellation the grid being fitted, if any, is kept as
/// `stages/checkpoint.spgr`.
pub fn run_job(store: &Store, id: &str, spec: &JobSpec, hooks: &dyn JobHooks) -> ServiceResult<Vec<String>> {
    let stages = store.stage_dir(id);
    fs::create_dir_all(&stages).map_err(|e| io(&stages, e))?;
    let result = match spec {
        JobSpec::Segment(c) => run_segment(store, id, c, hooks),
        JobSpec::Refine(c) => run_refine(store, id, c, hooks),
        JobSpec::Inpaint(c) => run_inpaint(store, id, c, hooks),
        JobSpec::Evaluate(c) => run_evaluate(store, id, c, hooks),
        JobSpec::Render(c) => run_render(store, id, c, hooks),
    };
    if let Err(ServiceError::Core(mvinpaint::Error::Cancelled)) = &result {
        if let Some(grid) = hooks.control().checkpoint() {
            let path = stages.join("checkpoint.spgr");
            grid.save(&path)?;
            log::warn!("job cancelled, checkpoint kept at {}", path.display());
        }
    }
    result.map(|paths| {
        let root = store.scene_dir(id);
        paths
            .into_iter()
            .map(|p| p.strip_prefix(&root).unwrap_or(&p).to_string_lossy().into_owned())
            .collect()
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> ServiceResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io(path, e))
}

fn load_masks_dir(dir: &Path, stems: &[String]) -> ServiceResult<Vec<Mask>> {
    Ok(MaskSet::load_dir(dir, stems, Provenance::File)?.masks)
}

fn resolve_path(store: &Store, id: &str, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        store.scene_dir(id).join(path)
    }
}

/// Object masks for refinement and inpainting.
fn object_masks(store: &Store, id: &str, source: &str, scene: &Scene) -> ServiceResult<Vec<Mask>> {
    let stems = scene.stems();
    let segmented = store.stage_dir(id).join("masks");
    let masks = match source {
        "auto" if segmented.is_dir() => load_masks_dir(&segmented, &stems)?,
        "auto" | "scene" => {
            let m = store.manifest(id)?;
            match m.mask_dir {
                Some(dir) => load_masks_dir(&store.scene_dir(id).join(dir), &stems)?,
                None => return invalid("no object masks: run a segment job or ingest a mask_dir"),
            }
        }
        "segment" => load_masks_dir(&segmented, &stems)?,
        s => match s.strip_prefix("dir:") {
            Some(dir) => load_masks_dir(&resolve_path(store, id, dir), &stems)?,
            None => return invalid(format!("unknown mask source {s:?}")),
        },
    };
    MaskSet::new(masks.clone(), Provenance::File).validate(scene)?;
    Ok(masks)
}

fn original_grid_path(store: &Store, id: &str, resolution: usize) -> PathBuf {
    store.stage_dir(id).join(format!("original_grid_{resolution}.spgr"))
}

/// Field fit to the scene as captured, loaded if a job already produced one
/// at this resolution.
fn original_grid(
    store: &Store,
    id: &str,
    scene: &Scene,
    grid: &GridConfig,
    iterations: usize,
    seed: u64,
    control: &FitControl,
) -> ServiceResult<(RadianceGrid, PathBuf)> {
    let path = original_grid_path(store, id, grid.resolution[0]);
    if path.is_file() {
        let g = RadianceGrid::load(&path)?;
        if g.resolution() == grid.resolution {
            return Ok((g, path));
        }
    }
    let (g, report) = fit_geometry(scene, grid, &grid_schedule(iterations, seed), Some(control))?;
    g.save(&path)?;
    report.write_csv(&path.with_extension("csv"))?;
    Ok((g, path))
}

fn run_segment(store: &Store, id: &str, c: &SegmentJobConfig, hooks: &dyn JobHooks) -> ServiceResult<Vec<PathBuf>> {
    hooks.step("load", 0, 3);
    let loaded = store.load(id)?;
    let scene = &loaded.scene;
    let stems = scene.stems();
    let stored = store.annotations(id).ok();
    let provider: Box<dyn InitProvider> = match c.init.as_str() {
        "region_grow" => Box::<RegionGrowProvider>::default(),
        "project" => {
            let path = resolve_path(store, id, c.source_mask.as_deref().unwrap_or_default());
            if !path.is_file() {
                return Err(mvinpaint::Error::MissingFiles(vec![path.display().to_string()]).into());
            }
            Box::new(ProjectOnlyProvider {
                source_mask: Some(Mask::load_png(&path)?),
                ..Default::default()
            })
        }
        s => {
            let dir = s.strip_prefix("dir:").unwrap_or(s);
            Box::new(FileMasksProvider {
                masks: load_masks_dir(&resolve_path(store, id, dir), &stems)?,
            })
        }
    };
    let annotations = match (&stored, c.init.as_str()) {
        (Some(a), _) if c.source_view.is_none_or(|v| v == a.source_view) => Some(a.clone()),
        (_, "project") => {
            let v = c.source_view.or(stored.as_ref().map(|a| a.source_view)).unwrap_or(0);
            Some(AnnotationSet {
                source_view: v,
                positive: vec![[0.5, 0.5]],
                negative: Vec::new(),
            })
        }
        (_, "region_grow") => {
            return invalid("region_grow needs annotations: PUT /scenes/{id}/annotations first")
        }
        _ => None,
    };
    hooks.step("fit", 1, 3);
    let config = c.to_core();
    let out = segment(scene, annotations.as_ref(), provider.as_ref(), &config, Some(hooks.control()))?;
    hooks.step("write", 2, 3);
    let stages = store.stage_dir(id);
    let mut artifacts = Vec::new();
    let masks_dir = stages.join("masks");
    out.masks.save_dir(&masks_dir, &stems)?;
    artifacts.push(masks_dir);
    let seg_dir = stages.join("segment");
    out.initial.save_dir(&seg_dir.join("initial"), &stems)?;
    for (k, set) in out.stages.iter().enumerate() {
        set.save_dir(&seg_dir.join(format!("stage_{}", k + 1)), &stems)?;
    }
    for (k, r) in out.reports.iter().enumerate() {
        r.write_csv(&seg_dir.join(format!("fit_{k}.csv")))?;
    }
    artifacts.push(seg_dir.clone());
    let grid_path = stages.join("semantic_grid.spgr");
    out.grid.save(&grid_path)?;
    artifacts.push(grid_path);
    if let Some(g) = &out.geometry {
        let p = original_grid_path(store, id, c.grid_resolution);
        g.save(&p)?;
        artifacts.push(p);
    }
    let report = serde_json::json!({
        "provider": provider.id(),
        "initial_area": out.initial.total_area(),
        "stage_areas": out.stages.iter().map(|s| s.total_area()).collect::<Vec<_>>(),
        "fits": out.reports.iter().map(|r| serde_json::json!({
            "iterations": r.iterations, "wall_ms": r.wall_ms,
            "final_loss": r.final_loss(), "checksum": r.checksum,
        })).collect::<Vec<_>>(),
    });
    let report_path = stages.join("segment_report.json");
    write_json(&report_path, &report)?;
    artifacts.push(report_path);
    Ok(artifacts)
}

fn run_refine(store: &Store, id: &str, c: &RefineJobConfig, hooks: &dyn JobHooks) -> ServiceResult<Vec<PathBuf>> {
    hooks.step("load", 0, 3);
    let loaded = store.load(id)?;
    let scene = &loaded.scene;
    let stems = scene.stems();
    let masks = object_masks(store, id, &c.masks, scene)?;
    let dilated: Vec<Mask> = masks.iter().map(|m| dilate(m, c.dilate_kernel, c.dilate_iters)).collect();
    hooks.step("depth", 1, 3);
    let mut artifacts = Vec::new();
    let depths = match loaded.depths()? {
        Some(d) => d,
        None => {
            let grid = GridConfig {
                resolution: [c.grid_resolution; 3],
                ..GridConfig::default()
            };
            let (g, path) = original_grid(store, id, scene, &grid, c.original_iterations, c.seed, hooks.control())?;
            artifacts.push(path);
            let opts = InpaintOptions::default().render_options(scene);
            render_depths(&g, scene, &opts)?
        }
    };
    hooks.step("refine", 2, 3);
    let out = refine_views(scene, &depths, &dilated, &c.refine_config())?;
    let dir = store.stage_dir(id).join("refined");
    for sub in ["png", "masks", "depth"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    for (v, s) in stems.iter().enumerate() {
        out.images[v].save_png(&dir.join("png").join(format!("{s}.png")))?;
        out.masks[v].save_png(&dir.join("masks").join(format!("{s}.png")))?;
        out.depths[v].save_pfm(&dir.join("depth").join(format!("{s}.pfm")))?;
    }
    write_json(&dir.join("stats.json"), &out.stats)?;
    artifacts.push(dir);
    Ok(artifacts)
}

fn inpaint_provider(store: &Store, id: &str, spec: &str, stems: &[String]) -> ServiceResult<Box<dyn InpaintProvider>> {
    match spec.strip_prefix("dir:") {
        Some(dir) => Ok(Box::new(directory_provider(&resolve_path(store, id, dir), stems)?)),
        None => Ok(Box::new(harmonic_provider())),
    }
}

/// Checks that a `dir:` provider has every file before anything runs.
pub fn check_provider(store: &Store, id: &str, spec: &str) -> ServiceResult<()> {
    let stems = store.stems(id)?;
    inpaint_provider(store, id, spec, &stems).map(|_| ())
}

fn run_inpaint(store: &Store, id: &str, c: &InpaintJobConfig, hooks: &dyn JobHooks) -> ServiceResult<Vec<PathBuf>> {
    hooks.step("load", 0, 3);
    let loaded = store.load(id)?;
    let scene = &loaded.scene;
    let stems = scene.stems();
    let provider = inpaint_provider(store, id, &c.provider, &stems)?;
    let masks = object_masks(store, id, &c.masks, scene)?;
    let opts = c.to_core();
    hooks.step("original", 1, 3);
    let (original, original_path) =
        original_grid(store, id, scene, &opts.grid, c.original_iterations, c.seed, hooks.control())?;
    hooks.step("inpaint", 2, 3);
    let stages = store.stage_dir(id);
    let out = inpaint_scene(
        &InpaintInputs {
            scene,
            masks: &masks,
            provider: provider.as_ref(),
            original: Some(&original),
            extractor: None,
            stage_dir: Some(&stages),
        },
        &opts,
        Some(hooks.control()),
    )?;
    out.report.fit.write_csv(&stages.join("inpaint_fit.csv"))?;
    let mut artifacts = vec![original_path];
    for name in ["dilated_masks", "priors_rgb", "priors_depth", "inpainted_grid.spgr", "report.json", "inpaint_fit.csv"] {
        artifacts.push(stages.join(name));
    }
    if opts.refine {
        artifacts.push(stages.join("refined"));
    }
    Ok(artifacts)
}

/// Path of the stored grid for `choice`.
pub fn grid_path(store: &Store, id: &str, choice: GridChoice) -> ServiceResult<PathBuf> {
    let stages = store.stage_dir(id);
    let path = match choice {
        GridChoice::Inpainted => stages.join("inpainted_grid.spgr"),
        GridChoice::Semantic => stages.join("semantic_grid.spgr"),
        GridChoice::Original => {
            let mut found: Vec<(std::time::SystemTime, PathBuf)> = fs::read_dir(&stages)
                .map(|rd| {
                    rd.filter_map(|e| e.ok())
                        .map(|e| e.path())
                        .filter(|p| {
                            p.file_name()
                                .and_then(|n| n.to_str())
                                .is_some_and(|n| n.starts_with("original_grid_") && n.ends_with(".spgr"))
                        })
                        .filter_map(|p| Some((p.metadata().ok()?.modified().ok()?, p)))
                        .collect()
                })
                .unwrap_or_default();
            found.sort();
            match found.pop() {
                Some((_, p)) => p,
                None => stages.join("original_grid.spgr"),
            }
        }
    };
    if path.is_file() {
        Ok(path)
    } else {
        Err(ServiceError::NotFound(format!("{choice:?} grid for scene {id}").to_lowercase()))
    }
}

fn run_evaluate(store: &Store, id: &str, c: &EvaluateJobConfig, hooks: &dyn JobHooks) -> ServiceResult<Vec<PathBuf>> {
    hooks.step("evaluate", 0, 1);
    let stages = store.stage_dir(id);
    let mut artifacts = Vec::new();
    let mut report = serde_json::Map::new();
    if let Some(gt) = &c.gt_masks {
        let scene = store.load(id)?.scene;
        let stems = scene.stems();
        let truth = load_masks_dir(&resolve_path(store, id, gt), &stems)?;
        let pred = load_masks_dir(&stages.join("masks"), &stems)?;
        let m = evaluate_masks(&pred, &truth)?;
        report.insert("segmentation".into(), serde_json::to_value(&m)?);
    }
    if let Some(truth_dir) = &c.truth {
        let grid = RadianceGrid::load(&grid_path(store, id, GridChoice::Inpainted)?)?;
        let truth = load_scene(&resolve_path(store, id, truth_dir))?;
        let stems = truth.scene.stems();
        let masks = load_masks_dir(&truth.root.join(&c.truth_masks), &stems)?;
        let scene = store.load(id)?.scene;
        let opts = scene.render_options(c.render_samples, mvinpaint::SampleMode::Midpoint, 0);
        let ext = default_extractor();
        let m = evaluate_inpainting(
            &grid,
            &truth.scene.intrinsics,
            &truth.scene.poses,
            &truth.scene.images,
            &masks,
            &ext,
            &opts,
        )?;
        let csv = stages.join("eval.csv");
        fs::write(&csv, m.to_csv()).map_err(|e| io(&csv, e))?;
        artifacts.push(csv);
        report.insert("inpainting".into(), serde_json::to_value(&m)?);
    }
    let path = stages.join("eval.json");
    write_json(&path, &report)?;
    artifacts.push(path);
    Ok(artifacts)
}

/// Renders `pose` from the chosen grid; returns color PNG bytes.
pub fn render_png(store: &Store, id: &str, pose: &Pose, choice: GridChoice, samples: usize) -> ServiceResult<Vec<u8>> {
    let grid = RadianceGrid::load(&grid_path(store, id, choice)?)?;
    let m = store.manifest(id)?;
    let scene_opts = render_options_for(&m, samples)?;
    let intr = m.to_transforms().intrinsics()?;
    let r = render_view(&grid, &intr, pose, &scene_opts)?;
    Ok(r.image.encode_png()?)
}

fn render_options_for(m: &crate::manifest::SceneManifest, samples: usize) -> ServiceResult<mvinpaint::RenderOptions> {
    let scene = Scene {
        intrinsics: m.to_transforms().intrinsics()?,
        poses: Vec::new(),
        images: Vec::new(),
        names: Vec::new(),
        near: m.near,
        far: m.far,
        bounds: m.bounds,
    };
    Ok(scene.render_options(samples, mvinpaint::SampleMode::Midpoint, 0))
}

fn run_render(store: &Store, id: &str, c: &RenderJobConfig, hooks: &dyn JobHooks) -> ServiceResult<Vec<PathBuf>> {
    hooks.step("render", 0, 1);
    let m = store.manifest(id)?;
    let poses: Vec<Pose> = if c.poses.is_empty() {
        m.to_transforms().poses()?
    } else {
        c.poses.iter().map(|p| Pose::from_row_major(p)).collect::<Result<_, _>>()?
    };
    let grid = RadianceGrid::load(&grid_path(store, id, c.grid)?)?;
    let intr = m.to_transforms().intrinsics()?;
    let opts = render_options_for(&m, c.render_samples)?;
    let dir = store.stage_dir(id).join("renders");
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    for (k, pose) in poses.iter().enumerate() {
        if hooks.control().is_cancelled() {
            return Err(mvinpaint::Error::Cancelled.into());
        }
        let r = render_view(&grid, &intr, pose, &opts)?;
        r.image.save_png(&dir.join(format!("{k:03}.png")))?;
        r.depth.save_pfm(&dir.join(format!("{k:03}.pfm")))?;
    }
    Ok(vec![dir])
}
