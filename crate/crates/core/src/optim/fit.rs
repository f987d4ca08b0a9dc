//! The training loop shared by reconstruction, semantic segmentation and
//! inpainted-field fitting.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{apply_update, AdamConfig, AdamState, Channels, GradBuffer, RadianceGrid};
use crate::imaging::{check_same_shape, Image, Mask, ScalarMap};
use crate::renderer::{ray_rng, splitmix64, SampleMode};
use crate::scene::Scene;

use super::loss::{evaluate_terms, lpips_term, LossWeights, PatchBatch, RayBatch, TermSpec};
use super::patches::{sample_patches, PatchSpec};
use super::perceptual::{default_extractor, PerceptualExtractor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Color reconstruction only.
    Reconstruct,
    /// Reconstruction plus objectness classification against the masks.
    Segment,
    /// Reconstruction on unmasked rays, perceptual patches against the RGB
    /// priors and depth against the depth priors.
    Inpaint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode: FitMode,
    pub weights: LossWeights,
    pub patch: PatchSpec,
    pub patch_sample_mode: SampleMode,
    /// Check every iteration that the perceptual gradient stays in color.
    pub audit_channels: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: FitMode::Reconstruct,
            weights: LossWeights::default(),
            patch: PatchSpec::default(),
            patch_sample_mode: SampleMode::Stratified,
            audit_channels: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub n_samples: usize,
    pub sample_mode: SampleMode,
    pub adam: AdamConfig,
    /// Learning-rate multiplier reached at the last iteration (exponential decay).
    pub lr_final_factor: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 2000,
            rays_per_batch: 2048,
            n_samples: 192,
            sample_mode: SampleMode::Stratified,
            adam: AdamConfig::default(),
            lr_final_factor: 1.0,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.n_samples == 0 {
            return Err(Error::Config("rays_per_batch and n_samples must be >= 1".into()));
        }
        if !(self.lr_final_factor > 0.0 && self.lr_final_factor.is_finite()) {
            return Err(Error::Config("lr_final_factor must be > 0".into()));
        }
        Ok(())
    }

    fn adam_at(&self, iteration: usize) -> AdamConfig {
        if self.lr_final_factor == 1.0 || self.iterations < 2 {
            return self.adam;
        }
        let f = self
            .lr_final_factor
            .powf(iteration as f64 / (self.iterations - 1) as f64);
        AdamConfig {
            lr_density: self.adam.lr_density * f,
            lr_color: self.adam.lr_color * f,
            lr_logit: self.adam.lr_logit * f,
            ..self.adam
        }
    }
}

/// Supervision for one fit. Reconstruction always targets the scene images.
#[derive(Clone, Copy)]
pub struct FitData<'a> {
    pub scene: &'a Scene,
    pub masks: Option<&'a [Mask]>,
    /// Targets for perceptual patches (inpainted images).
    pub rgb_priors: Option<&'a [Image]>,
    pub depth_priors: Option<&'a [ScalarMap]>,
    pub extractor: Option<&'a dyn PerceptualExtractor>,
}

impl<'a> FitData<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        FitData {
            scene,
            masks: None,
            rgb_priors: None,
            depth_priors: None,
            extractor: None,
        }
    }

    fn validate(&self, config: &LossConfig) -> Result<()> {
        let n = self.scene.view_count();
        let reference = &self.scene.images[0];
        let count = |what: &str, len: usize| {
            if len != n {
                Err(Error::Shape(format!("{len} {what} for {n} views")))
            } else {
                Ok(())
            }
        };
        if let Some(m) = self.masks {
            count("masks", m.len())?;
            for x in m {
                check_same_shape(x, reference, "mask")?;
            }
        }
        if let Some(p) = self.rgb_priors {
            count("rgb priors", p.len())?;
            for x in p {
                check_same_shape(x, reference, "rgb prior")?;
            }
        }
        if let Some(p) = self.depth_priors {
            count("depth priors", p.len())?;
            for x in p {
                check_same_shape(x, reference, "depth prior")?;
            }
        }
        match config.mode {
            FitMode::Segment if self.masks.is_none() => {
                Err(Error::Config("segment mode needs masks".into()))
            }
            FitMode::Inpaint if self.masks.is_none() => {
                Err(Error::Config("inpaint mode needs masks".into()))
            }
            FitMode::Inpaint if config.weights.lambda_lpips > 0.0 && self.rgb_priors.is_none() => {
                Err(Error::Config("perceptual loss needs rgb priors".into()))
            }
            FitMode::Inpaint if config.weights.lambda_depth > 0.0 && self.depth_priors.is_none() => {
                Err(Error::Config("depth loss needs depth priors".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Cooperative cancellation and progress, shareable across threads.
#[derive(Debug, Clone, Default)]
pub struct FitControl {
    cancel: Arc<AtomicBool>,
    done: Arc<AtomicUsize>,
    total: Arc<AtomicUsize>,
    checkpoint: Arc<Mutex<Option<RadianceGrid>>>,
}

impl FitControl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Fraction of iterations completed in the current fit.
    pub fn progress(&self) -> f64 {
        let total = self.total.load(Ordering::Relaxed);
        if total == 0 {
            return 0.0;
        }
        self.done.load(Ordering::Relaxed) as f64 / total as f64
    }

    /// Grid state saved when a fit was cancelled.
    pub fn checkpoint(&self) -> Option<RadianceGrid> {
        self.checkpoint.lock().ok().and_then(|g| g.clone())
    }

    fn set(&self, done: usize, total: usize) {
        self.total.store(total, Ordering::Relaxed);
        self.done.store(done, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub rec: f64,
    pub clf: f64,
    pub lpips: f64,
    pub depth: f64,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub log: Vec<IterationLog>,
    pub iterations: usize,
    pub wall_ms: f64,
    pub checksum: String,
}

impl FitReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,rec,clf,lpips,depth,total,wall_ms\n");
        for l in &self.log {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                l.iteration, l.rec, l.clf, l.lpips, l.depth, l.total, l.wall_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|l| l.total)
    }
}

fn updated_channels(mode: FitMode) -> Channels {
    match mode {
        FitMode::Segment => Channels::ALL,
        FitMode::Reconstruct | FitMode::Inpaint => Channels {
            density: true,
            color: true,
            logit: false,
        },
    }
}

/// Runs `schedule.iterations` Adam steps on `grid`.
///
/// On a non-finite loss or gradient the grid is left at its last good state
/// and the error is returned; cancellation is checked between iterations.
pub fn fit(
    grid: &mut RadianceGrid,
    data: &FitData<'_>,
    config: &LossConfig,
    schedule: &Schedule,
    control: Option<&FitControl>,
) -> Result<FitReport> {
    data.scene.validate()?;
    config.weights.validate()?;
    config.patch.validate()?;
    schedule.validate()?;
    data.validate(config)?;
    let default_ext = default_extractor();
    let ext: &dyn PerceptualExtractor = data.extractor.unwrap_or(&default_ext);
    let scene = data.scene;
    let (w, h) = (scene.width(), scene.height());
    let per_view = w * h;
    let total_pixels = per_view * scene.view_count();
    let weights = config.weights;
    let spec = match config.mode {
        FitMode::Reconstruct => TermSpec {
            rec: Some((1.0, false)),
            ..Default::default()
        },
        FitMode::Segment => TermSpec {
            rec: Some((1.0, false)),
            clf: Some(weights.lambda_clf),
            ..Default::default()
        },
        FitMode::Inpaint => TermSpec {
            rec: Some((1.0, true)),
            depth: (weights.lambda_depth > 0.0).then_some(weights.lambda_depth),
            ..Default::default()
        },
    };
    let use_patches = config.mode == FitMode::Inpaint && weights.lambda_lpips > 0.0;
    let depth_priors = if spec.depth.is_some() {
        data.depth_priors
    } else {
        None
    };
    let channels = updated_channels(config.mode);

    let start = Instant::now();
    let mut buf = GradBuffer::for_grid(grid);
    let mut audit = (use_patches && config.audit_channels).then(|| GradBuffer::for_grid(grid));
    let mut state = AdamState::for_grid(grid);
    let mut log = Vec::with_capacity(schedule.iterations);
    for it in 0..schedule.iterations {
        if let Some(c) = control {
            if c.is_cancelled() {
                if let Ok(mut slot) = c.checkpoint.lock() {
                    *slot = Some(grid.clone());
                }
                return Err(Error::Cancelled);
            }
            c.set(it, schedule.iterations);
        }
        let it_seed = splitmix64(schedule.seed.wrapping_add(it as u64));
        let mut rng = ray_rng(it_seed, u64::MAX);
        let pixels: Vec<(usize, usize, usize)> = (0..schedule.rays_per_batch)
            .map(|_| {
                let k = rng.gen_range(0..total_pixels);
                let (view, p) = (k / per_view, k % per_view);
                (view, p % w, p / w)
            })
            .collect();
        let batch = RayBatch::from_pixels(
            scene,
            &pixels,
            None,
            data.masks,
            depth_priors,
            schedule.n_samples,
            schedule.sample_mode,
            it_seed,
        )?;
        buf.zero();
        let terms = evaluate_terms(grid, &batch, &spec, Some(&mut buf))?;
        let mut lpips = 0.0;
        if use_patches {
            let masks = data.masks.expect("validated");
            let rects = sample_patches(w, h, masks, &config.patch, &mut rng)?;
            let patches = PatchBatch::build(
                scene,
                &rects,
                data.rgb_priors.expect("validated"),
                schedule.n_samples,
                config.patch_sample_mode,
                it_seed ^ 0x5eed,
            )?;
            match audit.as_mut() {
                Some(a) => {
                    a.zero();
                    lpips = lpips_term(grid, &patches, ext, weights.lambda_lpips, Some(a))?;
                    if !a.confined_to(Channels::COLOR) {
                        return Err(Error::domain(format!(
                            "perceptual gradient escaped the color channel at iteration {it}"
                        )));
                    }
                    buf.add_scaled(a, 1.0)?;
                }
                None => {
                    lpips = lpips_term(grid, &patches, ext, weights.lambda_lpips, Some(&mut buf))?;
                }
            }
        }
        let total = terms.rec.value
            + weights.lambda_clf * terms.clf.value
            + weights.lambda_lpips * lpips
            + weights.lambda_depth * terms.depth.value;
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: total,
            });
        }
        apply_update(grid, &buf, &mut state, &schedule.adam_at(it), channels)?;
        log.push(IterationLog {
            iteration: it,
            rec: terms.rec.value,
            clf: terms.clf.value,
            lpips,
            depth: terms.depth.value,
            total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    if let Some(c) = control {
        c.set(schedule.iterations, schedule.iterations);
    }
    Ok(FitReport {
        iterations: log.len(),
        log,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        checksum: grid.checksum(),
    })
}
