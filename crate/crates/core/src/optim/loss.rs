//! Ray-batch and patch losses with gradients accumulated through the
//! renderer's detach policies.
//!
//! Gradients are added into the caller's [`GradBuffer`]; per-ray adjoints are
//! computed in parallel and scattered in batch order, so results do not
//! depend on thread scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{softplus, sigmoid, GradBuffer, RadianceGrid};
use crate::geometry::Ray;
use crate::imaging::{Image, Mask, ScalarMap};
use crate::renderer::{
    pixel_stream, ray_adjoint_with, ray_rng, render, sample_ray, scatter, Cotangent, DetachPolicy,
    RayGrad, RaySampleSet, RenderResult, SampleMode,
};
use crate::scene::Scene;

use super::patches::PatchRect;
use super::perceptual::{perceptual_distance_grad, PerceptualExtractor};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_clf: f64,
    pub lambda_lpips: f64,
    pub lambda_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_clf: 0.1,
            lambda_lpips: 0.01,
            lambda_depth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_clf", self.lambda_clf),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_depth", self.lambda_depth),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchRay {
    pub ray: Ray,
    pub samples: RaySampleSet,
    pub target_color: [f64; 3],
    pub target_depth: Option<f64>,
    /// Label for the classification loss; rays with it set are dropped from
    /// the reconstruction loss when `unmasked_only` is requested.
    pub masked: bool,
    pub view: usize,
    pub pixel: (usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<BatchRay>,
}

impl RayBatch {
    /// Builds rays for `(view, x, y)` pixels. Targets default to the scene
    /// images; masks and depths are optional per-view maps.
    #[allow(clippy::too_many_arguments)]
    pub fn from_pixels(
        scene: &Scene,
        pixels: &[(usize, usize, usize)],
        targets: Option<&[Image]>,
        masks: Option<&[Mask]>,
        depths: Option<&[ScalarMap]>,
        n_samples: usize,
        mode: SampleMode,
        seed: u64,
    ) -> Result<Self> {
        let targets = targets.unwrap_or(&scene.images);
        let rays = pixels
            .par_iter()
            .map(|&(view, x, y)| {
                let ray = scene.pixel_ray(view, x, y)?;
                let mut rng = ray_rng(seed, pixel_stream(view, x, y));
                Ok(BatchRay {
                    samples: sample_ray(&ray, n_samples, mode, &mut rng),
                    ray,
                    target_color: targets[view].get(x, y),
                    target_depth: depths.map(|d| d[view].get(x, y)),
                    masked: masks.map(|m| m[view].get(x, y)).unwrap_or(false),
                    view,
                    pixel: (x, y),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RayBatch { rays })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Rays that contributed.
    pub rays: usize,
}

static EMPTY_BATCH_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of loss evaluations that found no rays after filtering.
pub fn empty_batch_warnings() -> usize {
    EMPTY_BATCH_WARNINGS.load(Ordering::Relaxed)
}

fn warn_empty(what: &str) {
    EMPTY_BATCH_WARNINGS.fetch_add(1, Ordering::Relaxed);
    log::warn!("{what}: no rays left after filtering, loss defined as 0");
}

/// Binary cross-entropy of `sigmoid(s)` against `y` and its derivative in `s`.
///
/// Computed in logit form; a term above `-ln(BCE_EPS)` is capped there with
/// zero gradient, which is what clamping the probability would do.
pub fn bce_logit(s: f64, y: f64) -> (f64, f64) {
    let value = y * softplus(-s) + (1.0 - y) * softplus(s);
    let cap = -BCE_EPS.ln();
    if value > cap {
        (cap, 0.0)
    } else {
        (value, sigmoid(s) - y)
    }
}

/// Which ray terms to evaluate, with the weight applied to their gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermSpec {
    /// `(weight, unmasked_only)`.
    pub rec: Option<(f64, bool)>,
    pub clf: Option<f64>,
    pub depth: Option<f64>,
}

/// Unweighted term values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermValues {
    pub rec: LossValue,
    pub clf: LossValue,
    pub depth: LossValue,
}

impl Default for LossValue {
    fn default() -> Self {
        LossValue {
            value: 0.0,
            rays: 0,
        }
    }
}

struct Counts {
    rec: usize,
    clf: usize,
    depth: usize,
}

fn per_ray(
    r: &BatchRay,
    res: &RenderResult,
    spec: &TermSpec,
    counts: &Counts,
) -> ([f64; 3], Vec<(Cotangent, DetachPolicy)>) {
    let mut values = [0.0; 3];
    let mut terms = Vec::with_capacity(3);
    if let Some((w, unmasked_only)) = spec.rec {
        if !(unmasked_only && r.masked) {
            let d: Vec<f64> = (0..3).map(|c| res.color[c] - r.target_color[c]).collect();
            values[0] = d.iter().map(|v| v * v).sum();
            terms.push((
                Cotangent {
                    color: [2.0 * w * d[0], 2.0 * w * d[1], 2.0 * w * d[2]],
                    ..Default::default()
                },
                DetachPolicy::Rec,
            ));
        }
    }
    if let Some(w) = spec.clf {
        let (v, g) = bce_logit(res.logit, if r.masked { 1.0 } else { 0.0 });
        values[1] = v;
        terms.push((
            Cotangent {
                logit: w * g / counts.clf as f64,
                ..Default::default()
            },
            DetachPolicy::Clf,
        ));
    }
    if let (Some(w), Some(target)) = (spec.depth, r.target_depth) {
        let d = res.depth - target;
        values[2] = d * d;
        terms.push((
            Cotangent {
                depth: 2.0 * w * d / counts.depth as f64,
                ..Default::default()
            },
            DetachPolicy::Depth,
        ));
    }
    (values, terms)
}

/// Evaluates the requested ray terms and, when `grad` is given, adds their
/// weighted gradients into it.
pub fn evaluate_terms(
    grid: &RadianceGrid,
    batch: &RayBatch,
    spec: &TermSpec,
    grad: Option<&mut GradBuffer>,
) -> Result<TermValues> {
    if let Some(buf) = &grad {
        if !buf.matches(grid) {
            return Err(Error::Layout);
        }
    }
    if spec.depth.is_some() {
        if let Some(r) = batch
            .rays
            .iter()
            .find(|r| r.target_depth.is_some_and(|d| !d.is_finite()))
        {
            return Err(Error::NonFinite {
                what: "target depth".into(),
                location: format!("view {} pixel {:?}", r.view, r.pixel),
            });
        }
    }
    let counts = Counts {
        rec: match spec.rec {
            Some((_, true)) => batch.rays.iter().filter(|r| !r.masked).count(),
            Some((_, false)) => batch.len(),
            None => 0,
        },
        clf: batch.len(),
        depth: batch.rays.iter().filter(|r| r.target_depth.is_some()).count(),
    };
    let per: Vec<([f64; 3], Option<RayGrad>)> = match grad.is_some() {
        true => batch
            .rays
            .par_iter()
            .map(|r| {
                let (_, values, g) = ray_adjoint_with(grid, &r.ray, &r.samples, |res| {
                    per_ray(r, res, spec, &counts)
                })?;
                Ok((values, Some(g)))
            })
            .collect::<Result<_>>()?,
        false => batch
            .rays
            .par_iter()
            .map(|r| {
                let res = render(grid, &r.ray, &r.samples)?;
                Ok((per_ray(r, &res, spec, &counts).0, None))
            })
            .collect::<Result<_>>()?,
    };
    let mut sums = [0.0; 3];
    for (v, _) in &per {
        for k in 0..3 {
            sums[k] += v[k];
        }
    }
    if let Some(buf) = grad {
        for (_, g) in &per {
            if let Some(g) = g {
                scatter(grid, g, buf)?;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(TermValues {
        rec: LossValue {
            value: sums[0],
            rays: counts.rec,
        },
        clf: LossValue {
            value: mean(sums[1], counts.clf),
            rays: if spec.clf.is_some() { counts.clf } else { 0 },
        },
        depth: LossValue {
            value: mean(sums[2], counts.depth),
            rays: if spec.depth.is_some() { counts.depth } else { 0 },
        },
    })
}

/// Sum of squared color errors; with `unmasked_only`, masked rays are skipped.
pub fn loss_rec(
    grid: &RadianceGrid,
    batch: &RayBatch,
    unmasked_only: bool,
    grad: Option<&mut GradBuffer>,
) -> Result<LossValue> {
    let spec = TermSpec {
        rec: Some((1.0, unmasked_only)),
        ..Default::default()
    };
    let v = evaluate_terms(grid, batch, &spec, grad)?.rec;
    if v.rays == 0 {
        warn_empty("reconstruction loss");
    }
    Ok(v)
}

/// Mean binary cross-entropy of the rendered objectness against the masked flags.
pub fn loss_clf(
    grid: &RadianceGrid,
    batch: &RayBatch,
    grad: Option<&mut GradBuffer>,
) -> Result<LossValue> {
    let spec = TermSpec {
        clf: Some(1.0),
        ..Default::default()
    };
    let v = evaluate_terms(grid, batch, &spec, grad)?.clf;
    if v.rays == 0 {
        warn_empty("classification loss");
    }
    Ok(v)
}

/// `L_rec + lambda_clf * L_clf`.
pub fn loss_mv(
    grid: &RadianceGrid,
    batch: &RayBatch,
    lambda_clf: f64,
    grad: Option<&mut GradBuffer>,
) -> Result<f64> {
    let spec = TermSpec {
        rec: Some((1.0, false)),
        clf: Some(lambda_clf),
        ..Default::default()
    };
    let v = evaluate_terms(grid, batch, &spec, grad)?;
    Ok(v.rec.value + lambda_clf * v.clf.value)
}

/// Mean squared depth error over rays that carry a target depth.
pub fn loss_depth(
    grid: &RadianceGrid,
    batch: &RayBatch,
    grad: Option<&mut GradBuffer>,
) -> Result<LossValue> {
    let spec = TermSpec {
        depth: Some(1.0),
        ..Default::default()
    };
    let v = evaluate_terms(grid, batch, &spec, grad)?.depth;
    if v.rays == 0 {
        warn_empty("depth loss");
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct PatchRays {
    pub rect: PatchRect,
    /// One ray per patch sample, row-major.
    pub rays: Vec<(Ray, RaySampleSet)>,
    pub target: Image,
}

#[derive(Debug, Clone, Default)]
pub struct PatchBatch {
    pub patches: Vec<PatchRays>,
}

impl PatchBatch {
    pub fn build(
        scene: &Scene,
        rects: &[PatchRect],
        targets: &[Image],
        n_samples: usize,
        mode: SampleMode,
        seed: u64,
    ) -> Result<Self> {
        let patches = rects
            .iter()
            .map(|rect| {
                let pixels = rect.pixels();
                let rays = pixels
                    .par_iter()
                    .map(|&(x, y)| {
                        let ray = scene.pixel_ray(rect.view, x, y)?;
                        let mut rng = ray_rng(seed, pixel_stream(rect.view, x, y));
                        let s = sample_ray(&ray, n_samples, mode, &mut rng);
                        Ok((ray, s))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let target = Image::from_fn(rect.width, rect.height, |i, j| {
                    let (x, y) = pixels[j * rect.width + i];
                    targets[rect.view].get(x, y)
                });
                Ok(PatchRays {
                    rect: *rect,
                    rays,
                    target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchBatch { patches })
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Renders a patch's rays into an image.
pub fn render_patch(grid: &RadianceGrid, patch: &PatchRays) -> Result<Image> {
    let colors = patch
        .rays
        .par_iter()
        .map(|(ray, s)| render(grid, ray, s).map(|r| r.color))
        .collect::<Result<Vec<_>>>()?;
    Ok(Image {
        width: patch.rect.width,
        height: patch.rect.height,
        data: colors,
    })
}

/// Mean perceptual distance between rendered patches and their targets,
/// gradients scaled by `weight` and restricted to color.
pub fn lpips_term<E: PerceptualExtractor + ?Sized>(
    grid: &RadianceGrid,
    batch: &PatchBatch,
    ext: &E,
    weight: f64,
    grad: Option<&mut GradBuffer>,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let n = batch.patches.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<RayGrad> = Vec::new();
    let want_grad = grad.is_some();
    for patch in &batch.patches {
        let rendered = render_patch(grid, patch)?;
        let (d, g_img) = perceptual_distance_grad(ext, &rendered, &patch.target)?;
        total += d;
        if want_grad {
            let g = patch
                .rays
                .par_iter()
                .enumerate()
                .map(|(k, (ray, s))| {
                    let c = g_img.data[k];
                    let cot = Cotangent {
                        color: [c[0] * weight / n, c[1] * weight / n, c[2] * weight / n],
                        ..Default::default()
                    };
                    ray_adjoint_with(grid, ray, s, |_| ((), vec![(cot, DetachPolicy::Lpips)]))
                        .map(|(_, _, g)| g)
                })
                .collect::<Result<Vec<_>>>()?;
            grads.extend(g);
        }
    }
    if let Some(buf) = grad {
        for g in &grads {
            scatter(grid, g, buf)?;
        }
    }
    Ok(total / n)
}

pub fn loss_lpips<E: PerceptualExtractor + ?Sized>(
    grid: &RadianceGrid,
    batch: &PatchBatch,
    ext: &E,
    grad: Option<&mut GradBuffer>,
) -> Result<f64> {
    lpips_term(grid, batch, ext, 1.0, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        for y in [0.0, 1.0] {
            assert!((bce_logit(0.0, y).0 - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_confident_correct_logit() {
        let (v, _) = bce_logit(20.0, 1.0);
        assert!((v - 2.061_153_618_190_204e-9).abs() < 1e-15);
    }

    #[test]
    fn bce_cap_has_zero_gradient() {
        let (v, g) = bce_logit(-40.0, 1.0);
        assert!((v - -BCE_EPS.ln()).abs() < 1e-12);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_depth: -1.0,
            ..Default::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }
}
