//! Quadrature volume rendering of color, objectness logits and depth, and the
//! matching adjoint pass.
//!
//! All three outputs share the weights `w_i = T_i (1 - exp(-σ_i δ_i))` with
//! `T_i = exp(-Σ_{j<i} σ_j δ_j)`. Depth is the expected ray distance. Rays that
//! do not saturate composite over black, and an empty ray has depth 0; use the
//! reported opacity to tell the two apart.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    sample_field_backward, Channels, FieldSample, GradBuffer, RadianceField, RadianceGrid,
};
use crate::geometry::{generate_ray, Intrinsics, PixelCoord, Point3, Pose, Ray};
use crate::imaging::{Image, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stratified,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub mode: SampleMode,
}

impl RaySampleSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Splits `[t_near, t_far]` into `n` equal sections and picks one `t` per
/// section. The last interval runs to `t_far`.
pub fn sample_ray(ray: &Ray, n: usize, mode: SampleMode, rng: &mut impl Rng) -> RaySampleSet {
    let n = n.max(1);
    let step = (ray.t_far - ray.t_near) / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let lo = ray.t_near + i as f64 * step;
            match mode {
                SampleMode::Midpoint => lo + 0.5 * step,
                SampleMode::Stratified => lo + rng.gen::<f64>() * step,
            }
        })
        .collect();
    let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(ray.t_far - t[n - 1]);
    RaySampleSet { t, deltas, mode }
}

/// Deterministic per-ray RNG so parallel rendering is reproducible.
pub fn ray_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub logit: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

impl RenderResult {
    /// Objectness probability of the ray: sigmoid applied after rendering logits.
    pub fn probability(&self) -> f64 {
        crate::field::sigmoid(self.logit)
    }
}

struct Forward {
    result: RenderResult,
    samples: Vec<FieldSample>,
    transmittance: Vec<f64>,
}

fn forward<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    samples: &RaySampleSet,
    early_stop: Option<f64>,
) -> Result<Forward> {
    let n = samples.len();
    let mut out = RenderResult {
        color: [0.0; 3],
        depth: 0.0,
        logit: 0.0,
        opacity: 0.0,
        weights: Vec::with_capacity(n),
    };
    let mut values = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n + 1);
    let mut optical = 0.0f64;
    for i in 0..n {
        let t_i = samples.t[i];
        let s = field.sample(&ray.at(t_i), &ray.direction)?;
        if !(s.sigma.is_finite() && s.logit.is_finite() && s.color.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite {
                what: "field sample".into(),
                location: format!("sample index {i} (t = {t_i})"),
            });
        }
        let t_before = (-optical).exp();
        let tau = s.sigma * samples.deltas[i];
        let w = t_before * -(-tau).exp_m1();
        optical += tau;
        trans.push(t_before);
        out.weights.push(w);
        for c in 0..3 {
            out.color[c] += w * s.color[c];
        }
        out.logit += w * s.logit;
        out.depth += w * t_i;
        out.opacity += w;
        values.push(s);
        if let Some(threshold) = early_stop {
            if (-optical).exp() < threshold {
                break;
            }
        }
    }
    trans.push((-optical).exp());
    Ok(Forward {
        result: out,
        samples: values,
        transmittance: trans,
    })
}

pub fn render<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    samples: &RaySampleSet,
) -> Result<RenderResult> {
    Ok(forward(field, ray, samples, None)?.result)
}

/// Which parameter groups receive gradient from a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetachPolicy {
    /// Reconstruction: density and color.
    Rec,
    /// Classification: logits only; the rendering weights are constants.
    Clf,
    /// Perceptual: color only.
    Lpips,
    /// Depth: density only.
    Depth,
    /// Every channel; used for gradient checks.
    Full,
}

impl DetachPolicy {
    pub fn channels(self) -> Channels {
        match self {
            DetachPolicy::Rec => Channels {
                density: true,
                color: true,
                logit: false,
            },
            DetachPolicy::Clf => Channels::LOGIT,
            DetachPolicy::Lpips => Channels::COLOR,
            DetachPolicy::Depth => Channels::DENSITY,
            DetachPolicy::Full => Channels::ALL,
        }
    }
}

impl FromStr for DetachPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rec" => Ok(DetachPolicy::Rec),
            "clf" => Ok(DetachPolicy::Clf),
            "lpips" => Ok(DetachPolicy::Lpips),
            "depth" => Ok(DetachPolicy::Depth),
            "full" => Ok(DetachPolicy::Full),
            other => Err(Error::domain(format!("unknown detach policy '{other}'"))),
        }
    }
}

/// Loss cotangents with respect to the rendered outputs of one ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cotangent {
    pub color: [f64; 3],
    pub logit: f64,
    pub depth: f64,
}

impl Cotangent {
    pub fn is_zero(&self) -> bool {
        self.color == [0.0; 3] && self.logit == 0.0 && self.depth == 0.0
    }
}

/// Field-space cotangent for one ray sample, ready to scatter into the grid.
#[derive(Debug, Clone, Copy)]
pub struct SampleGrad {
    pub x: Point3,
    pub upstream: FieldSample,
}

/// Per-ray adjoint: turns output cotangents into per-sample field cotangents.
#[derive(Debug, Clone)]
pub struct RayGrad {
    pub direction: Vector3<f64>,
    pub channels: Channels,
    pub samples: Vec<SampleGrad>,
}

/// Renders a ray and computes the per-sample cotangents for a sum of loss
/// terms, each with its own detach policy. Nothing is written to the grid.
pub fn ray_adjoint(
    grid: &RadianceGrid,
    ray: &Ray,
    samples: &RaySampleSet,
    terms: &[(Cotangent, DetachPolicy)],
) -> Result<(RenderResult, RayGrad)> {
    let fw = forward(grid, ray, samples, None)?;
    let grad = adjoint_from_forward(&fw, ray, samples, terms);
    Ok((fw.result, grad))
}

/// Variant of [`ray_adjoint`] whose cotangents depend on the forward result.
/// The closure also returns a side value (typically the loss of this ray).
pub fn ray_adjoint_with<T>(
    grid: &RadianceGrid,
    ray: &Ray,
    samples: &RaySampleSet,
    terms: impl FnOnce(&RenderResult) -> (T, Vec<(Cotangent, DetachPolicy)>),
) -> Result<(RenderResult, T, RayGrad)> {
    let fw = forward(grid, ray, samples, None)?;
    let (extra, terms) = terms(&fw.result);
    let grad = adjoint_from_forward(&fw, ray, samples, &terms);
    Ok((fw.result, extra, grad))
}

fn adjoint_from_forward(
    fw: &Forward,
    ray: &Ray,
    samples: &RaySampleSet,
    terms: &[(Cotangent, DetachPolicy)],
) -> RayGrad {
    let n = fw.samples.len();
    let mut channels = Channels::NONE;
    let mut ups = vec![FieldSample::default(); n];
    for (cot, policy) in terms {
        if cot.is_zero() {
            continue;
        }
        let ch = policy.channels();
        channels = channels.union(ch);
        if ch.color || ch.logit {
            for (i, up) in ups.iter_mut().enumerate() {
                let w = fw.result.weights[i];
                if ch.color {
                    for c in 0..3 {
                        up.color[c] += w * cot.color[c];
                    }
                }
                if ch.logit {
                    up.logit += w * cot.logit;
                }
            }
        }
        if ch.density {
            // ∂L/∂σ_k = δ_k (T_{k+1} e_k - Σ_{i>k} w_i e_i), e_i = ∂L/∂w_i
            let e: Vec<f64> = (0..n)
                .map(|i| {
                    let s = &fw.samples[i];
                    cot.color[0] * s.color[0]
                        + cot.color[1] * s.color[1]
                        + cot.color[2] * s.color[2]
                        + cot.logit * s.logit
                        + cot.depth * samples.t[i]
                })
                .collect();
            let mut suffix = 0.0;
            for k in (0..n).rev() {
                let g = samples.deltas[k] * (fw.transmittance[k + 1] * e[k] - suffix);
                ups[k].sigma += g;
                suffix += fw.result.weights[k] * e[k];
            }
        }
    }
    let grads = ups
        .into_iter()
        .enumerate()
        .filter(|(_, up)| !up.is_zero())
        .map(|(i, upstream)| SampleGrad {
            x: ray.at(samples.t[i]),
            upstream,
        })
        .collect();
    RayGrad {
        direction: ray.direction,
        channels,
        samples: grads,
    }
}

/// Accumulates a ray adjoint into the gradient buffer.
pub fn scatter(grid: &RadianceGrid, grad: &RayGrad, buf: &mut GradBuffer) -> Result<()> {
    for s in &grad.samples {
        sample_field_backward(grid, &s.x, &grad.direction, &s.upstream, grad.channels, buf)?;
    }
    Ok(())
}

/// Exact adjoint of [`render`] restricted to the policy's channels.
pub fn render_backward(
    grid: &RadianceGrid,
    ray: &Ray,
    samples: &RaySampleSet,
    cotangent: &Cotangent,
    policy: DetachPolicy,
    buf: &mut GradBuffer,
) -> Result<()> {
    if !buf.matches(grid) {
        return Err(Error::Layout);
    }
    if cotangent.is_zero() {
        return Ok(());
    }
    let (_, grad) = ray_adjoint(grid, ray, samples, &[(*cotangent, policy)])?;
    scatter(grid, &grad, buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub n_samples: usize,
    pub mode: SampleMode,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
    /// Stop marching once transmittance drops below this value.
    pub early_stop_transmittance: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            n_samples: 192,
            mode: SampleMode::Stratified,
            near: 0.1,
            far: 20.0,
            seed: 0,
            early_stop_transmittance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub image: Image,
    pub depth: ScalarMap,
    pub logit: ScalarMap,
    pub opacity: ScalarMap,
}

impl ViewRender {
    pub fn probability(&self) -> ScalarMap {
        ScalarMap {
            width: self.logit.width,
            height: self.logit.height,
            data: self.logit.data.iter().map(|&s| crate::field::sigmoid(s)).collect(),
        }
    }
}

/// Stream id for the RNG of pixel `(x, y)` in a view.
pub fn pixel_stream(view: usize, x: usize, y: usize) -> u64 {
    ((view as u64) << 40) ^ ((y as u64) << 20) ^ x as u64
}

pub fn render_pixel<F: RadianceField + ?Sized>(
    field: &F,
    intr: &Intrinsics,
    pose: &Pose,
    x: usize,
    y: usize,
    stream_view: usize,
    opts: &RenderOptions,
) -> Result<RenderResult> {
    let ray = generate_ray(intr, pose, &PixelCoord::center(x, y, 0), opts.near, opts.far)?;
    let mut rng = ray_rng(opts.seed, pixel_stream(stream_view, x, y));
    let samples = sample_ray(&ray, opts.n_samples, opts.mode, &mut rng);
    forward(field, &ray, &samples, opts.early_stop_transmittance)
        .map(|f| f.result)
        .map_err(|e| match e {
            Error::NonFinite { what, location } => Error::NonFinite {
                what,
                location: format!("pixel ({x}, {y}), {location}"),
            },
            other => other,
        })
}

/// Renders every pixel of a view. Output is deterministic for a given seed.
pub fn render_view<F: RadianceField + ?Sized>(
    field: &F,
    intr: &Intrinsics,
    pose: &Pose,
    opts: &RenderOptions,
) -> Result<ViewRender> {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let rows: Vec<Vec<RenderResult>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| render_pixel(field, intr, pose, x, y, 0, opts))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ViewRender {
        image: Image::new(w, h),
        depth: ScalarMap::new(w, h),
        logit: ScalarMap::new(w, h),
        opacity: ScalarMap::new(w, h),
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, r) in row.into_iter().enumerate() {
            out.image.set(x, y, r.color);
            out.depth.set(x, y, r.depth);
            out.logit.set(x, y, r.logit);
            out.opacity.set(x, y, r.opacity);
        }
    }
    Ok(out)
}
