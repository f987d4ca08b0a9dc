//! Patch perceptual distance over a fixed, linear filter-bank feature pyramid.

use crate::error::{Error, Result};
use crate::imaging::{check_same_shape, Image};

/// Per-layer features, position-major: `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn positions(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }
}

pub trait PerceptualExtractor: Send + Sync {
    fn layer_count(&self) -> usize;
    fn layer_weights(&self) -> Vec<f64>;
    fn extract(&self, patch: &Image) -> Vec<FeatureMap>;
    /// Vector-Jacobian product of [`extract`](Self::extract) at `patch`.
    fn extract_backward(&self, patch: &Image, grads: &[FeatureMap]) -> Image;
    /// Stabilizer in the per-location normalization `f / (|f| + eps)`.
    fn normalization_eps(&self) -> f64 {
        1e-4
    }
}

/// Separable blur-downsample pyramid with oriented derivative and
/// center-surround filters at every scale, applied per color channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub blur: [f64; 5],
    pub filters: Vec<[f64; 9]>,
    pub scales: usize,
    pub weights: Vec<f64>,
    pub eps: f64,
}

const BLUR: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

const FILTERS: [[f64; 9]; 5] = [
    [-0.125, 0.0, 0.125, -0.25, 0.0, 0.25, -0.125, 0.0, 0.125],
    [-0.125, -0.25, -0.125, 0.0, 0.0, 0.0, 0.125, 0.25, 0.125],
    [-0.25, -0.125, 0.0, -0.125, 0.0, 0.125, 0.0, 0.125, 0.25],
    [0.0, -0.125, -0.25, 0.125, 0.0, -0.125, 0.25, 0.125, 0.0],
    [
        -0.0625, -0.0625, -0.0625, -0.0625, 1.0, -0.0625, -0.0625, -0.0625, -0.0625,
    ],
];

pub fn default_extractor() -> FilterBank {
    FilterBank {
        blur: BLUR,
        filters: FILTERS.to_vec(),
        scales: 3,
        weights: vec![1.0 / 3.0; 3],
        eps: 1e-4,
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Plane {
            w,
            h,
            v: vec![0.0; w * h],
        }
    }

    fn at_clamped(&self, x: isize, y: isize) -> usize {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        y * self.w + x
    }
}

fn conv3(p: &Plane, k: &[f64; 9]) -> Plane {
    let mut out = Plane::zeros(p.w, p.h);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let kv = k[((dy + 1) * 3 + dx + 1) as usize];
                    acc += kv * p.v[p.at_clamped(x as isize + dx, y as isize + dy)];
                }
            }
            out.v[y * p.w + x] = acc;
        }
    }
    out
}

fn conv3_t(g: &Plane, k: &[f64; 9], into: &mut Plane) {
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.v[y * g.w + x];
            if gv == 0.0 {
                continue;
            }
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let kv = k[((dy + 1) * 3 + dx + 1) as usize];
                    let i = into.at_clamped(x as isize + dx, y as isize + dy);
                    into.v[i] += kv * gv;
                }
            }
        }
    }
}

fn blur_axis(p: &Plane, b: &[f64; 5], horizontal: bool) -> Plane {
    let mut out = Plane::zeros(p.w, p.h);
    for y in 0..p.h {
        for x in 0..p.w {
            let mut acc = 0.0;
            for (k, bv) in b.iter().enumerate() {
                let o = k as isize - 2;
                let i = if horizontal {
                    p.at_clamped(x as isize + o, y as isize)
                } else {
                    p.at_clamped(x as isize, y as isize + o)
                };
                acc += bv * p.v[i];
            }
            out.v[y * p.w + x] = acc;
        }
    }
    out
}

fn blur_axis_t(g: &Plane, b: &[f64; 5], horizontal: bool) -> Plane {
    let mut out = Plane::zeros(g.w, g.h);
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.v[y * g.w + x];
            for (k, bv) in b.iter().enumerate() {
                let o = k as isize - 2;
                let i = if horizontal {
                    out.at_clamped(x as isize + o, y as isize)
                } else {
                    out.at_clamped(x as isize, y as isize + o)
                };
                out.v[i] += bv * gv;
            }
        }
    }
    out
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

fn blur_down(p: &Plane, b: &[f64; 5]) -> Plane {
    let blurred = blur_axis(&blur_axis(p, b, true), b, false);
    let mut out = Plane::zeros(half(p.w), half(p.h));
    for y in 0..out.h {
        for x in 0..out.w {
            out.v[y * out.w + x] = blurred.v[2 * y * p.w + 2 * x];
        }
    }
    out
}

fn blur_down_t(g: &Plane, b: &[f64; 5], w: usize, h: usize) -> Plane {
    let mut up = Plane::zeros(w, h);
    for y in 0..g.h {
        for x in 0..g.w {
            up.v[2 * y * w + 2 * x] = g.v[y * g.w + x];
        }
    }
    blur_axis_t(&blur_axis_t(&up, b, false), b, true)
}

fn image_planes(img: &Image) -> Vec<Plane> {
    (0..3)
        .map(|c| Plane {
            w: img.width,
            h: img.height,
            v: img.data.iter().map(|px| px[c]).collect(),
        })
        .collect()
}

impl FilterBank {
    fn pyramid(&self, patch: &Image) -> Vec<Vec<Plane>> {
        let mut levels = vec![image_planes(patch)];
        for s in 1..self.scales {
            let next = levels[s - 1].iter().map(|p| blur_down(p, &self.blur)).collect();
            levels.push(next);
        }
        levels
    }
}

impl PerceptualExtractor for FilterBank {
    fn layer_count(&self) -> usize {
        self.scales
    }

    fn layer_weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    fn normalization_eps(&self) -> f64 {
        self.eps
    }

    fn extract(&self, patch: &Image) -> Vec<FeatureMap> {
        let nf = self.filters.len();
        self.pyramid(patch)
            .iter()
            .map(|level| {
                let (w, h) = (level[0].w, level[0].h);
                let mut fm = FeatureMap::zeros(w, h, 3 * nf);
                for (c, plane) in level.iter().enumerate() {
                    for (f, k) in self.filters.iter().enumerate() {
                        let resp = conv3(plane, k);
                        for (p, v) in resp.v.iter().enumerate() {
                            fm.data[p * fm.channels + c * nf + f] = *v;
                        }
                    }
                }
                fm
            })
            .collect()
    }

    fn extract_backward(&self, patch: &Image, grads: &[FeatureMap]) -> Image {
        let nf = self.filters.len();
        let mut sizes = vec![(patch.width, patch.height)];
        for s in 1..self.scales {
            let (w, h) = sizes[s - 1];
            sizes.push((half(w), half(h)));
        }
        let mut carry: Option<Vec<Plane>> = None;
        for s in (0..self.scales).rev() {
            let (w, h) = sizes[s];
            let mut level: Vec<Plane> = match carry.take() {
                Some(c) => c,
                None => (0..3).map(|_| Plane::zeros(w, h)).collect(),
            };
            let g = &grads[s];
            for (c, plane) in level.iter_mut().enumerate() {
                for (f, k) in self.filters.iter().enumerate() {
                    let gp = Plane {
                        w,
                        h,
                        v: (0..w * h).map(|p| g.data[p * g.channels + c * nf + f]).collect(),
                    };
                    conv3_t(&gp, k, plane);
                }
            }
            if s > 0 {
                let (pw, ph) = sizes[s - 1];
                carry = Some(level.iter().map(|p| blur_down_t(p, &self.blur, pw, ph)).collect());
            } else {
                carry = Some(level);
            }
        }
        let planes = carry.expect("at least one scale");
        Image::from_fn(patch.width, patch.height, |x, y| {
            let i = y * patch.width + x;
            [planes[0].v[i], planes[1].v[i], planes[2].v[i]]
        })
    }
}

fn normalize(f: &[f64], eps: f64) -> Vec<f64> {
    let r = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    f.iter().map(|v| v / (r + eps)).collect()
}

/// `g_f = g_n / (r + eps) - f (f · g_n) / (r (r + eps)^2)`.
fn normalize_backward(f: &[f64], g_n: &[f64], eps: f64) -> Vec<f64> {
    let r = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let inv = 1.0 / (r + eps);
    if r == 0.0 {
        return g_n.iter().map(|g| g * inv).collect();
    }
    let dot: f64 = f.iter().zip(g_n).map(|(a, b)| a * b).sum();
    let k = dot / (r * (r + eps) * (r + eps));
    f.iter().zip(g_n).map(|(fv, g)| g * inv - fv * k).collect()
}

fn check_patches(a: &Image, b: &Image) -> Result<()> {
    check_same_shape(a, b, "perceptual patches")?;
    if a.width == 0 || a.height == 0 {
        return Err(Error::Shape("empty patch".into()));
    }
    Ok(())
}

/// Weighted sum over layers of the spatial mean of squared differences of
/// per-location unit-normalized features.
pub fn perceptual_distance<E: PerceptualExtractor + ?Sized>(
    ext: &E,
    a: &Image,
    b: &Image,
) -> Result<f64> {
    check_patches(a, b)?;
    let eps = ext.normalization_eps();
    let (fa, fb) = (ext.extract(a), ext.extract(b));
    let mut total = 0.0;
    for ((la, lb), w) in fa.iter().zip(&fb).zip(ext.layer_weights()) {
        let mut acc = 0.0;
        for p in 0..la.positions() {
            let (na, nb) = (normalize(la.at(p), eps), normalize(lb.at(p), eps));
            acc += na.iter().zip(&nb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        total += w * acc / la.positions() as f64;
    }
    Ok(total)
}

/// Distance and its gradient with respect to `a`.
pub fn perceptual_distance_grad<E: PerceptualExtractor + ?Sized>(
    ext: &E,
    a: &Image,
    b: &Image,
) -> Result<(f64, Image)> {
    check_patches(a, b)?;
    let eps = ext.normalization_eps();
    let (fa, fb) = (ext.extract(a), ext.extract(b));
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for ((la, lb), w) in fa.iter().zip(&fb).zip(ext.layer_weights()) {
        let np = la.positions() as f64;
        let mut acc = 0.0;
        let mut g = FeatureMap::zeros(la.width, la.height, la.channels);
        for p in 0..la.positions() {
            let (na, nb) = (normalize(la.at(p), eps), normalize(lb.at(p), eps));
            let diff: Vec<f64> = na.iter().zip(&nb).map(|(x, y)| x - y).collect();
            acc += diff.iter().map(|d| d * d).sum::<f64>();
            let g_n: Vec<f64> = diff.iter().map(|d| 2.0 * w * d / np).collect();
            let g_f = normalize_backward(la.at(p), &g_n, eps);
            g.data[p * la.channels..(p + 1) * la.channels].copy_from_slice(&g_f);
        }
        total += w * acc / np;
        grads.push(g);
    }
    Ok((total, ext.extract_backward(a, &grads)))
}
