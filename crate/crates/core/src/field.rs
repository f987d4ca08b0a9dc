//! Dense voxel radiance field.
//!
//! Every grid node stores 14 raw parameters, kept as planes of length
//! `nx * ny * nz` with x varying fastest:
//!
//! | plane   | content                                            |
//! |---------|----------------------------------------------------|
//! | 0       | raw density (σ = softplus(raw))                    |
//! | 1..=4   | red SH coefficients (degree 0, then y, z, x terms)  |
//! | 5..=8   | green SH coefficients                              |
//! | 9..=12  | blue SH coefficients                               |
//! | 13      | objectness logit (interpolated raw, pre-sigmoid)    |
//!
//! Nodes sit on the corners of the bounding box, so node `(i, j, k)` is at
//! `min + (i, j, k) * spacing` with `spacing = extent / (n - 1)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Point3;

pub const NUM_PLANES: usize = 14;
pub const DENSITY_PLANE: usize = 0;
pub const SH_PLANE_START: usize = 1;
pub const SH_COEFFS: usize = 4;
pub const LOGIT_PLANE: usize = 13;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPGR";
const CHECKPOINT_VERSION: u32 = 1;

/// Degree-1 real spherical harmonic basis evaluated at unit direction `d`.
pub fn sh_basis(d: &Vector3<f64>) -> [f64; SH_COEFFS] {
    [SH_C0, -SH_C1 * d.y, SH_C1 * d.z, -SH_C1 * d.x]
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, for initializing raw density from a target σ.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite() && max[a] > min[a]) {
                return Err(Error::domain(format!(
                    "degenerate bounds on axis {a}: [{}, {}]",
                    min[a], max[a]
                )));
            }
        }
        Ok(Aabb { min, max })
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Ray parameter interval inside the box, if any.
    pub fn intersect(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut lo, mut hi) = (
                (self.min[a] - origin[a]) * inv,
                (self.max[a] - origin[a]) * inv,
            );
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t1 >= t0).then_some((t0, t1))
    }
}

/// Post-activation field values at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub logit: f64,
}

impl FieldSample {
    pub fn is_zero(&self) -> bool {
        self.sigma == 0.0 && self.color == [0.0; 3] && self.logit == 0.0
    }
}

/// Anything that can be volume rendered.
pub trait RadianceField: Sync {
    fn sample(&self, x: &Point3, d: &Vector3<f64>) -> Result<FieldSample>;
}

/// Which parameter groups a gradient may reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Channels {
    pub density: bool,
    pub color: bool,
    pub logit: bool,
}

impl Channels {
    pub const NONE: Channels = Channels {
        density: false,
        color: false,
        logit: false,
    };
    pub const ALL: Channels = Channels {
        density: true,
        color: true,
        logit: true,
    };
    pub const DENSITY: Channels = Channels {
        density: true,
        color: false,
        logit: false,
    };
    pub const COLOR: Channels = Channels {
        density: false,
        color: true,
        logit: false,
    };
    pub const LOGIT: Channels = Channels {
        density: false,
        color: false,
        logit: true,
    };

    pub fn union(self, other: Channels) -> Channels {
        Channels {
            density: self.density || other.density,
            color: self.color || other.color,
            logit: self.logit || other.logit,
        }
    }

    /// Whether parameter plane `plane` belongs to an enabled channel.
    pub fn covers_plane(&self, plane: usize) -> bool {
        match plane {
            DENSITY_PLANE => self.density,
            LOGIT_PLANE => self.logit,
            _ => self.color,
        }
    }
}

fn plane_channel_name(plane: usize) -> &'static str {
    match plane {
        DENSITY_PLANE => "density",
        LOGIT_PLANE => "logit",
        _ => "color",
    }
}

/// Corner indices and weights of a trilinear lookup.
#[derive(Debug, Clone, Copy)]
pub struct Trilinear {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridInit {
    pub sigma: f64,
    pub color: f64,
    pub logit: f64,
}

impl Default for GridInit {
    fn default() -> Self {
        GridInit {
            sigma: 0.01,
            color: 0.5,
            logit: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceGrid {
    resolution: [usize; 3],
    bounds: Aabb,
    params: Vec<f64>,
}

impl RadianceGrid {
    pub fn new(resolution: [usize; 3], bounds: Aabb, init: GridInit) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::domain(format!(
                "grid needs at least 2 nodes per axis, got {resolution:?}"
            )));
        }
        let n = resolution.iter().product::<usize>();
        let mut params = vec![0.0; n * NUM_PLANES];
        let raw_density = softplus_inverse(init.sigma.max(1e-12));
        params[..n].fill(raw_density);
        for c in 0..3 {
            let p = SH_PLANE_START + c * SH_COEFFS;
            params[p * n..(p + 1) * n].fill(init.color / SH_C0);
        }
        params[LOGIT_PLANE * n..].fill(init.logit);
        Ok(RadianceGrid {
            resolution,
            bounds,
            params,
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn spacing(&self) -> Vector3<f64> {
        let e = self.bounds.extent();
        Vector3::new(
            e.x / (self.resolution[0] - 1) as f64,
            e.y / (self.resolution[1] - 1) as f64,
            e.z / (self.resolution[2] - 1) as f64,
        )
    }

    /// Largest node spacing, used as the "voxel width" tolerance unit.
    pub fn voxel_width(&self) -> f64 {
        self.spacing().max()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Point3 {
        let s = self.spacing();
        Vector3::new(
            self.bounds.min[0] + i as f64 * s.x,
            self.bounds.min[1] + j as f64 * s.y,
            self.bounds.min[2] + k as f64 * s.z,
        )
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn plane(&self, plane: usize) -> &[f64] {
        let n = self.node_count();
        &self.params[plane * n..(plane + 1) * n]
    }

    pub fn plane_mut(&mut self, plane: usize) -> &mut [f64] {
        let n = self.node_count();
        &mut self.params[plane * n..(plane + 1) * n]
    }

    /// Flat index of parameter `plane` at `node`.
    pub fn param_index(&self, plane: usize, node: usize) -> usize {
        plane * self.node_count() + node
    }

    pub fn sh_plane(channel: usize, coeff: usize) -> usize {
        SH_PLANE_START + channel * SH_COEFFS + coeff
    }

    /// Copies the channels enabled in `channels` from `other` (same layout).
    pub fn copy_channels_from(&mut self, other: &RadianceGrid, channels: Channels) -> Result<()> {
        if other.resolution != self.resolution {
            return Err(Error::Layout);
        }
        let n = self.node_count();
        for p in 0..NUM_PLANES {
            if channels.covers_plane(p) {
                self.params[p * n..(p + 1) * n].copy_from_slice(&other.params[p * n..(p + 1) * n]);
            }
        }
        Ok(())
    }

    pub fn trilinear(&self, x: &Point3) -> Option<Trilinear> {
        if !x.iter().all(|v| v.is_finite()) || !self.bounds.contains(x) {
            return None;
        }
        let s = self.spacing();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let g = (x[a] - self.bounds.min[a]) / s[a];
            let i = (g.floor().max(0.0) as usize).min(self.resolution[a] - 2);
            base[a] = i;
            frac[a] = (g - i as f64).clamp(0.0, 1.0);
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            nodes[c] = self.node_index(base[0] + dx, base[1] + dy, base[2] + dz);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[c] = wx * wy * wz;
        }
        Some(Trilinear { nodes, weights })
    }

    fn interpolate(&self, tri: &Trilinear, plane: usize) -> f64 {
        let p = self.plane(plane);
        tri.nodes
            .iter()
            .zip(tri.weights.iter())
            .map(|(&n, &w)| w * p[n])
            .sum()
    }

    /// Interpolated pre-activation values: (raw density, raw rgb, logit).
    fn raw_at(&self, tri: &Trilinear, d: &Vector3<f64>) -> (f64, [f64; 3], f64) {
        let basis = sh_basis(d);
        let raw_density = self.interpolate(tri, DENSITY_PLANE);
        let mut raw_color = [0.0; 3];
        for (c, rc) in raw_color.iter_mut().enumerate() {
            *rc = (0..SH_COEFFS)
                .map(|j| basis[j] * self.interpolate(tri, Self::sh_plane(c, j)))
                .sum();
        }
        (raw_density, raw_color, self.interpolate(tri, LOGIT_PLANE))
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for r in self.resolution {
            h.update((r as u64).to_le_bytes());
        }
        for v in &self.params {
            h.update(v.to_le_bytes());
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Writes the binary checkpoint: magic, version, resolution, bounds, then
    /// f32 parameter planes in storage order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for r in self.resolution {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.params {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r).map_err(|e| match e {
            Error::Domain(message) => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::domain("bad checkpoint magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::domain(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut resolution = [0usize; 3];
        for r_ in resolution.iter_mut() {
            r.read_exact(&mut b4).map_err(io)?;
            *r_ = u32::from_le_bytes(b4) as usize;
        }
        let mut b8 = [0u8; 8];
        let mut corners = [0.0f64; 6];
        for c in corners.iter_mut() {
            r.read_exact(&mut b8).map_err(io)?;
            *c = f64::from_le_bytes(b8);
        }
        let bounds = Aabb::new(
            [corners[0], corners[1], corners[2]],
            [corners[3], corners[4], corners[5]],
        )?;
        let mut grid = RadianceGrid::new(resolution, bounds, GridInit::default())?;
        let mut bytes = vec![0u8; grid.params.len() * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        for (p, chunk) in grid.params.iter_mut().zip(bytes.chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        Ok(grid)
    }
}

fn check_direction(d: &Vector3<f64>) -> Result<()> {
    if (d.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!(
            "view direction must be unit length (|d| = {})",
            d.norm()
        )));
    }
    Ok(())
}

impl RadianceField for RadianceGrid {
    fn sample(&self, x: &Point3, d: &Vector3<f64>) -> Result<FieldSample> {
        sample_field(self, x, d)
    }
}

/// Trilinear interpolation of raw parameters followed by the activations.
/// Points outside the grid bounds are empty space.
pub fn sample_field(grid: &RadianceGrid, x: &Point3, d: &Vector3<f64>) -> Result<FieldSample> {
    check_direction(d)?;
    let Some(tri) = grid.trilinear(x) else {
        return Ok(FieldSample::default());
    };
    let (raw_density, raw_color, logit) = grid.raw_at(&tri, d);
    Ok(FieldSample {
        sigma: softplus(raw_density),
        color: raw_color.map(|c| c.clamp(0.0, 1.0)),
        logit,
    })
}

/// Accumulates `upstream · ∂sample/∂params` into `buf` for the enabled channels.
///
/// The color clamp passes gradient on the closed interval [0, 1] so that a
/// channel sitting exactly on a bound can still move back inside.
pub fn sample_field_backward(
    grid: &RadianceGrid,
    x: &Point3,
    d: &Vector3<f64>,
    upstream: &FieldSample,
    mask: Channels,
    buf: &mut GradBuffer,
) -> Result<()> {
    check_direction(d)?;
    if !buf.matches(grid) {
        return Err(Error::Layout);
    }
    if upstream.is_zero() || mask == Channels::NONE {
        return Ok(());
    }
    let Some(tri) = grid.trilinear(x) else {
        return Ok(());
    };
    let n = grid.node_count();
    if mask.density && upstream.sigma != 0.0 {
        let raw = grid.interpolate(&tri, DENSITY_PLANE);
        let g = upstream.sigma * sigmoid(raw);
        let plane = &mut buf.data[DENSITY_PLANE * n..(DENSITY_PLANE + 1) * n];
        for (&node, &w) in tri.nodes.iter().zip(tri.weights.iter()) {
            plane[node] += w * g;
        }
        buf.touched.density = true;
    }
    if mask.color && upstream.color != [0.0; 3] {
        let basis = sh_basis(d);
        for c in 0..3 {
            if upstream.color[c] == 0.0 {
                continue;
            }
            let raw: f64 = (0..SH_COEFFS)
                .map(|j| basis[j] * grid.interpolate(&tri, RadianceGrid::sh_plane(c, j)))
                .sum();
            if !(0.0..=1.0).contains(&raw) {
                continue;
            }
            for (j, b) in basis.iter().enumerate() {
                let g = upstream.color[c] * b;
                let p = RadianceGrid::sh_plane(c, j);
                let plane = &mut buf.data[p * n..(p + 1) * n];
                for (&node, &w) in tri.nodes.iter().zip(tri.weights.iter()) {
                    plane[node] += w * g;
                }
            }
            buf.touched.color = true;
        }
    }
    if mask.logit && upstream.logit != 0.0 {
        let plane = &mut buf.data[LOGIT_PLANE * n..(LOGIT_PLANE + 1) * n];
        for (&node, &w) in tri.nodes.iter().zip(tri.weights.iter()) {
            plane[node] += w * upstream.logit;
        }
        buf.touched.logit = true;
    }
    Ok(())
}

/// Gradient accumulator with the same layout as [`RadianceGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    resolution: [usize; 3],
    data: Vec<f64>,
    touched: Channels,
}

impl GradBuffer {
    pub fn for_grid(grid: &RadianceGrid) -> Self {
        GradBuffer {
            resolution: grid.resolution,
            data: vec![0.0; grid.params.len()],
            touched: Channels::NONE,
        }
    }

    pub fn matches(&self, grid: &RadianceGrid) -> bool {
        self.resolution == grid.resolution && self.data.len() == grid.params.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Channels that have received a nonzero contribution since the last reset.
    pub fn touched(&self) -> Channels {
        self.touched
    }

    pub fn zero(&mut self) {
        self.data.par_iter_mut().for_each(|v| *v = 0.0);
        self.touched = Channels::NONE;
    }

    pub fn plane(&self, plane: usize) -> &[f64] {
        let n = self.data.len() / NUM_PLANES;
        &self.data[plane * n..(plane + 1) * n]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) -> Result<()> {
        if other.resolution != self.resolution {
            return Err(Error::Layout);
        }
        self.data
            .par_iter_mut()
            .zip(other.data.par_iter())
            .for_each(|(a, b)| *a += scale * b);
        if scale != 0.0 {
            self.touched = self.touched.union(other.touched);
        }
        Ok(())
    }

    /// True if every plane outside `channels` is exactly zero.
    pub fn confined_to(&self, channels: Channels) -> bool {
        (0..NUM_PLANES)
            .filter(|&p| !channels.covers_plane(p))
            .all(|p| self.plane(p).iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_density: f64,
    pub lr_color: f64,
    pub lr_logit: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_density: 1e-2,
            lr_color: 1e-2,
            lr_logit: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl AdamConfig {
    fn lr_for_plane(&self, plane: usize) -> f64 {
        match plane {
            DENSITY_PLANE => self.lr_density,
            LOGIT_PLANE => self.lr_logit,
            _ => self.lr_color,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn for_grid(grid: &RadianceGrid) -> Self {
        AdamState {
            m: vec![0.0; grid.params.len()],
            v: vec![0.0; grid.params.len()],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam step over the enabled channels. Fails without touching the grid
/// if the buffer holds a non-finite value in an enabled channel.
pub fn apply_update(
    grid: &mut RadianceGrid,
    buf: &GradBuffer,
    state: &mut AdamState,
    config: &AdamConfig,
    channels: Channels,
) -> Result<()> {
    if !buf.matches(grid) || state.m.len() != grid.params.len() {
        return Err(Error::Layout);
    }
    let n = grid.node_count();
    for p in (0..NUM_PLANES).filter(|&p| channels.covers_plane(p)) {
        if buf.data[p * n..(p + 1) * n].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(plane_channel_name(p)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2, eps) = (config.beta1, config.beta2, config.eps);
    for p in (0..NUM_PLANES).filter(|&p| channels.covers_plane(p)) {
        let lr = config.lr_for_plane(p);
        let range = p * n..(p + 1) * n;
        grid.params[range.clone()]
            .par_iter_mut()
            .zip(state.m[range.clone()].par_iter_mut())
            .zip(state.v[range.clone()].par_iter_mut())
            .zip(buf.data[range].par_iter())
            .for_each(|(((x, m), v), &g)| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb {
        Aabb::new([0.0; 3], [1.0; 3]).unwrap()
    }

    fn random_grid(res: usize, seed: u64) -> RadianceGrid {
        let mut g = RadianceGrid::new([res; 3], unit_box(), GridInit::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.node_count();
        for p in 0..NUM_PLANES {
            for v in g.plane_mut(p) {
                *v = match p {
                    DENSITY_PLANE => rng.gen_range(-1.0..2.0),
                    LOGIT_PLANE => rng.gen_range(-3.0..3.0),
                    p if (p - SH_PLANE_START) % SH_COEFFS == 0 => rng.gen_range(1.2..2.2),
                    _ => rng.gen_range(-0.2..0.2),
                };
            }
        }
        assert_eq!(g.params().len(), n * NUM_PLANES);
        g
    }

    fn dir() -> Vector3<f64> {
        Vector3::new(0.3, -0.5, 0.8).normalize()
    }

    #[test]
    fn node_values_are_exact() {
        let g = random_grid(4, 1);
        let x = g.node_position(1, 2, 3);
        let s = sample_field(&g, &x, &dir()).unwrap();
        let node = g.node_index(1, 2, 3);
        assert_relative_eq!(s.sigma, softplus(g.plane(DENSITY_PLANE)[node]), epsilon = 1e-12);
        assert_relative_eq!(s.logit, g.plane(LOGIT_PLANE)[node], epsilon = 1e-12);
        let basis = sh_basis(&dir());
        for c in 0..3 {
            let raw: f64 = (0..4)
                .map(|j| basis[j] * g.plane(RadianceGrid::sh_plane(c, j))[node])
                .sum();
            assert_relative_eq!(s.color[c], raw.clamp(0.0, 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn edge_midpoint_interpolates_raw_density() {
        let mut g = RadianceGrid::new([3; 3], unit_box(), GridInit::default()).unwrap();
        let (a, b) = (0.7, -1.3);
        let (i0, i1) = (g.node_index(0, 1, 1), g.node_index(1, 1, 1));
        g.plane_mut(DENSITY_PLANE)[i0] = a;
        g.plane_mut(DENSITY_PLANE)[i1] = b;
        let x = (g.node_position(0, 1, 1) + g.node_position(1, 1, 1)) / 2.0;
        let s = sample_field(&g, &x, &dir()).unwrap();
        assert_relative_eq!(s.sigma, softplus((a + b) / 2.0), epsilon = 1e-12);
    }

    #[test]
    fn degree_zero_color_is_view_independent() {
        let mut g = random_grid(4, 2);
        for c in 0..3 {
            for j in 1..4 {
                g.plane_mut(RadianceGrid::sh_plane(c, j)).fill(0.0);
            }
        }
        let x = Vector3::new(0.31, 0.52, 0.77);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = sample_field(&g, &x, &Vector3::z()).unwrap().color;
        for _ in 0..100 {
            let d = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            assert_eq!(sample_field(&g, &x, &d).unwrap().color, reference);
        }
    }

    #[test]
    fn outside_bounds_is_empty() {
        let g = random_grid(4, 4);
        let s = sample_field(&g, &Vector3::new(1.5, 0.5, 0.5), &dir()).unwrap();
        assert_eq!(s, FieldSample::default());
    }

    #[test]
    fn non_unit_direction_rejected() {
        let g = random_grid(4, 4);
        assert!(sample_field(&g, &Vector3::new(0.5, 0.5, 0.5), &Vector3::new(0.0, 0.0, 2.0)).is_err());
    }

    #[test]
    fn continuity_across_voxel_faces() {
        let g = random_grid(5, 5);
        let d = dir();
        let face = g.node_position(2, 1, 3);
        for off in [Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.13, 0.07)] {
            let x = face + off;
            for axis in 0..3 {
                let mut dx = Vector3::zeros();
                dx[axis] = 1e-7;
                let a = sample_field(&g, &x, &d).unwrap();
                let b = sample_field(&g, &(x + dx), &d).unwrap();
                assert!((a.sigma - b.sigma).abs() < 1e-5);
                assert!((a.logit - b.logit).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn logit_only_mask_leaves_other_channels_zero() {
        let g = random_grid(4, 6);
        let mut buf = GradBuffer::for_grid(&g);
        let up = FieldSample {
            sigma: 1.0,
            color: [1.0, -2.0, 0.5],
            logit: 0.7,
        };
        sample_field_backward(&g, &Vector3::new(0.4, 0.4, 0.6), &dir(), &up, Channels::LOGIT, &mut buf)
            .unwrap();
        assert!(buf.confined_to(Channels::LOGIT));
        assert!(buf.plane(LOGIT_PLANE).iter().any(|&v| v != 0.0));
        assert_eq!(buf.touched(), Channels::LOGIT);
    }

    #[test]
    fn zero_upstream_is_noop() {
        let g = random_grid(4, 7);
        let mut buf = GradBuffer::for_grid(&g);
        sample_field_backward(
            &g,
            &Vector3::new(0.4, 0.4, 0.6),
            &dir(),
            &FieldSample::default(),
            Channels::ALL,
            &mut buf,
        )
        .unwrap();
        assert!(buf.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_buffer_rejected() {
        let g = random_grid(4, 8);
        let other = random_grid(5, 8);
        let mut buf = GradBuffer::for_grid(&other);
        let up = FieldSample {
            sigma: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            sample_field_backward(&g, &Vector3::new(0.5, 0.5, 0.5), &dir(), &up, Channels::ALL, &mut buf),
            Err(Error::Layout)
        ));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut g = random_grid(3, 9);
        let before = g.clone();
        let buf = GradBuffer::for_grid(&g);
        let mut st = AdamState::for_grid(&g);
        apply_update(&mut g, &buf, &mut st, &AdamConfig::default(), Channels::ALL).unwrap();
        assert_eq!(g, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_nan_reports_channel() {
        let mut g = random_grid(3, 10);
        let mut buf = GradBuffer::for_grid(&g);
        let idx = g.param_index(LOGIT_PLANE, 5);
        buf.data_mut()[idx] = f64::NAN;
        let before = g.clone();
        let mut st = AdamState::for_grid(&g);
        let err = apply_update(&mut g, &buf, &mut st, &AdamConfig::default(), Channels::ALL);
        assert!(matches!(err, Err(Error::NonFiniteGradient("logit"))));
        assert_eq!(g, before);
        // a disabled channel is not inspected
        apply_update(&mut g, &buf, &mut st, &AdamConfig::default(), Channels::DENSITY).unwrap();
    }

    #[test]
    fn checkpoint_round_trip_through_f32() {
        let g = random_grid(4, 11);
        let mut bytes = Vec::new();
        g.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SPGR");
        assert_eq!(bytes.len(), 4 + 4 + 12 + 48 + g.params().len() * 4);
        let back = RadianceGrid::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.resolution(), g.resolution());
        assert_eq!(back.bounds(), g.bounds());
        for (a, b) in back.params().iter().zip(g.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0u8; 64]);
        assert!(RadianceGrid::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn softplus_is_non_negative_and_inverts() {
        for x in [-800.0, -30.0, -1.0, 0.0, 1.0, 29.0, 31.0, 500.0] {
            assert!(softplus(x) >= 0.0);
        }
        for y in [1e-6, 0.01, 1.0, 12.0, 50.0] {
            assert_relative_eq!(softplus(softplus_inverse(y)), y, max_relative = 1e-9);
        }
    }
}
