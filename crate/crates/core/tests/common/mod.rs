#![allow(dead_code)]

use mvinpaint::field::{Aabb, GridInit, RadianceGrid, LOGIT_PLANE, NUM_PLANES, SH_COEFFS};
use mvinpaint::geometry::Ray;
use mvinpaint::renderer::{sample_ray, RaySampleSet, SampleMode};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random grid on [-1, 1]^3 whose colors stay strictly inside (0, 1).
pub fn random_grid(res: usize, seed: u64) -> RadianceGrid {
    let mut r = rng(seed);
    let bounds = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
    let mut g = RadianceGrid::new([res; 3], bounds, GridInit::default()).unwrap();
    let n = g.node_count();
    for p in 0..NUM_PLANES {
        let plane = g.plane_mut(p);
        for v in plane.iter_mut().take(n) {
            *v = match p {
                0 => r.gen_range(-1.0..2.0),
                LOGIT_PLANE => r.gen_range(-2.0..2.0),
                _ if (p - 1) % SH_COEFFS == 0 => 0.5 / 0.282_094_791_773_878_1 + r.gen_range(-0.2..0.2),
                _ => r.gen_range(-0.1..0.1),
            };
        }
    }
    g
}

pub fn random_rays(count: usize, seed: u64, n_samples: usize) -> Vec<(Ray, RaySampleSet)> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let origin = Vector3::new(r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), -3.0);
            let target = Vector3::new(r.gen_range(-0.6..0.6), r.gen_range(-0.6..0.6), 0.0);
            let ray = Ray::new(origin, (target - origin).normalize(), 1.5, 4.5).unwrap();
            let s = sample_ray(&ray, n_samples, SampleMode::Midpoint, &mut r);
            (ray, s)
        })
        .collect()
}

/// Largest relative error between an analytic gradient and central
/// differences of `f` over the given parameter indices.
pub fn max_rel_error(
    grid: &RadianceGrid,
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    h: f64,
    f: impl Fn(&RadianceGrid) -> f64,
) -> f64 {
    let mut g = grid.clone();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = g.params()[i];
        g.params_mut()[i] = orig + h;
        let fp = f(&g);
        g.params_mut()[i] = orig - h;
        let fm = f(&g);
        g.params_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let an = analytic[i];
        let scale = fd.abs().max(an.abs());
        if scale < 1e-7 {
            assert!((fd - an).abs() < 1e-9, "param {i}: fd {fd} analytic {an}");
            continue;
        }
        worst = worst.max((fd - an).abs() / scale);
    }
    worst
}
