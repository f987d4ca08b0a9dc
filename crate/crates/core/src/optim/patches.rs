use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    /// Patch side is the image side divided by this factor.
    pub downscale_factor: usize,
    /// Pixel step between neighbouring patch samples.
    pub stride: usize,
    pub views_per_batch: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            downscale_factor: 16,
            stride: 2,
            views_per_batch: 4,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.downscale_factor == 0 || self.stride == 0 || self.views_per_batch == 0 {
            return Err(Error::Config(
                "patch factor, stride and views_per_batch must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Sample counts per side, `(width, height)`.
    pub fn patch_size(&self, width: usize, height: usize) -> (usize, usize) {
        (
            (width / self.downscale_factor).max(1),
            (height / self.downscale_factor).max(1),
        )
    }

    /// Largest stride not above the configured one whose footprint fits.
    pub fn effective_stride(&self, width: usize, height: usize) -> usize {
        let (pw, ph) = self.patch_size(width, height);
        let mut s = self.stride;
        while s > 1 && ((pw - 1) * s + 1 > width || (ph - 1) * s + 1 > height) {
            s -= 1;
        }
        s
    }
}

/// A strided patch: samples at `(x0 + i * stride, y0 + j * stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub view: usize,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
}

impl PatchRect {
    pub fn footprint(&self) -> (usize, usize) {
        (
            (self.width - 1) * self.stride + 1,
            (self.height - 1) * self.stride + 1,
        )
    }

    /// Sample pixels in row-major patch order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for j in 0..self.height {
            for i in 0..self.width {
                out.push((self.x0 + i * self.stride, self.y0 + j * self.stride));
            }
        }
        out
    }

    /// Whether the footprint overlaps the inclusive box `(x0, y0, x1, y1)`.
    pub fn intersects(&self, bbox: (usize, usize, usize, usize)) -> bool {
        let (fw, fh) = self.footprint();
        self.x0 <= bbox.2 && self.x0 + fw > bbox.0 && self.y0 <= bbox.3 && self.y0 + fh > bbox.1
    }
}

fn pick_origin(
    lo_bbox: usize,
    hi_bbox: usize,
    footprint: usize,
    size: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> usize {
    let lo = (lo_bbox + 1).saturating_sub(footprint);
    let hi = (size - footprint).min(hi_bbox);
    let first = lo.div_ceil(stride) * stride;
    if first <= hi {
        let count = (hi - first) / stride + 1;
        return first + stride * rng.gen_range(0..count);
    }
    let center = (lo_bbox + hi_bbox) / 2;
    center.saturating_sub(footprint / 2).min(size - footprint)
}

/// Picks up to `views_per_batch` distinct views with nonempty masks and one
/// patch per view whose footprint intersects that mask's bounding box.
pub fn sample_patches(
    width: usize,
    height: usize,
    masks: &[Mask],
    spec: &PatchSpec,
    rng: &mut impl Rng,
) -> Result<Vec<PatchRect>> {
    spec.validate()?;
    let candidates: Vec<(usize, (usize, usize, usize, usize))> = masks
        .iter()
        .enumerate()
        .filter_map(|(v, m)| m.bbox().map(|b| (v, b)))
        .collect();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let (pw, ph) = spec.patch_size(width, height);
    let stride = spec.effective_stride(width, height);
    let fw = ((pw - 1) * stride + 1).min(width);
    let fh = ((ph - 1) * stride + 1).min(height);
    let k = spec.views_per_batch.min(candidates.len());
    let mut picks: Vec<usize> = index::sample(rng, candidates.len(), k).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|c| {
            let (view, b) = candidates[c];
            PatchRect {
                view,
                x0: pick_origin(b.0, b.2, fw, width, stride, rng),
                y0: pick_origin(b.1, b.3, fh, height, stride, rng),
                width: pw,
                height: ph,
                stride,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_size_floors() {
        let spec = PatchSpec::default();
        assert_eq!(spec.patch_size(1008, 567), (63, 35));
    }

    #[test]
    fn full_bbox_allows_every_grid_position() {
        let spec = PatchSpec {
            downscale_factor: 4,
            stride: 2,
            views_per_batch: 1,
        };
        let masks = vec![Mask::full(32, 32)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let p = sample_patches(32, 32, &masks, &spec, &mut rng).unwrap()[0];
            assert_eq!(p.x0 % 2, 0);
            seen.insert(p.x0);
        }
        let fw = (8 - 1) * 2 + 1;
        assert_eq!(seen.len(), (32 - fw) / 2 + 1);
    }

    #[test]
    fn stride_shrinks_when_footprint_too_large() {
        let spec = PatchSpec {
            downscale_factor: 1,
            stride: 2,
            views_per_batch: 1,
        };
        assert_eq!(spec.effective_stride(10, 10), 1);
    }

    #[test]
    fn empty_masks_give_no_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out =
            sample_patches(16, 16, &[Mask::new(16, 16)], &PatchSpec::default(), &mut rng).unwrap();
        assert!(out.is_empty());
    }
}
