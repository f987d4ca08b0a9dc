//! In-memory image buffers and their on-disk formats: 8-bit PNG for color and
//! masks, little-endian 32-bit PFM for depth and logit maps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Linear RGB image with values nominally in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Bilinear lookup at continuous coordinates (pixel centers at +0.5),
    /// clamping to the border.
    pub fn bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let fx = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(x0, y0)[c] * (1.0 - ax) + self.get(x1, y0)[c] * ax;
            let bot = self.get(x0, y1)[c] * (1.0 - ax) + self.get(x1, y1)[c] * ax;
            *o = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    /// Sub-image `[x0, x0 + w) × [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            let c = self.data[i];
            *px = image::Rgb(c.map(quantize));
        }
        img
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img
                .pixels()
                .map(|p| p.0.map(|c| c as f64 / 255.0))
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(image::DynamicImage::ImageRgb8(self.to_rgb8()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Values snapped to the 8-bit grid, as they would be after a PNG round trip.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|c| c.map(|v| quantize(v) as f64 / 255.0))
                .collect(),
        }
    }

    pub fn channel(&self, c: usize) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

pub trait Shape2 {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn shape(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
}

impl Shape2 for Image {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
}

impl Shape2 for ScalarMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
}

impl Shape2 for Mask {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
}

/// Single-channel float map (depth, logit, opacity).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        ScalarMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ScalarMap {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Writes a little-endian single-channel PFM (`Pf`, negative scale).
    /// PFM stores rows bottom-to-top.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_pfm())
            .map_err(|e| Error::io(path, e))
    }

    pub fn encode_pfm(&self) -> Vec<u8> {
        let mut out = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                out.extend_from_slice(&(self.get(x, y) as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pfm(&bytes).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Self, String> {
        // header: magic, width, height, scale; one whitespace byte before the payload
        let mut tokens = Vec::new();
        let mut pos = 0;
        while tokens.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if tokens.len() < 4 || tokens[0] != "Pf" {
            return Err("not a single-channel PFM".into());
        }
        let width: usize = tokens[1].parse().map_err(|_| "bad width")?;
        let height: usize = tokens[2].parse().map_err(|_| "bad height")?;
        let scale: f64 = tokens[3].parse().map_err(|_| "bad scale")?;
        let little = scale < 0.0;
        let need = width * height * 4;
        if bytes.len() < pos + need {
            return Err(format!(
                "truncated PFM payload: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            ));
        }
        let mut map = ScalarMap::new(width, height);
        let mut chunks = bytes[pos..pos + need].chunks_exact(4);
        for y in (0..height).rev() {
            for x in 0..width {
                let b: [u8; 4] = chunks.next().unwrap().try_into().unwrap();
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                map.set(x, y, v as f64);
            }
        }
        Ok(map)
    }

    /// Grayscale preview normalized to the map's range.
    pub fn to_gray8(&self) -> image::GrayImage {
        let (lo, hi) = self
            .data
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            let v = self.data[i];
            let g = if v.is_finite() { (v - lo) / span } else { 0.0 };
            *px = image::Luma([quantize(g)]);
        }
        img
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(image::DynamicImage::ImageLuma8(self.to_gray8()))
    }
}

/// Per-pixel boolean mask; `true` marks the object.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            *px = image::Luma([if self.data[i] { 255 } else { 0 }]);
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(image::DynamicImage::ImageLuma8(self.to_gray8()))
    }

    /// Any pixel at or above mid-gray counts as masked.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Mask {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        })
    }
}

/// Errors unless both buffers have the same dimensions.
pub fn check_same_shape(a: &impl Shape2, b: &impl Shape2, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_preserves_orientation() {
        let m = ScalarMap::from_fn(5, 3, |x, y| x as f64 + 10.0 * y as f64 + 0.25);
        let back = ScalarMap::decode_pfm(&m.encode_pfm()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_pfm_rejected() {
        let m = ScalarMap::new(4, 4);
        let bytes = m.encode_pfm();
        assert!(ScalarMap::decode_pfm(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_fn(7, 5, |x, y| (x + y) % 3 == 0);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }

    #[test]
    fn bbox_of_mask() {
        let mut m = Mask::new(10, 8);
        assert_eq!(m.bbox(), None);
        m.set(2, 3, true);
        m.set(6, 5, true);
        assert_eq!(m.bbox(), Some((2, 3, 6, 5)));
    }

    #[test]
    fn bilinear_hits_centers() {
        let img = Image::from_fn(4, 4, |x, y| [x as f64, y as f64, 0.0]);
        assert_eq!(img.bilinear(2.5, 1.5), [2.0, 1.0, 0.0]);
        let mid = img.bilinear(2.0, 1.5);
        assert!((mid[0] - 1.5).abs() < 1e-12);
    }
}
