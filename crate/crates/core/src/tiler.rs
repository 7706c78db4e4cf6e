//! Tissue segmentation and patch tiling on plain raster images, plus a
//! deterministic hand-crafted patch descriptor for self-contained runs.

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: u32 = 224;
pub const DEFAULT_DOWNSAMPLE: u32 = 16;
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.5;

/// Length of the descriptor `toy_embed` projects from.
pub const DESCRIPTOR_LEN: usize = 38;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("{width}x{height} image")));
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::InvalidImage(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self::new(width, height, data)
    }

    /// Reads PNG or binary PPM (P6); other layouts are converted to RGB8.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        image::save_buffer(path.as_ref(), &self.data, self.width, self.height, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `size`×`size` square at `(x, y)`.
    pub fn crop(&self, x: u32, y: u32, size: u32) -> Result<RasterImage> {
        if size == 0 || x + size > self.width || y + size > self.height {
            return Err(Error::invalid(format!(
                "crop {size}px at ({x}, {y}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(size as usize * size as usize * 3);
        for row in y..y + size {
            let start = (row as usize * self.width as usize + x as usize) * 3;
            data.extend_from_slice(&self.data[start..start + size as usize * 3]);
        }
        RasterImage::new(size, size, data)
    }

    /// Box-averages `factor`×`factor` blocks per channel; remainder rows and
    /// columns are dropped.
    pub fn downsample(&self, factor: u32) -> Result<RasterImage> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be at least 1"));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        if w == 0 || h == 0 {
            return Err(Error::InvalidImage(format!(
                "{}x{} image is smaller than 1x1 after downsampling by {factor}",
                self.width, self.height
            )));
        }
        let area = factor * factor;
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for by in 0..h {
            for bx in 0..w {
                let mut acc = [0u32; 3];
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        let p = self.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                    }
                }
                for a in acc {
                    data.push(((a + area / 2) / area) as u8);
                }
            }
        }
        RasterImage::new(w, h, data)
    }
}

#[inline]
pub fn luma(rgb: [u8; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

/// Tissue/background mask at a reduced resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
    /// Full-resolution pixels per mask pixel along each axis.
    pub scale_factor: u32,
}

impl TissueMask {
    #[inline]
    pub fn is_tissue(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn tissue_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    /// Black tissue on white background, at mask resolution.
    pub fn to_image(&self) -> RasterImage {
        let data = self.bits.iter().flat_map(|&b| if b { [0u8; 3] } else { [255u8; 3] }).collect();
        RasterImage { width: self.width, height: self.height, data }
    }
}

/// Otsu's threshold: the `t` maximizing between-class variance of the split
/// `{0..=t}` vs `{t+1..=255}`; the smallest maximizer wins ties.
///
/// The variance is proportional to `(N·S₀ − S·n₀)² / (n₀·n₁)`, which is
/// compared exactly in integers whenever it fits in 128 bits.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    match otsu_exact(histogram, total) {
        Some(t) => Ok(t),
        None => Ok(otsu_float(histogram, total)),
    }
}

fn otsu_exact(histogram: &[u64; 256], total: u64) -> Option<u8> {
    let n = total as u128;
    let s: u128 = histogram.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let (mut best_t, mut best_num, mut best_den) = (0u8, 0u128, 1u128);
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..256usize {
        n0 += histogram[t] as u128;
        s0 += t as u128 * histogram[t] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (a, b) = (s0.checked_mul(n)?, s.checked_mul(n0)?);
        let diff = a.abs_diff(b);
        let num = diff.checked_mul(diff)?;
        let den = n0.checked_mul(n1)?;
        if cmp_fraction(num, den, best_num, best_den) == Ordering::Greater {
            (best_t, best_num, best_den) = (t as u8, num, den);
        }
    }
    Some(best_t)
}

/// Exact comparison of `a/b` with `c/d` (`b, d > 0`) by continued fractions.
fn cmp_fraction(mut a: u128, mut b: u128, mut c: u128, mut d: u128) -> Ordering {
    loop {
        let (qa, ra, qc, rc) = (a / b, a % b, c / d, c % d);
        if qa != qc {
            return qa.cmp(&qc);
        }
        match (ra == 0, rc == 0) {
            (true, true) => return Ordering::Equal,
            (true, false) => return Ordering::Less,
            (false, true) => return Ordering::Greater,
            // ra/b vs rc/d has the same order as d/rc vs b/ra.
            (false, false) => (a, b, c, d) = (d, rc, b, ra),
        }
    }
}

fn otsu_float(histogram: &[u64; 256], total: u64) -> u8 {
    let total_f = total as f64;
    let weighted_total: f64 = histogram.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let mut best_t = 0u8;
    let mut best_var = 0.0;
    let mut count_low = 0u64;
    let mut sum_low = 0.0;
    for t in 0..256usize {
        count_low += histogram[t];
        sum_low += t as f64 * histogram[t] as f64;
        let count_high = total - count_low;
        if count_low == 0 || count_high == 0 {
            continue;
        }
        let w0 = count_low as f64 / total_f;
        let w1 = count_high as f64 / total_f;
        let mu0 = sum_low / count_low as f64;
        let mu1 = (weighted_total - sum_low) / count_high as f64;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

/// Grayscale, box-downsample, Otsu; pixels in the dark class (`<= t`) are tissue.
pub fn segment_tissue(image: &RasterImage, downsample: u32) -> Result<TissueMask> {
    if downsample == 0 {
        return Err(Error::invalid("downsample factor must be at least 1"));
    }
    let (w, h) = (image.width / downsample, image.height / downsample);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!(
            "{}x{} image is smaller than 1x1 after downsampling by {downsample}",
            image.width, image.height
        )));
    }
    let area = (downsample * downsample) as f64;
    let mut gray = Vec::with_capacity(w as usize * h as usize);
    for by in 0..h {
        for bx in 0..w {
            let mut acc = 0.0;
            for y in by * downsample..(by + 1) * downsample {
                for x in bx * downsample..(bx + 1) * downsample {
                    acc += luma(image.pixel(x, y));
                }
            }
            gray.push((acc / area).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut hist = [0u64; 256];
    for &g in &gray {
        hist[g as usize] += 1;
    }
    let t = otsu_threshold(&hist)?;
    Ok(TissueMask { width: w, height: h, bits: gray.iter().map(|&g| g <= t).collect(), scale_factor: downsample })
}

/// Top-left corners of the kept patches, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: u32,
    pub coords: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnification_label: Option<String>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_vec(self)?)?;
        Ok(())
    }
}

/// Fraction of tissue among the mask pixels whose centers fall inside the
/// patch. A patch smaller than one mask pixel uses the pixel under its center.
pub fn patch_tissue_fraction(mask: &TissueMask, x: u32, y: u32, patch_size: u32) -> f64 {
    let s = mask.scale_factor as u64;
    // Mask pixel m has its center at (2m + 1) * s / 2; inside iff 2x <= (2m+1)s < 2(x + size).
    let range = |origin: u32, limit: u32| {
        let lo = (2 * origin as u64).saturating_sub(s).div_ceil(2 * s);
        let hi = (2 * (origin as u64 + patch_size as u64)).saturating_sub(s).div_ceil(2 * s);
        (lo.min(limit as u64) as u32, hi.min(limit as u64) as u32)
    };
    let (x0, x1) = range(x, mask.width);
    let (y0, y1) = range(y, mask.height);
    if x0 >= x1 || y0 >= y1 {
        let cx = ((x as u64 * 2 + patch_size as u64) / (2 * s)).min(mask.width as u64 - 1) as u32;
        let cy = ((y as u64 * 2 + patch_size as u64) / (2 * s)).min(mask.height as u64 - 1) as u32;
        return if mask.is_tissue(cx, cy) { 1.0 } else { 0.0 };
    }
    let mut tissue = 0u64;
    for my in y0..y1 {
        for mx in x0..x1 {
            tissue += mask.is_tissue(mx, my) as u64;
        }
    }
    tissue as f64 / ((x1 - x0) as u64 * (y1 - y0) as u64) as f64
}

/// Non-overlapping grid anchored at (0, 0); a patch is kept when its mask
/// footprint is at least `min_tissue_fraction` tissue.
pub fn extract_patches(
    image: &RasterImage,
    mask: &TissueMask,
    patch_size: u32,
    min_tissue_fraction: f64,
) -> Result<PatchGrid> {
    if patch_size == 0 || patch_size > image.width.min(image.height) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit a {}x{} image",
            image.width, image.height
        )));
    }
    if !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(Error::invalid("min_tissue_fraction must lie in [0, 1]"));
    }
    let mut coords = Vec::new();
    let mut y = 0;
    while y + patch_size <= image.height {
        let mut x = 0;
        while x + patch_size <= image.width {
            if patch_tissue_fraction(mask, x, y, patch_size) >= min_tissue_fraction {
                coords.push([x, y]);
            }
            x += patch_size;
        }
        y += patch_size;
    }
    if coords.is_empty() {
        return Err(Error::NoTissuePatches);
    }
    Ok(PatchGrid { patch_size, coords, magnification_label: None })
}

/// The 38-value colour/texture descriptor `toy_embed` projects:
/// per-channel 8-bin histogram fractions (24), per-channel mean and standard
/// deviation (6), per-channel mean absolute horizontal and vertical gradient
/// (6), the fraction of pixels with luma below 220 and a constant 1.
/// Intensities are scaled to [0, 1].
pub fn patch_descriptor(patch: &RasterImage) -> [f64; DESCRIPTOR_LEN] {
    let (w, h) = (patch.width, patch.height);
    let n = (w * h) as f64;
    let mut out = [0.0; DESCRIPTOR_LEN];
    let mut sum = [0u64; 3];
    let mut sum_sq = [0.0; 3];
    let mut dark = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = patch.pixel(x, y);
            for c in 0..3 {
                out[c * 8 + (p[c] as usize >> 5)] += 1.0;
                sum[c] += p[c] as u64;
            }
            if luma(p) < 220.0 {
                dark += 1;
            }
        }
    }
    for v in &mut out[..24] {
        *v /= n;
    }
    for c in 0..3 {
        out[24 + c] = (sum[c] as f64 / n) / 255.0;
    }
    for y in 0..h {
        for x in 0..w {
            let p = patch.pixel(x, y);
            for c in 0..3 {
                sum_sq[c] += (p[c] as f64 / 255.0 - out[24 + c]).powi(2);
            }
        }
    }
    for c in 0..3 {
        out[27 + c] = (sum_sq[c] / n).sqrt();
    }
    let mut grad_h = [0.0; 3];
    let mut grad_v = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let p = patch.pixel(x, y);
            if x + 1 < w {
                let q = patch.pixel(x + 1, y);
                for c in 0..3 {
                    grad_h[c] += (q[c] as f64 - p[c] as f64).abs() / 255.0;
                }
            }
            if y + 1 < h {
                let q = patch.pixel(x, y + 1);
                for c in 0..3 {
                    grad_v[c] += (q[c] as f64 - p[c] as f64).abs() / 255.0;
                }
            }
        }
    }
    let pairs_h = ((w - 1) * h).max(1) as f64;
    let pairs_v = (w * (h - 1)).max(1) as f64;
    for c in 0..3 {
        out[30 + c] = grad_h[c] / pairs_h;
        out[33 + c] = grad_v[c] / pairs_v;
    }
    out[36] = dark as f64 / n;
    out[37] = 1.0;
    out
}

/// Seeded random projection of the patch descriptor. Stand-in for a real
/// foundation-model encoder.
#[derive(Clone, Debug)]
pub struct ToyExtractor {
    out_dim: usize,
    projection: Vec<f64>,
}

impl ToyExtractor {
    pub fn new(out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim < 8 {
            return Err(Error::invalid(format!("embedding dimension {out_dim} < 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (DESCRIPTOR_LEN as f64).sqrt();
        let projection = (0..out_dim * DESCRIPTOR_LEN)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self { out_dim, projection })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn embed(&self, patch: &RasterImage) -> Vec<f64> {
        let d = patch_descriptor(patch);
        self.projection.chunks_exact(DESCRIPTOR_LEN).map(|row| crate::linalg::dot(row, &d)).collect()
    }
}

pub fn toy_embed(patch: &RasterImage, out_dim: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(ToyExtractor::new(out_dim, seed)?.embed(patch))
}
