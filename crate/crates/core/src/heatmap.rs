//! Attention overlays on downsampled slides and top-attention patch export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milnet::AttentionResult;
use crate::tiler::{PatchGrid, RasterImage};

/// Viridis anchors at 0.0, 0.1, ..., 1.0 (purple low, yellow high).
pub const VIRIDIS: [[u8; 3]; 11] = [
    [0x44, 0x01, 0x54],
    [0x48, 0x24, 0x75],
    [0x41, 0x44, 0x87],
    [0x35, 0x5f, 0x8d],
    [0x2a, 0x78, 0x8e],
    [0x21, 0x91, 0x8c],
    [0x22, 0xa8, 0x84],
    [0x44, 0xbf, 0x70],
    [0x7a, 0xd1, 0x51],
    [0xbd, 0xdf, 0x26],
    [0xfd, 0xe7, 0x25],
];

/// Linear interpolation between the viridis anchors; `t` is clamped to [0, 1].
pub fn viridis_f64(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| a[c] as f64 + f * (b[c] as f64 - a[c] as f64))
}

pub fn viridis(t: f64) -> [u8; 3] {
    viridis_f64(t).map(|v| v.round() as u8)
}

/// `opacity · color + (1 − opacity) · source`, rounded per channel.
pub fn alpha_blend(color: [u8; 3], source: [u8; 3], opacity: f64) -> [u8; 3] {
    [0, 1, 2].map(|c| (opacity * color[c] as f64 + (1.0 - opacity) * source[c] as f64).round() as u8)
}

/// Per-slide min-max scaling. A constant field maps to the colormap
/// midpoint, except a single patch, which carries all the attention and
/// maps to the top.
pub fn normalize_attention(alpha: &[f64]) -> Vec<f64> {
    let lo = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if alpha.len() == 1 {
        return vec![1.0];
    }
    if !(hi > lo) {
        return vec![0.5; alpha.len()];
    }
    alpha.iter().map(|a| (a - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    /// Output is the input downsampled by this factor.
    pub scale: u32,
    pub opacity: f64,
    /// Attention branch to draw; `None` draws the predicted class.
    pub class: Option<usize>,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self { scale: 16, opacity: 0.5, class: None }
    }
}

impl HeatmapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::invalid("heatmap scale must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::invalid("heatmap opacity must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// The attention branch selected by `class` (or the predicted class).
pub fn select_attention(attn: &AttentionResult, class: Option<usize>) -> Result<&[f64]> {
    let c = class.unwrap_or(attn.predicted);
    attn.attention
        .get(c)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::invalid(format!("class {c} has no attention branch")))
}

fn check_counts(grid: &PatchGrid, alpha: &[f64]) -> Result<()> {
    if grid.len() != alpha.len() {
        return Err(Error::invalid(format!(
            "patch grid has {} patches but attention has {} entries",
            grid.len(),
            alpha.len()
        )));
    }
    if grid.is_empty() {
        return Err(Error::EmptyBag);
    }
    Ok(())
}

/// Downsamples `image` by `spec.scale` and fills each patch footprint with
/// its colormapped attention, blended at `spec.opacity`. Pixels outside every
/// footprint keep the downsampled source.
pub fn render_attention(
    image: &RasterImage,
    grid: &PatchGrid,
    attn: &AttentionResult,
    spec: &HeatmapSpec,
) -> Result<RasterImage> {
    spec.validate()?;
    let alpha = select_attention(attn, spec.class)?;
    check_counts(grid, alpha)?;
    let mut out = image.downsample(spec.scale)?;
    let norm = normalize_attention(alpha);
    let s = spec.scale;
    // A fixed drawing order keeps the image independent of patch order.
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (grid.coords[a], grid.coords[b]);
        (ca[1], ca[0]).cmp(&(cb[1], cb[0])).then(norm[a].total_cmp(&norm[b]))
    });
    for i in order {
        let [x, y] = grid.coords[i];
        let color = viridis(norm[i]);
        let (x0, y0) = (x / s, y / s);
        let x1 = ((x + grid.patch_size) / s).max(x0 + 1).min(out.width());
        let y1 = ((y + grid.patch_size) / s).max(y0 + 1).min(out.height());
        for py in y0..y1 {
            for px in x0..x1 {
                out.set_pixel(px, py, alpha_blend(color, out.pixel(px, py), spec.opacity));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub x: u32,
    pub y: u32,
    pub alpha: f32,
    pub rank: u32,
}

#[derive(Clone, Debug)]
pub struct TopPatch {
    pub meta: PatchMeta,
    pub crop: RasterImage,
}

/// Indices of the `k` highest-attention patches; ties go to the earlier
/// patch in row-major (y, then x) order.
pub fn top_attention_indices(grid: &PatchGrid, alpha: &[f64], k: usize) -> Result<Vec<usize>> {
    check_counts(grid, alpha)?;
    if k == 0 || k > alpha.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", alpha.len())));
    }
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (grid.coords[a], grid.coords[b]);
        alpha[b].total_cmp(&alpha[a]).then((ca[1], ca[0]).cmp(&(cb[1], cb[0])))
    });
    order.truncate(k);
    Ok(order)
}

/// Full-resolution crops of the `k` highest-attention patches.
pub fn top_attention_patches(
    image: &RasterImage,
    grid: &PatchGrid,
    attn: &AttentionResult,
    class: Option<usize>,
    k: usize,
) -> Result<Vec<TopPatch>> {
    let alpha = select_attention(attn, class)?;
    top_attention_indices(grid, alpha, k)?
        .into_iter()
        .enumerate()
        .map(|(r, i)| {
            let [x, y] = grid.coords[i];
            Ok(TopPatch {
                meta: PatchMeta { x, y, alpha: alpha[i] as f32, rank: r as u32 + 1 },
                crop: image.crop(x, y, grid.patch_size)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::luma;

    fn attn(alpha: Vec<f64>) -> AttentionResult {
        AttentionResult {
            attention: vec![alpha.clone(), alpha.clone(), alpha],
            scores: vec![0.0, 1.0, 0.0],
            probabilities: vec![0.2, 0.6, 0.2],
            predicted: 1,
        }
    }

    fn grid(coords: Vec<[u32; 2]>) -> PatchGrid {
        PatchGrid { patch_size: 8, coords, magnification_label: None }
    }

    fn gradient_image() -> RasterImage {
        let mut img = RasterImage::filled(32, 16, [0, 0, 0]).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                img.set_pixel(x, y, [(x * 7) as u8, (y * 13) as u8, 90]);
            }
        }
        img
    }

    #[test]
    fn colormap_endpoints_and_monotone_luma() {
        assert_eq!(viridis(0.0), VIRIDIS[0]);
        assert_eq!(viridis(0.5), VIRIDIS[5]);
        assert_eq!(viridis(1.0), VIRIDIS[10]);
        let lum = |c: [f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        for i in 0..1000 {
            let (a, b) = (i as f64 / 1000.0, (i + 1) as f64 / 1000.0);
            assert!(lum(viridis_f64(b)) >= lum(viridis_f64(a)));
            assert!(luma(viridis(b)) + 1.0 >= luma(viridis(a)));
        }
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_attention(&[0.25; 4]), vec![0.5; 4]);
        assert_eq!(normalize_attention(&[1.0]), vec![1.0]);
        let n = normalize_attention(&[0.1, 0.3, 0.6]);
        assert_eq!((n[0], n[2]), (0.0, 1.0));
        assert!((n[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_patch_at_maximum() {
        let img = RasterImage::filled(16, 16, [10, 20, 30]).unwrap();
        let spec = HeatmapSpec { scale: 1, opacity: 1.0, class: None };
        let out = render_attention(&img, &grid(vec![[0, 0]]), &attn(vec![1.0]), &spec).unwrap();
        assert_eq!(out.pixel(3, 3), VIRIDIS[10]);
        assert_eq!(out.pixel(12, 12), [10, 20, 30]);
    }

    #[test]
    fn center_pixel_matches_hand_blend() {
        let img = gradient_image();
        let g = grid(vec![[0, 0], [8, 0], [16, 8]]);
        let spec = HeatmapSpec { scale: 2, opacity: 0.4, class: None };
        let out = render_attention(&img, &g, &attn(vec![0.2, 0.5, 0.3]), &spec).unwrap();
        assert_eq!((out.width(), out.height()), (16, 8));
        // Patch 2 (x=16, y=8) has normalized attention (0.3-0.2)/0.3.
        let src = img.downsample(2).unwrap().pixel(10, 6);
        let t: f64 = (0.3 - 0.2) / (0.5 - 0.2);
        let color = viridis(t);
        let expected = [0, 1, 2].map(|c| (0.4 * color[c] as f64 + 0.6 * src[c] as f64).round() as u8);
        assert_eq!(out.pixel(10, 6), expected);
        // Outside every footprint.
        assert_eq!(out.pixel(1, 6), img.downsample(2).unwrap().pixel(1, 6));
    }

    #[test]
    fn rendering_ignores_patch_order() {
        let img = gradient_image();
        let spec = HeatmapSpec { scale: 4, opacity: 0.7, class: Some(0) };
        let a = render_attention(&img, &grid(vec![[0, 0], [8, 0], [0, 8]]), &attn(vec![0.1, 0.7, 0.2]), &spec).unwrap();
        let b = render_attention(&img, &grid(vec![[0, 8], [0, 0], [8, 0]]), &attn(vec![0.2, 0.1, 0.7]), &spec).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn render_errors() {
        let img = gradient_image();
        let spec = HeatmapSpec::default();
        assert!(render_attention(&img, &grid(vec![[0, 0]]), &attn(vec![0.5, 0.5]), &spec).is_err());
        let bad = HeatmapSpec { opacity: 1.5, ..HeatmapSpec { scale: 1, opacity: 0.0, class: None } };
        assert!(render_attention(&img, &grid(vec![[0, 0]]), &attn(vec![1.0]), &bad).is_err());
    }

    #[test]
    fn top_patches_sorted_with_row_major_ties() {
        let img = gradient_image();
        let g = grid(vec![[8, 0], [0, 8], [0, 0], [16, 0]]);
        let a = attn(vec![0.3, 0.3, 0.1, 0.3]);
        let top = top_attention_patches(&img, &g, &a, None, 4).unwrap();
        let coords: Vec<[u32; 2]> = top.iter().map(|t| [t.meta.x, t.meta.y]).collect();
        assert_eq!(coords, vec![[8, 0], [16, 0], [0, 8], [0, 0]]);
        assert_eq!(top.iter().map(|t| t.meta.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(top[0].crop.pixel(0, 0), img.pixel(8, 0));

        let one_hot = attn(vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(top_attention_indices(&g, &one_hot.attention[1], 1).unwrap(), vec![2]);
        assert!(top_attention_patches(&img, &g, &a, None, 0).is_err());
        let json = serde_json::to_string(&top[0].meta).unwrap();
        assert_eq!(json, r#"{"x":8,"y":0,"alpha":0.3,"rank":1}"#);
    }
}
