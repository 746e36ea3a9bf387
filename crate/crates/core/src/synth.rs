//! Procedural map-like sheets with exact ground-truth masks.
//!
//! Wood regions are filled with clusters of small ink circles, settlement
//! regions with a jittered dot grid and hatched blocks, and the whole sheet
//! carries paper noise and thin line work that belongs to neither class.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::draw;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{ClassName, GroundTruthMask, SheetId};

/// Closed polygon in pixel coordinates `(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon(pub Vec<(f64, f64)>);

impl Polygon {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    /// Pixels whose centres fall inside the polygon (even-odd rule).
    pub fn rasterize(&self, height: usize, width: usize) -> Array2<bool> {
        let mut mask = Array2::from_elem((height, width), false);
        let pts = &self.0;
        if pts.len() < 3 {
            return mask;
        }
        let mut xs = Vec::new();
        for y in 0..height {
            let yc = y as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                if (a.1 <= yc) != (b.1 <= yc) {
                    xs.push(a.0 + (yc - a.1) / (b.1 - a.1) * (b.0 - a.0));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for pair in xs.chunks_exact(2) {
                let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for x in start..end {
                    mask[[y, x]] = true;
                }
            }
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    /// Expected wood circle clusters per 10 000 px².
    #[serde(default = "d_wood_density")]
    pub wood_cluster_density: f64,
    #[serde(default = "d_wood_radius")]
    pub wood_circle_radius: f64,
    /// Spacing of the settlement dot grid in pixels.
    #[serde(default = "d_dot_spacing")]
    pub settlement_dot_spacing: f64,
    /// Hatched blocks per 10 000 px² of settlement.
    #[serde(default = "d_block_density")]
    pub settlement_block_density: f64,
    /// Background lines per 1000 px of sheet side.
    #[serde(default = "d_lines")]
    pub line_density: f64,
    /// Peak-to-peak paper noise in 8-bit levels.
    #[serde(default = "d_noise")]
    pub noise_amplitude: f64,
}

fn d_wood_density() -> f64 {
    6.0
}
fn d_wood_radius() -> f64 {
    3.0
}
fn d_dot_spacing() -> f64 {
    7.0
}
fn d_block_density() -> f64 {
    1.5
}
fn d_lines() -> f64 {
    4.0
}
fn d_noise() -> f64 {
    16.0
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            wood_cluster_density: d_wood_density(),
            wood_circle_radius: d_wood_radius(),
            settlement_dot_spacing: d_dot_spacing(),
            settlement_block_density: d_block_density(),
            line_density: d_lines(),
            noise_amplitude: d_noise(),
        }
    }
}

const PAPER: [f64; 3] = [236.0, 229.0, 211.0];
const INK: Rgb<u8> = Rgb([38, 36, 34]);
const WOOD_INK: Rgb<u8> = Rgb([44, 70, 40]);
const LINE_INK: Rgb<u8> = Rgb([96, 74, 56]);

pub struct SyntheticSheet {
    pub raster: RgbImage,
    pub masks: Vec<GroundTruthMask>,
}

impl SyntheticSheet {
    pub fn mask(&self, class: ClassName) -> &GroundTruthMask {
        self.masks
            .iter()
            .find(|m| m.class_name == class)
            .expect("one mask per class")
    }
}

/// Render a `size_px`×`size_px` sheet. Regions of different classes must not overlap.
pub fn generate_sheet(
    sheet: &SheetId,
    seed: u64,
    size_px: usize,
    regions: &[(ClassName, Polygon)],
    texture: &TextureConfig,
) -> Result<SyntheticSheet> {
    if size_px == 0 {
        return Err(Error::InvalidArgument("sheet size must be positive".into()));
    }
    for (class, poly) in regions {
        if poly.0.len() < 3 {
            return Err(Error::Validation(format!("{class} polygon has fewer than 3 vertices")));
        }
        let limit = size_px as f64;
        if poly.0.iter().any(|&(x, y)| !(0.0..=limit).contains(&x) || !(0.0..=limit).contains(&y)) {
            return Err(Error::Validation(format!("{class} polygon leaves the sheet")));
        }
    }
    let mut masks: Vec<GroundTruthMask> = ClassName::ALL
        .iter()
        .map(|&c| GroundTruthMask {
            sheet: sheet.clone(),
            class_name: c,
            mask: Array2::from_elem((size_px, size_px), false),
        })
        .collect();
    for (class, poly) in regions {
        let r = poly.rasterize(size_px, size_px);
        let m = masks.iter_mut().find(|m| m.class_name == *class).expect("all classes");
        m.mask.zip_mut_with(&r, |a, &b| *a |= b);
    }
    let overlap = masks[0]
        .mask
        .iter()
        .zip(masks[1].mask.iter())
        .any(|(&a, &b)| a && b);
    if overlap {
        return Err(Error::Validation("regions of different classes overlap".into()));
    }

    let rng = Rng::new(seed);
    let mut raster = paper(size_px, texture.noise_amplitude, &mut rng.fork(1));
    background_lines(&mut raster, texture, &mut rng.fork(2));
    let wood = &masks[0].mask;
    let settlement = &masks[1].mask;
    wood_texture(&mut raster, wood, texture, &mut rng.fork(3));
    settlement_texture(&mut raster, settlement, texture, &mut rng.fork(4));
    Ok(SyntheticSheet { raster, masks })
}

fn paper(size: usize, amplitude: f64, rng: &mut Rng) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |_, _| {
        let n = (rng.uniform() - 0.5) * amplitude;
        Rgb(PAPER.map(|c| (c + n).clamp(0.0, 255.0) as u8))
    })
}

fn background_lines(img: &mut RgbImage, texture: &TextureConfig, rng: &mut Rng) {
    let size = img.width() as f64;
    let count = (texture.line_density * size / 1000.0).round() as usize;
    for _ in 0..count {
        // Polyline wandering across the sheet, like a road or contour.
        let mut p = (rng.uniform() * size, rng.uniform() * size);
        let mut heading = rng.uniform() * std::f64::consts::TAU;
        let segments = 8 + rng.below(8);
        let thickness = 1.0 + rng.uniform();
        for _ in 0..segments {
            heading += rng.normal(0.0, 0.35);
            let step = 40.0 + rng.uniform() * 80.0;
            let q = (p.0 + heading.cos() * step, p.1 + heading.sin() * step);
            draw::line(img, p, q, thickness, LINE_INK);
            p = q;
        }
    }
}

fn paint_masked(img: &mut RgbImage, mask: &Array2<bool>, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (y as usize) < mask.nrows() && (x as usize) < mask.ncols() && mask[[y as usize, x as usize]] {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn mask_area(mask: &Array2<bool>) -> usize {
    mask.iter().filter(|&&b| b).count()
}

fn wood_texture(img: &mut RgbImage, mask: &Array2<bool>, texture: &TextureConfig, rng: &mut Rng) {
    let area = mask_area(mask);
    if area == 0 {
        return;
    }
    let (h, w) = mask.dim();
    // Sample cluster centres over the sheet, keep those landing in the region.
    let total = (texture.wood_cluster_density * (h * w) as f64 / 1e4).round() as usize;
    for _ in 0..total {
        let cx = rng.uniform() * w as f64;
        let cy = rng.uniform() * h as f64;
        let circles = 3 + rng.below(5);
        let inside = mask[[cy as usize, cx as usize]];
        for _ in 0..circles {
            let x = cx + rng.normal(0.0, 6.0);
            let y = cy + rng.normal(0.0, 6.0);
            let r = (texture.wood_circle_radius + rng.normal(0.0, 0.6)).max(1.5);
            if inside {
                draw::ring_with(x, y, r, 1.2, |px, py| paint_masked(img, mask, px, py, WOOD_INK));
            }
        }
    }
}

fn settlement_texture(img: &mut RgbImage, mask: &Array2<bool>, texture: &TextureConfig, rng: &mut Rng) {
    let area = mask_area(mask);
    if area == 0 {
        return;
    }
    let (h, w) = mask.dim();
    let s = texture.settlement_dot_spacing.max(2.0);
    let mut y = s / 2.0;
    while y < h as f64 {
        let mut x = s / 2.0;
        while x < w as f64 {
            let jx = x + rng.normal(0.0, 0.5);
            let jy = y + rng.normal(0.0, 0.5);
            draw::disc_with(jx, jy, 1.1, |px, py| paint_masked(img, mask, px, py, INK));
            x += s;
        }
        y += s;
    }
    let blocks = (texture.settlement_block_density * (h * w) as f64 / 1e4).round() as usize;
    for _ in 0..blocks {
        let bx = rng.uniform() * w as f64;
        let by = rng.uniform() * h as f64;
        let bw = 10.0 + rng.uniform() * 16.0;
        let bh = 10.0 + rng.uniform() * 16.0;
        if !mask[[by as usize, bx as usize]] {
            continue;
        }
        // outline plus diagonal hatching
        let corners = [(bx, by), (bx + bw, by), (bx + bw, by + bh), (bx, by + bh)];
        for i in 0..4 {
            let (a, b) = (corners[i], corners[(i + 1) % 4]);
            draw::line_with(a, b, 1.2, |px, py| paint_masked(img, mask, px, py, INK));
        }
        let mut t = 0.0;
        while t < bw + bh {
            let a = (bx + t.min(bw), by + (t - bw).max(0.0));
            let b = (bx + (t - bh).max(0.0), by + t.min(bh));
            draw::line_with(a, b, 1.0, |px, py| paint_masked(img, mask, px, py, INK));
            t += 3.0;
        }
    }
}

/// Star-shaped random blob of roughly `radius` around `centre`.
pub fn blob(centre: (f64, f64), radius: f64, rng: &mut Rng) -> Polygon {
    let n = 14;
    let phase = rng.uniform() * std::f64::consts::TAU;
    Polygon(
        (0..n)
            .map(|i| {
                let a = phase + i as f64 / n as f64 * std::f64::consts::TAU;
                let r = radius * (0.7 + 0.3 * rng.uniform());
                (centre.0 + r * a.cos(), centre.1 + r * a.sin())
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    #[serde(default = "d_blobs")]
    pub wood_blobs: usize,
    #[serde(default = "d_blobs")]
    pub settlement_blobs: usize,
    /// Blob radius range as fractions of the sheet side.
    #[serde(default = "d_rmin")]
    pub min_radius: f64,
    #[serde(default = "d_rmax")]
    pub max_radius: f64,
}

fn d_blobs() -> usize {
    3
}
fn d_rmin() -> f64 {
    0.08
}
fn d_rmax() -> f64 {
    0.17
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            wood_blobs: d_blobs(),
            settlement_blobs: d_blobs(),
            min_radius: d_rmin(),
            max_radius: d_rmax(),
        }
    }
}

/// Random non-overlapping wood and settlement blobs inside a square sheet.
pub fn random_layout(seed: u64, size_px: usize, layout: &LayoutConfig) -> Vec<(ClassName, Polygon)> {
    let mut rng = Rng::new(seed).fork(7);
    let size = size_px as f64;
    let mut placed: Vec<((f64, f64), f64)> = Vec::new();
    let mut out = Vec::new();
    let wanted = std::iter::repeat(ClassName::Wood)
        .take(layout.wood_blobs)
        .chain(std::iter::repeat(ClassName::Settlement).take(layout.settlement_blobs));
    for class in wanted {
        for _ in 0..200 {
            let r = size * rng.uniform_range(layout.min_radius, layout.max_radius);
            let c = (rng.uniform_range(r, size - r), rng.uniform_range(r, size - r));
            let clear = placed.iter().all(|&(p, pr)| {
                let d = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt();
                d > pr + r + 4.0
            });
            if clear {
                placed.push((c, r));
                out.push((class, blob(c, r, &mut rng)));
                break;
            }
        }
    }
    out
}

/// Legend strip with a labelled texture sample per class, `height` pixels tall.
pub fn legend(height: u32, texture: &TextureConfig, seed: u64) -> RgbImage {
    let width = 192u32;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let half = height / 2;
    for (i, class) in ClassName::ALL.iter().enumerate() {
        let top = i as u32 * half;
        draw::text(&mut img, 8, top as i64 + 8, class.title(), 2, Rgb([0, 0, 0]));
        let sw = (width - 16) as usize;
        let sh = half.saturating_sub(40).max(8) as usize;
        let side = sw.max(sh);
        let regions = [(*class, Polygon::rect(0.0, 0.0, side as f64, side as f64))];
        let quiet = TextureConfig {
            line_density: 0.0,
            noise_amplitude: 0.0,
            ..texture.clone()
        };
        let sample = generate_sheet(&SheetId("legend".into()), seed + i as u64, side, &regions, &quiet)
            .expect("legend regions are valid");
        for y in 0..sh {
            for x in 0..sw {
                let p = *sample.raster.get_pixel(x as u32, y as u32);
                img.put_pixel(8 + x as u32, top + 30 + y as u32, p);
            }
        }
    }
    img
}
