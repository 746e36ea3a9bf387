//! Shared domain types and tiling geometry.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length in pixels of the image region a single token covers.
pub const TOKEN_PX: usize = 64;

/// Default side length of a labelled patch.
pub const PATCH_PX: usize = 384;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SheetId(pub String);

impl SheetId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains(['/', '\\', '.']) || id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad sheet id {id:?}")));
        }
        Ok(SheetId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SheetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A patch of the tiling grid of one sheet. Textual form is `{sheet}_{row}_{col}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchId {
    pub sheet: SheetId,
    pub row: u32,
    pub col: u32,
}

impl PatchId {
    pub fn new(sheet: SheetId, row: u32, col: u32) -> Self {
        PatchId { sheet, row, col }
    }
}

impl fmt::Display for PatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.sheet, self.row, self.col)
    }
}

impl FromStr for PatchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad patch id {s:?}"));
        let mut parts = s.rsplitn(3, '_');
        let col = parts.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let row = parts.next().and_then(|r| r.parse().ok()).ok_or_else(bad)?;
        let sheet = parts.next().ok_or_else(bad)?;
        Ok(PatchId::new(SheetId::new(sheet).map_err(|_| bad())?, row, col))
    }
}

impl Serialize for PatchId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PatchId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassName {
    Wood,
    Settlement,
}

impl ClassName {
    pub const ALL: [ClassName; 2] = [ClassName::Wood, ClassName::Settlement];

    /// Lower-case key used in file names, URLs and label records.
    pub fn key(self) -> &'static str {
        match self {
            ClassName::Wood => "wood",
            ClassName::Settlement => "settlement",
        }
    }

    /// Capitalised form used in prompts and answers.
    pub fn title(self) -> &'static str {
        match self {
            ClassName::Wood => "Wood",
            ClassName::Settlement => "Settlement",
        }
    }
}

impl fmt::Display for ClassName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ClassName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wood" => Ok(ClassName::Wood),
            "settlement" => Ok(ClassName::Settlement),
            _ => Err(Error::InvalidArgument(format!("unknown class {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Llm,
    Human,
}

/// Image-level binary label of one class on one patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseLabel {
    pub patch: PatchId,
    pub class_name: ClassName,
    pub present: bool,
    pub source: LabelSource,
    pub reason: Option<String>,
}

/// An axis-aligned pixel rectangle on a sheet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub rect: PixelRect,
}

/// All full `tile`×`tile` squares of a `height_px`×`width_px` raster in row-major order.
///
/// Right and bottom remainders that do not fill a whole tile are dropped.
pub fn tile_grid(height_px: usize, width_px: usize, tile: usize) -> Result<Vec<Tile>> {
    if height_px == 0 || width_px == 0 || tile == 0 {
        return Err(Error::InvalidArgument(format!(
            "tile_grid needs positive sizes, got {height_px}x{width_px} tile {tile}"
        )));
    }
    let rows = height_px / tile;
    let cols = width_px / tile;
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            out.push(Tile {
                row,
                col,
                rect: PixelRect {
                    x: col * tile,
                    y: row * tile,
                    width: tile,
                    height: tile,
                },
            });
        }
    }
    Ok(out)
}

/// An RGB patch with channel values in `[0,1]`, stored height × width × 3.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    pub id: PatchId,
    pixels: Array3<f32>,
}

impl PatchImage {
    pub fn new(id: PatchId, pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % TOKEN_PX != 0 || w % TOKEN_PX != 0 {
            return Err(Error::Shape(format!(
                "patch {h}x{w} is not a positive multiple of {TOKEN_PX}"
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("pixel values must lie in [0,1]".into()));
        }
        Ok(PatchImage { id, pixels })
    }

    /// Normalises 8-bit channels by 255.
    pub fn from_rgb8(id: PatchId, img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f32> = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        let pixels = Array3::from_shape_vec((h, w, 3), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(id, pixels)
    }

    pub fn load(id: PatchId, path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(id, &img)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width() as u32, self.height() as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

/// Per-token weights for one patch and class, `rows × cols`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub patch: PatchId,
    pub class_name: ClassName,
    pub rows: usize,
    pub cols: usize,
    pub token_pixels: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(
        patch: PatchId,
        class_name: ClassName,
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let map = AttentionMap {
            patch,
            class_name,
            rows,
            cols,
            token_pixels: TOKEN_PX,
            weights,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.rows * self.cols {
            return Err(Error::Shape(format!(
                "{} weights for a {}x{} map",
                self.weights.len(),
                self.rows,
                self.cols
            )));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Validation("attention weights must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.weights.clone())
            .expect("validated shape")
    }

    /// Pixel rectangle of the source patch on its sheet.
    pub fn sheet_rect(&self) -> PixelRect {
        let (h, w) = (self.rows * self.token_pixels, self.cols * self.token_pixels);
        PixelRect {
            x: self.patch.col as usize * w,
            y: self.patch.row as usize * h,
            width: w,
            height: h,
        }
    }
}

/// Full-resolution foreground mask of one class on one sheet.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    pub sheet: SheetId,
    pub class_name: ClassName,
    pub mask: Array2<bool>,
}

impl GroundTruthMask {
    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn crop(&self, rect: &PixelRect) -> Result<Array2<bool>> {
        if rect.y + rect.height > self.height() || rect.x + rect.width > self.width() {
            return Err(Error::Shape(format!(
                "rect {rect:?} outside {}x{} mask",
                self.height(),
                self.width()
            )));
        }
        Ok(self
            .mask
            .slice(ndarray::s![rect.y..rect.y + rect.height, rect.x..rect.x + rect.width])
            .to_owned())
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width() as u32, self.height() as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_grid_exact_division() {
        let tiles = tile_grid(768, 1152, 384).unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!(tiles[4].row, 1);
        assert_eq!(tiles[4].col, 1);
        assert_eq!(tiles[4].rect, PixelRect { x: 384, y: 384, width: 384, height: 384 });
    }

    #[test]
    fn tile_grid_token_count() {
        assert_eq!(tile_grid(384, 384, 64).unwrap().len(), 36);
    }

    #[test]
    fn tile_grid_drops_margins() {
        let tiles = tile_grid(400, 400, 384).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].rect.x, 0);
        assert_eq!(tiles[0].rect.y, 0);
        assert!(tile_grid(383, 383, 384).unwrap().is_empty());
    }

    #[test]
    fn tile_grid_rejects_zero() {
        assert!(matches!(tile_grid(0, 10, 2), Err(Error::InvalidArgument(_))));
        assert!(matches!(tile_grid(10, 10, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn patch_id_round_trip() {
        let id = PatchId::new(SheetId::new("sheet_3922").unwrap(), 4, 12);
        assert_eq!(id.to_string(), "sheet_3922_4_12");
        assert_eq!("sheet_3922_4_12".parse::<PatchId>().unwrap(), id);
        assert!("nope".parse::<PatchId>().is_err());
        assert!("a_-1_2".parse::<PatchId>().is_err());
    }

    #[test]
    fn patch_image_rejects_bad_shapes() {
        let id = PatchId::new(SheetId::new("s").unwrap(), 0, 0);
        assert!(PatchImage::new(id.clone(), Array3::zeros((64, 64, 3))).is_ok());
        assert!(matches!(
            PatchImage::new(id.clone(), Array3::zeros((65, 64, 3))),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            PatchImage::new(id, Array3::from_elem((64, 64, 3), 1.5)),
            Err(Error::Validation(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn tile_grid_is_disjoint_and_complete(h in 1usize..300, w in 1usize..300, t in 1usize..70) {
            let tiles = tile_grid(h, w, t).unwrap();
            proptest::prop_assert_eq!(tiles.len(), (h / t) * (w / t));
            for (i, a) in tiles.iter().enumerate() {
                proptest::prop_assert!(a.rect.x + a.rect.width <= w && a.rect.y + a.rect.height <= h);
                for b in &tiles[i + 1..] {
                    proptest::prop_assert!(!a.rect.intersects(&b.rect));
                }
            }
        }
    }
}
