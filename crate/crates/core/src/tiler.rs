//! Cutting sheet rasters into patch files and reading ground-truth masks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::types::{tile_grid, ClassName, GroundTruthMask, PatchId, PixelRect, SheetId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patch_id: PatchId,
    pub row: usize,
    pub col: usize,
    pub rect: PixelRect,
    /// File name relative to the manifest's directory.
    pub file: String,
    pub sheet_width: usize,
    pub sheet_height: usize,
}

#[derive(Debug, Clone)]
pub struct Tiling {
    pub sheet: SheetId,
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

pub fn manifest_path(dir: &Path, sheet: &SheetId) -> PathBuf {
    dir.join(format!("{sheet}.manifest.jsonl"))
}

pub fn patch_file_name(id: &PatchId) -> String {
    format!("{id}.png")
}

pub fn mask_file_name(sheet: &SheetId, class: ClassName) -> String {
    format!("{sheet}_{class}.png")
}

/// Every patch listed by the manifests in `dir`, with the full path of its image.
pub fn index_patches(dir: &Path) -> Result<BTreeMap<PatchId, (PathBuf, ManifestEntry)>> {
    let mut out = BTreeMap::new();
    for (_, entries) in read_manifests(dir)? {
        for e in entries {
            let path = dir.join(&e.file);
            out.insert(e.patch_id.clone(), (path, e));
        }
    }
    Ok(out)
}

/// Read a raster and reject anything that is not 3-channel.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgb32F(_) => Ok(img.to_rgb8()),
        other => Err(Error::Format(format!(
            "{}: expected 3 channels, found {}",
            path.display(),
            other.color().channel_count()
        ))),
    }
}

/// Tile a sheet raster file into `tile_px` squares written to `out_dir`.
pub fn ingest_sheet(input: &Path, sheet: &SheetId, tile_px: usize, out_dir: &Path) -> Result<Tiling> {
    let raster = read_rgb(input)?;
    tile_raster(&raster, sheet, tile_px, out_dir)
}

/// Tile an in-memory raster. Tiles are lossless PNGs named `{sheet}_{row}_{col}.png`.
pub fn tile_raster(raster: &RgbImage, sheet: &SheetId, tile_px: usize, out_dir: &Path) -> Result<Tiling> {
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let tiles = tile_grid(h, w, tile_px)?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut warnings = Vec::new();
    if tiles.is_empty() {
        let msg = format!("sheet {sheet} ({w}x{h}) is smaller than one {tile_px}px tile");
        log::warn!("{msg}");
        warnings.push(msg);
    } else if w % tile_px != 0 || h % tile_px != 0 {
        let msg = format!(
            "sheet {sheet}: discarding {}px right and {}px bottom margins",
            w % tile_px,
            h % tile_px
        );
        log::info!("{msg}");
        warnings.push(msg);
    }
    let mut entries = Vec::with_capacity(tiles.len());
    for t in tiles {
        let id = PatchId::new(sheet.clone(), t.row as u32, t.col as u32);
        let crop = image::imageops::crop_imm(
            raster,
            t.rect.x as u32,
            t.rect.y as u32,
            t.rect.width as u32,
            t.rect.height as u32,
        )
        .to_image();
        let file = patch_file_name(&id);
        let path = out_dir.join(&file);
        crop.save_with_format(&path, image::ImageFormat::Png)?;
        entries.push(ManifestEntry {
            patch_id: id,
            row: t.row,
            col: t.col,
            rect: t.rect,
            file,
            sheet_width: w,
            sheet_height: h,
        });
    }
    let manifest_path = manifest_path(out_dir, sheet);
    write_manifest(&manifest_path, &entries)?;
    Ok(Tiling {
        sheet: sheet.clone(),
        manifest_path,
        entries,
        warnings,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::fs::File::create(path).at(path)?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(f, "{line}").at(path)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// All manifests in a directory, sorted by file name.
pub fn read_manifests(dir: &Path) -> Result<Vec<(PathBuf, Vec<ManifestEntry>)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".manifest.jsonl"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_manifest(&p).map(|m| (p, m)))
        .collect()
}

/// Read a mask raster; any non-zero colour channel marks foreground.
/// `expected` is the `(height, width)` of the sheet it must align with.
pub fn ingest_mask(
    path: &Path,
    sheet: &SheetId,
    class_name: ClassName,
    expected: Option<(usize, usize)>,
) -> Result<GroundTruthMask> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if let Some((eh, ew)) = expected {
        if (eh, ew) != (h, w) {
            return Err(Error::Validation(format!(
                "mask {}x{} does not match sheet {eh}x{ew}",
                h, w
            )));
        }
    }
    let rgba = img.to_rgba16();
    let data = rgba
        .pixels()
        .map(|p| p.0[0] != 0 || p.0[1] != 0 || p.0[2] != 0)
        .collect();
    let mask = Array2::from_shape_vec((h, w), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(GroundTruthMask {
        sheet: sheet.clone(),
        class_name,
        mask,
    })
}

pub fn save_mask(mask: &GroundTruthMask, path: &Path) -> Result<()> {
    mask.to_luma8().save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
