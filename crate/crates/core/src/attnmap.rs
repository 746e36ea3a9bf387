//! Per-token attention maps by repeated arg-max attention.
//!
//! The patch is encoded once. Each round runs attention and the head over the
//! tokens still active, records the largest weight at its grid position and
//! retires that token. After `L` rounds every position holds one weight.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::evaluator::render_overlay;
use crate::model::{Classifier, TokenGrid};
use crate::tiler::ManifestEntry;
use crate::types::{AttentionMap, ClassName, PatchId, PatchImage, SheetId};

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub map: AttentionMap,
    /// Classifier probability on the complete token grid.
    pub probability: f64,
    /// Attention/head passes run; equals the token count.
    pub forward_passes: usize,
    /// Flat token indices in the order they were retired.
    pub order: Vec<usize>,
}

/// Run the retirement rounds on an encoded grid. Returns `(weights, order, passes, probability)`.
pub fn extract_from_grid(classifier: &Classifier, grid: &TokenGrid) -> Result<(Vec<f64>, Vec<usize>, usize, f64)> {
    let mut grid = grid.clone();
    let l = grid.len();
    let mut weights = vec![f64::NAN; l];
    let mut order = Vec::with_capacity(l);
    let mut passes = 0;
    let mut probability = f64::NAN;
    while grid.active() > 0 {
        let (cls, _) = classifier.classify_tokens(&grid)?;
        passes += 1;
        if passes == 1 {
            probability = cls.probability;
        }
        let mut best: Option<usize> = None;
        for i in 0..l {
            if grid.mask()[i] && best.is_none_or(|b| cls.weights[i] > cls.weights[b]) {
                best = Some(i);
            }
        }
        let j = best.expect("at least one active token");
        debug_assert!(weights[j].is_nan());
        weights[j] = cls.weights[j].clamp(0.0, 1.0);
        order.push(j);
        grid.retire(j);
    }
    Ok((weights, order, passes, probability))
}

/// Attention map of one patch for the checkpoint's class.
pub fn extract_map(image: &PatchImage, classifier: &Classifier, class_name: ClassName) -> Result<Extraction> {
    let grid = classifier.encode(image)?;
    let (weights, order, forward_passes, probability) = extract_from_grid(classifier, &grid)?;
    let map = AttentionMap::new(image.id.clone(), class_name, grid.rows(), grid.cols(), weights)?;
    Ok(Extraction {
        map,
        probability,
        forward_passes,
        order,
    })
}

/// Which training checkpoint the pipeline extracts maps from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointChoice {
    /// State after the final epoch.
    #[default]
    Last,
    /// Lowest validation loss.
    Best,
}

impl CheckpointChoice {
    pub fn file_name(self) -> &'static str {
        match self {
            CheckpointChoice::Last => "last.ckpt",
            CheckpointChoice::Best => "best.ckpt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    #[serde(default)]
    pub checkpoint: CheckpointChoice,
    /// Patches whose probability is at or below this value get an all-zero map.
    /// `None` keeps every extracted map.
    #[serde(default = "d_gate")]
    pub gate: Option<f64>,
    /// Opacity of the colour overlay in mosaics.
    #[serde(default = "d_alpha")]
    pub overlay_alpha: f64,
}

fn d_gate() -> Option<f64> {
    Some(0.5)
}
fn d_alpha() -> f64 {
    0.5
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            checkpoint: CheckpointChoice::Last,
            gate: d_gate(),
            overlay_alpha: d_alpha(),
        }
    }
}

/// Contents of a per-patch map file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    #[serde(flatten)]
    pub map: AttentionMap,
    pub probability: f64,
    /// Whether the gate zeroed the weights.
    pub gated: bool,
}

pub fn map_file_name(patch: &PatchId, class_name: ClassName) -> String {
    format!("{patch}_{class_name}.json")
}

pub fn mosaic_file_name(sheet: &SheetId, class_name: ClassName) -> String {
    format!("{sheet}_{class_name}_mosaic.png")
}

pub fn read_map(path: &Path) -> Result<MapFile> {
    let bytes = std::fs::read(path).at(path)?;
    let f: MapFile = serde_json::from_slice(&bytes)?;
    f.map.validate()?;
    Ok(f)
}

/// All map files of one class in `dir`, sorted by patch.
pub fn read_maps(dir: &Path, class_name: ClassName) -> Result<Vec<MapFile>> {
    let suffix = format!("_{class_name}.json");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(&suffix)))
        .collect();
    paths.sort();
    let mut maps = paths.iter().map(|p| read_map(p)).collect::<Result<Vec<_>>>()?;
    maps.sort_by(|a, b| a.map.patch.cmp(&b.map.patch));
    Ok(maps)
}

#[derive(Debug, Clone)]
pub struct SheetExtraction {
    pub maps: Vec<MapFile>,
    pub mosaic_path: Option<PathBuf>,
    /// Patches whose image could not be read, with the error.
    pub skipped: Vec<(PatchId, String)>,
}

/// Extract maps for every patch of one sheet, write `{patch}_{class}.json`
/// files and a colour mosaic over the stitched patches.
pub fn extract_sheet(
    entries: &[ManifestEntry],
    patches_dir: &Path,
    classifier: &Classifier,
    class_name: ClassName,
    config: &ExtractConfig,
    out_dir: &Path,
) -> Result<SheetExtraction> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let results: Vec<(ManifestEntry, Result<(PatchImage, Extraction)>)> = entries
        .par_iter()
        .map(|e| {
            let r = PatchImage::load(e.patch_id.clone(), &patches_dir.join(&e.file))
                .and_then(|img| extract_map(&img, classifier, class_name).map(|x| (img, x)));
            (e.clone(), r)
        })
        .collect();

    let mut maps = Vec::new();
    let mut skipped = Vec::new();
    let mut tiles = Vec::new();
    for (entry, r) in results {
        match r {
            Ok((img, x)) => {
                let gated = config.gate.is_some_and(|g| x.probability <= g);
                let mut map = x.map;
                if gated {
                    map.weights.fill(0.0);
                }
                let file = MapFile {
                    map,
                    probability: x.probability,
                    gated,
                };
                let path = out_dir.join(map_file_name(&entry.patch_id, class_name));
                std::fs::write(&path, serde_json::to_vec(&file)?).at(&path)?;
                tiles.push((entry, img));
                maps.push(file);
            }
            Err(e @ (Error::Io { .. } | Error::Image(_) | Error::Format(_))) => {
                log::warn!("{}: skipped: {e}", entry.patch_id);
                skipped.push((entry.patch_id.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }

    let mosaic_path = match tiles.first() {
        Some((first, _)) => {
            let mut base = RgbImage::from_pixel(
                first.sheet_width as u32,
                first.sheet_height as u32,
                image::Rgb([255, 255, 255]),
            );
            for (e, img) in &tiles {
                image::imageops::replace(&mut base, &img.to_rgb8(), e.rect.x as i64, e.rect.y as i64);
            }
            let refs: Vec<&AttentionMap> = maps.iter().map(|m| &m.map).collect();
            let mosaic = render_overlay(&base, &refs, config.overlay_alpha);
            let path = out_dir.join(mosaic_file_name(&first.patch_id.sheet, class_name));
            mosaic.save_with_format(&path, image::ImageFormat::Png)?;
            Some(path)
        }
        None => None,
    };
    Ok(SheetExtraction {
        maps,
        mosaic_path,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;
    use crate::tiler::tile_raster;
    use ndarray::Array3;

    fn classifier(input: [usize; 2], seed: u64) -> Classifier {
        let cfg = ModelConfig {
            input_px: input,
            widths: vec![2, 2, 3, 3, 4, 4],
            ..ModelConfig::default()
        };
        Classifier::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> PatchImage {
        let mut rng = Rng::new(seed);
        PatchImage::new(
            PatchId::new(SheetId::new("s").unwrap(), 0, 0),
            Array3::from_shape_fn((h, w, 3), |_| rng.uniform() as f32),
        )
        .unwrap()
    }

    #[test]
    fn single_token_map_is_one() {
        let x = extract_map(&image(64, 64, 1), &classifier([64, 64], 1), ClassName::Wood).unwrap();
        assert_eq!(x.map.weights, vec![1.0]);
        assert_eq!(x.forward_passes, 1);
    }

    #[test]
    fn coverage_and_last_weight() {
        let clf = classifier([128, 256], 3);
        let x = extract_map(&image(128, 256, 2), &clf, ClassName::Settlement).unwrap();
        assert_eq!(x.forward_passes, 8);
        let mut seen = x.order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert_eq!(x.map.weights[*x.order.last().unwrap()], 1.0);
        assert!(x.map.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let mut clf = classifier([128, 128], 4);
        // Zero key projection: every round is uniform, so retirement is in index order.
        clf.params.attention.wk.fill(0.0);
        clf.params.attention.bk.fill(0.0);
        let x = extract_map(&image(128, 128, 5), &clf, ClassName::Wood).unwrap();
        assert_eq!(x.order, vec![0, 1, 2, 3]);
        let expect = [0.25, 1.0 / 3.0, 0.5, 1.0];
        for (w, e) in x.map.weights.iter().zip(expect) {
            assert!((w - e).abs() < 1e-12);
        }
    }

    #[test]
    fn size_mismatch_is_a_shape_error() {
        let r = extract_map(&image(128, 128, 1), &classifier([64, 64], 1), ClassName::Wood);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn sheet_extraction_writes_maps_and_mosaic() {
        let dir = tempfile::tempdir().unwrap();
        let tiles_dir = dir.path().join("tiles");
        let mut rng = Rng::new(9);
        let raster = RgbImage::from_fn(128, 128, |_, _| {
            image::Rgb([rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8])
        });
        let sheet = SheetId::new("s").unwrap();
        let t = tile_raster(&raster, &sheet, 64, &tiles_dir).unwrap();
        std::fs::remove_file(tiles_dir.join(&t.entries[3].file)).unwrap();
        let clf = classifier([64, 64], 2);
        let cfg = ExtractConfig { gate: None, ..ExtractConfig::default() };
        let out = dir.path().join("maps");
        let a = extract_sheet(&t.entries, &tiles_dir, &clf, ClassName::Wood, &cfg, &out).unwrap();
        assert_eq!(a.maps.len(), 3);
        assert_eq!(a.skipped.len(), 1);
        let mosaic = a.mosaic_path.clone().unwrap();
        let first = std::fs::read(&mosaic).unwrap();
        assert_eq!(image::open(&mosaic).unwrap().width(), 128);
        let read = read_maps(&out, ClassName::Wood).unwrap();
        assert_eq!(read, a.maps);
        extract_sheet(&t.entries, &tiles_dir, &clf, ClassName::Wood, &cfg, &out).unwrap();
        assert_eq!(std::fs::read(&mosaic).unwrap(), first);
    }

    #[test]
    fn gate_zeroes_negative_patches() {
        let dir = tempfile::tempdir().unwrap();
        let tiles_dir = dir.path().join("tiles");
        let raster = RgbImage::from_pixel(64, 64, image::Rgb([10, 20, 30]));
        let t = tile_raster(&raster, &SheetId::new("g").unwrap(), 64, &tiles_dir).unwrap();
        let mut clf = classifier([64, 64], 2);
        clf.params.attention.head_w.fill(0.0);
        clf.params.attention.head_b[0] = -1.0;
        let cfg = ExtractConfig::default();
        let a = extract_sheet(&t.entries, &tiles_dir, &clf, ClassName::Wood, &cfg, &dir.path().join("m")).unwrap();
        assert!(a.maps[0].gated);
        assert_eq!(a.maps[0].map.weights, vec![0.0]);
    }
}
