//! Scoring attention maps against ground-truth masks.
//!
//! Two alignments are supported. *Down-sampled*: each token-sized tile of the
//! mask becomes one foreground cell if it holds any foreground pixel, and is
//! compared to the thresholded map cell by cell. *Up-sampled*: each map weight
//! is broadcast over its token-sized pixel block and compared pixel by pixel.
//! Counts are pooled over all patches before metrics are computed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::colormap;
use crate::draw;
use crate::error::{Error, IoContext, Result};
use crate::types::{AttentionMap, ClassName, GroundTruthMask, SheetId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    DownSampled,
    UpSampled,
}

impl AlignMode {
    pub fn key(self) -> &'static str {
        match self {
            AlignMode::DownSampled => "down_sampled",
            AlignMode::UpSampled => "up_sampled",
        }
    }
}

/// Confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Counts {
    /// Empty prediction and empty ground truth score 1.0 everywhere; when only
    /// one of them is empty the undefined ratios are 0.0.
    pub fn metrics(&self) -> Metrics {
        let pred = self.tp + self.fp;
        let gt = self.tp + self.fn_;
        if pred == 0 && gt == 0 {
            return Metrics {
                iou: 1.0,
                precision: 1.0,
                recall: 1.0,
            };
        }
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Metrics {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            precision: ratio(self.tp, pred),
            recall: ratio(self.tp, gt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_name: ClassName,
    pub mode: AlignMode,
    pub threshold: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
}

impl EvalReport {
    fn new(class_name: ClassName, mode: AlignMode, threshold: f64, counts: Counts) -> Self {
        let m = counts.metrics();
        EvalReport {
            class_name,
            mode,
            threshold,
            iou: m.iou,
            precision: m.precision,
            recall: m.recall,
            counts,
        }
    }
}

/// Tile-wise logical OR of a mask.
pub fn downsample_gt(mask: &Array2<bool>, tile: usize) -> Result<Array2<bool>> {
    let (h, w) = mask.dim();
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::Validation(format!(
            "mask {h}x{w} is not divisible into {tile}px tiles"
        )));
    }
    let mut out = Array2::from_elem((h / tile, w / tile), false);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            out[[y / tile, x / tile]] = true;
        }
    }
    Ok(out)
}

/// Broadcast each weight over a `tile`×`tile` block.
pub fn upsample_attention(weights: &Array2<f64>, tile: usize) -> Array2<f64> {
    let (m, n) = weights.dim();
    Array2::from_shape_fn((m * tile, n * tile), |(y, x)| weights[[y / tile, x / tile]])
}

/// Foreground where the value is strictly greater than `sigma`.
pub fn binarize(confidences: &Array2<f64>, sigma: f64) -> Result<Array2<bool>> {
    check_sigma(sigma)?;
    Ok(confidences.mapv(|v| v > sigma))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {sigma} outside (0,1)"
        )));
    }
    Ok(())
}

pub fn score(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Counts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Validation(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// One map cell with the ground-truth statistics of its pixel block.
#[derive(Debug, Clone, Copy)]
struct Cell {
    weight: f64,
    fg_pixels: u64,
    pixels: u64,
}

/// Precomputed per-cell statistics for a set of maps, so sweeps over many
/// thresholds never materialise up-sampled rasters.
pub struct Alignment {
    class_name: ClassName,
    cells: Vec<Cell>,
}

impl Alignment {
    /// Pair every map with its sheet's mask. Maps of other classes, or with no mask, are errors.
    pub fn new(maps: &[AttentionMap], masks: &[GroundTruthMask], class_name: ClassName) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("no attention maps to evaluate".into()));
        }
        let by_sheet: BTreeMap<&SheetId, &GroundTruthMask> = masks
            .iter()
            .filter(|m| m.class_name == class_name)
            .map(|m| (&m.sheet, m))
            .collect();
        let mut cells = Vec::new();
        for map in maps {
            if map.class_name != class_name {
                return Err(Error::Validation(format!(
                    "map for {} is of class {}, expected {class_name}",
                    map.patch, map.class_name
                )));
            }
            let mask = by_sheet.get(&map.patch.sheet).ok_or_else(|| {
                Error::NotFound(format!("no {class_name} mask for sheet {}", map.patch.sheet))
            })?;
            let gt = mask.crop(&map.sheet_rect())?;
            let t = map.token_pixels;
            for r in 0..map.rows {
                for c in 0..map.cols {
                    let block = gt.slice(ndarray::s![r * t..(r + 1) * t, c * t..(c + 1) * t]);
                    cells.push(Cell {
                        weight: map.get(r, c),
                        fg_pixels: block.iter().filter(|&&b| b).count() as u64,
                        pixels: (t * t) as u64,
                    });
                }
            }
        }
        Ok(Alignment { class_name, cells })
    }

    pub fn counts(&self, mode: AlignMode, sigma: f64) -> Result<Counts> {
        check_sigma(sigma)?;
        let mut c = Counts::default();
        for cell in &self.cells {
            let pred = cell.weight > sigma;
            match mode {
                AlignMode::DownSampled => {
                    let gt = cell.fg_pixels > 0;
                    match (pred, gt) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, true) => c.fn_ += 1,
                        (false, false) => c.tn += 1,
                    }
                }
                AlignMode::UpSampled => {
                    let bg = cell.pixels - cell.fg_pixels;
                    if pred {
                        c.tp += cell.fg_pixels;
                        c.fp += bg;
                    } else {
                        c.fn_ += cell.fg_pixels;
                        c.tn += bg;
                    }
                }
            }
        }
        Ok(c)
    }

    pub fn report(&self, mode: AlignMode, sigma: f64) -> Result<EvalReport> {
        Ok(EvalReport::new(self.class_name, mode, sigma, self.counts(mode, sigma)?))
    }
}

/// Reports for both alignment modes at every threshold, down-sampled first.
pub fn sweep(
    maps: &[AttentionMap],
    masks: &[GroundTruthMask],
    class_name: ClassName,
    thresholds: &[f64],
) -> Result<Vec<EvalReport>> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("empty threshold list".into()));
    }
    let align = Alignment::new(maps, masks, class_name)?;
    let mut out = Vec::with_capacity(2 * thresholds.len());
    for mode in [AlignMode::DownSampled, AlignMode::UpSampled] {
        for &t in thresholds {
            out.push(align.report(mode, t)?);
        }
    }
    Ok(out)
}

/// Parse `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("bad threshold spec {spec:?}"));
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, end, step] = parts[..] else {
            return Err(bad());
        };
        if step <= 0.0 || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
            .collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    for &v in &values {
        check_sigma(v)?;
    }
    Ok(values)
}

pub fn csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("class,mode,threshold,iou,precision,recall,tp,fp,fn,tn\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{},{},{},{}",
            r.class_name,
            r.mode.key(),
            r.threshold,
            r.iou,
            r.precision,
            r.recall,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
            r.counts.tn
        );
    }
    s
}

pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    std::fs::write(path, csv(reports)).at(path)
}

/// Line plot of IoU (red), precision (green) and recall (blue) against threshold.
pub fn plot_sweep(reports: &[EvalReport], mode: AlignMode) -> RgbImage {
    let (w, h) = (520u32, 380u32);
    let (left, right, top, bottom) = (56.0, 20.0, 40.0, 44.0);
    let pw = w as f64 - left - right;
    let ph = h as f64 - top - bottom;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let to_px = |x: f64, y: f64| (left + x * pw, top + (1.0 - y) * ph);
    let grid = Rgb([225, 225, 225]);
    let axis = Rgb([0, 0, 0]);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        draw::line(&mut img, to_px(0.0, v), to_px(1.0, v), 1.0, grid);
        draw::line(&mut img, to_px(v, 0.0), to_px(v, 1.0), 1.0, grid);
        let (lx, ly) = to_px(0.0, v);
        draw::text(&mut img, lx as i64 - 40, ly as i64 - 3, &format!("{v:.2}"), 1, axis);
        let (tx, ty) = to_px(v, 0.0);
        draw::text(&mut img, tx as i64 - 12, ty as i64 + 8, &format!("{v:.2}"), 1, axis);
    }
    draw::line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), 1.5, axis);
    draw::line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), 1.5, axis);
    let title = match mode {
        AlignMode::DownSampled => "DOWN-SAMPLED",
        AlignMode::UpSampled => "UP-SAMPLED",
    };
    draw::text(&mut img, left as i64, 12, title, 2, axis);
    draw::text(&mut img, (left + pw / 2.0) as i64 - 30, h as i64 - 16, "THRESHOLD", 1, axis);

    let mut rows: Vec<&EvalReport> = reports.iter().filter(|r| r.mode == mode).collect();
    rows.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let series: [(&str, Rgb<u8>, fn(&EvalReport) -> f64); 3] = [
        ("IOU", Rgb([220, 30, 30]), |r| r.iou),
        ("PRECISION", Rgb([30, 160, 30]), |r| r.precision),
        ("RECALL", Rgb([30, 30, 220]), |r| r.recall),
    ];
    for (i, (name, color, f)) in series.iter().enumerate() {
        for pair in rows.windows(2) {
            let a = to_px(pair[0].threshold, f(pair[0]));
            let b = to_px(pair[1].threshold, f(pair[1]));
            draw::line(&mut img, a, b, 2.0, *color);
        }
        for r in &rows {
            let (x, y) = to_px(r.threshold, f(r));
            draw::disc_with(x, y, 3.0, |px, py| {
                if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                    img.put_pixel(px as u32, py as u32, *color);
                }
            });
        }
        let lx = w as i64 - 110;
        let ly = top as i64 + 10 + 14 * i as i64;
        draw::fill_rect(&mut img, lx, ly, 10, 7, *color);
        draw::text(&mut img, lx + 14, ly, name, 1, axis);
    }
    img
}

/// Attention weights coloured with [`colormap::color`] and alpha-blended over `base`.
/// Sheet pixels without a map keep the base colour.
pub fn render_overlay(base: &RgbImage, maps: &[&AttentionMap], alpha: f64) -> RgbImage {
    let mut out = base.clone();
    for map in maps {
        let rect = map.sheet_rect();
        let t = map.token_pixels;
        for y in rect.y..(rect.y + rect.height).min(out.height() as usize) {
            for x in rect.x..(rect.x + rect.width).min(out.width() as usize) {
                let wgt = map.get((y - rect.y) / t, (x - rect.x) / t);
                let p = out.get_pixel(x as u32, y as u32);
                let c = draw::blend(*p, colormap::color(wgt), alpha);
                out.put_pixel(x as u32, y as u32, c);
            }
        }
    }
    out
}

/// One map blended over its own patch image, in patch coordinates.
pub fn render_patch_overlay(patch: &RgbImage, map: &AttentionMap, alpha: f64) -> RgbImage {
    let t = map.token_pixels as u32;
    let mut out = patch.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let (r, c) = ((y / t) as usize, (x / t) as usize);
        if r < map.rows && c < map.cols {
            *p = draw::blend(*p, colormap::color(map.get(r, c)), alpha);
        }
    }
    out
}

/// Ground-truth rendering used under evaluation overlays: foreground dark grey on white.
pub fn mask_base(mask: &GroundTruthMask) -> RgbImage {
    let (h, w) = mask.mask.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        if mask.mask[[y as usize, x as usize]] {
            Rgb([90, 90, 90])
        } else {
            Rgb([255, 255, 255])
        }
    })
}

/// Load `{sheet}_{class}.png` from `gt_dir` for every sheet the maps refer to.
pub fn load_masks(gt_dir: &Path, maps: &[AttentionMap], class_name: ClassName) -> Result<Vec<GroundTruthMask>> {
    let sheets: std::collections::BTreeSet<&SheetId> = maps.iter().map(|m| &m.patch.sheet).collect();
    sheets
        .into_iter()
        .map(|s| {
            let path = gt_dir.join(crate::tiler::mask_file_name(s, class_name));
            if !path.exists() {
                return Err(Error::NotFound(format!("ground truth {}", path.display())));
            }
            crate::tiler::ingest_mask(&path, s, class_name, None)
        })
        .collect()
}

/// Run a sweep and write `report.csv`, `sweep_down.png`, `sweep_up.png` and
/// `overlay_{sheet}.png` to `out_dir`.
pub fn evaluate_to_dir(
    maps: &[AttentionMap],
    masks: &[GroundTruthMask],
    class_name: ClassName,
    thresholds: &[f64],
    overlay_alpha: f64,
    out_dir: &Path,
) -> Result<Vec<EvalReport>> {
    let reports = sweep(maps, masks, class_name, thresholds)?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    write_csv(&reports, &out_dir.join("report.csv"))?;
    plot_sweep(&reports, AlignMode::DownSampled).save_with_format(out_dir.join("sweep_down.png"), image::ImageFormat::Png)?;
    plot_sweep(&reports, AlignMode::UpSampled).save_with_format(out_dir.join("sweep_up.png"), image::ImageFormat::Png)?;
    for mask in masks.iter().filter(|m| m.class_name == class_name) {
        let refs: Vec<&AttentionMap> = maps.iter().filter(|m| m.patch.sheet == mask.sheet).collect();
        let overlay = render_overlay(&mask_base(mask), &refs, overlay_alpha);
        overlay.save_with_format(out_dir.join(format!("overlay_{}.png", mask.sheet)), image::ImageFormat::Png)?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PatchId;
    use ndarray::array;

    #[test]
    fn downsample_examples() {
        let mask = Array2::from_elem((128, 128), false);
        assert!(downsample_gt(&mask, 64).unwrap().iter().all(|&b| !b));
        let mut one = mask.clone();
        one[[70, 5]] = true;
        let d = downsample_gt(&one, 64).unwrap();
        assert_eq!(d, array![[false, false], [true, false]]);
        let full = Array2::from_elem((128, 64), true);
        assert!(downsample_gt(&full, 64).unwrap().iter().all(|&b| b));
        assert!(matches!(downsample_gt(&Array2::from_elem((65, 64), false), 64), Err(Error::Validation(_))));
    }

    #[test]
    fn upsample_examples() {
        let u = upsample_attention(&array![[0.7]], 64);
        assert_eq!(u.dim(), (64, 64));
        assert!(u.iter().all(|&v| v == 0.7));
        let u = upsample_attention(&array![[0.2, 0.9]], 64);
        assert_eq!(u.dim(), (64, 128));
        assert!(u.slice(ndarray::s![.., ..64]).iter().all(|&v| v == 0.2));
        assert!(u.slice(ndarray::s![.., 64..]).iter().all(|&v| v == 0.9));
    }

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize(&array![[0.5]], 0.5).unwrap(), array![[false]]);
        assert_eq!(binarize(&array![[0.4, 0.6]], 0.5).unwrap(), array![[false, true]]);
        for s in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(matches!(binarize(&array![[0.4]], s), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn score_examples() {
        let gt = array![[true, false], [true, false]];
        let m = score(&gt, &gt).unwrap().metrics();
        assert_eq!((m.iou, m.precision, m.recall), (1.0, 1.0, 1.0));

        let all = Array2::from_elem((2, 2), true);
        let m = score(&all, &gt).unwrap().metrics();
        assert_eq!((m.recall, m.precision, m.iou), (1.0, 0.5, 0.5));

        let disjoint = array![[false, true], [false, true]];
        let m = score(&disjoint, &gt).unwrap().metrics();
        assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));

        assert!(matches!(score(&gt, &array![[true]]), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_conventions() {
        let none = Array2::from_elem((2, 2), false);
        let m = score(&none, &none).unwrap().metrics();
        assert_eq!((m.iou, m.precision, m.recall), (1.0, 1.0, 1.0));
        let some = array![[true, false], [false, false]];
        for (p, g) in [(&none, &some), (&some, &none)] {
            let m = score(p, g).unwrap().metrics();
            assert_eq!((m.iou, m.precision, m.recall), (0.0, 0.0, 0.0));
        }
    }

    fn map(sheet: &str, row: u32, col: u32, weights: Vec<f64>, m: usize, n: usize) -> AttentionMap {
        AttentionMap::new(
            PatchId::new(SheetId::new(sheet).unwrap(), row, col),
            ClassName::Wood,
            m,
            n,
            weights,
        )
        .unwrap()
    }

    #[test]
    fn alignment_matches_explicit_path() {
        let mut gt = Array2::from_elem((128, 256), false);
        for y in 10..90 {
            for x in 30..150 {
                gt[[y, x]] = true;
            }
        }
        let mask = GroundTruthMask {
            sheet: SheetId::new("s").unwrap(),
            class_name: ClassName::Wood,
            mask: gt.clone(),
        };
        // two 1x2-token patches side by side on row 0, one on row 1
        let maps = vec![
            map("s", 0, 0, vec![0.9, 0.3], 1, 2),
            map("s", 0, 1, vec![0.55, 0.1], 1, 2),
            map("s", 1, 0, vec![0.2, 0.8], 1, 2),
        ];
        let align = Alignment::new(&maps, &[mask], ClassName::Wood).unwrap();
        for sigma in [0.25, 0.5, 0.85] {
            let mut down = Counts::default();
            let mut up = Counts::default();
            for m in &maps {
                let crop = gt.slice(ndarray::s![
                    m.sheet_rect().y..m.sheet_rect().y + 64,
                    m.sheet_rect().x..m.sheet_rect().x + 128
                ]).to_owned();
                let a = m.to_array();
                down += score(&binarize(&a, sigma).unwrap(), &downsample_gt(&crop, 64).unwrap()).unwrap();
                up += score(&binarize(&upsample_attention(&a, 64), sigma).unwrap(), &crop).unwrap();
            }
            assert_eq!(align.counts(AlignMode::DownSampled, sigma).unwrap(), down);
            assert_eq!(align.counts(AlignMode::UpSampled, sigma).unwrap(), up);
        }
    }

    #[test]
    fn sweep_cardinality_and_missing_mask() {
        let mask = GroundTruthMask {
            sheet: SheetId::new("s").unwrap(),
            class_name: ClassName::Wood,
            mask: Array2::from_elem((64, 64), true),
        };
        let maps = vec![map("s", 0, 0, vec![0.6], 1, 1)];
        let t = parse_thresholds("0.1:0.9:0.1").unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t[2], 0.3);
        let r = sweep(&maps, &[mask.clone()], ClassName::Wood, &t).unwrap();
        assert_eq!(r.len(), 18);
        assert_eq!(r.iter().filter(|r| r.mode == AlignMode::DownSampled).count(), 9);
        let other = vec![map("t", 0, 0, vec![0.6], 1, 1)];
        assert!(matches!(sweep(&other, &[mask.clone()], ClassName::Wood, &t), Err(Error::NotFound(_))));
        assert!(sweep(&[], &[mask], ClassName::Wood, &t).is_err());
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!(parse_thresholds("0.5").unwrap(), vec![0.5]);
        assert_eq!(parse_thresholds("0.25, 0.75").unwrap(), vec![0.25, 0.75]);
        assert!(parse_thresholds("0:1:0.5").is_err());
        assert!(parse_thresholds("0.1:0.9").is_err());
        assert!(parse_thresholds("abc").is_err());
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport::new(
            ClassName::Wood,
            AlignMode::UpSampled,
            0.5,
            Counts { tp: 3, fp: 1, fn_: 0, tn: 4 },
        );
        let s = csv(&[r]);
        assert_eq!(
            s,
            "class,mode,threshold,iou,precision,recall,tp,fp,fn,tn\nwood,up_sampled,0.5,0.750000,0.750000,1.000000,3,1,0,4\n"
        );
    }

    #[test]
    fn overlay_colours_cells() {
        let base = RgbImage::from_pixel(128, 64, Rgb([255, 255, 255]));
        let m = map("s", 0, 0, vec![0.0, 1.0], 1, 2);
        let o = render_overlay(&base, &[&m], 1.0);
        assert_eq!(*o.get_pixel(10, 10), Rgb([0, 0, 255]));
        assert_eq!(*o.get_pixel(100, 10), Rgb([255, 0, 0]));
    }
}
