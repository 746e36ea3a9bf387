//! End-to-end pipeline: synth → tile → label → train → extract → evaluate.
//!
//! Each stage owns one directory under the output root. A stage is skipped
//! when the hash of its inputs (its config section, upstream outputs and any
//! external files) matches its stamp and its outputs are unchanged on disk.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attnmap::{extract_sheet, read_maps};
use crate::config::{PipelineConfig, SheetSource, Split, SynthConfig};
use crate::error::{Error, IoContext, Result};
use crate::evaluator::{self, parse_thresholds, EvalReport};
use crate::labels::{corrections_path, load_effective, write_records};
use crate::llm::{label_patches, PatchSource, ProviderConfig, ResponseCache};
use crate::model::Checkpoint;
use crate::synth::{generate_sheet, legend, random_layout};
use crate::tiler::{self, index_patches, mask_file_name, read_manifests};
use crate::trainer::{load_dataset, train};
use crate::types::{AttentionMap, ClassName, SheetId};

pub const STAGES: [&str; 6] = ["synth", "tile", "label", "train", "extract", "evaluate"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub input_hash: String,
    /// Output files relative to the output root, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageState {
    Ran,
    UpToDate,
    NotConfigured,
}

#[derive(Debug, Clone)]
pub struct StageStatus {
    pub name: &'static str,
    pub state: StageState,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub stages: Vec<StageStatus>,
    pub report_csv: PathBuf,
    pub reports: Vec<EvalReport>,
}

/// Layout of the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn synth(&self) -> PathBuf {
        self.root.join("synth")
    }
    pub fn tiles(&self) -> PathBuf {
        self.root.join("tiles")
    }
    pub fn patches(&self) -> PathBuf {
        self.root.join("tiles").join("patches")
    }
    pub fn masks(&self) -> PathBuf {
        self.root.join("tiles").join("masks")
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("tiles").join("splits.json")
    }
    pub fn labels_dir(&self) -> PathBuf {
        self.root.join("labels")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels").join("labels.jsonl")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn maps(&self) -> PathBuf {
        self.root.join("maps")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    fn stamps(&self) -> PathBuf {
        self.root.join(".stamps")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("pipeline.log")
    }
    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts.json")
    }
    fn stage_dir(&self, stage: &str) -> PathBuf {
        match stage {
            "synth" => self.synth(),
            "tile" => self.tiles(),
            "label" => self.labels_dir(),
            "train" => self.models(),
            "extract" => self.maps(),
            _ => self.report(),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hash every file of a stage directory. Correction logs are inputs, not outputs.
fn hash_outputs(layout: &Layout, stage: &str) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(&layout.stage_dir(stage), &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".corrections.jsonl") || name.ends_with(".tmp") {
            continue;
        }
        let rel = f
            .strip_prefix(&layout.root)
            .unwrap_or(&f)
            .to_string_lossy()
            .replace('\\', "/");
        out.insert(rel, sha256_file(&f)?);
    }
    Ok(out)
}

fn digest_outputs(outputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in outputs {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Incremental input hash of a stage.
struct InputHash(Sha256);

impl InputHash {
    fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(stage.as_bytes());
        InputHash(h)
    }
    fn json<T: Serialize>(mut self, v: &T) -> Result<Self> {
        self.0.update(serde_json::to_vec(v)?);
        self.0.update([0]);
        Ok(self)
    }
    fn text(mut self, s: &str) -> Self {
        self.0.update(s.as_bytes());
        self.0.update([0]);
        self
    }
    fn file(self, p: &Path) -> Result<Self> {
        let h = if p.exists() { sha256_file(p)? } else { "absent".into() };
        Ok(self.text(&p.to_string_lossy()).text(&h))
    }
    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Artifacts {
    version: String,
    seed: u64,
    config: Option<PipelineConfig>,
    stages: BTreeMap<String, Stamp>,
}

struct Runner {
    layout: Layout,
    log: std::fs::File,
    statuses: Vec<StageStatus>,
    stamps: BTreeMap<String, Stamp>,
}

impl Runner {
    fn note(&mut self, line: &str) {
        log::info!("{line}");
        let _ = writeln!(self.log, "{line}");
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.layout.stamps().join(format!("{stage}.json"))
    }

    fn up_to_date(&self, stage: &str, input_hash: &str) -> Result<Option<Stamp>> {
        let path = self.stamp_path(stage);
        let Ok(bytes) = std::fs::read(&path) else {
            return Ok(None);
        };
        let Ok(stamp) = serde_json::from_slice::<Stamp>(&bytes) else {
            return Ok(None);
        };
        if stamp.input_hash != input_hash {
            return Ok(None);
        }
        if hash_outputs(&self.layout, stage)? != stamp.outputs {
            return Ok(None);
        }
        Ok(Some(stamp))
    }

    /// Run `body` unless the stage is up to date; returns the digest of its outputs.
    fn stage(
        &mut self,
        name: &'static str,
        input_hash: String,
        body: impl FnOnce(&Layout) -> Result<()>,
    ) -> Result<String> {
        if let Some(stamp) = self.up_to_date(name, &input_hash)? {
            self.note(&format!("{name}: up to date"));
            self.statuses.push(StageStatus { name, state: StageState::UpToDate });
            let digest = digest_outputs(&stamp.outputs);
            self.stamps.insert(name.to_string(), stamp);
            return Ok(digest);
        }
        self.note(&format!("{name}: running"));
        let _ = std::fs::remove_file(self.stamp_path(name));
        let dir = self.layout.stage_dir(name);
        if name != "label" && dir.exists() {
            // Labels keep their response cache and correction log across runs.
            std::fs::remove_dir_all(&dir).at(&dir)?;
        }
        std::fs::create_dir_all(&dir).at(&dir)?;
        let log_path = self.layout.log();
        if let Err(e) = body(&self.layout) {
            self.note(&format!("{name}: failed: {e}"));
            return Err(Error::Stage {
                stage: name.to_string(),
                log: log_path,
                source: Box::new(e),
            });
        }
        let outputs = hash_outputs(&self.layout, name)?;
        let stamp = Stamp { input_hash, outputs };
        let path = self.stamp_path(name);
        std::fs::write(&path, serde_json::to_vec_pretty(&stamp)?).at(&path)?;
        self.note(&format!("{name}: done, {} files", stamp.outputs.len()));
        self.statuses.push(StageStatus { name, state: StageState::Ran });
        let digest = digest_outputs(&stamp.outputs);
        self.stamps.insert(name.to_string(), stamp);
        Ok(digest)
    }
}

/// Synthetic sheet identifiers, in generation order.
pub fn synth_sheet_ids(count: usize) -> Vec<SheetId> {
    (0..count).map(|i| SheetId(format!("syn{:02}", i + 1))).collect()
}

fn sheet_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1)
}

/// All sheets the pipeline processes, synthetic ones first.
fn all_sheets(cfg: &PipelineConfig, layout: &Layout) -> Vec<SheetSource> {
    let mut out = Vec::new();
    if let Some(s) = &cfg.synth {
        for (i, id) in synth_sheet_ids(s.sheets).into_iter().enumerate() {
            let masks = ClassName::ALL
                .iter()
                .map(|&c| (c, layout.synth().join(mask_file_name(&id, c))))
                .collect();
            out.push(SheetSource {
                raster: layout.synth().join(format!("{id}.png")),
                split: if i + s.eval_sheets >= s.sheets { Split::Eval } else { Split::Train },
                id,
                masks,
            });
        }
    }
    out.extend(cfg.sheets.iter().cloned());
    out
}

fn run_synth(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let s = cfg.synth.as_ref().expect("synth configured");
    write_synthetic(s, cfg.seed, cfg.tiling.patch_px, &layout.synth()).map(|_| ())
}

/// Write `{sheet}.png`, `{sheet}_{class}.png` masks and `legend.png` to `dir`.
pub fn write_synthetic(s: &SynthConfig, seed: u64, legend_px: usize, dir: &Path) -> Result<Vec<SheetId>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let ids = synth_sheet_ids(s.sheets);
    for (i, id) in ids.iter().enumerate() {
        let seed = sheet_seed(seed, i);
        let regions = random_layout(seed, s.size_px, &s.layout);
        let sheet = generate_sheet(id, seed, s.size_px, &regions, &s.texture)?;
        sheet.raster.save_with_format(dir.join(format!("{id}.png")), image::ImageFormat::Png)?;
        for m in &sheet.masks {
            tiler::save_mask(m, &dir.join(mask_file_name(id, m.class_name)))?;
        }
    }
    legend(legend_px as u32, &s.texture, seed).save_with_format(dir.join("legend.png"), image::ImageFormat::Png)?;
    Ok(ids)
}

fn run_tile(sheets: &[SheetSource], cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let patches = layout.patches();
    let masks = layout.masks();
    std::fs::create_dir_all(&masks).at(&masks)?;
    let mut splits = BTreeMap::new();
    for s in sheets {
        let raster = tiler::read_rgb(&s.raster)?;
        let t = tiler::tile_raster(&raster, &s.id, cfg.tiling.patch_px, &patches)?;
        for w in &t.warnings {
            log::warn!("{w}");
        }
        for (class, path) in &s.masks {
            let dims = (raster.height() as usize, raster.width() as usize);
            let m = tiler::ingest_mask(path, &s.id, *class, Some(dims))?;
            tiler::save_mask(&m, &masks.join(mask_file_name(&s.id, *class)))?;
        }
        splits.insert(s.id.to_string(), s.split);
    }
    let p = layout.splits();
    std::fs::write(&p, serde_json::to_vec_pretty(&splits)?).at(&p)
}

fn read_splits(layout: &Layout) -> Result<BTreeMap<String, Split>> {
    let p = layout.splits();
    Ok(serde_json::from_slice(&std::fs::read(&p).at(&p)?)?)
}

fn legend_path(cfg: &PipelineConfig, layout: &Layout) -> Result<PathBuf> {
    match (&cfg.label.legend, &cfg.synth) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(_)) => Ok(layout.synth().join("legend.png")),
        (None, None) => Err(Error::Config("label.legend is required without [synth]".into())),
    }
}

fn provider_config(cfg: &PipelineConfig, layout: &Layout) -> ProviderConfig {
    cfg.label.provider.clone().unwrap_or(ProviderConfig::Oracle {
        masks_dir: layout.masks(),
        min_fraction: 0.0,
        flip_prob: 0.0,
        seed: cfg.seed,
        tile_px: cfg.tiling.patch_px,
    })
}

fn run_label(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let legend = tiler::read_rgb(&legend_path(cfg, layout)?)?;
    let provider = provider_config(cfg, layout).build()?;
    let cache = ResponseCache::open(&layout.labels_dir().join("cache"))?;
    let patches_dir = layout.patches();
    let sources: Vec<PatchSource> = read_manifests(&patches_dir)?
        .into_iter()
        .flat_map(|(_, entries)| entries)
        .map(|entry| PatchSource { entry, dir: patches_dir.clone() })
        .collect();
    let out = label_patches(&sources, &legend, provider.as_ref(), &cache, &cfg.label.requests)?;
    log::info!(
        "labelled {} patches: {} provider calls, {} cache hits, {} failures",
        sources.len(),
        out.provider_calls,
        out.cache_hits,
        out.failures.len()
    );
    write_records(&layout.labels(), &out.records)
}

fn run_train(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let splits = read_splits(layout)?;
    let labels: Vec<_> = load_effective(&layout.labels())?
        .into_iter()
        .filter(|l| splits.get(l.patch.sheet.as_str()) == Some(&Split::Train))
        .collect();
    for (i, &class) in cfg.classes.iter().enumerate() {
        let data = load_dataset(&labels, &layout.patches(), class)?;
        let mut tc = cfg.train.clone();
        tc.seed = cfg.seed.wrapping_add(i as u64);
        train(&data, class, &tc, &layout.models().join(class.key()))?;
    }
    Ok(())
}

fn run_extract(cfg: &PipelineConfig, layout: &Layout) -> Result<()> {
    let splits = read_splits(layout)?;
    let patches = layout.patches();
    for &class in &cfg.classes {
        let ckpt = Checkpoint::load(&layout.models().join(class.key()).join(cfg.extract.checkpoint.file_name()))?;
        let clf = ckpt.classifier();
        let out = layout.maps().join(class.key());
        for (_, entries) in read_manifests(&patches)? {
            let Some(first) = entries.first() else { continue };
            if splits.get(first.patch_id.sheet.as_str()) != Some(&Split::Eval) {
                continue;
            }
            let r = extract_sheet(&entries, &patches, &clf, class, &cfg.extract, &out)?;
            if !r.skipped.is_empty() {
                log::warn!("{} patches skipped during extraction", r.skipped.len());
            }
        }
    }
    Ok(())
}

fn run_evaluate(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<EvalReport>> {
    let thresholds = parse_thresholds(&cfg.evaluate.thresholds)?;
    let mut all = Vec::new();
    for &class in &cfg.classes {
        let maps: Vec<AttentionMap> = read_maps(&layout.maps().join(class.key()), class)?
            .into_iter()
            .map(|m| m.map)
            .collect();
        let masks = evaluator::load_masks(&layout.masks(), &maps, class)?;
        let reports = evaluator::evaluate_to_dir(
            &maps,
            &masks,
            class,
            &thresholds,
            cfg.evaluate.overlay_alpha,
            &layout.report().join(class.key()),
        )?;
        all.extend(reports);
    }
    evaluator::write_csv(&all, &layout.report().join("report.csv"))?;
    Ok(all)
}

/// Read a combined report written by a previous run.
pub fn read_report(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).at(path)
}

/// Run every stage in order under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineRun> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join(".stamps")).at(out)?;
    let layout = Layout { root: out.to_path_buf() };
    let log_path = layout.log();
    let log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .at(&log_path)?;
    let mut r = Runner {
        layout: layout.clone(),
        log,
        statuses: Vec::new(),
        stamps: BTreeMap::new(),
    };
    r.note(&format!("pipeline start, seed {}", cfg.seed));

    let synth_digest = match &cfg.synth {
        Some(s) => {
            let h = InputHash::new("synth").json(s)?.json(&cfg.seed)?.json(&cfg.tiling)?.finish();
            r.stage("synth", h, |l| run_synth(cfg, l))?
        }
        None => {
            r.statuses.push(StageStatus { name: "synth", state: StageState::NotConfigured });
            String::new()
        }
    };

    let sheets = all_sheets(cfg, &layout);
    let mut h = InputHash::new("tile").json(&cfg.tiling)?.text(&synth_digest);
    for s in &cfg.sheets {
        h = h.json(s)?.file(&s.raster)?;
        for m in s.masks.values() {
            h = h.file(m)?;
        }
    }
    if let Some(s) = &cfg.synth {
        h = h.json(&s.eval_sheets)?;
    }
    let tile_digest = r.stage("tile", h.finish(), |l| run_tile(&sheets, cfg, l))?;

    let mut h = InputHash::new("label")
        .text(&tile_digest)
        .text(&synth_digest)
        .json(&provider_config(cfg, &layout))?;
    if let Some(p) = &cfg.label.legend {
        h = h.file(p)?;
    }
    let label_digest = r.stage("label", h.finish(), |l| run_label(cfg, l))?;

    let h = InputHash::new("train")
        .text(&label_digest)
        .file(&corrections_path(&layout.labels()))?
        .json(&cfg.train)?
        .json(&cfg.classes)?
        .json(&cfg.seed)?
        .finish();
    let train_digest = r.stage("train", h, |l| run_train(cfg, l))?;

    let h = InputHash::new("extract")
        .text(&train_digest)
        .json(&cfg.extract)?
        .finish();
    let extract_digest = r.stage("extract", h, |l| run_extract(cfg, l))?;

    let h = InputHash::new("evaluate")
        .text(&extract_digest)
        .text(&tile_digest)
        .json(&cfg.evaluate)?
        .finish();
    r.stage("evaluate", h, |l| run_evaluate(cfg, l).map(|_| ()))?;

    let report_csv = layout.report().join("report.csv");
    let reports = reports_from_csv(&read_report(&report_csv)?)?;

    let artifacts = Artifacts {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: Some(cfg.clone()),
        stages: r.stamps.clone(),
    };
    let ap = layout.artifacts();
    std::fs::write(&ap, serde_json::to_vec_pretty(&artifacts)?).at(&ap)?;
    r.note("pipeline done");
    Ok(PipelineRun {
        stages: r.statuses,
        report_csv,
        reports,
    })
}

/// Parse rows written by [`evaluator::csv`].
pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let bad = |l: &str| Error::Format(format!("bad report row {l:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(l));
            Ok(EvalReport {
                class_name: f[0].parse()?,
                mode: match f[1] {
                    "down_sampled" => evaluator::AlignMode::DownSampled,
                    "up_sampled" => evaluator::AlignMode::UpSampled,
                    _ => return Err(bad(l)),
                },
                threshold: num(f[2])?,
                iou: num(f[3])?,
                precision: num(f[4])?,
                recall: num(f[5])?,
                counts: evaluator::Counts {
                    tp: int(f[6])?,
                    fp: int(f[7])?,
                    fn_: int(f[8])?,
                    tn: int(f[9])?,
                },
            })
        })
        .collect()
}

/// Patch images of all sheets in a finished run, by patch id.
pub fn patch_index(out: &Path) -> Result<BTreeMap<crate::types::PatchId, (PathBuf, tiler::ManifestEntry)>> {
    index_patches(&Layout { root: out.to_path_buf() }.patches())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PipelineConfig {
        PipelineConfig::from_toml(
            r#"
seed = 3
classes = ["wood"]
[synth]
sheets = 2
size_px = 256
[synth.layout]
wood_blobs = 1
settlement_blobs = 1
min_radius = 0.2
max_radius = 0.25
[tiling]
patch_px = 128
[train]
epochs = 1
batch_size = 4
val_fraction = 0.0
[train.model]
input_px = [128, 128]
widths = [2, 2, 2, 3, 3, 4]
"#,
        )
        .unwrap()
    }

    #[test]
    fn runs_then_skips_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let a = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(a.stages.iter().all(|s| s.state == StageState::Ran), "{:?}", a.stages);
        assert_eq!(a.reports.len(), 18);
        let csv = std::fs::read(&a.report_csv).unwrap();
        assert!(dir.path().join("report/wood/sweep_down.png").exists());
        assert!(dir.path().join("report/wood/overlay_syn02.png").exists());
        assert!(dir.path().join("artifacts.json").exists());

        let b = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(b.stages.iter().all(|s| s.state == StageState::UpToDate), "{:?}", b.stages);
        assert_eq!(std::fs::read(&b.report_csv).unwrap(), csv);

        // A correction retrains and everything downstream reruns.
        let mut store = crate::labels::LabelStore::open(&Layout { root: dir.path().into() }.labels()).unwrap();
        let id = crate::types::PatchId::new(SheetId::new("syn01").unwrap(), 0, 0);
        let cur = store.get(&id, ClassName::Wood).unwrap().present;
        store.set_human(&id, ClassName::Wood, !cur).unwrap();
        let c = run_pipeline(&cfg, dir.path()).unwrap();
        let states: Vec<_> = c.stages.iter().map(|s| (s.name, s.state.clone())).collect();
        assert_eq!(states[2], ("label", StageState::UpToDate));
        assert_eq!(states[3], ("train", StageState::Ran));
    }

    #[test]
    fn failing_stage_names_itself() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.label.provider = Some(ProviderConfig::Oracle {
            masks_dir: dir.path().join("nowhere"),
            min_fraction: 0.0,
            flip_prob: 0.0,
            seed: 0,
            tile_px: 128,
        });
        match run_pipeline(&cfg, dir.path()) {
            Err(Error::Stage { stage, log, .. }) => {
                assert_eq!(stage, "label");
                assert!(log.exists());
            }
            other => panic!("{other:?}"),
        }
    }
}
