use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::answer::parse_answer;
use super::prompt::{build_prompt, PromptBundle};
use super::provider::Provider;
use crate::error::{Error, IoContext, Result};
use crate::labels::{LabelRecord, RecordSource};
use crate::tiler::ManifestEntry;
use crate::types::{ClassName, PatchId, PatchImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    /// Maximum number of provider calls in flight.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Attempts after the first failed call.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_concurrency() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            concurrency: default_concurrency(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
        }
    }
}

/// One persisted provider response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub patch_id: PatchId,
    pub provider: String,
    pub raw_text: String,
}

/// Directory of responses keyed by [`PromptBundle::content_hash`].
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>> {
        let p = self.path(key);
        match std::fs::read(&p) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(p, e)),
        }
    }

    /// Written to a unique temporary file and renamed, so readers never see partial entries.
    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let p = self.path(&entry.key);
        let tmp = self.dir.join(format!(
            ".{}.{:?}.tmp",
            entry.key,
            std::thread::current().id()
        ));
        std::fs::write(&tmp, serde_json::to_vec_pretty(entry)?).at(&tmp)?;
        std::fs::rename(&tmp, &p).at(&p)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabelOutcome {
    /// Two records per patch, in manifest order.
    pub records: Vec<LabelRecord>,
    pub provider_calls: usize,
    pub cache_hits: usize,
    /// Patches that ended up unlabeled, with the reason.
    pub failures: Vec<(PatchId, String)>,
}

/// A patch to label: its manifest entry and the directory holding its file.
#[derive(Debug, Clone)]
pub struct PatchSource {
    pub entry: ManifestEntry,
    pub dir: PathBuf,
}

enum Answer {
    Parsed(Vec<LabelRecord>),
    Failed(String),
}

fn call_with_retries(provider: &dyn Provider, bundle: &PromptBundle, cfg: &LabelerConfig, calls: &AtomicUsize) -> Result<String> {
    let mut attempt = 0;
    loop {
        calls.fetch_add(1, Ordering::Relaxed);
        match provider.complete(bundle) {
            Ok(text) => return Ok(text),
            Err(e) if attempt < cfg.max_retries => {
                let delay = cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                log::warn!("{}: provider attempt {} failed: {e}", bundle.patch, attempt + 1);
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn label_one(
    src: &PatchSource,
    legend: &RgbImage,
    provider: &dyn Provider,
    cache: &ResponseCache,
    cfg: &LabelerConfig,
    calls: &AtomicUsize,
    hits: &AtomicUsize,
) -> Result<Answer> {
    let id = &src.entry.patch_id;
    let image = PatchImage::load(id.clone(), &src.dir.join(&src.entry.file))?;
    let bundle = build_prompt(&image, legend)?;
    let key = bundle.content_hash();
    let raw = match cache.get(&key)? {
        Some(entry) => {
            hits.fetch_add(1, Ordering::Relaxed);
            entry.raw_text
        }
        None => match call_with_retries(provider, &bundle, cfg, calls) {
            Ok(text) => {
                cache.put(&CacheEntry {
                    key,
                    patch_id: id.clone(),
                    provider: provider.name().to_string(),
                    raw_text: text.clone(),
                })?;
                text
            }
            Err(e) => return Ok(Answer::Failed(e.to_string())),
        },
    };
    match parse_answer(&raw) {
        Ok(answer) => Ok(Answer::Parsed(
            ClassName::ALL
                .iter()
                .map(|class| {
                    let v = &answer.parsed[class];
                    LabelRecord {
                        patch_id: id.clone(),
                        class: *class,
                        present: Some(v.present),
                        source: RecordSource::Llm,
                        reason: Some(v.reason.clone()),
                    }
                })
                .collect(),
        )),
        Err(e) => Ok(Answer::Failed(e.to_string())),
    }
}

/// Label every patch for both classes. Cached responses are reused without
/// calling the provider; provider failures and unparseable answers produce
/// `unlabeled` records instead of aborting. I/O errors abort.
pub fn label_patches(
    patches: &[PatchSource],
    legend: &RgbImage,
    provider: &dyn Provider,
    cache: &ResponseCache,
    cfg: &LabelerConfig,
) -> Result<LabelOutcome> {
    let calls = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let answers: Vec<Result<Answer>> = pool.install(|| {
        patches
            .par_iter()
            .map(|src| label_one(src, legend, provider, cache, cfg, &calls, &hits))
            .collect()
    });
    let mut out = LabelOutcome::default();
    for (src, answer) in patches.iter().zip(answers) {
        let id = &src.entry.patch_id;
        match answer? {
            Answer::Parsed(records) => out.records.extend(records),
            Answer::Failed(reason) => {
                log::warn!("{id}: left unlabeled: {reason}");
                for class in ClassName::ALL {
                    out.records.push(LabelRecord {
                        patch_id: id.clone(),
                        class,
                        present: None,
                        source: RecordSource::Unlabeled,
                        reason: Some(reason.clone()),
                    });
                }
                out.failures.push((id.clone(), reason));
            }
        }
    }
    out.provider_calls = calls.into_inner();
    out.cache_hits = hits.into_inner();
    Ok(out)
}
