use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::answer::{format_answer, Verdict};
use super::prompt::PromptBundle;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tiler::{ingest_mask, mask_file_name};
use crate::types::{ClassName, GroundTruthMask, PixelRect, SheetId, PATCH_PX};

/// A vision-language model that answers one prompt.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    /// Raw answer text for the composite image and prompt text of `bundle`.
    fn complete(&self, bundle: &PromptBundle) -> Result<String>;
}

/// Provider selection as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    /// OpenAI-compatible chat-completions endpoint.
    Openai {
        #[serde(default = "default_endpoint")]
        endpoint: String,
        #[serde(default = "default_model")]
        model: String,
        /// Environment variable holding the bearer token.
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
    /// Serve only what is already cached; every miss fails.
    Replay {},
    /// Answer from ground-truth masks, for synthetic data.
    Oracle {
        masks_dir: PathBuf,
        /// Minimum foreground fraction of a patch for a "Yes".
        #[serde(default)]
        min_fraction: f64,
        /// Probability of flipping each answer.
        #[serde(default)]
        flip_prob: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_tile")]
        tile_px: usize,
    },
}

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}
fn default_model() -> String {
    "gpt-4o".into()
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_tile() -> usize {
    PATCH_PX
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Box<dyn Provider>> {
        Ok(match self {
            ProviderConfig::Openai {
                endpoint,
                model,
                api_key_env,
                timeout_secs,
            } => Box::new(OpenAiProvider::new(
                endpoint.clone(),
                model.clone(),
                api_key_env,
                Duration::from_secs(*timeout_secs),
            )?),
            ProviderConfig::Replay {} => Box::new(ReplayProvider),
            ProviderConfig::Oracle {
                masks_dir,
                min_fraction,
                flip_prob,
                seed,
                tile_px,
            } => Box::new(
                MaskOracle::from_dir(masks_dir, *tile_px)?
                    .with_min_fraction(*min_fraction)
                    .with_noise(*flip_prob, *seed),
            ),
        })
    }
}

pub struct OpenAiProvider {
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl OpenAiProvider {
    pub fn new(endpoint: String, model: String, api_key_env: &str, timeout: Duration) -> Result<Self> {
        let api_key = std::env::var(api_key_env)
            .map_err(|_| Error::Config(format!("environment variable {api_key_env} is not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(OpenAiProvider {
            endpoint,
            model,
            api_key,
            client,
        })
    }

    pub fn request_body(model: &str, bundle: &PromptBundle) -> Result<serde_json::Value> {
        let png = base64::engine::general_purpose::STANDARD.encode(bundle.png_bytes()?);
        Ok(serde_json::json!({
            "model": model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": bundle.prompt_text},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{png}")}},
                ],
            }],
        }))
    }
}

impl Provider for OpenAiProvider {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String> {
        let body = Self::request_body(&self.model, bundle)?;
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Error::Provider(e.to_string()))?;
        let status = resp.status();
        let value: serde_json::Value = resp.json().map_err(|e| Error::Provider(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Provider(format!("HTTP {status}: {value}")));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Provider(format!("response without message content: {value}")))
    }
}

pub struct ReplayProvider;

impl Provider for ReplayProvider {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String> {
        Err(Error::Provider(format!("no cached answer for {}", bundle.patch)))
    }
}

/// Answers from ground-truth masks, with optional seeded label noise.
pub struct MaskOracle {
    masks: BTreeMap<(SheetId, ClassName), GroundTruthMask>,
    tile_px: usize,
    min_fraction: f64,
    flip_prob: f64,
    seed: u64,
}

impl MaskOracle {
    pub fn new(masks: Vec<GroundTruthMask>, tile_px: usize) -> Self {
        MaskOracle {
            masks: masks
                .into_iter()
                .map(|m| ((m.sheet.clone(), m.class_name), m))
                .collect(),
            tile_px,
            min_fraction: 0.0,
            flip_prob: 0.0,
            seed: 0,
        }
    }

    /// Load every `{sheet}_{class}.png` in `dir`.
    pub fn from_dir(dir: &Path, tile_px: usize) -> Result<Self> {
        let mut masks = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        for name in names {
            let Some(stem) = name.strip_suffix(".png") else { continue };
            let Some((sheet, class)) = stem.rsplit_once('_') else { continue };
            let (Ok(class), Ok(sheet)) = (class.parse::<ClassName>(), SheetId::new(sheet)) else {
                continue;
            };
            if name != mask_file_name(&sheet, class) {
                continue;
            }
            masks.push(ingest_mask(&dir.join(&name), &sheet, class, None)?);
        }
        Ok(Self::new(masks, tile_px))
    }

    pub fn with_min_fraction(mut self, f: f64) -> Self {
        self.min_fraction = f;
        self
    }

    pub fn with_noise(mut self, flip_prob: f64, seed: u64) -> Self {
        self.flip_prob = flip_prob;
        self.seed = seed;
        self
    }

    fn present(&self, bundle: &PromptBundle, class: ClassName) -> Result<bool> {
        let id = &bundle.patch;
        let mask = self
            .masks
            .get(&(id.sheet.clone(), class))
            .ok_or_else(|| Error::Provider(format!("oracle has no {class} mask for {}", id.sheet)))?;
        let t = self.tile_px;
        let rect = PixelRect {
            x: id.col as usize * t,
            y: id.row as usize * t,
            width: t,
            height: t,
        };
        let crop = mask.crop(&rect)?;
        let fg = crop.iter().filter(|&&b| b).count();
        let truth = fg > 0 && fg as f64 >= self.min_fraction * crop.len() as f64;
        if self.flip_prob > 0.0 {
            let digest = Sha256::digest(format!("{}:{id}:{class}", self.seed));
            let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            if Rng::new(key).bernoulli(self.flip_prob) {
                return Ok(!truth);
            }
        }
        Ok(truth)
    }
}

impl Provider for MaskOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String> {
        let mut parsed = BTreeMap::new();
        for class in ClassName::ALL {
            let present = self.present(bundle, class)?;
            let reason = match (class, present) {
                (ClassName::Wood, true) => "clusters of small circular symbols are visible",
                (ClassName::Settlement, true) => "dotted and hatched block patterns are visible",
                (_, false) => "no matching symbols in the image",
            };
            parsed.insert(
                class,
                Verdict {
                    present,
                    reason: reason.to_string(),
                },
            );
        }
        Ok(format_answer(&parsed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::answer::parse_answer;
    use crate::types::PatchId;
    use image::RgbImage;
    use ndarray::Array2;

    fn bundle(row: u32, col: u32) -> PromptBundle {
        PromptBundle {
            patch: PatchId::new(SheetId::new("s").unwrap(), row, col),
            composite: RgbImage::new(4, 4),
            prompt_text: "q".into(),
        }
    }

    fn oracle() -> MaskOracle {
        let mut wood = Array2::from_elem((8, 8), false);
        wood[[1, 1]] = true;
        let settlement = Array2::from_elem((8, 8), false);
        let s = SheetId::new("s").unwrap();
        MaskOracle::new(
            vec![
                GroundTruthMask { sheet: s.clone(), class_name: ClassName::Wood, mask: wood },
                GroundTruthMask { sheet: s, class_name: ClassName::Settlement, mask: settlement },
            ],
            4,
        )
    }

    #[test]
    fn oracle_answers_parse() {
        let o = oracle();
        let a = parse_answer(&o.complete(&bundle(0, 0)).unwrap()).unwrap();
        assert!(a.parsed[&ClassName::Wood].present);
        assert!(!a.parsed[&ClassName::Settlement].present);
        let b = parse_answer(&o.complete(&bundle(1, 1)).unwrap()).unwrap();
        assert!(!b.parsed[&ClassName::Wood].present);
        let strict = oracle().with_min_fraction(0.5);
        let c = parse_answer(&strict.complete(&bundle(0, 0)).unwrap()).unwrap();
        assert!(!c.parsed[&ClassName::Wood].present);
    }

    #[test]
    fn oracle_noise_is_deterministic() {
        let a = oracle().with_noise(0.5, 3);
        let b = oracle().with_noise(0.5, 3);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(a.complete(&bundle(r, c)).unwrap(), b.complete(&bundle(r, c)).unwrap());
        }
        let always = oracle().with_noise(1.0, 0);
        let x = parse_answer(&always.complete(&bundle(0, 0)).unwrap()).unwrap();
        assert!(!x.parsed[&ClassName::Wood].present);
        assert!(x.parsed[&ClassName::Settlement].present);
    }

    #[test]
    fn replay_always_misses() {
        assert!(matches!(ReplayProvider.complete(&bundle(0, 0)), Err(Error::Provider(_))));
    }

    #[test]
    fn openai_request_shape() {
        let body = OpenAiProvider::request_body("m", &bundle(0, 0)).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["content"][0]["text"], "q");
        let url = body["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    #[test]
    fn config_parses_from_toml() {
        let c: ProviderConfig = toml::from_str("kind = \"oracle\"\nmasks_dir = \"m\"\nflip_prob = 0.1").unwrap();
        assert!(matches!(c, ProviderConfig::Oracle { tile_px: 384, .. }));
        let c: ProviderConfig = toml::from_str("kind = \"openai\"").unwrap();
        assert!(matches!(c, ProviderConfig::Openai { .. }));
        assert!(toml::from_str::<ProviderConfig>("kind = \"replay\"\nextra = 1").is_err());
    }
}
