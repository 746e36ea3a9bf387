//! Pipeline configuration file.
//!
//! Every key is optional except `classes`; omitted keys take the defaults
//! listed in the README. Unknown keys are rejected, all of them reported at once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attnmap::ExtractConfig;
use crate::error::{Error, IoContext, Result};
use crate::evaluator::parse_thresholds;
use crate::llm::{LabelerConfig, ProviderConfig};
use crate::synth::{LayoutConfig, TextureConfig};
use crate::trainer::TrainConfig;
use crate::types::{ClassName, SheetId, PATCH_PX, TOKEN_PX};

/// Parse TOML into `T`, failing with every unknown key listed.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::new(text);
    let value: T = serde_ignored::deserialize(de, |path| {
        // Option layers show up as `?` segments.
        unknown.push(path.to_string().replace("?.", ""))
    })
        .map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// A user-supplied sheet raster with optional ground-truth masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetSource {
    pub id: SheetId,
    pub raster: PathBuf,
    pub split: Split,
    #[serde(default)]
    pub masks: BTreeMap<ClassName, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "d_sheets")]
    pub sheets: usize,
    /// The last `eval_sheets` sheets form the evaluation split.
    #[serde(default = "d_eval_sheets")]
    pub eval_sheets: usize,
    #[serde(default = "d_size")]
    pub size_px: usize,
    #[serde(default)]
    pub texture: TextureConfig,
    #[serde(default)]
    pub layout: LayoutConfig,
}

fn d_sheets() -> usize {
    4
}
fn d_eval_sheets() -> usize {
    1
}
fn d_size() -> usize {
    1920
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sheets: d_sheets(),
            eval_sheets: d_eval_sheets(),
            size_px: d_size(),
            texture: TextureConfig::default(),
            layout: LayoutConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingConfig {
    #[serde(default = "d_patch")]
    pub patch_px: usize,
    /// Side of the pixel block one token covers; fixed by the encoder depth.
    #[serde(default = "d_token")]
    pub token_px: usize,
}

fn d_patch() -> usize {
    PATCH_PX
}
fn d_token() -> usize {
    TOKEN_PX
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            patch_px: d_patch(),
            token_px: d_token(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LabelStageConfig {
    /// Legend image; generated from the synthetic textures when omitted.
    #[serde(default)]
    pub legend: Option<PathBuf>,
    /// Defaults to the mask oracle over the pipeline's ground truth.
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    /// Concurrency and retry policy.
    #[serde(default)]
    pub requests: LabelerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    /// `start:end:step` or a comma-separated list.
    #[serde(default = "d_thresholds")]
    pub thresholds: String,
    #[serde(default = "d_overlay")]
    pub overlay_alpha: f64,
}

fn d_thresholds() -> String {
    "0.1:0.9:0.1".into()
}
fn d_overlay() -> f64 {
    0.6
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            thresholds: d_thresholds(),
            overlay_alpha: d_overlay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub classes: Vec<ClassName>,
    /// Generate synthetic sheets instead of (or before) reading `sheets`.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub sheets: Vec<SheetSource>,
    #[serde(default)]
    pub tiling: TilingConfig,
    #[serde(default)]
    pub label: LabelStageConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

impl PipelineConfig {
    /// Read, check, and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and resolve paths without the semantic checks; single-stage
    /// commands take their defaults from files that need not describe a full run.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg: PipelineConfig = parse_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in &mut self.sheets {
            fix(&mut s.raster);
            s.masks.values_mut().for_each(fix);
        }
        if let Some(l) = &mut self.label.legend {
            fix(l);
        }
        if let Some(ProviderConfig::Oracle { masks_dir, .. }) = &mut self.label.provider {
            fix(masks_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes.is_empty() {
            problems.push("classes: must list at least one class".to_string());
        }
        if self.synth.is_none() && self.sheets.is_empty() {
            problems.push("sheets: no input sheets and no [synth] section".to_string());
        }
        if let Some(s) = &self.synth {
            if s.sheets == 0 || s.eval_sheets >= s.sheets {
                problems.push("synth: need sheets > eval_sheets".to_string());
            }
            if s.size_px < self.tiling.patch_px {
                problems.push("synth.size_px: smaller than one patch".to_string());
            }
        }
        if self.tiling.token_px != TOKEN_PX {
            problems.push(format!("tiling.token_px: the encoder produces {TOKEN_PX}px tokens"));
        }
        if self.tiling.patch_px == 0 || self.tiling.patch_px % TOKEN_PX != 0 {
            problems.push(format!("tiling.patch_px: must be a positive multiple of {TOKEN_PX}"));
        }
        if self.train.model.input_px != [self.tiling.patch_px, self.tiling.patch_px] {
            problems.push("train.model.input_px: must equal [patch_px, patch_px]".to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        if let Err(e) = parse_thresholds(&self.evaluate.thresholds) {
            problems.push(format!("evaluate.thresholds: {e}"));
        }
        if let Some(g) = self.extract.gate {
            if !(0.0..1.0).contains(&g) {
                problems.push("extract.gate: must be in [0,1)".to_string());
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.sheets {
            if !ids.insert(&s.id) {
                problems.push(format!("sheets: duplicate id {}", s.id));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_synthetic_config() {
        let c = PipelineConfig::from_toml("classes = [\"wood\"]\n[synth]\n").unwrap();
        assert_eq!(c.classes, vec![ClassName::Wood]);
        assert_eq!(c.synth.as_ref().unwrap().sheets, 4);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.tiling.patch_px, 384);
        assert_eq!(c.evaluate.thresholds, "0.1:0.9:0.1");
    }

    #[test]
    fn missing_classes_is_a_schema_error() {
        let e = PipelineConfig::from_toml("[synth]\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("classes")), "{e}");
    }

    #[test]
    fn all_unknown_keys_are_listed() {
        let e = PipelineConfig::from_toml(
            "classes = [\"wood\"]\nsed = 1\n[synth]\nsheet = 3\n[train]\nepoch = 2\n[train.model]\nwidth = [1]\n",
        )
        .unwrap_err();
        let Error::Config(m) = e else { panic!() };
        for key in ["sed", "synth.sheet", "train.epoch", "train.model.width"] {
            assert!(m.contains(key), "{m}");
        }
    }

    #[test]
    fn semantic_checks() {
        let e = PipelineConfig::from_toml("classes = []\n[tiling]\ntoken_px = 32\n").unwrap_err();
        let Error::Config(m) = e else { panic!() };
        assert!(m.contains("classes") && m.contains("token_px") && m.contains("sheets"), "{m}");
        let e = PipelineConfig::from_toml("classes = [\"wood\"]\n[synth]\n[evaluate]\nthresholds = \"0:2:1\"\n").unwrap_err();
        assert!(matches!(e, Error::Config(m) if m.contains("thresholds")));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "classes = [\"settlement\"]\n[[sheets]]\nid = \"a\"\nraster = \"a.png\"\nsplit = \"train\"\nmasks.settlement = \"m/a.png\"\n",
        )
        .unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.sheets[0].raster, dir.path().join("a.png"));
        assert_eq!(c.sheets[0].masks[&ClassName::Settlement], dir.path().join("m/a.png"));
    }
}
