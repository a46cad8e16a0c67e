use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::lm::BeamConfig;
use crate::model::{AdagradConfig, EncoderConfig, SpecAugmentConfig};
use crate::slimipl::CacheConfig;

/// The bundled three-language toy preset.
pub const TOY_PRESET: &str = include_str!("../../presets/preset-toy3.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_lr")]
    pub lr0: f64,
    /// Fraction of a long stage after which the LR is halved once.
    #[serde(default = "half")]
    pub halve_at: Option<f64>,
    #[serde(default = "default_budget")]
    pub frame_budget: usize,
    #[serde(default)]
    pub specaugment: Option<SpecAugmentConfig>,
    #[serde(default = "yes")]
    pub dropout: bool,
    #[serde(default)]
    pub optimizer: AdagradConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlimIplSection {
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default = "default_ssl_updates")]
    pub ssl_updates: u64,
    #[serde(default = "default_lr_low")]
    pub lr0: f64,
    #[serde(default = "default_budget")]
    pub unlabeled_frame_budget: usize,
    /// Apply SpecAugment to pseudo-labeled batches as well.
    #[serde(default = "yes")]
    pub augment_unlabeled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "greedy")]
    pub mode: DecodeMode,
    #[serde(default)]
    pub beam: BeamConfig,
    #[serde(default = "default_order")]
    pub lm_order: usize,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_beta_grid")]
    pub beta_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Duration bucket edges in frames.
    #[serde(default = "default_edges")]
    pub duration_edges: Vec<usize>,
    /// Validation interval in (scaled) updates during training stages.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalMode {
    Finetune,
    FromScratchBase,
    FromScratchLarge,
}

/// Stage schedule. Update counts are given at full scale and multiplied by
/// `update_scale` (together with the slimIPL warmups) before use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    #[serde(default = "one")]
    pub update_scale: f64,
    #[serde(default = "default_supervised")]
    pub supervised_updates: u64,
    #[serde(default = "default_finetune")]
    pub finetune_updates: u64,
    #[serde(default = "default_lr_low")]
    pub finetune_lr: f64,
    /// LID weight during monolingual fine-tuning.
    #[serde(default)]
    pub finetune_gamma: f64,
    #[serde(default = "default_final_mode")]
    pub final_mode: FinalMode,
    #[serde(default = "default_final")]
    pub final_updates: u64,
    #[serde(default = "default_lr_low")]
    pub scratch_lr0: f64,
    #[serde(default = "default_lr_low")]
    pub continue_lr0: f64,
    #[serde(default = "default_specaugment_delay")]
    pub specaugment_delay_updates: u64,
    #[serde(default = "yes")]
    pub finetune_back: bool,
    #[serde(default = "default_back")]
    pub finetune_back_updates: u64,
    #[serde(default = "default_lr_low")]
    pub finetune_back_lr: f64,
    #[serde(default = "default_supervised")]
    pub monolingual_updates: u64,
    /// Empty: every corpus language.
    #[serde(default)]
    pub labeled_languages: Vec<String>,
    /// Empty: every labeled language that has unlabeled data.
    #[serde(default)]
    pub unlabeled_languages: Vec<String>,
    /// Defaults to the labeled language with the fewest utterances.
    #[serde(default)]
    pub target_language: Option<String>,
    #[serde(default = "default_gammas")]
    pub gamma_sweep: Vec<f64>,
    /// Pairs `(labeled, unlabeled)` for the wrong-language scenario.
    #[serde(default)]
    pub wrong_language: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "toy_corpus")]
    pub corpus: CorpusConfig,
    #[serde(default = "default_model")]
    pub model: EncoderConfig,
    #[serde(default = "default_of")]
    pub train: TrainConfig,
    #[serde(default = "default_of")]
    pub slimipl: SlimIplSection,
    #[serde(default = "default_of")]
    pub decode: DecodeConfig,
    #[serde(default = "default_of")]
    pub eval: EvalConfig,
    #[serde(default = "default_of")]
    pub recipe: RecipeConfig,
}

fn default_of<T: for<'de> Deserialize<'de>>() -> T {
    serde_json::from_str("{}").expect("section defaults")
}

fn one() -> f64 {
    1.0
}
fn half() -> Option<f64> {
    Some(0.5)
}
fn yes() -> bool {
    true
}
fn greedy() -> DecodeMode {
    DecodeMode::Greedy
}
fn default_lr() -> f64 {
    0.03
}
fn default_lr_low() -> f64 {
    0.01
}
fn default_budget() -> usize {
    4000
}
fn default_ssl_updates() -> u64 {
    100_000
}
fn default_order() -> usize {
    4
}
fn default_alpha_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}
fn default_beta_grid() -> Vec<f64> {
    vec![-1.0, 0.0, 1.0, 2.0]
}
fn default_edges() -> Vec<usize> {
    vec![1000, 1500, 2000]
}
fn default_eval_every() -> u64 {
    10_000
}
fn default_final_mode() -> FinalMode {
    FinalMode::FromScratchBase
}
fn default_supervised() -> u64 {
    500_000
}
fn default_final() -> u64 {
    1_000_000
}
fn default_back() -> u64 {
    200_000
}
fn default_finetune() -> u64 {
    10_000
}
fn default_specaugment_delay() -> u64 {
    50_000
}
fn default_gammas() -> Vec<f64> {
    vec![0.0, 0.1, 1.0, 10.0]
}
fn default_model() -> EncoderConfig {
    EncoderConfig::new(0)
}
fn toy_corpus() -> CorpusConfig {
    toy_preset().corpus
}

/// The parsed bundled preset.
pub fn toy_preset() -> RunConfig {
    serde_json::from_str(TOY_PRESET).expect("bundled preset parses")
}

impl Default for RunConfig {
    fn default() -> Self {
        toy_preset()
    }
}

impl RecipeConfig {
    pub fn scaled(&self, n: u64) -> u64 {
        (n as f64 * self.update_scale).round() as u64
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn resolve(&mut self) {
        if self.model.input_dim == 0 {
            self.model.input_dim = self.corpus.feature_dim;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        if self.model.input_dim != self.corpus.feature_dim {
            return Err(Error::Dimension(format!(
                "model input_dim {} differs from corpus feature_dim {}",
                self.model.input_dim, self.corpus.feature_dim
            )));
        }
        let r = &self.recipe;
        if !(r.update_scale > 0.0) {
            return Err(Error::invalid("update_scale must be positive"));
        }
        for lr in [self.train.lr0, self.slimipl.lr0, r.finetune_lr, r.scratch_lr0, r.continue_lr0, r.finetune_back_lr] {
            if !(lr > 0.0) {
                return Err(Error::invalid("learning rates must be positive"));
            }
        }
        if let Some(h) = self.train.halve_at {
            if !(0.0..=1.0).contains(&h) {
                return Err(Error::invalid("halve_at must lie in [0, 1]"));
            }
        }
        if self.train.frame_budget == 0 || self.slimipl.unlabeled_frame_budget == 0 {
            return Err(Error::invalid("frame budgets must be >= 1"));
        }
        let known = self.corpus.language_ids();
        let check = |l: &String| {
            if known.contains(l) {
                Ok(())
            } else {
                Err(Error::UnknownLanguage(l.clone()))
            }
        };
        r.labeled_languages.iter().try_for_each(check)?;
        r.unlabeled_languages.iter().try_for_each(check)?;
        r.target_language.iter().try_for_each(check)?;
        if let Some((a, b)) = &r.wrong_language {
            check(a)?;
            check(b)?;
        }
        let labeled = self.labeled_languages();
        if let Some(l) = r.unlabeled_languages.iter().find(|l| !labeled.contains(l)) {
            return Err(Error::invalid(format!(
                "unlabeled language {l} is not among the labeled languages"
            )));
        }
        Ok(())
    }

    pub fn labeled_languages(&self) -> Vec<String> {
        if self.recipe.labeled_languages.is_empty() {
            self.corpus.language_ids()
        } else {
            self.recipe.labeled_languages.clone()
        }
    }

    pub fn unlabeled_languages(&self) -> Vec<String> {
        if !self.recipe.unlabeled_languages.is_empty() {
            return self.recipe.unlabeled_languages.clone();
        }
        let labeled = self.labeled_languages();
        self.corpus
            .languages
            .iter()
            .filter(|l| labeled.contains(&l.id) && self.corpus.unlabeled_count(l) > 0)
            .map(|l| l.id.clone())
            .collect()
    }

    pub fn target_language(&self) -> String {
        if let Some(t) = &self.recipe.target_language {
            return t.clone();
        }
        let labeled = self.labeled_languages();
        self.corpus
            .languages
            .iter()
            .filter(|l| labeled.contains(&l.id))
            .min_by_key(|l| self.corpus.labeled_count(l))
            .map(|l| l.id.clone())
            .unwrap_or_default()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_parses_and_validates() {
        let cfg = RunConfig::from_json(TOY_PRESET).unwrap();
        assert_eq!(cfg.model.input_dim, cfg.corpus.feature_dim);
        assert_eq!(cfg.corpus.languages.len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"gama": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"slimipl": {"cache": {"size": 3}}}"#).is_err());
    }

    #[test]
    fn section_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.train.gamma, 1.0);
        assert_eq!(cfg.slimipl.cache.cache_size, 1000);
        assert_eq!(cfg.slimipl.cache.replace_prob, 0.1);
        assert_eq!(cfg.slimipl.cache.lambda, 10);
        assert_eq!(cfg.slimipl.cache.pl_max_len, 630);
        assert_eq!(cfg.decode.lm_order, 4);
        assert_eq!((cfg.model.conv_filter_len, cfg.model.conv_stride), (7, 3));
        assert_eq!(cfg.recipe.scratch_lr0, 0.01);
        assert_eq!(cfg.train.lr0, 0.03);
    }

    #[test]
    fn scaling_rounds() {
        let mut r: RecipeConfig = default_of();
        r.update_scale = 0.004;
        assert_eq!(r.scaled(10_000), 40);
        assert_eq!(r.scaled(50_000), 200);
    }
}
