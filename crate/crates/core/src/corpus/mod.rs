//! Synthetic multilingual corpora and the manifest/feature data model.

mod batching;
mod io;
mod language;
mod symbols;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use batching::{plan_batch_indices, plan_batches, BatchPlan};
pub use io::{decode_features, encode_features, read_features, write_features, Manifest, ManifestEntry, FEATURE_MAGIC};
pub use language::{
    gen_language_spec, sample_transcript, synthesize_features, CharPrototype, LanguageGenConfig, LanguageSpec,
    SharedPool,
};
pub use symbols::{SymbolTable, BLANK_TOKEN, SPACE_INDEX};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// A `frames × dim` matrix of `f32` features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let f = Features { frames, dim, data };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.dim == 0 {
            return Err(Error::Dimension(format!("{}x{} feature matrix", self.frames, self.dim)));
        }
        if self.data.len() != self.frames * self.dim {
            return Err(Error::Dimension(format!(
                "{}x{} features with {} values",
                self.frames,
                self.dim,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.frames, self.dim, self.data.iter().map(|&v| v as f64).collect())
    }

    /// Rounds a tensor to `f32` storage.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Features::new(t.rows, t.cols, t.data.iter().map(|&v| v as f32).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language_id: String,
    pub features: Features,
    pub transcript: Option<String>,
}

impl Utterance {
    pub fn duration_frames(&self) -> usize {
        self.features.frames
    }
}

/// Synthesizes one utterance for `transcript`.
pub fn synthesize_utterance(spec: &LanguageSpec, id: &str, transcript: &str, seed: u64) -> Result<Utterance> {
    Ok(Utterance {
        id: id.to_string(),
        language_id: spec.language_id.clone(),
        features: synthesize_features(spec, transcript, seed)?,
        transcript: Some(transcript.to_string()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageCorpusConfig {
    pub id: String,
    pub alphabet_size: usize,
    pub overlap: f64,
    pub noise_sigma: f64,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    /// First codepoint of the language's private characters.
    pub private_base: u32,
    /// Labeled utterances = `base_labeled × labeled_multiplier`.
    pub labeled_multiplier: f64,
    /// Unlabeled utterances = labeled count × this ratio.
    #[serde(default)]
    pub unlabeled_ratio: f64,
}

fn default_bias_scale() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub shared_pool_size: usize,
    #[serde(default = "one")]
    pub prototype_scale: f64,
    pub base_labeled: usize,
    pub valid_per_language: usize,
    pub transcript_chars: [usize; 2],
    pub long_transcript_chars: [usize; 2],
    pub char_frames: [usize; 2],
    #[serde(default = "default_space_weight")]
    pub space_weight: f64,
    /// Relative weight of a letter following itself; 0 rules out doubled letters.
    #[serde(default = "one")]
    pub repeat_weight: f64,
    #[serde(default)]
    pub lm_sentences: usize,
    pub languages: Vec<LanguageCorpusConfig>,
}

fn one() -> f64 {
    1.0
}

fn default_space_weight() -> f64 {
    2.0
}

impl CorpusConfig {
    pub fn labeled_count(&self, lang: &LanguageCorpusConfig) -> usize {
        (self.base_labeled as f64 * lang.labeled_multiplier).round() as usize
    }

    pub fn unlabeled_count(&self, lang: &LanguageCorpusConfig) -> usize {
        (self.labeled_count(lang) as f64 * lang.unlabeled_ratio).round() as usize
    }

    pub fn language_ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::invalid("corpus needs at least one language"));
        }
        let mut ids: Vec<&str> = self.languages.iter().map(|l| l.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.languages.len() {
            return Err(Error::invalid("duplicate language id"));
        }
        if !(self.space_weight >= 0.0 && self.repeat_weight >= 0.0) {
            return Err(Error::invalid("bigram weights must be nonnegative"));
        }
        for l in &self.languages {
            if l.id.is_empty() || l.id.contains(|c: char| !c.is_ascii_alphanumeric() && c != '_') {
                return Err(Error::invalid(format!("language id {:?} must be alphanumeric", l.id)));
            }
            if l.labeled_multiplier < 0.0 || l.unlabeled_ratio < 0.0 {
                return Err(Error::invalid("data multipliers must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LanguageData {
    pub spec: LanguageSpec,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
    /// Hidden transcripts of the unlabeled pool, for diagnostics only.
    pub unlabeled_truth: Vec<String>,
    pub lm_text: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub pool: SharedPool,
    pub languages: Vec<LanguageData>,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_VALID: u64 = 2;
const SPLIT_UNLABELED: u64 = 3;
const SPLIT_LM: u64 = 4;

fn gen_split(
    spec: &LanguageSpec,
    seed: u64,
    lang_idx: u64,
    split: u64,
    name: &str,
    n: usize,
    len_range: [usize; 2],
) -> Result<Vec<Utterance>> {
    (0..n)
        .map(|i| {
            let ts = derive_seed(seed, &[lang_idx, split, i as u64, 0]);
            let fs = derive_seed(seed, &[lang_idx, split, i as u64, 1]);
            let text = sample_transcript(spec, len_range, ts)?;
            let id = format!("{}-{}-{:06}", spec.language_id, name, i);
            synthesize_utterance(spec, &id, &text, fs)
        })
        .collect()
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let pool = SharedPool::generate(cfg.seed, cfg.shared_pool_size, cfg.feature_dim, cfg.prototype_scale)?;
    let mut languages = Vec::new();
    for (li, lc) in cfg.languages.iter().enumerate() {
        let li = li as u64;
        let gen_cfg = LanguageGenConfig {
            language_id: lc.id.clone(),
            alphabet_size: lc.alphabet_size,
            overlap: lc.overlap,
            feature_dim: cfg.feature_dim,
            noise_sigma: lc.noise_sigma,
            private_base: lc.private_base,
            prototype_scale: cfg.prototype_scale,
            bias_scale: lc.bias_scale,
            char_frames: cfg.char_frames,
            space_weight: cfg.space_weight,
            repeat_weight: cfg.repeat_weight,
        };
        let spec = gen_language_spec(derive_seed(cfg.seed, &[li, 0]), &gen_cfg, &pool)?;
        let train = gen_split(&spec, cfg.seed, li, SPLIT_TRAIN, "train", cfg.labeled_count(lc), cfg.transcript_chars)?;
        let valid = gen_split(&spec, cfg.seed, li, SPLIT_VALID, "valid", cfg.valid_per_language, cfg.transcript_chars)?;
        let mut unlabeled = gen_split(
            &spec,
            cfg.seed,
            li,
            SPLIT_UNLABELED,
            "unlab",
            cfg.unlabeled_count(lc),
            cfg.long_transcript_chars,
        )?;
        let unlabeled_truth = unlabeled.iter_mut().map(|u| u.transcript.take().unwrap_or_default()).collect();
        let lm_text = (0..cfg.lm_sentences)
            .map(|i| sample_transcript(&spec, cfg.transcript_chars, derive_seed(cfg.seed, &[li, SPLIT_LM, i as u64])))
            .collect::<Result<_>>()?;
        languages.push(LanguageData {
            spec,
            train,
            valid,
            unlabeled,
            unlabeled_truth,
            lm_text,
        });
    }
    Ok(Corpus { pool, languages })
}

/// File names inside a corpus directory.
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusLayout { root: root.into() }
    }

    pub fn manifest(&self, language: &str, split: &str) -> PathBuf {
        self.root.join(format!("{language}.{split}.tsv"))
    }

    pub fn lm_text(&self, language: &str) -> PathBuf {
        self.root.join(format!("{language}.lm.txt"))
    }

    pub fn languages_json(&self) -> PathBuf {
        self.root.join("languages.json")
    }

    pub fn feature_rel(id: &str) -> PathBuf {
        PathBuf::from("features").join(format!("{id}.fea"))
    }
}

pub fn manifest_for(utts: &[Utterance]) -> Result<Manifest> {
    Manifest::new(
        utts.iter()
            .map(|u| ManifestEntry {
                id: u.id.clone(),
                feature_path: CorpusLayout::feature_rel(&u.id),
                duration_frames: u.duration_frames(),
                language_id: u.language_id.clone(),
                transcript: u.transcript.clone(),
            })
            .collect(),
    )
}

/// Writes feature files for `utts` under `dir/features` and a manifest at `manifest_path` (inside `dir`).
pub fn write_dataset(dir: &Path, manifest_path: &Path, utts: &[Utterance]) -> Result<Manifest> {
    for u in utts {
        write_features(&dir.join(CorpusLayout::feature_rel(&u.id)), &u.features)?;
    }
    let m = manifest_for(utts)?;
    m.write(manifest_path)?;
    Ok(m)
}

pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<CorpusLayout> {
    let layout = CorpusLayout::new(root);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let specs: Vec<&LanguageSpec> = corpus.languages.iter().map(|l| &l.spec).collect();
    let json = serde_json::to_string_pretty(&specs)?;
    fs::write(layout.languages_json(), json).map_err(|e| Error::io(layout.languages_json(), e))?;
    for lang in &corpus.languages {
        let id = &lang.spec.language_id;
        write_dataset(root, &layout.manifest(id, "train"), &lang.train)?;
        write_dataset(root, &layout.manifest(id, "valid"), &lang.valid)?;
        write_dataset(root, &layout.manifest(id, "unlabeled"), &lang.unlabeled)?;
        let truth: String = lang
            .unlabeled
            .iter()
            .zip(&lang.unlabeled_truth)
            .map(|(u, t)| format!("{}\t{}\n", u.id, t))
            .collect();
        let p = layout.manifest(id, "unlabeled.truth");
        fs::write(&p, truth).map_err(|e| Error::io(&p, e))?;
        let lm: String = lang.lm_text.iter().map(|s| format!("{s}\n")).collect();
        fs::write(layout.lm_text(id), lm).map_err(|e| Error::io(layout.lm_text(id), e))?;
    }
    Ok(layout)
}

/// Loads every utterance referenced by a manifest, checking durations.
pub fn load_utterances(manifest_path: &Path) -> Result<Vec<Utterance>> {
    let m = Manifest::read(manifest_path)?;
    m.entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let features = read_features(&Manifest::resolve(manifest_path, &e.feature_path))?;
            if features.frames != e.duration_frames {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: format!("duration {} but feature file has {} frames", e.duration_frames, features.frames),
                });
            }
            Ok(Utterance {
                id: e.id.clone(),
                language_id: e.language_id.clone(),
                features,
                transcript: e.transcript.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> CorpusConfig {
        serde_json::from_str(
            r#"{
            "seed": 5, "feature_dim": 4, "shared_pool_size": 6, "base_labeled": 10,
            "valid_per_language": 3, "transcript_chars": [3, 6], "long_transcript_chars": [10, 20],
            "char_frames": [4, 6], "lm_sentences": 5,
            "languages": [
              {"id": "aa", "alphabet_size": 5, "overlap": 0.6, "noise_sigma": 0.2, "private_base": 945, "labeled_multiplier": 1.0, "unlabeled_ratio": 2.0},
              {"id": "bb", "alphabet_size": 4, "overlap": 0.5, "noise_sigma": 0.2, "private_base": 1072, "labeled_multiplier": 0.5}
            ]}"#,
        )
        .unwrap()
    }

    #[test]
    fn generation_counts_and_determinism() {
        let cfg = tiny_config();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.languages[0].train.len(), 10);
        assert_eq!(a.languages[0].unlabeled.len(), 20);
        assert_eq!(a.languages[1].train.len(), 5);
        assert!(a.languages[1].unlabeled.is_empty());
        for (x, y) in a.languages.iter().zip(&b.languages) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.unlabeled, y.unlabeled);
            assert_eq!(x.spec, y.spec);
        }
        assert!(a.languages[0].unlabeled.iter().all(|u| u.transcript.is_none()));
    }

    #[test]
    fn symbol_round_trip_over_generated_transcripts() {
        let c = generate_corpus(&tiny_config()).unwrap();
        let all: Vec<&str> = c
            .languages
            .iter()
            .flat_map(|l| l.train.iter().chain(&l.valid))
            .filter_map(|u| u.transcript.as_deref())
            .collect();
        let table = SymbolTable::build(all.iter().copied());
        for t in all {
            assert_eq!(table.decode(&table.encode(t).unwrap()), t);
        }
    }

    #[test]
    fn corpus_written_and_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&tiny_config()).unwrap();
        let layout = write_corpus(&c, dir.path()).unwrap();
        let back = load_utterances(&layout.manifest("aa", "train")).unwrap();
        assert_eq!(back, c.languages[0].train);
        let unl = load_utterances(&layout.manifest("aa", "unlabeled")).unwrap();
        assert!(unl.iter().all(|u| u.transcript.is_none()));
        assert!(layout.lm_text("bb").exists());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad = r#"{"seed": 1, "bogus": 2}"#;
        assert!(serde_json::from_str::<CorpusConfig>(bad).is_err());
    }
}
