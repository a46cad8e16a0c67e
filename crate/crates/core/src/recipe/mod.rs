//! The multi-stage pipeline: supervised multilingual training, per-language
//! fine-tuning and slimIPL, pooled final training and labeled-only
//! fine-tuning, run as resumable stages inside one run directory.

mod config;
mod scenario;

pub use config::{
    toy_preset, DecodeConfig, DecodeMode, EvalConfig, FinalMode, RecipeConfig, RunConfig, SlimIplSection, TrainConfig,
    TOY_PRESET,
};
pub use scenario::{run_scenario, ScenarioReport, SCENARIOS};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_utterances, CorpusLayout, Manifest, ManifestEntry, SymbolTable, Utterance};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Scored};
use crate::model::{checkpoint_hash, load_checkpoint, save_checkpoint, LrSchedule, Model, TrainState};
use crate::rng::{derive_seed, str_tag};
use crate::slimipl::{final_pseudo_labels, ssl_train, SlimIplConfig, SslStats};
use crate::train::{
    greedy_transcript, labeled_samples, lid_accuracy, run_supervised, validation_cer, write_curve, write_log, Sample,
    StepLog, StepOptions, ValidSet, Validation,
};

/// Provenance of one pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub input_checkpoint: Option<String>,
    pub output_checkpoint: String,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    /// Other files the stage wrote, with their sha256.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckp"))
    }
    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.jsonl"))
    }
    pub fn curve(&self, name: &str) -> PathBuf {
        self.root.join("curves").join(format!("{name}.csv"))
    }
    pub fn stage_record(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }
    pub fn pl_manifest(&self, language: &str) -> PathBuf {
        self.root.join("pl").join(format!("{language}.pl.tsv"))
    }
    pub fn report(&self, name: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join("reports");
        (dir.join(format!("{name}.json")), dir.join(format!("{name}.tsv")))
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in ["checkpoints", "logs", "curves", "stages", "pl", "reports"] {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct LanguageData {
    pub id: String,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
}

/// Loads the train/valid/unlabeled splits of `languages` from a corpus directory.
pub fn load_languages(corpus_dir: &Path, languages: &[String]) -> Result<BTreeMap<String, LanguageData>> {
    let layout = CorpusLayout::new(corpus_dir);
    let mut out = BTreeMap::new();
    for l in languages {
        let split = |name: &str| -> Result<Vec<Utterance>> {
            let p = layout.manifest(l, name);
            if p.exists() || name != "unlabeled" {
                load_utterances(&p)
            } else {
                Ok(Vec::new())
            }
        };
        out.insert(
            l.clone(),
            LanguageData {
                id: l.clone(),
                train: split("train")?,
                valid: split("valid")?,
                unlabeled: split("unlabeled")?,
            },
        );
    }
    Ok(out)
}

/// Output of a stage body before it is persisted.
pub struct StageResult {
    pub state: TrainState,
    pub log: Vec<StepLog>,
    pub curve: Vec<(u64, f64)>,
    pub metrics: BTreeMap<String, f64>,
}

/// Loaded corpus plus everything needed to run stages in a run directory.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub seed: u64,
    pub ws: Workspace,
    pub data: BTreeMap<String, LanguageData>,
    pub symbols: SymbolTable,
    /// LID classes, in order.
    pub languages: Vec<String>,
    corpus_path: PathBuf,
    data_hash: String,
}

/// How a stage obtained its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Reused,
}

impl Pipeline {
    /// Opens a run directory whose corpus lives at `corpus_dir`.
    pub fn open(cfg: RunConfig, seed: u64, out_dir: &Path, corpus_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let ws = Workspace::new(out_dir);
        ws.create_dirs()?;
        let languages = cfg.labeled_languages();
        let mut all = languages.clone();
        if let Some((a, b)) = &cfg.recipe.wrong_language {
            for l in [a, b] {
                if !all.contains(l) {
                    all.push(l.clone());
                }
            }
        }
        let data = load_languages(corpus_dir, &all)?;
        let symbols = SymbolTable::build(
            languages
                .iter()
                .flat_map(|l| data[l].train.iter())
                .filter_map(|u| u.transcript.as_deref()),
        );
        let layout = CorpusLayout::new(corpus_dir);
        let mut h = Sha256::new();
        for l in &all {
            for split in ["train", "valid", "unlabeled"] {
                let p = layout.manifest(l, split);
                if p.exists() {
                    h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
                }
            }
        }
        Ok(Pipeline {
            cfg,
            seed,
            ws,
            data,
            symbols,
            languages,
            corpus_path: corpus_dir.to_path_buf(),
            data_hash: hex::encode(h.finalize()),
        })
    }

    pub fn lang(&self, id: &str) -> Result<&LanguageData> {
        self.data.get(id).ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    pub fn scaled(&self, n: u64) -> u64 {
        self.cfg.recipe.scaled(n)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, &[str_tag(stage)])
    }

    pub fn new_model(&self, tag: &str, large: bool) -> Result<Model> {
        let cfg = if large { self.cfg.model.large() } else { self.cfg.model.clone() };
        Model::new(cfg, self.symbols.clone(), self.languages.clone(), self.stage_seed(tag))
    }

    pub fn valid_sets(&self, langs: &[String]) -> Result<Vec<ValidSet>> {
        langs
            .iter()
            .map(|l| Ok(ValidSet::from_utterances(l, &self.lang(l)?.valid)))
            .collect()
    }

    pub fn labeled(&self, model: &Model, langs: &[String], with_lid: bool) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for l in langs {
            out.extend(labeled_samples(model, &self.lang(l)?.train, with_lid)?);
        }
        Ok(out)
    }

    /// Unlabeled utterances of `lang` with empty targets; `lid` carries the
    /// class of `lid_lang` for optional LID supervision.
    pub fn unlabeled(&self, model: &Model, lang: &str, lid_lang: &str) -> Result<Vec<Sample>> {
        let lid = model.language_index(lid_lang).ok();
        Ok(self
            .lang(lang)?
            .unlabeled
            .iter()
            .map(|u| Sample {
                id: u.id.clone(),
                language_id: u.language_id.clone(),
                features: u.features.to_tensor(),
                target: Vec::new(),
                lid,
            })
            .collect())
    }

    pub fn step_options(&self, gamma: f64, specaugment_from: u64) -> StepOptions {
        StepOptions {
            gamma,
            dropout: self.cfg.train.dropout,
            specaugment: self.cfg.train.specaugment,
            specaugment_from,
        }
    }

    pub fn validation<'v>(&self, sets: &'v [ValidSet]) -> Validation<'v> {
        Validation {
            sets,
            every: self.scaled(self.cfg.eval.eval_every).max(1),
        }
    }

    /// Validation CER of `model` on every labeled language, plus LID accuracy.
    pub fn snapshot(&self, model: &Model) -> Result<BTreeMap<String, f64>> {
        let sets = self.valid_sets(&self.languages)?;
        let cers = validation_cer(model, &sets)?;
        let mut m: BTreeMap<String, f64> = cers.iter().map(|(k, v)| (format!("cer_{k}"), *v)).collect();
        m.insert("cer_macro".into(), cers.values().sum::<f64>() / cers.len().max(1) as f64);
        m.insert("lid_accuracy".into(), lid_accuracy(model, &sets)?);
        Ok(m)
    }

    fn config_hash(&self, stage: &str, input: Option<&str>, params: &serde_json::Value) -> Result<String> {
        let doc = serde_json::json!({
            "stage": stage,
            "seed": self.seed,
            "input": input,
            "params": params,
            "model": self.cfg.model,
            "train": self.cfg.train,
            "data": self.data_hash,
        });
        Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
    }

    fn reusable(&self, stage: &str, hash: &str) -> Result<Option<(TrainState, StageRecord)>> {
        let rec_path = self.ws.stage_record(stage);
        let ckp = self.ws.checkpoint(stage);
        if !rec_path.exists() || !ckp.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        let Ok(rec) = serde_json::from_str::<StageRecord>(&text) else {
            return Ok(None);
        };
        if rec.config_hash != hash {
            return Ok(None);
        }
        let Ok(state) = load_checkpoint(&ckp) else {
            return Ok(None);
        };
        if checkpoint_hash(&state)? != rec.output_checkpoint {
            return Ok(None);
        }
        for (name, want) in &rec.outputs {
            let p = self.ws.root.join(name);
            if !p.exists() || &file_hash(&p)? != want {
                return Ok(None);
            }
        }
        Ok(Some((state, rec)))
    }

    /// Runs `body` unless a record with the same configuration hash and
    /// intact outputs already exists. `extra` names files (relative to the
    /// run directory) the body writes besides the checkpoint.
    pub fn stage(
        &self,
        stage: &str,
        input: Option<&TrainState>,
        params: serde_json::Value,
        extra: &[String],
        body: impl FnOnce() -> Result<StageResult>,
    ) -> Result<(TrainState, StageRecord, StageStatus)> {
        let input_hash = input.map(checkpoint_hash).transpose()?;
        let hash = self.config_hash(stage, input_hash.as_deref(), &params)?;
        if let Some((state, rec)) = self.reusable(stage, &hash)? {
            info!("stage {stage}: up to date");
            return Ok((state, rec, StageStatus::Reused));
        }
        info!("stage {stage}: running");
        let res = body()?;
        save_checkpoint(&self.ws.checkpoint(stage), &res.state)?;
        write_log(&self.ws.log(stage), &res.log)?;
        write_curve(&self.ws.curve(stage), "cer_macro", &res.curve)?;
        let mut outputs = BTreeMap::new();
        for name in extra {
            outputs.insert(name.clone(), file_hash(&self.ws.root.join(name))?);
        }
        let rec = StageRecord {
            stage: stage.to_string(),
            input_checkpoint: input_hash,
            output_checkpoint: checkpoint_hash(&res.state)?,
            config_hash: hash,
            metrics: res.metrics,
            outputs,
        };
        write_json(&self.ws.stage_record(stage), &rec)?;
        info!("stage {stage}: done {:?}", rec.metrics);
        Ok((res.state, rec, StageStatus::Ran))
    }

    fn supervised_result(&self, out: crate::train::StageOutput) -> Result<StageResult> {
        let mut metrics = self.snapshot(&out.state.model)?;
        metrics.insert("selected_step".into(), out.selected_step as f64);
        metrics.insert("last_step".into(), out.last_counter as f64);
        if let (Some(a), Some(b)) = (out.log.first(), out.log.last()) {
            metrics.insert("first_loss".into(), a.loss);
            metrics.insert("last_loss".into(), b.loss);
        }
        metrics.insert("skipped_inadmissible".into(), out.counters.skipped_inadmissible as f64);
        let curve = curve_of(&out.history);
        Ok(StageResult {
            state: out.state,
            log: out.log,
            curve,
            metrics,
        })
    }

    /// Pooled multilingual supervised training from a fresh model.
    pub fn train_supervised_multilingual(&self, stage: &str, gamma: f64) -> Result<(TrainState, StageRecord)> {
        if self.languages.len() < 2 {
            return Err(Error::invalid("multilingual training needs at least two labeled languages"));
        }
        let n = self.scaled(self.cfg.recipe.supervised_updates);
        let params = serde_json::json!({"op": "supervised", "gamma": gamma, "updates": n, "langs": self.languages});
        let (s, r, _) = self.stage(stage, None, params, &[], || {
            let model = self.new_model(&format!("{stage}/init"), false)?;
            let mut state = TrainState::new(model, LrSchedule::constant(self.cfg.train.lr0), self.stage_seed(stage));
            state.optimizer = self.cfg.train.optimizer;
            state.restart_optimizer(self.cfg.train.lr0, self.halve(n));
            let data = self.labeled(&state.model, &self.languages, true)?;
            let sets = self.valid_sets(&self.languages)?;
            let out = run_supervised(
                state,
                &data,
                n,
                self.cfg.train.frame_budget,
                &self.step_options(gamma, 0),
                stage,
                Some(self.validation(&sets)),
            )?;
            self.supervised_result(out)
        })?;
        Ok((s, r))
    }

    fn halve(&self, n: u64) -> Option<u64> {
        self.cfg.train.halve_at.map(|f| (n as f64 * f).round() as u64)
    }

    /// Monolingual continuation of `base` on one language's labeled data.
    pub fn finetune_language(&self, stage: &str, base: &TrainState, lang: &str, n_updates: u64) -> Result<(TrainState, StageRecord)> {
        if !self.languages.iter().any(|l| l == lang) {
            return Err(Error::UnknownLanguage(lang.to_string()));
        }
        let r = &self.cfg.recipe;
        let params = serde_json::json!({"op": "finetune", "lang": lang, "updates": n_updates, "lr": r.finetune_lr, "gamma": r.finetune_gamma});
        let (s, rec, _) = self.stage(stage, Some(base), params, &[], || {
            let mut state = base.clone();
            state.seed = self.stage_seed(stage);
            state.restart_optimizer(r.finetune_lr, None);
            let langs = [lang.to_string()];
            let data = self.labeled(&state.model, &langs, r.finetune_gamma > 0.0)?;
            let sets = self.valid_sets(&langs)?;
            let out = run_supervised(
                state,
                &data,
                n_updates,
                self.cfg.train.frame_budget,
                &self.step_options(r.finetune_gamma, 0),
                stage,
                Some(self.validation(&sets)),
            )?;
            self.supervised_result(out)
        })?;
        Ok((s, rec))
    }

    /// Runtime slimIPL configuration with update counts scaled.
    pub fn slimipl_config(&self, always_crop: bool) -> SlimIplConfig {
        let s = &self.cfg.slimipl;
        let mut cache = s.cache.clone();
        cache.labeled_warmup_updates = self.scaled(cache.labeled_warmup_updates);
        cache.crop_warmup_updates = self.scaled(cache.crop_warmup_updates);
        cache.always_crop |= always_crop;
        let gamma = self.cfg.recipe.finetune_gamma;
        SlimIplConfig {
            cache,
            ssl_updates: self.scaled(s.ssl_updates),
            labeled_frame_budget: self.cfg.train.frame_budget,
            unlabeled_frame_budget: s.unlabeled_frame_budget,
            labeled: self.step_options(gamma, 0),
            unlabeled: StepOptions {
                specaugment: if s.augment_unlabeled { self.cfg.train.specaugment } else { None },
                ..self.step_options(gamma, 0)
            },
            eval_every: self.scaled(self.cfg.eval.eval_every),
        }
    }

    /// slimIPL for `lang` with `unlabeled_lang`'s pool, then the final
    /// filtered full-mode PL manifest for that pool.
    pub fn run_slimipl_language(
        &self,
        stage: &str,
        start: &TrainState,
        lang: &str,
        unlabeled_lang: &str,
        always_crop: bool,
    ) -> Result<(TrainState, StageRecord, Option<SslStats>)> {
        if self.lang(unlabeled_lang)?.unlabeled.is_empty() {
            return Err(Error::invalid(format!("language {unlabeled_lang} has no unlabeled data")));
        }
        let cfg = self.slimipl_config(always_crop);
        let pl_rel = format!("pl/{stage}.pl.tsv");
        let params = serde_json::json!({"op": "slimipl", "lang": lang, "unlabeled": unlabeled_lang, "cfg": cfg, "lr": self.cfg.slimipl.lr0});
        let mut stats = None;
        let (s, rec, _) = self.stage(stage, Some(start), params, std::slice::from_ref(&pl_rel), || {
            let mut state = start.clone();
            state.seed = self.stage_seed(stage);
            state.restart_optimizer(self.cfg.slimipl.lr0, None);
            let langs = [lang.to_string()];
            let with_lid = self.cfg.recipe.finetune_gamma > 0.0;
            let labeled = self.labeled(&state.model, &langs, with_lid)?;
            let unlabeled = self.unlabeled(&state.model, unlabeled_lang, lang)?;
            let sets = self.valid_sets(&langs)?;
            let out = ssl_train(state, &labeled, &unlabeled, &cfg, Some(&sets))?;
            let (kept, dropped) = self.write_pl_manifest(&out.state.model, unlabeled_lang, &unlabeled, &self.ws.root.join(&pl_rel))?;
            let mut metrics = self.snapshot(&out.state.model)?;
            metrics.insert("selected_step".into(), out.selected_step as f64);
            metrics.insert("last_step".into(), out.last_counter as f64);
            metrics.insert("pl_kept".into(), kept as f64);
            metrics.insert("pl_dropped".into(), dropped as f64);
            metrics.insert("cache_replacements".into(), out.stats.replacements as f64);
            metrics.insert("cache_pl_filtered".into(), out.stats.pl_filtered as f64);
            metrics.insert("cropped_generations".into(), out.stats.cropped_generations as f64);
            metrics.insert("full_generations".into(), out.stats.full_generations as f64);
            let curve = curve_of(&out.history);
            stats = Some(out.stats);
            Ok(StageResult {
                state: out.state,
                log: out.log,
                curve,
                metrics,
            })
        })?;
        Ok((s, rec, stats))
    }

    fn write_pl_manifest(&self, model: &Model, lang: &str, utts: &[Sample], path: &Path) -> Result<(usize, u64)> {
        let (kept, dropped) = final_pseudo_labels(model, utts, self.cfg.slimipl.cache.pl_max_len)?;
        let layout = CorpusLayout::new(self.corpus_rel_from(path));
        let entries = kept
            .iter()
            .map(|(i, pl)| {
                let u = &utts[*i];
                ManifestEntry {
                    id: u.id.clone(),
                    feature_path: layout.root.join(CorpusLayout::feature_rel(&u.id)),
                    duration_frames: u.frames(),
                    language_id: lang.to_string(),
                    transcript: Some(model.symbols.decode(pl)),
                }
            })
            .collect();
        let m = Manifest::new(entries)?;
        m.write(path)?;
        Ok((m.len(), dropped))
    }

    /// Corpus directory as seen from the directory holding `manifest`.
    fn corpus_rel_from(&self, manifest: &Path) -> PathBuf {
        let corpus = self.corpus_dir();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        match (corpus.strip_prefix(&self.ws.root), dir.strip_prefix(&self.ws.root)) {
            (Ok(c), Ok(d)) => {
                let mut p = PathBuf::new();
                for _ in d.components() {
                    p.push("..");
                }
                p.join(c)
            }
            _ => corpus,
        }
    }

    fn corpus_dir(&self) -> PathBuf {
        self.corpus_path.clone()
    }

    /// Reads PL manifests into samples without LID targets.
    pub fn pl_samples(&self, model: &Model, manifests: &[PathBuf]) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for m in manifests {
            let utts = load_utterances(m)?;
            for mut s in labeled_samples(model, &utts, false)? {
                s.lid = None;
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Pooled labeled + pseudo-labeled training.
    pub fn train_final(&self, stage: &str, mode: FinalMode, base: Option<&TrainState>, pl_manifests: &[PathBuf]) -> Result<(TrainState, StageRecord)> {
        let r = &self.cfg.recipe;
        let n = self.scaled(r.final_updates);
        let delay = self.scaled(r.specaugment_delay_updates);
        let input = match mode {
            FinalMode::Finetune => Some(base.ok_or_else(|| Error::invalid("final_mode finetune needs a base checkpoint"))?),
            _ => None,
        };
        let mut pl_hashes = Vec::new();
        for m in pl_manifests {
            pl_hashes.push(file_hash(m)?);
        }
        let params = serde_json::json!({"op": "final", "mode": mode, "updates": n, "delay": delay, "pl": pl_hashes,
            "scratch_lr": r.scratch_lr0, "continue_lr": r.continue_lr0, "gamma": self.cfg.train.gamma});
        let (s, rec, _) = self.stage(stage, input, params, &[], || {
            let (mut state, lr, aug_from) = match (mode, input) {
                (FinalMode::Finetune, Some(b)) => {
                    let mut s = b.clone();
                    s.seed = self.stage_seed(stage);
                    (s, r.continue_lr0, 0)
                }
                _ => {
                    let model = self.new_model(&format!("{stage}/init"), mode == FinalMode::FromScratchLarge)?;
                    let mut s = TrainState::new(model, LrSchedule::constant(r.scratch_lr0), self.stage_seed(stage));
                    s.optimizer = self.cfg.train.optimizer;
                    (s, r.scratch_lr0, delay)
                }
            };
            state.restart_optimizer(lr, self.halve(n));
            let start = state.update_counter;
            let mut data = self.labeled(&state.model, &self.languages, true)?;
            data.extend(self.pl_samples(&state.model, pl_manifests)?);
            let sets = self.valid_sets(&self.languages)?;
            let out = run_supervised(
                state,
                &data,
                n,
                self.cfg.train.frame_budget,
                &self.step_options(self.cfg.train.gamma, start + aug_from),
                stage,
                Some(self.validation(&sets)),
            )?;
            let calls = out.counters.specaugment_calls;
            let mut res = self.supervised_result(out)?;
            res.metrics.insert("specaugment_calls".into(), calls as f64);
            res.metrics.insert("pl_utterances".into(), (data.len() - self.labeled_count()) as f64);
            Ok(res)
        })?;
        Ok((s, rec))
    }

    /// From-scratch training on one language's labeled data.
    pub fn train_monolingual(&self, stage: &str, lang: &str) -> Result<(TrainState, StageRecord)> {
        let n = self.scaled(self.cfg.recipe.monolingual_updates);
        let params = serde_json::json!({"op": "monolingual", "lang": lang, "updates": n});
        let (s, rec, _) = self.stage(stage, None, params, &[], || {
            let model = self.new_model(&format!("{stage}/init"), false)?;
            let mut state = TrainState::new(model, LrSchedule::constant(self.cfg.train.lr0), self.stage_seed(stage));
            state.optimizer = self.cfg.train.optimizer;
            state.restart_optimizer(self.cfg.train.lr0, self.halve(n));
            let langs = [lang.to_string()];
            let data = self.labeled(&state.model, &langs, false)?;
            let sets = self.valid_sets(&langs)?;
            let out = run_supervised(
                state,
                &data,
                n,
                self.cfg.train.frame_budget,
                &self.step_options(0.0, 0),
                stage,
                Some(self.validation(&sets)),
            )?;
            self.supervised_result(out)
        })?;
        Ok((s, rec))
    }

    fn labeled_count(&self) -> usize {
        self.languages.iter().map(|l| self.data[l].train.len()).sum()
    }

    /// Labeled-only continuation of the final model.
    pub fn finetune_on_labeled_only(&self, stage: &str, input: &TrainState, n: u64) -> Result<(TrainState, StageRecord)> {
        let r = &self.cfg.recipe;
        let params = serde_json::json!({"op": "finetune_back", "updates": n, "lr": r.finetune_back_lr, "gamma": self.cfg.train.gamma});
        let (s, rec, _) = self.stage(stage, Some(input), params, &[], || {
            let mut state = input.clone();
            state.seed = self.stage_seed(stage);
            state.restart_optimizer(r.finetune_back_lr, None);
            let data = self.labeled(&state.model, &self.languages, true)?;
            let sets = self.valid_sets(&self.languages)?;
            let out = run_supervised(
                state,
                &data,
                n,
                self.cfg.train.frame_budget,
                &self.step_options(self.cfg.train.gamma, 0),
                stage,
                Some(self.validation(&sets)),
            )?;
            self.supervised_result(out)
        })?;
        Ok((s, rec))
    }

    /// Greedy-decoding report over the validation sets of every labeled language.
    pub fn evaluate(&self, name: &str, model: &Model) -> Result<EvalReport> {
        self.evaluate_with(name, |_, u| greedy_transcript(model, &u.features.to_tensor()))
    }

    /// Like [`Pipeline::evaluate`] with a caller-supplied decoder, called
    /// with the language id and the utterance.
    pub fn evaluate_with(&self, name: &str, mut decode: impl FnMut(&str, &Utterance) -> Result<String>) -> Result<EvalReport> {
        let mut scored = Vec::new();
        for l in &self.languages {
            for u in &self.lang(l)?.valid {
                scored.push(Scored {
                    id: u.id.clone(),
                    language_id: l.clone(),
                    duration_frames: u.duration_frames(),
                    reference: u.transcript.clone().unwrap_or_default(),
                    hypothesis: decode(l, u)?,
                });
            }
        }
        let unl = self.cfg.unlabeled_languages();
        let rest: Vec<String> = self.languages.iter().filter(|l| !unl.contains(l)).cloned().collect();
        let mut subsets = Vec::new();
        if !unl.is_empty() {
            subsets.push(("unlabeled_available".to_string(), unl));
        }
        if !rest.is_empty() {
            subsets.push(("labeled_only".to_string(), rest));
        }
        let report = EvalReport::build(&scored, &subsets, &self.cfg.eval.duration_edges)?;
        let (j, t) = self.ws.report(name);
        report.write(&j, &t)?;
        Ok(report)
    }
}

pub fn curve_of(history: &[(u64, BTreeMap<String, f64>)]) -> Vec<(u64, f64)> {
    history
        .iter()
        .map(|(s, m)| (*s, m.values().sum::<f64>() / m.len().max(1) as f64))
        .collect()
}

/// Checkpoints and reports of a full recipe run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecipeSummary {
    pub target_language: String,
    pub unlabeled_languages: Vec<String>,
    pub stages: BTreeMap<String, StageRecord>,
    pub reports: BTreeMap<String, EvalReport>,
}

/// The full pipeline: base → per-language fine-tune and slimIPL → final
/// pooled model → labeled-only fine-tune.
pub fn run_recipe(p: &Pipeline) -> Result<RecipeSummary> {
    run_recipe_jobs(p, 1)
}

type LanguageStages = Vec<(String, StageRecord, EvalReport)>;

fn language_stages(p: &Pipeline, base: &TrainState, l: &str) -> Result<LanguageStages> {
    let ft_name = format!("finetune_{l}");
    let (ft, ft_rec) = p.finetune_language(&ft_name, base, l, p.scaled(p.cfg.recipe.finetune_updates))?;
    let ft_report = p.evaluate(&ft_name, &ft.model)?;
    let sl_name = format!("slimipl_{l}");
    let (sl, sl_rec, _) = p.run_slimipl_language(&sl_name, &ft, l, l, false)?;
    let sl_report = p.evaluate(&sl_name, &sl.model)?;
    Ok(vec![(ft_name, ft_rec, ft_report), (sl_name, sl_rec, sl_report)])
}

/// [`run_recipe`] with up to `jobs` languages fine-tuned and pseudo-labeled
/// concurrently. Outputs do not depend on `jobs`.
pub fn run_recipe_jobs(p: &Pipeline, jobs: usize) -> Result<RecipeSummary> {
    let r = &p.cfg.recipe;
    let mut stages = BTreeMap::new();
    let mut reports = BTreeMap::new();
    let (base, rec) = p.train_supervised_multilingual("base", p.cfg.train.gamma)?;
    stages.insert("base".to_string(), rec);
    reports.insert("base".to_string(), p.evaluate("base", &base.model)?);

    let unl = p.cfg.unlabeled_languages();
    let mut results: Vec<Result<LanguageStages>> = Vec::new();
    for chunk in unl.chunks(jobs.max(1)) {
        if chunk.len() == 1 {
            results.push(language_stages(p, &base, &chunk[0]));
            continue;
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|l| scope.spawn(|| language_stages(p, &base, l))).collect();
            for h in handles {
                results.push(h.join().unwrap_or_else(|_| Err(Error::invalid("language worker panicked"))));
            }
        });
    }
    let mut pl_manifests = Vec::new();
    for (l, res) in unl.iter().zip(results) {
        for (name, rec, report) in res? {
            stages.insert(name.clone(), rec);
            reports.insert(name, report);
        }
        pl_manifests.push(p.ws.root.join(format!("pl/slimipl_{l}.pl.tsv")));
    }

    let (fin, rec) = p.train_final("final", r.final_mode, Some(&base), &pl_manifests)?;
    stages.insert("final".to_string(), rec);
    reports.insert("final".to_string(), p.evaluate("final", &fin.model)?);

    if r.finetune_back {
        let (back, rec) = p.finetune_on_labeled_only("finetune_back", &fin, p.scaled(r.finetune_back_updates))?;
        stages.insert("finetune_back".to_string(), rec);
        reports.insert("finetune_back".to_string(), p.evaluate("finetune_back", &back.model)?);
    }
    let summary = RecipeSummary {
        target_language: p.cfg.target_language(),
        unlabeled_languages: unl,
        stages,
        reports,
    };
    write_json(&p.ws.root.join("summary.json"), &summary)?;
    Ok(summary)
}
