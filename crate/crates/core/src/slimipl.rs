//! Semi-supervised training with a dynamic pseudo-label cache.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::greedy_decode;
use crate::error::{Error, Result};
use crate::model::{Model, TrainState};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use crate::train::{
    train_step, BatchSampler, Sample, StepCounters, StepLog, StepOptions, Tracker, ValidSet,
};

/// Draws of a fresh unlabeled batch before giving up on a fully filtered one.
pub const RETRY_BOUND: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default = "default_cache_size")]
    pub cache_size: usize,
    #[serde(default = "default_replace_prob")]
    pub replace_prob: f64,
    #[serde(default = "default_lambda")]
    pub lambda: usize,
    #[serde(default)]
    pub labeled_warmup_updates: u64,
    #[serde(default = "default_crop_warmup")]
    pub crop_warmup_updates: u64,
    #[serde(default = "default_crop_len")]
    pub crop_len_frames: usize,
    #[serde(default = "default_pl_max_len")]
    pub pl_max_len: usize,
    /// Generate every PL in cropped mode regardless of the warmup boundary.
    #[serde(default)]
    pub always_crop: bool,
    /// Apply the LID loss to pseudo-labeled utterances too.
    #[serde(default)]
    pub pl_lid: bool,
}

fn default_cache_size() -> usize {
    1000
}
fn default_replace_prob() -> f64 {
    0.1
}
fn default_lambda() -> usize {
    10
}
fn default_crop_warmup() -> u64 {
    10_000
}
fn default_crop_len() -> usize {
    999
}
fn default_pl_max_len() -> usize {
    630
}

impl Default for CacheConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl CacheConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.cache_size < 1 {
            return Err(Error::invalid("cache_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::invalid("replace_prob must lie in [0, 1]"));
        }
        if self.lambda < 1 {
            return Err(Error::invalid("lambda must be >= 1"));
        }
        check_crop_len(model, self.crop_len_frames)?;
        if self.crop_len_frames < model.config.conv_filter_len {
            return Err(Error::invalid("crop_len_frames is shorter than the convolution's receptive field"));
        }
        Ok(())
    }
}

fn check_crop_len(model: &Model, crop_len: usize) -> Result<()> {
    let stride = model.config.conv_stride;
    if crop_len < stride {
        return Err(Error::invalid(format!("crop length {crop_len} is shorter than the conv stride {stride}")));
    }
    if crop_len % stride != 0 {
        return Err(Error::invalid(format!("crop length {crop_len} is not a multiple of the conv stride {stride}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlMode {
    Full,
    Cropped,
}

/// Runs the encoder on consecutive non-overlapping crops and concatenates
/// the per-crop CTC logits.
pub fn crop_and_stitch(model: &Model, features: &Tensor, crop_len: usize) -> Result<Tensor> {
    check_crop_len(model, crop_len)?;
    if features.rows <= crop_len {
        return model.ctc_logits(features);
    }
    let mut parts = Vec::with_capacity(features.rows.div_ceil(crop_len));
    let mut start = 0;
    while start < features.rows {
        let end = (start + crop_len).min(features.rows);
        parts.push(model.ctc_logits(&features.slice_rows(start, end))?);
        start = end;
    }
    Ok(Tensor::vstack(&parts))
}

/// Greedy pseudo-label without an external LM.
pub fn pseudo_label(model: &Model, features: &Tensor, mode: PlMode, crop_len: usize) -> Result<Vec<u32>> {
    let logits = match mode {
        PlMode::Full => model.ctc_logits(features)?,
        PlMode::Cropped => crop_and_stitch(model, features, crop_len)?,
    };
    Ok(greedy_decode(&logits))
}

pub fn filter_pl(pl: &[u32], max_len: usize) -> bool {
    !pl.is_empty() && pl.len() <= max_len
}

/// One cached batch of pseudo-labeled unlabeled utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub indices: Vec<usize>,
    pub labels: Vec<Vec<u32>>,
    pub generated_at: u64,
    pub uses: u64,
}

/// Instrumentation of a slimIPL run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SslStats {
    pub labeled_steps: u64,
    pub unlabeled_steps: u64,
    pub rounds_completed: u64,
    pub replacements: u64,
    pub pl_generated: u64,
    pub pl_filtered: u64,
    pub cropped_generations: u64,
    pub full_generations: u64,
    pub cropped_after_boundary: u64,
    /// Uses of each replaced entry, counting the use that retired it.
    pub retired_ages: Vec<u64>,
    pub cache_size_min: usize,
    pub cache_size_max: usize,
    /// Every stored PL passed the length filter when it was inserted.
    pub all_pls_valid: bool,
    pub counters: StepCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlimIplConfig {
    pub cache: CacheConfig,
    /// Updates after the labeled warmup (labeled and unlabeled steps together).
    pub ssl_updates: u64,
    pub labeled_frame_budget: usize,
    pub unlabeled_frame_budget: usize,
    pub labeled: StepOptions,
    pub unlabeled: StepOptions,
    /// Validation interval in updates; 0 disables periodic validation.
    pub eval_every: u64,
}

pub struct SslOutput {
    pub state: TrainState,
    pub cache: Vec<CacheEntry>,
    pub log: Vec<StepLog>,
    pub stats: SslStats,
    pub history: Vec<(u64, BTreeMap<String, f64>)>,
    pub selected_step: u64,
    pub last_counter: u64,
}

struct Trainer<'a> {
    cfg: &'a SlimIplConfig,
    labeled: &'a [Sample],
    unlabeled: &'a [Sample],
    lab_sampler: BatchSampler,
    unl_sampler: BatchSampler,
    ssl_start: u64,
    stats: SslStats,
    log: Vec<StepLog>,
}

impl Trainer<'_> {
    fn mode(&self, state: &TrainState) -> PlMode {
        let c = &self.cfg.cache;
        if c.always_crop || state.update_counter - self.ssl_start < c.crop_warmup_updates {
            PlMode::Cropped
        } else {
            PlMode::Full
        }
    }

    /// Draws unlabeled batches until one keeps at least one PL.
    fn fresh_entry(&mut self, state: &TrainState) -> Result<CacheEntry> {
        let mode = self.mode(state);
        let past_boundary = state.update_counter - self.ssl_start >= self.cfg.cache.crop_warmup_updates;
        for _ in 0..RETRY_BOUND {
            let batch = self.unl_sampler.next_batch();
            let mut entry = CacheEntry {
                indices: Vec::new(),
                labels: Vec::new(),
                generated_at: state.update_counter,
                uses: 0,
            };
            for i in batch {
                let pl = pseudo_label(&state.model, &self.unlabeled[i].features, mode, self.cfg.cache.crop_len_frames)?;
                self.stats.pl_generated += 1;
                match mode {
                    PlMode::Cropped => {
                        self.stats.cropped_generations += 1;
                        if past_boundary {
                            self.stats.cropped_after_boundary += 1;
                        }
                    }
                    PlMode::Full => self.stats.full_generations += 1,
                }
                if filter_pl(&pl, self.cfg.cache.pl_max_len) {
                    entry.indices.push(i);
                    entry.labels.push(pl);
                } else {
                    self.stats.pl_filtered += 1;
                }
            }
            if !entry.indices.is_empty() {
                return Ok(entry);
            }
        }
        Err(Error::CacheUnfillable { retries: RETRY_BOUND })
    }

    fn record(&mut self, state: &TrainState, phase: &str, kind: &str, loss: f64, lr: f64) {
        self.log.push(StepLog {
            step: state.update_counter,
            phase: phase.into(),
            kind: kind.into(),
            loss,
            cache_replacements: self.stats.replacements,
            pl_filtered_count: self.stats.pl_filtered,
            lr,
        });
    }

    fn labeled_step(&mut self, state: &mut TrainState, phase: &str) -> Result<()> {
        for _ in 0..=self.labeled.len() {
            let idx = self.lab_sampler.next_batch();
            let batch: Vec<&Sample> = idx.iter().map(|&i| &self.labeled[i]).collect();
            if let Some(out) = train_step(state, &batch, &self.cfg.labeled, &mut self.stats.counters)? {
                self.stats.labeled_steps += 1;
                self.record(state, phase, "labeled", out.loss, out.lr);
                return Ok(());
            }
        }
        Err(Error::invalid("no labeled utterance can be aligned to its encoder output"))
    }

    fn unlabeled_step(&mut self, state: &mut TrainState, cache: &mut [CacheEntry], rng: &mut impl Rng) -> Result<()> {
        let k = rng.random_range(0..cache.len());
        let entry = &cache[k];
        let samples: Vec<Sample> = entry
            .indices
            .iter()
            .zip(&entry.labels)
            .map(|(&i, pl)| {
                let u = &self.unlabeled[i];
                Sample {
                    id: u.id.clone(),
                    language_id: u.language_id.clone(),
                    features: u.features.clone(),
                    target: pl.clone(),
                    lid: if self.cfg.cache.pl_lid { u.lid } else { None },
                }
            })
            .collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let out = train_step(state, &batch, &self.cfg.unlabeled, &mut self.stats.counters)?;
        self.stats.unlabeled_steps += 1;
        cache[k].uses += 1;
        if rng.random::<f64>() < self.cfg.cache.replace_prob {
            self.stats.retired_ages.push(cache[k].uses);
            cache[k] = self.fresh_entry(state)?;
            self.stats.replacements += 1;
        }
        let (loss, lr) = out.map_or((0.0, state.current_lr()), |o| (o.loss, o.lr));
        self.record(state, "ssl", "unlabeled", loss, lr);
        Ok(())
    }
}

/// Labeled warmup, cache fill, then rounds of `λ` unlabeled steps and one
/// labeled step until `ssl_updates` updates have been made.
pub fn ssl_train(
    mut state: TrainState,
    labeled: &[Sample],
    unlabeled: &[Sample],
    cfg: &SlimIplConfig,
    valid: Option<&[ValidSet]>,
) -> Result<SslOutput> {
    cfg.cache.validate(&state.model)?;
    if labeled.is_empty() {
        return Err(Error::invalid("slimIPL needs labeled data"));
    }
    if unlabeled.is_empty() {
        return Err(Error::invalid("slimIPL needs unlabeled data"));
    }
    let base = derive_seed(state.seed, &[0x5117, state.update_counter]);
    let mut t = Trainer {
        cfg,
        labeled,
        unlabeled,
        lab_sampler: BatchSampler::for_samples(labeled, cfg.labeled_frame_budget, derive_seed(base, &[1]))?,
        unl_sampler: BatchSampler::for_samples(unlabeled, cfg.unlabeled_frame_budget, derive_seed(base, &[2]))?,
        ssl_start: 0,
        stats: SslStats {
            all_pls_valid: true,
            ..Default::default()
        },
        log: Vec::new(),
    };
    let mut rng = rng_from(base, &[3]);
    let mut tracker = Tracker::new();
    let start = state.update_counter;
    let observe = |tracker: &mut Tracker, state: &TrainState, force: bool| -> Result<()> {
        if let Some(sets) = valid {
            let n = state.update_counter - start;
            if force || (cfg.eval_every > 0 && n % cfg.eval_every == 0) {
                tracker.observe(state, sets)?;
            }
        }
        Ok(())
    };

    for _ in 0..cfg.cache.labeled_warmup_updates {
        t.labeled_step(&mut state, "warmup")?;
        observe(&mut tracker, &state, false)?;
    }

    t.ssl_start = state.update_counter;
    let mut cache = Vec::with_capacity(cfg.cache.cache_size);
    for _ in 0..cfg.cache.cache_size {
        cache.push(t.fresh_entry(&state)?);
    }
    t.stats.cache_size_min = cache.len();
    t.stats.cache_size_max = cache.len();

    let mut done = 0u64;
    'outer: while done < cfg.ssl_updates {
        for _ in 0..cfg.cache.lambda {
            t.unlabeled_step(&mut state, &mut cache, &mut rng)?;
            done += 1;
            t.stats.cache_size_min = t.stats.cache_size_min.min(cache.len());
            t.stats.cache_size_max = t.stats.cache_size_max.max(cache.len());
            observe(&mut tracker, &state, false)?;
            if done == cfg.ssl_updates {
                break 'outer;
            }
        }
        t.labeled_step(&mut state, "ssl")?;
        done += 1;
        t.stats.rounds_completed += 1;
        observe(&mut tracker, &state, false)?;
    }
    if tracker.history.last().map(|(s, _)| *s) != Some(state.update_counter) {
        observe(&mut tracker, &state, true)?;
    }
    t.stats.all_pls_valid &= cache
        .iter()
        .all(|e| e.labels.iter().all(|pl| filter_pl(pl, cfg.cache.pl_max_len)));

    let last_counter = state.update_counter;
    let selected_step = tracker.best_step().unwrap_or(last_counter);
    let history = tracker.history.clone();
    let state = tracker.take_best().unwrap_or(state);
    Ok(SslOutput {
        state,
        cache,
        log: t.log,
        stats: t.stats,
        history,
        selected_step,
        last_counter,
    })
}

/// Full-mode PLs for `utts`, keeping only those that pass the length filter.
pub fn final_pseudo_labels(model: &Model, utts: &[Sample], max_len: usize) -> Result<(Vec<(usize, Vec<u32>)>, u64)> {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for (i, u) in utts.iter().enumerate() {
        let pl = pseudo_label(model, &u.features, PlMode::Full, 0)?;
        if filter_pl(&pl, max_len) {
            kept.push((i, pl));
        } else {
            dropped += 1;
        }
    }
    Ok((kept, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SymbolTable;
    use crate::model::{EncoderConfig, LrSchedule};
    use crate::rng::rng_from;

    fn model(n_layers: usize, seed: u64) -> Model {
        let mut cfg = EncoderConfig::new(3);
        cfg.d_model = 8;
        cfg.d_ff = 8;
        cfg.n_layers = n_layers;
        cfg.n_heads = 2;
        cfg.dropout = 0.0;
        Model::new(cfg, SymbolTable::build(["abc"]), vec!["x".into()], seed).unwrap()
    }

    fn random_features(t: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed, &[]);
        Tensor::from_vec(t, 3, (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn filter_boundaries() {
        assert!(!filter_pl(&[], 4));
        assert!(filter_pl(&[1, 2, 3, 4], 4));
        assert!(!filter_pl(&[1, 2, 3, 4, 5], 4));
    }

    #[test]
    fn stitching_matches_full_forward_away_from_boundaries() {
        let m = model(0, 3);
        let halo = m.config.conv_filter_len / 2;
        for (t, crop) in [(100, 30), (97, 24), (61, 9)] {
            let x = random_features(t, t as u64);
            let full = m.ctc_logits(&x).unwrap();
            let st = crop_and_stitch(&m, &x, crop).unwrap();
            assert_eq!(st.shape(), full.shape());
            let step = crop / m.config.conv_stride;
            for j in 0..full.rows {
                let near = (1..).map(|k| k * step).take_while(|&b| b < full.rows + step).any(|b| j + halo >= b && j < b + halo);
                if !near {
                    for c in 0..full.cols {
                        assert!((full.at(j, c) - st.at(j, c)).abs() <= 1e-5, "t={t} crop={crop} frame {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn long_crop_is_full_forward() {
        let m = model(2, 4);
        let x = random_features(40, 1);
        assert_eq!(crop_and_stitch(&m, &x, 42).unwrap(), m.ctc_logits(&x).unwrap());
        assert_eq!(
            pseudo_label(&m, &x, PlMode::Cropped, 42).unwrap(),
            pseudo_label(&m, &x, PlMode::Full, 0).unwrap()
        );
    }

    #[test]
    fn crop_len_must_align_with_stride() {
        let m = model(0, 1);
        let x = random_features(20, 1);
        assert!(crop_and_stitch(&m, &x, 2).is_err());
        assert!(crop_and_stitch(&m, &x, 10).is_err());
        assert!(crop_and_stitch(&m, &x, 9).is_ok());
    }

    #[test]
    fn blank_model_gives_empty_pl() {
        let mut m = model(1, 2);
        m.params.get_mut("ctc.b").unwrap().data[0] = 1e3;
        assert!(pseudo_label(&m, &random_features(30, 5), PlMode::Full, 0).unwrap().is_empty());
    }

    /// A model whose greedy output is never empty: symbol `a` dominates except
    /// where the first feature is strongly negative.
    fn chatty_model() -> Model {
        let mut m = model(1, 7);
        let b = m.params.get_mut("ctc.b").unwrap();
        b.data[2] = 4.0;
        m
    }

    fn data(n: usize, t: usize, seed: u64, labeled: bool) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("u{i}"),
                language_id: "x".into(),
                features: random_features(t + i % 4 * 3, seed + i as u64),
                target: if labeled { vec![2, 3] } else { Vec::new() },
                lid: Some(0),
            })
            .collect()
    }

    fn config(p: f64, lambda: usize, ssl_updates: u64) -> SlimIplConfig {
        SlimIplConfig {
            cache: CacheConfig {
                cache_size: 8,
                replace_prob: p,
                lambda,
                labeled_warmup_updates: 2,
                crop_warmup_updates: 6,
                crop_len_frames: 12,
                pl_max_len: 50,
                ..Default::default()
            },
            ssl_updates,
            labeled_frame_budget: 40,
            unlabeled_frame_budget: 40,
            labeled: StepOptions::plain(0.0),
            unlabeled: StepOptions::plain(0.0),
            eval_every: 0,
        }
    }

    fn run(cfg: &SlimIplConfig) -> SslOutput {
        let state = TrainState::new(chatty_model(), LrSchedule::constant(1e-3), 11);
        ssl_train(state, &data(10, 12, 1, true), &data(30, 20, 100, false), cfg, None).unwrap()
    }

    #[test]
    fn zero_replacement_freezes_cache() {
        let out = run(&config(0.0, 3, 30));
        assert_eq!(out.stats.replacements, 0);
        assert!(out.cache.iter().all(|e| e.generated_at == 2));
        assert_eq!(out.cache.len(), 8);
    }

    #[test]
    fn lambda_one_alternates() {
        let out = run(&config(0.3, 1, 20));
        let kinds: Vec<&str> = out.log.iter().filter(|l| l.phase == "ssl").map(|l| l.kind.as_str()).collect();
        assert_eq!(kinds.len(), 20);
        for pair in kinds.chunks(2) {
            assert_eq!(pair, ["unlabeled", "labeled"]);
        }
    }

    #[test]
    fn rounds_are_exact_and_logs_cumulative() {
        let out = run(&config(0.5, 4, 23));
        let kinds: Vec<&str> = out.log.iter().filter(|l| l.phase == "ssl").map(|l| l.kind.as_str()).collect();
        for round in kinds.chunks(5).filter(|c| c.len() == 5) {
            assert_eq!(round, ["unlabeled", "unlabeled", "unlabeled", "unlabeled", "labeled"]);
        }
        assert_eq!(out.stats.rounds_completed, 4);
        assert_eq!(out.stats.unlabeled_steps, 19);
        assert_eq!(out.last_counter, 25);
        let last = out.log.last().unwrap();
        assert_eq!(last.cache_replacements, out.stats.replacements);
        assert_eq!(last.pl_filtered_count, out.stats.pl_filtered);
        assert_eq!((out.stats.cache_size_min, out.stats.cache_size_max), (8, 8));
        assert!(out.stats.all_pls_valid);
        assert_eq!(out.stats.cropped_after_boundary, 0);
        assert!(out.stats.full_generations > 0 && out.stats.cropped_generations > 0);
    }

    #[test]
    fn always_crop_keeps_cropping() {
        let mut cfg = config(0.5, 2, 20);
        cfg.cache.always_crop = true;
        let out = run(&cfg);
        assert_eq!(out.stats.full_generations, 0);
        assert!(out.stats.cropped_after_boundary > 0);
    }

    #[test]
    fn deterministic() {
        let cfg = config(0.3, 2, 12);
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(a.state, b.state);
        assert_eq!(a.log, b.log);
        assert_eq!(a.cache, b.cache);
    }

    #[test]
    fn collapsed_model_cannot_fill_cache() {
        let mut m = model(1, 2);
        m.params.get_mut("ctc.b").unwrap().data[0] = 1e3;
        let state = TrainState::new(m, LrSchedule::constant(1e-3), 1);
        let err = ssl_train(state, &data(4, 12, 1, true), &data(4, 20, 9, false), &config(0.1, 2, 4), None)
            .err()
            .unwrap();
        assert!(matches!(err, Error::CacheUnfillable { retries: RETRY_BOUND }));
    }

    #[test]
    fn replacement_rate_and_staleness() {
        let mut cfg = config(0.1, 10, 2200);
        cfg.cache.labeled_warmup_updates = 0;
        cfg.cache.crop_warmup_updates = 0;
        let state = TrainState::new(chatty_model(), LrSchedule::constant(1e-6), 5);
        let out = ssl_train(state, &data(4, 9, 1, true), &data(20, 9, 50, false), &cfg, None).unwrap();
        assert_eq!(out.stats.unlabeled_steps, 2000);
        let frac = out.stats.replacements as f64 / 2000.0;
        assert!((0.08..=0.12).contains(&frac), "{frac}");
        let ages = &out.stats.retired_ages;
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<u64>() as f64 / n;
        let sigma = ((1.0 - 0.1) / 0.01 / n).sqrt();
        assert!((mean - 10.0).abs() <= 3.0 * sigma, "mean age {mean} ± {sigma}");
    }

    #[test]
    fn empty_unlabeled_is_rejected() {
        let state = TrainState::new(chatty_model(), LrSchedule::constant(1e-3), 1);
        assert!(ssl_train(state, &data(4, 12, 1, true), &[], &config(0.1, 2, 4), None).is_err());
    }
}
