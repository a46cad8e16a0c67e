//! Supervised update loop shared by every training stage: batch sampling,
//! per-step augmentation, step logs and periodic validation.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{plan_batch_indices, Utterance};
use crate::ctc::{admissible, greedy_decode};
use crate::error::{Error, Result};
use crate::eval::{chars, select_checkpoint, ErrorTally};
use crate::model::{backward, specaugment, Model, SpecAugmentConfig, TrainExample, TrainState};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// A training utterance with its encoded target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub language_id: String,
    pub features: Tensor,
    pub target: Vec<u32>,
    /// Language-ID class; `None` keeps the utterance out of the LID loss.
    pub lid: Option<usize>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.features.rows
    }
}

/// Encodes labeled utterances against the model's symbol table and languages.
pub fn labeled_samples(model: &Model, utts: &[Utterance], with_lid: bool) -> Result<Vec<Sample>> {
    utts.iter()
        .map(|u| {
            let text = u
                .transcript
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("utterance {} has no transcript", u.id)))?;
            let target = model.symbols.encode(text).map_err(|e| match e {
                Error::UnknownSymbol(c) => {
                    Error::SymbolMismatch(format!("utterance {} uses {c:?}, which the model's symbol table lacks", u.id))
                }
                other => other,
            })?;
            let lid = if with_lid { Some(model.language_index(&u.language_id)?) } else { None };
            Ok(Sample {
                id: u.id.clone(),
                language_id: u.language_id.clone(),
                features: u.features.to_tensor(),
                target,
                lid,
            })
        })
        .collect()
}

/// Endless stream of length-bucketed batches, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    durations: Vec<usize>,
    frame_budget: usize,
    seed: u64,
    epoch: u64,
    queue: VecDeque<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(durations: Vec<usize>, frame_budget: usize, seed: u64) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::invalid("cannot sample batches from an empty dataset"));
        }
        if frame_budget == 0 {
            return Err(Error::invalid("frame budget must be >= 1"));
        }
        Ok(BatchSampler {
            durations,
            frame_budget,
            seed,
            epoch: 0,
            queue: VecDeque::new(),
        })
    }

    pub fn for_samples(samples: &[Sample], frame_budget: usize, seed: u64) -> Result<Self> {
        Self::new(samples.iter().map(Sample::frames).collect(), frame_budget, seed)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            let seed = derive_seed(self.seed, &[self.epoch]);
            self.epoch += 1;
            let plan = plan_batch_indices(&self.durations, self.frame_budget, seed, true).expect("validated budget");
            self.queue.extend(plan);
        }
        self.queue.pop_front().expect("nonempty plan")
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: String,
    pub kind: String,
    pub loss: f64,
    pub cache_replacements: u64,
    pub pl_filtered_count: u64,
    pub lr: f64,
}

pub fn write_log(path: &Path, records: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub gamma: f64,
    pub dropout: bool,
    pub specaugment: Option<SpecAugmentConfig>,
    /// SpecAugment is applied only once the update counter reaches this value.
    pub specaugment_from: u64,
}

impl StepOptions {
    pub fn plain(gamma: f64) -> Self {
        StepOptions {
            gamma,
            dropout: true,
            specaugment: None,
            specaugment_from: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub updates: u64,
    pub skipped_inadmissible: u64,
    pub specaugment_calls: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub used: usize,
}

/// One optimizer update on the admissible members of `batch`. Returns `None`
/// (and leaves the state untouched) when no member can be aligned.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Sample],
    opts: &StepOptions,
    counters: &mut StepCounters,
) -> Result<Option<StepOutcome>> {
    let step_seed = derive_seed(state.seed, &[0x57e9, state.update_counter]);
    let augment = opts.specaugment.filter(|_| state.update_counter >= opts.specaugment_from);
    let mut examples = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let frames = state.model.config.output_len(s.frames());
        if s.target.is_empty() || !admissible(&s.target, frames) {
            counters.skipped_inadmissible += 1;
            continue;
        }
        let features = match &augment {
            Some(cfg) => {
                counters.specaugment_calls += 1;
                specaugment(&s.features, cfg, derive_seed(step_seed, &[i as u64]))
            }
            None => s.features.clone(),
        };
        examples.push(TrainExample {
            features,
            target: s.target.clone(),
            language: s.lid,
        });
    }
    if examples.is_empty() {
        return Ok(None);
    }
    let dropout_seed = opts.dropout.then_some(step_seed);
    let (loss, grads) = backward(&state.model, &examples, opts.gamma, dropout_seed)?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged {
            update: state.update_counter,
            loss: loss.total,
        });
    }
    let lr = state.optimizer_step(&grads)?;
    counters.updates += 1;
    Ok(Some(StepOutcome {
        loss: loss.total,
        lr,
        used: examples.len(),
    }))
}

/// Held-out utterances of one language for greedy-decoding evaluation.
#[derive(Clone, Debug)]
pub struct ValidSet {
    pub language_id: String,
    pub items: Vec<(Tensor, String)>,
}

impl ValidSet {
    pub fn from_utterances(language_id: &str, utts: &[Utterance]) -> Self {
        ValidSet {
            language_id: language_id.to_string(),
            items: utts
                .iter()
                .map(|u| (u.features.to_tensor(), u.transcript.clone().unwrap_or_default()))
                .collect(),
        }
    }
}

pub fn greedy_transcript(model: &Model, features: &Tensor) -> Result<String> {
    Ok(model.symbols.decode(&greedy_decode(&model.ctc_logits(features)?)))
}

/// Pooled greedy-decoding CER per language.
pub fn validation_cer(model: &Model, sets: &[ValidSet]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for set in sets {
        let mut tally = ErrorTally::default();
        for (x, reference) in &set.items {
            let hyp = greedy_transcript(model, x)?;
            tally += ErrorTally::score(&chars(reference), &chars(&hyp));
        }
        out.insert(set.language_id.clone(), tally.rate());
    }
    Ok(out)
}

/// Fraction of utterances whose LID argmax is their language.
pub fn lid_accuracy(model: &Model, sets: &[ValidSet]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for set in sets {
        let want = model.language_index(&set.language_id)?;
        for (x, _) in &set.items {
            let lid = model.forward(x)?.lid_logits;
            let arg = (0..lid.cols)
                .max_by(|&a, &b| lid.data[a].total_cmp(&lid.data[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            hit += usize::from(arg == want);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Validation schedule for checkpoint selection.
#[derive(Clone, Debug)]
pub struct Validation<'a> {
    pub sets: &'a [ValidSet],
    pub every: u64,
}

#[derive(Clone, Debug)]
pub struct Tracker {
    pub history: Vec<(u64, BTreeMap<String, f64>)>,
    best: Option<(u64, TrainState)>,
}

impl Tracker {
    pub fn new() -> Self {
        Tracker {
            history: Vec::new(),
            best: None,
        }
    }

    /// Scores `state` and keeps it if it is the best so far.
    pub fn observe(&mut self, state: &TrainState, sets: &[ValidSet]) -> Result<()> {
        let cers = validation_cer(&state.model, sets)?;
        self.history.push((state.update_counter, cers));
        let chosen = select_checkpoint(&self.history)?;
        if chosen == state.update_counter {
            self.best = Some((chosen, state.clone()));
        }
        Ok(())
    }

    pub fn best_step(&self) -> Option<u64> {
        self.best.as_ref().map(|(s, _)| *s)
    }

    pub fn take_best(&mut self) -> Option<TrainState> {
        self.best.take().map(|(_, s)| s)
    }

    /// `(step, macro CER)` pairs.
    pub fn curve(&self) -> Vec<(u64, f64)> {
        self.history
            .iter()
            .map(|(s, m)| (*s, m.values().sum::<f64>() / m.len().max(1) as f64))
            .collect()
    }
}

impl Default for Tracker {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a training stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    /// The selected state (best validation macro CER, or the last state
    /// without validation).
    pub state: TrainState,
    pub last_counter: u64,
    pub log: Vec<StepLog>,
    pub history: Vec<(u64, BTreeMap<String, f64>)>,
    pub counters: StepCounters,
    pub selected_step: u64,
}

pub fn write_curve(path: &Path, metric: &str, points: &[(u64, f64)]) -> Result<()> {
    let mut s = format!("step,{metric}\n");
    for (step, v) in points {
        s.push_str(&format!("{step},{v}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `n_updates` supervised updates on `data`.
pub fn run_supervised(
    mut state: TrainState,
    data: &[Sample],
    n_updates: u64,
    frame_budget: usize,
    opts: &StepOptions,
    phase: &str,
    validation: Option<Validation<'_>>,
) -> Result<StageOutput> {
    let mut log = Vec::new();
    let mut counters = StepCounters::default();
    let mut tracker = Tracker::new();
    let start = state.update_counter;
    if let (Some(v), 0) = (&validation, n_updates) {
        tracker.observe(&state, v.sets)?;
    }
    if n_updates > 0 {
        let mut sampler = BatchSampler::for_samples(data, frame_budget, derive_seed(state.seed, &[0xba7, start]))?;
        let mut idle = 0usize;
        while state.update_counter - start < n_updates {
            let idx = sampler.next_batch();
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            match train_step(&mut state, &batch, opts, &mut counters)? {
                Some(out) => {
                    idle = 0;
                    log.push(StepLog {
                        step: state.update_counter,
                        phase: phase.to_string(),
                        kind: "labeled".into(),
                        loss: out.loss,
                        cache_replacements: 0,
                        pl_filtered_count: 0,
                        lr: out.lr,
                    });
                    if let Some(v) = &validation {
                        let done = state.update_counter - start;
                        if done % v.every.max(1) == 0 || done == n_updates {
                            tracker.observe(&state, v.sets)?;
                        }
                    }
                }
                None => {
                    idle += 1;
                    if idle > data.len() {
                        return Err(Error::invalid("no training utterance can be aligned to its encoder output"));
                    }
                }
            }
        }
    }
    let last_counter = state.update_counter;
    let selected_step = tracker.best_step().unwrap_or(last_counter);
    let state = tracker.take_best().unwrap_or(state);
    Ok(StageOutput {
        state,
        last_counter,
        log,
        history: tracker.history,
        counters,
        selected_step,
    })
}
