use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ngram::NGramLM;
use crate::corpus::{SymbolTable, SPACE_INDEX};
use crate::ctc::{ctc_logprob, BLANK};
use crate::error::{Error, Result};
use crate::tensor::{log_add, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    /// Score words as soon as a space completes them; otherwise only when
    /// ranking the final beam.
    #[serde(default = "yes")]
    pub lm_at_space: bool,
    /// Add `log p(</s> | words)` when a hypothesis ends.
    #[serde(default = "yes")]
    pub score_eos: bool,
}

fn default_beam() -> usize {
    50
}

fn yes() -> bool {
    true
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: default_beam(),
            alpha: 0.0,
            beta: 0.0,
            lm_at_space: true,
            score_eos: true,
        }
    }
}

/// A prefix in the beam with its CTC and LM bookkeeping.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub prefix: Vec<u32>,
    pub p_blank: f64,
    pub p_nonblank: f64,
    /// Natural-log LM probability of the completed words.
    pub lm_score: f64,
    pub word_count: usize,
    words: Vec<u32>,
    word_start: usize,
}

impl Hypothesis {
    pub fn ctc_logprob(&self) -> f64 {
        log_add(self.p_blank, self.p_nonblank)
    }

    fn total(&self, cfg: &BeamConfig) -> f64 {
        self.ctc_logprob() + cfg.alpha * self.lm_score + cfg.beta * self.word_count as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub labels: Vec<u32>,
    pub transcript: String,
    /// `log p_θ(y|x)` summed over all alignments of the returned labels.
    pub ctc_logprob: f64,
    pub lm_score: f64,
    pub word_count: usize,
    pub score: f64,
}

fn by_score_then_prefix(a: &(f64, &[u32]), b: &(f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct Scorer<'a> {
    symbols: &'a SymbolTable,
    lm: Option<&'a NGramLM>,
}

impl Scorer<'_> {
    fn word_id(&self, labels: &[u32]) -> u32 {
        match self.lm {
            Some(lm) => lm.word_id(&self.symbols.decode(labels)),
            None => 0,
        }
    }

    fn ln_prob(&self, words: &[u32], next: u32) -> f64 {
        match self.lm {
            Some(lm) => {
                let mut h = Vec::with_capacity(words.len() + 1);
                h.push(lm.bos());
                h.extend_from_slice(words);
                lm.ln_prob(&h, next)
            }
            None => 0.0,
        }
    }

    fn eos(&self, words: &[u32]) -> f64 {
        match self.lm {
            Some(lm) => self.ln_prob(words, lm.eos()),
            None => 0.0,
        }
    }

    /// Child of `parent` extended by non-blank `c`, with no probability mass yet.
    fn extend(&self, parent: &Hypothesis, c: u32, cfg: &BeamConfig) -> Hypothesis {
        let mut h = Hypothesis {
            prefix: parent.prefix.clone(),
            p_blank: f64::NEG_INFINITY,
            p_nonblank: f64::NEG_INFINITY,
            lm_score: parent.lm_score,
            word_count: parent.word_count,
            words: parent.words.clone(),
            word_start: parent.word_start,
        };
        if c == SPACE_INDEX {
            if parent.prefix.len() > parent.word_start {
                let w = self.word_id(&parent.prefix[parent.word_start..]);
                if cfg.lm_at_space {
                    h.lm_score += self.ln_prob(&h.words, w);
                    h.word_count += 1;
                }
                h.words.push(w);
            }
            h.word_start = parent.prefix.len() + 1;
        }
        h.prefix.push(c);
        h
    }

    /// LM score and word count of a finished hypothesis.
    fn finish(&self, h: &Hypothesis, cfg: &BeamConfig) -> (f64, usize) {
        let mut words = h.words.clone();
        if h.prefix.len() > h.word_start {
            words.push(self.word_id(&h.prefix[h.word_start..]));
        }
        let (mut lm, mut count) = if cfg.lm_at_space {
            (h.lm_score, h.word_count)
        } else {
            (0.0, 0)
        };
        for i in count..words.len() {
            lm += self.ln_prob(&words[..i], words[i]);
            count += 1;
        }
        if cfg.score_eos {
            lm += self.eos(&words);
        }
        (lm, count)
    }
}

/// CTC prefix beam search with optional word-level shallow fusion:
/// `argmax_y log p_θ(y|x) + α·log p_LM(y) + β·|y|_words`.
pub fn beam_search(log_probs: &Tensor, symbols: &SymbolTable, lm: Option<&NGramLM>, cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.beam_size < 1 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if log_probs.cols != symbols.len() {
        return Err(Error::Dimension(format!(
            "emissions have {} symbols, table has {}",
            log_probs.cols,
            symbols.len()
        )));
    }
    let scorer = Scorer { symbols, lm };
    let mut beam = vec![Hypothesis {
        prefix: Vec::new(),
        p_blank: 0.0,
        p_nonblank: f64::NEG_INFINITY,
        lm_score: 0.0,
        word_count: 0,
        words: Vec::new(),
        word_start: 0,
    }];
    let v = log_probs.cols;
    let top_k = cfg.beam_size.min(v);
    for t in 0..log_probs.rows {
        let row = log_probs.row(t);
        let mut cand: Vec<u32> = (0..v as u32).collect();
        if top_k < v {
            cand.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
            cand.truncate(top_k);
            if !cand.contains(&BLANK) {
                cand.push(BLANK);
            }
        }
        let mut next: Vec<Hypothesis> = Vec::new();
        let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut slot = |h: Hypothesis, next: &mut Vec<Hypothesis>| -> usize {
            *index.entry(h.prefix.clone()).or_insert_with(|| {
                next.push(h);
                next.len() - 1
            })
        };
        for hyp in &beam {
            let total = hyp.ctc_logprob();
            for &c in &cand {
                let lp = row[c as usize];
                if c == BLANK {
                    let mut same = hyp.clone();
                    same.p_blank = f64::NEG_INFINITY;
                    same.p_nonblank = f64::NEG_INFINITY;
                    let i = slot(same, &mut next);
                    next[i].p_blank = log_add(next[i].p_blank, total + lp);
                    continue;
                }
                let last = hyp.prefix.last().copied();
                if last == Some(c) {
                    let mut same = hyp.clone();
                    same.p_blank = f64::NEG_INFINITY;
                    same.p_nonblank = f64::NEG_INFINITY;
                    let i = slot(same, &mut next);
                    next[i].p_nonblank = log_add(next[i].p_nonblank, hyp.p_nonblank + lp);
                    if hyp.p_blank > f64::NEG_INFINITY {
                        let i = slot(scorer.extend(hyp, c, cfg), &mut next);
                        next[i].p_nonblank = log_add(next[i].p_nonblank, hyp.p_blank + lp);
                    }
                } else {
                    let i = slot(scorer.extend(hyp, c, cfg), &mut next);
                    next[i].p_nonblank = log_add(next[i].p_nonblank, total + lp);
                }
            }
        }
        let mut order: Vec<(f64, usize)> = next.iter().enumerate().map(|(i, h)| (h.total(cfg), i)).collect();
        order.sort_by(|a, b| by_score_then_prefix(&(a.0, &next[a.1].prefix), &(b.0, &next[b.1].prefix)));
        order.truncate(cfg.beam_size);
        let mut kept: Vec<Option<Hypothesis>> = next.into_iter().map(Some).collect();
        beam = order.into_iter().map(|(_, i)| kept[i].take().expect("unique index")).collect();
    }

    let mut best: Option<BeamResult> = None;
    for h in &beam {
        let (lm_score, word_count) = scorer.finish(h, cfg);
        // Pruning can drop alignments of a surviving prefix, so rescore exactly.
        let ctc = if log_probs.rows == 0 { h.ctc_logprob() } else { ctc_logprob(log_probs, &h.prefix)? };
        let score = ctc + cfg.alpha * lm_score + cfg.beta * word_count as f64;
        let better = match &best {
            None => true,
            Some(b) => by_score_then_prefix(&(score, &h.prefix), &(b.score, &b.labels)) == Ordering::Less,
        };
        if better {
            best = Some(BeamResult {
                labels: h.prefix.clone(),
                transcript: symbols.decode(&h.prefix),
                ctc_logprob: ctc,
                lm_score,
                word_count,
                score,
            });
        }
    }
    Ok(best.expect("beam is never empty"))
}
