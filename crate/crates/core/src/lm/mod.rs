//! Word n-gram language model and CTC prefix beam search with shallow fusion.

mod beam;
mod ngram;

pub use beam::{beam_search, BeamConfig, BeamResult, Hypothesis};
pub use ngram::{train_ngram, NGramLM, BOS, EOS, UNK};

use serde::{Deserialize, Serialize};

use crate::corpus::SymbolTable;
use crate::error::{Error, Result};
use crate::eval::{words, ErrorTally};
use crate::tensor::Tensor;

/// Splits lines of text into word lists for LM training.
pub fn tokenize_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| words(l).into_iter().map(String::from).collect::<Vec<_>>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Log-softmax emissions with the reference transcript.
#[derive(Clone, Debug)]
pub struct DevItem {
    pub log_probs: Tensor,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub alpha: f64,
    pub beta: f64,
    pub wer: f64,
    pub table: Vec<GridPoint>,
}

/// Pooled word error rate of beam decoding over `items`.
pub fn decode_wer(items: &[DevItem], symbols: &SymbolTable, lm: Option<&NGramLM>, cfg: &BeamConfig) -> Result<f64> {
    let mut tally = ErrorTally::default();
    for it in items {
        let hyp = beam_search(&it.log_probs, symbols, lm, cfg)?;
        tally += ErrorTally::score(&words(&it.reference), &words(&hyp.transcript));
    }
    Ok(tally.rate())
}

/// Grid point with the lowest dev WER; ties go to the smallest `(α, β)`.
pub fn grid_search_alpha_beta(
    items: &[DevItem],
    symbols: &SymbolTable,
    lm: &NGramLM,
    grid: &[(f64, f64)],
    base: &BeamConfig,
) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::invalid("empty alpha/beta grid"));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &(alpha, beta) in grid {
        let cfg = BeamConfig { alpha, beta, ..*base };
        table.push(GridPoint {
            alpha,
            beta,
            wer: decode_wer(items, symbols, Some(lm), &cfg)?,
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            a.wer
                .total_cmp(&b.wer)
                .then(a.alpha.total_cmp(&b.alpha))
                .then(a.beta.total_cmp(&b.beta))
        })
        .expect("nonempty grid");
    Ok(GridResult {
        alpha: best.alpha,
        beta: best.beta,
        wer: best.wer,
        table: table.clone(),
    })
}

/// Every `(α, β)` pair from the two axes.
pub fn grid(alphas: &[f64], betas: &[f64]) -> Vec<(f64, f64)> {
    alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::ctc::{collapse, ctc_nll, CtcInstance};
    use crate::rng::rng_from;
    use crate::tensor::{log_softmax_rows, log_sum_exp};
    use rand::Rng;

    fn table(chars: &str) -> SymbolTable {
        SymbolTable::from_chars(chars.chars())
    }

    fn random_log_probs(t: usize, v: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed, &[]);
        let x = Tensor::from_vec(t, v, (0..t * v).map(|_| rng.random_range(-2.0..2.0)).collect());
        log_softmax_rows(&x)
    }

    /// Sums alignment probabilities per collapsed label sequence over all `V^T` paths.
    fn exhaustive_argmax(lp: &Tensor) -> (Vec<u32>, f64) {
        let (t, v) = lp.shape();
        let mut totals: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
        let mut path = vec![0u32; t];
        loop {
            let s: f64 = path.iter().enumerate().map(|(i, &c)| lp.at(i, c as usize)).sum();
            totals.entry(collapse(&path)).or_default().push(s);
            let mut i = 0;
            loop {
                if i == t {
                    let mut best: Vec<(Vec<u32>, f64)> =
                        totals.into_iter().map(|(k, v)| (k, log_sum_exp(&v))).collect();
                    best.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    return best.swap_remove(0);
                }
                path[i] += 1;
                if (path[i] as usize) < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn matches_exhaustive_search_without_lm() {
        let syms = table("ab");
        for seed in 0..40 {
            let t = 1 + (seed as usize % 5);
            let lp = random_log_probs(t, 4, seed);
            let (want, want_lp) = exhaustive_argmax(&lp);
            let cfg = BeamConfig {
                beam_size: 4usize.pow(t as u32),
                ..Default::default()
            };
            let got = beam_search(&lp, &syms, None, &cfg).unwrap();
            assert_eq!(got.labels, want, "seed {seed}");
            assert!((got.ctc_logprob - want_lp).abs() < 1e-9);
            // A narrow beam can only do as well as the exhaustive one.
            let narrow = beam_search(&lp, &syms, None, &BeamConfig { beam_size: 1, ..cfg }).unwrap();
            assert!(narrow.score <= got.score + 1e-12);
            let truth = syms.decode(&want);
            assert!(crate::eval::cer(&truth, &got.transcript) <= crate::eval::cer(&truth, &narrow.transcript));
        }
    }

    #[test]
    fn blank_frame_decodes_empty() {
        let syms = table("ab");
        let lp = log_softmax_rows(&Tensor::from_vec(1, 4, vec![10.0, 0.0, 0.0, 0.0]));
        let lm = train_ngram(&tokenize_lines("a b\nb"), 2).unwrap();
        for (alpha, beta) in [(0.0, 0.0), (2.0, 5.0), (5.0, -3.0)] {
            let cfg = BeamConfig {
                alpha,
                beta,
                ..Default::default()
            };
            assert_eq!(beam_search(&lp, &syms, Some(&lm), &cfg).unwrap().transcript, "");
        }
    }

    fn recompute(lp: &Tensor, syms: &SymbolTable, lm: &NGramLM, r: &BeamResult, cfg: &BeamConfig) -> f64 {
        let ctc = if r.labels.is_empty() {
            (0..lp.rows).map(|t| lp.at(t, 0)).sum()
        } else {
            -ctc_nll(&CtcInstance::new(lp.clone(), r.labels.clone()).unwrap()).unwrap().0
        };
        let ws = words(&r.transcript);
        let lm_score = lm.lm_logprob(&ws, cfg.score_eos);
        assert_eq!(syms.decode(&r.labels), r.transcript);
        ctc + cfg.alpha * lm_score + cfg.beta * ws.len() as f64
    }

    #[test]
    fn score_decomposes() {
        let syms = table("ab");
        let lm = train_ngram(&tokenize_lines("a ab\nb a\nab ab b"), 3).unwrap();
        for seed in 0..30 {
            let lp = random_log_probs(12, 4, 100 + seed);
            for lm_at_space in [true, false] {
                let cfg = BeamConfig {
                    beam_size: 8,
                    alpha: 0.7,
                    beta: 0.4,
                    lm_at_space,
                    score_eos: seed % 2 == 0,
                };
                let r = beam_search(&lp, &syms, Some(&lm), &cfg).unwrap();
                let s = recompute(&lp, &syms, &lm, &r, &cfg);
                assert!((s - r.score).abs() < 1e-6, "{s} vs {} {:?} {lm_at_space} {}", r.score, r.transcript, cfg.score_eos);
            }
        }
    }

    /// Frames spelling "<x> b" where the acoustic model slightly prefers `b` for `x`.
    fn confusable(first_b: f64) -> Tensor {
        let syms = 4;
        let mut rows = Vec::new();
        let mut push = |probs: [f64; 4]| rows.push(probs.iter().map(|p: &f64| p.ln()).collect::<Vec<_>>());
        push([0.01, 0.01, 1.0 - first_b - 0.02, first_b]);
        push([0.97, 0.01, 0.01, 0.01]);
        push([0.01, 0.97, 0.01, 0.01]);
        push([0.01, 0.01, 0.01, 0.97]);
        let _ = syms;
        Tensor::from_rows(&rows)
    }

    #[test]
    fn lm_suppresses_unlikely_word() {
        let syms = table("ab");
        let lm = train_ngram(&tokenize_lines(&"a b\n".repeat(50)), 2).unwrap();
        let lp = confusable(0.6);
        let plain = beam_search(&lp, &syms, Some(&lm), &BeamConfig::default()).unwrap();
        assert_eq!(plain.transcript, "b b");
        let fused = beam_search(
            &lp,
            &syms,
            Some(&lm),
            &BeamConfig {
                alpha: 3.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fused.transcript, "a b");
    }

    #[test]
    fn grid_search_prefers_lm_and_breaks_ties() {
        let syms = table("ab");
        let lm = train_ngram(&tokenize_lines(&"a b\n".repeat(50)), 2).unwrap();
        let items: Vec<DevItem> = [0.55, 0.6, 0.7]
            .iter()
            .map(|&p| DevItem {
                log_probs: confusable(p),
                reference: "a b".into(),
            })
            .collect();
        let base = BeamConfig::default();
        let r = grid_search_alpha_beta(&items, &syms, &lm, &[(0.0, 0.0)], &base).unwrap();
        assert_eq!((r.alpha, r.beta), (0.0, 0.0));
        let r = grid_search_alpha_beta(&items, &syms, &lm, &grid(&[0.0, 2.0, 4.0], &[0.0, 1.0]), &base).unwrap();
        let baseline = r.table.iter().find(|g| g.alpha == 0.0 && g.beta == 0.0).unwrap().wer;
        assert!(r.wer <= baseline);
        assert!(r.wer < baseline);
        let ties: Vec<&GridPoint> = r.table.iter().filter(|g| g.wer == r.wer).collect();
        assert!(ties.len() > 1);
        assert_eq!((r.alpha, r.beta), (ties[0].alpha, ties[0].beta));
        assert!(grid_search_alpha_beta(&items, &syms, &lm, &[], &base).is_err());
    }

    #[test]
    fn rejects_zero_beam() {
        let lp = random_log_probs(2, 4, 1);
        let cfg = BeamConfig {
            beam_size: 0,
            ..Default::default()
        };
        assert!(beam_search(&lp, &table("ab"), None, &cfg).is_err());
    }
}
