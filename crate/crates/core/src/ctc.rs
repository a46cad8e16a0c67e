//! Connectionist temporal classification: exact negative log-likelihood with
//! its gradient via log-space forward–backward, greedy decoding, and a
//! brute-force enumeration oracle for small instances.
//!
//! Symbol index 0 is the blank everywhere in this crate.

use crate::error::{Error, Result};
use crate::tensor::{log_add, log_sum_exp, Tensor};

pub const BLANK: u32 = 0;

/// Number of adjacent equal labels in `target`; each one forces a blank
/// between the two emissions.
pub fn repeats(target: &[u32]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether `target` can be aligned to `frames` output frames.
pub fn admissible(target: &[u32], frames: usize) -> bool {
    target.len() + repeats(target) <= frames
}

pub fn check_admissible(target: &[u32], frames: usize) -> Result<()> {
    if admissible(target, frames) {
        Ok(())
    } else {
        Err(Error::Inadmissible {
            target_len: target.len(),
            repeats: repeats(target),
            frames,
        })
    }
}

/// Log-probabilities (`T × (V+1)`, rows log-softmax normalized) paired with a
/// non-blank target sequence.
#[derive(Clone, Debug)]
pub struct CtcInstance {
    log_probs: Tensor,
    target: Vec<u32>,
}

impl CtcInstance {
    pub fn new(log_probs: Tensor, target: Vec<u32>) -> Result<Self> {
        if log_probs.rows == 0 || log_probs.cols < 2 {
            return Err(Error::Dimension(format!(
                "ctc log_probs must be at least 1x2, got {}x{}",
                log_probs.rows, log_probs.cols
            )));
        }
        for r in 0..log_probs.rows {
            let lse = log_sum_exp(log_probs.row(r));
            if (lse).abs() > 1e-6 || lse.is_nan() {
                return Err(Error::invalid(format!(
                    "ctc row {r} is not log-normalized (logsumexp = {lse})"
                )));
            }
        }
        if let Some(&bad) = target
            .iter()
            .find(|&&s| s == BLANK || s as usize >= log_probs.cols)
        {
            return Err(Error::invalid(format!(
                "target symbol {bad} is blank or outside the {}-symbol output",
                log_probs.cols
            )));
        }
        Ok(CtcInstance { log_probs, target })
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn target(&self) -> &[u32] {
        &self.target
    }
}

/// Target with blanks interleaved: `[-, l1, -, l2, …, lU, -]`.
fn extend(target: &[u32]) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn can_skip(ext: &[u32], s: usize) -> bool {
    // skip transition s-2 -> s allowed for non-blank labels differing from l'_{s-2}
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables over the blank-extended target, row-major `T × S`.
fn forward_vars(lp: &Tensor, ext: &[u32]) -> Vec<f64> {
    let (t_len, s_len) = (lp.rows, ext.len());
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| lp.at(t, ext[s] as usize);
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = emit(0, 0);
    if s_len > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(ext, s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + emit(t, s) };
        }
    }
    alpha
}

fn final_logprob(alpha: &[f64], t_len: usize, s_len: usize) -> Result<f64> {
    let fin = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(fin[s_len - 1], fin[s_len - 2])
    } else {
        fin[0]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite(format!(
            "ctc path probability underflowed (log p = {log_p})"
        )));
    }
    Ok(log_p)
}

/// `log p(target | log_probs)` by the forward recursion alone.
pub fn ctc_logprob(log_probs: &Tensor, target: &[u32]) -> Result<f64> {
    if log_probs.rows == 0 {
        return Err(Error::Dimension("no frames".into()));
    }
    check_admissible(target, log_probs.rows)?;
    let ext = extend(target);
    let alpha = forward_vars(log_probs, &ext);
    final_logprob(&alpha, log_probs.rows, ext.len())
}

/// Negative log-likelihood `-log p(target | log_probs)` and its gradient with
/// respect to every entry of `log_probs`.
pub fn ctc_nll(inst: &CtcInstance) -> Result<(f64, Tensor)> {
    let lp = &inst.log_probs;
    let t_len = lp.rows;
    check_admissible(&inst.target, t_len)?;

    let ext = extend(&inst.target);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| lp.at(t, ext[s] as usize);
    let alpha = forward_vars(lp, &ext);
    let log_p = final_logprob(&alpha, t_len, s_len)?;

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = emit(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = emit(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == ninf { ninf } else { b + emit(t, s) };
        }
    }

    // d(-log p)/d lp[t][k] = -Σ_{s: l'_s = k} exp(α_t(s) + β_t(s) - lp[t][k] - log p)
    let mut grad = Tensor::zeros(t_len, lp.cols);
    let mut acc = vec![ninf; lp.cols];
    for t in 0..t_len {
        acc.iter_mut().for_each(|a| *a = ninf);
        for s in 0..s_len {
            let e = emit(t, s);
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if e == ninf || ab == ninf {
                continue;
            }
            let k = ext[s] as usize;
            acc[k] = log_add(acc[k], ab - e);
        }
        let row = grad.row_mut(t);
        for (k, &a) in acc.iter().enumerate() {
            if a != ninf {
                row[k] = -(a - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Merge adjacent repeats, then drop blanks.
pub fn collapse(alignment: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in alignment {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Per-frame argmax (lowest index wins ties) followed by [`collapse`].
pub fn greedy_decode(logits: &Tensor) -> Vec<u32> {
    let path: Vec<u32> = (0..logits.rows)
        .map(|t| {
            let row = logits.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    collapse(&path)
}

pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Sums the probability of every alignment that collapses to the target.
/// Only usable when `(V+1)^T ≤ 10^7`.
pub fn brute_force_ctc(inst: &CtcInstance) -> Result<f64> {
    let lp = &inst.log_probs;
    let (t_len, n_sym) = lp.shape();
    let total = (n_sym as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(total));
    }
    check_admissible(&inst.target, t_len)?;

    let mut path = vec![0u32; t_len];
    let mut terms = Vec::new();
    loop {
        if collapse(&path) == inst.target {
            terms.push((0..t_len).map(|t| lp.at(t, path[t] as usize)).sum::<f64>());
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                let log_p = log_sum_exp(&terms);
                return Ok(-log_p);
            }
            path[i] += 1;
            if (path[i] as usize) < n_sym {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_softmax_rows;

    fn uniform(t: usize, v: usize) -> Tensor {
        Tensor::filled(t, v, -(v as f64).ln())
    }

    #[test]
    fn single_frame_single_path() {
        let inst = CtcInstance::new(uniform(1, 2), vec![1]).unwrap();
        let (nll, _) = ctc_nll(&inst).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let inst = CtcInstance::new(uniform(2, 2), vec![1]).unwrap();
        let (nll, _) = ctc_nll(&inst).unwrap();
        assert!((nll - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((brute_force_ctc(&inst).unwrap() - nll).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = log_softmax_rows(&Tensor::from_vec(3, 3, vec![0.1, 2.0, -1.0, 1.0, 0.0, 0.3, -0.5, 0.2, 0.9]));
        let want: f64 = -(0..3).map(|t| lp.at(t, 0)).sum::<f64>();
        let (nll, _) = ctc_nll(&CtcInstance::new(lp, vec![]).unwrap()).unwrap();
        assert!((nll - want).abs() < 1e-12);
    }

    #[test]
    fn deterministic_row_gives_zero_nll() {
        let lp = Tensor::from_vec(1, 2, vec![f64::NEG_INFINITY, 0.0]);
        let inst = CtcInstance::new(lp, vec![1]).unwrap();
        assert_eq!(ctc_nll(&inst).unwrap().0, 0.0);
        assert_eq!(brute_force_ctc(&inst).unwrap(), 0.0);
    }

    #[test]
    fn inadmissible_targets_error_in_both_routes() {
        let inst = CtcInstance::new(uniform(2, 3), vec![1, 1]).unwrap();
        assert!(matches!(ctc_nll(&inst), Err(Error::Inadmissible { .. })));
        assert!(matches!(brute_force_ctc(&inst), Err(Error::Inadmissible { .. })));
        let inst = CtcInstance::new(uniform(2, 3), vec![1, 2, 1]).unwrap();
        assert!(ctc_nll(&inst).is_err());
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let inst = CtcInstance::new(uniform(12, 6), vec![1]).unwrap();
        assert!(matches!(brute_force_ctc(&inst), Err(Error::TooLarge(_))));
    }

    #[test]
    fn rejects_unnormalized_rows_and_blank_targets() {
        assert!(CtcInstance::new(Tensor::zeros(2, 3), vec![1]).is_err());
        assert!(CtcInstance::new(uniform(2, 3), vec![0]).is_err());
        assert!(CtcInstance::new(uniform(2, 3), vec![3]).is_err());
    }

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2]), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<u32>::new());
        assert_eq!(collapse(&[3, 1, 2]), vec![3, 1, 2]);
    }

    #[test]
    fn greedy_examples() {
        // a a - b
        let logits = Tensor::from_rows(&[
            vec![0.0, 5.0, 0.0],
            vec![0.0, 5.0, 0.0],
            vec![5.0, 0.0, 0.0],
            vec![0.0, 0.0, 5.0],
        ]);
        assert_eq!(greedy_decode(&logits), vec![1, 2]);
        assert!(greedy_decode(&Tensor::from_rows(&[vec![3.0, 1.0], vec![2.0, 0.0]])).is_empty());
        // ties go to the lowest index, so an all-equal row is blank
        assert!(greedy_decode(&Tensor::zeros(4, 5)).is_empty());
    }

    #[test]
    fn appending_certain_blank_frame_keeps_nll() {
        let lp = log_softmax_rows(&Tensor::from_vec(3, 3, vec![0.3, 1.0, -0.2, 0.0, 0.5, 1.5, 2.0, 0.1, 0.1]));
        let inst = CtcInstance::new(lp.clone(), vec![1, 2]).unwrap();
        let (a, _) = ctc_nll(&inst).unwrap();
        let blank_row = Tensor::from_vec(1, 3, vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let longer = Tensor::vstack(&[lp, blank_row]);
        let (b, _) = ctc_nll(&CtcInstance::new(longer, vec![1, 2]).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
