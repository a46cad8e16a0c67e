use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
const NO_PROB: f64 = -99.0;

/// Word n-gram LM with interpolated Witten–Bell smoothing, stored in backoff
/// form: `p(w|h)` is the stored value for a seen n-gram, otherwise
/// `bow(h)·p(w|h')` with `h'` the history minus its oldest word.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    words: Vec<String>,
    ids: HashMap<String, u32>,
    /// log10 probability and log10 backoff weight per n-gram.
    entries: HashMap<Vec<u32>, (f64, f64)>,
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Vocabulary including `<s>`, `</s>` and `<unk>`.
    pub fn vocab(&self) -> &[String] {
        &self.words
    }

    /// Words that can be predicted: everything except `<s>`.
    pub fn predictive_vocab(&self) -> Vec<u32> {
        let bos = self.bos();
        (0..self.words.len() as u32).filter(|&i| i != bos).collect()
    }

    pub fn word_id(&self, w: &str) -> u32 {
        self.ids.get(w).copied().unwrap_or_else(|| self.unk())
    }

    pub fn bos(&self) -> u32 {
        self.ids[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.ids[EOS]
    }

    pub fn unk(&self) -> u32 {
        self.ids[UNK]
    }

    /// log10 p(w | history), using at most the last `order-1` history words.
    pub fn log10_prob(&self, history: &[u32], w: u32) -> f64 {
        let keep = history.len().min(self.order - 1);
        let mut h = &history[history.len() - keep..];
        let mut bow = 0.0;
        loop {
            let mut key = h.to_vec();
            key.push(w);
            if let Some(&(lp, _)) = self.entries.get(&key) {
                return bow + lp;
            }
            if h.is_empty() {
                // Every predictive word has a unigram entry; `<s>` does not get predicted.
                return bow + NO_PROB;
            }
            if let Some(&(_, b)) = self.entries.get(h) {
                bow += b;
            }
            h = &h[1..];
        }
    }

    /// Natural-log conditional probability.
    pub fn ln_prob(&self, history: &[u32], w: u32) -> f64 {
        self.log10_prob(history, w) * std::f64::consts::LN_10
    }

    /// Natural-log probability of a word sequence after `<s>`, optionally
    /// including the final `</s>`.
    pub fn lm_logprob<S: AsRef<str>>(&self, words: &[S], with_eos: bool) -> f64 {
        let mut hist = vec![self.bos()];
        let mut total = 0.0;
        for w in words {
            let id = self.word_id(w.as_ref());
            total += self.ln_prob(&hist, id);
            hist.push(id);
        }
        if with_eos {
            total += self.ln_prob(&hist, self.eos());
        }
        total
    }

    pub fn to_text(&self) -> String {
        let mut keys: Vec<&Vec<u32>> = self.entries.keys().collect();
        keys.sort_by(|a, b| {
            a.len().cmp(&b.len()).then_with(|| {
                let wa = a.iter().map(|&i| self.words[i as usize].as_str());
                let wb = b.iter().map(|&i| self.words[i as usize].as_str());
                wa.cmp(wb)
            })
        });
        let mut s = format!("NGLM {}\n", self.order);
        for k in keys {
            let (lp, bow) = self.entries[k];
            for &i in k {
                s.push_str(&self.words[i as usize]);
                s.push('\t');
            }
            let _ = writeln!(s, "{lp}\t{bow}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: String| Error::Header(format!("NGLM: {m}"));
        let order: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("NGLM "))
            .and_then(|o| o.trim().parse().ok())
            .ok_or_else(|| bad("missing `NGLM <order>` header".into()))?;
        if order < 1 {
            return Err(bad("order must be at least 1".into()));
        }
        let mut words: Vec<String> = Vec::new();
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut raw = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 3 || f.len() - 2 > order {
                return Err(bad(format!("line {}: expected 1..={order} words plus two numbers", n + 2)));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("line {}: bad number {s:?}", n + 2)))
            };
            let (lp, bow) = (num(f[f.len() - 2])?, num(f[f.len() - 1])?);
            let gram: Vec<&str> = f[..f.len() - 2].to_vec();
            if gram.len() == 1 && !ids.contains_key(gram[0]) {
                ids.insert(gram[0].to_string(), words.len() as u32);
                words.push(gram[0].to_string());
            }
            raw.push((gram, lp, bow));
        }
        for special in [BOS, EOS, UNK] {
            if !ids.contains_key(special) {
                return Err(bad(format!("missing unigram {special}")));
            }
        }
        let mut entries = HashMap::new();
        for (gram, lp, bow) in raw {
            let key = gram
                .iter()
                .map(|w| ids.get(*w).copied().ok_or_else(|| bad(format!("word {w:?} has no unigram"))))
                .collect::<Result<Vec<u32>>>()?;
            if entries.insert(key, (lp, bow)).is_some() {
                return Err(bad(format!("duplicate n-gram {gram:?}")));
            }
        }
        Ok(NGramLM {
            order,
            words,
            ids,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Builds an interpolated Witten–Bell LM. Each sentence is padded with one
/// `<s>` and one `</s>`; the lowest order interpolates with a uniform
/// distribution over the predictive vocabulary.
pub fn train_ngram<S: AsRef<str>>(sentences: &[Vec<S>], order: usize) -> Result<NGramLM> {
    if order < 1 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    if sentences.is_empty() {
        return Err(Error::invalid("cannot train an LM on an empty corpus"));
    }
    let mut vocab: Vec<String> = sentences
        .iter()
        .flatten()
        .map(|w| w.as_ref().to_string())
        .filter(|w| w != BOS && w != EOS)
        .collect();
    vocab.sort();
    vocab.dedup();
    let mut words = vec![BOS.to_string(), EOS.to_string()];
    if !vocab.iter().any(|w| w == UNK) {
        words.push(UNK.to_string());
    }
    words.extend(vocab);
    let ids: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    let bos = ids[BOS];

    // counts[k] maps a history of length k to next-word counts.
    let mut counts: Vec<BTreeMap<Vec<u32>, BTreeMap<u32, u64>>> = vec![BTreeMap::new(); order];
    for s in sentences {
        let mut seq = vec![bos];
        seq.extend(s.iter().map(|w| ids[w.as_ref()]).filter(|&i| i != bos && i != ids[EOS]));
        seq.push(ids[EOS]);
        for i in 1..seq.len() {
            for k in 0..order {
                if k > i {
                    break;
                }
                let h = seq[i - k..i].to_vec();
                *counts[k].entry(h).or_default().entry(seq[i]).or_default() += 1;
            }
        }
    }

    let predictive: Vec<u32> = (0..words.len() as u32).filter(|&i| i != bos).collect();
    let uniform = 1.0 / predictive.len() as f64;
    // Interpolated probabilities for every seen (history, word), plus backoff weights.
    let mut prob: HashMap<Vec<u32>, f64> = HashMap::new();
    let mut bows: HashMap<Vec<u32>, f64> = HashMap::new();
    let empty = BTreeMap::new();
    let uni = counts[0].get(&Vec::new()).unwrap_or(&empty);
    let (c0, n0) = (uni.values().sum::<u64>() as f64, uni.len() as f64);
    for &w in &predictive {
        let c = uni.get(&w).copied().unwrap_or(0) as f64;
        prob.insert(vec![w], (c + n0 * uniform) / (c0 + n0));
    }
    for k in 1..order {
        for (h, next) in &counts[k] {
            let c_h = next.values().sum::<u64>() as f64;
            let n1 = next.len() as f64;
            bows.insert(h.clone(), n1 / (c_h + n1));
            for (&w, &c) in next {
                let lower = lookup(&prob, &bows, &h[1..], w);
                let mut key = h.clone();
                key.push(w);
                prob.insert(key, (c as f64 + n1 * lower) / (c_h + n1));
            }
        }
    }
    let mut entries: HashMap<Vec<u32>, (f64, f64)> = prob
        .into_iter()
        .map(|(k, p)| {
            let b = bows.get(&k).map_or(0.0, |b| b.log10());
            (k, (p.log10(), b))
        })
        .collect();
    let bos_bow = bows.get(&vec![bos]).map_or(0.0, |b| b.log10());
    entries.insert(vec![bos], (NO_PROB, bos_bow));
    Ok(NGramLM {
        order,
        words,
        ids,
        entries,
    })
}

/// Probability under partially built tables, backing off through shorter histories.
fn lookup(prob: &HashMap<Vec<u32>, f64>, bows: &HashMap<Vec<u32>, f64>, h: &[u32], w: u32) -> f64 {
    let mut key = h.to_vec();
    key.push(w);
    if let Some(&p) = prob.get(&key) {
        return p;
    }
    let b = bows.get(h).copied().unwrap_or(1.0);
    b * lookup(prob, bows, &h[1..], w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(text: &[&str]) -> Vec<Vec<String>> {
        text.iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn unigram_symmetry_and_unknowns() {
        let lm = train_ngram(&corpus(&["a b"]), 1).unwrap();
        let pa = lm.lm_logprob(&["a"], false);
        let pb = lm.lm_logprob(&["b"], false);
        assert_eq!(pa, pb);
        // c(a)=1, c(·)=3 (a, b, </s>), N1+=3, V={</s>,<unk>,a,b}.
        assert!((pa.exp() - (1.0 + 3.0 / 4.0) / 6.0).abs() < 1e-12);
        let punk = lm.lm_logprob(&["zzz"], false);
        assert!(punk.is_finite() && punk < pa);
        assert_eq!(lm.lm_logprob::<&str>(&[], false), 0.0);
        assert!(train_ngram(&corpus(&["a"]), 0).is_err());
    }

    /// Witten–Bell straight from the count definitions.
    fn oracle(sents: &[Vec<String>], order: usize, hist: &[&str], w: &str, vocab_size: usize) -> f64 {
        let mut padded = Vec::new();
        for s in sents {
            let mut v = vec![BOS.to_string()];
            v.extend(s.iter().cloned());
            v.push(EOS.to_string());
            padded.push(v);
        }
        let keep = hist.len().min(order - 1);
        let h = &hist[hist.len() - keep..];
        fn rec(padded: &[Vec<String>], h: &[&str], w: &str, vs: usize) -> f64 {
            let mut c_hw = 0.0;
            let mut c_h = 0.0;
            let mut followers = std::collections::BTreeSet::new();
            for s in padded {
                for i in 1..s.len() {
                    if i < h.len() {
                        continue;
                    }
                    if s[i - h.len()..i].iter().map(String::as_str).eq(h.iter().copied()) {
                        c_h += 1.0;
                        followers.insert(s[i].clone());
                        if s[i] == w {
                            c_hw += 1.0;
                        }
                    }
                }
            }
            let lower = if h.is_empty() { 1.0 / vs as f64 } else { rec(padded, &h[1..], w, vs) };
            if c_h == 0.0 {
                return lower;
            }
            let n1 = followers.len() as f64;
            (c_hw + n1 * lower) / (c_h + n1)
        }
        rec(&padded, h, w, vocab_size)
    }

    #[test]
    fn matches_count_oracle() {
        let sents = corpus(&["a b c", "a c", "b a c c"]);
        let lm = train_ngram(&sents, 3).unwrap();
        let vs = lm.predictive_vocab().len();
        assert_eq!(vs, 5);
        for hist in [vec![BOS], vec![BOS, "a"], vec!["a", "c"], vec!["c", "b"], vec!["b", "a"], vec!["zz", "a"]] {
            for w in ["a", "b", "c", EOS, UNK] {
                let ids: Vec<u32> = hist.iter().map(|h| lm.word_id(h)).collect();
                let got = lm.ln_prob(&ids, lm.word_id(w)).exp();
                let hist_for_oracle: Vec<&str> = hist.iter().map(|h| if lm.vocab().iter().any(|v| v == h) { *h } else { UNK }).collect();
                let want = oracle(&sents, 3, &hist_for_oracle, w, vs);
                assert!((got - want).abs() < 1e-12, "{hist:?} {w}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn chain_rule() {
        let lm = train_ngram(&corpus(&["a b", "b b a"]), 2).unwrap();
        let (a, b) = (lm.word_id("a"), lm.word_id("b"));
        let whole = lm.lm_logprob(&["a", "b"], false);
        let parts = lm.lm_logprob(&["a"], false) + lm.ln_prob(&[lm.bos(), a], b);
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let lm = train_ngram(&corpus(&["x y z", "y y", "z x y x"]), 4).unwrap();
        let text = lm.to_text();
        assert!(text.starts_with("NGLM 4\n"));
        let back = NGramLM::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        for h in [vec![], vec![BOS], vec!["x", "y"], vec!["z", "q"]] {
            let hb: Vec<u32> = h.iter().map(|w| back.word_id(w)).collect();
            let hl: Vec<u32> = h.iter().map(|w| lm.word_id(w)).collect();
            for w in back.predictive_vocab() {
                let name = &back.vocab()[w as usize];
                assert_eq!(back.log10_prob(&hb, w), lm.log10_prob(&hl, lm.word_id(name)));
            }
        }
        assert!(NGramLM::from_text("NGRAM 2\n").is_err());
        assert!(NGramLM::from_text("NGLM 1\na\tx\t0\n").is_err());
    }

    fn sentences() -> impl Strategy<Value = Vec<Vec<String>>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..6),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn normalized_in_every_context(sents in sentences(), order in 1usize..5, h in prop::collection::vec(0usize..6, 0..4)) {
            let lm = train_ngram(&sents, order).unwrap();
            let names = [BOS, "a", "b", "c", "d", "q"];
            let hist: Vec<u32> = std::iter::once(lm.bos()).chain(h.iter().map(|&i| lm.word_id(names[i]))).collect();
            let total: f64 = lm.predictive_vocab().iter().map(|&w| lm.ln_prob(&hist, w).exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-6, "sum {}", total);
            for w in lm.predictive_vocab() {
                let p = lm.ln_prob(&hist, w).exp();
                prop_assert!(p > 0.0 && p <= 1.0);
            }
        }
    }
}
