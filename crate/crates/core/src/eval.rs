//! Error rates, per-language reports, checkpoint selection and duration buckets.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
}

impl Add for EditCounts {
    type Output = EditCounts;
    fn add(self, o: EditCounts) -> EditCounts {
        EditCounts {
            distance: self.distance + o.distance,
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
        }
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: EditCounts) {
        *self = *self + o;
    }
}

/// Unit-cost Levenshtein distance. Counts come from one optimal alignment,
/// preferring substitution, then deletion, then insertion when tracing back.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        distance: d[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == cur {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == cur {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

pub fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

pub fn words(s: &str) -> Vec<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Errors pooled over utterances. An empty reference contributes a
/// denominator of one and is counted in `empty_refs`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTally {
    pub counts: EditCounts,
    pub ref_units: usize,
    pub denominator: usize,
    pub empty_refs: usize,
}

impl ErrorTally {
    pub fn score<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Self {
        ErrorTally {
            counts: edit_distance(reference, hypothesis),
            ref_units: reference.len(),
            denominator: reference.len().max(1),
            empty_refs: usize::from(reference.is_empty()),
        }
    }

    pub fn rate(&self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.counts.distance as f64 / self.denominator as f64
        }
    }
}

impl AddAssign for ErrorTally {
    fn add_assign(&mut self, o: ErrorTally) {
        self.counts += o.counts;
        self.ref_units += o.ref_units;
        self.denominator += o.denominator;
        self.empty_refs += o.empty_refs;
    }
}

pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    ErrorTally::score(&chars(reference), &chars(hypothesis)).rate()
}

pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    ErrorTally::score(&words(reference), &words(hypothesis)).rate()
}

/// One decoded utterance ready for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub id: String,
    pub language_id: String,
    pub duration_frames: usize,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UttScore {
    pub chars: ErrorTally,
    pub words: ErrorTally,
}

impl UttScore {
    pub fn of(reference: &str, hypothesis: &str) -> Self {
        UttScore {
            chars: ErrorTally::score(&chars(reference), &chars(hypothesis)),
            words: ErrorTally::score(&words(reference), &words(hypothesis)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageScores {
    pub cer: f64,
    pub wer: f64,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    pub n: usize,
    pub ref_chars: usize,
    pub word_errors: usize,
    pub ref_words: usize,
    pub empty_refs: usize,
}

impl LanguageScores {
    fn from_tallies(c: ErrorTally, w: ErrorTally, n: usize) -> Self {
        LanguageScores {
            cer: c.rate(),
            wer: w.rate(),
            substitutions: c.counts.substitutions,
            insertions: c.counts.insertions,
            deletions: c.counts.deletions,
            n,
            ref_chars: c.ref_units,
            word_errors: w.counts.distance,
            ref_words: w.ref_units,
            empty_refs: c.empty_refs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    /// Exclusive lower edge in frames; `None` for the first bucket.
    pub lo: Option<usize>,
    /// Inclusive upper edge in frames; `None` for the last bucket.
    pub hi: Option<usize>,
    pub wer: f64,
    pub word_errors: usize,
    pub ref_words: usize,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub languages: BTreeMap<String, LanguageScores>,
    pub averages: BTreeMap<String, f64>,
    pub buckets: Vec<BucketScore>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cer,
    Wer,
}

/// Bucket index for `duration` under half-open intervals `(e_{i-1}, e_i]`.
pub fn bucket_of(duration: usize, edges: &[usize]) -> usize {
    edges.iter().position(|&e| duration <= e).unwrap_or(edges.len())
}

fn check_edges(edges: &[usize]) -> Result<()> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bucket edges must be strictly increasing"));
    }
    Ok(())
}

/// Pooled word error rate per duration bucket.
pub fn duration_buckets(items: &[(usize, ErrorTally)], edges: &[usize]) -> Result<Vec<BucketScore>> {
    check_edges(edges)?;
    let mut tallies = vec![(ErrorTally::default(), 0usize); edges.len() + 1];
    for &(dur, t) in items {
        let b = bucket_of(dur, edges);
        tallies[b].0 += t;
        tallies[b].1 += 1;
    }
    Ok(tallies
        .into_iter()
        .enumerate()
        .map(|(i, (t, n))| BucketScore {
            lo: i.checked_sub(1).map(|j| edges[j]),
            hi: edges.get(i).copied(),
            wer: t.rate(),
            word_errors: t.counts.distance,
            ref_words: t.denominator,
            n,
        })
        .collect())
}

impl EvalReport {
    /// Scores utterances per language and over duration buckets, and adds
    /// macro averages over all languages plus each named subset.
    pub fn build(utts: &[Scored], subsets: &[(String, Vec<String>)], edges: &[usize]) -> Result<Self> {
        let mut per_lang: BTreeMap<String, (ErrorTally, ErrorTally, usize)> = BTreeMap::new();
        let mut bucket_items = Vec::with_capacity(utts.len());
        let mut warnings = Vec::new();
        for u in utts {
            let s = UttScore::of(&u.reference, &u.hypothesis);
            if s.chars.empty_refs > 0 {
                warnings.push(format!("utterance {} has an empty reference", u.id));
            }
            let e = per_lang.entry(u.language_id.clone()).or_default();
            e.0 += s.chars;
            e.1 += s.words;
            e.2 += 1;
            bucket_items.push((u.duration_frames, s.words));
        }
        let languages: BTreeMap<String, LanguageScores> = per_lang
            .into_iter()
            .map(|(k, (c, w, n))| (k, LanguageScores::from_tallies(c, w, n)))
            .collect();
        let mut report = EvalReport {
            languages,
            averages: BTreeMap::new(),
            buckets: duration_buckets(&bucket_items, edges)?,
            warnings,
        };
        if !report.languages.is_empty() {
            let all: Vec<String> = report.languages.keys().cloned().collect();
            report.add_average("all", &all)?;
        }
        for (name, langs) in subsets {
            report.add_average(name, langs)?;
        }
        Ok(report)
    }

    fn add_average(&mut self, name: &str, langs: &[String]) -> Result<()> {
        let c = macro_average(self, langs, Metric::Cer)?;
        let w = macro_average(self, langs, Metric::Wer)?;
        self.averages.insert(format!("cer_{name}"), c);
        self.averages.insert(format!("wer_{name}"), w);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scope\tname\tcer\twer\tS\tI\tD\tn\n");
        for (k, v) in &self.languages {
            s.push_str(&format!(
                "language\t{k}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                v.cer, v.wer, v.substitutions, v.insertions, v.deletions, v.n
            ));
        }
        for (k, v) in &self.averages {
            let (metric, name) = k.split_once('_').unwrap_or(("", k));
            let (c, w) = if metric == "cer" { (v.to_string(), String::new()) } else { (String::new(), v.to_string()) };
            s.push_str(&format!("average_{metric}\t{name}\t{c}\t{w}\t\t\t\t\n"));
        }
        for b in &self.buckets {
            let lo = b.lo.map_or("-inf".into(), |v| v.to_string());
            let hi = b.hi.map_or("inf".into(), |v| v.to_string());
            s.push_str(&format!("bucket\t({lo},{hi}]\t\t{}\t\t\t\t{}\n", b.wer, b.n));
        }
        s
    }

    pub fn write(&self, json_path: &Path, tsv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(tsv_path, self.to_tsv()).map_err(|e| Error::io(tsv_path, e))
    }

    pub fn read(json_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn cer_of(&self, lang: &str) -> Result<f64> {
        self.languages
            .get(lang)
            .map(|s| s.cer)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }
}

/// Unweighted mean over `subset` of the per-language rate.
pub fn macro_average(report: &EvalReport, subset: &[String], metric: Metric) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::invalid("macro average over an empty language subset"));
    }
    let mut sum = 0.0;
    for l in subset {
        let s = report
            .languages
            .get(l)
            .ok_or_else(|| Error::UnknownLanguage(l.clone()))?;
        sum += match metric {
            Metric::Cer => s.cer,
            Metric::Wer => s.wer,
        };
    }
    Ok(sum / subset.len() as f64)
}

/// Step with the lowest mean per-language validation CER; ties go to the earliest step.
pub fn select_checkpoint(history: &[(u64, BTreeMap<String, f64>)]) -> Result<u64> {
    let mut best: Option<(f64, u64)> = None;
    for (step, cers) in history {
        if cers.is_empty() {
            return Err(Error::invalid(format!("no validation scores at step {step}")));
        }
        let avg = cers.values().sum::<f64>() / cers.len() as f64;
        let better = match best {
            None => true,
            Some((b, s)) => avg < b || (avg == b && *step < s),
        };
        if better {
            best = Some((avg, *step));
        }
    }
    best.map(|(_, s)| s).ok_or_else(|| Error::invalid("empty checkpoint history"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive recursion over the three edit operations.
    fn naive(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    #[test]
    fn trivial_distances() {
        assert_eq!(edit_distance(b"abc", b"abc").distance, 0);
        let c = edit_distance(b"abc", b"axc");
        assert_eq!((c.distance, c.substitutions), (1, 1));
        let c = edit_distance(b"abc", b"");
        assert_eq!((c.distance, c.deletions), (3, 3));
        let c = edit_distance(b"", b"ab");
        assert_eq!((c.distance, c.insertions), (2, 2));
        // Tie between substitution and delete+insert resolves to substitution.
        let c = edit_distance(b"ab", b"ba");
        assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 0, 0));
    }

    #[test]
    fn rates() {
        assert_eq!(cer("abc", "abc"), 0.0);
        assert_eq!(cer("abcd", ""), 1.0);
        assert!((wer("a b c", "a x c") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("", "xy"), 2.0);
    }

    #[test]
    fn macro_average_examples() {
        let utts = vec![
            Scored {
                id: "1".into(),
                language_id: "p".into(),
                duration_frames: 5,
                reference: "abcdefghij".into(),
                hypothesis: "abcdefghix".into(),
            },
            Scored {
                id: "2".into(),
                language_id: "q".into(),
                duration_frames: 50,
                reference: "abcdefghij".into(),
                hypothesis: "abcdefgxyz".into(),
            },
        ];
        let r = EvalReport::build(&utts, &[("pp".into(), vec!["p".into()])], &[10]).unwrap();
        let p = vec!["p".to_string()];
        let pq = vec!["q".to_string(), "p".to_string()];
        assert!((macro_average(&r, &p, Metric::Cer).unwrap() - 0.1).abs() < 1e-15);
        assert!((macro_average(&r, &pq, Metric::Cer).unwrap() - 0.2).abs() < 1e-15);
        assert!((r.averages["cer_all"] - (r.languages["p"].cer + r.languages["q"].cer) / 2.0).abs() < 1e-15);
        assert_eq!(r.averages["cer_pp"], r.languages["p"].cer);
        assert!(macro_average(&r, &["z".to_string()], Metric::Cer).is_err());
        assert_eq!(r.buckets.iter().map(|b| b.n).collect::<Vec<_>>(), vec![1, 1]);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_tsv().lines().count() > 4);
    }

    #[test]
    fn checkpoint_selection() {
        let h = |v: &[(u64, f64)]| -> Vec<(u64, BTreeMap<String, f64>)> {
            v.iter().map(|&(s, c)| (s, BTreeMap::from([("a".to_string(), c)]))).collect()
        };
        assert_eq!(select_checkpoint(&h(&[(5, 0.3)])).unwrap(), 5);
        assert_eq!(select_checkpoint(&h(&[(1, 0.3), (2, 0.2), (3, 0.1)])).unwrap(), 3);
        assert_eq!(select_checkpoint(&h(&[(20, 0.2), (10, 0.2), (30, 0.4)])).unwrap(), 10);
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn bucket_edges_are_half_open() {
        assert_eq!(bucket_of(10, &[10, 15]), 0);
        assert_eq!(bucket_of(11, &[10, 15]), 1);
        assert_eq!(bucket_of(16, &[10, 15]), 2);
        let t = ErrorTally::score(&["a", "b"], &["a"]);
        let b = duration_buckets(&[(3, t), (4, t)], &[10, 20]).unwrap();
        assert_eq!(b[0].wer, 0.5);
        assert_eq!((b[1].n, b[2].n), (0, 0));
        assert!(duration_buckets(&[], &[5, 5]).is_err());
    }

    fn arb_text() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(prop::sample::select(vec![b'a', b'b', b'c']), 0..=8)
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(a in arb_text(), b in arb_text()) {
            let c = edit_distance(&a, &b);
            prop_assert_eq!(c.distance, naive(&a, &b));
            prop_assert_eq!(c.distance, c.substitutions + c.insertions + c.deletions);
            prop_assert_eq!(a.len() + c.insertions, b.len() + c.deletions);
        }

        #[test]
        fn metric_axioms(a in arb_text(), b in arb_text(), c in arb_text(), s in arb_text()) {
            let d = |x: &[u8], y: &[u8]| edit_distance(x, y).distance;
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
            let (mut a2, mut b2) = (a.clone(), b.clone());
            a2.extend(&s);
            b2.extend(&s);
            prop_assert_eq!(d(&a2, &b2), d(&a, &b));
        }

        #[test]
        fn buckets_recombine(items in prop::collection::vec((0usize..40, 0usize..6, 1usize..9), 1..30)) {
            let items: Vec<(usize, ErrorTally)> = items
                .into_iter()
                .map(|(dur, e, n)| (dur, ErrorTally {
                    counts: EditCounts { distance: e, substitutions: e, ..Default::default() },
                    ref_units: n,
                    denominator: n,
                    empty_refs: 0,
                }))
                .collect();
            let b = duration_buckets(&items, &[9, 19, 29]).unwrap();
            prop_assert_eq!(b.iter().map(|x| x.n).sum::<usize>(), items.len());
            let total_err: usize = items.iter().map(|(_, t)| t.counts.distance).sum();
            let total_ref: usize = items.iter().map(|(_, t)| t.denominator).sum();
            let recombined: f64 = b.iter().map(|x| x.wer * x.ref_words as f64).sum::<f64>() / total_ref as f64;
            prop_assert!((recombined - total_err as f64 / total_ref as f64).abs() < 1e-12);
        }

        #[test]
        fn macro_is_order_invariant(c1 in 0.0f64..1.0, c2 in 0.0f64..1.0, c3 in 0.0f64..1.0) {
            let mut r = EvalReport::default();
            for (k, c) in [("x", c1), ("y", c2), ("z", c3)] {
                r.languages.insert(k.into(), LanguageScores::from_tallies(ErrorTally::default(), ErrorTally::default(), 0));
                r.languages.get_mut(k).unwrap().cer = c;
            }
            let a = macro_average(&r, &["x".into(), "y".into(), "z".into()], Metric::Cer).unwrap();
            let b = macro_average(&r, &["z".into(), "x".into(), "y".into()], Metric::Cer).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
