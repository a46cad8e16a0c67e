//! Synthetic languages: an alphabet, a character bigram chain for transcripts,
//! and per-character acoustic prototypes that stand in for audio.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Features;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Characters (and their prototypes) that several languages may share.
/// Shared characters sound the same in every language that uses them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SharedPool {
    pub chars: Vec<char>,
    pub prototypes: Vec<Vec<f64>>,
    /// Prototype of the word separator, common to all languages.
    pub space: Vec<f64>,
}

impl SharedPool {
    pub fn generate(seed: u64, size: usize, dim: usize, scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be >= 1"));
        }
        if size > 26 {
            return Err(Error::invalid("shared pool holds at most 26 characters"));
        }
        let mut rng = rng_from(seed, &[0x5001]);
        let chars: Vec<char> = (0..size).map(|i| (b'a' + i as u8) as char).collect();
        let mut vectors = distinct_vectors(&mut rng, size + 1, dim, scale, &[]);
        let space = vectors.pop().expect("pool vectors");
        Ok(SharedPool {
            chars,
            prototypes: vectors,
            space,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharPrototype {
    pub vector: Vec<f64>,
    pub min_frames: usize,
    pub max_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub language_id: String,
    pub alphabet: Vec<char>,
    /// Row-stochastic over `alphabet ∪ {space}`; space is the last index.
    pub char_bigram: Vec<Vec<f64>>,
    /// One per alphabet character, then the space prototype last.
    pub char_prototypes: Vec<CharPrototype>,
    pub channel_bias: Vec<f64>,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LanguageGenConfig {
    pub language_id: String,
    pub alphabet_size: usize,
    /// Fraction of the alphabet drawn from the shared pool.
    pub overlap: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// First codepoint of this language's private characters.
    pub private_base: u32,
    pub prototype_scale: f64,
    pub bias_scale: f64,
    pub char_frames: [usize; 2],
    /// Relative weight of the space transition in each bigram row.
    pub space_weight: f64,
    /// Relative weight of the self-transition in each letter row.
    pub repeat_weight: f64,
}

impl LanguageGenConfig {
    pub fn new(language_id: &str, alphabet_size: usize, overlap: f64, feature_dim: usize) -> Self {
        LanguageGenConfig {
            language_id: language_id.to_string(),
            alphabet_size,
            overlap,
            feature_dim,
            noise_sigma: 0.3,
            private_base: 0x3b1,
            prototype_scale: 1.0,
            bias_scale: 0.5,
            char_frames: [4, 7],
            space_weight: 2.0,
            repeat_weight: 1.0,
        }
    }
}

fn distinct_vectors<R: Rng>(
    rng: &mut R,
    n: usize,
    dim: usize,
    scale: f64,
    existing: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, scale.max(f64::MIN_POSITIVE)).expect("normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let clash = out.iter().chain(existing).any(|w| l2(&v, w) == 0.0);
        if !clash {
            out.push(v);
        }
    }
    out
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn gen_language_spec(seed: u64, cfg: &LanguageGenConfig, pool: &SharedPool) -> Result<LanguageSpec> {
    if cfg.alphabet_size < 2 {
        return Err(Error::invalid("alphabet size must be >= 2"));
    }
    if !(0.0..=1.0).contains(&cfg.overlap) {
        return Err(Error::invalid("overlap must lie in [0, 1]"));
    }
    if cfg.feature_dim == 0 || pool.space.len() != cfg.feature_dim {
        return Err(Error::Dimension(format!(
            "feature dim {} vs shared pool dim {}",
            cfg.feature_dim,
            pool.space.len()
        )));
    }
    if cfg.char_frames[0] < 1 || cfg.char_frames[0] > cfg.char_frames[1] {
        return Err(Error::invalid("char_frames must satisfy 1 <= min <= max"));
    }
    let n_shared = (cfg.overlap * cfg.alphabet_size as f64).round() as usize;
    if n_shared > pool.chars.len() {
        return Err(Error::invalid(format!(
            "{n_shared} shared characters requested but the pool has {}",
            pool.chars.len()
        )));
    }
    let mut rng = rng_from(seed, &[0x1a9]);

    let shared_idx = sample(&mut rng, pool.chars.len(), n_shared).into_vec();
    let mut entries: Vec<(char, Vec<f64>)> = shared_idx
        .iter()
        .map(|&i| (pool.chars[i], pool.prototypes[i].clone()))
        .collect();
    let n_private = cfg.alphabet_size - n_shared;
    let mut taken: Vec<Vec<f64>> = pool.prototypes.clone();
    taken.push(pool.space.clone());
    let private = distinct_vectors(&mut rng, n_private, cfg.feature_dim, cfg.prototype_scale, &taken);
    for (i, v) in private.into_iter().enumerate() {
        let c = char::from_u32(cfg.private_base + i as u32)
            .filter(|c| !c.is_whitespace() && *c != '\t')
            .ok_or_else(|| Error::invalid("private_base yields an invalid character"))?;
        if pool.chars.contains(&c) {
            return Err(Error::invalid(format!("private character {c:?} collides with the shared pool")));
        }
        entries.push((c, v));
    }
    entries.sort_by_key(|(c, _)| *c);

    let k = entries.len() + 1;
    let mut char_bigram = Vec::with_capacity(k);
    for row in 0..k {
        let mut w: Vec<f64> = (0..k)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        if row == k - 1 {
            w[k - 1] = 0.0;
        } else {
            w[k - 1] *= cfg.space_weight;
            w[row] *= cfg.repeat_weight;
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        char_bigram.push(w);
    }

    let frames = |vector: Vec<f64>| CharPrototype {
        vector,
        min_frames: cfg.char_frames[0],
        max_frames: cfg.char_frames[1],
    };
    let alphabet: Vec<char> = entries.iter().map(|(c, _)| *c).collect();
    let mut char_prototypes: Vec<CharPrototype> = entries.into_iter().map(|(_, v)| frames(v)).collect();
    char_prototypes.push(frames(pool.space.clone()));

    let bias_normal = Normal::new(0.0, cfg.bias_scale.max(f64::MIN_POSITIVE)).expect("normal");
    let channel_bias = (0..cfg.feature_dim).map(|_| bias_normal.sample(&mut rng)).collect();

    let spec = LanguageSpec {
        language_id: cfg.language_id.clone(),
        alphabet,
        char_bigram,
        char_prototypes,
        channel_bias,
        noise_sigma: cfg.noise_sigma,
    };
    spec.validate()?;
    Ok(spec)
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.alphabet.len() + 1;
        if self.alphabet.is_empty() {
            return Err(Error::invalid("empty alphabet"));
        }
        let mut sorted = self.alphabet.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.alphabet.len() || self.alphabet.contains(&' ') {
            return Err(Error::invalid("alphabet has duplicates or contains space"));
        }
        if self.char_bigram.len() != k || self.char_bigram.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("bigram must be (|alphabet|+1)^2".into()));
        }
        for (i, row) in self.char_bigram.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid(format!("bigram row {i} is not stochastic (sum {s})")));
            }
        }
        if self.char_prototypes.len() != k {
            return Err(Error::Dimension("one prototype per character plus space".into()));
        }
        let dim = self.channel_bias.len();
        for p in &self.char_prototypes {
            if p.vector.len() != dim {
                return Err(Error::Dimension("prototype dim differs from channel bias".into()));
            }
            if p.min_frames < 1 || p.min_frames > p.max_frames {
                return Err(Error::invalid("prototype duration range must satisfy 1 <= min <= max"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.channel_bias.len()
    }

    fn space_index(&self) -> usize {
        self.alphabet.len()
    }

    fn index_of(&self, c: char) -> Option<usize> {
        if c == ' ' {
            Some(self.space_index())
        } else {
            self.alphabet.iter().position(|&a| a == c)
        }
    }
}

fn draw<R: Rng>(rng: &mut R, weights: &[f64], exclude: Option<usize>) -> Option<usize> {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, w)| w)
        .sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if Some(i) == exclude || w <= 0.0 {
            continue;
        }
        last = Some(i);
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    last
}

/// Samples a transcript from the bigram chain. The first character is drawn
/// from the space row (the boundary state) restricted to letters; spaces are
/// never leading, trailing or doubled.
pub fn sample_transcript(spec: &LanguageSpec, len_range: [usize; 2], seed: u64) -> Result<String> {
    let [lo, hi] = len_range;
    if lo < 1 || lo > hi {
        return Err(Error::invalid("transcript length range must satisfy 1 <= min <= max"));
    }
    let mut rng = rng_from(seed, &[0x7e47]);
    let len = rng.random_range(lo..=hi);
    let space = spec.space_index();
    let mut out = String::with_capacity(len);
    let mut prev = space;
    for pos in 0..len {
        let no_space = prev == space || pos + 1 == len;
        let next = draw(&mut rng, &spec.char_bigram[prev], no_space.then_some(space)).unwrap_or(0);
        out.push(if next == space { ' ' } else { spec.alphabet[next] });
        prev = next;
    }
    Ok(out)
}

/// Renders a transcript as frames: each character lasts a sampled number of
/// frames equal to `prototype + channel_bias + N(0, noise_sigma²)`.
pub fn synthesize_features(spec: &LanguageSpec, transcript: &str, seed: u64) -> Result<Features> {
    if transcript.is_empty() {
        return Err(Error::invalid("cannot synthesize an empty transcript"));
    }
    let dim = spec.feature_dim();
    let mut rng = rng_from(seed, &[0x5e7]);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::new();
    let mut frames = 0;
    for c in transcript.chars() {
        let idx = spec.index_of(c).ok_or(Error::UnknownSymbol(c))?;
        let proto = &spec.char_prototypes[idx];
        let d = rng.random_range(proto.min_frames..=proto.max_frames);
        for _ in 0..d {
            for j in 0..dim {
                let mut v = proto.vector[j] + spec.channel_bias[j];
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v as f32);
            }
        }
        frames += d;
    }
    Features::new(frames, dim, data)
}
