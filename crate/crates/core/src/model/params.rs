use std::collections::HashMap;

use rand::Rng;

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// Ordered bundle of named tensors. Gradients and optimizer accumulators use
/// the same type with identical names and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, (n, t)) in named.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate tensor name {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(ModelParams { names, tensors, index })
    }

    /// Zero tensors shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
            index: self.index.clone(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, scale);
        }
    }

    /// First tensor holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| &t.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every value to the nearest `f32`, so checkpoints round-trip exactly.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

pub fn param_names(cfg: &EncoderConfig) -> Vec<String> {
    let mut n = vec!["conv.w".to_string(), "conv.b".to_string()];
    for l in 0..cfg.n_layers {
        for s in [
            "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
            "relpos", "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
        ] {
            n.push(format!("layer{l}.{s}"));
        }
    }
    n.extend(["final_ln.g", "final_ln.b", "ctc.w", "ctc.b", "lid.w"].map(String::from));
    n
}

fn shape_of(name: &str, cfg: &EncoderConfig, n_symbols: usize, n_languages: usize) -> (usize, usize) {
    let d = cfg.d_model;
    let leaf = name.rsplit_once('.').map_or(name, |(_, l)| l);
    let scope = name.split('.').next().unwrap_or("");
    match (scope, leaf) {
        ("conv", "w") => (cfg.conv_filter_len * cfg.input_dim, d),
        ("ctc", "w") => (d, n_symbols),
        ("ctc", "b") => (1, n_symbols),
        ("lid", "w") => (d, n_languages),
        (_, "relpos") => (2 * cfg.relpos_clip + 1, cfg.head_dim()),
        (_, "w1") => (d, cfg.d_ff),
        (_, "b1") => (1, cfg.d_ff),
        (_, "w2") => (cfg.d_ff, d),
        (_, "wq" | "wk" | "wv" | "wo") => (d, d),
        _ => (1, d),
    }
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params(cfg: &EncoderConfig, n_symbols: usize, n_languages: usize, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = rng_from(seed, &[0x1417]);
    let mut named = Vec::new();
    for name in param_names(cfg) {
        let (r, c) = shape_of(&name, cfg, n_symbols, n_languages);
        let leaf = name.rsplit_once('.').map_or(name.as_str(), |(_, l)| l);
        let t = match leaf {
            "g" => Tensor::filled(r, c, 1.0),
            "relpos" => Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-0.1..0.1)).collect()),
            l if l.starts_with('b') => Tensor::zeros(r, c),
            _ => {
                let limit = (6.0 / (r + c) as f64).sqrt();
                Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-limit..limit)).collect())
            }
        };
        named.push((name, t));
    }
    let mut p = ModelParams::from_named(named)?;
    p.round_to_f32();
    Ok(p)
}
