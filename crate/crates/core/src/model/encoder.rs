use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::EncoderConfig;
use super::graph::{Graph, Var};
use super::params::{init_params, ModelParams};
use crate::corpus::SymbolTable;
use crate::ctc::{ctc_nll, CtcInstance};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{log_softmax_rows, log_sum_exp, matmul, Tensor};

/// Encoder with a shared CTC head over all symbols and a mean-pooled
/// language-ID head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub symbols: SymbolTable,
    pub languages: Vec<String>,
    pub params: ModelParams,
}

pub struct HeadVars {
    pub hidden: Var,
    pub ctc_logits: Var,
    pub lid_logits: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub ctc_logits: Tensor,
    pub lid_logits: Tensor,
}

/// One supervised instance. `language: None` skips the LID term (pseudo-labels).
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub features: Tensor,
    pub target: Vec<u32>,
    pub language: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ctc: f64,
    pub lid: f64,
}

impl Model {
    pub fn new(config: EncoderConfig, symbols: SymbolTable, languages: Vec<String>, seed: u64) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::invalid("model needs at least one language"));
        }
        let params = init_params(&config, symbols.len(), languages.len(), seed)?;
        Ok(Model {
            config,
            symbols,
            languages,
            params,
        })
    }

    pub fn language_index(&self, id: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == id)
            .ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let n = g.value(x).len();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..n).map(|_| if r.random::<f64>() < p { 0.0 } else { keep }).collect();
                g.mask(x, mask)
            }
            _ => x,
        }
    }

    /// Records the full forward pass on `g`. Dropout is active iff `rng` is given.
    pub fn build(&self, g: &mut Graph, features: Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<HeadVars> {
        let cfg = &self.config;
        if features.rows == 0 {
            return Err(Error::Dimension("utterance has no frames".into()));
        }
        if features.cols != cfg.input_dim {
            return Err(Error::Dimension(format!(
                "features have dim {} but the encoder expects {}",
                features.cols, cfg.input_dim
            )));
        }
        let x = g.input(features);
        let cols = g.im2col(x, cfg.conv_filter_len, cfg.conv_stride, cfg.pad());
        let (cw, cb) = (g.param("conv.w"), g.param("conv.b"));
        let conv = g.linear(cols, cw, cb);
        let mut h = g.relu(conv);

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let (g1, b1) = (g.param(&p("ln1.g")), g.param(&p("ln1.b")));
            let a = g.layer_norm(h, g1, b1);
            let (wq, bq, wk, bk, wv, bv) = (
                g.param(&p("attn.wq")),
                g.param(&p("attn.bq")),
                g.param(&p("attn.wk")),
                g.param(&p("attn.bk")),
                g.param(&p("attn.wv")),
                g.param(&p("attn.bv")),
            );
            let q = g.linear(a, wq, bq);
            let k = g.linear(a, wk, bk);
            let v = g.linear(a, wv, bv);
            let rel = g.param(&p("relpos"));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let s = g.rel_scores(qh, kh, rel, cfg.relpos_clip, scale);
                let pr = g.softmax(s);
                heads.push(g.matmul(pr, vh));
            }
            let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(heads) };
            let (wo, bo) = (g.param(&p("attn.wo")), g.param(&p("attn.bo")));
            let o = g.linear(o, wo, bo);
            let o = self.dropout(g, o, &mut rng);
            h = g.add(h, o);

            let (g2, b2) = (g.param(&p("ln2.g")), g.param(&p("ln2.b")));
            let a = g.layer_norm(h, g2, b2);
            let (w1, fb1, w2, fb2) = (
                g.param(&p("ffn.w1")),
                g.param(&p("ffn.b1")),
                g.param(&p("ffn.w2")),
                g.param(&p("ffn.b2")),
            );
            let f = g.linear(a, w1, fb1);
            let f = g.relu(f);
            let f = g.linear(f, w2, fb2);
            let f = self.dropout(g, f, &mut rng);
            h = g.add(h, f);
        }
        let (fg, fb) = (g.param("final_ln.g"), g.param("final_ln.b"));
        let hidden = g.layer_norm(h, fg, fb);
        let (ow, ob) = (g.param("ctc.w"), g.param("ctc.b"));
        let ctc_logits = g.linear(hidden, ow, ob);
        let lw = g.param("lid.w");
        let proj = g.matmul(hidden, lw);
        let lid_logits = g.mean_rows(proj);
        Ok(HeadVars {
            hidden,
            ctc_logits,
            lid_logits,
        })
    }

    /// Eval-mode forward pass (no dropout).
    pub fn forward(&self, features: &Tensor) -> Result<ForwardOutput> {
        let mut g = Graph::new(&self.params);
        let v = self.build(&mut g, features.clone(), None)?;
        Ok(ForwardOutput {
            hidden: g.value(v.hidden).clone(),
            ctc_logits: g.value(v.ctc_logits).clone(),
            lid_logits: g.value(v.lid_logits).clone(),
        })
    }

    pub fn encoder_forward(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.forward(features)?.hidden)
    }

    pub fn ctc_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.forward(features)?.ctc_logits)
    }

    /// Adds `scale · ∂loss/∂θ` for one example into `grads` and returns the loss.
    pub fn accumulate_gradients(
        &self,
        ex: &TrainExample,
        gamma: f64,
        rng: Option<&mut ChaCha8Rng>,
        scale: f64,
        grads: &mut ModelParams,
    ) -> Result<LossParts> {
        let mut g = Graph::new(&self.params);
        let v = self.build(&mut g, ex.features.clone(), rng)?;
        let lp = g.log_softmax(v.ctc_logits);
        let ctc = g.ctc_loss(lp, &ex.target)?;
        let mut terms = vec![(ctc, 1.0)];
        let mut lid_val = 0.0;
        if let Some(lang) = ex.language {
            if lang >= self.languages.len() {
                return Err(Error::UnknownLanguage(format!("#{lang}")));
            }
            let ce = g.cross_entropy(v.lid_logits, lang);
            lid_val = g.scalar(ce);
            terms.push((ce, gamma));
        }
        let ctc_val = g.scalar(ctc);
        let total = g.weighted_sum(terms);
        let total_val = g.scalar(total);
        g.backward(total, scale, grads);
        Ok(LossParts {
            total: total_val,
            ctc: ctc_val,
            lid: lid_val,
        })
    }
}

/// Gradient of the mean joint loss over `batch`. With `dropout_seed` the
/// forward runs in training mode, each example drawing its own mask stream.
pub fn backward(model: &Model, batch: &[TrainExample], gamma: f64, dropout_seed: Option<u64>) -> Result<(LossParts, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = model.params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossParts::default();
    for (i, ex) in batch.iter().enumerate() {
        let mut rng = dropout_seed.map(|s| rng_from(s, &[i as u64]));
        let parts = model.accumulate_gradients(ex, gamma, rng.as_mut(), scale, &mut grads)?;
        mean.total += parts.total * scale;
        mean.ctc += parts.ctc * scale;
        mean.lid += parts.lid * scale;
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    Ok((mean, grads))
}

/// Per-frame linear projection onto the symbol inventory.
pub fn ctc_head(params: &ModelParams, hidden: &Tensor) -> Tensor {
    let mut out = matmul(hidden, params.get("ctc.w").expect("ctc.w"));
    let b = params.get("ctc.b").expect("ctc.b");
    for r in 0..out.rows {
        out.row_mut(r).iter_mut().zip(&b.data).for_each(|(o, v)| *o += v);
    }
    out
}

/// Linear projection followed by mean pooling over time.
pub fn lid_head(params: &ModelParams, hidden: &Tensor) -> Tensor {
    let proj = matmul(hidden, params.get("lid.w").expect("lid.w"));
    let mut out = Tensor::zeros(1, proj.cols);
    for r in 0..proj.rows {
        out.data.iter_mut().zip(proj.row(r)).for_each(|(o, v)| *o += v);
    }
    out.scale(1.0 / proj.rows as f64);
    out
}

/// `ℓ = ℓ_CTC + γ·ℓ_LID` for one utterance.
pub fn joint_loss(ctc_logits: &Tensor, lid_logits: &Tensor, target: &[u32], language: usize, gamma: f64) -> Result<LossParts> {
    if language >= lid_logits.cols {
        return Err(Error::UnknownLanguage(format!("#{language}")));
    }
    let inst = CtcInstance::new(log_softmax_rows(ctc_logits), target.to_vec())?;
    let (ctc, _) = ctc_nll(&inst)?;
    let lid = log_sum_exp(&lid_logits.data) - lid_logits.data[language];
    Ok(LossParts {
        total: ctc + gamma * lid,
        ctc,
        lid,
    })
}
