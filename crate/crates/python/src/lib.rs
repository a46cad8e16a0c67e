use std::path::PathBuf;

use multipl::corpus::{generate_corpus, read_features, write_corpus, CorpusConfig, SymbolTable};
use multipl::ctc::{self, CtcInstance};
use multipl::eval;
use multipl::features::{extract, FrontendConfig};
use multipl::lm::{beam_search, train_ngram, BeamConfig, NGramLM};
use multipl::model::{load_checkpoint, TrainState};
use multipl::recipe::TOY_PRESET;
use multipl::slimipl::{crop_and_stitch, pseudo_label, PlMode};
use multipl::tensor::Tensor;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: multipl::Error) -> PyErr {
    match e {
        multipl::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(Tensor::from_rows(&rows))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

/// log p(target | log_probs) summed over CTC alignments.
#[pyfunction]
fn ctc_logprob(log_probs: Vec<Vec<f64>>, target: Vec<u32>) -> PyResult<f64> {
    ctc::ctc_logprob(&tensor(log_probs)?, &target).map_err(err)
}

/// CTC negative log-likelihood and its gradient with respect to `log_probs`.
#[pyfunction]
fn ctc_nll(log_probs: Vec<Vec<f64>>, target: Vec<u32>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let inst = CtcInstance::new(tensor(log_probs)?, target).map_err(err)?;
    let (nll, grad) = ctc::ctc_nll(&inst).map_err(err)?;
    Ok((nll, rows(&grad)))
}

#[pyfunction]
fn greedy_decode(logits: Vec<Vec<f64>>) -> PyResult<Vec<u32>> {
    Ok(ctc::greedy_decode(&tensor(logits)?))
}

#[pyfunction]
fn collapse(alignment: Vec<u32>) -> Vec<u32> {
    ctc::collapse(&alignment)
}

/// (distance, substitutions, insertions, deletions) between two strings, per character.
#[pyfunction]
fn edit_distance(reference: &str, hypothesis: &str) -> (usize, usize, usize, usize) {
    let e = eval::edit_distance(&eval::chars(reference), &eval::chars(hypothesis));
    (e.distance, e.substitutions, e.insertions, e.deletions)
}

#[pyfunction]
fn cer(reference: &str, hypothesis: &str) -> f64 {
    eval::cer(reference, hypothesis)
}

#[pyfunction]
fn wer(reference: &str, hypothesis: &str) -> f64 {
    eval::wer(reference, hypothesis)
}

/// Log-mel features of mono samples in [-1, 1).
#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz=16000, n_mels=80))]
fn log_mel(samples: Vec<f64>, sample_rate_hz: u32, n_mels: usize) -> PyResult<Vec<Vec<f64>>> {
    let cfg = FrontendConfig {
        sample_rate_hz,
        n_mels,
        ..FrontendConfig::default()
    };
    let f = extract(&samples, &cfg).map_err(err)?;
    Ok(rows(&f.to_tensor()))
}

/// Reads a feature matrix file.
#[pyfunction]
fn load_features(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&read_features(&path).map_err(err)?.to_tensor()))
}

/// Bundled toy run configuration as JSON.
#[pyfunction]
fn toy_preset() -> &'static str {
    TOY_PRESET
}

/// Generates the synthetic corpus described by `config_json` under `out_dir`.
/// Returns the language ids.
#[pyfunction]
fn gen_corpus(config_json: &str, out_dir: PathBuf) -> PyResult<Vec<String>> {
    let cfg: CorpusConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(err)?;
    let corpus = generate_corpus(&cfg).map_err(err)?;
    write_corpus(&corpus, &out_dir).map_err(err)?;
    Ok(cfg.language_ids())
}

/// Word n-gram LM with Witten-Bell backoff.
#[pyclass(name = "NGramLM")]
struct PyNGramLM {
    inner: NGramLM,
}

#[pymethods]
impl PyNGramLM {
    /// Trains on whitespace-tokenized sentences.
    #[staticmethod]
    fn train(sentences: Vec<String>, order: usize) -> PyResult<Self> {
        let toks: Vec<Vec<&str>> = sentences.iter().map(|s| s.split_whitespace().collect()).collect();
        Ok(Self {
            inner: train_ngram(&toks, order).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: NGramLM::read(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    /// Natural-log probability of a word sequence.
    #[pyo3(signature = (words, with_eos=true))]
    fn logprob(&self, words: Vec<String>, with_eos: bool) -> f64 {
        self.inner.lm_logprob(&words, with_eos)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

/// Beam search over CTC log-probabilities. Returns (transcript, score, ctc_logprob).
#[pyfunction]
#[pyo3(signature = (log_probs, symbols, lm=None, beam_size=50, alpha=0.0, beta=0.0))]
fn beam_decode(
    log_probs: Vec<Vec<f64>>,
    symbols: Vec<String>,
    lm: Option<PyRef<'_, PyNGramLM>>,
    beam_size: usize,
    alpha: f64,
    beta: f64,
) -> PyResult<(String, f64, f64)> {
    let table = SymbolTable::from_strings(&symbols).map_err(err)?;
    let cfg = BeamConfig {
        beam_size,
        alpha,
        beta,
        ..BeamConfig::default()
    };
    let r = beam_search(&tensor(log_probs)?, &table, lm.as_ref().map(|l| &l.inner), &cfg).map_err(err)?;
    Ok((r.transcript, r.score, r.ctc_logprob))
}

/// A trained encoder loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    state: TrainState,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(&path).map_err(err)?,
        })
    }

    #[getter]
    fn symbols(&self) -> Vec<String> {
        self.state.model.symbols.to_strings()
    }

    #[getter]
    fn languages(&self) -> Vec<String> {
        self.state.model.languages.clone()
    }

    #[getter]
    fn update_counter(&self) -> u64 {
        self.state.update_counter
    }

    /// CTC logits, one row per encoder frame.
    fn ctc_logits(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.state.model.ctc_logits(&tensor(features)?).map_err(err)?))
    }

    /// Logits from consecutive crops of `crop_len` input frames.
    fn cropped_logits(&self, features: Vec<Vec<f64>>, crop_len: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&crop_and_stitch(&self.state.model, &tensor(features)?, crop_len).map_err(err)?))
    }

    /// Greedy transcript; `crop_len` > 0 decodes in cropped mode.
    #[pyo3(signature = (features, crop_len=0))]
    fn transcribe(&self, features: Vec<Vec<f64>>, crop_len: usize) -> PyResult<String> {
        let mode = if crop_len > 0 { PlMode::Cropped } else { PlMode::Full };
        let labels = pseudo_label(&self.state.model, &tensor(features)?, mode, crop_len).map_err(err)?;
        Ok(self.state.model.symbols.decode(&labels))
    }
}

#[pymodule]
fn multipl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ctc_logprob, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_nll, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(collapse, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(toy_preset, m)?)?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(beam_decode, m)?)?;
    m.add_class::<PyNGramLM>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
