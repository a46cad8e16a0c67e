//! The `multipl` command line: one binary, one subcommand per pipeline step,
//! every output under `--out-dir`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::corpus::{generate_corpus, load_utterances, read_features, write_corpus, CorpusLayout, Manifest, ManifestEntry, SymbolTable};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::lm::{beam_search, grid, grid_search_alpha_beta, tokenize_lines, train_ngram, BeamConfig, DevItem, NGramLM};
use crate::model::load_checkpoint;
use crate::recipe::{run_recipe_jobs, run_scenario, write_json, FinalMode, Pipeline, RunConfig};
use crate::slimipl::{filter_pl, pseudo_label, PlMode};
use crate::tensor::{log_softmax_rows, Tensor};
use crate::ctc::greedy_decode;

#[derive(Debug, Parser)]
#[command(name = "multipl", version, about = "Multilingual CTC training with per-language pseudo-labeling")]
pub struct Cli {
    /// Run seed for every training stage.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Run configuration (JSON). Defaults to the bundled toy preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; every output is written below it.
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,
    /// Maximum number of concurrent per-language stages.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into <out-dir>/corpus.
    GenCorpus,
    /// Supervised training: multilingual base, monolingual, or pooled
    /// labeled + pseudo-labeled (with --pl).
    Train(TrainArgs),
    /// Continue a checkpoint on labeled data of one language, or of every
    /// labeled language with --all-languages.
    Finetune(FinetuneArgs),
    /// slimIPL for one language, followed by its final PL manifest.
    Slimipl(SlimiplArgs),
    /// Greedy pseudo-labels for a manifest, length-filtered.
    Pseudolabel(PseudolabelArgs),
    /// Decode features or logits with greedy or beam search.
    Decode(DecodeArgs),
    /// Train a word n-gram LM.
    TrainLm(TrainLmArgs),
    /// Score a checkpoint on every validation set.
    Evaluate(EvaluateArgs),
    /// Run a comparison scenario.
    Scenario(ScenarioArgs),
    /// Run the whole pipeline, generating the corpus first if needed.
    Recipe(CorpusArg),
}

#[derive(Debug, Args)]
pub struct CorpusArg {
    /// Corpus directory [default: <out-dir>/corpus].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FinalModeArg {
    Finetune,
    FromScratchBase,
    FromScratchLarge,
}

impl From<FinalModeArg> for FinalMode {
    fn from(m: FinalModeArg) -> Self {
        match m {
            FinalModeArg::Finetune => FinalMode::Finetune,
            FinalModeArg::FromScratchBase => FinalMode::FromScratchBase,
            FinalModeArg::FromScratchLarge => FinalMode::FromScratchLarge,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Stage name [default: base, mono_<language>, or final].
    #[arg(long)]
    pub stage: Option<String>,
    /// LID loss weight [default: from config].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Train a monolingual model on this language only.
    #[arg(long, conflicts_with = "pl")]
    pub language: Option<String>,
    /// Pseudo-label manifest to pool with the labeled data (repeatable).
    #[arg(long)]
    pub pl: Vec<PathBuf>,
    /// How the pooled model starts [default: from config].
    #[arg(long, value_enum, requires = "pl")]
    pub final_mode: Option<FinalModeArg>,
    /// Checkpoint to continue when --final-mode finetune.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Language to fine-tune on.
    #[arg(long, required_unless_present = "all_languages")]
    pub language: Option<String>,
    /// Fine-tune on the labeled data of every language instead.
    #[arg(long, conflicts_with = "language")]
    pub all_languages: bool,
    /// Input checkpoint [default: <out-dir>/checkpoints/base.ckp, or final.ckp with --all-languages].
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Number of updates [default: scaled value from config].
    #[arg(long)]
    pub updates: Option<u64>,
    /// Stage name [default: finetune_<language> or finetune_back].
    #[arg(long)]
    pub stage: Option<String>,
}

#[derive(Debug, Args)]
pub struct SlimiplArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Labeled language.
    #[arg(long)]
    pub language: String,
    /// Language whose unlabeled pool is pseudo-labeled [default: --language].
    #[arg(long)]
    pub unlabeled_language: Option<String>,
    /// Input checkpoint [default: <out-dir>/checkpoints/finetune_<language>.ckp].
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Crop unlabeled utterances for every PL generation.
    #[arg(long)]
    pub always_crop: bool,
    /// Stage name [default: slimipl_<language>].
    #[arg(long)]
    pub stage: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlModeArg {
    Full,
    Cropped,
}

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of utterances to label.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: PlModeArg,
    /// Crop length in frames for --mode cropped [default: from config].
    #[arg(long)]
    pub crop_len: Option<usize>,
    /// Maximum PL length [default: from config].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output manifest name under <out-dir>/pl [default: <manifest stem>.pl.tsv].
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeModeArg {
    Greedy,
    Beam,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Model checkpoint; supplies the symbol table and, for --features and
    /// --manifest, the acoustic model.
    #[arg(long, required_unless_present = "symbols")]
    pub checkpoint: Option<PathBuf>,
    /// Symbol inventory as a string of characters (space is implied), for
    /// decoding --logits without a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub symbols: Option<String>,
    /// FEA1 feature file.
    #[arg(long, group = "input")]
    pub features: Option<PathBuf>,
    /// FEA1 file of per-frame CTC logits (T × symbols).
    #[arg(long, group = "input")]
    pub logits: Option<PathBuf>,
    /// Manifest whose utterances are decoded.
    #[arg(long, group = "input")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "greedy")]
    pub mode: DecodeModeArg,
    /// LM weight.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Word insertion weight.
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// Beam size [default: from config].
    #[arg(long)]
    pub beam_size: Option<usize>,
    /// NGLM language model for beam search.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Output name under <out-dir>/decode.
    #[arg(long, default_value = "decode")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Use this language's LM text from the corpus.
    #[arg(long, required_unless_present = "text")]
    pub language: Option<String>,
    /// Train on a text file instead (one sentence per line).
    #[arg(long, conflicts_with = "language")]
    pub text: Option<PathBuf>,
    /// N-gram order [default: from config].
    #[arg(long)]
    pub order: Option<usize>,
    /// Output name under <out-dir>/lm [default: language or text file stem].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report name under <out-dir>/reports [default: checkpoint file stem].
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_enum, default_value = "greedy")]
    pub mode: DecodeModeArg,
    /// LM weight for --mode beam.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Word insertion weight for --mode beam.
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// Beam size [default: from config].
    #[arg(long)]
    pub beam_size: Option<usize>,
    /// Directory of per-language LMs named <language>.nglm [default: <out-dir>/lm].
    #[arg(long)]
    pub lm_dir: Option<PathBuf>,
    /// Pick α and β per language from the config grids before scoring.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[command(flatten)]
    pub corpus: CorpusArg,
    /// One of gamma_sweep, wrong_language, crop_ablation, monolingual_baselines.
    #[arg(long)]
    pub name: String,
}

/// Usage errors exit with 1, runtime errors with 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    match &cli.config {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display()))),
    }
}

fn corpus_dir(cli: &Cli, arg: &CorpusArg) -> PathBuf {
    arg.corpus.clone().unwrap_or_else(|| cli.out_dir.join("corpus"))
}

fn open(cli: &Cli, cfg: RunConfig, arg: &CorpusArg) -> std::result::Result<Pipeline, Failure> {
    let dir = corpus_dir(cli, arg);
    if !dir.exists() {
        return Err(Failure::Usage(format!("corpus directory {} does not exist (run gen-corpus first)", dir.display())));
    }
    Ok(Pipeline::open(cfg, cli.seed, &cli.out_dir, &dir)?)
}

fn checkpoint_or(cli: &Cli, given: &Option<PathBuf>, stage: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cli.out_dir.join("checkpoints").join(format!("{stage}.ckp")))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    if cli.jobs == 0 {
        return Err(Failure::Usage("--jobs must be >= 1".into()));
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenCorpus => {
            let corpus = generate_corpus(&cfg.corpus)?;
            let dir = cli.out_dir.join("corpus");
            write_corpus(&corpus, &dir)?;
            let counts: Vec<_> = corpus
                .languages
                .iter()
                .map(|l| json!({"language": l.spec.language_id, "train": l.train.len(), "valid": l.valid.len(), "unlabeled": l.unlabeled.len()}))
                .collect();
            print_json(&json!({"corpus": dir, "languages": counts}))?;
        }
        Command::Train(a) => {
            let p = open(cli, cfg, &a.corpus)?;
            let gamma = a.gamma.unwrap_or(p.cfg.train.gamma);
            let (_, rec) = if !a.pl.is_empty() {
                let mode = a.final_mode.map(FinalMode::from).unwrap_or(p.cfg.recipe.final_mode);
                let base = match mode {
                    FinalMode::Finetune => Some(load_checkpoint(&checkpoint_or(cli, &a.init, "base"))?),
                    _ => None,
                };
                let stage = a.stage.clone().unwrap_or_else(|| "final".into());
                p.train_final(&stage, mode, base.as_ref(), &a.pl)?
            } else if let Some(l) = &a.language {
                let stage = a.stage.clone().unwrap_or_else(|| format!("mono_{l}"));
                p.train_monolingual(&stage, l)?
            } else {
                let stage = a.stage.clone().unwrap_or_else(|| "base".into());
                p.train_supervised_multilingual(&stage, gamma)?
            };
            print_json(&rec)?;
        }
        Command::Finetune(a) => {
            let p = open(cli, cfg, &a.corpus)?;
            let (_, rec) = if a.all_languages {
                let input = load_checkpoint(&checkpoint_or(cli, &a.init, "final"))?;
                let n = a.updates.unwrap_or_else(|| p.scaled(p.cfg.recipe.finetune_back_updates));
                let stage = a.stage.clone().unwrap_or_else(|| "finetune_back".into());
                p.finetune_on_labeled_only(&stage, &input, n)?
            } else {
                let l = a.language.clone().expect("clap enforces --language");
                let input = load_checkpoint(&checkpoint_or(cli, &a.init, "base"))?;
                let n = a.updates.unwrap_or_else(|| p.scaled(p.cfg.recipe.finetune_updates));
                let stage = a.stage.clone().unwrap_or_else(|| format!("finetune_{l}"));
                p.finetune_language(&stage, &input, &l, n)?
            };
            print_json(&rec)?;
        }
        Command::Slimipl(a) => {
            let p = open(cli, cfg, &a.corpus)?;
            let l = &a.language;
            let u = a.unlabeled_language.clone().unwrap_or_else(|| l.clone());
            let input = load_checkpoint(&checkpoint_or(cli, &a.init, &format!("finetune_{l}")))?;
            let stage = a.stage.clone().unwrap_or_else(|| format!("slimipl_{l}"));
            let (_, rec, _) = p.run_slimipl_language(&stage, &input, l, &u, a.always_crop)?;
            print_json(&rec)?;
        }
        Command::Pseudolabel(a) => pseudolabel(cli, &cfg, a)?,
        Command::Decode(a) => decode(cli, &cfg, a)?,
        Command::TrainLm(a) => {
            let (text_path, default_name) = match (&a.language, &a.text) {
                (Some(l), _) => (CorpusLayout::new(corpus_dir(cli, &a.corpus)).lm_text(l), l.clone()),
                (None, Some(t)) => (
                    t.clone(),
                    t.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "lm".into()),
                ),
                (None, None) => return Err(Failure::Usage("--language or --text is required".into())),
            };
            let text = std::fs::read_to_string(&text_path).map_err(|e| Error::io(&text_path, e))?;
            let lm = train_ngram(&tokenize_lines(&text), a.order.unwrap_or(cfg.decode.lm_order))?;
            let out = cli.out_dir.join("lm").join(format!("{}.nglm", a.name.clone().unwrap_or(default_name)));
            create_parent(&out)?;
            lm.write(&out)?;
            print_json(&json!({"lm": out, "order": lm.order(), "vocab": lm.vocab().len()}))?;
        }
        Command::Evaluate(a) => evaluate(cli, cfg, a)?,
        Command::Scenario(a) => {
            let p = open(cli, cfg, &a.corpus)?;
            print_json(&run_scenario(&p, &a.name)?)?;
        }
        Command::Recipe(a) => {
            let dir = corpus_dir(cli, a);
            if a.corpus.is_none() && !CorpusLayout::new(&dir).languages_json().exists() {
                write_corpus(&generate_corpus(&cfg.corpus)?, &dir)?;
            }
            let p = open(cli, cfg, a)?;
            let summary = run_recipe_jobs(&p, cli.jobs)?;
            let brief: std::collections::BTreeMap<_, _> =
                summary.stages.iter().map(|(k, r)| (k.clone(), r.metrics.clone())).collect();
            print_json(&json!({"target_language": summary.target_language, "stages": brief}))?;
        }
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn pseudolabel(cli: &Cli, cfg: &RunConfig, a: &PseudolabelArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let model = &state.model;
    let mode = match a.mode {
        PlModeArg::Full => PlMode::Full,
        PlModeArg::Cropped => PlMode::Cropped,
    };
    let crop_len = a.crop_len.unwrap_or(cfg.slimipl.cache.crop_len_frames);
    let max_len = a.max_len.unwrap_or(cfg.slimipl.cache.pl_max_len);
    let input = Manifest::read(&a.manifest)?;
    let name = a.output.clone().unwrap_or_else(|| {
        let stem = a.manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{stem}.pl.tsv")
    });
    let out = cli.out_dir.join("pl").join(name);
    create_parent(&out)?;
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for e in &input.entries {
        let path = Manifest::resolve(&a.manifest, &e.feature_path);
        let features = read_features(&path)?.to_tensor();
        let pl = pseudo_label(model, &features, mode, crop_len)?;
        if !filter_pl(&pl, max_len) {
            dropped += 1;
            continue;
        }
        let abs = std::path::absolute(&path).map_err(|err| Error::io(&path, err))?;
        kept.push(ManifestEntry {
            transcript: Some(model.symbols.decode(&pl)),
            feature_path: abs,
            ..e.clone()
        });
    }
    let n = kept.len();
    Manifest::new(kept)?.write(&out)?;
    print_json(&json!({"manifest": out, "kept": n, "dropped": dropped}))
}

fn beam_config(cfg: &RunConfig, alpha: f64, beta: f64, beam_size: Option<usize>) -> BeamConfig {
    BeamConfig {
        alpha,
        beta,
        beam_size: beam_size.unwrap_or(cfg.decode.beam.beam_size),
        ..cfg.decode.beam
    }
}

fn decode(cli: &Cli, cfg: &RunConfig, a: &DecodeArgs) -> std::result::Result<(), Failure> {
    let model = a.checkpoint.as_ref().map(|p| load_checkpoint(p)).transpose()?.map(|s| s.model);
    let symbols = match (&model, &a.symbols) {
        (Some(m), _) => m.symbols.clone(),
        (None, Some(s)) => SymbolTable::from_chars(s.chars()),
        (None, None) => return Err(Failure::Usage("--checkpoint or --symbols is required".into())),
    };
    let lm = a.lm.as_ref().map(|p| NGramLM::read(p)).transpose()?;
    if lm.is_some() && a.mode == DecodeModeArg::Greedy {
        return Err(Failure::Usage("--lm needs --mode beam".into()));
    }
    let bcfg = beam_config(cfg, a.alpha, a.beta, a.beam_size);
    let need_model = || model.as_ref().ok_or_else(|| Failure::Usage("--features and --manifest need --checkpoint".into()));
    let mut inputs: Vec<(String, Tensor, bool)> = Vec::new();
    if let Some(p) = &a.logits {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.push((id, read_features(p)?.to_tensor(), false));
    } else if let Some(p) = &a.features {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.push((id, read_features(p)?.to_tensor(), true));
    } else if let Some(m) = &a.manifest {
        for u in load_utterances(m)? {
            inputs.push((u.id.clone(), u.features.to_tensor(), true));
        }
    } else {
        return Err(Failure::Usage("one of --features, --logits or --manifest is required".into()));
    }
    let mut tsv = String::new();
    for (id, x, acoustic) in inputs {
        let logits = if acoustic { need_model()?.ctc_logits(&x)? } else { x };
        if logits.cols != symbols.len() {
            return Err(Error::Dimension(format!("logits have {} columns, symbol table has {}", logits.cols, symbols.len())).into());
        }
        let hyp = match a.mode {
            DecodeModeArg::Greedy => symbols.decode(&greedy_decode(&logits)),
            DecodeModeArg::Beam => beam_search(&log_softmax_rows(&logits), &symbols, lm.as_ref(), &bcfg)?.transcript,
        };
        println!("{id}\t{hyp}");
        tsv.push_str(&format!("{id}\t{hyp}\n"));
    }
    let out = cli.out_dir.join("decode").join(format!("{}.tsv", a.name));
    create_parent(&out)?;
    std::fs::write(&out, tsv).map_err(|e| Error::io(&out, e))?;
    Ok(())
}

fn evaluate(cli: &Cli, cfg: RunConfig, a: &EvaluateArgs) -> std::result::Result<(), Failure> {
    if a.grid && a.mode == DecodeModeArg::Greedy {
        return Err(Failure::Usage("--grid needs --mode beam".into()));
    }
    let p = open(cli, cfg, &a.corpus)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let model = &state.model;
    let name = a.name.clone().unwrap_or_else(|| {
        a.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into())
    });
    let report: EvalReport = match a.mode {
        DecodeModeArg::Greedy => p.evaluate(&name, model)?,
        DecodeModeArg::Beam => {
            let lm_dir = a.lm_dir.clone().unwrap_or_else(|| cli.out_dir.join("lm"));
            let mut lms = std::collections::BTreeMap::new();
            let mut weights = std::collections::BTreeMap::new();
            for l in &p.languages {
                let path = lm_dir.join(format!("{l}.nglm"));
                let lm = if path.exists() { Some(NGramLM::read(&path)?) } else { None };
                let mut bcfg = beam_config(&p.cfg, a.alpha, a.beta, a.beam_size);
                if let (true, Some(lm)) = (a.grid, &lm) {
                    let items = p
                        .lang(l)?
                        .valid
                        .iter()
                        .map(|u| {
                            Ok(DevItem {
                                log_probs: log_softmax_rows(&model.ctc_logits(&u.features.to_tensor())?),
                                reference: u.transcript.clone().unwrap_or_default(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let g = grid(&p.cfg.decode.alpha_grid, &p.cfg.decode.beta_grid);
                    let best = grid_search_alpha_beta(&items, &model.symbols, lm, &g, &bcfg)?;
                    bcfg.alpha = best.alpha;
                    bcfg.beta = best.beta;
                    weights.insert(l.clone(), best);
                }
                lms.insert(l.clone(), (lm, bcfg));
            }
            if a.grid {
                write_json(&p.ws.root.join("reports").join(format!("{name}.grid.json")), &weights)?;
            }
            p.evaluate_with(&name, |l, u| {
                let (lm, bcfg) = &lms[l];
                let lp = log_softmax_rows(&model.ctc_logits(&u.features.to_tensor())?);
                Ok(beam_search(&lp, &model.symbols, lm.as_ref(), bcfg)?.transcript)
            })?
        }
    };
    print_json(&report.averages)?;
    Ok(())
}
