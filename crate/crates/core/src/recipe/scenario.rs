use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{write_json, Pipeline};
use crate::error::{Error, Result};
use crate::model::TrainState;
use crate::train::lid_accuracy;

pub const SCENARIOS: [&str; 4] = ["gamma_sweep", "wrong_language", "crop_ablation", "monolingual_baselines"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub rows: Vec<BTreeMap<String, Value>>,
}

fn row(pairs: Value) -> BTreeMap<String, Value> {
    serde_json::from_value(pairs).expect("object literal")
}

impl Pipeline {
    fn base(&self) -> Result<TrainState> {
        Ok(self.train_supervised_multilingual("base", self.cfg.train.gamma)?.0)
    }

    fn finetuned(&self, base: &TrainState, lang: &str) -> Result<TrainState> {
        let n = self.scaled(self.cfg.recipe.finetune_updates);
        Ok(self.finetune_language(&format!("finetune_{lang}"), base, lang, n)?.0)
    }

    fn cer_of(metrics: &BTreeMap<String, f64>, lang: &str) -> f64 {
        metrics.get(&format!("cer_{lang}")).copied().unwrap_or(f64::NAN)
    }

    fn gamma_sweep(&self) -> Result<Vec<BTreeMap<String, Value>>> {
        let mut rows = Vec::new();
        for &g in &self.cfg.recipe.gamma_sweep {
            let stage = if g == self.cfg.train.gamma { "base".to_string() } else { format!("supervised_gamma{g}") };
            let (state, rec) = self.train_supervised_multilingual(&stage, g)?;
            let init = self.new_model(&format!("{stage}/init"), false)?;
            let unchanged = init.params.get("lid.w") == state.model.params.get("lid.w");
            let sets = self.valid_sets(&self.languages)?;
            rows.push(row(json!({
                "gamma": g,
                "stage": stage,
                "cer_macro": rec.metrics["cer_macro"],
                "lid_accuracy": lid_accuracy(&state.model, &sets)?,
                "lid_w_unchanged": unchanged,
            })));
        }
        Ok(rows)
    }

    fn wrong_language(&self) -> Result<Vec<BTreeMap<String, Value>>> {
        let (a, b) = self
            .cfg
            .recipe
            .wrong_language
            .clone()
            .ok_or_else(|| Error::invalid("wrong_language scenario needs recipe.wrong_language = [labeled, unlabeled]"))?;
        let base = self.base()?;
        let ft = self.finetuned(&base, &a)?;
        let ft_rec = self.snapshot(&ft.model)?;
        let (_, wrong, _) = self.run_slimipl_language(&format!("wrong_{a}_{b}"), &ft, &a, &b, false)?;
        let mut rows = vec![
            row(json!({"arm": "finetune", "labeled": a, "unlabeled": null, "cer": Self::cer_of(&ft_rec, &a)})),
            row(json!({"arm": "slimipl_wrong", "labeled": a, "unlabeled": b, "cer": Self::cer_of(&wrong.metrics, &a)})),
        ];
        if !self.lang(&a)?.unlabeled.is_empty() {
            let (_, own, _) = self.run_slimipl_language(&format!("slimipl_{a}"), &ft, &a, &a, false)?;
            rows.push(row(json!({"arm": "slimipl_matched", "labeled": a, "unlabeled": a, "cer": Self::cer_of(&own.metrics, &a)})));
        }
        Ok(rows)
    }

    fn crop_ablation(&self) -> Result<Vec<BTreeMap<String, Value>>> {
        let t = self.cfg.target_language();
        let base = self.base()?;
        let ft = self.finetuned(&base, &t)?;
        let mut rows = Vec::new();
        let mut curves: Vec<(String, Vec<(u64, f64)>)> = Vec::new();
        for (arm, always) in [("warmup", false), ("always_crop", true)] {
            let stage = if always { format!("slimipl_{t}_always_crop") } else { format!("slimipl_{t}") };
            match self.run_slimipl_language(&stage, &ft, &t, &t, always) {
                Ok((_, rec, _)) => {
                    curves.push((arm.to_string(), read_curve(&self.ws.curve(&stage))?));
                    rows.push(row(json!({
                        "arm": arm,
                        "stage": stage,
                        "cer": Self::cer_of(&rec.metrics, &t),
                        "collapsed": false,
                        "cropped_generations": rec.metrics.get("cropped_generations"),
                        "full_generations": rec.metrics.get("full_generations"),
                    })));
                }
                Err(Error::CacheUnfillable { .. }) => {
                    rows.push(row(json!({"arm": arm, "stage": stage, "cer": null, "collapsed": true})));
                }
                Err(e) => return Err(e),
            }
        }
        let mut csv = String::from("step");
        for (arm, _) in &curves {
            csv.push(',');
            csv.push_str(arm);
        }
        csv.push('\n');
        if let Some((_, first)) = curves.first() {
            for (i, (step, _)) in first.iter().enumerate() {
                csv.push_str(&step.to_string());
                for (_, c) in &curves {
                    csv.push(',');
                    if let Some((_, v)) = c.get(i).filter(|(s, _)| s == step) {
                        csv.push_str(&v.to_string());
                    }
                }
                csv.push('\n');
            }
        }
        let p = self.ws.curve("crop_ablation");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        Ok(rows)
    }

    fn monolingual_baselines(&self) -> Result<Vec<BTreeMap<String, Value>>> {
        let base = self.base()?;
        let base_metrics = self.snapshot(&base.model)?;
        let mut rows = Vec::new();
        for l in &self.languages {
            let (_, mono) = self.train_monolingual(&format!("mono_{l}"), l)?;
            let ft = self.finetuned(&base, l)?;
            let ft_metrics = self.snapshot(&ft.model)?;
            rows.push(row(json!({
                "language": l,
                "monolingual": Self::cer_of(&mono.metrics, l),
                "multilingual": Self::cer_of(&base_metrics, l),
                "multilingual_finetuned": Self::cer_of(&ft_metrics, l),
            })));
        }
        Ok(rows)
    }
}

fn read_curve(path: &std::path::Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l.split_once(',').ok_or_else(|| Error::invalid(format!("bad curve line {l:?}")))?;
            Ok((
                s.parse().map_err(|_| Error::invalid(format!("bad step {s:?}")))?,
                v.parse().map_err(|_| Error::invalid(format!("bad value {v:?}")))?,
            ))
        })
        .collect()
}

/// Runs a named comparison and writes `reports/scenario_<name>.json` plus a
/// CSV of its rows.
pub fn run_scenario(p: &Pipeline, name: &str) -> Result<ScenarioReport> {
    let rows = match name {
        "gamma_sweep" => p.gamma_sweep()?,
        "wrong_language" => p.wrong_language()?,
        "crop_ablation" => p.crop_ablation()?,
        "monolingual_baselines" => p.monolingual_baselines()?,
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    let report = ScenarioReport {
        scenario: name.to_string(),
        rows,
    };
    let (json_path, _) = p.ws.report(&format!("scenario_{name}"));
    write_json(&json_path, &report)?;
    let keys: std::collections::BTreeSet<&String> = report.rows.iter().flat_map(|r| r.keys()).collect();
    let mut csv = keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for r in &report.rows {
        let cells: Vec<String> = keys
            .iter()
            .map(|k| match r.get(*k) {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => s.clone(),
                Some(v) => v.to_string(),
            })
            .collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let csv_path = json_path.with_extension("csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(report)
}
