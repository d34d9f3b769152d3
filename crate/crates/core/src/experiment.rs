//! Multi-seed comparison of the baseline, DA and A-DA systems.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, probe_model, Condition, EvalConfig, EvalReport};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::seed;
use crate::train::{train, System, TrainConfig, TrainState, FINAL_CHECKPOINT};

/// Per-run evaluation and probe summary written by [`compare`].
pub const RUN_REPORT: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Shared training settings; each system specialises them.
    pub train: TrainConfig,
    /// Per-system replacements of top-level `train` fields.
    pub train_overrides: BTreeMap<System, serde_json::Map<String, serde_json::Value>>,
    pub eval: EvalConfig,
    pub conditions: Vec<Condition>,
    pub systems: Vec<System>,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            train_overrides: BTreeMap::new(),
            eval: EvalConfig::default(),
            conditions: Condition::EVERY.to_vec(),
            systems: System::ALL.to_vec(),
            seeds: (0..5).collect(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if self.systems.is_empty() {
            return Err(Error::config("system list is empty"));
        }
        if self.conditions.is_empty() {
            return Err(Error::config("condition list is empty"));
        }
        for &s in &self.systems {
            let cfg = self.system_config(s, 0, 0)?;
            cfg.validate()?;
            if cfg.batch_speakers > self.corpus.n_speakers {
                return Err(Error::config(format!(
                    "batch of {} speakers exceeds the {} training speakers",
                    cfg.batch_speakers, self.corpus.n_speakers
                )));
            }
        }
        self.eval.trials.snr_range_db.validate()?;
        self.eval.fbank.validate(self.corpus.sample_rate_hz)?;
        Ok(())
    }

    /// Training config of `system` for run `run_seed` under `global_seed`.
    pub fn system_config(&self, system: System, global_seed: u64, run_seed: u64) -> Result<TrainConfig> {
        let mut base = serde_json::to_value(&self.train).expect("config serializes");
        if let Some(patch) = self.train_overrides.get(&system) {
            let obj = base.as_object_mut().expect("object");
            for (k, v) in patch {
                if !obj.contains_key(k) {
                    return Err(Error::config(format!("unknown train field {k:?} in {system} overrides")));
                }
                obj.insert(k.clone(), v.clone());
            }
        }
        let patched: TrainConfig =
            serde_json::from_value(base).map_err(|e| Error::config(format!("{system} overrides: {e}")))?;
        let mut cfg = if self.train_overrides.contains_key(&system) {
            TrainConfig {
                system,
                ..patched
            }
        } else {
            TrainConfig::for_system(&patched, system)
        };
        cfg.seed = seed::derive(&[global_seed, run_seed]);
        Ok(cfg)
    }
}

pub fn run_dir(out: &Path, system: System, run_seed: u64) -> PathBuf {
    out.join(system.as_str()).join(format!("seed_{run_seed}"))
}

/// Seed of trial construction and probe audio; shared by every run.
pub fn eval_seed(global_seed: u64) -> u64 {
    seed::derive(&[global_seed, seed::tag("eval")])
}

/// Evaluation and probe outcome of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub system: System,
    pub seed: u64,
    pub report: EvalReport,
    pub probe_accuracy: f64,
}

impl RunResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "system": self.system,
            "seed": self.seed,
            "eer": self.report.to_json(),
            "probe_accuracy": self.probe_accuracy,
        })
    }
}

/// Evaluates every condition and the residual probe.
pub fn assess(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    model: &Model,
    params: &ParamStore,
    system: System,
    run_seed: u64,
    global_seed: u64,
) -> Result<RunResult> {
    let eval_seed = eval_seed(global_seed);
    let (report, _) = evaluate(model, params, corpus, &cfg.conditions, &cfg.eval, eval_seed)?;
    let probe_accuracy = probe_model(model, params, corpus, &cfg.eval, eval_seed)?;
    Ok(RunResult {
        system,
        seed: run_seed,
        report,
        probe_accuracy,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparison {
    pub conditions: Vec<Condition>,
    pub runs: Vec<RunResult>,
}

/// A-DA versus DA on one condition, counted per seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub ada_wins: usize,
    pub da_wins: usize,
    pub ties: usize,
}

impl Comparison {
    pub fn eers(&self, system: System, c: Condition) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.system == system)
            .filter_map(|r| r.report.get(c).map(|x| x.eer))
            .collect()
    }

    pub fn mean_eer(&self, system: System, c: Condition) -> Option<f64> {
        mean(&self.eers(system, c))
    }

    pub fn probe(&self, system: System) -> Vec<f64> {
        self.runs.iter().filter(|r| r.system == system).map(|r| r.probe_accuracy).collect()
    }

    pub fn mean_probe(&self, system: System) -> Option<f64> {
        mean(&self.probe(system))
    }

    pub fn systems(&self) -> Vec<System> {
        let mut s: Vec<System> = self.runs.iter().map(|r| r.system).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// EER of `system` for `seed` on `c`.
    pub fn eer(&self, system: System, seed: u64, c: Condition) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.system == system && r.seed == seed)
            .and_then(|r| r.report.get(c))
            .map(|x| x.eer)
    }

    /// Seeds on which `a` has strictly lower EER than `b`.
    pub fn wins(&self, a: System, b: System, c: Condition) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| matches!((self.eer(a, s, c), self.eer(b, s, c)), (Some(x), Some(y)) if x < y))
            .count()
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn tally(&self, c: Condition) -> Tally {
        let mut t = Tally::default();
        for s in self.seeds() {
            if let (Some(a), Some(d)) = (self.eer(System::Ada, s, c), self.eer(System::Da, s, c)) {
                if a < d {
                    t.ada_wins += 1;
                } else if d < a {
                    t.da_wins += 1;
                } else {
                    t.ties += 1;
                }
            }
        }
        t
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut mean_eer = serde_json::Map::new();
        let mut probe = serde_json::Map::new();
        for s in self.systems() {
            let mut row = serde_json::Map::new();
            for &c in &self.conditions {
                row.insert(
                    c.as_str().into(),
                    serde_json::json!({
                        "mean": self.mean_eer(s, c),
                        "values": self.eers(s, c),
                    }),
                );
            }
            mean_eer.insert(s.as_str().into(), row.into());
            probe.insert(
                s.as_str().into(),
                serde_json::json!({ "mean": self.mean_probe(s), "values": self.probe(s) }),
            );
        }
        let tally: serde_json::Map<String, serde_json::Value> = self
            .conditions
            .iter()
            .map(|&c| (c.as_str().to_string(), serde_json::to_value(self.tally(c)).expect("serializes")))
            .collect();
        serde_json::json!({
            "conditions": self.conditions.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
            "seeds": self.seeds(),
            "mean_eer": mean_eer,
            "probe_accuracy": probe,
            "ada_vs_da": tally,
            "runs": self.runs.iter().map(RunResult::to_json).collect::<Vec<_>>(),
        })
    }

    /// Mean EER (%) table, probe accuracies and the A-DA vs DA tally.
    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let n = self.seeds().len();
        let _ = writeln!(s, "Mean EER (%) over {n} seeds\n");
        let _ = write!(s, "| System |");
        for c in &self.conditions {
            let _ = write!(s, " {c} |");
        }
        let _ = write!(s, " Probe acc |\n|---|");
        for _ in &self.conditions {
            let _ = write!(s, "---|");
        }
        s.push_str("---|\n");
        for sys in self.systems() {
            let name = match sys {
                System::Baseline => "Baseline",
                System::Da => "DA",
                System::Ada => "A-DA",
            };
            let _ = write!(s, "| {name} |");
            for &c in &self.conditions {
                match self.mean_eer(sys, c) {
                    Some(v) => {
                        let _ = write!(s, " {:.3} |", 100.0 * v);
                    }
                    None => s.push_str(" - |"),
                }
            }
            match self.mean_probe(sys) {
                Some(p) => {
                    let _ = writeln!(s, " {p:.3} |");
                }
                None => s.push_str(" - |\n"),
            }
        }
        if self.systems().contains(&System::Ada) && self.systems().contains(&System::Da) {
            let _ = writeln!(s, "\nA-DA vs DA per-seed tally (wins / losses / ties)\n");
            for &c in &self.conditions {
                let t = self.tally(c);
                let _ = writeln!(s, "- {c}: {} / {} / {}", t.ada_wins, t.da_wins, t.ties);
            }
        }
        s
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains one (system, seed) run, writing its artifacts under `out`.
pub fn train_run(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    system: System,
    run_seed: u64,
    global_seed: u64,
    out: Option<&Path>,
) -> Result<TrainState> {
    let tcfg = cfg.system_config(system, global_seed, run_seed)?;
    let dir = out.map(|o| run_dir(o, system, run_seed));
    train(&tcfg, corpus, dir.as_deref())
}

/// Evaluates every configured (system, seed); missing checkpoints are
/// trained when `train_missing` is set and reported as an error otherwise.
pub fn compare(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    global_seed: u64,
    out: &Path,
    train_missing: bool,
) -> Result<Comparison> {
    let mut missing = Vec::new();
    for &sys in &cfg.systems {
        for &s in &cfg.seeds {
            let p = run_dir(out, sys, s).join(FINAL_CHECKPOINT);
            if !p.exists() {
                missing.push(p);
            }
        }
    }
    if !missing.is_empty() && !train_missing {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::io(
            &missing[0],
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing checkpoints: {}", list.join(", ")),
            ),
        ));
    }
    let mut cmp = Comparison {
        conditions: cfg.conditions.clone(),
        runs: Vec::new(),
    };
    for &sys in &cfg.systems {
        for &s in &cfg.seeds {
            let dir = run_dir(out, sys, s);
            let ckpt = dir.join(FINAL_CHECKPOINT);
            let state = if ckpt.exists() {
                TrainState::load(&ckpt)?.0
            } else {
                train_run(cfg, corpus, sys, s, global_seed, Some(out))?
            };
            let r = assess(cfg, corpus, &state.model, &state.params, sys, s, global_seed)?;
            let text = serde_json::to_string_pretty(&r.to_json()).expect("serializes");
            let path = dir.join(RUN_REPORT);
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            cmp.runs.push(r);
        }
    }
    Ok(cmp)
}

/// Compares in memory without touching the filesystem.
pub fn compare_in_memory(cfg: &ExperimentConfig, corpus: &Corpus, global_seed: u64) -> Result<Comparison> {
    let mut cmp = Comparison {
        conditions: cfg.conditions.clone(),
        runs: Vec::new(),
    };
    for &sys in &cfg.systems {
        for &s in &cfg.seeds {
            let state = train_run(cfg, corpus, sys, s, global_seed, None)?;
            cmp.runs.push(assess(cfg, corpus, &state.model, &state.params, sys, s, global_seed)?);
        }
    }
    Ok(cmp)
}
