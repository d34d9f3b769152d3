//! Command-line driver: corpus synthesis, training, evaluation, residual
//! probing and the multi-seed comparison.

use std::fs;
use std::path::{Path, PathBuf};

use ada_sv::corpus::{build_corpus, Corpus};
use ada_sv::eval::{evaluate, probe_model, Condition};
use ada_sv::experiment::{compare, eval_seed, run_dir, train_run, ExperimentConfig};
use ada_sv::train::{System, TrainState, FINAL_CHECKPOINT};
use ada_sv::Error;
use anyhow::Context;
use clap::{Parser, Subcommand};

pub const CORPUS_DIR: &str = "corpus";
pub const MANIFEST: &str = "manifest.txt";
pub const EVAL_REPORT: &str = "eval.json";
pub const PROBE_REPORT: &str = "probe.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ada-sv", version, about = "Adversarial data augmentation for speaker verification")]
pub struct Cli {
    /// Experiment config (JSON); built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Global seed for the corpus, runs and evaluation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, global = true, env = "ADA_SV_OUT")]
    pub out: Option<PathBuf>,

    /// Worker threads; 0 runs everything on the calling thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the corpus and write its manifest.
    Synth {
        /// Also write every utterance as WAV.
        #[arg(long)]
        wav: bool,
    },
    /// Train one system for every configured run seed.
    Train {
        #[arg(long)]
        system: System,
        /// Override the number of training steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Run seeds to train (default: all configured).
        #[arg(long, value_delimiter = ',')]
        runs: Vec<u64>,
    },
    /// Score trials for trained runs and write per-condition EERs.
    Eval {
        #[arg(long, value_delimiter = ',')]
        system: Vec<System>,
        #[arg(long, value_delimiter = ',')]
        runs: Vec<u64>,
    },
    /// Residual augmentation probe on trained runs.
    Probe {
        #[arg(long, value_delimiter = ',')]
        system: Vec<System>,
        #[arg(long, value_delimiter = ',')]
        runs: Vec<u64>,
    },
    /// Evaluate every (system, run) and write the comparison report.
    Compare {
        /// Train runs whose checkpoint is missing.
        #[arg(long)]
        train_missing: bool,
        /// Override the number of training steps for missing runs.
        #[arg(long)]
        steps: Option<u64>,
    },
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) | Error::Config(_) => EXIT_CONFIG,
                Error::NumericAbort { .. } => EXIT_NUMERIC,
                Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

/// Installs the global worker pool.
pub fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            ExperimentConfig::from_json(&text)
        }
    }
}

fn override_steps(cfg: &mut ExperimentConfig, steps: Option<u64>) {
    if let Some(n) = steps {
        cfg.train.steps = n;
        for patch in cfg.train_overrides.values_mut() {
            if patch.contains_key("steps") {
                patch.insert("steps".into(), n.into());
            }
        }
    }
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out, set ADA_SV_OUT or out_dir".into()))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}

/// Rebuilds the corpus and checks it against the manifest on disk.
pub fn load_corpus(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Corpus, Error> {
    let path = out.join(CORPUS_DIR).join(MANIFEST);
    let on_disk = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let corpus = build_corpus(&cfg.corpus, seed)?;
    if corpus.manifest(false) != on_disk && corpus.manifest(true) != on_disk {
        return Err(Error::Config(format!(
            "{} was synthesized from a different config or seed; rerun synth",
            path.display()
        )));
    }
    Ok(corpus)
}

fn selection(cfg: &ExperimentConfig, systems: &[System], runs: &[u64]) -> (Vec<System>, Vec<u64>) {
    let systems = if systems.is_empty() { cfg.systems.clone() } else { systems.to_vec() };
    let runs = if runs.is_empty() { cfg.seeds.clone() } else { runs.to_vec() };
    (systems, runs)
}

fn load_run(out: &Path, system: System, run: u64) -> Result<(PathBuf, TrainState), Error> {
    let dir = run_dir(out, system, run);
    let ckpt = dir.join(FINAL_CHECKPOINT);
    if !ckpt.exists() {
        return Err(Error::Io {
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("no checkpoint for {system} run {run}")),
            path: ckpt,
        });
    }
    let (state, _) = TrainState::load(&ckpt)?;
    Ok((dir, state))
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Command::Train { steps, .. } | Command::Compare { steps, .. } = &cli.command {
        override_steps(&mut cfg, *steps);
    }
    cfg.validate()?;
    if let Command::Train { system, .. } = &cli.command {
        cfg.system_config(*system, cli.seed, 0)?.validate()?;
    }
    let out = out_dir(cli, &cfg)?;
    let seed = cli.seed;

    match &cli.command {
        Command::Synth { wav } => {
            let corpus = build_corpus(&cfg.corpus, seed)?;
            let dir = out.join(CORPUS_DIR);
            write(&dir.join(MANIFEST), &corpus.manifest(*wav))?;
            if *wav {
                corpus.export_wavs(&dir)?;
            }
            println!("{} utterances -> {}", corpus.entries().len(), dir.join(MANIFEST).display());
        }
        Command::Train { system, runs, .. } => {
            let corpus = load_corpus(&cfg, seed, &out)?;
            let (_, runs) = selection(&cfg, &[], runs);
            for r in runs {
                let state = train_run(&cfg, &corpus, *system, r, seed, Some(&out))?;
                println!(
                    "{system} run {r}: {} steps, mean l_spk {:.4} -> {}",
                    state.step,
                    state.stats.mean_l_spk,
                    run_dir(&out, *system, r).join(FINAL_CHECKPOINT).display()
                );
            }
        }
        Command::Eval { system, runs } => {
            let corpus = load_corpus(&cfg, seed, &out)?;
            let (systems, runs) = selection(&cfg, system, runs);
            for sys in systems {
                for &r in &runs {
                    let (dir, state) = load_run(&out, sys, r)?;
                    let (report, scored) =
                        evaluate(&state.model, &state.params, &corpus, &cfg.conditions, &cfg.eval, eval_seed(seed))?;
                    for st in &scored {
                        let name = condition_file(st.set.condition);
                        write(&dir.join("trials").join(&name), &st.set.trials_text())?;
                        write(&dir.join("scores").join(&name), &st.scores_text())?;
                    }
                    write(&dir.join(EVAL_REPORT), &pretty(&report.to_json()))?;
                    for (c, row) in &report.rows {
                        println!("{sys} run {r} {c}: EER {:.3}%", 100.0 * row.eer);
                    }
                }
            }
        }
        Command::Probe { system, runs } => {
            let corpus = load_corpus(&cfg, seed, &out)?;
            let (systems, runs) = selection(&cfg, system, runs);
            for sys in systems {
                for &r in &runs {
                    let (dir, state) = load_run(&out, sys, r)?;
                    let acc = probe_model(&state.model, &state.params, &corpus, &cfg.eval, eval_seed(seed))?;
                    write(&dir.join(PROBE_REPORT), &pretty(&serde_json::json!({ "probe_accuracy": acc })))?;
                    println!("{sys} run {r}: probe accuracy {acc:.4}");
                }
            }
        }
        Command::Compare { train_missing, .. } => {
            let corpus = load_corpus(&cfg, seed, &out)?;
            let cmp = compare(&cfg, &corpus, seed, &out, *train_missing)?;
            write(&out.join(REPORT_JSON), &pretty(&cmp.to_json()))?;
            let md = cmp.markdown();
            write(&out.join(REPORT_MD), &md)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn condition_file(c: Condition) -> String {
    format!("{}.txt", c.as_str().to_ascii_lowercase())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}
