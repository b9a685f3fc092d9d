//! `eclm`: offline cloud training, online rounds, sub-model derivation and
//! artifact inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use eclm_core::derivation::{derive_submodel, importance_profile, Derivation, ImportanceVector, ResourceBudget, Utilization};
use eclm_core::env::{ingest_csv, CsvSchema};
use eclm_core::orchestrator::artifacts as art;
use eclm_core::orchestrator::{
    inspect, load_checkpoint, prepare_data, run_offline, run_online, DatasetConfig, ScenarioConfig, Strategy,
};
use eclm_core::{Error, ModelPair};

#[derive(Parser, Debug)]
#[command(name = "eclm", version, about = "Edge-cloud collaborative learning simulator")]
struct Cli {
    /// Overrides the seed of the scenario config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Modularize, pretrain and fine-tune the cloud model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after pretraining (no assignment or guided fine-tuning).
        #[arg(long)]
        no_enhance: bool,
    },
    /// Run online rounds of one strategy from a pretrained checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "eclm")]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the number of rounds.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Derive a sub-model spec for one device profile.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON with `importance` (per-layer vectors) or `dataset` (CSV path).
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        comm_bytes: u64,
        #[arg(long)]
        mem_bytes: u64,
        #[arg(long)]
        macs: u64,
    },
    /// Print a report for a checkpoint, matrix, log or output directory.
    Inspect { path: PathBuf },
}

/// Device profile accepted by `derive`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Profile {
    /// Per-layer importance; computed from `dataset` when absent.
    importance: Option<Vec<Vec<f64>>>,
    /// Local data as CSV, relative to the profile file.
    dataset: Option<PathBuf>,
    #[serde(default)]
    schema: CsvSchema,
}

#[derive(Debug, Serialize)]
struct DeriveReport {
    #[serde(flatten)]
    derivation: Derivation,
    budget: ResourceBudget,
    utilization: Utilization,
    importance: ImportanceVector,
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // Written configs must stay valid wherever they are read from.
    if let DatasetConfig::Csv(c) = &mut cfg.dataset {
        c.path = std::fs::canonicalize(&c.path).map_err(Error::Io)?;
    }
    Ok(cfg)
}

fn pretrain(cfg: &ScenarioConfig, out: &Path, quiet: bool) -> anyhow::Result<()> {
    let data = prepare_data(cfg)?;
    let bundle = run_offline(cfg, &data)?;
    bundle.write(out, cfg)?;
    if !quiet {
        let s = &bundle.summary;
        println!(
            "pretrained on {} proxy samples: test accuracy {:.4}, design space 2^{}, max routed load {:?}",
            s.proxy_samples,
            s.test_accuracy,
            s.design_space_log2,
            s.loads.max_routed()
        );
        if s.enhanced {
            println!("assignment objective {:?} (exact {:?}), alignment {:?}", s.objective, s.exact, s.alignment);
        }
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run(cfg: &ScenarioConfig, checkpoint: &Path, strategy: Strategy, out: &Path, quiet: bool) -> anyhow::Result<()> {
    let (pair, version) = load_checkpoint(checkpoint, cfg)?;
    let data = prepare_data(cfg)?;
    let result = run_online(cfg, &data, pair, version, strategy)?;
    result.write(out)?;
    std::fs::write(out.join(art::CONFIG), cfg.to_json()).map_err(Error::Io)?;
    if !quiet {
        if let Some(m) = result.metrics.last() {
            println!(
                "{} after {} rounds: global accuracy {:.4}, bytes down {} up {}",
                strategy.name(),
                m.round,
                m.global_accuracy,
                m.cumulative_bytes_down,
                m.cumulative_bytes_up
            );
        }
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn profile_importance(profile: &Profile, base: &Path, pair: &ModelPair, checkpoint: &Path) -> anyhow::Result<ImportanceVector> {
    if let Some(layers) = &profile.importance {
        let widths = pair.layer_widths();
        let ok = layers.len() == widths.len()
            && layers.iter().zip(&widths).all(|(l, &w)| l.len() == w)
            && layers.iter().flatten().all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::Config(format!("profile importance must be non-negative vectors of widths {widths:?}")).into());
        }
        return Ok(ImportanceVector { layers: layers.clone() });
    }
    let Some(path) = &profile.dataset else {
        return Err(Error::Config("profile needs `importance` or `dataset`".into()).into());
    };
    let path = base.join(path);
    let mut data = ingest_csv(&path, &profile.schema).with_context(|| format!("reading {}", path.display()))?.dataset;
    // Apply the training standardization when the checkpoint came from a CSV scenario.
    let dir = if checkpoint.is_dir() { checkpoint } else { checkpoint.parent().unwrap_or(Path::new(".")) };
    let cfg_path = dir.join(art::CONFIG);
    if cfg_path.is_file() {
        let cfg = ScenarioConfig::load(&cfg_path)?;
        if let Some(st) = prepare_data(&cfg)?.standardizer {
            st.apply(&mut data.x)?;
        }
    }
    Ok(importance_profile(&pair.selector, &data.x)?)
}

fn derive(checkpoint: &Path, profile_path: &Path, budget: ResourceBudget) -> anyhow::Result<()> {
    let file = if checkpoint.is_dir() { checkpoint.join(art::CHECKPOINT) } else { checkpoint.to_path_buf() };
    let (pair, _) = ModelPair::load(&file)?;
    let text = std::fs::read_to_string(profile_path).map_err(Error::Io)?;
    let profile: Profile = serde_json::from_str(&text).map_err(Error::Json)?;
    let base = profile_path.parent().unwrap_or(Path::new("."));
    let importance = profile_importance(&profile, base, &pair, checkpoint)?;
    let d = derive_submodel(&importance, &pair.module_costs(), pair.shared_cost(), &budget)?;
    let report = DeriveReport {
        utilization: Utilization::of(&d.cost, &budget),
        derivation: d,
        budget,
        importance,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { config, out, no_enhance } => {
            let mut cfg = load_config(&config, cli.seed)?;
            if no_enhance {
                cfg.enhance.enabled = false;
            }
            pretrain(&cfg, &out, cli.quiet)
        }
        Command::Run {
            config,
            checkpoint,
            strategy,
            out,
            rounds,
        } => {
            let mut cfg = load_config(&config, cli.seed)?;
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            run(&cfg, &checkpoint, strategy, &out, cli.quiet)
        }
        Command::Derive {
            checkpoint,
            profile,
            comm_bytes,
            mem_bytes,
            macs,
        } => derive(
            &checkpoint,
            &profile,
            ResourceBudget {
                comm_bytes,
                compute_macs: macs,
                mem_bytes,
            },
        ),
        Command::Inspect { path } => {
            print!("{}", inspect(&path)?);
            Ok(())
        }
    }
}

/// Error class of the first library error in the chain.
fn class_of(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or("cli", Error::class)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", class_of(&e));
            ExitCode::FAILURE
        }
    }
}
