use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use jtss_cli::{
    cmd_ablate, cmd_dump_config, cmd_evaluate, cmd_extract_embeddings, cmd_extract_teacher, cmd_gen_data,
    cmd_score, cmd_train, EvalRequest, LoadedConfig, Sweep,
};

#[derive(Parser)]
#[command(name = "jtss", version, about = "Joint speech and speaker training for speaker verification")]
struct Cli {
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic-teacher feature files for a manifest.
    ExtractTeacher {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes the checkpoint and metric logs.
    Train {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed every utterance of a manifest into a JSON-lines file.
    ExtractEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list from an embeddings file.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Embeddings file used as the AS-norm cohort.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute EER and minDCF for a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "trials")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        trials: Option<PathBuf>,
        /// Manifest whose embeddings form the AS-norm cohort.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value of a tap-layer or lambda sweep.
    Ablate {
        /// e.g. `tap_layer=0,1,2,3,4` or `lambda=0.001,0.004,0.01,0.1,0.4`
        #[arg(long)]
        sweep: Sweep,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration (defaults when no --config is given).
    DumpConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = LoadedConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { seed, out } => {
            let c = cmd_gen_data(&cfg, seed, out.as_deref())?;
            println!("{} utterances written to {}", c.manifest.len(), c.root.display());
        }
        Command::ExtractTeacher { manifest, out } => {
            let n = cmd_extract_teacher(&cfg, manifest.as_deref(), out.as_deref())?;
            println!("{n} teacher files written");
        }
        Command::Train { seed, out } => {
            let a = cmd_train(&cfg, seed, out.as_deref())?;
            if let Some(last) = a.outcome.log.last() {
                println!(
                    "epoch {}: l_speaker {:.4} l_speech {:.4} l_total {:.4}",
                    last.epoch, last.l_speaker, last.l_speech, last.l_total
                );
            }
            println!("checkpoint: {}", a.checkpoint.display());
        }
        Command::ExtractEmbeddings { checkpoint, manifest, out } => {
            let n = cmd_extract_embeddings(&checkpoint, &manifest, &out)?;
            println!("{n} embeddings written to {}", out.display());
        }
        Command::Score { embeddings, trials, cohort, out } => {
            let ec = &cfg.config.eval;
            let r = cmd_score(&embeddings, &trials, cohort.as_deref(), ec.top_k, &ec.dcf, &out)?;
            println!("raw: EER {:.2}% minDCF {:.4}", 100.0 * r.raw.eer, r.raw.min_dcf);
            if let Some(n) = r.normalized {
                println!("as-norm: EER {:.2}% minDCF {:.4}", 100.0 * n.eer, n.min_dcf);
            }
        }
        Command::Evaluate { checkpoint, manifest, trials, cohort, out } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().map(|p| p.join("eval")).unwrap_or_else(|| "eval".into()));
            let req = EvalRequest {
                manifest: manifest.as_deref(),
                trials: trials.as_deref(),
                cohort: cohort.as_deref(),
            };
            cmd_evaluate(&cfg, &checkpoint, &req, &out)?;
        }
        Command::Ablate { sweep, out } => {
            let rows = cmd_ablate(&cfg, &sweep, out.as_deref())?;
            for r in rows {
                let sets: Vec<String> = r
                    .sets
                    .iter()
                    .map(|s| format!("{} EER {:.2}% minDCF {:.4}", s.name, 100.0 * s.selected().eer, s.selected().min_dcf))
                    .collect();
                println!("{}={}: {}", r.param.name(), r.value, sets.join(", "));
            }
        }
        Command::DumpConfig { out } => {
            let text = cmd_dump_config(&cfg)?;
            match out {
                Some(p) => std::fs::write(&p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
