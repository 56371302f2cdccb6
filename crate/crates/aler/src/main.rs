use std::path::PathBuf;
use std::process::ExitCode;

use aler::commands::{self, OracleKind, SynthOptions, TrainOptions};
use aler::{CliError, RunManifest};
use aler_core::synth::PerturbationSpec;
use aler_core::QueryStrategy;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aler", version, about = "Partitioned active learning for entity resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `key=value`, applied after the manifest file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ManifestArgs {
    fn load(&self, extra: &[String]) -> Result<RunManifest, CliError> {
        let mut o = self.overrides.clone();
        o.extend_from_slice(extra);
        RunManifest::load(&self.manifest, &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load records and embeddings, normalize and store them.
    Ingest(ManifestArgs),
    /// Build the HNSW index over S.
    Index(ManifestArgs),
    /// Sample R and split the sample into chunks.
    Partition(ManifestArgs),
    /// Run the active-learning loop and train both models.
    Train {
        #[command(flatten)]
        m: ManifestArgs,
        #[arg(long, default_value = "file")]
        oracle: OracleKind,
        #[arg(long)]
        strategy: Option<QueryStrategy>,
    },
    /// Resolve held-out records with the trained cascade.
    Resolve {
        #[command(flatten)]
        m: ManifestArgs,
        #[arg(long)]
        theta_r: Option<f64>,
        #[arg(long)]
        theta_p: Option<f64>,
    },
    /// Score the resolved matches against the ground truth.
    Eval(ManifestArgs),
    /// Generate a synthetic corpus with planted matches.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        records: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long)]
        text_embeddings: bool,
        /// Distractors added to S, as a fraction of `--records`.
        #[arg(long)]
        distractor_fraction: Option<f64>,
        /// Unmatched siblings added to R, as a fraction of `--records`.
        #[arg(long)]
        unmatched_fraction: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(m) => commands::cmd_ingest(&m.load(&[])?),
        Command::Index(m) => commands::cmd_index(&m.load(&[])?),
        Command::Partition(m) => commands::cmd_partition(&m.load(&[])?),
        Command::Train { m, oracle, strategy } => {
            let extra: Vec<String> = strategy.map(|s| format!("strategy={s}")).into_iter().collect();
            let t = commands::cmd_train(&m.load(&extra)?, &TrainOptions { oracle })?;
            println!(
                "theta_r = {} (F1 {:.4}), theta_p = {} (F1 {:.4}), labels = {}",
                t.recall_threshold.threshold,
                t.recall_threshold.f1,
                t.precision_threshold.threshold,
                t.precision_threshold.f1,
                t.ledger.total()
            );
            Ok(())
        }
        Command::Resolve { m, theta_r, theta_p } => {
            let mut extra = Vec::new();
            extra.extend(theta_r.map(|t| format!("theta_r={t}")));
            extra.extend(theta_p.map(|t| format!("theta_p={t}")));
            let r = commands::cmd_resolve(&m.load(&extra)?)?;
            println!("{} candidates, {} after stage 1, {} matches", r.candidates, r.stage1_survivors, r.matches.len());
            Ok(())
        }
        Command::Eval(m) => {
            let x = commands::cmd_eval(&m.load(&[])?)?;
            println!(
                "precision = {:.4}\nrecall = {:.4}\nf1 = {:.4}\nblocking_recall = {:.4}",
                x.precision, x.recall, x.f1, x.blocking_recall
            );
            Ok(())
        }
        Command::Synth { out, records, seed, dim, text_embeddings, distractor_fraction, unmatched_fraction } => {
            let mut spec = PerturbationSpec { seed, ..Default::default() };
            if let Some(f) = distractor_fraction {
                spec.distractor_fraction = f;
            }
            if let Some(f) = unmatched_fraction {
                spec.unmatched_fraction = f;
            }
            let path = commands::cmd_synth(&out, &SynthOptions { n_records: records, spec, dim, text_embeddings })?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
