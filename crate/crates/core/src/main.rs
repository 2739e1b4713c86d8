use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmrec::cli::{self, RunConfig};
use mmrec::model::AblationVariant;
use mmrec::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mmrec", version, about = "Multimodal short-video recommender")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    variant: Option<AblationVariant>,

    /// Recommendation list length.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Coarse candidate count.
    #[arg(long, global = true)]
    m: Option<usize>,

    #[arg(long, global = true)]
    user: Option<u64>,

    /// Directory for every input and output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Synthetic world profile: default or kubd-like (no audio).
    #[arg(long, global = true)]
    world_profile: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic catalog, behavior log and profiles.
    GenData,
    /// Train one variant and write the model file.
    Train,
    /// Evaluate a trained model on the held-out users.
    Evaluate,
    /// Print recommendations for one user.
    Recommend,
    /// Train and evaluate every variant.
    Ablate,
    /// Write attention-based explanations for one user.
    Explain,
}

fn build_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &args.world_profile {
        cfg.world = cfg.world.with_profile(name)?;
    }
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
        cfg.ablation_seeds = vec![seed];
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(dir) = &args.out {
        cfg.paths.rebase(dir);
    }
    cfg.paths.apply_env(|k| std::env::var(k).ok());
    cfg.validate()?;
    Ok(cfg)
}

fn need_user(args: &Args) -> Result<u64> {
    args.user
        .ok_or_else(|| Error::Config("this command needs --user".into()))
}

fn run(args: &Args) -> Result<()> {
    let cfg = build_config(args)?;
    let k = args.k.unwrap_or(10);
    match args.command {
        Command::GenData => {
            let s = cli::cmd_gen_data(&cfg)?;
            println!(
                "users={} videos={} impressions={} clicks={} click_rate={:.4} avg_sequence_length={:.2} \
                 audio_missing={} cold_users={} drifted_users={} bayes_test_auc={}",
                s.n_users,
                s.n_videos,
                s.impressions,
                s.clicks,
                s.click_rate,
                s.avg_sequence_length,
                s.audio_missing,
                s.cold_users,
                s.drifted_users,
                s.bayes_test_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Command::Train => {
            let h = cli::cmd_train(&cfg)?;
            for e in &h.epochs {
                println!(
                    "epoch {}: train loss {:.5}, validation AUC {:.5}",
                    e.epoch, e.train_loss, e.validation_auc
                );
            }
            println!(
                "best epoch {:?}, stopped by {:?}",
                h.best_epoch, h.stop_reason
            );
        }
        Command::Evaluate => print!("{}", cli::cmd_evaluate(&cfg)?.table()),
        Command::Recommend => {
            let recs = cli::cmd_recommend(&cfg, need_user(args)?, k)?;
            print!("{}", cli::format_recommendations(&recs));
        }
        Command::Ablate => print!("{}", cli::cmd_ablate(&cfg)?.table()),
        Command::Explain => {
            let e = cli::cmd_explain(&cfg, need_user(args)?, k)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&e).map_err(|e| Error::Config(e.to_string()))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
