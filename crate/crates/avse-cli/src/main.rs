//! `avse` — synthetic-corpus experiment driver.
//!
//! Subcommands cover the full pipeline: synth-data, frontalize,
//! train-prior, enhance, evaluate, fig4. On failure a machine-readable
//! error JSON is printed to stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avse_core::harness::{
    cmd_enhance, cmd_evaluate, cmd_fig4, cmd_frontalize, cmd_synth_data, cmd_train_prior,
    frontalize_track, ExperimentConfig,
};
use avse_core::morphable::read_model;
use avse_core::registration::{read_landmark_csv, write_landmark_csv};

#[derive(Parser)]
#[command(name = "avse", about = "audio-visual speech enhancement pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment configuration (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the base seed (split seeds become seed, seed+1, seed+2).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonOpts {
    fn load(&self) -> avse_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds.train = seed;
            cfg.seeds.val = seed + 1;
            cfg.seeds.test = seed + 2;
        }
        if let Some(out) = &self.out {
            cfg.workdir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (model, waveforms, landmark tracks).
    SynthData(CommonOpts),
    /// Estimate and remove head motion from every landmark track.
    Frontalize {
        #[command(flatten)]
        common: CommonOpts,
        /// Frontalize a single landmark CSV instead of the whole corpus.
        #[arg(long, requires = "model")]
        landmarks: Option<PathBuf>,
        /// Deformable model JSON (single-file mode).
        #[arg(long, requires = "landmarks")]
        model: Option<PathBuf>,
    },
    /// Train the audio-only and visually conditioned speech priors.
    TrainPrior(CommonOpts),
    /// Enhance every test mixture with every configured method.
    Enhance(CommonOpts),
    /// Score enhanced outputs and emit the report tables.
    Evaluate(CommonOpts),
    /// Upper-lip displacement analysis for one test utterance.
    Fig4 {
        #[command(flatten)]
        common: CommonOpts,
        /// Test-utterance index.
        #[arg(long, default_value_t = 0)]
        utterance: usize,
    },
}

fn run(cli: Cli) -> avse_core::Result<()> {
    match cli.command {
        Command::SynthData(opts) => {
            let cfg = opts.load()?;
            let manifest = cmd_synth_data(&cfg)?;
            println!("corpus written to {}", cfg.workdir.display());
            println!("manifest hash {}", manifest.manifest_hash);
        }
        Command::Frontalize { common, landmarks, model } => {
            let cfg = common.load()?;
            if let (Some(lm_path), Some(model_path)) = (landmarks, model) {
                let model = read_model(&model_path)?;
                let frames = read_landmark_csv(&lm_path)?;
                let track = frontalize_track(&model, &frames)?;
                std::fs::create_dir_all(&cfg.workdir)?;
                let out_csv = cfg.workdir.join("landmarks_frontal.csv");
                write_landmark_csv(&out_csv, &track.frontal)?;
                let poses: Vec<serde_json::Value> =
                    track.poses.iter().map(|p| p.to_json()).collect();
                std::fs::write(
                    cfg.workdir.join("pose_trace.json"),
                    serde_json::to_vec_pretty(&serde_json::Value::Array(poses))?,
                )?;
                println!("frontalized {} frames to {}", frames.len(), out_csv.display());
            } else {
                cmd_frontalize(&cfg)?;
                println!("frontalized corpus under {}", cfg.workdir.join("frontal").display());
            }
        }
        Command::TrainPrior(opts) => {
            let cfg = opts.load()?;
            cmd_train_prior(&cfg)?;
            println!("priors written to {}", cfg.workdir.join("priors").display());
        }
        Command::Enhance(opts) => {
            let cfg = opts.load()?;
            cmd_enhance(&cfg)?;
            println!("enhanced outputs under {}", cfg.workdir.join("enhanced").display());
        }
        Command::Evaluate(opts) => {
            let cfg = opts.load()?;
            let report = cmd_evaluate(&cfg)?;
            println!(
                "wrote {} metric rows ({} utterances per cell) to {}",
                report.rows.len(),
                report.utterances_per_cell,
                cfg.reports_dir().display()
            );
        }
        Command::Fig4 { common, utterance } => {
            let cfg = common.load()?;
            let summary = cmd_fig4(&cfg, utterance)?;
            println!(
                "raw RMS {:.6}, frontalized RMS {:.6}, ratio {:.2}",
                summary.raw_rms, summary.frontal_rms, summary.ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": format!("{err:?}").split('(').next().unwrap_or("Error"),
                "message": err.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
