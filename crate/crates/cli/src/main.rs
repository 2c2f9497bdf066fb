use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csitad_core::app::{self, RunConfig, SplitSel, CONFIG_FILE};
use csitad_core::Error;

/// Temporal activity detection for WiFi CSI amplitude streams.
#[derive(Debug, Parser)]
#[command(name = "csitad", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Swap one model component (repeatable): no-transformer, no-conv-pool,
    /// lsre-only, tsse-only, lsre-min, lsre-mean, lsre-max, pyramid-add,
    /// self-attention.
    #[arg(long = "ablation", value_name = "NAME", global = true)]
    ablations: Vec<String>,
    /// Worker threads for clip- and sample-level parallelism.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Overrides `synth.num_samples`.
        #[arg(long)]
        num_samples: Option<usize>,
        /// Overrides the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the train split of a dataset.
    Train {
        /// Dataset directory as written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the checkpoint, step log and effective config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Write detections for a dataset split.
    Detect {
        #[arg(long)]
        data: PathBuf,
        /// `model.ckpt` from `train`; a `config.toml` beside it is used when
        /// `--config` is absent.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prediction file to write.
        #[arg(long)]
        out: PathBuf,
        /// train, test or all.
        #[arg(long, default_value = "test")]
        split: SplitSel,
    },
    /// Compute per-class AP and mAP of a prediction file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitSel,
        /// Also write key=value records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// False-positive profile of the top-ranked predictions as CSV.
    FpProfile {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitSel,
        /// Write the CSV here and print a table instead.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split every sample into low- and high-frequency band datasets.
    FreqSplit {
        #[arg(long)]
        data: PathBuf,
        /// Receives `low/`, `high/` and the cutoff report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn load_config(common: &Common, fallback: Option<&Path>) -> csitad_core::Result<RunConfig> {
    let path = common.config.as_deref().or(fallback.filter(|p| p.exists()));
    let mut cfg = RunConfig::load(path, &common.overrides)?;
    cfg.apply_ablations(&common.ablations)?;
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, body: &str) -> csitad_core::Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> csitad_core::Result<()> {
    let common = &cli.common;
    match cli.cmd {
        Command::Synth {
            out,
            force,
            num_samples,
            seed,
        } => {
            let mut cfg = load_config(common, None)?;
            if let Some(n) = num_samples {
                cfg.synth.num_samples = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = app::cmd_synth(&cfg, &out, force)?;
            println!(
                "wrote {} samples ({} classes) to {}",
                ds.samples.len(),
                ds.classes.len(),
                out.display()
            );
        }
        Command::Train { data, out, resume } => {
            // A resumed run keeps the configuration it was started with.
            let saved = out.join(CONFIG_FILE);
            let cfg = load_config(common, resume.then_some(saved.as_path()))?;
            let res = app::cmd_train(&cfg, &data, &out, resume, common.jobs)?;
            match res.last {
                Some(r) => println!("step {} loss {:.6}", res.steps, r.loss),
                None => println!("step {} (nothing to do)", res.steps),
            }
        }
        Command::Detect {
            data,
            checkpoint,
            out,
            split,
        } => {
            let saved = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
            let cfg = load_config(common, saved.as_deref())?;
            let preds = app::cmd_detect(&cfg, &data, &checkpoint, split, &out, common.jobs)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval {
            data,
            predictions,
            split,
            out,
        } => {
            let (report, classes) = app::cmd_eval(&predictions, &data, split)?;
            print!("{}", report.to_text(&classes));
            if let Some(p) = out {
                write_or_print(Some(&p), &report.to_key_values(&classes))?;
            }
        }
        Command::FpProfile {
            data,
            predictions,
            split,
            out,
        } => {
            let profile = app::cmd_fp_profile(&predictions, &data, split)?;
            write_or_print(out.as_deref(), &profile.to_csv())?;
            if out.is_some() {
                print!("{}", profile.to_text());
            }
        }
        Command::FreqSplit { data, out, force } => {
            for (id, cutoff) in app::cmd_freq_split(&data, &out, force)? {
                println!("{id}\t{cutoff}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
