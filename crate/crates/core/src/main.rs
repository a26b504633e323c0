use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmac::config::RunConfig;
use cmac::error::{Error, Result};
use cmac::eval::{format_report, write_detections};
use cmac::experiments::{ablate, sweep, sweep_values};
use cmac::gradcheck::{check_model, CheckOptions};
use cmac::synth::SceneSpec;
use cmac::train::{init_model, load_split, synthesize, train, evaluate};

#[derive(Parser)]
#[command(name = "cmac", about = "RGB-D proposal classifier with cross-modal attentional context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `synth`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/test splits.
    Synth(Common),
    /// Train with SGD and write a log and per-epoch checkpoints.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write an attention graymap and part windows per test proposal.
        #[arg(long)]
        export_attention: bool,
    },
    /// Train and evaluate the five ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Train and evaluate across the values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `T_steps` or `N_stn`.
        #[arg(long)]
        param: String,
    },
    /// Compare backward against central differences per parameter group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        trials: u64,
        #[arg(long, default_value_t = 24)]
        per_group: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

/// `Ok(true)` on success, `Ok(false)` on a failed check.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(common) => {
            let mut cfg = load_config(&common)?;
            if let Some(dir) = &common.out {
                cfg.data_dir = dir.clone();
            }
            let (train, test) = synthesize(&cfg, &SceneSpec::default())?;
            println!("wrote {} train / {} test scenes to {}", train, test, cfg.data_dir.display());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let train_set = load_split(&cfg, "train")?;
            let outcome = train(&cfg, &train_set, Some(&out))?;
            write(out.join("config.txt"), &cfg.to_text())?;
            let last = outcome.log.last().map(|l| l.loss).unwrap_or(f64::NAN);
            println!(
                "{} iterations, final loss {:.4}, checkpoint {}",
                outcome.log.len(),
                last,
                outcome.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            export_attention,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let (model, mut store) = init_model(&cfg)?;
            store.load(&checkpoint)?;
            let test_set = load_split(&cfg, "test")?;
            let export = export_attention.then(|| out.join("attention"));
            let result = evaluate(&model, &store, &test_set, &cfg, export.as_deref())?;
            let ids: Vec<String> = test_set.iter().map(|p| p.sample.id.clone()).collect();
            write_detections(&out.join("detections.txt"), &result.detections, &ids)?;
            let report = format_report(&result.per_class, result.map);
            write(out.join("metrics.txt"), &report)?;
            print!("{}", report);
            if export.is_some() {
                println!("exported {} attention maps", result.exported);
            }
        }
        Command::Ablate { common, seeds } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let train_set = load_split(&cfg, "train")?;
            let test_set = load_split(&cfg, "test")?;
            let seeds: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let table = ablate(&cfg, &seeds, &train_set, &test_set, Some(&out))?;
            let text = table.format();
            write(out.join("ablation.txt"), &text)?;
            print!("{}", text);
        }
        Command::Sweep { common, param } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let train_set = load_split(&cfg, "train")?;
            let test_set = load_split(&cfg, "test")?;
            let table = sweep(&cfg, &param, &sweep_values(&param)?, &train_set, &test_set)?;
            let text = table.format();
            write(out.join(format!("sweep-{}.txt", param)), &text)?;
            print!("{}", text);
        }
        Command::Gradcheck {
            common,
            trials,
            per_group,
        } => {
            let cfg = load_config(&common)?;
            let opts = CheckOptions {
                per_group,
                ..CheckOptions::default()
            };
            let mut ok = true;
            println!(
                "{:<6} {:<22} {:>8} {:>8} {:>12} {:>12}  result",
                "seed", "group", "checked", "skipped", "max_grad", "max_rel_err"
            );
            for k in 0..trials {
                let seed = cfg.seed + k;
                for r in check_model(&cfg, seed, &opts)? {
                    ok &= r.passed;
                    println!(
                        "{:<6} {:<22} {:>8} {:>8} {:>12.3e} {:>12.3e}  {}",
                        seed,
                        r.group,
                        r.checked,
                        r.skipped,
                        r.scale,
                        r.max_rel_error,
                        if r.passed { "pass" } else { "FAIL" }
                    );
                }
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
