//! Ablation ladder and single-hyperparameter sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::instrument;
use crate::train::{evaluate, train, Prepared};

/// The five rows of the ablation table, weakest first.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let v = |g: bool, l: bool, fusion: bool| RunConfig {
        use_global_attention: g,
        use_part_attention: l,
        use_cross_modal_fusion: fusion,
        use_depth_stream: true,
        ..base.clone()
    };
    vec![
        ("baseline", v(false, false, false)),
        ("+L", v(false, true, false)),
        ("+G", v(true, false, false)),
        ("+G+L", v(true, true, false)),
        ("+G+L+fusion", v(true, true, true)),
    ]
}

/// Result of training and evaluating one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub map: f64,
    pub seconds: f64,
    /// Attention-module invocations during training and evaluation.
    pub attention_calls: u64,
}

/// Trains on `train_set`, evaluates on `test_set`. Checkpoints and logs go
/// to `out` when given.
pub fn run(cfg: &RunConfig, train_set: &[Prepared], test_set: &[Prepared], out: Option<&Path>) -> Result<RunResult> {
    let start = Instant::now();
    instrument::reset();
    let trained = train(cfg, train_set, out)?;
    let result = evaluate(&trained.model, &trained.store, test_set, cfg, None)?;
    Ok(RunResult {
        map: result.map,
        seconds: start.elapsed().as_secs_f64(),
        attention_calls: instrument::counts().total(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// Variant name and one result per seed.
    pub rows: Vec<(String, Vec<RunResult>)>,
}

impl AblationTable {
    pub fn mean(&self, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(n, _)| n == variant)
            .map(|(_, r)| r.iter().map(|x| x.map).sum::<f64>() / r.len() as f64)
    }

    /// mAP in percent: one row per variant, one column per seed, then the
    /// mean.
    pub fn format(&self) -> String {
        let mut out = format!("{:<14}", "variant");
        for s in &self.seeds {
            write!(out, " {:>8}", format!("seed{}", s)).unwrap();
        }
        out.push_str(&format!(" {:>8}\n", "mean"));
        for (name, results) in &self.rows {
            write!(out, "{:<14}", name).unwrap();
            for r in results {
                write!(out, " {:>8.2}", 100.0 * r.map).unwrap();
            }
            writeln!(out, " {:>8.2}", 100.0 * self.mean(name).unwrap()).unwrap();
        }
        out
    }
}

/// Trains and evaluates every variant for every seed.
pub fn ablate(
    base: &RunConfig,
    seeds: &[u64],
    train_set: &[Prepared],
    test_set: &[Prepared],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        let mut results = Vec::new();
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let dir = out.map(|d| d.join(format!("{}-seed{}", name.trim_start_matches('+').replace('+', "-"), seed)));
            let r = run(&cfg, train_set, test_set, dir.as_deref())?;
            log::info!("{} seed {}: mAP {:.2} in {:.1}s", name, seed, 100.0 * r.map, r.seconds);
            results.push(r);
        }
        rows.push((name.to_string(), results));
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Values swept for one hyperparameter.
pub fn sweep_values(param: &str) -> Result<Vec<usize>> {
    match param {
        "T_steps" | "steps" => Ok(vec![2, 3, 4, 5]),
        "N_stn" | "transformers" => Ok(vec![1, 2, 3]),
        _ => Err(Error::Config(format!("no sweep defined for {:?} (T_steps, N_stn)", param))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub param: String,
    pub rows: Vec<(usize, RunResult)>,
}

impl SweepTable {
    pub fn format(&self) -> String {
        let mut out = format!("{:<10} {:>8}\n", self.param, "mAP");
        for (v, r) in &self.rows {
            writeln!(out, "{:<10} {:>8.2}", v, 100.0 * r.map).unwrap();
        }
        out
    }
}

pub fn sweep(
    base: &RunConfig,
    param: &str,
    values: &[usize],
    train_set: &[Prepared],
    test_set: &[Prepared],
) -> Result<SweepTable> {
    let mut rows = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        cfg.set(param, &v.to_string())?;
        rows.push((v, run(&cfg, train_set, test_set, None)?));
    }
    Ok(SweepTable {
        param: param.to_string(),
        rows,
    })
}
