//! Seeds × variants ablation runs on a fixed synthetic corpus.

use std::fmt;

use modit_core::denoiser::Conditioning;
use modit_core::metrics::{jitter, mse};
use modit_core::numeric::Matrix;
use modit_core::sampler::{request_seed, sample, Denoiser, SamplerConfig};
use modit_core::synth::{Dataset, SynthPair};
use modit_core::training::Trainer;
use rayon::prelude::*;

use crate::commands::init_params;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// The single key each variant changes relative to the base config.
pub fn variant_switch(variant: &str) -> Option<(&'static str, &'static str)> {
    match variant {
        "full" => None,
        "no_beta0" => Some(("model.use_beta0", "false")),
        "no_bias_injection" => Some(("phase.enabled", "false")),
        "no_temporal_revision" => Some(("model.temporal_revision", "false")),
        "no_velocity_loss" => Some(("train.lambda_v", "0")),
        other => panic!("unknown variant {other}"),
    }
}

pub fn variant_config(base: &RunConfig, variant: &str) -> CliResult<RunConfig> {
    let mut cfg = base.clone();
    if let Some((key, value)) = variant_switch(variant) {
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

/// Seeds initialization, batch/noise draws and sampling; the data stay fixed.
pub fn seeded(cfg: &RunConfig, seed: u64) -> CliResult<RunConfig> {
    let mut cfg = cfg.clone();
    for key in ["model.init_seed", "train.seed", "sampler.seed"] {
        cfg.set(key, &seed.to_string())?;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    /// Per-entry MSE of the samples against ground truth, mean over pairs.
    pub mse: f64,
    /// Jitter of the samples, mean over pairs.
    pub jitter: f64,
}

/// Trains from scratch on `data` and samples every pair under its own
/// training conditions.
pub fn train_and_score(cfg: &RunConfig, data: &Dataset) -> CliResult<RunMetrics> {
    let model = cfg.model();
    let examples: Vec<_> = data.pairs.iter().map(SynthPair::example::<f32>).collect();
    let mut trainer = Trainer::new(model.clone(), cfg.schedule(), cfg.phase(), cfg.train(), init_params::<f32>(cfg)?)?;
    trainer.run(&examples, |_| {})?;

    let sched = cfg.schedule();
    let base = cfg.sampler();
    let den = Denoiser {
        params: &trainer.params,
        config: &model,
    };
    let mut total = RunMetrics { mse: 0.0, jitter: 0.0 };
    for (i, ex) in examples.iter().enumerate() {
        let sc = SamplerConfig {
            seed: request_seed(base.seed, i),
            ..base.clone()
        };
        let cond = Conditioning {
            beta0: ex.cond.beta0.clone(),
            audio: ex.cond.audio.clone(),
        };
        let x: Matrix<f64> = sample(&den, &cond, &sched, &sc)?.x0.cast();
        total.mse += mse(&x, &ex.x0.cast())?;
        total.jitter += jitter(&x)?;
    }
    let n = examples.len() as f64;
    Ok(RunMetrics {
        mse: total.mse / n,
        jitter: total.jitter / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobResult {
    pub variant: String,
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub variant: String,
    pub metric: &'static str,
    /// Seeds on which the full variant is strictly lower.
    pub full_lower: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// `(variant, key, base value, variant value)`
    pub changes: Vec<(String, String, String, String)>,
    pub jobs: Vec<JobResult>,
    pub verdicts: Vec<Verdict>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn results(&self, variant: &str) -> Vec<&JobResult> {
        self.jobs.iter().filter(|j| j.variant == variant).collect()
    }

    pub fn verdict(&self, variant: &str, metric: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.variant == variant && v.metric == metric)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant\tkey\tbase\tvalue")?;
        for v in &self.variants {
            match self.changes.iter().find(|c| &c.0 == v) {
                Some((_, k, a, b)) => writeln!(f, "{v}\t{k}\t{a}\t{b}")?,
                None => writeln!(f, "{v}\t-\t-\t-")?,
            }
        }
        writeln!(f)?;
        writeln!(f, "variant\tseed\tmse\tjitter")?;
        for j in &self.jobs {
            writeln!(f, "{}\t{}\t{:.6e}\t{:.6e}", j.variant, j.seed, j.metrics.mse, j.metrics.jitter)?;
        }
        writeln!(f)?;
        writeln!(f, "variant\tmse_mean\tmse_sd\tjitter_mean\tjitter_sd")?;
        let mut seen = Vec::new();
        for v in &self.variants {
            if seen.contains(&v) {
                continue;
            }
            seen.push(v);
            let rows = self.results(v);
            let (m, ms) = mean_sd(&rows.iter().map(|j| j.metrics.mse).collect::<Vec<_>>());
            let (jm, js) = mean_sd(&rows.iter().map(|j| j.metrics.jitter).collect::<Vec<_>>());
            writeln!(f, "{v}\t{m:.6e}\t{ms:.6e}\t{jm:.6e}\t{js:.6e}")?;
        }
        writeln!(f)?;
        for v in &self.verdicts {
            writeln!(
                f,
                "verdict\t{}\t{}\tfull lower on {}/{} seeds",
                v.variant, v.metric, v.full_lower, v.seeds
            )?;
        }
        Ok(())
    }
}

/// Runs every `(variant, seed)` job in parallel. Variants listed twice run
/// twice.
pub fn run_ablation(base: &RunConfig, data: &Dataset) -> CliResult<AblationReport> {
    let variants = base.ablation_variants();
    let seeds = base.ablation_seeds();
    let mut changes = Vec::new();
    let mut configs = Vec::new();
    for v in &variants {
        let cfg = variant_config(base, v)?;
        let diff = base.diff(&cfg);
        if diff.len() > 1 {
            return Err(CliError::Input(format!("variant {v} changes {} keys", diff.len())));
        }
        changes.extend(diff.into_iter().map(|(k, a, b)| (v.clone(), k.to_string(), a, b)));
        configs.push(cfg);
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let jobs = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let metrics = train_and_score(&seeded(&configs[v], seed)?, data).map_err(|e| match e {
                CliError::Numeric(source) => CliError::Input(format!("variant {} seed {seed}: {source}", variants[v])),
                other => other,
            })?;
            Ok(JobResult {
                variant: variants[v].clone(),
                seed,
                metrics,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut verdicts = Vec::new();
    let full: Vec<&JobResult> = jobs.iter().filter(|j| j.variant == "full").collect();
    if !full.is_empty() {
        let mut done = Vec::new();
        for v in variants.iter().filter(|v| *v != "full") {
            if done.contains(&v) {
                continue;
            }
            done.push(v);
            for (metric, get) in [("mse", (|m: &RunMetrics| m.mse) as fn(&RunMetrics) -> f64), ("jitter", |m| m.jitter)] {
                let pairs: Vec<(f64, f64)> = seeds
                    .iter()
                    .filter_map(|&s| {
                        let a = full.iter().find(|j| j.seed == s)?;
                        let b = jobs.iter().find(|j| &j.variant == v && j.seed == s)?;
                        Some((get(&a.metrics), get(&b.metrics)))
                    })
                    .collect();
                verdicts.push(Verdict {
                    variant: v.clone(),
                    metric,
                    full_lower: pairs.iter().filter(|(a, b)| a < b).count(),
                    seeds: pairs.len(),
                });
            }
        }
    }
    Ok(AblationReport {
        variants,
        seeds,
        changes,
        jobs,
        verdicts,
    })
}
