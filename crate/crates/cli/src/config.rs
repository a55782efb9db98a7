//! Flat `key = value` run configuration with a typed key registry.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use modit_core::attention::{BiasMode, BiasTargets, PhaseConfig, PhaseOrder};
use modit_core::blink_pose::{AngleRange, BlinkPoseConfig, BlinkTrainConfig};
use modit_core::denoiser::DenoiserConfig;
use modit_core::sampler::{SamplerConfig, SamplerMode};
use modit_core::schedule::{build_schedule, NoiseSchedule};
use modit_core::synth::SynthSpec;
use modit_core::training::{AdamWConfig, LossWeights, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { key: String, line: usize },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("inconsistent settings: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Int { min: u64, max: u64 },
    /// Closed range unless the bound is flagged open.
    Real { min: f64, max: f64, open_min: bool, open_max: bool },
    Bool,
    Choice(&'static [&'static str]),
    Targets,
    IntList,
    VariantList,
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn int(key: &'static str, min: u64, max: u64, default: &'static str) -> KeySpec {
    KeySpec { key, kind: Kind::Int { min, max }, default }
}

const fn real(key: &'static str, min: f64, max: f64, default: &'static str) -> KeySpec {
    KeySpec { key, kind: Kind::Real { min, max, open_min: false, open_max: false }, default }
}

const fn positive(key: &'static str, max: f64, default: &'static str) -> KeySpec {
    KeySpec { key, kind: Kind::Real { min: 0.0, max, open_min: true, open_max: false }, default }
}

const fn boolean(key: &'static str, default: &'static str) -> KeySpec {
    KeySpec { key, kind: Kind::Bool, default }
}

const MAX_SEED: u64 = u64::MAX;
const BIG: u64 = 1 << 32;

pub const VARIANTS: &[&str] = &["full", "no_beta0", "no_bias_injection", "no_temporal_revision", "no_velocity_loss"];

static REGISTRY: &[KeySpec] = &[
    int("schedule.T", 1, 100_000, "1000"),
    positive("schedule.beta_start", 1.0, "0.0001"),
    positive("schedule.beta_end", 1.0, "0.02"),
    int("model.width", 2, 8192, "64"),
    int("model.ffn_width", 1, 65_536, "128"),
    int("model.heads", 1, 256, "4"),
    int("model.blocks", 1, 64, "1"),
    int("model.frames", 1, 4096, "12"),
    int("model.coeff_dim", 1, 4096, "64"),
    int("model.audio_dim", 1, 4096, "16"),
    int("model.latent_dim", 1, 1024, "8"),
    int("model.temporal_hidden", 1, 1024, "16"),
    boolean("model.use_beta0", "true"),
    boolean("model.temporal_revision", "true"),
    int("model.init_seed", 0, MAX_SEED, "0"),
    int("train.steps", 0, BIG, "2000"),
    int("train.batch_size", 1, 4096, "4"),
    positive("train.lr", 1.0, "0.0001"),
    KeySpec { key: "train.beta1", kind: Kind::Real { min: 0.0, max: 1.0, open_min: false, open_max: true }, default: "0.9" },
    KeySpec { key: "train.beta2", kind: Kind::Real { min: 0.0, max: 1.0, open_min: false, open_max: true }, default: "0.999" },
    positive("train.eps", 1.0, "0.00000001"),
    real("train.weight_decay", 0.0, 1.0, "0.01"),
    real("train.lambda_t", 0.0, 1e6, "10"),
    real("train.lambda_read", 0.0, 1e6, "0.2"),
    real("train.lambda_lks", 0.0, 1e6, "0.1"),
    real("train.lambda_v", 0.0, 1e6, "0.1"),
    int("train.seed", 0, MAX_SEED, "0"),
    KeySpec { key: "sampler.mode", kind: Kind::Choice(&["ddim", "ddpm"]), default: "ddim" },
    int("sampler.seed", 0, MAX_SEED, "0"),
    int("sampler.resample_inner", 0, 100, "0"),
    int("sampler.overlap", 0, 4095, "4"),
    boolean("phase.enabled", "true"),
    int("phase.t_threshold", 1, 100_000, "500"),
    KeySpec { key: "phase.order", kind: Kind::Choice(&["algorithm_literal", "prose_order"]), default: "algorithm_literal" },
    KeySpec { key: "phase.mode", kind: Kind::Choice(&["multiplicative", "additive"]), default: "multiplicative" },
    KeySpec { key: "phase.targets", kind: Kind::Targets, default: "cross" },
    int("phase.diag_bandwidth", 0, 4096, "1"),
    real("phase.diag_floor", 0.0, 1e6, "0"),
    positive("phase.dispersed_sigma", 1e6, "2"),
    int("data.seed", 0, MAX_SEED, "0"),
    int("data.num_pairs", 1, 1_000_000, "4"),
    int("data.frames", 1, 1_000_000, "12"),
    int("data.audio_dim", 1, 4096, "16"),
    int("data.coeff_dim", 1, 4096, "64"),
    real("data.noise_std", 0.0, 1e6, "0"),
    KeySpec { key: "data.ar_coeff", kind: Kind::Real { min: -1.0, max: 1.0, open_min: true, open_max: true }, default: "0.9" },
    int("blink.channels", 1, 4096, "32"),
    int("blink.stages", 1, 64, "3"),
    int("blink.bins", 2, 4096, "66"),
    int("blink.steps", 0, BIG, "600"),
    positive("blink.lr", 1.0, "0.003"),
    int("blink.batch_size", 1, 4096, "8"),
    int("blink.seed", 0, MAX_SEED, "0"),
    int("blink.vertices", 4, 1_000_000, "8"),
    int("blink.basis_seed", 0, MAX_SEED, "0"),
    KeySpec { key: "ablation.variants", kind: Kind::VariantList, default: "full,no_beta0,no_bias_injection,no_temporal_revision,no_velocity_loss" },
    KeySpec { key: "ablation.seeds", kind: Kind::IntList, default: "0,1,2,3,4" },
];

fn spec_for(key: &str) -> Option<&'static KeySpec> {
    REGISTRY.iter().find(|s| s.key == key)
}

fn check_value(spec: &KeySpec, raw: &str) -> Result<String, ConfigError> {
    let invalid = |reason: String| ConfigError::InvalidValue {
        key: spec.key.to_string(),
        value: raw.to_string(),
        reason,
    };
    let raw = raw.trim();
    match spec.kind {
        Kind::Int { min, max } => {
            let v: u64 = raw.parse().map_err(|_| invalid("not a non-negative integer".into()))?;
            if v < min || v > max {
                return Err(invalid(format!("must be in {min}..={max}")));
            }
            Ok(v.to_string())
        }
        Kind::Real { min, max, open_min, open_max } => {
            let v: f64 = raw.parse().map_err(|_| invalid("not a number".into()))?;
            let low_ok = if open_min { v > min } else { v >= min };
            let high_ok = if open_max { v < max } else { v <= max };
            if !v.is_finite() || !low_ok || !high_ok {
                let (l, h) = (if open_min { "(" } else { "[" }, if open_max { ")" } else { "]" });
                return Err(invalid(format!("must be in {l}{min}, {max}{h}")));
            }
            Ok(format!("{v:?}"))
        }
        Kind::Bool => match raw {
            "true" | "false" => Ok(raw.to_string()),
            _ => Err(invalid("expected true or false".into())),
        },
        Kind::Choice(options) => {
            if options.contains(&raw) {
                Ok(raw.to_string())
            } else {
                Err(invalid(format!("expected one of {}", options.join(", "))))
            }
        }
        Kind::Targets => BiasTargets::from_str(raw).map(|t| t.to_string()).map_err(|e| invalid(e.to_string())),
        Kind::IntList => {
            let parts: Result<Vec<u64>, _> = raw.split(',').map(|p| p.trim().parse::<u64>()).collect();
            match parts {
                Ok(v) if !v.is_empty() => Ok(v.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
                _ => Err(invalid("expected a comma-separated list of integers".into())),
            }
        }
        Kind::VariantList => {
            let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
            if let Some(bad) = parts.iter().find(|p| !VARIANTS.contains(p)) {
                return Err(invalid(format!("unknown variant {bad:?}")));
            }
            Ok(parts.join(","))
        }
    }
}

/// Validated settings. Every registered key has a value; values are kept in
/// canonical text form so the config can be snapshotted and compared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = REGISTRY.iter().map(|s| (s.key, check_value(s, s.default).expect("registry defaults are valid"))).collect();
        Self { values }
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    /// `#` starts a comment; blank lines are ignored.
    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw_line) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: raw_line.to_string() });
            };
            let key = key.trim();
            let spec = spec_for(key).ok_or_else(|| ConfigError::UnknownKey { key: key.to_string(), line })?;
            if seen.insert(spec.key, line).is_some() {
                return Err(ConfigError::Duplicate { key: key.to_string(), line });
            }
            cfg.values.insert(spec.key, check_value(spec, value)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    /// Canonical form: every key, sorted, one per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let spec = spec_for(key).ok_or_else(|| ConfigError::UnknownKey { key: key.to_string(), line: 0 })?;
        self.values.insert(spec.key, check_value(spec, value)?);
        Ok(())
    }

    /// Replaces every seed key.
    pub fn override_seed(&mut self, seed: u64) {
        for key in ["data.seed", "model.init_seed", "train.seed", "sampler.seed", "blink.seed"] {
            self.values.insert(key, seed.to_string());
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    /// Keys whose values differ, as `(key, ours, theirs)`.
    pub fn diff(&self, other: &Self) -> Vec<(&'static str, String, String)> {
        self.values
            .iter()
            .filter(|(k, v)| other.values.get(*k) != Some(v))
            .map(|(k, v)| (*k, v.clone(), other.get(k).to_string()))
            .collect()
    }

    fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated integer")
    }

    fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated integer")
    }

    fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated number")
    }

    fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Inconsistent(msg));
        if self.f64("schedule.beta_start") > self.f64("schedule.beta_end") {
            return bad("schedule.beta_start exceeds schedule.beta_end".into());
        }
        let (width, heads) = (self.usize("model.width"), self.usize("model.heads"));
        if width % heads != 0 || width % 2 != 0 {
            return bad(format!("model.width {width} must be even and divisible by model.heads {heads}"));
        }
        if self.usize("phase.t_threshold") > self.usize("schedule.T") {
            return bad("phase.t_threshold exceeds schedule.T".into());
        }
        if self.usize("sampler.overlap") >= self.usize("model.frames") {
            return bad("sampler.overlap must be below model.frames".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        build_schedule(self.usize("schedule.T"), self.f64("schedule.beta_start"), self.f64("schedule.beta_end"))
            .expect("schedule keys validated")
    }

    pub fn model(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.usize("model.width"),
            ffn_width: self.usize("model.ffn_width"),
            heads: self.usize("model.heads"),
            blocks: self.usize("model.blocks"),
            frames: self.usize("model.frames"),
            coeff_dim: self.usize("model.coeff_dim"),
            audio_dim: self.usize("model.audio_dim"),
            latent_dim: self.usize("model.latent_dim"),
            temporal_hidden: self.usize("model.temporal_hidden"),
            use_beta0: self.bool("model.use_beta0"),
            temporal_revision: self.bool("model.temporal_revision"),
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.u64("model.init_seed")
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.u64("train.steps"),
            batch_size: self.usize("train.batch_size"),
            seed: self.u64("train.seed"),
            weights: LossWeights {
                lambda_t: self.f64("train.lambda_t"),
                lambda_read: self.f64("train.lambda_read"),
                lambda_lks: self.f64("train.lambda_lks"),
                lambda_v: self.f64("train.lambda_v"),
            },
            adam: AdamWConfig {
                lr: self.f64("train.lr"),
                beta1: self.f64("train.beta1"),
                beta2: self.f64("train.beta2"),
                eps: self.f64("train.eps"),
                weight_decay: self.f64("train.weight_decay"),
            },
        }
    }

    /// `None` when bias injection is disabled.
    pub fn phase(&self) -> Option<PhaseConfig> {
        self.bool("phase.enabled").then(|| PhaseConfig {
            t_threshold: self.usize("phase.t_threshold"),
            order: self.get("phase.order").parse::<PhaseOrder>().expect("validated choice"),
            targets: self.get("phase.targets").parse::<BiasTargets>().expect("validated targets"),
            mode: self.get("phase.mode").parse::<BiasMode>().expect("validated choice"),
            diag_bandwidth: self.usize("phase.diag_bandwidth"),
            diag_floor: self.f64("phase.diag_floor"),
            dispersed_sigma: self.f64("phase.dispersed_sigma"),
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            mode: self.get("sampler.mode").parse::<SamplerMode>().expect("validated choice"),
            phase: self.phase(),
            resample_inner: self.usize("sampler.resample_inner"),
            seed: self.u64("sampler.seed"),
            log_attention_at: Vec::new(),
        }
    }

    pub fn overlap(&self) -> usize {
        self.usize("sampler.overlap")
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            seed: self.u64("data.seed"),
            num_pairs: self.usize("data.num_pairs"),
            frames: self.usize("data.frames"),
            audio_dim: self.usize("data.audio_dim"),
            coeff_dim: self.usize("data.coeff_dim"),
            noise_std: self.f64("data.noise_std"),
            ar_coeff: self.f64("data.ar_coeff"),
        }
    }

    pub fn blink(&self) -> BlinkPoseConfig {
        BlinkPoseConfig {
            coeff_dim: self.usize("model.coeff_dim"),
            channels: self.usize("blink.channels"),
            stages: self.usize("blink.stages"),
            kernel: 3,
            bins: self.usize("blink.bins"),
            range: AngleRange::default(),
        }
    }

    pub fn blink_train(&self) -> BlinkTrainConfig {
        BlinkTrainConfig {
            steps: self.u64("blink.steps"),
            batch_size: self.usize("blink.batch_size"),
            frames: self.usize("model.frames"),
            seed: self.u64("blink.seed"),
            adam: AdamWConfig {
                lr: self.f64("blink.lr"),
                ..AdamWConfig::default()
            },
        }
    }

    pub fn blink_basis(&self) -> (usize, u64) {
        (self.usize("blink.vertices"), self.u64("blink.basis_seed"))
    }

    pub fn ablation_variants(&self) -> Vec<String> {
        self.get("ablation.variants").split(',').map(str::to_string).collect()
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        self.get("ablation.seeds").split(',').map(|s| s.parse().expect("validated list")).collect()
    }
}
