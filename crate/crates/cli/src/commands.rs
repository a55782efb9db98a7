//! Subcommand implementations. Each returns a summary that `main` prints.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use modit_core::blink_pose::{
    blink_distance_curve, train_blink_head, BlinkPoseParams, ToyFaceBasis, EYELID_PAIR,
};
use modit_core::denoiser::{Conditioning, ModelParams};
use modit_core::metrics::{jitter, mse, velocity_mse};
use modit_core::numeric::{Matrix, Real};
use modit_core::params::ParamTree;
use modit_core::rng::stream;
use modit_core::sampler::{request_seed, sample, sample_long, window_starts, Denoiser, SamplerConfig};
use modit_core::synth::{gen_corpus, Dataset, SynthPair};
use modit_core::training::{AdamW, LossParts, Trainer};
use rayon::prelude::*;

use crate::checkpoint::{write_atomic, Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

/// Reads a config file (or uses defaults) and applies the seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::ConfigRead {
                path: p.to_path_buf(),
                source,
            })?;
            text.parse()?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let dataset_err = |source| CliError::Dataset {
        path: path.to_path_buf(),
        source,
    };
    let bytes = fs::read(path).map_err(|e| dataset_err(e.into()))?;
    Dataset::from_bytes(&bytes).map_err(dataset_err)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> CliResult<()> {
    let bytes = ds.to_bytes().map_err(|source| CliError::Dataset {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<Dataset> {
    let ds = gen_corpus(&cfg.synth())?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

/// Fresh parameters from `model.init_seed`.
pub fn init_params<F: Real>(cfg: &RunConfig) -> CliResult<ModelParams<F>> {
    Ok(ModelParams::init(&cfg.model(), &mut stream(cfg.init_seed(), &[3]))?)
}

fn require_same(ckpt: &RunConfig, cfg: &RunConfig, keep: impl Fn(&str) -> bool) -> Result<(), CheckpointError> {
    let diff: Vec<String> = ckpt
        .diff(cfg)
        .into_iter()
        .filter(|(k, _, _)| keep(k))
        .map(|(k, a, b)| format!("{k} (checkpoint {a}, config {b})"))
        .collect();
    if diff.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::Incompatible(diff.join(", ")))
    }
}

fn model_key(k: &str) -> bool {
    (k.starts_with("model.") && k != "model.init_seed") || k.starts_with("schedule.")
}

fn resume_key(k: &str) -> bool {
    model_key(k) || k.starts_with("phase.") || (k.starts_with("train.") && k != "train.steps")
}

/// Loads denoiser parameters, checking the architecture against `cfg`.
pub fn load_model<F: Real>(ckpt: &Checkpoint, cfg: &RunConfig) -> CliResult<ModelParams<F>> {
    require_same(&ckpt.config, cfg, model_key)?;
    let mut params = init_params::<F>(cfg)?;
    ckpt.load_tree("param", &mut params)?;
    Ok(params)
}

pub fn training_checkpoint<F: Real>(cfg: &RunConfig, trainer: &Trainer<F>) -> Checkpoint {
    let mut ckpt = Checkpoint::new::<F>(cfg.clone());
    ckpt.meta.insert("kind".into(), "denoiser".into());
    ckpt.meta.insert("step".into(), trainer.opt.step.to_string());
    // the training stream is a pure function of (seed, step)
    ckpt.meta.insert("rng.seed".into(), trainer.config.seed.to_string());
    ckpt.put_tree("param", &trainer.params);
    ckpt.put_tree("adam_m", &trainer.opt.m);
    ckpt.put_tree("adam_v", &trainer.opt.v);
    ckpt
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub last: Option<LossParts>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "trained steps {}..{}", self.start_step, self.end_step)?;
        if let Some(l) = &self.last {
            write!(f, "; last L_t {:.6} L_v {:.6} L_total {:.6}", l.l_t, l.l_v, l.total)?;
        }
        write!(f, "\ncheckpoint {}\nmetrics {}", self.checkpoint.display(), self.log.display())
    }
}

pub const LOG_HEADER: &str = "step\tL_t\tL_v\tL_total\twall_ms";

pub struct TrainRequest<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    /// Defaults to `<out>.metrics.tsv`.
    pub log: Option<&'a Path>,
}

pub fn cmd_train(cfg: &RunConfig, precision: Precision, req: &TrainRequest) -> CliResult<TrainSummary> {
    let resume = req.resume.map(Checkpoint::load).transpose()?;
    let precision = match &resume {
        Some(c) if c.dtype == "f64" => Precision::F64,
        Some(_) => Precision::F32,
        None => precision,
    };
    match precision {
        Precision::F32 => train_typed::<f32>(cfg, req, resume.as_ref()),
        Precision::F64 => train_typed::<f64>(cfg, req, resume.as_ref()),
    }
}

fn check_dataset_dims(ds: &Dataset, cfg: &RunConfig, need_frames: bool) -> CliResult<()> {
    let m = cfg.model();
    let frames_ok = if need_frames { ds.frames == m.frames } else { ds.frames >= m.frames };
    if !frames_ok || ds.audio_dim != m.audio_dim || ds.coeff_dim != m.coeff_dim {
        return Err(CliError::Input(format!(
            "dataset is {} frames x {} audio x {} coefficients; model expects {} frames x {} x {}",
            ds.frames, ds.audio_dim, ds.coeff_dim, m.frames, m.audio_dim, m.coeff_dim
        )));
    }
    if ds.pairs.is_empty() {
        return Err(CliError::Input("dataset has no pairs".into()));
    }
    Ok(())
}

fn train_typed<F: Real>(cfg: &RunConfig, req: &TrainRequest, resume: Option<&Checkpoint>) -> CliResult<TrainSummary> {
    let ds = read_dataset(req.data)?;
    check_dataset_dims(&ds, cfg, true)?;
    let data: Vec<_> = ds.pairs.iter().map(SynthPair::example::<F>).collect();

    let params = match resume {
        Some(c) => {
            require_same(&c.config, cfg, resume_key)?;
            load_model::<F>(c, cfg)?
        }
        None => init_params::<F>(cfg)?,
    };
    let mut trainer = Trainer::new(cfg.model(), cfg.schedule(), cfg.phase(), cfg.train(), params)?;
    if let Some(c) = resume {
        let mut opt = AdamW::new(&trainer.params, cfg.train().adam);
        c.load_tree("adam_m", &mut opt.m)?;
        c.load_tree("adam_v", &mut opt.v)?;
        opt.step = c
            .meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CheckpointError::Manifest("missing step".into()))?;
        trainer.opt = opt;
    }

    let start_step = trainer.step_count();
    let log_path = req.log.map(Path::to_path_buf).unwrap_or_else(|| sibling(req.out, ".metrics.tsv"));
    let mut log = format!("{LOG_HEADER}\n");
    let mut last = None;
    let clock = Instant::now();
    let outcome = trainer.run(&data, |m| {
        let l = &m.losses;
        log.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", m.step, l.l_t, l.l_v, l.total, clock.elapsed().as_millis()));
        last = Some(*l);
    });
    write_file(&log_path, log.as_bytes())?;
    outcome?;
    training_checkpoint(cfg, &trainer).save(req.out)?;
    Ok(TrainSummary {
        start_step,
        end_step: trainer.step_count(),
        last,
        checkpoint: req.out.to_path_buf(),
        log: log_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub seed: u64,
    pub mode: String,
    pub phase: String,
    pub pairs: usize,
    pub frames: usize,
    pub windows: usize,
    pub out: PathBuf,
}

impl fmt::Display for SampleSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed\t{}", self.seed)?;
        writeln!(f, "mode\t{}", self.mode)?;
        writeln!(f, "phase\t{}", self.phase)?;
        writeln!(f, "pairs\t{}", self.pairs)?;
        writeln!(f, "frames\t{}", self.frames)?;
        writeln!(f, "windows_per_pair\t{}", self.windows)?;
        write!(f, "output\t{}", self.out.display())
    }
}

pub struct SampleRequest<'a> {
    pub checkpoint: &'a Path,
    /// Pair `i` supplies the source frame (expression row 0).
    pub beta0_source: &'a Path,
    /// Pair `i` supplies the audio track and blink track.
    pub audio_source: &'a Path,
    pub out: &'a Path,
}

/// Samples one sequence per audio pair. Tracks longer than the model window
/// are generated window by window and cross-faded.
pub fn cmd_sample(cfg: &RunConfig, req: &SampleRequest) -> CliResult<SampleSummary> {
    let ckpt = Checkpoint::load(req.checkpoint)?;
    match ckpt.dtype.as_str() {
        "f64" => sample_typed::<f64>(cfg, &ckpt, req),
        _ => sample_typed::<f32>(cfg, &ckpt, req),
    }
}

/// One generated sequence per line block: one frame per line, values
/// separated by single spaces.
pub fn coefficient_trace(x: &Matrix<f32>) -> String {
    let mut s = String::new();
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn sample_typed<F: Real>(cfg: &RunConfig, ckpt: &Checkpoint, req: &SampleRequest) -> CliResult<SampleSummary> {
    let params = load_model::<F>(ckpt, cfg)?;
    let model = cfg.model();
    let sched = cfg.schedule();
    let audio_ds = read_dataset(req.audio_source)?;
    check_dataset_dims(&audio_ds, cfg, false)?;
    let beta0_ds = read_dataset(req.beta0_source)?;
    if beta0_ds.coeff_dim != model.coeff_dim || beta0_ds.pairs.len() < audio_ds.pairs.len() {
        return Err(CliError::Input(format!(
            "source-frame dataset needs {} coefficients and at least {} pairs",
            model.coeff_dim,
            audio_ds.pairs.len()
        )));
    }
    let base = cfg.sampler();
    let overlap = cfg.overlap();
    let windows = window_starts(audio_ds.frames, model.frames, overlap)?.len();
    let den = Denoiser { params: &params, config: &model };

    let generated: Vec<CliResult<Matrix<F>>> = audio_ds
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let beta0: Matrix<F> = beta0_ds.pairs[i].beta0().cast();
            let audio: Matrix<F> = pair.audio.cast();
            let sc = SamplerConfig { seed: request_seed(base.seed, i), ..base.clone() };
            let x = if audio.rows() == model.frames {
                sample(&den, &Conditioning { beta0, audio }, &sched, &sc)?.x0
            } else {
                sample_long(&den, &beta0, &audio, &sched, &sc, overlap)?
            };
            Ok(x)
        })
        .collect();

    let mut out = Dataset {
        frames: audio_ds.frames,
        audio_dim: audio_ds.audio_dim,
        coeff_dim: model.coeff_dim,
        pairs: Vec::with_capacity(audio_ds.pairs.len()),
    };
    for (i, (g, src)) in generated.into_iter().zip(&audio_ds.pairs).enumerate() {
        let expression: Matrix<f32> = g?.cast();
        write_file(&sibling(req.out, &format!(".pair{i}.txt")), coefficient_trace(&expression).as_bytes())?;
        out.pairs.push(SynthPair {
            audio: src.audio.clone(),
            expression,
            blink: src.blink.clone(),
        });
    }
    write_dataset(&out, req.out)?;
    let summary = SampleSummary {
        seed: base.seed,
        mode: base.mode.to_string(),
        phase: match &base.phase {
            Some(p) => format!("order={} t_T={} targets={} mode={}", p.order, p.t_threshold, p.targets, p.mode),
            None => "disabled".into(),
        },
        pairs: out.pairs.len(),
        frames: out.frames,
        windows,
        out: req.out.to_path_buf(),
    };
    write_file(&sibling(req.out, ".summary.txt"), format!("{summary}\n").as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    pub mse: f64,
    pub velocity_mse: f64,
    pub jitter_generated: f64,
    pub jitter_reference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    pub blink_curve: Option<Vec<(f64, f64)>>,
}

impl EvalReport {
    pub fn mean(&self) -> PairMetrics {
        let n = self.pairs.len().max(1) as f64;
        let avg = |f: fn(&PairMetrics) -> f64| self.pairs.iter().map(f).sum::<f64>() / n;
        PairMetrics {
            mse: avg(|p| p.mse),
            velocity_mse: avg(|p| p.velocity_mse),
            jitter_generated: avg(|p| p.jitter_generated),
            jitter_reference: avg(|p| p.jitter_reference),
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pair\tmse\tvelocity_mse\tjitter_generated\tjitter_reference\tjitter_diff")?;
        let row = |f: &mut fmt::Formatter<'_>, label: &str, p: &PairMetrics| {
            writeln!(
                f,
                "{label}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
                p.mse,
                p.velocity_mse,
                p.jitter_generated,
                p.jitter_reference,
                p.jitter_generated - p.jitter_reference
            )
        };
        for (i, p) in self.pairs.iter().enumerate() {
            row(f, &i.to_string(), p)?;
        }
        row(f, "mean", &self.mean())?;
        if let Some(curve) = &self.blink_curve {
            writeln!(f, "blink_intensity\teye_distance")?;
            for (c, d) in curve {
                writeln!(f, "{c:.1}\t{d:.6}")?;
            }
        }
        Ok(())
    }
}

pub fn evaluate(generated: &Dataset, reference: &Dataset) -> CliResult<Vec<PairMetrics>> {
    if generated.pairs.len() != reference.pairs.len() {
        return Err(CliError::Input(format!(
            "generated has {} pairs, reference {}",
            generated.pairs.len(),
            reference.pairs.len()
        )));
    }
    generated
        .pairs
        .iter()
        .zip(&reference.pairs)
        .map(|(g, r)| {
            let (g, r): (Matrix<f64>, Matrix<f64>) = (g.expression.cast(), r.expression.cast());
            Ok(PairMetrics {
                mse: mse(&g, &r)?,
                velocity_mse: velocity_mse(&g, &r)?,
                jitter_generated: jitter(&g)?,
                jitter_reference: jitter(&r)?,
            })
        })
        .collect()
}

pub const BLINK_INTENSITIES: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

pub fn cmd_eval(generated: &Path, reference: &Path, blink: Option<&Path>) -> CliResult<EvalReport> {
    let pairs = evaluate(&read_dataset(generated)?, &read_dataset(reference)?)?;
    let blink_curve = blink
        .map(|path| -> CliResult<_> {
            let ckpt = Checkpoint::load(path)?;
            let (params, basis) = load_blink(&ckpt)?;
            let cfg = &ckpt.config;
            let window = Matrix::zeros(cfg.model().frames, cfg.model().coeff_dim);
            let d = blink_distance_curve(&params, &cfg.blink(), &window, &basis, &BLINK_INTENSITIES)?;
            Ok(BLINK_INTENSITIES.iter().copied().zip(d).collect())
        })
        .transpose()?;
    Ok(EvalReport { pairs, blink_curve })
}

/// Expression windows of `model.frames` from every pair, plus one neutral
/// window.
pub fn blink_windows(ds: &Dataset, frames: usize) -> Vec<Matrix<f64>> {
    let mut windows: Vec<Matrix<f64>> = ds
        .pairs
        .iter()
        .flat_map(|p| {
            let e: Matrix<f64> = p.expression.cast();
            (0..=ds.frames.saturating_sub(frames)).step_by(frames.max(1)).map(move |s| e.slice_rows(s, s + frames)).collect::<Vec<_>>()
        })
        .collect();
    windows.push(Matrix::zeros(frames, ds.coeff_dim));
    windows
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlinkSummary {
    pub final_loss: f64,
    pub curve: Vec<(f64, f64)>,
}

impl fmt::Display for BlinkSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "final blink loss {:.6e}", self.final_loss)?;
        writeln!(f, "blink_intensity\teye_distance")?;
        for (c, d) in &self.curve {
            writeln!(f, "{c:.1}\t{d:.6}")?;
        }
        Ok(())
    }
}

pub fn build_basis(cfg: &RunConfig) -> CliResult<ToyFaceBasis> {
    let (vertices, seed) = cfg.blink_basis();
    Ok(ToyFaceBasis::constructed(vertices, 80, cfg.model().coeff_dim, seed)?)
}

/// Trains the blink head on windows of `data` and stores it with the face
/// basis (always 64-bit).
pub fn cmd_train_blink(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<BlinkSummary> {
    let ds = read_dataset(data)?;
    check_dataset_dims(&ds, cfg, false)?;
    let bcfg = cfg.blink();
    let mut params: BlinkPoseParams<f64> = BlinkPoseParams::init(&bcfg, &mut stream(cfg.blink_train().seed, &[4]))?;
    let windows = blink_windows(&ds, cfg.model().frames);
    let final_loss = train_blink_head(&mut params, &bcfg, &windows, &cfg.blink_train())?;
    let basis = build_basis(cfg)?;
    let neutral = Matrix::zeros(cfg.model().frames, bcfg.coeff_dim);
    let d = blink_distance_curve(&params, &bcfg, &neutral, &basis, &BLINK_INTENSITIES)?;

    let mut ckpt = Checkpoint::new::<f64>(cfg.clone());
    ckpt.meta.insert("kind".into(), "blink".into());
    ckpt.meta.insert("eyelid_pair".into(), format!("{},{}", EYELID_PAIR.0, EYELID_PAIR.1));
    ckpt.put_tree("blink", &params);
    ckpt.put("basis/mean", &basis.mean);
    ckpt.put("basis/identity", &basis.identity);
    ckpt.put("basis/expression", &basis.expression);
    ckpt.save(out)?;
    Ok(BlinkSummary {
        final_loss,
        curve: BLINK_INTENSITIES.iter().copied().zip(d).collect(),
    })
}

pub fn load_blink(ckpt: &Checkpoint) -> CliResult<(BlinkPoseParams<f64>, ToyFaceBasis)> {
    let cfg = &ckpt.config;
    let mut params: BlinkPoseParams<f64> = BlinkPoseParams::init(&cfg.blink(), &mut stream(0, &[4]))?;
    ckpt.load_tree("blink", &mut params)?;
    let basis = ToyFaceBasis {
        mean: ckpt.get("basis/mean")?,
        identity: ckpt.get("basis/identity")?,
        expression: ckpt.get("basis/expression")?,
    };
    basis.validate()?;
    Ok((params, basis))
}

/// Parameter count, for status lines.
pub fn describe_model<F: Real>(params: &ModelParams<F>) -> String {
    format!("{} tensors, {} parameters", params.named().len(), params.num_params())
}
