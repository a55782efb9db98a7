//! Synthetic paired corpus with a known audio → expression mapping, and the
//! binary dataset file format.
//!
//! File layout (all integers and floats little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `MODITDS\0`              |
//! | 8      | 4    | format version (u32, = 1)      |
//! | 12     | 4    | number of pairs (u32)          |
//! | 16     | 4    | frames per pair (u32)          |
//! | 20     | 4    | audio dim (u32)                |
//! | 24     | 4    | coefficient dim (u32)          |
//! | 28     | ...  | pair records                   |
//!
//! Each record holds `frames × audio_dim` audio values, `frames × coeff_dim`
//! expression values and `frames` blink values, row-major f32.

use std::io::{self, Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::denoiser::Conditioning;
use crate::error::{ModitError, Result};
use crate::numeric::{Matrix, Real};
use crate::rng::{gaussian_matrix, stream};
use crate::training::TrainExample;

pub const DATASET_MAGIC: &[u8; 8] = b"MODITDS\0";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

/// Normalized temporal smoothing applied after the linear filter bank.
pub const SMOOTHING_KERNEL: [f64; 5] = [0.1, 0.2, 0.4, 0.2, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_pairs: usize,
    pub frames: usize,
    pub audio_dim: usize,
    pub coeff_dim: usize,
    pub noise_std: f64,
    pub ar_coeff: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_pairs: 4,
            frames: 12,
            audio_dim: 16,
            coeff_dim: 64,
            noise_std: 0.0,
            ar_coeff: 0.9,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.audio_dim == 0 || self.coeff_dim == 0 {
            return Err(ModitError::InvalidArgument("synthetic dimensions must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.ar_coeff.abs() < 1.0) {
            return Err(ModitError::InvalidArgument(format!(
                "noise_std must be ≥ 0 and |ar_coeff| < 1 (got {}, {})",
                self.noise_std, self.ar_coeff
            )));
        }
        Ok(())
    }

    /// The filter bank shared by every pair of this corpus.
    pub fn mapping(&self) -> Mapping {
        let mut rng = stream(self.seed, &[10]);
        let scale = 1.0 / (self.audio_dim as f64).sqrt();
        Mapping {
            filter: gaussian_matrix::<f64>(self.audio_dim, self.coeff_dim, &mut rng).scale(scale),
        }
    }
}

/// Ground-truth conditional mean: `smooth(audio · filter)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub filter: Matrix<f64>,
}

impl Mapping {
    pub fn apply(&self, audio: &Matrix<f64>) -> Result<Matrix<f64>> {
        let raw = audio.matmul(&self.filter)?;
        let half = SMOOTHING_KERNEL.len() as isize / 2;
        let last = raw.rows() as isize - 1;
        Ok(Matrix::from_fn(raw.rows(), raw.cols(), |i, j| {
            SMOOTHING_KERNEL
                .iter()
                .enumerate()
                .map(|(k, w)| w * raw[((i as isize + k as isize - half).clamp(0, last) as usize, j)])
                .sum()
        }))
    }
}

/// One synthetic training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub audio: Matrix<f32>,
    pub expression: Matrix<f32>,
    /// Eye-closure intensity per frame, in `[0, 1]`.
    pub blink: Vec<f32>,
}

impl SynthPair {
    /// The source-frame conditioning row.
    pub fn beta0(&self) -> Matrix<f32> {
        Matrix::row_vector(self.expression.row(0))
    }

    pub fn example<F: Real>(&self) -> TrainExample<F> {
        TrainExample {
            cond: Conditioning {
                beta0: self.beta0().cast(),
                audio: self.audio.cast(),
            },
            x0: self.expression.cast(),
        }
    }
}

/// Stationary unit-variance AR(1) per audio channel.
pub fn ar1_sequence(frames: usize, dim: usize, coeff: f64, rng: &mut impl Rng) -> Matrix<f64> {
    let innovation = (1.0 - coeff * coeff).sqrt();
    let noise: Matrix<f64> = gaussian_matrix(frames, dim, rng);
    let mut out = Matrix::zeros(frames, dim);
    for j in 0..dim {
        out[(0, j)] = noise[(0, j)];
        for i in 1..frames {
            out[(i, j)] = coeff * out[(i - 1, j)] + innovation * noise[(i, j)];
        }
    }
    out
}

/// One or two raised-cosine closure pulses.
pub fn blink_track(frames: usize, rng: &mut impl Rng) -> Vec<f64> {
    let pulses = rng.random_range(1..=2);
    let mut track = vec![0.0f64; frames];
    for _ in 0..pulses {
        let center = rng.random_range(0.0..frames as f64);
        let half_width = rng.random_range(1.5..3.0);
        for (k, v) in track.iter_mut().enumerate() {
            let d = (k as f64 - center).abs();
            if d < half_width {
                let p = 0.5 * (1.0 + (std::f64::consts::PI * d / half_width).cos());
                *v = v.max(p);
            }
        }
    }
    track.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Pair `index` of the corpus; depends only on `(spec, index)`.
pub fn gen_pair(spec: &SynthSpec, index: usize) -> Result<SynthPair> {
    spec.validate()?;
    if index >= spec.num_pairs {
        return Err(ModitError::IndexOutOfRange {
            index,
            limit: spec.num_pairs,
        });
    }
    let mut rng = stream(spec.seed, &[11, index as u64]);
    let audio = ar1_sequence(spec.frames, spec.audio_dim, spec.ar_coeff, &mut rng).cast::<f32>();
    let mut expression = spec.mapping().apply(&audio.cast())?;
    if spec.noise_std > 0.0 {
        let noise: Matrix<f64> = gaussian_matrix(spec.frames, spec.coeff_dim, &mut rng);
        expression = expression.zip_map(&noise, |e, n| e + spec.noise_std * n)?;
    }
    let blink = blink_track(spec.frames, &mut rng).into_iter().map(|v| v as f32).collect();
    Ok(SynthPair {
        audio,
        expression: expression.cast(),
        blink,
    })
}

pub fn gen_corpus(spec: &SynthSpec) -> Result<Dataset> {
    let pairs = (0..spec.num_pairs).map(|i| gen_pair(spec, i)).collect::<Result<_>>()?;
    Ok(Dataset {
        frames: spec.frames,
        audio_dim: spec.audio_dim,
        coeff_dim: spec.coeff_dim,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub audio_dim: usize,
    pub coeff_dim: usize,
    pub pairs: Vec<SynthPair>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt dataset header: {0}")]
    CorruptHeader(String),
    #[error("dataset version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated record for pair {pair}")]
    TruncatedRecord { pair: usize },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> std::result::Result<(), DatasetError> {
    let v = u32::try_from(v).map_err(|_| DatasetError::Inconsistent(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Dataset {
    fn check(&self) -> std::result::Result<(), DatasetError> {
        for (i, p) in self.pairs.iter().enumerate() {
            let ok = p.audio.shape() == (self.frames, self.audio_dim)
                && p.expression.shape() == (self.frames, self.coeff_dim)
                && p.blink.len() == self.frames;
            if !ok {
                return Err(DatasetError::Inconsistent(format!("pair {i} does not match header dimensions")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> std::result::Result<Vec<u8>, DatasetError> {
        self.check()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.pairs.len() * self.record_len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [self.pairs.len(), self.frames, self.audio_dim, self.coeff_dim] {
            put_u32(&mut out, v)?;
        }
        for p in &self.pairs {
            for v in p.audio.as_slice().iter().chain(p.expression.as_slice()).chain(&p.blink) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::result::Result<(), DatasetError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    fn record_len(&self) -> usize {
        4 * self.frames * (self.audio_dim + self.coeff_dim + 1)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, DatasetError> {
        if bytes.len() < HEADER_LEN {
            return Err(DatasetError::CorruptHeader(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(DatasetError::CorruptHeader("bad magic".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes"));
        let version = word(0);
        if version != DATASET_VERSION {
            return Err(DatasetError::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let (num_pairs, frames, audio_dim, coeff_dim) =
            (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
        if frames == 0 || audio_dim == 0 || coeff_dim == 0 {
            return Err(DatasetError::CorruptHeader("zero dimension".into()));
        }
        let mut ds = Dataset {
            frames,
            audio_dim,
            coeff_dim,
            pairs: Vec::with_capacity(num_pairs.min(1 << 16)),
        };
        let rec = ds.record_len();
        let body = &bytes[HEADER_LEN..];
        if body.len() > num_pairs * rec {
            return Err(DatasetError::Inconsistent(format!(
                "{} trailing bytes after the last record",
                body.len() - num_pairs * rec
            )));
        }
        let floats = |chunk: &[u8]| -> Vec<f32> {
            chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
        };
        for pair in 0..num_pairs {
            let chunk = body.get(pair * rec..(pair + 1) * rec).ok_or(DatasetError::TruncatedRecord { pair })?;
            let values = floats(chunk);
            let (a, rest) = values.split_at(frames * audio_dim);
            let (e, b) = rest.split_at(frames * coeff_dim);
            ds.pairs.push(SynthPair {
                audio: Matrix::from_vec(frames, audio_dim, a.to_vec()).expect("sized"),
                expression: Matrix::from_vec(frames, coeff_dim, e.to_vec()).expect("sized"),
                blink: b.to_vec(),
            });
        }
        Ok(ds)
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, DatasetError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
