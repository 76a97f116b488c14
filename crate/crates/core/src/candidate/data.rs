//! Desk-scale image classification task: oriented sinusoidal gratings in
//! noise, stored as 8-bit samples in a flat binary file.
//!
//! File layout (little endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 8 | magic `GHNDATA1` |
//! | 4 | sample count `n` |
//! | 4 | channels |
//! | 4 | height |
//! | 4 | width |
//! | 4 | class count |
//! | `n·c·h·w` | samples, row-major `[n, c, h, w]`, one byte per value |
//! | `n` | labels, one byte each |

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GhnError, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"GHNDATA1";
const HEADER_LEN: usize = 8 + 5 * 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub classes: usize,
    pub samples: Vec<u8>,
    pub labels: Vec<u8>,
}

/// A minibatch ready for the network.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Parameters of the grating generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub size: usize,
    pub orientations: usize,
    /// Grating frequencies in cycles per image side.
    pub frequencies: Vec<f64>,
    pub train: usize,
    pub val: usize,
    /// Standard deviation of the additive pixel noise (image range 0..1).
    pub noise: f64,
    /// Grating amplitude is drawn from `[amp_lo, amp_hi]`.
    pub amp_lo: f64,
    pub amp_hi: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            size: 16,
            orientations: 5,
            frequencies: vec![1.5, 3.0],
            train: 2000,
            val: 500,
            noise: 0.3,
            amp_lo: 0.1,
            amp_hi: 0.3,
        }
    }
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        self.orientations * self.frequencies.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.size == 0 || self.orientations == 0 || self.frequencies.is_empty() {
            return Err(GhnError::config(
                "task size, orientations and frequencies must be non-empty",
            ));
        }
        if self.classes() > 256 {
            return Err(GhnError::config("at most 256 classes fit one label byte"));
        }
        if self.train == 0 || self.val == 0 {
            return Err(GhnError::config("train and val splits must be non-empty"));
        }
        if !(self.noise >= 0.0 && self.amp_lo >= 0.0 && self.amp_lo <= self.amp_hi) {
            return Err(GhnError::config(
                "noise and amplitude range must be non-negative and ordered",
            ));
        }
        Ok(())
    }

    /// Train and validation splits, drawn from disjoint RNG streams.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.check()?;
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Ok((
            self.split(self.train, stream(0)),
            self.split(self.val, stream(1)),
        ))
    }

    fn split(&self, n: usize, mut rng: ChaCha8Rng) -> Dataset {
        let k = self.classes();
        // exact balance up to the remainder, then shuffled
        let mut labels: Vec<u8> = (0..n).map(|i| (i % k) as u8).collect();
        labels.shuffle(&mut rng);
        let s = self.size;
        let mut samples = Vec::with_capacity(n * s * s);
        for &label in &labels {
            let o = label as usize / self.frequencies.len();
            let f = self.frequencies[label as usize % self.frequencies.len()];
            let theta = PI * o as f64 / self.orientations as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(self.amp_lo..=self.amp_hi);
            let omega = 2.0 * PI * f / s as f64;
            for y in 0..s {
                for x in 0..s {
                    let u = x as f64 * ct + y as f64 * st;
                    let v = 0.5 + amp * (omega * u + phase).sin() + self.noise * gaussian(&mut rng);
                    samples.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        Dataset {
            shape: [1, s, s],
            classes: k,
            samples,
            labels,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Per-class label counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Samples at `indices`, scaled to roughly zero mean and unit variance.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(GhnError::input("empty batch"));
        }
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(GhnError::input(format!(
                    "sample {i} out of range ({})",
                    self.len()
                )));
            }
            data.extend(
                self.samples[i * len..(i + 1) * len]
                    .iter()
                    .map(|&b| (b as f64 / 255.0 - 0.5) * 4.0),
            );
            labels.push(self.labels[i] as usize);
        }
        let [c, h, w] = self.shape;
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data)?,
            labels,
        })
    }

    /// Consecutive batches covering the whole set in order.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch>> {
        if size == 0 {
            return Err(GhnError::input("batch size must be positive"));
        }
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size)
            .map(|ix| self.batch(ix))
            .collect()
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            classes: self.classes,
            samples: self.samples[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.samples.len() + self.labels.len());
        out.extend_from_slice(DATA_MAGIC);
        let header = [
            self.len(),
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.classes,
        ];
        for v in header {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.samples);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| GhnError::Parse {
            location: "dataset header".into(),
            message: msg,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != DATA_MAGIC {
            return Err(bad("missing `GHNDATA1` magic".into()));
        }
        let field = |i: usize| {
            let at = 8 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let (n, c, h, w, classes) = (field(0), field(1), field(2), field(3), field(4));
        if c == 0 || h == 0 || w == 0 || classes == 0 || classes > 256 {
            return Err(bad(format!(
                "invalid shape [{c}, {h}, {w}] or class count {classes}"
            )));
        }
        let body = n * c * h * w;
        if bytes.len() != HEADER_LEN + body + n {
            return Err(bad(format!(
                "expected {} bytes for {n} samples, found {}",
                HEADER_LEN + body + n,
                bytes.len()
            )));
        }
        let samples = bytes[HEADER_LEN..HEADER_LEN + body].to_vec();
        let labels = bytes[HEADER_LEN + body..].to_vec();
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(GhnError::Parse {
                location: "dataset labels".into(),
                message: format!("label {l} outside {classes} classes"),
            });
        }
        Ok(Dataset {
            shape: [c, h, w],
            classes,
            samples,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| GhnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GhnError::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}
