//! Residual vector quantization for speech frames.
//!
//! Each layer holds `K` centroids of dimension `D` and quantizes the residual
//! left by the layers before it. Layer 0 carries content, layers 1..4 carry
//! timbre, and production streams keep at most four layers of an eight-layer
//! quantizer.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LAYERS: usize = 8;
pub const DEFAULT_FRAME_RATE: u32 = 50;
pub const DEFAULT_DECAY: f64 = 0.99;
const MAGIC: &[u8; 4] = b"RVQ1";
const HEADER_LEN: usize = 20;

/// Row-major matrix of `D`-dimensional frame vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    dim: usize,
    data: Vec<f32>,
}

impl Frames {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Frames { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::InvalidInput("frames must be non-empty with dimension >= 1".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::InvalidInput(format!("frame {i} has dimension {}, expected {dim}", rows[i].len())));
        }
        Ok(Frames { dim, data: rows.concat() })
    }

    pub fn zeros(dim: usize, len: usize) -> Self {
        Frames { dim, data: vec![0.0; dim * len] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Mean squared error per element against `other`.
    pub fn mse(&self, other: &Frames) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a as f64) - (*b as f64);
                d * d
            })
            .sum();
        sum / self.data.len() as f64
    }
}

/// Per-layer code matrix for one utterance: `codes[layer][frame]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeechCodes {
    frame_rate: u32,
    codes: Vec<Vec<u16>>,
}

impl SpeechCodes {
    pub fn new(codes: Vec<Vec<u16>>, frame_rate: u32) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::InvalidInput("speech codes need at least one layer".into()));
        }
        if codes.len() > MAX_LAYERS {
            return Err(Error::InvalidInput(format!("{} layers exceeds {MAX_LAYERS}", codes.len())));
        }
        let frames = codes[0].len();
        if codes.iter().any(|row| row.len() != frames) {
            return Err(Error::InvalidInput("speech code layers differ in length".into()));
        }
        Ok(SpeechCodes { frame_rate, codes })
    }

    pub fn layers(&self) -> usize {
        self.codes.len()
    }

    pub fn frames(&self) -> usize {
        self.codes[0].len()
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.frame_rate.max(1) as f64
    }

    pub fn layer(&self, layer: usize) -> &[u16] {
        &self.codes[layer]
    }

    pub fn rows(&self) -> &[Vec<u16>] {
        &self.codes
    }

    /// Keep only the first `layers` rows.
    pub fn truncated(&self, layers: usize) -> Result<SpeechCodes> {
        if layers == 0 || layers > self.codes.len() {
            return Err(Error::InvalidInput(format!(
                "cannot keep {layers} of {} layers",
                self.codes.len()
            )));
        }
        Ok(SpeechCodes {
            frame_rate: self.frame_rate,
            codes: self.codes[..layers].to_vec(),
        })
    }

    pub fn token_count(&self) -> usize {
        self.layers() * self.frames()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqConfig {
    pub layers: usize,
    pub codebook_size: usize,
    pub iters: usize,
    pub seed: u64,
    pub decay: f64,
    pub frame_rate: u32,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            layers: MAX_LAYERS,
            codebook_size: 1024,
            iters: 30,
            seed: 0,
            decay: DEFAULT_DECAY,
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }
}

/// Trained (or loaded) stack of codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    dim: usize,
    codebook_size: usize,
    frame_rate: u32,
    layers: Vec<Vec<f32>>,
    trained: bool,
}

impl Codebooks {
    /// Build from explicit centroid tables (`layers[l]` is `K * D` values).
    pub fn from_centroids(layers: Vec<Vec<f32>>, codebook_size: usize, dim: usize, frame_rate: u32) -> Result<Self> {
        if layers.is_empty() || layers.len() > MAX_LAYERS {
            return Err(Error::InvalidInput(format!("layer count {} not in 1..={MAX_LAYERS}", layers.len())));
        }
        if codebook_size == 0 || dim == 0 {
            return Err(Error::InvalidInput("codebook size and dimension must be positive".into()));
        }
        if layers.iter().any(|l| l.len() != codebook_size * dim) {
            return Err(Error::InvalidInput(format!("every layer must hold {codebook_size}x{dim} values")));
        }
        if layers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("centroids must be finite".into()));
        }
        Ok(Codebooks { dim, codebook_size, frame_rate, layers, trained: true })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn centroid(&self, layer: usize, code: usize) -> &[f32] {
        &self.layers[layer][code * self.dim..(code + 1) * self.dim]
    }

    pub fn layer(&self, layer: usize) -> &[f32] {
        &self.layers[layer]
    }

    pub fn train(frames: &Frames, config: &RvqConfig) -> Result<Self> {
        if config.layers == 0 || config.layers > MAX_LAYERS {
            return Err(Error::InvalidConfiguration(format!(
                "layer count {} not in 1..={MAX_LAYERS}",
                config.layers
            )));
        }
        if config.codebook_size == 0 || config.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::InvalidConfiguration(format!("codebook size {} unsupported", config.codebook_size)));
        }
        if !(0.0..1.0).contains(&config.decay) {
            return Err(Error::InvalidConfiguration(format!("decay {} not in [0, 1)", config.decay)));
        }
        if frames.len() < config.codebook_size {
            return Err(Error::InsufficientData(format!(
                "{} frames for a {}-entry codebook",
                frames.len(),
                config.codebook_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut residual = frames.clone();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let centroids = fit_layer(&residual, config.codebook_size, config.iters, config.decay, &mut rng);
            subtract_nearest(&mut residual, &centroids);
            layers.push(centroids);
        }
        Ok(Codebooks {
            dim: frames.dim(),
            codebook_size: config.codebook_size,
            frame_rate: config.frame_rate,
            layers,
            trained: true,
        })
    }

    pub fn encode(&self, frames: &Frames, layers_used: usize) -> Result<SpeechCodes> {
        if !self.trained {
            return Err(Error::InvalidInput("codebooks are not trained".into()));
        }
        if frames.dim() != self.dim {
            return Err(Error::InvalidInput(format!(
                "frame dimension {} does not match codebook dimension {}",
                frames.dim(),
                self.dim
            )));
        }
        if layers_used == 0 || layers_used > self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "cannot use {layers_used} of {} layers",
                self.layers.len()
            )));
        }
        let mut codes = vec![Vec::with_capacity(frames.len()); layers_used];
        let mut r = vec![0f32; self.dim];
        for row in frames.rows() {
            r.copy_from_slice(row);
            for (layer, out) in codes.iter_mut().enumerate() {
                let (code, _) = nearest(&self.layers[layer], self.dim, &r);
                let c = self.centroid(layer, code);
                for (x, y) in r.iter_mut().zip(c) {
                    *x -= *y;
                }
                out.push(code as u16);
            }
        }
        SpeechCodes::new(codes, self.frame_rate)
    }

    pub fn decode(&self, codes: &SpeechCodes) -> Result<Frames> {
        if codes.layers() > self.layers.len() {
            return Err(Error::InvalidInput(format!(
                "{} code layers but only {} codebooks",
                codes.layers(),
                self.layers.len()
            )));
        }
        let mut out = Frames::zeros(self.dim, codes.frames());
        for (layer, row) in codes.rows().iter().enumerate() {
            for (t, &code) in row.iter().enumerate() {
                if code as usize >= self.codebook_size {
                    return Err(Error::OutOfRange(format!(
                        "code {code} at layer {layer} frame {t} >= codebook size {}",
                        self.codebook_size
                    )));
                }
                let c = self.centroid(layer, code as usize);
                for (x, y) in out.row_mut(t).iter_mut().zip(c) {
                    *x += *y;
                }
            }
        }
        Ok(out)
    }

    /// `RVQ1` little-endian file image.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.layers.len() * self.codebook_size * self.dim);
        out.extend_from_slice(MAGIC);
        for v in [self.layers.len() as u32, self.codebook_size as u32, self.dim as u32, self.frame_rate] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in self.layers.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::InvalidInput(format!("codebook file is {} bytes, shorter than its header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::InvalidInput("codebook file lacks RVQ1 magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (layers, k, dim, frame_rate) = (word(0), word(1), word(2), word(3) as u32);
        if layers == 0 || layers > MAX_LAYERS || k == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!("bad codebook header L={layers} K={k} D={dim}")));
        }
        let per_layer = k
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidInput("codebook size overflows".into()))?;
        let expected = per_layer
            .checked_mul(layers)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::InvalidInput("codebook size overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::InvalidInput(format!(
                "codebook file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tables = values.chunks_exact(per_layer).map(<[f32]>::to_vec).collect();
        Codebooks::from_centroids(tables, k, dim, frame_rate)
    }
}

/// Index and squared distance of the nearest centroid. Ties resolve to the
/// lowest index. Distances accumulate in f64.
pub fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d: f64 = c
            .iter()
            .zip(v)
            .map(|(a, b)| {
                let x = (*a as f64) - (*b as f64);
                x * x
            })
            .sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn subtract_nearest(residual: &mut Frames, centroids: &[f32]) {
    let dim = residual.dim();
    for t in 0..residual.len() {
        let (code, _) = nearest(centroids, dim, residual.row(t));
        let c = &centroids[code * dim..(code + 1) * dim];
        for (x, y) in residual.row_mut(t).iter_mut().zip(c) {
            *x -= *y;
        }
    }
}

/// One layer of EMA k-means. Codes unused in an iteration are reseeded
/// from a random residual. A final exact-mean step leaves every used
/// centroid at the mean of its cell, so the layer never increases the
/// squared residual of the data it was fit on.
fn fit_layer(data: &Frames, k: usize, iters: usize, decay: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dim = data.dim();
    let n = data.len();
    let mut centroids = Vec::with_capacity(k * dim);
    for i in index::sample(rng, n, k).into_iter() {
        centroids.extend_from_slice(data.row(i));
    }
    let mut ema_count = vec![0f64; k];
    let mut ema_sum = vec![0f64; k * dim];
    let mut counts = vec![0f64; k];
    let mut sums = vec![0f64; k * dim];

    for _ in 0..iters {
        accumulate(data, &centroids, &mut counts, &mut sums);
        for j in 0..k {
            ema_count[j] = decay * ema_count[j] + (1.0 - decay) * counts[j];
            for d in 0..dim {
                let s = &mut ema_sum[j * dim + d];
                *s = decay * *s + (1.0 - decay) * sums[j * dim + d];
            }
            if counts[j] < 1.0 {
                let pick = rng.random_range(0..n);
                centroids[j * dim..(j + 1) * dim].copy_from_slice(data.row(pick));
                ema_count[j] = 0.0;
                ema_sum[j * dim..(j + 1) * dim].fill(0.0);
            } else {
                for d in 0..dim {
                    centroids[j * dim + d] = (ema_sum[j * dim + d] / ema_count[j]) as f32;
                }
            }
        }
    }

    accumulate(data, &centroids, &mut counts, &mut sums);
    for j in 0..k {
        if counts[j] > 0.0 {
            for d in 0..dim {
                centroids[j * dim + d] = (sums[j * dim + d] / counts[j]) as f32;
            }
        }
    }
    centroids
}

fn accumulate(data: &Frames, centroids: &[f32], counts: &mut [f64], sums: &mut [f64]) {
    let dim = data.dim();
    counts.fill(0.0);
    sums.fill(0.0);
    for row in data.rows() {
        let (j, _) = nearest(centroids, dim, row);
        counts[j] += 1.0;
        for (s, x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row) {
            *s += *x as f64;
        }
    }
}

/// Turns a mono waveform into frame vectors at a fixed frame rate.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, samples: &[f32], sample_rate: u32) -> Result<Frames>;
}

/// Log energy in `bands` equal-width spectral bands of each hop-sized
/// window. Frame count is `round(len / hop)`; the last window is
/// zero-padded.
#[derive(Debug, Clone)]
pub struct EnergyBands {
    pub bands: usize,
    pub frame_rate: u32,
}

impl Default for EnergyBands {
    fn default() -> Self {
        EnergyBands { bands: 8, frame_rate: DEFAULT_FRAME_RATE }
    }
}

impl FeatureExtractor for EnergyBands {
    fn dim(&self) -> usize {
        self.bands
    }

    fn extract(&self, samples: &[f32], sample_rate: u32) -> Result<Frames> {
        if self.frame_rate == 0 || sample_rate < self.frame_rate {
            return Err(Error::InvalidInput(format!(
                "sample rate {sample_rate} too low for {} frames/s",
                self.frame_rate
            )));
        }
        let hop = (sample_rate as f64 / self.frame_rate as f64).round() as usize;
        let frames = (samples.len() as f64 / hop as f64).round() as usize;
        let fft: Arc<dyn Fft<f32>> = FftPlanner::new().plan_fft_forward(hop);
        let bins = hop / 2 + 1;
        let mut out = Frames::zeros(self.bands, frames);
        let mut buf = vec![Complex32::new(0.0, 0.0); hop];
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                let x = samples.get(t * hop + i).copied().unwrap_or(0.0);
                *b = Complex32::new(x, 0.0);
            }
            fft.process(&mut buf);
            let row = out.row_mut(t);
            for (bin, c) in buf[..bins].iter().enumerate() {
                let band = (bin * self.bands / bins).min(self.bands - 1);
                row[band] += c.norm_sqr();
            }
            for v in row.iter_mut() {
                *v = (1.0 + *v).ln();
            }
        }
        Ok(out)
    }
}
