//! Image tokens and video frame selection.
//!
//! Every image becomes exactly 32 codes in `[0, 8192)`, wrapped as
//! `<image> c1 .. c32 </image>` (34 ids). Videos are sequences of such
//! blocks; which frames to keep is decided by [`select_frames`].

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::{nearest, Codebooks, Frames, RvqConfig};
use crate::vocab::{Special, Token, TokenId, VocabLayout, IMAGE_CODEBOOK_SIZE};

pub const IMAGE_TOKENS: usize = 32;
/// Wrapped block length: 32 codes plus `<image>` and `</image>`.
pub const IMAGE_BLOCK_LEN: usize = IMAGE_TOKENS + 2;
pub const INPUT_SIDE: u32 = 224;
pub const GRID_ROWS: u32 = 4;
pub const GRID_COLS: u32 = 8;
const FEATURE_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageTokens([u16; IMAGE_TOKENS]);

impl ImageTokens {
    pub fn new(codes: &[u16]) -> Result<Self> {
        if codes.len() != IMAGE_TOKENS {
            return Err(Error::InvalidInput(format!(
                "an image has exactly {IMAGE_TOKENS} codes, got {}",
                codes.len()
            )));
        }
        if let Some(c) = codes.iter().find(|c| **c as u32 >= IMAGE_CODEBOOK_SIZE) {
            return Err(Error::OutOfRange(format!("image code {c} >= {IMAGE_CODEBOOK_SIZE}")));
        }
        let mut arr = [0u16; IMAGE_TOKENS];
        arr.copy_from_slice(codes);
        Ok(ImageTokens(arr))
    }

    pub fn codes(&self) -> &[u16; IMAGE_TOKENS] {
        &self.0
    }
}

pub fn serialize_image(tokens: &ImageTokens, layout: &VocabLayout) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(IMAGE_BLOCK_LEN);
    out.push(layout.special_id(Special::ImageStart));
    out.extend(
        tokens
            .0
            .iter()
            .map(|&c| layout.encode(Token::Image(c)).expect("ImageTokens holds in-range codes")),
    );
    out.push(layout.special_id(Special::ImageEnd));
    out
}

/// Validate raw codes and serialize them in one step.
pub fn serialize_image_codes(codes: &[u16], layout: &VocabLayout) -> Result<Vec<TokenId>> {
    Ok(serialize_image(&ImageTokens::new(codes)?, layout))
}

pub fn parse_image(seq: &[TokenId], layout: &VocabLayout) -> Result<ImageTokens> {
    let malformed = |position: usize, reason: &str| Error::MalformedStream { position, reason: reason.into() };
    if seq.first() != Some(&layout.special_id(Special::ImageStart)) {
        return Err(malformed(0, "image block must start with <image>"));
    }
    let mut codes = Vec::with_capacity(IMAGE_TOKENS);
    for (i, &id) in seq.iter().enumerate().skip(1) {
        match layout.classify(id) {
            Ok(Token::Image(c)) if codes.len() < IMAGE_TOKENS => codes.push(c),
            Ok(Token::Special(Special::ImageEnd)) if codes.len() == IMAGE_TOKENS => {
                if i + 1 != seq.len() {
                    return Err(malformed(i + 1, "trailing tokens after </image>"));
                }
                return ImageTokens::new(&codes);
            }
            _ => return Err(malformed(i, "image block must hold exactly 32 image codes")),
        }
    }
    Err(malformed(seq.len(), "image block is not closed"))
}

pub trait ImageQuantizer: Send + Sync {
    fn quantize(&self, image: &RgbImage) -> Result<ImageTokens>;
}

/// Mean colour of each cell of a 4x8 grid over the image resized to
/// 224x224, scaled to `[0, 1]`. Row-major, 32 cells.
pub fn grid_features(image: &RgbImage) -> Result<Vec<[f32; FEATURE_DIM]>> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::InvalidInput("image is empty".into()));
    }
    let resized;
    let img = if image.dimensions() == (INPUT_SIDE, INPUT_SIDE) {
        image
    } else {
        resized = imageops::resize(image, INPUT_SIDE, INPUT_SIDE, FilterType::Triangle);
        &resized
    };
    let cell_h = INPUT_SIDE / GRID_ROWS;
    let cell_w = INPUT_SIDE / GRID_COLS;
    let mut cells = Vec::with_capacity(IMAGE_TOKENS);
    for gy in 0..GRID_ROWS {
        for gx in 0..GRID_COLS {
            let mut acc = [0u64; FEATURE_DIM];
            for y in gy * cell_h..(gy + 1) * cell_h {
                for x in gx * cell_w..(gx + 1) * cell_w {
                    let p = img.get_pixel(x, y).0;
                    for c in 0..FEATURE_DIM {
                        acc[c] += p[c] as u64;
                    }
                }
            }
            let n = (cell_h * cell_w) as f64 * 255.0;
            cells.push(acc.map(|a| (a as f64 / n) as f32));
        }
    }
    Ok(cells)
}

/// Stand-in image tokenizer: grid-pooled colour features, each mapped to
/// its nearest codebook entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GridQuantizer {
    codebook: Vec<f32>,
}

impl GridQuantizer {
    pub fn new(codebook: Vec<f32>) -> Result<Self> {
        let k = codebook.len() / FEATURE_DIM;
        if k == 0 || !codebook.len().is_multiple_of(FEATURE_DIM) || k as u32 > IMAGE_CODEBOOK_SIZE {
            return Err(Error::InvalidInput(format!(
                "image codebook must hold 1..={IMAGE_CODEBOOK_SIZE} RGB centroids"
            )));
        }
        Ok(GridQuantizer { codebook })
    }

    /// Untrained default: the centres of a 32x16x16 RGB lattice (8192 entries).
    pub fn palette() -> Self {
        let mut codebook = Vec::with_capacity(IMAGE_CODEBOOK_SIZE as usize * FEATURE_DIM);
        for r in 0..32 {
            for g in 0..16 {
                for b in 0..16 {
                    codebook.push((r as f32 + 0.5) / 32.0);
                    codebook.push((g as f32 + 0.5) / 16.0);
                    codebook.push((b as f32 + 0.5) / 16.0);
                }
            }
        }
        GridQuantizer { codebook }
    }

    /// k-means over the grid cells of `images`.
    pub fn train(images: &[RgbImage], codebook_size: usize, seed: u64) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * IMAGE_TOKENS * FEATURE_DIM);
        for img in images {
            data.extend(grid_features(img)?.into_iter().flatten());
        }
        let frames = Frames::new(FEATURE_DIM, data)?;
        let config = RvqConfig { layers: 1, codebook_size, seed, ..Default::default() };
        let cb = Codebooks::train(&frames, &config)?;
        Self::new(cb.layer(0).to_vec())
    }

    /// Loads a one-layer, three-dimensional `RVQ1` codebook.
    pub fn from_codebooks(cb: &Codebooks) -> Result<Self> {
        if cb.layer_count() != 1 || cb.dim() != FEATURE_DIM {
            return Err(Error::InvalidInput("image codebook must have one layer of 3-D centroids".into()));
        }
        Self::new(cb.layer(0).to_vec())
    }

    pub fn to_codebooks(&self) -> Codebooks {
        Codebooks::from_centroids(vec![self.codebook.clone()], self.codebook_size(), FEATURE_DIM, 0)
            .expect("valid codebook")
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.len() / FEATURE_DIM
    }
}

impl ImageQuantizer for GridQuantizer {
    fn quantize(&self, image: &RgbImage) -> Result<ImageTokens> {
        let cells = grid_features(image)?;
        let codes: Vec<u16> = cells
            .iter()
            .map(|f| nearest(&self.codebook, FEATURE_DIM, f).0 as u16)
            .collect();
        ImageTokens::new(&codes)
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

/// Decodes an in-memory PNG or NetPBM image.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(img.to_rgb8())
}

/// Frame `i` is a cut when the L1 distance to frame `i-1`, normalized by
/// the two frames' combined L1 mass, exceeds `threshold`.
pub fn detect_scenes(features: &[Vec<f32>], threshold: f64) -> Vec<usize> {
    features
        .windows(2)
        .enumerate()
        .filter(|(_, w)| normalized_l1(&w[0], &w[1]) > threshold)
        .map(|(i, _)| i + 1)
        .collect()
}

fn normalized_l1(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    let mass: f64 = a.iter().chain(b).map(|x| (*x as f64).abs()).sum();
    if mass <= f64::EPSILON {
        0.0
    } else {
        diff / mass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FramePolicy {
    pub seconds_per_frame: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub scene_threshold: f64,
    pub context_budget: usize,
}

impl Default for FramePolicy {
    fn default() -> Self {
        FramePolicy {
            seconds_per_frame: 4.0,
            min_frames: 4,
            max_frames: 8,
            scene_threshold: 0.3,
            context_budget: 2800,
        }
    }
}

impl FramePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.seconds_per_frame.is_nan() || self.seconds_per_frame <= 0.0 || self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::InvalidConfiguration(format!("bad frame policy {self:?}")));
        }
        Ok(())
    }
}

/// Number of frames to keep and their timestamps (seconds).
///
/// `scene_cuts` are cut times in seconds. The count is the smallest of the
/// duration-derived count, the number of scene segments (when any cut
/// exists) and what the context budget can hold, clamped to
/// `[min_frames, max_frames]`; the budget bound always wins.
pub fn select_frames(duration_s: f64, text_token_len: usize, scene_cuts: &[f64], policy: &FramePolicy) -> Result<Vec<f64>> {
    policy.validate()?;
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(Error::InvalidInput(format!("video duration {duration_s} must be positive")));
    }
    let budget_frames = policy.context_budget.saturating_sub(text_token_len) / IMAGE_BLOCK_LEN;
    if budget_frames == 0 {
        return Err(Error::NoFramesFit { budget: policy.context_budget, text_tokens: text_token_len });
    }

    let mut bounds = vec![0.0];
    let mut cuts: Vec<f64> = scene_cuts.iter().copied().filter(|c| *c > 0.0 && *c < duration_s).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    bounds.extend(cuts);
    bounds.push(duration_s);
    let segments: Vec<(f64, f64)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();

    let by_duration = ((duration_s / policy.seconds_per_frame).ceil() as usize).max(1);
    let mut n = by_duration;
    if segments.len() > 1 {
        n = n.min(segments.len());
    }
    let n = n.clamp(policy.min_frames, policy.max_frames).min(budget_frames);

    if segments.len() == 1 {
        return Ok(uniform(0.0, duration_s, n));
    }
    Ok(place_in_segments(&segments, n))
}

fn uniform(start: f64, end: f64, n: usize) -> Vec<f64> {
    let step = (end - start) / n as f64;
    (0..n).map(|k| start + (k as f64 + 0.5) * step).collect()
}

/// Midpoint placement: with fewer frames than segments the longest
/// segments win; extra frames go to segments by largest remainder of
/// their duration share.
fn place_in_segments(segments: &[(f64, f64)], n: usize) -> Vec<f64> {
    let len = |s: &(f64, f64)| s.1 - s.0;
    let mut alloc = vec![0usize; segments.len()];
    if n < segments.len() {
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.sort_by(|&a, &b| len(&segments[b]).partial_cmp(&len(&segments[a])).unwrap().then(a.cmp(&b)));
        for &i in &order[..n] {
            alloc[i] = 1;
        }
    } else {
        alloc.fill(1);
        let extra = n - segments.len();
        let total: f64 = segments.iter().map(len).sum();
        let quotas: Vec<f64> = segments.iter().map(|s| extra as f64 * len(s) / total).collect();
        let mut given = 0;
        for (a, q) in alloc.iter_mut().zip(&quotas) {
            *a += q.floor() as usize;
            given += q.floor() as usize;
        }
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra)
                .unwrap()
                .then(len(&segments[b]).partial_cmp(&len(&segments[a])).unwrap())
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(extra - given) {
            alloc[i] += 1;
        }
    }
    segments
        .iter()
        .zip(&alloc)
        .flat_map(|(s, &m)| if m == 0 { Vec::new() } else { uniform(s.0, s.1, m) })
        .collect()
}

/// Converts frame-index cuts of an evenly sampled video to seconds.
pub fn cut_times(cuts: &[usize], frame_count: usize, duration_s: f64) -> Vec<f64> {
    if frame_count == 0 {
        return Vec::new();
    }
    cuts.iter().map(|&i| i as f64 * duration_s / frame_count as f64).collect()
}
