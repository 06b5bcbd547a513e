//! Fixed-window sample packing.
//!
//! Samples are concatenated into windows of `W` ids. Attention is causal
//! within a sample and blocked across samples; the mask is carried as the
//! boundary table `[0 = s0 < s1 < .. < sn = pad_start <= W]`, never as a
//! dense matrix. Positions at or after `pad_start` hold the pad id and are
//! never supervised.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub const DEFAULT_WINDOW: usize = 2800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PackStrategy {
    /// Order-preserving: close the pack when the next sample does not fit.
    #[default]
    Greedy,
    /// Each sample goes to the open pack with the least room that fits it.
    BestFit,
}

#[derive(Debug, Clone)]
pub struct PackConfig {
    pub window: usize,
    pub pad_id: TokenId,
    pub strategy: PackStrategy,
}

impl PackConfig {
    pub fn new(window: usize, pad_id: TokenId) -> Self {
        PackConfig { window, pad_id, strategy: PackStrategy::Greedy }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    tokens: Vec<TokenId>,
    boundaries: Vec<u32>,
    loss_mask: Vec<bool>,
}

impl PackedBatch {
    /// Reassemble a batch from stored parts, checking every structural
    /// invariant.
    pub fn from_parts(tokens: Vec<TokenId>, boundaries: Vec<u32>, loss_mask: Vec<bool>, pad_id: TokenId) -> Result<Self> {
        let b = PackedBatch { tokens, boundaries, loss_mask };
        b.check(pad_id)?;
        Ok(b)
    }

    pub fn check(&self, pad_id: TokenId) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRecord(m));
        let w = self.tokens.len();
        if self.loss_mask.len() != w {
            return bad(format!("loss mask has {} entries for a {w}-token window", self.loss_mask.len()));
        }
        if self.boundaries.first() != Some(&0) {
            return bad("boundary table must start at 0".into());
        }
        if self.boundaries.windows(2).any(|p| p[0] >= p[1]) {
            return bad("boundaries must be strictly increasing".into());
        }
        let pad_start = self.pad_start();
        if pad_start > w {
            return bad(format!("last boundary {pad_start} exceeds window {w}"));
        }
        if let Some(i) = self.tokens[..pad_start].iter().position(|&t| t == pad_id) {
            return bad(format!("pad id inside sample data at position {i}"));
        }
        if let Some(i) = self.tokens[pad_start..].iter().position(|&t| t != pad_id) {
            return bad(format!("non-pad id in tail at position {}", pad_start + i));
        }
        if self.loss_mask[pad_start..].iter().any(|&m| m) {
            return bad("pad positions must not be supervised".into());
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn boundaries(&self) -> &[u32] {
        &self.boundaries
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    pub fn pad_start(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0) as usize
    }

    pub fn pad_len(&self) -> usize {
        self.window() - self.pad_start()
    }

    pub fn sample_count(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    pub fn sample_range(&self, i: usize) -> Range<usize> {
        self.boundaries[i] as usize..self.boundaries[i + 1] as usize
    }

    pub fn samples(&self) -> impl Iterator<Item = &[TokenId]> {
        (0..self.sample_count()).map(|i| &self.tokens[self.sample_range(i)])
    }

    /// Index of the sample owning position `pos`, or `None` for pad.
    pub fn sample_at(&self, pos: usize) -> Option<usize> {
        if pos >= self.pad_start() {
            return None;
        }
        Some(self.boundaries.partition_point(|&b| b as usize <= pos) - 1)
    }

    /// May position `i` attend to position `j`?
    pub fn attention_allowed(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        match (self.sample_at(i), self.sample_at(j)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// Positions restart from 0 at each sample; pad positions are 0.
    pub fn position_ids(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.window()];
        for i in 0..self.sample_count() {
            let r = self.sample_range(i);
            for (k, p) in out[r.clone()].iter_mut().enumerate() {
                *p = k as u32;
            }
        }
        out
    }
}

/// Which positions feed the next-token loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupervisionSpec {
    /// Every non-pad position.
    PretrainAll,
    /// Assistant-response spans, one list per sample, offsets relative to
    /// the sample start.
    SftAssistantOnly(Vec<Vec<Range<usize>>>),
}

impl SupervisionSpec {
    fn spans_for(&self, sample: usize) -> Result<Option<&[Range<usize>]>> {
        match self {
            SupervisionSpec::PretrainAll => Ok(None),
            SupervisionSpec::SftAssistantOnly(all) => all
                .get(sample)
                .map(|v| Some(v.as_slice()))
                .ok_or_else(|| Error::InvalidSpec(format!("no supervision spans for sample {sample}"))),
        }
    }
}

pub fn build_loss_mask(batch: &PackedBatch, spec: &SupervisionSpec) -> Result<Vec<bool>> {
    if let SupervisionSpec::SftAssistantOnly(all) = spec {
        if all.len() != batch.sample_count() {
            return Err(Error::InvalidSpec(format!(
                "{} span lists for {} samples",
                all.len(),
                batch.sample_count()
            )));
        }
    }
    let mut mask = vec![false; batch.window()];
    for i in 0..batch.sample_count() {
        let r = batch.sample_range(i);
        fill_mask(&mut mask[r], spec.spans_for(i)?)?;
    }
    Ok(mask)
}

fn fill_mask(mask: &mut [bool], spans: Option<&[Range<usize>]>) -> Result<()> {
    match spans {
        None => mask.fill(true),
        Some(spans) => {
            for s in spans {
                if s.start > s.end || s.end > mask.len() {
                    return Err(Error::InvalidSpec(format!(
                        "span {s:?} lies outside a {}-token sample",
                        mask.len()
                    )));
                }
                mask[s.clone()].fill(true);
            }
        }
    }
    Ok(())
}

/// Incrementally filled pack.
#[derive(Debug, Clone)]
pub struct PackBuilder {
    window: usize,
    tokens: Vec<TokenId>,
    boundaries: Vec<u32>,
    loss_mask: Vec<bool>,
}

impl PackBuilder {
    pub fn new(window: usize) -> Self {
        PackBuilder {
            window,
            tokens: Vec::with_capacity(window),
            boundaries: vec![0],
            loss_mask: Vec::with_capacity(window),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.window - self.tokens.len()
    }

    pub fn fits(&self, len: usize) -> bool {
        len <= self.remaining()
    }

    /// Appends one sample. The caller checks `fits` first.
    pub fn add(&mut self, tokens: &[TokenId], spans: Option<&[Range<usize>]>) -> Result<()> {
        assert!(self.fits(tokens.len()), "sample does not fit the open pack");
        let start = self.tokens.len();
        self.loss_mask.resize(start + tokens.len(), false);
        fill_mask(&mut self.loss_mask[start..], spans)?;
        self.tokens.extend_from_slice(tokens);
        self.boundaries.push(self.tokens.len() as u32);
        Ok(())
    }

    pub fn finish(mut self, pad_id: TokenId) -> PackedBatch {
        self.tokens.resize(self.window, pad_id);
        self.loss_mask.resize(self.window, false);
        PackedBatch { tokens: self.tokens, boundaries: self.boundaries, loss_mask: self.loss_mask }
    }
}

/// Streaming greedy packer.
#[derive(Debug)]
pub struct Packer {
    config: PackConfig,
    open: PackBuilder,
    pushed: usize,
}

impl Packer {
    pub fn new(config: PackConfig) -> Result<Self> {
        if config.window == 0 || config.window > u32::MAX as usize {
            return Err(Error::InvalidConfiguration(format!("window {} unsupported", config.window)));
        }
        let open = PackBuilder::new(config.window);
        Ok(Packer { config, open, pushed: 0 })
    }

    /// Adds a sample; returns the previous pack if this sample closed it.
    pub fn push(&mut self, tokens: &[TokenId], spans: Option<&[Range<usize>]>) -> Result<Option<PackedBatch>> {
        let index = self.pushed;
        check_sample(index, tokens, self.config.window)?;
        self.pushed += 1;
        let mut closed = None;
        if !self.open.fits(tokens.len()) {
            let full = std::mem::replace(&mut self.open, PackBuilder::new(self.config.window));
            closed = Some(full.finish(self.config.pad_id));
        }
        self.open.add(tokens, spans)?;
        Ok(closed)
    }

    pub fn finish(self) -> Option<PackedBatch> {
        (!self.open.is_empty()).then(|| self.open.finish(self.config.pad_id))
    }
}

fn check_sample(index: usize, tokens: &[TokenId], window: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptySample { index });
    }
    if tokens.len() > window {
        return Err(Error::SampleTooLong { index, len: tokens.len(), window });
    }
    Ok(())
}

pub fn pack<S: AsRef<[TokenId]>>(samples: &[S], config: &PackConfig, spec: &SupervisionSpec) -> Result<Vec<PackedBatch>> {
    if let SupervisionSpec::SftAssistantOnly(all) = spec {
        if all.len() != samples.len() {
            return Err(Error::InvalidSpec(format!("{} span lists for {} samples", all.len(), samples.len())));
        }
    }
    match config.strategy {
        PackStrategy::Greedy => {
            let mut packer = Packer::new(config.clone())?;
            let mut out = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                out.extend(packer.push(s.as_ref(), spec.spans_for(i)?)?);
            }
            out.extend(packer.finish());
            Ok(out)
        }
        PackStrategy::BestFit => pack_best_fit(samples, config, spec),
    }
}

fn pack_best_fit<S: AsRef<[TokenId]>>(samples: &[S], config: &PackConfig, spec: &SupervisionSpec) -> Result<Vec<PackedBatch>> {
    Packer::new(config.clone())?;
    let mut bins: Vec<PackBuilder> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let tokens = s.as_ref();
        check_sample(i, tokens, config.window)?;
        let target = bins
            .iter()
            .enumerate()
            .filter(|(_, b)| b.fits(tokens.len()))
            .min_by_key(|(k, b)| (b.remaining(), *k))
            .map(|(k, _)| k);
        let k = match target {
            Some(k) => k,
            None => {
                bins.push(PackBuilder::new(config.window));
                bins.len() - 1
            }
        };
        bins[k].add(tokens, spec.spans_for(i)?)?;
    }
    Ok(bins.into_iter().map(|b| b.finish(config.pad_id)).collect())
}
