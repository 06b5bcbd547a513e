//! Staged data mixing.
//!
//! A [`MixSpec`] assigns each source type an integer batch count per
//! period. The schedule is periodic: one period is laid out by smooth
//! weighted round-robin (each step every type earns its ratio in credit,
//! the richest type is emitted and pays back the period), so every window
//! of `period` consecutive entries holds exactly the ratio counts.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    ImageTextPair,
    LanguageOnly,
    InterleavedPlusVideo,
    SpeechText,
}

impl SourceType {
    pub const ALL: [SourceType; 4] = [
        SourceType::ImageTextPair,
        SourceType::LanguageOnly,
        SourceType::InterleavedPlusVideo,
        SourceType::SpeechText,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SourceType::ImageTextPair => "image_text_pair",
            SourceType::LanguageOnly => "language_only",
            SourceType::InterleavedPlusVideo => "interleaved_plus_video",
            SourceType::SpeechText => "speech_text",
        }
    }
}

impl fmt::Display for SourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            _ => Err(Error::InvalidConfiguration(format!("unknown stage {s:?}"))),
        }
    }
}

/// Batch counts per period, indexed by [`SourceType::index`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub ratios: [u32; 4],
    /// Shuffle the order inside each period (seeded). Only aligned windows
    /// keep the exact counts in this mode.
    #[serde(default)]
    pub shuffle_within_period: bool,
}

impl MixSpec {
    pub fn new(ratios: [u32; 4]) -> Result<Self> {
        let spec = MixSpec { stage: None, ratios, shuffle_within_period: false };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-stage presets (image-text pair : language : interleaved+video : speech).
    pub fn preset(stage: Stage) -> Self {
        let ratios = match stage {
            Stage::I => [12, 2, 0, 2],
            Stage::II => [2, 2, 6, 6],
            Stage::III => [2, 1, 1, 12],
        };
        MixSpec { stage: Some(stage), ratios, shuffle_within_period: false }
    }

    pub fn validate(&self) -> Result<()> {
        let period: u64 = self.ratios.iter().map(|&r| r as u64).sum();
        if period == 0 {
            return Err(Error::InvalidSpec("mixing ratios are all zero".into()));
        }
        if period > 1 << 20 {
            return Err(Error::InvalidSpec(format!("period {period} is too long")));
        }
        Ok(())
    }

    pub fn period(&self) -> usize {
        self.ratios.iter().map(|&r| r as usize).sum()
    }

    pub fn ratio(&self, t: SourceType) -> u32 {
        self.ratios[t.index()]
    }

    /// Share of batches drawn from `t`.
    pub fn share(&self, t: SourceType) -> f64 {
        self.ratio(t) as f64 / self.period() as f64
    }

    /// One period in canonical (unshuffled) order.
    pub fn base_period(&self) -> Result<Vec<SourceType>> {
        self.validate()?;
        let period = self.period() as i64;
        let mut credit = [0i64; 4];
        let mut out = Vec::with_capacity(period as usize);
        for _ in 0..period {
            for (c, &r) in credit.iter_mut().zip(&self.ratios) {
                *c += r as i64;
            }
            // first maximum wins ties
            let mut best = 0;
            for i in 1..4 {
                if credit[i] > credit[best] {
                    best = i;
                }
            }
            credit[best] -= period;
            out.push(SourceType::ALL[best]);
        }
        Ok(out)
    }
}

/// The first `n` entries of the schedule.
pub fn plan(spec: &MixSpec, n: usize, seed: u64) -> Result<Vec<SourceType>> {
    let mut state = SchedulerState::new(spec.clone(), seed)?;
    Ok((0..n).map(|_| state.next_source()).collect())
}

/// Resumable cursor over the schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerState {
    spec: MixSpec,
    step: u64,
    counts: [u64; 4],
    seed: u64,
    #[serde(skip)]
    cache: Option<(u64, Vec<SourceType>)>,
}

impl SchedulerState {
    pub fn new(spec: MixSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(SchedulerState { spec, step: 0, counts: [0; 4], seed, cache: None })
    }

    pub fn spec(&self) -> &MixSpec {
        &self.spec
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn counts(&self) -> [u64; 4] {
        self.counts
    }

    fn period_order(&mut self, period_index: u64) -> &[SourceType] {
        let stale = self.cache.as_ref().is_none_or(|(k, _)| *k != period_index);
        if stale {
            let mut order = self.spec.base_period().expect("validated spec");
            if self.spec.shuffle_within_period {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ period_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                order.shuffle(&mut rng);
            }
            self.cache = Some((period_index, order));
        }
        &self.cache.as_ref().unwrap().1
    }

    /// Source type at an absolute step, without advancing.
    pub fn source_at(&mut self, step: u64) -> SourceType {
        let period = self.spec.period() as u64;
        self.period_order(step / period)[(step % period) as usize]
    }

    pub fn next_source(&mut self) -> SourceType {
        let t = self.source_at(self.step);
        self.step += 1;
        self.counts[t.index()] += 1;
        t
    }

    /// Steps owned by `worker` when `workers` loaders split the schedule.
    pub fn worker_steps(worker: u64, workers: u64) -> impl Iterator<Item = u64> {
        assert!(workers > 0 && worker < workers);
        (worker..).step_by(workers as usize)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    /// Restore a checkpoint, rejecting states whose counts disagree with
    /// the step counter.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut state: SchedulerState =
            serde_json::from_str(s).map_err(|e| Error::InvalidState(e.to_string()))?;
        state.spec.validate().map_err(|e| Error::InvalidState(e.to_string()))?;
        let period = state.spec.period() as u64;
        let full = state.step / period;
        let mut expected = [0u64; 4];
        for (e, &r) in expected.iter_mut().zip(&state.spec.ratios) {
            *e = full
                .checked_mul(r as u64)
                .ok_or_else(|| Error::InvalidState("step counter overflows".into()))?;
        }
        for k in 0..state.step % period {
            let t = state.source_at(full * period + k);
            expected[t.index()] += 1;
        }
        if expected != state.counts {
            return Err(Error::InvalidState(format!(
                "counts {:?} inconsistent with step {} (expected {expected:?})",
                state.counts, state.step
            )));
        }
        Ok(state)
    }
}

impl Iterator for SchedulerState {
    type Item = SourceType;

    fn next(&mut self) -> Option<SourceType> {
        Some(self.next_source())
    }
}
