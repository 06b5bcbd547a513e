//! JSON Lines manifests and the ingestion filters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix::SourceType;
use crate::templates::{Direction, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    ImageTextPair,
    LanguageOnly,
    ImageTextInterleaved,
    VideoTextPair,
    VideoTextInterleaved,
    SpeechTextPair,
    Conversation,
}

/// One element of an interleaved document or a chat turn. Exactly one
/// field is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speech: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTurn {
    pub role: Role,
    pub content: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: EntryKind,
    /// Image file, WAV file, or the evenly spaced frame images of a video.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payload: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Pair direction; drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Interleaved documents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Item>>,
    /// Conversations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns: Option<Vec<ManifestTurn>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default)]
    pub speech_output: bool,
    /// Mixing bucket for conversations (default language_only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_type: Option<SourceType>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, kind: EntryKind) -> Self {
        ManifestEntry {
            id: id.into(),
            kind,
            payload: Vec::new(),
            width: None,
            height: None,
            clip_score: None,
            duration_s: None,
            language: None,
            text: None,
            direction: None,
            segments: None,
            turns: None,
            system: None,
            speech_output: false,
            mix_type: None,
        }
    }

    pub fn source_type(&self) -> SourceType {
        match self.kind {
            EntryKind::ImageTextPair => SourceType::ImageTextPair,
            EntryKind::LanguageOnly => SourceType::LanguageOnly,
            EntryKind::ImageTextInterleaved | EntryKind::VideoTextPair | EntryKind::VideoTextInterleaved => {
                SourceType::InterleavedPlusVideo
            }
            EntryKind::SpeechTextPair => SourceType::SpeechText,
            EntryKind::Conversation => self.mix_type.unwrap_or(SourceType::LanguageOnly),
        }
    }

    pub(crate) fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidEntry { id: self.id.clone(), reason: reason.into() }
    }

    pub(crate) fn require<T: Copy>(&self, v: Option<T>, field: &str) -> Result<T> {
        v.ok_or_else(|| self.invalid(format!("missing {field}")))
    }
}

/// Parses a JSON Lines manifest; blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::InvalidEntry {
            id: format!("line {}", n + 1),
            reason: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Image-text pairs scoring below this are dropped.
    pub pair_clip_threshold: f64,
    /// Interleaved documents scoring below this are dropped.
    pub interleaved_clip_threshold: f64,
    pub max_aspect_ratio: f64,
    pub min_side: u32,
    pub language: String,
    pub max_speech_s: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            pair_clip_threshold: 0.27,
            interleaved_clip_threshold: 0.25,
            max_aspect_ratio: 2.0,
            min_side: 224,
            language: "en".into(),
            max_speech_s: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    AspectRatio { ratio: f64 },
    TooSmall { width: u32, height: u32 },
    Language { language: String },
    LowClipScore { score: f64, threshold: f64 },
    TooLong { duration_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

pub fn filter(entry: &ManifestEntry, cfg: &FilterConfig) -> Result<FilterDecision> {
    use FilterDecision::*;
    match entry.kind {
        EntryKind::ImageTextPair => {
            let w = entry.require(entry.width, "width")?;
            let h = entry.require(entry.height, "height")?;
            let score = entry.require(entry.clip_score, "clip_score")?;
            let language = entry.language.as_deref().ok_or_else(|| entry.invalid("missing language"))?;
            if w == 0 || h == 0 {
                return Err(entry.invalid("zero image dimension"));
            }
            let ratio = w.max(h) as f64 / w.min(h) as f64;
            if ratio > cfg.max_aspect_ratio {
                return Ok(Drop(DropReason::AspectRatio { ratio }));
            }
            if w.min(h) < cfg.min_side {
                return Ok(Drop(DropReason::TooSmall { width: w, height: h }));
            }
            if !language.eq_ignore_ascii_case(&cfg.language) {
                return Ok(Drop(DropReason::Language { language: language.into() }));
            }
            if score < cfg.pair_clip_threshold {
                return Ok(Drop(DropReason::LowClipScore { score, threshold: cfg.pair_clip_threshold }));
            }
            Ok(Keep)
        }
        EntryKind::ImageTextInterleaved => {
            let score = entry.require(entry.clip_score, "clip_score")?;
            if score < cfg.interleaved_clip_threshold {
                return Ok(Drop(DropReason::LowClipScore { score, threshold: cfg.interleaved_clip_threshold }));
            }
            Ok(Keep)
        }
        EntryKind::SpeechTextPair => {
            let d = entry.require(entry.duration_s, "duration_s")?;
            if !d.is_finite() || d < 0.0 {
                return Err(entry.invalid(format!("bad duration {d}")));
            }
            if d > cfg.max_speech_s {
                return Ok(Drop(DropReason::TooLong { duration_s: d }));
            }
            Ok(Keep)
        }
        _ => Ok(Keep),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: Vec<(String, DropReason)>,
}

/// Keeps entries passing [`filter`], in order.
pub fn filter_manifest(entries: Vec<ManifestEntry>, cfg: &FilterConfig) -> Result<(Vec<ManifestEntry>, FilterReport)> {
    let mut kept = Vec::with_capacity(entries.len());
    let mut report = FilterReport::default();
    for e in entries {
        match filter(&e, cfg)? {
            FilterDecision::Keep => kept.push(e),
            FilterDecision::Drop(r) => report.dropped.push((e.id.clone(), r)),
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}
