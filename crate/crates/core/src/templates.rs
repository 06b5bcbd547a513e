//! Prompt templates for paired pretraining data and the chat layout for SFT.
//!
//! A template is literal text with two slots: one modality slot
//! (`{image}`, `{video}` or `{speech}`) that receives a pre-serialized
//! token block, and one text slot (`{caption}`, `{description}` or
//! `{transcription}`) that receives tokenized text.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix::Stage;
use crate::packer::SupervisionSpec;
use crate::sample::{Sample, SegmentKind};
use crate::text::TextTokenizer;
use crate::vocab::{Special, TokenId, VocabLayout};

pub const IMAGE_TO_TEXT: &str = "{image} The caption of this image is: {caption}";
pub const TEXT_TO_IMAGE: &str = "Please generate an image of \"{caption}\": {image}";
pub const VIDEO_TO_TEXT: &str = "Please describe the following video: {image} {description}";
pub const TEXT_TO_VIDEO: &str = "Please generate a video for \"{description}\": {video}";
pub const ASR: &str = "{speech} Transcribe this speech: {transcription}";
pub const ASR_STAGE_III: &str = "{speech} The transcription of this speech is: {transcription}";
pub const TTS: &str = "Please generate a speech of \"{transcription}\": {speech}";

pub const SYSTEM_PROMPT: &str = "You are MIO, an AI assistant capable of understanding and generating images, text, videos, and speech, selecting the appropriate modality according to the context.";
pub const SPEECH_ONLY_SYSTEM_PROMPT: &str = "You are MIO, an AI assistant capable of understanding images, text, videos, and speech, and generating speech. Please respond to the user with speech only, starting with <spch> and ending with </spch>.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    ImageCaption,
    VideoDescription,
    SpeechTranscript,
}

impl FromStr for PairKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_caption" => Ok(PairKind::ImageCaption),
            "video_description" => Ok(PairKind::VideoDescription),
            "speech_transcript" => Ok(PairKind::SpeechTranscript),
            _ => Err(Error::InvalidRecord(format!("unknown pair kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Modality first, text is the target (captioning, ASR).
    ToText,
    /// Text first, modality is the target (generation, TTS).
    ToModality,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedRecord {
    pub kind: PairKind,
    /// Serialized, wrapped modality tokens (one or more image blocks, or one
    /// speech block).
    pub payload: Vec<TokenId>,
    pub text: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Literal(String),
    Modality,
    Text,
}

/// A parsed prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    parts: Vec<Part>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfiguration(format!("template {source:?}: {m}"));
        let mut parts = Vec::new();
        let mut rest = source;
        let (mut modality, mut text) = (0, 0);
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(Part::Literal(rest[..open].to_string()));
            }
            let close = rest[open..].find('}').ok_or_else(|| bad("unterminated slot".into()))? + open;
            let name = &rest[open + 1..close];
            match name {
                "image" | "video" | "speech" => {
                    modality += 1;
                    parts.push(Part::Modality);
                }
                "caption" | "description" | "transcription" => {
                    text += 1;
                    parts.push(Part::Text);
                }
                _ => return Err(bad(format!("unknown slot {{{name}}}"))),
            }
            rest = &rest[close + 1..];
        }
        if rest.contains('}') {
            return Err(bad("stray '}'".into()));
        }
        if !rest.is_empty() {
            parts.push(Part::Literal(rest.to_string()));
        }
        if modality != 1 || text != 1 {
            return Err(bad("needs exactly one modality slot and one text slot".into()));
        }
        Ok(Template { source: source.to_string(), parts })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Literal text with both slots removed.
    pub fn constant_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Literal(s) => Some(s.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self, payload: &[TokenId], payload_kind: SegmentKind, text: &str, tok: &dyn TextTokenizer) -> Sample {
        let mut sample = Sample::default();
        for part in &self.parts {
            match part {
                Part::Literal(s) => {
                    sample.push(SegmentKind::Text, &tok.encode(s));
                }
                Part::Modality => {
                    sample.push(payload_kind, payload);
                }
                Part::Text => {
                    sample.push(SegmentKind::Text, &tok.encode(text));
                }
            }
        }
        sample
    }
}

/// Override document for the template set; absent fields keep defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateOverrides {
    pub image_to_text: Option<String>,
    pub text_to_image: Option<String>,
    pub video_to_text: Option<String>,
    pub text_to_video: Option<String>,
    pub asr: Option<String>,
    pub asr_stage_iii: Option<String>,
    pub tts: Option<String>,
    pub system_prompt: Option<String>,
    pub speech_only_system_prompt: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub image_to_text: Template,
    pub text_to_image: Template,
    pub video_to_text: Template,
    pub text_to_video: Template,
    pub asr: Template,
    pub asr_stage_iii: Template,
    pub tts: Template,
    pub system_prompt: String,
    pub speech_only_system_prompt: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::with_overrides(&TemplateOverrides::default()).expect("built-in templates parse")
    }
}

impl TemplateSet {
    pub fn with_overrides(o: &TemplateOverrides) -> Result<Self> {
        let pick = |v: &Option<String>, d: &str| Template::parse(v.as_deref().unwrap_or(d));
        Ok(TemplateSet {
            image_to_text: pick(&o.image_to_text, IMAGE_TO_TEXT)?,
            text_to_image: pick(&o.text_to_image, TEXT_TO_IMAGE)?,
            video_to_text: pick(&o.video_to_text, VIDEO_TO_TEXT)?,
            text_to_video: pick(&o.text_to_video, TEXT_TO_VIDEO)?,
            asr: pick(&o.asr, ASR)?,
            asr_stage_iii: pick(&o.asr_stage_iii, ASR_STAGE_III)?,
            tts: pick(&o.tts, TTS)?,
            system_prompt: o.system_prompt.clone().unwrap_or_else(|| SYSTEM_PROMPT.into()),
            speech_only_system_prompt: o
                .speech_only_system_prompt
                .clone()
                .unwrap_or_else(|| SPEECH_ONLY_SYSTEM_PROMPT.into()),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let o: TemplateOverrides =
            serde_json::from_str(s).map_err(|e| Error::InvalidConfiguration(format!("template overrides: {e}")))?;
        Self::with_overrides(&o)
    }

    pub fn select(&self, kind: PairKind, direction: Direction, stage: Stage) -> &Template {
        match (kind, direction) {
            (PairKind::ImageCaption, Direction::ToText) => &self.image_to_text,
            (PairKind::ImageCaption, Direction::ToModality) => &self.text_to_image,
            (PairKind::VideoDescription, Direction::ToText) => &self.video_to_text,
            (PairKind::VideoDescription, Direction::ToModality) => &self.text_to_video,
            (PairKind::SpeechTranscript, Direction::ToText) if stage == Stage::III => &self.asr_stage_iii,
            (PairKind::SpeechTranscript, Direction::ToText) => &self.asr,
            (PairKind::SpeechTranscript, Direction::ToModality) => &self.tts,
        }
    }
}

fn check_payload(record: &PairedRecord, layout: &VocabLayout) -> Result<SegmentKind> {
    let (open, close, kind) = match record.kind {
        PairKind::ImageCaption | PairKind::VideoDescription => {
            (Special::ImageStart, Special::ImageEnd, SegmentKind::Image)
        }
        PairKind::SpeechTranscript => (Special::SpeechStart, Special::SpeechEnd, SegmentKind::Speech),
    };
    let p = &record.payload;
    if p.len() < 2 || p[0] != layout.special_id(open) || p[p.len() - 1] != layout.special_id(close) {
        return Err(Error::InvalidRecord(format!(
            "{:?} payload must be wrapped in {open} .. {close}",
            record.kind
        )));
    }
    Ok(kind)
}

pub fn render_pretrain(
    record: &PairedRecord,
    stage: Stage,
    templates: &TemplateSet,
    layout: &VocabLayout,
    tok: &dyn TextTokenizer,
) -> Result<Sample> {
    let kind = check_payload(record, layout)?;
    let template = templates.select(record.kind, record.direction, stage);
    Ok(template.render(&record.payload, kind, &record.text, tok))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Content {
    Text(String),
    /// Wrapped image block(s).
    Image(Vec<TokenId>),
    /// Wrapped speech block.
    Speech(Vec<TokenId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub content: Vec<Content>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Conversation {
    /// Explicit system prompt; when absent the task decides.
    pub system: Option<String>,
    /// Speech-generation or TTS task: the speech-only system prompt applies.
    pub speech_output: bool,
    pub turns: Vec<Turn>,
}

/// Chat layout:
///
/// ```text
/// <start>system\n{system}<end>\n<start>user\n{..}<end>\n<start>assistant\n{..}<end>\n
/// ```
///
/// Each assistant turn's content plus its closing `<end>` marker is one
/// supervised span.
pub fn render_sft(conv: &Conversation, templates: &TemplateSet, tok: &dyn TextTokenizer) -> Result<(Sample, SupervisionSpec)> {
    if conv.turns.is_empty() {
        return Err(Error::InvalidConversation("no turns".into()));
    }
    for (i, turn) in conv.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if turn.role != expected {
            return Err(Error::InvalidConversation(format!(
                "turn {i} is {:?}, expected {expected:?}",
                turn.role
            )));
        }
    }
    if conv.turns.last().map(|t| t.role) != Some(Role::Assistant) {
        return Err(Error::InvalidConversation("conversation must end with an assistant turn".into()));
    }

    let markers = tok.chat_markers();
    let system = match (&conv.system, conv.speech_output) {
        (Some(s), _) => s.as_str(),
        (None, true) => templates.speech_only_system_prompt.as_str(),
        (None, false) => templates.system_prompt.as_str(),
    };
    let mut sample = Sample::default();
    let mut spans: Vec<Range<usize>> = Vec::new();
    let header = |sample: &mut Sample, role: &str| {
        sample.push(SegmentKind::Markup, &[markers.turn_start]);
        sample.push(SegmentKind::Markup, &tok.encode(&format!("{role}\n")));
    };

    header(&mut sample, "system");
    sample.push(SegmentKind::Text, &tok.encode(system));
    sample.push(SegmentKind::Markup, &[markers.turn_end]);
    sample.push(SegmentKind::Markup, &tok.encode("\n"));

    for turn in &conv.turns {
        header(&mut sample, turn.role.name());
        let start = sample.len();
        for c in &turn.content {
            match c {
                Content::Text(s) => sample.push(SegmentKind::Text, &tok.encode(s)),
                Content::Image(ids) => sample.push(SegmentKind::Image, ids),
                Content::Speech(ids) => sample.push(SegmentKind::Speech, ids),
            };
        }
        sample.push(SegmentKind::Markup, &[markers.turn_end]);
        if turn.role == Role::Assistant {
            spans.push(start..sample.len());
        }
        sample.push(SegmentKind::Markup, &tok.encode("\n"));
    }
    sample.supervision = Some(spans.clone());
    Ok((sample, SupervisionSpec::SftAssistantOnly(vec![spans])))
}
