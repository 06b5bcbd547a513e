//! Speech code serialization: `<spch> body </spch>`.
//!
//! Body layouts for codes `a` (content) and `b c d` (timbre), `T` frames:
//!
//! * content only: `a1 .. aT`
//! * sequential:   `a1 .. aT b1 .. bT c1 .. cT d1 .. dT`
//! * alternating:  `a1 b1 c1 d1 a2 b2 c2 d2 ..`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::{SpeechCodes, DEFAULT_FRAME_RATE};
use crate::vocab::{Special, Token, TokenId, VocabLayout, SPEECH_LAYERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechMode {
    /// Understanding inputs: timbre layers dropped.
    ContentOnly,
    /// Generation targets: codebook-major.
    FullSequential,
    /// Frame-major; ablation only.
    FullAlternating,
}

impl SpeechMode {
    pub fn layers(self) -> usize {
        match self {
            SpeechMode::ContentOnly => 1,
            _ => SPEECH_LAYERS as usize,
        }
    }
}

pub fn serialize_speech(codes: &SpeechCodes, mode: SpeechMode, layout: &VocabLayout) -> Result<Vec<TokenId>> {
    let full = SPEECH_LAYERS as usize;
    if mode != SpeechMode::ContentOnly && codes.layers() != full {
        return Err(Error::InvalidInput(format!(
            "{mode:?} needs exactly {full} layers, got {}",
            codes.layers()
        )));
    }
    let t = codes.frames();
    let mut out = Vec::with_capacity(mode.layers() * t + 2);
    out.push(layout.special_id(Special::SpeechStart));
    let enc = |layer: usize, code: u16| layout.encode(Token::Speech { layer: layer as u8, code });
    match mode {
        SpeechMode::ContentOnly => {
            for &c in codes.layer(0) {
                out.push(enc(0, c)?);
            }
        }
        SpeechMode::FullSequential => {
            for layer in 0..full {
                for &c in codes.layer(layer) {
                    out.push(enc(layer, c)?);
                }
            }
        }
        SpeechMode::FullAlternating => {
            for frame in 0..t {
                for layer in 0..full {
                    out.push(enc(layer, codes.layer(layer)[frame])?);
                }
            }
        }
    }
    out.push(layout.special_id(Special::SpeechEnd));
    Ok(out)
}

/// Inverse of [`serialize_speech`], inferring the mode from the layer
/// pattern. At `T = 1` both full layouts coincide and the sequential
/// reading is returned.
pub fn parse_speech(seq: &[TokenId], layout: &VocabLayout) -> Result<(SpeechCodes, SpeechMode)> {
    parse_speech_with_rate(seq, layout, DEFAULT_FRAME_RATE)
}

pub fn parse_speech_with_rate(
    seq: &[TokenId],
    layout: &VocabLayout,
    frame_rate: u32,
) -> Result<(SpeechCodes, SpeechMode)> {
    let malformed = |position: usize, reason: String| Error::MalformedStream { position, reason };
    let open = layout.special_id(Special::SpeechStart);
    let close = layout.special_id(Special::SpeechEnd);
    if seq.first() != Some(&open) {
        return Err(malformed(0, "speech block must start with <spch>".into()));
    }
    if seq.len() < 2 || seq[seq.len() - 1] != close {
        return Err(malformed(seq.len().saturating_sub(1), "speech block must end with </spch>".into()));
    }
    let body = &seq[1..seq.len() - 1];
    let mut layers = Vec::with_capacity(body.len());
    let mut codes = Vec::with_capacity(body.len());
    for (i, &id) in body.iter().enumerate() {
        match layout.classify(id) {
            Ok(Token::Speech { layer, code }) => {
                layers.push(layer as usize);
                codes.push(code);
            }
            Ok(other) => {
                return Err(malformed(i + 1, format!("{} inside speech block", other.class())));
            }
            Err(_) => return Err(malformed(i + 1, format!("id {id} is outside the vocabulary"))),
        }
    }

    if layers.iter().all(|&l| l == 0) {
        let codes = SpeechCodes::new(vec![codes], frame_rate)?;
        return Ok((codes, SpeechMode::ContentOnly));
    }

    let full = SPEECH_LAYERS as usize;
    let n = body.len();
    if !n.is_multiple_of(full) {
        return Err(malformed(
            seq.len() - 1,
            format!("{n} speech codes cannot form {full} equal layers"),
        ));
    }
    let t = n / full;
    let seq_mismatch = layers.iter().enumerate().position(|(i, &l)| l != i / t);
    let alt_mismatch = layers.iter().enumerate().position(|(i, &l)| l != i % full);
    let mode = match (seq_mismatch, alt_mismatch) {
        (None, _) => SpeechMode::FullSequential,
        (Some(_), None) => SpeechMode::FullAlternating,
        (Some(a), Some(b)) => {
            // report where the longer-lived reading broke
            return Err(malformed(
                a.max(b) + 1,
                "layer order matches neither sequential nor alternating layout".into(),
            ));
        }
    };
    let mut rows = vec![Vec::with_capacity(t); full];
    for (i, (&l, &c)) in layers.iter().zip(&codes).enumerate() {
        debug_assert!(mode != SpeechMode::FullSequential || l == i / t);
        rows[l].push(c);
    }
    Ok((SpeechCodes::new(rows, frame_rate)?, mode))
}

/// Wrapped token count for an utterance: `round(duration * rate)` frames,
/// times the mode's layer count, plus two wrappers.
pub fn speech_token_count(duration_s: f64, mode: SpeechMode, frame_rate: u32) -> Result<usize> {
    if !duration_s.is_finite() || duration_s < 0.0 {
        return Err(Error::InvalidInput(format!("duration {duration_s} must be a non-negative number")));
    }
    let frames = (duration_s * frame_rate as f64).round() as usize;
    Ok(mode.layers() * frames + 2)
}
