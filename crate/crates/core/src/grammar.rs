//! Finite-state grammar over token streams.
//!
//! Top level is free text interrupted by modality blocks:
//!
//! ```text
//! image  := <image> image_code{32} </image>
//! speech := <spch> a{T} (b{T} c{T} d{T})? </spch>      (sequential)
//!         | <spch> a{T} </spch> | <spch> (a b c d){T} </spch>   (alternating flag)
//! ```
//!
//! The content run of a sequential block ends at the first layer-1 code,
//! which fixes `T` for the three timbre sections. Video is a run of image
//! blocks. The same machine answers which token classes may come next,
//! for constrained decoding.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::visual::IMAGE_TOKENS;
use crate::vocab::{ClassSet, Special, TokenClass, TokenId, VocabLayout};

const LAST_LAYER: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GrammarState {
    TopLevel,
    InImage { consumed: u8 },
    InSpeechContent { frames: u32 },
    /// Sequential timbre section for `layer` (1..=3) holding `index` codes
    /// so far, of `frames` required.
    InSpeechTimbre { layer: u8, index: u32, frames: u32 },
    /// Alternating layout: `frames` complete groups, `next` layer expected.
    InSpeechAlternating { next: u8, frames: u32 },
}

impl GrammarState {
    fn in_block(self) -> bool {
        self != GrammarState::TopLevel
    }
}

impl fmt::Display for GrammarState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GrammarState::TopLevel => f.write_str("top-level"),
            GrammarState::InImage { consumed } => write!(f, "image[{consumed}/32]"),
            GrammarState::InSpeechContent { frames } => write!(f, "speech-content[{frames}]"),
            GrammarState::InSpeechTimbre { layer, index, frames } => {
                write!(f, "speech-timbre[layer {layer}, {index}/{frames}]")
            }
            GrammarState::InSpeechAlternating { next, frames } => {
                write!(f, "speech-alternating[frame {frames}, next layer {next}]")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarOptions {
    /// Accept frame-major speech instead of codebook-major.
    pub alternating_speech: bool,
}

/// Structured diagnostic for a rejected token (or premature end).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub position: usize,
    pub state: GrammarState,
    pub expected: Vec<TokenClass>,
    /// `None` at end of stream or for ids outside the vocabulary.
    pub found: Option<TokenClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<TokenId>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let expected: Vec<String> = self.expected.iter().map(ToString::to_string).collect();
        match (self.found, self.token) {
            (Some(c), _) => write!(f, "position {}: {c} not allowed in {}", self.position, self.state)?,
            (None, Some(id)) => write!(f, "position {}: id {id} outside the vocabulary", self.position)?,
            (None, None) => write!(f, "position {}: stream ends inside {}", self.position, self.state)?,
        }
        write!(f, "; expected one of [{}]", expected.join(", "))
    }
}

/// Transition on one token class; `None` is a violation.
pub fn step_class(state: GrammarState, class: TokenClass, opts: GrammarOptions) -> Option<GrammarState> {
    use GrammarState::*;
    use TokenClass::*;
    match (state, class) {
        (TopLevel, Text) => Some(TopLevel),
        (TopLevel, Special(self::Special::ImageStart)) => Some(InImage { consumed: 0 }),
        (TopLevel, Special(self::Special::SpeechStart)) => Some(InSpeechContent { frames: 0 }),

        (InImage { consumed }, ImageCode) if (consumed as usize) < IMAGE_TOKENS => Some(InImage { consumed: consumed + 1 }),
        (InImage { consumed }, Special(self::Special::ImageEnd)) if consumed as usize == IMAGE_TOKENS => Some(TopLevel),

        (InSpeechContent { frames }, SpeechCode(0)) => frames.checked_add(1).map(|frames| InSpeechContent { frames }),
        (InSpeechContent { .. }, Special(self::Special::SpeechEnd)) => Some(TopLevel),
        (InSpeechContent { frames }, SpeechCode(1)) if !opts.alternating_speech && frames >= 1 => {
            Some(InSpeechTimbre { layer: 1, index: 1, frames })
        }
        (InSpeechContent { frames: 1 }, SpeechCode(1)) if opts.alternating_speech => {
            Some(InSpeechAlternating { next: 2, frames: 0 })
        }

        (InSpeechTimbre { layer, index, frames }, SpeechCode(l)) if index < frames && l == layer => {
            Some(InSpeechTimbre { layer, index: index + 1, frames })
        }
        (InSpeechTimbre { layer, index, frames }, SpeechCode(l)) if index == frames && layer < LAST_LAYER && l == layer + 1 => {
            Some(InSpeechTimbre { layer: l, index: 1, frames })
        }
        (InSpeechTimbre { layer: LAST_LAYER, index, frames }, Special(self::Special::SpeechEnd)) if index == frames => {
            Some(TopLevel)
        }

        (InSpeechAlternating { next: 0, .. }, Special(self::Special::SpeechEnd)) => Some(TopLevel),
        (InSpeechAlternating { next, frames }, SpeechCode(l)) if l == next => {
            if next == LAST_LAYER {
                frames.checked_add(1).map(|frames| InSpeechAlternating { next: 0, frames })
            } else {
                Some(InSpeechAlternating { next: next + 1, frames })
            }
        }
        _ => None,
    }
}

/// Classes that [`step_class`] accepts from `state`, written out per
/// state rather than derived from the transition function.
pub fn allowed_next(state: GrammarState, opts: GrammarOptions) -> ClassSet {
    use GrammarState::*;
    let special = TokenClass::Special;
    let set = ClassSet::EMPTY;
    match state {
        TopLevel => set
            .with(TokenClass::Text)
            .with(special(Special::ImageStart))
            .with(special(Special::SpeechStart)),
        InImage { consumed } if consumed as usize == IMAGE_TOKENS => set.with(special(Special::ImageEnd)),
        InImage { consumed } if (consumed as usize) < IMAGE_TOKENS => set.with(TokenClass::ImageCode),
        InImage { .. } => set,
        InSpeechContent { frames } => {
            let mut s = set.with(special(Special::SpeechEnd));
            if frames < u32::MAX {
                s.insert(TokenClass::SpeechCode(0));
            }
            let timbre_ok = if opts.alternating_speech { frames == 1 } else { frames >= 1 };
            if timbre_ok {
                s.insert(TokenClass::SpeechCode(1));
            }
            s
        }
        InSpeechTimbre { layer, index, frames } => {
            if index < frames {
                set.with(TokenClass::SpeechCode(layer))
            } else if index == frames && layer < LAST_LAYER {
                set.with(TokenClass::SpeechCode(layer + 1))
            } else if index == frames && layer == LAST_LAYER {
                set.with(special(Special::SpeechEnd))
            } else {
                set
            }
        }
        InSpeechAlternating { next, frames } => {
            if next == 0 {
                let s = set.with(special(Special::SpeechEnd));
                if frames < u32::MAX {
                    s.with(TokenClass::SpeechCode(0))
                } else {
                    s
                }
            } else if next == LAST_LAYER && frames == u32::MAX {
                set
            } else {
                set.with(TokenClass::SpeechCode(next))
            }
        }
    }
}

/// Id ranges admissible next; a logit mask for constrained sampling.
pub fn allowed_token_ranges(state: GrammarState, opts: GrammarOptions, layout: &VocabLayout) -> Vec<Range<TokenId>> {
    let mut ranges: Vec<Range<TokenId>> = allowed_next(state, opts).iter().map(|c| layout.class_range(c)).collect();
    ranges.sort_by_key(|r| r.start);
    let mut merged: Vec<Range<TokenId>> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match merged.last_mut() {
            Some(last) if last.end == r.start => last.end = r.end,
            _ => merged.push(r),
        }
    }
    merged
}

/// Incremental validator with error recovery: after a violation inside a
/// block it skips to the next closer or opener, so one corrupted token
/// yields one diagnostic.
#[derive(Debug, Clone)]
pub struct StreamValidator<'a> {
    layout: &'a VocabLayout,
    opts: GrammarOptions,
    state: GrammarState,
    recovering: bool,
    position: usize,
    violations: Vec<Violation>,
}

impl<'a> StreamValidator<'a> {
    pub fn new(layout: &'a VocabLayout, opts: GrammarOptions) -> Self {
        StreamValidator {
            layout,
            opts,
            state: GrammarState::TopLevel,
            recovering: false,
            position: 0,
            violations: Vec::new(),
        }
    }

    pub fn state(&self) -> GrammarState {
        self.state
    }

    pub fn push(&mut self, id: TokenId) {
        let pos = self.position;
        self.position += 1;
        let class = self.layout.class_of(id).ok();
        if self.recovering {
            match class {
                Some(TokenClass::Special(Special::ImageEnd | Special::SpeechEnd)) => {
                    self.recovering = false;
                    self.state = GrammarState::TopLevel;
                }
                Some(c @ TokenClass::Special(Special::ImageStart | Special::SpeechStart)) => {
                    self.recovering = false;
                    self.state = step_class(GrammarState::TopLevel, c, self.opts).expect("opener");
                }
                _ => {}
            }
            return;
        }
        if let Some(next) = class.and_then(|c| step_class(self.state, c, self.opts)) {
            self.state = next;
            return;
        }
        self.violations.push(Violation {
            position: pos,
            state: self.state,
            expected: allowed_next(self.state, self.opts).iter().collect(),
            found: class,
            token: if class.is_none() { Some(id) } else { None },
        });
        match class {
            Some(c @ TokenClass::Special(Special::ImageStart | Special::SpeechStart)) => {
                self.state = step_class(GrammarState::TopLevel, c, self.opts).expect("opener");
            }
            Some(TokenClass::Special(Special::ImageEnd | Special::SpeechEnd)) => {
                self.state = GrammarState::TopLevel;
            }
            _ if self.state.in_block() => self.recovering = true,
            _ => {}
        }
    }

    /// Ends the stream; an open block is a violation.
    pub fn finish(mut self) -> Vec<Violation> {
        if self.state.in_block() && !self.recovering {
            self.violations.push(Violation {
                position: self.position,
                state: self.state,
                expected: allowed_next(self.state, self.opts).iter().collect(),
                found: None,
                token: None,
            });
        }
        self.violations
    }
}

pub fn validate_stream(tokens: &[TokenId], layout: &VocabLayout, opts: GrammarOptions) -> Vec<Violation> {
    let mut v = StreamValidator::new(layout, opts);
    for &t in tokens {
        v.push(t);
    }
    v.finish()
}

/// Single-step transition on a concrete id.
pub fn step(state: GrammarState, id: TokenId, layout: &VocabLayout, opts: GrammarOptions) -> Result<GrammarState, Violation> {
    let class = layout.class_of(id).ok();
    class.and_then(|c| step_class(state, c, opts)).ok_or_else(|| Violation {
        position: 0,
        state,
        expected: allowed_next(state, opts).iter().collect(),
        found: class,
        token: if class.is_none() { Some(id) } else { None },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Speech,
    Video,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "speech" => Ok(Modality::Speech),
            "video" => Ok(Modality::Video),
            _ => Err(Error::InvalidInput(format!("unknown output modality {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub modality: Modality,
    pub beam_size: u32,
    pub do_sample: bool,
    pub top_p: Option<f64>,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub guidance_scale: f64,
}

/// Default decoding hyperparameters per output modality.
pub fn decode_config(modality: Modality) -> DecodeConfig {
    let (beam_size, do_sample, top_p, repetition_penalty) = match modality {
        Modality::Text => (5, false, None, 1.0),
        Modality::Image => (1, true, Some(0.7), 1.0),
        Modality::Speech | Modality::Video => (1, true, Some(0.7), 1.15),
    };
    DecodeConfig {
        modality,
        beam_size,
        do_sample,
        top_p,
        repetition_penalty,
        temperature: 1.0,
        guidance_scale: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Token;

    fn layout() -> VocabLayout {
        VocabLayout::build(258).unwrap()
    }

    fn img(l: &VocabLayout, n: usize) -> Vec<TokenId> {
        let mut v = vec![l.special_id(Special::ImageStart)];
        v.extend((0..n).map(|i| l.encode(Token::Image(i as u16)).unwrap()));
        v.push(l.special_id(Special::ImageEnd));
        v
    }

    fn spch(l: &VocabLayout, layers: &[u8]) -> Vec<TokenId> {
        let mut v = vec![l.special_id(Special::SpeechStart)];
        v.extend(layers.iter().map(|&layer| l.encode(Token::Speech { layer, code: 9 }).unwrap()));
        v.push(l.special_id(Special::SpeechEnd));
        v
    }

    const SEQ: GrammarOptions = GrammarOptions { alternating_speech: false };
    const ALT: GrammarOptions = GrammarOptions { alternating_speech: true };

    #[test]
    fn image_blocks() {
        let l = layout();
        assert!(validate_stream(&img(&l, 32), &l, SEQ).is_empty());
        let v = validate_stream(&img(&l, 31), &l, SEQ);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].position, 32);
        assert_eq!(v[0].found, Some(TokenClass::Special(Special::ImageEnd)));
        assert_eq!(v[0].expected, vec![TokenClass::ImageCode]);
        assert_eq!(validate_stream(&img(&l, 33), &l, SEQ).len(), 1);
    }

    #[test]
    fn sequential_speech() {
        let l = layout();
        assert!(validate_stream(&spch(&l, &[0, 0, 1, 1, 2, 2, 3, 3]), &l, SEQ).is_empty());
        assert!(validate_stream(&spch(&l, &[0, 0, 0]), &l, SEQ).is_empty());
        assert!(validate_stream(&spch(&l, &[]), &l, SEQ).is_empty());
        assert!(!validate_stream(&spch(&l, &[0, 1, 2, 3, 0, 1, 2, 3]), &l, SEQ).is_empty());
        assert!(!validate_stream(&spch(&l, &[0, 0, 1, 2, 2, 3, 3]), &l, SEQ).is_empty());
        assert!(!validate_stream(&spch(&l, &[1]), &l, SEQ).is_empty());
    }

    #[test]
    fn alternating_flag() {
        let l = layout();
        assert!(validate_stream(&spch(&l, &[0, 1, 2, 3, 0, 1, 2, 3]), &l, ALT).is_empty());
        assert!(validate_stream(&spch(&l, &[0, 0]), &l, ALT).is_empty());
        assert!(!validate_stream(&spch(&l, &[0, 0, 1, 1, 2, 2, 3, 3]), &l, ALT).is_empty());
        assert!(!validate_stream(&spch(&l, &[0, 1, 2, 3, 0, 1]), &l, ALT).is_empty());
    }

    #[test]
    fn allowed_examples() {
        let o = SEQ;
        let set: Vec<_> = allowed_next(GrammarState::InImage { consumed: 5 }, o).iter().collect();
        assert_eq!(set, vec![TokenClass::ImageCode]);
        let set: Vec<_> = allowed_next(GrammarState::InImage { consumed: 32 }, o).iter().collect();
        assert_eq!(set, vec![TokenClass::Special(Special::ImageEnd)]);
        let set: Vec<_> = allowed_next(GrammarState::TopLevel, o).iter().collect();
        assert_eq!(
            set,
            vec![
                TokenClass::Text,
                TokenClass::Special(Special::ImageStart),
                TokenClass::Special(Special::SpeechStart)
            ]
        );
    }

    #[test]
    fn recovery_reports_once() {
        let l = layout();
        let mut s = l.encode(Token::Text(65)).map(|t| vec![t]).unwrap();
        let mut block = img(&l, 32);
        block[10] = 66; // text inside an image
        s.extend(&block);
        s.extend(spch(&l, &[0, 0]));
        let v = validate_stream(&s, &l, SEQ);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].position, 11);
    }

    #[test]
    fn unterminated_and_foreign_ids() {
        let l = layout();
        let mut s = img(&l, 32);
        s.pop();
        let v = validate_stream(&s, &l, SEQ);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].position, v[0].found), (33, None));
        let v = validate_stream(&[l.pad_id()], &l, SEQ);
        assert_eq!(v[0].token, Some(l.pad_id()));
        assert!(v[0].to_string().contains("outside the vocabulary"));
    }

    #[test]
    fn violation_json() {
        let l = layout();
        let v = validate_stream(&img(&l, 31), &l, SEQ);
        let json = serde_json::to_value(&v[0]).unwrap();
        assert_eq!(json["position"], 32);
        assert_eq!(json["state"]["mode"], "in_image");
        assert_eq!(json["state"]["consumed"], 31);
    }

    #[test]
    fn token_ranges_for_masking() {
        let l = layout();
        let r = allowed_token_ranges(GrammarState::TopLevel, SEQ, &l);
        assert_eq!(r[0], 0..258);
        assert_eq!(r.len(), 3);
        let r = allowed_token_ranges(GrammarState::InImage { consumed: 0 }, SEQ, &l);
        assert_eq!(r, vec![l.class_range(TokenClass::ImageCode)]);
    }

    #[test]
    fn decode_defaults() {
        let t = decode_config(Modality::Text);
        assert_eq!((t.beam_size, t.do_sample, t.top_p), (5, false, None));
        let s = decode_config("speech".parse().unwrap());
        assert_eq!((s.top_p, s.repetition_penalty), (Some(0.7), 1.15));
        let i = decode_config(Modality::Image);
        assert_eq!((i.top_p, i.repetition_penalty), (Some(0.7), 1.0));
        let v = decode_config(Modality::Video);
        assert_eq!((v.beam_size, v.do_sample, v.repetition_penalty), (1, true, 1.15));
        for m in [Modality::Text, Modality::Image, Modality::Speech, Modality::Video] {
            let c = decode_config(m);
            assert_eq!((c.temperature, c.guidance_scale), (1.0, 1.0));
        }
        assert!("smell".parse::<Modality>().is_err());
    }
}
