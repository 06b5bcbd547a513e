use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::mix::SourceType;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Text,
    Image,
    Speech,
    /// Chat-role markers and role names.
    Markup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub range: Range<usize>,
}

/// One training example: a flat token stream annotated with its modality
/// segments and, for SFT data, the supervised spans.
///
/// `supervision == None` means every token is a training target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervision: Option<Vec<Range<usize>>>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, kind: SegmentKind, ids: &[TokenId]) -> Range<usize> {
        let start = self.tokens.len();
        self.tokens.extend_from_slice(ids);
        let range = start..self.tokens.len();
        if range.is_empty() {
            return range;
        }
        match self.segments.last_mut() {
            Some(last) if last.kind == kind && last.range.end == start && kind != SegmentKind::Image && kind != SegmentKind::Speech => {
                last.range.end = range.end;
            }
            _ => self.segments.push(Segment { kind, range: range.clone() }),
        }
        range
    }
}

/// A sample tagged with the data source it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcedSample {
    pub source: SourceType,
    #[serde(flatten)]
    pub sample: Sample,
}
