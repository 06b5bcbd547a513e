//! Text tokenization behind a small trait. The bundled [`ByteTokenizer`]
//! needs no model files: one id per byte plus two chat-role markers.

use crate::vocab::TokenId;

/// Ids that open and close a chat turn (ChatML-style `<|im_start|>` /
/// `<|im_end|>`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChatMarkers {
    pub turn_start: TokenId,
    pub turn_end: TokenId,
}

pub trait TextTokenizer: Send + Sync {
    /// Size of the base text vocabulary; every id returned by `encode` is below it.
    fn vocab_size(&self) -> u32;

    fn encode(&self, text: &str) -> Vec<TokenId>;

    /// Lossy inverse of `encode`. Marker ids render as their marker strings.
    fn decode(&self, ids: &[TokenId]) -> String;

    fn chat_markers(&self) -> ChatMarkers;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const TURN_START: TokenId = 256;
    pub const TURN_END: TokenId = 257;
    pub const VOCAB_SIZE: u32 = 258;
}

impl TextTokenizer for ByteTokenizer {
    fn vocab_size(&self) -> u32 {
        Self::VOCAB_SIZE
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        };
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                Self::TURN_START => {
                    flush(&mut bytes, &mut out);
                    out.push_str("<|im_start|>");
                }
                Self::TURN_END => {
                    flush(&mut bytes, &mut out);
                    out.push_str("<|im_end|>");
                }
                _ => {
                    flush(&mut bytes, &mut out);
                    out.push('\u{FFFD}');
                }
            }
        }
        flush(&mut bytes, &mut out);
        out
    }

    fn chat_markers(&self) -> ChatMarkers {
        ChatMarkers {
            turn_start: Self::TURN_START,
            turn_end: Self::TURN_END,
        }
    }
}
