//! Unified token-id space.
//!
//! Ids are laid out in four contiguous ranges:
//!
//! ```text
//! [0, text)                      base text vocabulary
//! [text, text + 4096)            speech codes, layer-major (4 layers x 1024)
//! [text + 4096, text + 12288)    image codes (8192)
//! [text + 12288, text + 12292)   <image> </image> <spch> </spch>
//! ```
//!
//! The id one past the last special (`total_size`) is reserved as the pad id
//! used by the packer; it is not part of the layout proper and does not
//! classify.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const SPEECH_LAYERS: u32 = 4;
pub const SPEECH_CODEBOOK_SIZE: u32 = 1024;
pub const IMAGE_CODEBOOK_SIZE: u32 = 8192;
pub const SPECIAL_COUNT: u32 = 4;
/// Number of ids appended to the base text vocabulary.
pub const EXTENSION_SIZE: u32 =
    SPEECH_LAYERS * SPEECH_CODEBOOK_SIZE + IMAGE_CODEBOOK_SIZE + SPECIAL_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Special {
    ImageStart,
    ImageEnd,
    SpeechStart,
    SpeechEnd,
}

impl Special {
    pub const ALL: [Special; 4] = [
        Special::ImageStart,
        Special::ImageEnd,
        Special::SpeechStart,
        Special::SpeechEnd,
    ];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Special::ImageStart => "<image>",
            Special::ImageEnd => "</image>",
            Special::SpeechStart => "<spch>",
            Special::SpeechEnd => "</spch>",
        }
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A token together with its payload (text id, code value, or which special).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Text(u32),
    Speech { layer: u8, code: u16 },
    Image(u16),
    Special(Special),
}

impl Token {
    pub fn class(self) -> TokenClass {
        match self {
            Token::Text(_) => TokenClass::Text,
            Token::Speech { layer, .. } => TokenClass::SpeechCode(layer),
            Token::Image(_) => TokenClass::ImageCode,
            Token::Special(s) => TokenClass::Special(s),
        }
    }
}

/// Payload-free token category. There are exactly ten classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Text,
    SpeechCode(u8),
    ImageCode,
    Special(Special),
}

impl TokenClass {
    pub const ALL: [TokenClass; 10] = [
        TokenClass::Text,
        TokenClass::SpeechCode(0),
        TokenClass::SpeechCode(1),
        TokenClass::SpeechCode(2),
        TokenClass::SpeechCode(3),
        TokenClass::ImageCode,
        TokenClass::Special(Special::ImageStart),
        TokenClass::Special(Special::ImageEnd),
        TokenClass::Special(Special::SpeechStart),
        TokenClass::Special(Special::SpeechEnd),
    ];

    fn bit(self) -> u16 {
        let i = match self {
            TokenClass::Text => 0,
            TokenClass::SpeechCode(l) => 1 + (l as u16).min(3),
            TokenClass::ImageCode => 5,
            TokenClass::Special(s) => 6 + s.index() as u16,
        };
        1 << i
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenClass::Text => f.write_str("text"),
            TokenClass::SpeechCode(l) => write!(f, "speech[{l}]"),
            TokenClass::ImageCode => f.write_str("image"),
            TokenClass::Special(s) => write!(f, "{s}"),
        }
    }
}

/// Set of [`TokenClass`] values, stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ClassSet(u16);

impl ClassSet {
    pub const EMPTY: ClassSet = ClassSet(0);

    pub fn insert(&mut self, class: TokenClass) {
        self.0 |= class.bit();
    }

    pub fn with(mut self, class: TokenClass) -> Self {
        self.insert(class);
        self
    }

    pub fn contains(&self, class: TokenClass) -> bool {
        self.0 & class.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenClass> + '_ {
        TokenClass::ALL.into_iter().filter(|c| self.contains(*c))
    }
}

impl FromIterator<TokenClass> for ClassSet {
    fn from_iter<I: IntoIterator<Item = TokenClass>>(iter: I) -> Self {
        let mut set = ClassSet::EMPTY;
        for c in iter {
            set.insert(c);
        }
        set
    }
}

impl fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Immutable mapping between tokens and ids. Serializes to JSON with the
/// field names below; deserialization re-validates every invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout")]
pub struct VocabLayout {
    text_size: u32,
    speech_layers: u32,
    speech_codebook_size: u32,
    image_codebook_size: u32,
    special_ids: [TokenId; 4],
    total_size: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    text_size: u32,
    speech_layers: u32,
    speech_codebook_size: u32,
    image_codebook_size: u32,
    special_ids: [TokenId; 4],
    total_size: u32,
}

impl TryFrom<RawLayout> for VocabLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        let layout = VocabLayout::build(raw.text_size)?;
        let matches = raw.speech_layers == layout.speech_layers
            && raw.speech_codebook_size == layout.speech_codebook_size
            && raw.image_codebook_size == layout.image_codebook_size
            && raw.special_ids == layout.special_ids
            && raw.total_size == layout.total_size;
        if !matches {
            return Err(Error::InvalidConfiguration(format!(
                "layout document is inconsistent with text_size {}",
                raw.text_size
            )));
        }
        Ok(layout)
    }
}

impl VocabLayout {
    pub fn build(text_size: u32) -> Result<Self> {
        if text_size == 0 {
            return Err(Error::InvalidConfiguration("text_size must be at least 1".into()));
        }
        // total_size itself must stay representable: it doubles as the pad id
        let total_size = text_size
            .checked_add(EXTENSION_SIZE)
            .filter(|t| *t < u32::MAX)
            .ok_or_else(|| Error::InvalidConfiguration(format!("text_size {text_size} overflows the id space")))?;
        let first_special = total_size - SPECIAL_COUNT;
        Ok(VocabLayout {
            text_size,
            speech_layers: SPEECH_LAYERS,
            speech_codebook_size: SPEECH_CODEBOOK_SIZE,
            image_codebook_size: IMAGE_CODEBOOK_SIZE,
            special_ids: [
                first_special,
                first_special + 1,
                first_special + 2,
                first_special + 3,
            ],
            total_size,
        })
    }

    pub fn text_size(&self) -> u32 {
        self.text_size
    }

    pub fn total_size(&self) -> u32 {
        self.total_size
    }

    /// Id used for pack-tail padding; one past the last classified id.
    pub fn pad_id(&self) -> TokenId {
        self.total_size
    }

    pub fn special_id(&self, which: Special) -> TokenId {
        self.special_ids[which.index() as usize]
    }

    fn speech_base(&self) -> u32 {
        self.text_size
    }

    fn image_base(&self) -> u32 {
        self.text_size + SPEECH_LAYERS * SPEECH_CODEBOOK_SIZE
    }

    /// Id range covered by a token class.
    pub fn class_range(&self, class: TokenClass) -> Range<TokenId> {
        match class {
            TokenClass::Text => 0..self.text_size,
            TokenClass::SpeechCode(l) => {
                let start = self.speech_base() + SPEECH_CODEBOOK_SIZE * l as u32;
                start..start + SPEECH_CODEBOOK_SIZE
            }
            TokenClass::ImageCode => self.image_base()..self.image_base() + IMAGE_CODEBOOK_SIZE,
            TokenClass::Special(s) => {
                let id = self.special_id(s);
                id..id + 1
            }
        }
    }

    pub fn encode(&self, token: Token) -> Result<TokenId> {
        match token {
            Token::Text(t) => {
                if t >= self.text_size {
                    return Err(Error::OutOfRange(format!(
                        "text id {t} >= text_size {}",
                        self.text_size
                    )));
                }
                Ok(t)
            }
            Token::Speech { layer, code } => {
                if layer as u32 >= SPEECH_LAYERS {
                    return Err(Error::OutOfRange(format!("speech layer {layer} >= {SPEECH_LAYERS}")));
                }
                if code as u32 >= SPEECH_CODEBOOK_SIZE {
                    return Err(Error::OutOfRange(format!(
                        "speech code {code} >= {SPEECH_CODEBOOK_SIZE}"
                    )));
                }
                Ok(self.speech_base() + SPEECH_CODEBOOK_SIZE * layer as u32 + code as u32)
            }
            Token::Image(code) => {
                if code as u32 >= IMAGE_CODEBOOK_SIZE {
                    return Err(Error::OutOfRange(format!(
                        "image code {code} >= {IMAGE_CODEBOOK_SIZE}"
                    )));
                }
                Ok(self.image_base() + code as u32)
            }
            Token::Special(s) => Ok(self.special_id(s)),
        }
    }

    pub fn classify(&self, id: TokenId) -> Result<Token> {
        if id >= self.total_size {
            return Err(Error::OutOfRange(format!(
                "token id {id} >= total_size {}",
                self.total_size
            )));
        }
        if id < self.text_size {
            return Ok(Token::Text(id));
        }
        let off = id - self.text_size;
        let speech_span = SPEECH_LAYERS * SPEECH_CODEBOOK_SIZE;
        if off < speech_span {
            return Ok(Token::Speech {
                layer: (off / SPEECH_CODEBOOK_SIZE) as u8,
                code: (off % SPEECH_CODEBOOK_SIZE) as u16,
            });
        }
        let off = off - speech_span;
        if off < IMAGE_CODEBOOK_SIZE {
            return Ok(Token::Image(off as u16));
        }
        Ok(Token::Special(Special::ALL[(off - IMAGE_CODEBOOK_SIZE) as usize]))
    }

    pub fn class_of(&self, id: TokenId) -> Result<TokenClass> {
        self.classify(id).map(Token::class)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the compact JSON form; shards record it to pin the layout.
    pub fn digest(&self) -> [u8; 32] {
        let compact = serde_json::to_vec(self).expect("layout serializes");
        Sha256::digest(&compact).into()
    }
}
