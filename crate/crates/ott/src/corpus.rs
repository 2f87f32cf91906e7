//! Character corpora and the `OTTD` encoded cache.
//!
//! Layout (little-endian): `"OTTD"`, `u32` version, `u32` byte length of the
//! vocabulary string, the vocabulary as UTF-8 in id order, `u64` token count,
//! then one `u16` per token.

use std::path::Path;

use ott_core::data::{build_vocab, encode, DataError, Vocab};
use thiserror::Error;

use crate::bytes::{Reader, Truncated};

pub const MAGIC: &[u8; 4] = b"OTTD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not valid UTF-8 text")]
    NotUtf8,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unsupported OTTD version {0}")]
    Version(u32),
    #[error("OTTD file ends early")]
    Truncated,
    #[error("malformed OTTD file: {0}")]
    Malformed(&'static str),
    #[error("vocabulary of {0} symbols does not fit u16 ids")]
    VocabTooLarge(usize),
}

impl From<Truncated> for CorpusError {
    fn from(_: Truncated) -> Self {
        CorpusError::Truncated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub ids: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let vocab = build_vocab(text)?;
        let ids = encode(text, &vocab)?;
        Ok(Self { vocab, ids })
    }

    /// Reads either raw UTF-8 text or an `OTTD` cache, told apart by the
    /// magic bytes.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            return Self::decode(&bytes);
        }
        let text = String::from_utf8(bytes).map_err(|_| CorpusError::NotUtf8)?;
        Self::from_text(&text)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CorpusError> {
        if self.vocab.len() > u16::MAX as usize + 1 {
            return Err(CorpusError::VocabTooLarge(self.vocab.len()));
        }
        let chars = self.vocab.as_string();
        let mut out = Vec::with_capacity(24 + chars.len() + 2 * self.ids.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(chars.len() as u32).to_le_bytes());
        out.extend_from_slice(chars.as_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for &id in &self.ids {
            out.extend_from_slice(&(id as u16).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CorpusError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(CorpusError::Malformed("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CorpusError::Version(version));
        }
        let n = r.u32()? as usize;
        let chars = std::str::from_utf8(r.take(n)?).map_err(|_| CorpusError::Malformed("vocabulary is not UTF-8"))?;
        let listed: Vec<char> = chars.chars().collect();
        let vocab = Vocab::from_chars(listed.clone())?;
        if vocab.chars() != listed.as_slice() {
            return Err(CorpusError::Malformed("vocabulary is not sorted and unique"));
        }
        let count = r.u64()? as usize;
        if r.remaining() != count.saturating_mul(2) {
            return Err(if r.remaining() < count.saturating_mul(2) {
                CorpusError::Truncated
            } else {
                CorpusError::Malformed("trailing bytes")
            });
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u16()? as usize;
            if id >= vocab.len() {
                return Err(CorpusError::Malformed("token id outside vocabulary"));
            }
            ids.push(id);
        }
        Ok(Self { vocab, ids })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }
}
