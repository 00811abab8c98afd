//! Token-ID sequences shared by both modalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
/// Number of reserved IDs at the bottom of every vocabulary.
pub const N_SPECIALS: u32 = 5;
pub const SPECIAL_NAMES: [&str; N_SPECIALS as usize] = ["<pad>", "<cls>", "<sep>", "<mask>", "<unk>"];

pub fn is_special(id: u32) -> bool {
    id < N_SPECIALS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }
}

/// Discrete IDs for one modality; position 0 always holds [`CLS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    modality: Modality,
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Prepends CLS to `body`.
    pub fn with_cls(modality: Modality, body: impl IntoIterator<Item = u32>) -> Self {
        let mut ids = vec![CLS];
        ids.extend(body);
        Self { modality, ids }
    }

    /// Wraps a full ID list that must already start with CLS.
    pub fn from_ids(modality: Modality, ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Input("token sequence must start with CLS".into()));
        }
        Ok(Self { modality, ids })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn body(&self) -> &[u32] {
        &self.ids[1..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub(crate) fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }
}
