use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
/// Ids below this are reserved for special tokens.
pub const FIRST_CONTENT_ID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Query,
    Passage,
    Joint,
}

/// Token ids framed as `[CLS] … [SEP]` (or `[CLS] q [SEP] p [SEP]` for joint
/// input), optionally followed by trailing `[PAD]`s.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    token_ids: Vec<u32>,
    length: usize,
    kind: SequenceKind,
}

impl TokenSequence {
    pub fn new(token_ids: Vec<u32>, kind: SequenceKind) -> Result<Self> {
        let length = token_ids.iter().take_while(|&&t| t != PAD_ID).count();
        if token_ids[length..].iter().any(|&t| t != PAD_ID) {
            return Err(Error::Contract("padding must be trailing".into()));
        }
        if length < 2 || token_ids[0] != CLS_ID || token_ids[length - 1] != SEP_ID {
            return Err(Error::Contract(format!(
                "sequence must start with [CLS] and end with [SEP]: {token_ids:?}"
            )));
        }
        Ok(Self {
            token_ids,
            length,
            kind,
        })
    }

    /// Frames raw content tokens as `[CLS] content [SEP]`.
    pub fn from_content(content: &[u32], kind: SequenceKind) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(CLS_ID);
        ids.extend_from_slice(content);
        ids.push(SEP_ID);
        Self {
            length: ids.len(),
            token_ids: ids,
            kind,
        }
    }

    pub fn query(content: &[u32]) -> Self {
        Self::from_content(content, SequenceKind::Query)
    }

    pub fn passage(content: &[u32]) -> Self {
        Self::from_content(content, SequenceKind::Passage)
    }

    /// `[CLS] q₁…q_l [SEP] p₁…p_k [SEP]`
    pub fn joint(query: &TokenSequence, passage: &TokenSequence) -> Self {
        let q = query.content();
        let p = passage.content();
        let mut ids = Vec::with_capacity(q.len() + p.len() + 3);
        ids.push(CLS_ID);
        ids.extend_from_slice(q);
        ids.push(SEP_ID);
        ids.extend_from_slice(p);
        ids.push(SEP_ID);
        Self {
            length: ids.len(),
            token_ids: ids,
            kind: SequenceKind::Joint,
        }
    }

    pub fn with_padding(mut self, padded_len: usize) -> Self {
        if padded_len > self.token_ids.len() {
            self.token_ids.resize(padded_len, PAD_ID);
        }
        self
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Number of non-padding tokens, specials included.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn kind(&self) -> SequenceKind {
        self.kind
    }

    /// Tokens between the leading `[CLS]` and the final `[SEP]`.
    pub fn content(&self) -> &[u32] {
        &self.token_ids[1..self.length - 1]
    }

    /// Segment id per position: joint input switches to segment 1 after the first `[SEP]`.
    pub fn segments(&self) -> Vec<u32> {
        let mut seg = 0;
        self.token_ids
            .iter()
            .map(|&t| {
                let s = seg;
                if self.kind == SequenceKind::Joint && t == SEP_ID {
                    seg = 1;
                }
                s
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing() {
        let q = TokenSequence::query(&[5, 6]);
        assert_eq!(q.token_ids(), &[CLS_ID, 5, 6, SEP_ID]);
        assert_eq!(q.content(), &[5, 6]);
        let p = TokenSequence::passage(&[7, 8, 9]);
        let j = TokenSequence::joint(&q, &p);
        assert_eq!(j.len(), 2 + 3 + 3);
        assert_eq!(j.segments(), vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn padding_is_excluded_from_length() {
        let q = TokenSequence::query(&[5, 6]).with_padding(9);
        assert_eq!(q.len(), 4);
        assert_eq!(q.token_ids().len(), 9);
        assert_eq!(q.content(), &[5, 6]);
    }

    #[test]
    fn rejects_bad_framing() {
        assert!(TokenSequence::new(vec![5, 6], SequenceKind::Query).is_err());
        assert!(TokenSequence::new(vec![CLS_ID, 5, PAD_ID, SEP_ID], SequenceKind::Query).is_err());
        assert!(TokenSequence::new(vec![CLS_ID, 5, SEP_ID, PAD_ID], SequenceKind::Query).is_ok());
    }
}
