//! Input sequence layout: CLS, mention pieces, SEP, context pieces, SEP.

use thiserror::Error;

use crate::tokenizer::{SubwordVocab, CLS_ID, SEP_ID};

#[derive(Debug, Error)]
pub enum InputError {
    #[error("mention of {pieces} pieces cannot fit in cap {cap}")]
    MentionOversize { pieces: usize, cap: usize },
    #[error("mention is empty")]
    EmptyMention,
}

/// Segment marker for the CLS token, mention pieces and first SEP.
pub const SEG_MENTION: u8 = 0;
/// Segment marker for context pieces and the final SEP.
pub const SEG_CONTEXT: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds the model input. When the sequence would exceed `cap`, context
/// pieces are dropped symmetrically from both ends of the context before the
/// mention is ever touched; a mention that cannot fit at all is an error.
pub fn build_input(
    mention: &[String],
    context: &[String],
    vocab: &SubwordVocab,
    cap: usize,
) -> Result<InputSequence, InputError> {
    if mention.is_empty() {
        return Err(InputError::EmptyMention);
    }
    let mention_pieces = vocab.tokenize_words(mention);
    // CLS + mention + SEP + SEP is the irreducible layout.
    let fixed = mention_pieces.len() + 3;
    if fixed > cap {
        return Err(InputError::MentionOversize {
            pieces: mention_pieces.len(),
            cap,
        });
    }
    let mut context_pieces = vocab.tokenize_words(context);
    let budget = cap - fixed;
    if context_pieces.len() > budget {
        let excess = context_pieces.len() - budget;
        let front = (excess + 1) / 2;
        let back = excess / 2;
        context_pieces = context_pieces[front..context_pieces.len() - back].to_vec();
    }

    let mut ids = Vec::with_capacity(fixed + context_pieces.len());
    let mut segments = Vec::with_capacity(fixed + context_pieces.len());
    ids.push(CLS_ID);
    segments.push(SEG_MENTION);
    for &p in &mention_pieces {
        ids.push(p);
        segments.push(SEG_MENTION);
    }
    ids.push(SEP_ID);
    segments.push(SEG_MENTION);
    for &p in &context_pieces {
        ids.push(p);
        segments.push(SEG_CONTEXT);
    }
    ids.push(SEP_ID);
    segments.push(SEG_CONTEXT);
    Ok(InputSequence { ids, segments })
}
