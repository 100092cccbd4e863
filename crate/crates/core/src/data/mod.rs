//! Toy corpus, feature files and objective evaluation.

mod eval;
mod manifest;
mod melio;
pub mod toy;

pub use eval::{
    best_constant_l1, diagonality, evaluate, frame_l1, EvalMode, EvalOptions, EvalReport, EvalRow, ModeSummary,
    BAND_FRACTION,
};
pub use manifest::{load_corpus, save_corpus, MANIFEST_FILE};
pub use melio::{load_mel, read_mel, save_mel, write_mel, MEL_MAGIC};
pub use toy::{gen_corpus, render, SpeakerProfile, ToySpec};

use crate::error::{Error, Result};
use crate::numerics::NumArray;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Speaker that produced `source`.
    pub speaker: String,
    pub source: Option<NumArray>,
    pub target: NumArray,
}

impl Utterance {
    /// Text length M.
    pub fn m(&self) -> usize {
        self.tokens.len()
    }

    /// Source length N, 0 when there is no source.
    pub fn n(&self) -> usize {
        self.source.as_ref().map_or(0, |s| s.rows())
    }

    /// Target length T.
    pub fn t(&self) -> usize {
        self.target.rows()
    }

    pub fn has_text(&self) -> bool {
        !self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// First `n` utterances.
    pub fn head(&self, n: usize) -> Corpus {
        Corpus {
            utterances: self.utterances.iter().take(n).cloned().collect(),
        }
    }

    pub fn n_mels(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.target.cols())
    }

    /// Checks that every utterance carries what a stage needs.
    pub fn require(&self, text: bool, speech: bool) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Corpus("corpus has no utterances".into()));
        }
        for u in &self.utterances {
            if text && !u.has_text() {
                return Err(Error::InputKind(format!("utterance {} has no text tokens", u.id)));
            }
            if speech && u.source.is_none() {
                return Err(Error::InputKind(format!("utterance {} has no source mel", u.id)));
            }
        }
        Ok(())
    }
}
