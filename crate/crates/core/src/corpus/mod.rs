//! Documents, PHI annotations and everything needed to turn raw annotated
//! notes into token-level training examples.
//!
//! Offsets throughout this module count Unicode scalar values (`char`s), not
//! bytes, so they match the corpus file format.

mod bio;
mod harmonize;
mod io;
pub mod synthetic;
mod tokenize;

pub use bio::{decode_bio, encode_bio, LabelSet, TagId, OUTSIDE};
pub use harmonize::{
    harmonize, harmonize_corpus, ChangeAction, HarmonizationChange, HarmonizationRules,
    DEFAULT_RULES_TOML,
};
pub use io::{load_corpus, parse_corpus, save_corpus, write_corpus};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tokenize::{tokenize, tokenize_aligned, ABBREVIATIONS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub phi_type: String,
}

impl Annotation {
    pub fn new(start: usize, end: usize, phi_type: impl Into<String>) -> Self {
        Annotation {
            start,
            end,
            phi_type: phi_type.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub domain_id: usize,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Character range `[start, end)` covered by the sentence.
    pub fn span(&self) -> (usize, usize) {
        match (self.tokens.first(), self.tokens.last()) {
            (Some(first), Some(last)) => (first.start, last.end),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub note_type: String,
    /// Name of the source dataset; this is the domain identity.
    pub domain: String,
    pub domain_id: usize,
    pub text: String,
    pub annotations: Vec<Annotation>,
}

impl Document {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Substring covered by `[start, end)` in character offsets.
    pub fn slice(&self, start: usize, end: usize) -> String {
        self.text.chars().skip(start).take(end.saturating_sub(start)).collect()
    }

    pub fn span_text(&self, ann: &Annotation) -> String {
        self.slice(ann.start, ann.end)
    }

    /// Sentences with tokens split at annotation boundaries, so every
    /// annotation starts and ends on a token edge.
    pub fn sentences(&self) -> Vec<Sentence> {
        let spans: Vec<(usize, usize)> = self.annotations.iter().map(|a| (a.start, a.end)).collect();
        let mut sentences = tokenize_aligned(&self.text, &spans);
        for s in &mut sentences {
            s.domain_id = self.domain_id;
        }
        sentences
    }

    /// Plain sentences with no knowledge of annotations (the prediction view).
    pub fn plain_sentences(&self) -> Vec<Sentence> {
        let mut sentences = tokenize(&self.text);
        for s in &mut sentences {
            s.domain_id = self.domain_id;
        }
        sentences
    }

    /// One document per sentence, ids suffixed `-s{index}`, annotations
    /// shifted to the sentence start.
    pub fn split_sentences(&self) -> Result<Vec<Document>> {
        self.sentences()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (a, b) = s.span();
                let annotations = self
                    .annotations
                    .iter()
                    .filter(|x| x.start >= a && x.end <= b)
                    .map(|x| Annotation::new(x.start - a, x.end - a, x.phi_type.clone()))
                    .collect();
                let mut doc = Document { id: format!("{}-s{i}", self.id), text: self.slice(a, b), annotations, ..self.clone() };
                doc.validate()?;
                Ok(doc)
            })
            .collect()
    }

    /// Sorts annotations and checks bounds and non-overlap.
    pub fn validate(&mut self) -> Result<()> {
        self.annotations.sort();
        let len = self.char_len();
        for ann in &self.annotations {
            if ann.start >= ann.end || ann.end > len {
                return Err(Error::InvalidDocument {
                    doc_id: self.id.clone(),
                    message: format!(
                        "annotation [{}, {}) out of bounds for text of length {len}",
                        ann.start, ann.end
                    ),
                });
            }
        }
        for pair in self.annotations.windows(2) {
            if pair[0].end > pair[1].start {
                return Err(Error::OverlappingAnnotations {
                    doc_id: self.id.clone(),
                    first: (pair[0].start, pair[0].end),
                    second: (pair[1].start, pair[1].end),
                });
            }
        }
        Ok(())
    }
}

/// Assigns `domain_id`s by first appearance of each domain name and returns
/// the ordered names.
pub fn assign_domain_ids(docs: &mut [Document]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for doc in docs.iter_mut() {
        let id = match names.iter().position(|n| *n == doc.domain) {
            Some(i) => i,
            None => {
                names.push(doc.domain.clone());
                names.len() - 1
            }
        };
        doc.domain_id = id;
    }
    names
}
