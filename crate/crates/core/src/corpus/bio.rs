use serde::{Deserialize, Serialize};

use super::{Annotation, Sentence};
use crate::error::{Error, Result};

pub type TagId = usize;

/// Tag id of `O`; always the first tag.
pub const OUTSIDE: TagId = 0;

/// Ordered PHI types with a BIO2 tag inventory.
///
/// Tag 0 is `O`; type `i` owns `B-` at `2i + 1` and `I-` at `2i + 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    phi_types: Vec<String>,
}

impl LabelSet {
    pub const HARMONIZED: [&'static str; 8] = [
        "Patient", "Doctor", "Hospital", "ID", "Date", "Location", "Phone", "Age",
    ];

    /// The eight adjusted labels shared by all harmonized corpora.
    pub fn harmonized() -> Self {
        LabelSet::new(Self::HARMONIZED.iter().copied())
    }

    pub fn new<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Self {
        LabelSet {
            phi_types: types.into_iter().map(Into::into).collect(),
        }
    }

    pub fn phi_types(&self) -> &[String] {
        &self.phi_types
    }

    pub fn num_tags(&self) -> usize {
        2 * self.phi_types.len() + 1
    }

    pub fn type_index(&self, phi_type: &str) -> Option<usize> {
        self.phi_types.iter().position(|t| t == phi_type)
    }

    pub fn begin(&self, type_index: usize) -> TagId {
        2 * type_index + 1
    }

    pub fn inside(&self, type_index: usize) -> TagId {
        2 * type_index + 2
    }

    /// `(type index, is_begin)` for a B-/I- tag, `None` for `O`.
    pub fn decompose(&self, tag: TagId) -> Option<(usize, bool)> {
        if tag == OUTSIDE || tag >= self.num_tags() {
            None
        } else {
            Some(((tag - 1) / 2, tag % 2 == 1))
        }
    }

    pub fn tag_name(&self, tag: TagId) -> String {
        match self.decompose(tag) {
            None => "O".to_string(),
            Some((t, true)) => format!("B-{}", self.phi_types[t]),
            Some((t, false)) => format!("I-{}", self.phi_types[t]),
        }
    }
}

/// Tags the tokens of `sentence` from the annotations that fall inside it.
///
/// Annotations outside the sentence's character range are ignored; any that
/// straddle a sentence or token edge are reported as misaligned.
pub fn encode_bio(
    sentence: &Sentence,
    annotations: &[Annotation],
    labels: &LabelSet,
    doc_id: &str,
) -> Result<Vec<TagId>> {
    let mut tags = vec![OUTSIDE; sentence.len()];
    let (s_start, s_end) = sentence.span();
    for ann in annotations {
        if ann.end <= s_start || ann.start >= s_end {
            continue;
        }
        let type_index = labels
            .type_index(&ann.phi_type)
            .ok_or_else(|| Error::UnknownLabel(ann.phi_type.clone()))?;
        let first = sentence
            .tokens
            .iter()
            .position(|t| t.start == ann.start)
            .ok_or_else(|| Error::Misaligned {
                doc_id: doc_id.to_string(),
                offset: ann.start,
            })?;
        let last = sentence.tokens[first..]
            .iter()
            .position(|t| t.end == ann.end)
            .map(|p| p + first)
            .ok_or_else(|| Error::Misaligned {
                doc_id: doc_id.to_string(),
                offset: ann.end,
            })?;
        tags[first] = labels.begin(type_index);
        for tag in &mut tags[first + 1..=last] {
            *tag = labels.inside(type_index);
        }
    }
    Ok(tags)
}

/// Turns a tag sequence back into spans.
///
/// An `I-` tag that does not continue an entity of the same type opens a new
/// one, as if it were `B-`.
pub fn decode_bio(tags: &[TagId], sentence: &Sentence, labels: &LabelSet) -> Vec<Annotation> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize, usize)> = None; // (type, start, end)
    for (tag, token) in tags.iter().zip(&sentence.tokens) {
        match labels.decompose(*tag) {
            None => {
                if let Some((t, s, e)) = open.take() {
                    out.push(Annotation::new(s, e, labels.phi_types()[t].clone()));
                }
            }
            Some((t, is_begin)) => {
                let continues = !is_begin && matches!(open, Some((ot, _, _)) if ot == t);
                if continues {
                    if let Some((_, _, e)) = open.as_mut() {
                        *e = token.end;
                    }
                } else {
                    if let Some((ot, s, e)) = open.take() {
                        out.push(Annotation::new(s, e, labels.phi_types()[ot].clone()));
                    }
                    open = Some((t, token.start, token.end));
                }
            }
        }
    }
    if let Some((t, s, e)) = open {
        out.push(Annotation::new(s, e, labels.phi_types()[t].clone()));
    }
    out
}
