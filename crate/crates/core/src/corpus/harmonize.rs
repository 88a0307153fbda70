use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Annotation, Document, LabelSet};
use crate::error::{Error, Result};

pub const DEFAULT_RULES_TOML: &str = include_str!("default_rules.toml");

const DATE_LABEL: &str = "Date";
const AGE_LABEL: &str = "Age";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RulesFile {
    age_threshold: u32,
    dropped_types: Vec<String>,
    year_patterns: Vec<String>,
    type_map: BTreeMap<String, String>,
}

/// Label mapping plus the Age and Date filters that bring every corpus onto
/// the same eight adjusted labels.
#[derive(Debug, Clone)]
pub struct HarmonizationRules {
    pub type_map: BTreeMap<String, String>,
    pub dropped_types: BTreeSet<String>,
    pub age_threshold: u32,
    year_patterns: Vec<Regex>,
}

impl Default for HarmonizationRules {
    fn default() -> Self {
        Self::from_toml(DEFAULT_RULES_TOML).expect("bundled harmonization rules are valid")
    }
}

impl HarmonizationRules {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: RulesFile = toml::from_str(text).map_err(|e| Error::InvalidRules(e.to_string()))?;
        let mut dropped = BTreeSet::new();
        for t in &file.dropped_types {
            if !dropped.insert(t.clone()) {
                return Err(Error::InvalidRules(format!("\"{t}\" listed twice in dropped_types")));
            }
            if file.type_map.contains_key(t) {
                return Err(Error::InvalidRules(format!(
                    "\"{t}\" is both mapped and dropped"
                )));
            }
        }
        let adjusted = LabelSet::harmonized();
        for (source, target) in &file.type_map {
            if adjusted.type_index(target).is_none() {
                return Err(Error::InvalidRules(format!(
                    "\"{source}\" maps to \"{target}\", which is not an adjusted label"
                )));
            }
        }
        let year_patterns = file
            .year_patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::InvalidRules(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(HarmonizationRules {
            type_map: file.type_map,
            dropped_types: dropped,
            age_threshold: file.age_threshold,
            year_patterns,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Character ranges (relative to `text`) holding year components.
    pub fn year_ranges(&self, text: &str) -> Vec<(usize, usize)> {
        let byte_to_char: BTreeMap<usize, usize> = text
            .char_indices()
            .enumerate()
            .map(|(ci, (bi, _))| (bi, ci))
            .chain(std::iter::once((text.len(), text.chars().count())))
            .collect();
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for re in &self.year_patterns {
            for caps in re.captures_iter(text) {
                let m = caps.get(1).or_else(|| caps.get(0)).expect("match has group 0");
                ranges.push((byte_to_char[&m.start()], byte_to_char[&m.end()]));
            }
        }
        ranges.sort_unstable();
        ranges.dedup();
        ranges
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeAction {
    Relabeled,
    Dropped,
    Shrunk,
    Split,
}

/// One entry of the validation report: an annotation that harmonization
/// changed or removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarmonizationChange {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub original_type: String,
    pub action: ChangeAction,
    pub reason: String,
    pub result: Vec<Annotation>,
}

pub fn harmonize(doc: &Document, rules: &HarmonizationRules) -> Result<(Document, Vec<HarmonizationChange>)> {
    let mut out = doc.clone();
    out.annotations.clear();
    let mut changes = Vec::new();
    let change = |ann: &Annotation, action, reason: String, result: Vec<Annotation>| HarmonizationChange {
        doc_id: doc.id.clone(),
        start: ann.start,
        end: ann.end,
        original_type: ann.phi_type.clone(),
        action,
        reason,
        result,
    };

    for ann in &doc.annotations {
        if rules.dropped_types.contains(&ann.phi_type) {
            changes.push(change(ann, ChangeAction::Dropped, "unused PHI type".into(), vec![]));
            continue;
        }
        let target = rules
            .type_map
            .get(&ann.phi_type)
            .ok_or_else(|| Error::UnknownLabel(ann.phi_type.clone()))?;
        let mapped = Annotation::new(ann.start, ann.end, target.clone());
        let surface = doc.span_text(ann);

        if target == AGE_LABEL {
            if let Some(age) = leading_number(&surface) {
                if age < rules.age_threshold {
                    let reason = format!("age {age} under {}", rules.age_threshold);
                    changes.push(change(ann, ChangeAction::Dropped, reason, vec![]));
                    continue;
                }
            }
        }

        let pieces = if target == DATE_LABEL {
            strip_years(&mapped, &surface, rules)
        } else {
            vec![mapped.clone()]
        };
        let action = match pieces.len() {
            0 => Some((ChangeAction::Dropped, "date consists only of a year")),
            1 if pieces[0] != mapped => Some((ChangeAction::Shrunk, "year removed from date")),
            1 if *target != ann.phi_type => Some((ChangeAction::Relabeled, "type mapped")),
            1 => None,
            _ => Some((ChangeAction::Split, "year removed from inside date")),
        };
        if let Some((action, reason)) = action {
            let reason = if *target != ann.phi_type && action != ChangeAction::Relabeled {
                format!("{reason}; type mapped to {target}")
            } else {
                reason.to_string()
            };
            changes.push(change(ann, action, reason, pieces.clone()));
        }
        out.annotations.extend(pieces);
    }
    out.annotations.sort();
    Ok((out, changes))
}

/// Harmonizes every document, keeping input order.
pub fn harmonize_corpus(
    docs: &[Document],
    rules: &HarmonizationRules,
) -> Result<(Vec<Document>, Vec<HarmonizationChange>)> {
    let mut out = Vec::with_capacity(docs.len());
    let mut changes = Vec::new();
    for doc in docs {
        let (d, c) = harmonize(doc, rules)?;
        out.push(d);
        changes.extend(c);
    }
    Ok((out, changes))
}

fn leading_number(surface: &str) -> Option<u32> {
    let digits: String = surface
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

fn is_date_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, '/' | '-' | ',' | '.' | '\'')
}

/// Removes year components from a date span; what remains is trimmed of
/// separators and returned as zero, one or several spans.
fn strip_years(ann: &Annotation, surface: &str, rules: &HarmonizationRules) -> Vec<Annotation> {
    let years = rules.year_ranges(surface);
    if years.is_empty() {
        return vec![ann.clone()];
    }
    let chars: Vec<char> = surface.chars().collect();
    let mut segments = Vec::new();
    let mut pos = 0;
    for &(s, e) in &years {
        if s > pos {
            segments.push((pos, s));
        }
        pos = pos.max(e);
    }
    if pos < chars.len() {
        segments.push((pos, chars.len()));
    }
    segments
        .into_iter()
        .filter_map(|(mut s, mut e)| {
            while s < e && is_date_separator(chars[s]) {
                s += 1;
            }
            while e > s && is_date_separator(chars[e - 1]) {
                e -= 1;
            }
            chars[s..e]
                .iter()
                .any(|c| c.is_alphanumeric())
                .then(|| Annotation::new(ann.start + s, ann.start + e, ann.phi_type.clone()))
        })
        .collect()
}
