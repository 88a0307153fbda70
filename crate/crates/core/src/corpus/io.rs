use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assign_domain_ids, Annotation, Document};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    note_type: String,
    domain: String,
    text: String,
    annotations: Vec<RecordAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordAnnotation {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    phi_type: String,
    /// Optional copy of the covered text, checked on load when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

/// Reads a JSON-lines corpus. Blank lines are skipped; domain ids follow the
/// first appearance of each domain name.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), &path.display().to_string())
}

pub fn parse_corpus(reader: impl BufRead, source: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        let mut doc = Document {
            id: record.id,
            note_type: record.note_type,
            domain: record.domain,
            domain_id: 0,
            text: record.text,
            annotations: Vec::with_capacity(record.annotations.len()),
        };
        for a in record.annotations {
            let ann = Annotation::new(a.start, a.end, a.phi_type);
            if let Some(expected) = a.text {
                if ann.start < ann.end && doc.span_text(&ann) != expected {
                    return Err(Error::Parse {
                        path: source.to_string(),
                        line: line_no,
                        message: format!(
                            "annotation [{}, {}) text {:?} does not match document text",
                            ann.start, ann.end, expected
                        ),
                    });
                }
            }
            doc.annotations.push(ann);
        }
        doc.validate()?;
        docs.push(doc);
    }
    assign_domain_ids(&mut docs);
    Ok(docs)
}

pub fn save_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(docs, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus(docs: &[Document], w: &mut impl Write) -> std::io::Result<()> {
    for doc in docs {
        let record = Record {
            id: doc.id.clone(),
            note_type: doc.note_type.clone(),
            domain: doc.domain.clone(),
            text: doc.text.clone(),
            annotations: doc
                .annotations
                .iter()
                .map(|a| RecordAnnotation {
                    start: a.start,
                    end: a.end,
                    phi_type: a.phi_type.clone(),
                    text: None,
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
