use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::Corpus;
use crate::error::{BridgingError, Result};

/// Key of the explicit all-zero entry in [`StaticVectors`].
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Frozen word vectors in the plain text `token f1 f2 ... fD` format.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticVectors {
    pub dim: usize,
    map: HashMap<String, Vec<f32>>,
    zeros: Vec<f32>,
    /// Number of lines that redefined an earlier token.
    pub duplicates: usize,
}

impl StaticVectors {
    pub fn from_map(dim: usize, mut map: HashMap<String, Vec<f32>>) -> Result<Self> {
        if let Some((token, v)) = map.iter().find(|(_, v)| v.len() != dim) {
            return Err(BridgingError::Vectors {
                line: 0,
                message: format!("`{token}` has {} values, expected {dim}", v.len()),
            });
        }
        map.insert(UNKNOWN_TOKEN.to_string(), vec![0.0; dim]);
        Ok(Self {
            dim,
            map,
            zeros: vec![0.0; dim],
            duplicates: 0,
        })
    }

    /// Vector for `token`; out-of-vocabulary tokens get zeros.
    pub fn get(&self, token: &str) -> &[f32] {
        self.map.get(token).map_or(&self.zeros, Vec::as_slice)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.map.contains_key(token)
    }

    /// Entries including the unknown entry.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn parse_static_vectors(reader: impl BufRead, dim: usize) -> Result<StaticVectors> {
    let mut map = HashMap::new();
    let mut duplicates = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| BridgingError::Vectors {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(BridgingError::Vectors {
                line: line_no,
                message: format!("expected {} columns, found {}", dim + 1, values.len() + 1),
            });
        }
        let vector = values
            .iter()
            .map(|v| {
                v.parse::<f32>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| BridgingError::Vectors {
                        line: line_no,
                        message: format!("`{v}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f32>>>()?;
        if map.insert(token.to_string(), vector).is_some() {
            log::warn!("static vectors line {line_no}: duplicate token `{token}`, keeping the last occurrence");
            duplicates += 1;
        }
    }
    let mut vectors = StaticVectors::from_map(dim, map)?;
    vectors.duplicates = duplicates;
    Ok(vectors)
}

pub fn load_static_vectors(path: impl AsRef<Path>, dim: usize) -> Result<StaticVectors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| BridgingError::io(path, e))?;
    parse_static_vectors(BufReader::new(file), dim)
}

/// Precomputed per-token contextual vectors, keyed by document id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextualVectors {
    pub dim: usize,
    docs: HashMap<String, Vec<Vec<f32>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dim: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocVectors {
    doc_id: String,
    vectors: Vec<Vec<f32>>,
}

impl ContextualVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            docs: HashMap::new(),
        }
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, vectors: Vec<Vec<f32>>) {
        self.docs.insert(doc_id.into(), vectors);
    }

    pub fn get(&self, doc_id: &str) -> Option<&[Vec<f32>]> {
        self.docs.get(doc_id).map(Vec::as_slice)
    }

    /// Checks that every document has exactly one vector per token.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        for doc in &corpus.documents {
            let expected = doc.num_tokens();
            let found = self.docs.get(&doc.id).map(Vec::len);
            if found != Some(expected) {
                return Err(BridgingError::Contextual {
                    doc_id: doc.id.clone(),
                    message: match found {
                        Some(n) => format!("{n} vectors for {expected} tokens"),
                        None => "document missing from the vector file".into(),
                    },
                });
            }
        }
        Ok(())
    }
}

pub fn parse_contextual_vectors(reader: impl BufRead) -> Result<ContextualVectors> {
    let mut out: Option<ContextualVectors> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| BridgingError::Vectors {
            line: line_no,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(vectors) = out.as_mut() else {
            let header: Header = serde_json::from_str(&line)
                .map_err(|e| err(format!("expected {{\"dim\": D}} header: {e}")))?;
            out = Some(ContextualVectors::new(header.dim));
            continue;
        };
        let record: DocVectors =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        if let Some(bad) = record.vectors.iter().position(|v| v.len() != vectors.dim) {
            return Err(err(format!(
                "document `{}` vector {bad} has {} values, header declares {}",
                record.doc_id,
                record.vectors[bad].len(),
                vectors.dim
            )));
        }
        if record.vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(err(format!(
                "document `{}` has non-finite values",
                record.doc_id
            )));
        }
        vectors.insert(record.doc_id, record.vectors);
    }
    out.ok_or(BridgingError::Vectors {
        line: 0,
        message: "missing {\"dim\": D} header".into(),
    })
}

pub fn load_contextual_vectors(path: impl AsRef<Path>) -> Result<ContextualVectors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| BridgingError::io(path, e))?;
    parse_contextual_vectors(BufReader::new(file))
}
