//! Annotated documents: tokens, mentions, coreference clusters and bridging
//! links, plus the line-delimited corpus format they are read from.
//!
//! Each line of a corpus file is one JSON document record:
//!
//! ```text
//! {"doc_id": "d1",
//!  "sentences": [["The", "house"], ["The", "door", "was", "red"]],
//!  "mentions": [{"id": "m1", "start": 0, "end": 1}, {"id": "m2", "start": 2, "end": 3}],
//!  "clusters": [],
//!  "bridging": [{"anaphor": "m2", "antecedent": "m1", "relation": "POSS"}]}
//! ```
//!
//! Token indices are document-level and `end` is inclusive. After loading,
//! mentions are sorted by `(start, end)` and every cross-reference is an
//! index into that order.

mod folds;
mod status;
mod vectors;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BridgingError, Result};

pub use folds::{split_folds, Fold};
pub use status::{classify_document, classify_information_status, InfoStatus, StatusCounts};
pub use vectors::{
    load_contextual_vectors, load_static_vectors, parse_contextual_vectors, parse_static_vectors,
    ContextualVectors, StaticVectors, UNKNOWN_TOKEN,
};

/// Semantic relation annotated on a bridging link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "SUBSET", alias = "subset")]
    Subset,
    #[serde(rename = "ELEMENT", alias = "element")]
    Element,
    #[serde(rename = "POSS", alias = "poss")]
    Poss,
    #[serde(rename = "OTHER", alias = "other")]
    Other,
    #[serde(rename = "UNDERSP-REL", alias = "undersp-rel")]
    UnderspRel,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Subset,
        Relation::Element,
        Relation::Poss,
        Relation::Other,
        Relation::UnderspRel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Relation::Subset => "SUBSET",
            Relation::Element => "ELEMENT",
            Relation::Poss => "POSS",
            Relation::Other => "OTHER",
            Relation::UnderspRel => "UNDERSP-REL",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Bridging link between mention indices of one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgingLink {
    pub anaphor: usize,
    pub antecedent: usize,
    pub relation: Option<Relation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    /// Sorted by `(start, end)`.
    pub mentions: Vec<Mention>,
    /// Mention indices per cluster, ascending.
    pub clusters: Vec<Vec<usize>>,
    pub links: Vec<BridgingLink>,
    cluster_of: Vec<Option<usize>>,
    link_of: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub anaphor: String,
    pub antecedent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
}

/// Wire form of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    #[serde(default)]
    pub mentions: Vec<MentionRecord>,
    #[serde(default)]
    pub clusters: Vec<Vec<String>>,
    #[serde(default)]
    pub bridging: Vec<LinkRecord>,
}

impl Document {
    pub fn from_record(record: DocumentRecord) -> std::result::Result<Self, String> {
        let DocumentRecord {
            doc_id,
            sentences,
            mentions,
            clusters,
            bridging,
        } = record;
        if let Some(i) = sentences.iter().position(Vec::is_empty) {
            return Err(format!("document `{doc_id}`: sentence {i} is empty"));
        }
        let tokens: usize = sentences.iter().map(Vec::len).sum();

        let mut mentions: Vec<Mention> = mentions
            .into_iter()
            .map(|m| Mention {
                id: m.id,
                start: m.start,
                end: m.end,
            })
            .collect();
        let mut ids = HashSet::new();
        let mut spans = HashSet::new();
        for m in &mentions {
            if m.start > m.end || m.end >= tokens {
                return Err(format!(
                    "document `{doc_id}`: mention `{}` span ({}, {}) outside 0..{tokens}",
                    m.id, m.start, m.end
                ));
            }
            if !ids.insert(m.id.as_str()) {
                return Err(format!(
                    "document `{doc_id}`: duplicate mention id `{}`",
                    m.id
                ));
            }
            if !spans.insert((m.start, m.end)) {
                return Err(format!(
                    "document `{doc_id}`: mention `{}` repeats span ({}, {})",
                    m.id, m.start, m.end
                ));
            }
        }
        mentions.sort_by_key(|m| (m.start, m.end));
        let index: HashMap<&str, usize> = mentions
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.as_str(), i))
            .collect();
        let resolve = |id: &str, what: &str| {
            index.get(id).copied().ok_or_else(|| {
                format!("document `{doc_id}`: {what} refers to unknown mention `{id}`")
            })
        };

        let mut cluster_of = vec![None; mentions.len()];
        let mut resolved_clusters = Vec::with_capacity(clusters.len());
        for (c, members) in clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(format!("document `{doc_id}`: cluster {c} is empty"));
            }
            let mut idx = Vec::with_capacity(members.len());
            for id in members {
                let m = resolve(id, "cluster")?;
                if cluster_of[m].is_some() {
                    return Err(format!(
                        "document `{doc_id}`: mention `{id}` belongs to more than one cluster"
                    ));
                }
                cluster_of[m] = Some(resolved_clusters.len());
                idx.push(m);
            }
            idx.sort_unstable();
            resolved_clusters.push(idx);
        }

        let mut link_of = vec![None; mentions.len()];
        let mut links = Vec::with_capacity(bridging.len());
        for link in &bridging {
            let anaphor = resolve(&link.anaphor, "bridging link")?;
            let antecedent = resolve(&link.antecedent, "bridging link")?;
            if antecedent >= anaphor {
                return Err(format!(
                    "document `{doc_id}`: antecedent `{}` does not precede anaphor `{}`",
                    link.antecedent, link.anaphor
                ));
            }
            if link_of[anaphor].is_some() {
                return Err(format!(
                    "document `{doc_id}`: anaphor `{}` appears in more than one bridging link",
                    link.anaphor
                ));
            }
            link_of[anaphor] = Some(links.len());
            links.push(BridgingLink {
                anaphor,
                antecedent,
                relation: link.relation,
            });
        }

        Ok(Document {
            id: doc_id,
            sentences,
            mentions,
            clusters: resolved_clusters,
            links,
            cluster_of,
            link_of,
        })
    }

    pub fn to_record(&self) -> DocumentRecord {
        let id = |i: usize| self.mentions[i].id.clone();
        DocumentRecord {
            doc_id: self.id.clone(),
            sentences: self.sentences.clone(),
            mentions: self
                .mentions
                .iter()
                .map(|m| MentionRecord {
                    id: m.id.clone(),
                    start: m.start,
                    end: m.end,
                })
                .collect(),
            clusters: self
                .clusters
                .iter()
                .map(|c| c.iter().map(|&m| id(m)).collect())
                .collect(),
            bridging: self
                .links
                .iter()
                .map(|l| LinkRecord {
                    anaphor: id(l.anaphor),
                    antecedent: id(l.antecedent),
                    relation: l.relation,
                })
                .collect(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(String::as_str)
    }

    /// Document-level `(start, len)` of each sentence.
    pub fn sentence_spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.sentences
            .iter()
            .map(|s| {
                let span = (start, s.len());
                start += s.len();
                span
            })
            .collect()
    }

    pub fn cluster_of(&self, mention: usize) -> Option<usize> {
        self.cluster_of[mention]
    }

    /// Bridging link whose anaphor is `mention`.
    pub fn link_for_anaphor(&self, mention: usize) -> Option<&BridgingLink> {
        self.link_of[mention].map(|l| &self.links[l])
    }

    pub fn is_bridging_anaphor(&self, mention: usize) -> bool {
        self.link_of[mention].is_some()
    }

    /// True when `a` and `b` are the same mention or share a cluster.
    pub fn same_entity(&self, a: usize, b: usize) -> bool {
        a == b || matches!((self.cluster_of[a], self.cluster_of[b]), (Some(x), Some(y)) if x == y)
    }

    pub fn mention_index(&self, id: &str) -> Option<usize> {
        self.mentions.iter().position(|m| m.id == id)
    }
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, d) in documents.iter().enumerate() {
            if !seen.insert(d.id.as_str()) {
                return Err(BridgingError::Corpus {
                    line: i + 1,
                    message: format!("duplicate doc_id `{}`", d.id),
                });
            }
        }
        Ok(Self { documents })
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut documents = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| BridgingError::Corpus {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: DocumentRecord =
                serde_json::from_str(&line).map_err(|e| BridgingError::Corpus {
                    line: line_no,
                    message: format!("malformed record: {e}"),
                })?;
            let doc = Document::from_record(record).map_err(|message| BridgingError::Corpus {
                line: line_no,
                message,
            })?;
            if !seen.insert(doc.id.clone()) {
                return Err(BridgingError::Corpus {
                    line: line_no,
                    message: format!("duplicate doc_id `{}`", doc.id),
                });
            }
            documents.push(doc);
        }
        Ok(Self { documents })
    }

    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        for d in &self.documents {
            serde_json::to_writer(&mut out, &d.to_record())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| BridgingError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| BridgingError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn num_mentions(&self) -> usize {
        self.documents.iter().map(|d| d.mentions.len()).sum()
    }

    pub fn num_clusters(&self) -> usize {
        self.documents.iter().map(|d| d.clusters.len()).sum()
    }

    pub fn num_links(&self) -> usize {
        self.documents.iter().map(|d| d.links.len()).sum()
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Sub-corpus with the documents at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            documents: indices.iter().map(|&i| self.documents[i].clone()).collect(),
        }
    }

    /// Every character of every token, sorted and deduplicated.
    pub fn characters(&self) -> Vec<char> {
        let mut chars: Vec<char> = self
            .documents
            .iter()
            .flat_map(|d| d.tokens().flat_map(str::chars).collect::<Vec<_>>())
            .collect();
        chars.sort_unstable();
        chars.dedup();
        chars
    }
}

/// Reads and validates a corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| BridgingError::io(path, e))?;
    Corpus::parse(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Corpus> {
        Corpus::parse(s.as_bytes())
    }

    const ONE_LINK: &str = r#"{"doc_id":"d1","sentences":[["The","house"],["The","door","was","red"]],"mentions":[{"id":"m2","start":2,"end":3},{"id":"m1","start":0,"end":1}],"clusters":[],"bridging":[{"anaphor":"m2","antecedent":"m1"}]}"#;

    #[test]
    fn loads_a_single_document() {
        let c = parse(ONE_LINK).unwrap();
        assert_eq!(
            (c.len(), c.num_mentions(), c.num_clusters(), c.num_links()),
            (1, 2, 0, 1)
        );
        let d = &c.documents[0];
        assert_eq!(d.mentions[0].id, "m1");
        assert_eq!(
            d.links[0],
            BridgingLink {
                anaphor: 1,
                antecedent: 0,
                relation: None
            }
        );
        assert_eq!(d.num_tokens(), 6);
    }

    #[test]
    fn antecedent_after_anaphor_names_both_mentions() {
        let bad = ONE_LINK.replace(
            r#""anaphor":"m2","antecedent":"m1""#,
            r#""anaphor":"m1","antecedent":"m2""#,
        );
        let err = parse(&bad).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(err.contains("`m1`") && err.contains("`m2`"), "{err}");
    }

    #[test]
    fn dangling_cluster_member_is_rejected() {
        let bad = ONE_LINK.replace(r#""clusters":[]"#, r#""clusters":[["m1","m9"]]"#);
        let err = parse(&bad).unwrap_err().to_string();
        assert!(err.contains("m9"), "{err}");
    }

    #[test]
    fn malformed_record_reports_its_line() {
        let text = format!("{ONE_LINK}\n\n{{\"doc_id\": 3}}\n");
        match parse(&text).unwrap_err() {
            BridgingError::Corpus { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rejects_invalid_structure() {
        let cases = [
            ONE_LINK.replace(r#"["The","house"]"#, "[]"),
            ONE_LINK.replace(r#""end":3"#, r#""end":6"#),
            ONE_LINK.replace(r#""start":2,"end":3"#, r#""start":0,"end":1"#),
            ONE_LINK.replace(r#""clusters":[]"#, r#""clusters":[["m1"],["m1","m2"]]"#),
            ONE_LINK.replace(r#""clusters":[]"#, r#""clusters":[[]]"#),
            ONE_LINK.replace(
                r#""bridging":[{"anaphor":"m2","antecedent":"m1"}]"#,
                r#""bridging":[{"anaphor":"m2","antecedent":"m1"},{"anaphor":"m2","antecedent":"m1"}]"#,
            ),
            format!("{ONE_LINK}\n{ONE_LINK}"),
        ];
        for case in cases {
            assert!(parse(&case).is_err(), "accepted {case}");
        }
    }

    #[test]
    fn relations_parse_in_either_case() {
        let text = ONE_LINK.replace(
            r#""antecedent":"m1""#,
            r#""antecedent":"m1","relation":"undersp-rel""#,
        );
        let c = parse(&text).unwrap();
        assert_eq!(c.documents[0].links[0].relation, Some(Relation::UnderspRel));
        let record = serde_json::to_string(&c.documents[0].to_record()).unwrap();
        assert!(record.contains("UNDERSP-REL"));
    }
}
