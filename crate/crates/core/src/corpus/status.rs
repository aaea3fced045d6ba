use serde::{Deserialize, Serialize};

use super::{Corpus, Document};

/// Information status of a mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InfoStatus {
    /// Discourse-new: introduces an entity (includes singletons and cluster-initial mentions).
    Dn,
    /// Discourse-old: a non-first mention of a multi-mention cluster.
    Do,
    /// Anaphor of a gold bridging link; wins over `Do`.
    Bridging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatusCounts {
    pub dn: usize,
    pub r#do: usize,
    pub bridging: usize,
}

impl StatusCounts {
    pub fn total(&self) -> usize {
        self.dn + self.r#do + self.bridging
    }

    pub fn add(&mut self, status: InfoStatus) {
        match status {
            InfoStatus::Dn => self.dn += 1,
            InfoStatus::Do => self.r#do += 1,
            InfoStatus::Bridging => self.bridging += 1,
        }
    }

    pub fn of(statuses: &[Vec<InfoStatus>]) -> Self {
        let mut counts = Self::default();
        statuses.iter().flatten().for_each(|&s| counts.add(s));
        counts
    }
}

pub fn classify_document(doc: &Document) -> Vec<InfoStatus> {
    (0..doc.mentions.len())
        .map(|m| {
            if doc.is_bridging_anaphor(m) {
                InfoStatus::Bridging
            } else if doc
                .cluster_of(m)
                .is_some_and(|c| doc.clusters[c].len() >= 2 && doc.clusters[c][0] != m)
            {
                InfoStatus::Do
            } else {
                InfoStatus::Dn
            }
        })
        .collect()
}

/// Per-document, per-mention information status.
pub fn classify_information_status(corpus: &Corpus) -> Vec<Vec<InfoStatus>> {
    corpus.documents.iter().map(classify_document).collect()
}
