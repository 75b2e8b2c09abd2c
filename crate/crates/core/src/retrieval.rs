//! Exact top-k cosine retrieval and candidate-pool construction.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{DocKind, Document, Repository, NO_TAG};
use crate::embedding::{cosine, Embedding, EmbeddingError};
use crate::pipeline::Query;
use crate::rerank::{score_avoid_distance, score_relevance, Candidate};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("top-k requires k >= 1")]
    ZeroK,
    #[error("candidate pool is empty: no normal or fair-synth documents to rerank")]
    EmptyPool,
    #[error("duplicate candidate id {0:?}")]
    DuplicateId(String),
    #[error("avoid-kind document {0:?} cannot enter the candidate pool")]
    AvoidInPool(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalParams {
    /// Number of avoid documents routed per query; at least 1.
    pub k_avoid: usize,
    /// Number of normal documents retrieved per query; 0 disables normal retrieval.
    pub k_normal: usize,
    /// Restrict routing to avoid documents carrying the query's bias tag.
    #[serde(default)]
    pub same_tag_only: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k_avoid: 5,
            k_normal: 5,
            same_tag_only: false,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_avoid == 0 {
            return Err(RetrievalError::ZeroK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a> {
    pub doc: &'a Document,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK<'a> {
    pub hits: Vec<Hit<'a>>,
    /// The repository held fewer than `k` documents.
    pub truncated: bool,
}

/// Descending similarity, ties by ascending id.
fn rank_order(a: &Hit<'_>, b: &Hit<'_>) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.doc.id.cmp(&b.doc.id))
}

fn top_k_over<'a, I>(query: &Embedding, docs: I, k: usize) -> Result<TopK<'a>>
where
    I: IntoIterator<Item = &'a Document>,
{
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut hits = docs
        .into_iter()
        .map(|doc| Ok(Hit { doc, similarity: cosine(query, &doc.embedding)? }))
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(rank_order);
    let truncated = hits.len() < k;
    hits.truncate(k);
    Ok(TopK { hits, truncated })
}

/// The `k` documents of `repo` most similar to `query` by brute-force cosine.
pub fn top_k<'a>(query: &Embedding, repo: &'a Repository, k: usize) -> Result<TopK<'a>> {
    if !repo.is_empty() && repo.dim() != query.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: repo.dim(),
            actual: query.dim(),
        }
        .into());
    }
    top_k_over(query, repo.documents(), k)
}

/// The query-specific avoid set: top `k_avoid` documents of repository A.
pub fn route_avoid<'a>(query: &Query, avoid: &'a Repository, params: &RetrievalParams) -> Result<TopK<'a>> {
    if params.same_tag_only && query.tag != NO_TAG {
        let tagged = avoid
            .documents()
            .iter()
            .filter(|d| d.tags.contains(&query.tag));
        return top_k_over(&query.embedding, tagged, params.k_avoid);
    }
    top_k(&query.embedding, avoid, params.k_avoid)
}

/// Standard retrieval of `k_normal` documents; empty when there is no normal
/// repository or `k_normal == 0`.
pub fn retrieve_normal<'a>(
    query: &Query,
    normal: Option<&'a Repository>,
    params: &RetrievalParams,
) -> Result<Vec<Hit<'a>>> {
    match normal {
        Some(repo) if params.k_normal > 0 => Ok(top_k(&query.embedding, repo, params.k_normal)?.hits),
        _ => Ok(Vec::new()),
    }
}

/// Union of normal and fair-synth candidates for one query, with raw
/// relevance and distance-from-avoid scores attached.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub query: Query,
    pub avoid_set: Vec<Document>,
    pub members: Vec<Candidate>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.members.iter().map(|c| c.doc.id.as_str()).collect()
    }
}

/// Build the candidate pool `D_q ∪ F_q`.
///
/// Normal documents come first, then fair-synth ones. A text present in both
/// sources keeps only its fair-synth copy; repeated texts within one source
/// keep the first occurrence.
pub fn build_pool(
    query: &Query,
    avoid_set: Vec<Document>,
    normal: Vec<Document>,
    fair: Vec<Document>,
) -> Result<CandidatePool> {
    if normal.is_empty() && fair.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    let fair_texts: HashSet<&str> = fair.iter().map(|d| d.text.as_str()).collect();
    let mut seen_text: HashSet<String> = HashSet::new();
    let mut seen_id: HashMap<String, ()> = HashMap::new();
    let mut docs = Vec::with_capacity(normal.len() + fair.len());
    for d in &normal {
        if fair_texts.contains(d.text.as_str()) {
            log::debug!("normal doc {} duplicates a fair-synth text; fair copy kept", d.id);
            continue;
        }
        if seen_text.insert(d.text.clone()) {
            docs.push(d.clone());
        }
    }
    for d in fair {
        if seen_text.insert(d.text.clone()) {
            docs.push(d);
        }
    }
    let mut members = Vec::with_capacity(docs.len());
    for doc in docs {
        if doc.kind == DocKind::Avoid {
            return Err(RetrievalError::AvoidInPool(doc.id));
        }
        if seen_id.insert(doc.id.clone(), ()).is_some() {
            return Err(RetrievalError::DuplicateId(doc.id));
        }
        let s_q = score_relevance(&query.embedding, &doc.embedding)?;
        let s_a = score_avoid_distance(&doc.embedding, &avoid_set)?;
        members.push(Candidate::new(doc, s_q, s_a));
    }
    Ok(CandidatePool {
        query: query.clone(),
        avoid_set,
        members,
    })
}
