//! End-to-end query flow: avoid routing, fair-context synthesis, normal
//! retrieval, pool construction, debias-guided reranking, prompt assembly
//! and generation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{classify_bias_tag, DocKind, Document, Repository, TagLexicon, NO_TAG};
use crate::counterfactual::{synthesize_fair, AttributeLexicon, FairCandidate};
use crate::embedding::{Embedder, Embedding, EmbeddingError};
use crate::http::{JsonClient, TransportError};
use crate::rerank::{rerank, RerankError, RerankTrace, RerankerState, Theta};
use crate::retrieval::{build_pool, retrieve_normal, route_avoid, CandidatePool, RetrievalError, RetrievalParams};
use crate::scoring::TextScorer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Embed,
    RouteAvoid,
    Synthesize,
    RetrieveNormal,
    BuildPool,
    Rerank,
    Generate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Embed => "embed",
            Stage::RouteAvoid => "route-avoid",
            Stage::Synthesize => "synthesize",
            Stage::RetrieveNormal => "retrieve-normal",
            Stage::BuildPool => "build-pool",
            Stage::Rerank => "rerank",
            Stage::Generate => "generate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("avoid repository is empty; the pipeline needs at least one bias document")]
    EmptyAvoidRepository,
    #[error("[{stage}] {source}")]
    Embedding {
        stage: Stage,
        #[source]
        source: EmbeddingError,
    },
    #[error("[{stage}] {source}")]
    Retrieval {
        stage: Stage,
        #[source]
        source: RetrievalError,
    },
    #[error("[rerank] {0}")]
    Rerank(#[from] RerankError),
    #[error("[generate] {0}")]
    Generation(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn at_embed(stage: Stage) -> impl FnOnce(EmbeddingError) -> PipelineError {
    move |source| PipelineError::Embedding { stage, source }
}

fn at_retrieval(stage: Stage) -> impl FnOnce(RetrievalError) -> PipelineError {
    move |source| PipelineError::Retrieval { stage, source }
}

/// An embedded, tagged user query.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub embedding: Embedding,
    pub tag: String,
}

impl Query {
    pub fn new(text: &str, embedder: &dyn Embedder, tags: Option<&TagLexicon>) -> std::result::Result<Self, EmbeddingError> {
        let embedding = embedder.embed(text)?;
        if embedding.is_degenerate() {
            return Err(EmbeddingError::Degenerate);
        }
        Ok(Self {
            text: text.to_string(),
            embedding,
            tag: tags.map_or_else(|| NO_TAG.to_string(), |l| classify_bias_tag(text, l)),
        })
    }
}

/// Fixed prompt template; contexts are listed in rank order.
pub fn assemble_prompt<S: AsRef<str>>(query: &str, contexts: &[S]) -> String {
    let mut p = String::from("Use the following context to answer. Treat all demographic groups equally.\nContext:\n");
    for c in contexts {
        p.push_str("- ");
        p.push_str(c.as_ref());
        p.push('\n');
    }
    p.push_str("Question: ");
    p.push_str(query);
    p.push_str("\nAnswer:");
    p
}

pub trait GenerationClient: Send + Sync {
    fn generate(&self, prompt: &str) -> std::result::Result<String, TransportError>;
}

/// Test-mode client that echoes the prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullGenerator;

impl GenerationClient for NullGenerator {
    fn generate(&self, prompt: &str) -> std::result::Result<String, TransportError> {
        Ok(prompt.to_string())
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// Client for `POST {endpoint}/generate`.
#[derive(Debug)]
pub struct RemoteGenerator {
    client: JsonClient,
    max_tokens: usize,
}

impl RemoteGenerator {
    pub fn new(endpoint: &str, max_tokens: usize, retries: u32) -> Self {
        Self {
            client: JsonClient::new(endpoint, retries, 4),
            max_tokens,
        }
    }
}

impl GenerationClient for RemoteGenerator {
    fn generate(&self, prompt: &str) -> std::result::Result<String, TransportError> {
        let resp: GenerateResponse = self.client.post(
            "generate",
            &GenerateRequest {
                prompt,
                max_tokens: self.max_tokens,
            },
        )?;
        Ok(resp.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Null,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_max_tokens() -> usize {
    256
}

fn default_retries() -> u32 {
    2
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Null,
            endpoint: None,
            max_tokens: default_max_tokens(),
            retries: default_retries(),
        }
    }
}

impl GeneratorConfig {
    pub fn build(&self) -> std::result::Result<Box<dyn GenerationClient>, String> {
        match self.kind {
            GeneratorKind::Null => Ok(Box::new(NullGenerator)),
            GeneratorKind::Remote => match self.endpoint.as_deref() {
                Some(e) if !e.is_empty() => Ok(Box::new(RemoteGenerator::new(e, self.max_tokens, self.retries))),
                _ => Err("remote generator requires an endpoint".into()),
            },
        }
    }
}

/// Output of the context-synthesis half (routing, synthesis, retrieval, pool).
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub query: Query,
    pub avoid_ids: Vec<String>,
    pub fair: Vec<FairCandidate>,
    pub normal_ids: Vec<String>,
    pub pool: CandidatePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub id: String,
    pub kind: DocKind,
    pub text: String,
    pub score: f64,
    /// Avoid document a fair-synth context was derived from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub query: String,
    pub tag: String,
    pub avoid_ids: Vec<String>,
    pub fair: Vec<FairCandidate>,
    pub pool_size: usize,
    pub pool_size_filtered: usize,
    pub contexts: Vec<ContextEntry>,
    pub prompt: String,
    pub generation: String,
    pub theta: Theta,
    pub trace: RerankTrace,
}

/// Repositories, lexicon, scorer and clients for a run. Read-only; the
/// reranker state is passed in and returned explicitly.
pub struct Pipeline {
    pub avoid: Repository,
    pub normal: Option<Repository>,
    pub embedder: Box<dyn Embedder>,
    pub lexicon: AttributeLexicon,
    pub scorer: Box<dyn TextScorer>,
    pub tags: Option<TagLexicon>,
    pub params: RetrievalParams,
    pub generator: Box<dyn GenerationClient>,
}

impl Pipeline {
    pub fn query(&self, text: &str) -> Result<Query> {
        Query::new(text, self.embedder.as_ref(), self.tags.as_ref()).map_err(at_embed(Stage::Embed))
    }

    /// Route to the avoid set, synthesize counterfactuals, retrieve normal
    /// documents and build the candidate pool.
    pub fn synthesize(&self, text: &str) -> Result<Synthesis> {
        if self.avoid.is_empty() {
            return Err(PipelineError::EmptyAvoidRepository);
        }
        let query = self.query(text)?;
        let a_q: Vec<Document> = route_avoid(&query, &self.avoid, &self.params)
            .map_err(at_retrieval(Stage::RouteAvoid))?
            .hits
            .into_iter()
            .map(|h| h.doc.clone())
            .collect();
        let synth = synthesize_fair(&a_q, &query, &self.lexicon, self.scorer.as_ref());
        let mut fair_docs = Vec::with_capacity(synth.candidates.len());
        if !synth.candidates.is_empty() {
            let texts: Vec<&str> = synth.candidates.iter().map(|c| c.text.as_str()).collect();
            let embs = self.embedder.embed_batch(&texts).map_err(at_embed(Stage::Synthesize))?;
            for (c, e) in synth.candidates.iter().zip(embs) {
                if e.is_degenerate() {
                    log::warn!("fair candidate {} embedded to the zero vector; skipped", c.id());
                    continue;
                }
                fair_docs.push(Document::new(c.id(), c.text.clone(), DocKind::FairSynth, c.tags.clone(), e));
            }
        }
        let d_q: Vec<Document> = retrieve_normal(&query, self.normal.as_ref(), &self.params)
            .map_err(at_retrieval(Stage::RetrieveNormal))?
            .into_iter()
            .map(|h| h.doc.clone())
            .collect();
        let avoid_ids = a_q.iter().map(|d| d.id.clone()).collect();
        let normal_ids = d_q.iter().map(|d| d.id.clone()).collect();
        let pool = build_pool(&query, a_q, d_q, fair_docs).map_err(at_retrieval(Stage::BuildPool))?;
        Ok(Synthesis {
            query,
            avoid_ids,
            fair: synth.candidates,
            normal_ids,
            pool,
        })
    }

    /// Full query flow. With `learn`, `θ` takes one streaming step on this
    /// query's pool before selection; the updated state is in the result.
    pub fn answer_query(&self, text: &str, state: &RerankerState, learn: bool) -> Result<(PipelineResult, RerankerState)> {
        let synth = self.synthesize(text)?;
        let outcome = rerank(synth.pool, state, learn)?;
        let contexts: Vec<ContextEntry> = outcome
            .selected
            .iter()
            .map(|r| {
                let doc = &r.candidate.doc;
                ContextEntry {
                    id: doc.id.clone(),
                    kind: doc.kind,
                    text: doc.text.clone(),
                    score: r.score,
                    source_id: synth
                        .fair
                        .iter()
                        .find(|f| f.id() == doc.id)
                        .map(|f| f.source_id.clone()),
                }
            })
            .collect();
        let texts: Vec<&str> = contexts.iter().map(|c| c.text.as_str()).collect();
        let prompt = assemble_prompt(text, &texts);
        let generation = self.generator.generate(&prompt)?;
        let result = PipelineResult {
            query: synth.query.text,
            tag: synth.query.tag,
            avoid_ids: synth.avoid_ids,
            fair: synth.fair,
            pool_size: outcome.pool_before_filter,
            pool_size_filtered: outcome.pool_after_filter,
            contexts,
            prompt,
            generation,
            theta: outcome.state.theta,
            trace: outcome.trace,
        };
        Ok((result, outcome.state))
    }

    /// Ranked context texts under a frozen `θ`.
    pub fn contexts(&self, text: &str, state: &RerankerState) -> Result<Vec<String>> {
        let synth = self.synthesize(text)?;
        let outcome = rerank(synth.pool, state, false)?;
        Ok(outcome.selected.into_iter().map(|r| r.candidate.doc.text).collect())
    }
}
