//! Sentence log-probability scorers.
//!
//! Used for fluency (perplexity) filtering of counterfactual variants and as
//! the likelihood oracle in benchmark evaluation.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::http::{JsonClient, TransportError};
use crate::text;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("invalid scorer config: {0}")]
    Config(String),
    #[error("scorer returned {actual} scores for {expected} texts")]
    CountMismatch { expected: usize, actual: usize },
    #[error("scorer returned a non-finite log-probability for text #{index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, ScoreError>;

/// Summed log-probability of a text and the number of predicted units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextScore {
    pub logprob: f64,
    pub units: usize,
}

impl TextScore {
    /// `exp(-logprob / units)`.
    pub fn perplexity(&self) -> f64 {
        (-self.logprob / self.units.max(1) as f64).exp()
    }
}

pub trait TextScorer: Send + Sync {
    fn score_batch(&self, texts: &[&str]) -> Result<Vec<TextScore>>;

    fn score(&self, text: &str) -> Result<TextScore> {
        let mut v = self.score_batch(&[text])?;
        match v.len() {
            1 => Ok(v.remove(0)),
            n => Err(ScoreError::CountMismatch { expected: 1, actual: n }),
        }
    }

    /// Sum of token log-probabilities.
    fn log_prob(&self, text: &str) -> Result<f64> {
        Ok(self.score(text)?.logprob)
    }
}

const BOS: char = '\u{2}';
const EOS: char = '\u{3}';

/// Character n-gram language model with add-one smoothing.
///
/// For order `n`, each character (and a final end marker) is predicted from
/// the previous `n - 1` characters, left-padded with a start marker:
/// `p(c | ctx) = (count(ctx, c) + 1) / (count(ctx) + V)` where `V` counts
/// the training characters, the end marker and one unknown slot.
#[derive(Debug, Clone)]
pub struct CharNgramScorer {
    order: usize,
    contexts: HashMap<String, (u32, HashMap<char, u32>)>,
    vocab_size: usize,
}

impl CharNgramScorer {
    pub fn train<S: AsRef<str>>(order: usize, corpus: &[S]) -> Result<Self> {
        if !(2..=5).contains(&order) {
            return Err(ScoreError::Config(format!("char-ngram order must be in [2,5], got {order}")));
        }
        let mut contexts: HashMap<String, (u32, HashMap<char, u32>)> = HashMap::new();
        let mut vocab: HashSet<char> = HashSet::new();
        for t in corpus {
            for (ctx, target) in Self::events(order, t.as_ref()) {
                if target != EOS {
                    vocab.insert(target);
                }
                let entry = contexts.entry(ctx).or_default();
                entry.0 += 1;
                *entry.1.entry(target).or_default() += 1;
            }
        }
        Ok(Self {
            order,
            contexts,
            vocab_size: vocab.len() + 2,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn events(order: usize, text: &str) -> Vec<(String, char)> {
        let mut padded: Vec<char> = std::iter::repeat_n(BOS, order - 1).collect();
        padded.extend(text.chars());
        padded.push(EOS);
        padded
            .windows(order)
            .map(|w| (w[..order - 1].iter().collect(), w[order - 1]))
            .collect()
    }

    pub fn char_prob(&self, context: &str, c: char) -> f64 {
        let (total, next) = self
            .contexts
            .get(context)
            .map(|(t, m)| (*t, m.get(&c).copied().unwrap_or(0)))
            .unwrap_or((0, 0));
        (f64::from(next) + 1.0) / (f64::from(total) + self.vocab_size as f64)
    }

    pub fn score_text(&self, text: &str) -> TextScore {
        let events = Self::events(self.order, text);
        let logprob = events.iter().map(|(ctx, c)| self.char_prob(ctx, *c).ln()).sum();
        TextScore {
            logprob,
            units: events.len(),
        }
    }
}

impl TextScorer for CharNgramScorer {
    fn score_batch(&self, texts: &[&str]) -> Result<Vec<TextScore>> {
        Ok(texts.iter().map(|t| self.score_text(t)).collect())
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprobs: Vec<f64>,
}

/// Client for `POST {endpoint}/score`. Per-text unit count is the number of
/// word tokens, since the service only reports summed log-probabilities.
#[derive(Debug)]
pub struct RemoteScorer {
    client: JsonClient,
}

impl RemoteScorer {
    pub fn new(endpoint: &str, retries: u32) -> Self {
        Self {
            client: JsonClient::new(endpoint, retries, 4),
        }
    }
}

impl TextScorer for RemoteScorer {
    fn score_batch(&self, texts: &[&str]) -> Result<Vec<TextScore>> {
        let resp: ScoreResponse = self.client.post("score", &ScoreRequest { texts })?;
        if resp.logprobs.len() != texts.len() {
            return Err(ScoreError::CountMismatch {
                expected: texts.len(),
                actual: resp.logprobs.len(),
            });
        }
        resp.logprobs
            .iter()
            .zip(texts)
            .enumerate()
            .map(|(index, (&lp, t))| {
                if lp.is_finite() {
                    Ok(TextScore {
                        logprob: lp,
                        units: text::tokenize(t).len().max(1),
                    })
                } else {
                    Err(ScoreError::NonFinite { index })
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    CharNgram,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_order() -> usize {
    3
}

fn default_retries() -> u32 {
    2
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::CharNgram,
            order: default_order(),
            endpoint: None,
            retries: default_retries(),
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ScorerKind::CharNgram if !(2..=5).contains(&self.order) => Err(ScoreError::Config(format!(
                "char-ngram order must be in [2,5], got {}",
                self.order
            ))),
            ScorerKind::Remote if self.endpoint.as_deref().is_none_or(str::is_empty) => {
                Err(ScoreError::Config("remote scorer requires an endpoint".into()))
            }
            _ => Ok(()),
        }
    }

    /// Build the scorer; the char-ngram kind is trained on `corpus`.
    pub fn build<S: AsRef<str>>(&self, corpus: &[S]) -> Result<Box<dyn TextScorer>> {
        self.validate()?;
        Ok(match self.kind {
            ScorerKind::CharNgram => Box::new(CharNgramScorer::train(self.order, corpus)?),
            ScorerKind::Remote => Box::new(RemoteScorer::new(
                self.endpoint.as_deref().unwrap_or_default(),
                self.retries,
            )),
        })
    }
}
