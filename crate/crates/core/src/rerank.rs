//! Debias-guided reranking with an online, simplex-constrained listwise
//! update.
//!
//! Each candidate `c` carries two signals: relevance `s_q(c) = sim(q, c)` and
//! distance-from-avoid `s_a(c) = 1 - max_a sim(c, a)`. After min-max
//! normalization over the pool they form the feature vector
//! `φ(c) = (s̃_q, s̃_a)`, scored linearly as `S_θ(c) = θ·φ(c)` with `θ` on the
//! 2-simplex.
//!
//! `θ` is learned per query by one projected gradient step on the listwise
//! cross-entropy between `p_θ = softmax(S_θ)` and a fixed target
//! `y = softmax(û)`, where `û` is the min-max normalized utility
//! `u = s̃_q + s̃_a`. The step size is chosen by halving backtracking so the
//! loss never increases.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocKind, Document};
use crate::embedding::{cosine, Embedding, EmbeddingError};
use crate::retrieval::CandidatePool;

/// Observable tolerance for `θ₁ + θ₂ = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RerankError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error(
        "all {} candidates exceed tau_avoid = {tau}; closest max-similarity {:.4}; consider relaxing tau_avoid",
        .max_sims.len(),
        .max_sims.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min)
    )]
    AllFiltered { tau: f64, max_sims: Vec<(String, f64)> },
    #[error("candidate {0:?} has not been normalized")]
    Unnormalized(String),
    #[error("invalid reranker state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub type Result<T> = std::result::Result<T, RerankError>;

/// Weights on the 2-simplex: `(relevance, avoid_distance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Theta([f64; 2]);

impl Theta {
    pub fn new(relevance: f64, avoid_distance: f64) -> Result<Self> {
        let t = [relevance, avoid_distance];
        if t.iter().any(|v| !v.is_finite() || *v < 0.0) || (t[0] + t[1] - 1.0).abs() > SIMPLEX_TOL {
            return Err(RerankError::InvalidState(format!("theta {t:?} is not on the 2-simplex")));
        }
        Ok(Self(t))
    }

    pub fn barycenter() -> Self {
        Self([0.5, 0.5])
    }

    pub fn relevance(&self) -> f64 {
        self.0[0]
    }

    pub fn avoid_distance(&self) -> f64 {
        self.0[1]
    }

    pub fn as_array(&self) -> [f64; 2] {
        self.0
    }
}

impl TryFrom<[f64; 2]> for Theta {
    type Error = RerankError;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<Theta> for [f64; 2] {
    fn from(t: Theta) -> Self {
        t.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankerState {
    pub theta: Theta,
    /// Initial step size of the line search.
    pub eta0: f64,
    /// Normalization guard.
    pub epsilon: f64,
    pub tau_avoid: f64,
    pub k_final: usize,
    pub max_backtracks: u32,
}

impl Default for RerankerState {
    fn default() -> Self {
        Self {
            theta: Theta::barycenter(),
            eta0: 0.1,
            epsilon: 1e-9,
            tau_avoid: 0.9,
            k_final: 4,
            max_backtracks: 20,
        }
    }
}

impl RerankerState {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RerankError::InvalidState(m.to_string()));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("eta0 must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau_avoid) {
            return bad("tau_avoid must be in [0, 1]");
        }
        if self.k_final == 0 {
            return bad("k_final must be positive");
        }
        Theta::new(self.theta.relevance(), self.theta.avoid_distance()).map(|_| ())
    }
}

/// Normalized feature vector `φ(c) = (s̃_q, s̃_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub relevance: f64,
    pub avoid_distance: f64,
}

impl Features {
    pub fn as_array(&self) -> [f64; 2] {
        [self.relevance, self.avoid_distance]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc: Document,
    /// Relevance `sim(q, c)`.
    pub s_q: f64,
    /// Distance-from-avoid `1 - max_a sim(c, a)`.
    pub s_a: f64,
    /// Set by [`normalize_pool`].
    pub normalized: Option<Features>,
}

impl Candidate {
    pub fn new(doc: Document, s_q: f64, s_a: f64) -> Self {
        Self {
            doc,
            s_q,
            s_a,
            normalized: None,
        }
    }

    pub fn features(&self) -> Result<Features> {
        self.normalized
            .ok_or_else(|| RerankError::Unnormalized(self.doc.id.clone()))
    }
}

pub fn score_relevance(query: &Embedding, candidate: &Embedding) -> std::result::Result<f64, EmbeddingError> {
    cosine(query, candidate)
}

/// Largest similarity between `candidate` and any avoid document; `None`
/// for an empty avoid set.
pub fn max_avoid_similarity(candidate: &Embedding, avoid_set: &[Document]) -> std::result::Result<Option<f64>, EmbeddingError> {
    let mut best: Option<f64> = None;
    for a in avoid_set {
        let s = cosine(candidate, &a.embedding)?;
        best = Some(best.map_or(s, |b: f64| b.max(s)));
    }
    Ok(best)
}

/// `1 - max_a sim(c, a)`; an empty avoid set gives 1.0.
pub fn score_avoid_distance(candidate: &Embedding, avoid_set: &[Document]) -> std::result::Result<f64, EmbeddingError> {
    Ok(max_avoid_similarity(candidate, avoid_set)?.map_or(1.0, |m| 1.0 - m))
}

/// Candidates removed by [`filter_pool`], with their max avoid-similarity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filtered {
    pub removed: Vec<(String, f64)>,
}

/// Keep candidates whose max similarity to the avoid set is `<= tau`,
/// preserving order.
pub fn filter_pool(mut pool: CandidatePool, tau: f64) -> Result<(CandidatePool, Filtered)> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    let mut kept = Vec::with_capacity(pool.members.len());
    let mut filtered = Filtered::default();
    for c in pool.members {
        match max_avoid_similarity(&c.doc.embedding, &pool.avoid_set)? {
            Some(m) if m > tau => filtered.removed.push((c.doc.id.clone(), m)),
            _ => kept.push(c),
        }
    }
    if kept.is_empty() {
        return Err(RerankError::AllFiltered {
            tau,
            max_sims: filtered.removed,
        });
    }
    pool.members = kept;
    Ok((pool, filtered))
}

/// Min-max normalize `values` to `[0, 1]` as `(v - min) / (max - min + eps)`,
/// clipped. A spread below `eps` maps every value to 0.5.
pub fn min_max(values: &[f64], eps: f64) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread = hi - lo;
    if spread.is_nan() || spread < eps {
        return vec![0.5; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (spread + eps)).clamp(0.0, 1.0))
        .collect()
}

/// Per-pool normalization of both signals.
pub fn normalize_pool(mut pool: CandidatePool, eps: f64) -> Result<CandidatePool> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    let sq: Vec<f64> = pool.members.iter().map(|c| c.s_q).collect();
    let sa: Vec<f64> = pool.members.iter().map(|c| c.s_a).collect();
    let (nq, na) = (min_max(&sq, eps), min_max(&sa, eps));
    for (c, (q, a)) in pool.members.iter_mut().zip(nq.into_iter().zip(na)) {
        c.normalized = Some(Features {
            relevance: q,
            avoid_distance: a,
        });
    }
    Ok(pool)
}

fn dot(theta: [f64; 2], phi: [f64; 2]) -> f64 {
    theta[0] * phi[0] + theta[1] * phi[1]
}

/// `S_θ(c) = θ₁·s̃_q + θ₂·s̃_a`.
pub fn score_linear(candidate: &Candidate, theta: Theta) -> Result<f64> {
    Ok(dot(theta.as_array(), candidate.features()?.as_array()))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

fn pool_features(pool: &CandidatePool) -> Result<Vec<[f64; 2]>> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    pool.members.iter().map(|c| Ok(c.features()?.as_array())).collect()
}

/// `p_θ = softmax(S_θ)` over the pool.
pub fn list_distribution(pool: &CandidatePool, theta: Theta) -> Result<Vec<f64>> {
    let feats = pool_features(pool)?;
    Ok(softmax(&feats.iter().map(|f| dot(theta.as_array(), *f)).collect::<Vec<_>>()))
}

/// Target `y = softmax(minmax(s̃_q + s̃_a))`, independent of `θ`.
pub fn target_from_features(features: &[[f64; 2]], eps: f64) -> Vec<f64> {
    let u: Vec<f64> = features.iter().map(|f| f[0] + f[1]).collect();
    let (lo, hi) = u
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let u_hat: Vec<f64> = if hi - lo < eps {
        vec![0.5; u.len()]
    } else {
        u.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    softmax(&u_hat)
}

pub fn target_distribution(pool: &CandidatePool, eps: f64) -> Result<Vec<f64>> {
    Ok(target_from_features(&pool_features(pool)?, eps))
}

/// Listwise cross-entropy over a fixed pool: features and target.
#[derive(Debug, Clone, PartialEq)]
pub struct ListwiseObjective {
    features: Vec<[f64; 2]>,
    target: Vec<f64>,
}

impl ListwiseObjective {
    /// Objective with an explicit target distribution.
    pub fn new(features: Vec<[f64; 2]>, target: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(RerankError::EmptyPool);
        }
        if features.len() != target.len() {
            return Err(RerankError::InvalidState(format!(
                "{} features but {} target entries",
                features.len(),
                target.len()
            )));
        }
        Ok(Self { features, target })
    }

    /// Objective with the utility-softmax target.
    pub fn from_features(features: Vec<[f64; 2]>, eps: f64) -> Result<Self> {
        let target = target_from_features(&features, eps);
        Self::new(features, target)
    }

    pub fn from_pool(pool: &CandidatePool, eps: f64) -> Result<Self> {
        Self::from_features(pool_features(pool)?, eps)
    }

    pub fn features(&self) -> &[[f64; 2]] {
        &self.features
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn scores(&self, theta: [f64; 2]) -> Vec<f64> {
        self.features.iter().map(|f| dot(theta, *f)).collect()
    }

    pub fn distribution(&self, theta: [f64; 2]) -> Vec<f64> {
        softmax(&self.scores(theta))
    }

    /// `L(θ) = -Σ y log p_θ = logsumexp(S) - Σ y·S`, valid for any `θ ∈ R²`.
    pub fn loss(&self, theta: [f64; 2]) -> f64 {
        let s = self.scores(theta);
        let lse = log_sum_exp(&s);
        let ys: f64 = self.target.iter().zip(&s).map(|(y, s)| y * s).sum();
        lse * self.target.iter().sum::<f64>() - ys
    }

    /// Loss and gradient `Σ (p_θ - y) φ`.
    pub fn loss_and_grad(&self, theta: [f64; 2]) -> (f64, [f64; 2]) {
        let p = self.distribution(theta);
        let mut g = [0.0; 2];
        for ((pi, yi), f) in p.iter().zip(&self.target).zip(&self.features) {
            let d = pi - yi;
            g[0] += d * f[0];
            g[1] += d * f[1];
        }
        (self.loss(theta), g)
    }
}

/// Euclidean projection onto `{θ ≥ 0, θ₁ + θ₂ = 1}`.
pub fn project_simplex(v: [f64; 2]) -> Theta {
    let shift = (v[0] + v[1] - 1.0) / 2.0;
    let (a, b) = (v[0] - shift, v[1] - shift);
    if a.is_nan() || b.is_nan() {
        return Theta::barycenter();
    }
    if a <= 0.0 {
        Theta([0.0, 1.0])
    } else if b <= 0.0 {
        Theta([1.0, 0.0])
    } else {
        Theta([a, b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateStatus {
    Accepted,
    /// Gradient was exactly zero; `θ` is a fixed point.
    ZeroGradient,
    /// No step size decreased the loss; `θ` kept.
    Skipped,
    /// Learning disabled for this call.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStep {
    pub status: UpdateStatus,
    pub theta_before: Theta,
    pub theta_after: Theta,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad: [f64; 2],
    pub eta: Option<f64>,
    pub backtracks: u32,
}

/// One projected gradient step with halving backtracking:
/// `θ' = Π(θ - η∇L)` for `η = η₀, η₀/2, ...` (at most `max_backtracks`
/// halvings) until `L(θ') <= L(θ)`.
pub fn streaming_step(objective: &ListwiseObjective, state: &RerankerState) -> UpdateStep {
    let theta = state.theta;
    let (loss, grad) = objective.loss_and_grad(theta.as_array());
    let mut step = UpdateStep {
        status: UpdateStatus::ZeroGradient,
        theta_before: theta,
        theta_after: theta,
        loss_before: loss,
        loss_after: loss,
        grad,
        eta: None,
        backtracks: 0,
    };
    if grad == [0.0, 0.0] {
        return step;
    }
    let mut eta = state.eta0;
    for tried in 0..=state.max_backtracks {
        let t = theta.as_array();
        let cand = project_simplex([t[0] - eta * grad[0], t[1] - eta * grad[1]]);
        let l = objective.loss(cand.as_array());
        if l <= loss {
            step.status = UpdateStatus::Accepted;
            step.theta_after = cand;
            step.loss_after = l;
            step.eta = Some(eta);
            step.backtracks = tried;
            return step;
        }
        eta /= 2.0;
    }
    step.status = UpdateStatus::Skipped;
    step.backtracks = state.max_backtracks;
    step
}

/// Update `θ` on a normalized pool; returns the new state and the step record.
pub fn streaming_update(pool: &CandidatePool, state: &RerankerState) -> Result<(RerankerState, UpdateStep)> {
    let objective = ListwiseObjective::from_pool(pool, state.epsilon)?;
    let step = streaming_step(&objective, state);
    let mut next = state.clone();
    next.theta = step.theta_after;
    Ok((next, step))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub candidate: Candidate,
    pub score: f64,
}

/// Order by descending score, ties by ascending id.
fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// The `k` highest-`S_θ` candidates.
pub fn select_topk(pool: &CandidatePool, theta: Theta, k: usize) -> Result<Vec<RankedCandidate>> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    let mut ranked = pool
        .members
        .iter()
        .map(|c| {
            Ok(RankedCandidate {
                score: score_linear(c, theta)?,
                candidate: c.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| by_score_then_id((a.score, &a.candidate.doc.id), (b.score, &b.candidate.doc.id)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Per-candidate trace record. Normalized fields are `None` for filtered
/// candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub id: String,
    pub kind: DocKind,
    pub kept: bool,
    pub max_avoid_sim: Option<f64>,
    pub s_q: f64,
    pub s_a: f64,
    pub s_q_norm: Option<f64>,
    pub s_a_norm: Option<f64>,
    pub score: Option<f64>,
    pub p: Option<f64>,
    pub y: Option<f64>,
}

/// One JSONL line of the rerank trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTrace {
    pub query: String,
    pub update: UpdateStatus,
    pub theta_before: Theta,
    pub theta_after: Theta,
    pub loss_before: f64,
    pub loss_after: f64,
    pub eta: Option<f64>,
    pub backtracks: u32,
    pub candidates: Vec<CandidateTrace>,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RerankOutcome {
    pub selected: Vec<RankedCandidate>,
    pub state: RerankerState,
    pub pool_before_filter: usize,
    pub pool_after_filter: usize,
    pub trace: RerankTrace,
}

/// Filter, normalize, optionally update `θ`, then select the final context set.
pub fn rerank(pool: CandidatePool, state: &RerankerState, learn: bool) -> Result<RerankOutcome> {
    state.validate()?;
    let before = pool.len();
    let raw: Vec<(String, DocKind, f64, f64, Option<f64>)> = pool
        .members
        .iter()
        .map(|c| {
            Ok((
                c.doc.id.clone(),
                c.doc.kind,
                c.s_q,
                c.s_a,
                max_avoid_similarity(&c.doc.embedding, &pool.avoid_set)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (pool, _) = filter_pool(pool, state.tau_avoid)?;
    let pool = normalize_pool(pool, state.epsilon)?;

    let (next, step) = if learn {
        streaming_update(&pool, state)?
    } else {
        let objective = ListwiseObjective::from_pool(&pool, state.epsilon)?;
        let (loss, grad) = objective.loss_and_grad(state.theta.as_array());
        let step = UpdateStep {
            status: UpdateStatus::Disabled,
            theta_before: state.theta,
            theta_after: state.theta,
            loss_before: loss,
            loss_after: loss,
            grad,
            eta: None,
            backtracks: 0,
        };
        (state.clone(), step)
    };

    let selected = select_topk(&pool, next.theta, next.k_final)?;
    let p = list_distribution(&pool, next.theta)?;
    let y = target_distribution(&pool, next.epsilon)?;
    let mut kept = pool.members.iter().zip(p.iter().zip(&y));
    let mut next_kept = kept.next();
    let mut candidates = Vec::with_capacity(raw.len());
    for (id, kind, s_q, s_a, max_sim) in raw {
        let trace = match next_kept {
            Some((c, (pi, yi))) if c.doc.id == id => {
                let f = c.features()?;
                next_kept = kept.next();
                CandidateTrace {
                    id,
                    kind,
                    kept: true,
                    max_avoid_sim: max_sim,
                    s_q,
                    s_a,
                    s_q_norm: Some(f.relevance),
                    s_a_norm: Some(f.avoid_distance),
                    score: Some(dot(next.theta.as_array(), f.as_array())),
                    p: Some(*pi),
                    y: Some(*yi),
                }
            }
            _ => CandidateTrace {
                id,
                kind,
                kept: false,
                max_avoid_sim: max_sim,
                s_q,
                s_a,
                s_q_norm: None,
                s_a_norm: None,
                score: None,
                p: None,
                y: None,
            },
        };
        candidates.push(trace);
    }
    let trace = RerankTrace {
        query: pool.query.text.clone(),
        update: step.status,
        theta_before: step.theta_before,
        theta_after: step.theta_after,
        loss_before: step.loss_before,
        loss_after: step.loss_after,
        eta: step.eta,
        backtracks: step.backtracks,
        candidates,
        selected: selected.iter().map(|r| r.candidate.doc.id.clone()).collect(),
    };
    Ok(RerankOutcome {
        pool_before_filter: before,
        pool_after_filter: pool.len(),
        selected,
        state: next,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NO_TAG;
    use crate::pipeline::Query;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::from_raw(v).unwrap()
    }

    fn doc(id: &str, v: &[f64], kind: DocKind) -> Document {
        Document::new(id, id, kind, vec![], emb(v))
    }

    /// Pool with given normalized features, bypassing embeddings.
    fn feature_pool(features: &[[f64; 2]]) -> CandidatePool {
        let members = features
            .iter()
            .enumerate()
            .map(|(i, f)| Candidate {
                doc: doc(&format!("c{i:02}"), &[1.0, i as f64], DocKind::Normal),
                s_q: f[0],
                s_a: f[1],
                normalized: Some(Features {
                    relevance: f[0],
                    avoid_distance: f[1],
                }),
            })
            .collect();
        CandidatePool {
            query: Query {
                text: "q".into(),
                embedding: emb(&[1.0, 0.0]),
                tag: NO_TAG.into(),
            },
            avoid_set: vec![],
            members,
        }
    }

    #[test]
    fn avoid_distance_cases() {
        let c = emb(&[1.0, 0.0]);
        assert_eq!(score_avoid_distance(&c, &[]).unwrap(), 1.0);
        assert_abs_diff_eq!(score_avoid_distance(&c, &[doc("a", &[2.0, 0.0], DocKind::Avoid)]).unwrap(), 0.0);
        // sims 0.2, 0.9, 0.5 against (1, 0): unit vectors (s, sqrt(1 - s²)).
        let avoid: Vec<Document> = [0.2f64, 0.9, 0.5]
            .iter()
            .enumerate()
            .map(|(i, s)| doc(&format!("a{i}"), &[*s, (1.0 - s * s).sqrt()], DocKind::Avoid))
            .collect();
        assert_abs_diff_eq!(score_avoid_distance(&c, &avoid).unwrap(), 0.1, epsilon = 1e-6);
    }

    #[test]
    fn normalization_cases() {
        let eps = 1e-9;
        let n = min_max(&[0.2, 0.5, 0.8], eps);
        for (a, b) in n.iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() <= 2.0 * eps);
        }
        assert_eq!(min_max(&[0.3, 0.3, 0.3], eps), [0.5; 3]);
        assert_eq!(min_max(&[0.7], eps), [0.5]);
    }

    #[test]
    fn linear_score_cases() {
        let pool = feature_pool(&[[0.4, 0.8]]);
        let c = &pool.members[0];
        assert_eq!(score_linear(c, Theta::new(1.0, 0.0).unwrap()).unwrap(), 0.4);
        assert_abs_diff_eq!(score_linear(c, Theta::barycenter()).unwrap(), 0.6, epsilon = 1e-15);
        let one = feature_pool(&[[0.2, 1.0]]);
        assert_eq!(score_linear(&one.members[0], Theta::new(0.0, 1.0).unwrap()).unwrap(), 1.0);
        let mut raw = c.clone();
        raw.normalized = None;
        assert!(matches!(score_linear(&raw, Theta::barycenter()), Err(RerankError::Unnormalized(_))));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.3, 0.3, 0.3, 0.3]), [0.25; 4]);
        let e = std::f64::consts::E;
        let p = softmax(&[0.0, 1.0]);
        assert_abs_diff_eq!(p[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], e / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.2689, epsilon = 1e-4);
        let shifted = softmax(&[5.0, 6.0]);
        assert_abs_diff_eq!(shifted[0], p[0], epsilon = 1e-15);
    }

    #[test]
    fn target_cases() {
        let y = target_from_features(&[[0.3, 0.3], [0.1, 0.5], [0.6, 0.0]], 1e-9);
        for v in &y {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let e = std::f64::consts::E;
        let y = target_from_features(&[[0.0, 0.0], [1.0, 1.0]], 1e-9);
        assert_abs_diff_eq!(y[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], e / (1.0 + e), epsilon = 1e-15);
    }

    #[test]
    fn loss_at_target_is_entropy() {
        let obj = ListwiseObjective::new(vec![[0.0, 0.0], [1.0, 1.0]], vec![0.5, 0.5]).unwrap();
        // Symmetric features at θ with equal scores: p = y = (0.5, 0.5).
        let obj2 = ListwiseObjective::new(vec![[0.2, 0.7], [0.7, 0.2]], vec![0.5, 0.5]).unwrap();
        let (l, g) = obj2.loss_and_grad([0.5, 0.5]);
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.0, epsilon = 1e-15);
        assert!(obj.loss([0.5, 0.5]) > std::f64::consts::LN_2);
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project_simplex([0.3, 0.7]).as_array(), [0.3, 0.7]);
        let p = project_simplex([0.7, 0.5]).as_array();
        assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.4, epsilon = 1e-15);
        assert_eq!(project_simplex([1.5, -0.2]).as_array(), [1.0, 0.0]);
        assert_eq!(project_simplex([-3.0, 0.0]).as_array(), [0.0, 1.0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let pool = feature_pool(&[[0.2, 0.7], [0.7, 0.2]]);
        let (next, step) = streaming_update(&pool, &RerankerState::default()).unwrap();
        assert_eq!(next.theta, Theta::barycenter());
        assert_eq!(step.status, UpdateStatus::ZeroGradient);
    }

    #[test]
    fn fair_dominant_pool_raises_avoid_weight() {
        // Normal doc: relevant but close to avoid; fair doc: far from avoid.
        let pool = feature_pool(&[[1.0, 0.0], [0.5, 1.0]]);
        let state = RerankerState {
            theta: Theta::new(0.9, 0.1).unwrap(),
            ..Default::default()
        };
        let obj = ListwiseObjective::from_pool(&pool, state.epsilon).unwrap();
        let (_, g) = obj.loss_and_grad([0.9, 0.1]);
        // Direct computation: y = softmax(0, 1), p = softmax(0.9, 0.55).
        let y = softmax(&[0.0, 1.0]);
        let p = softmax(&[0.9, 0.55]);
        let g1 = (p[1] - y[1]) * 1.0;
        assert_abs_diff_eq!(g[1], g1, epsilon = 1e-15);
        assert!(g[1] < 0.0);
        let (next, step) = streaming_update(&pool, &state).unwrap();
        assert_eq!(step.status, UpdateStatus::Accepted);
        assert!(next.theta.avoid_distance() >= state.theta.avoid_distance());
        assert!(step.loss_after <= step.loss_before);
    }

    #[test]
    fn filter_cases() {
        let q = Query {
            text: "q".into(),
            embedding: emb(&[1.0, 0.0]),
            tag: NO_TAG.into(),
        };
        let avoid = vec![doc("a", &[0.0, 1.0], DocKind::Avoid)];
        let members = vec![
            Candidate::new(doc("same", &[0.0, 3.0], DocKind::Normal), 0.0, 0.0),
            Candidate::new(doc("far", &[1.0, 0.0], DocKind::Normal), 1.0, 1.0),
        ];
        let pool = CandidatePool { query: q, avoid_set: avoid, members };
        let (p, f) = filter_pool(pool.clone(), 1.0).unwrap();
        assert_eq!(p.len(), 2);
        assert!(f.removed.is_empty());
        let (p, f) = filter_pool(pool.clone(), 0.9).unwrap();
        assert_eq!(p.ids(), ["far"]);
        assert_eq!(f.removed[0].0, "same");
        let mut only_same = pool;
        only_same.members.truncate(1);
        let err = filter_pool(only_same, 0.9).unwrap_err();
        assert!(matches!(err, RerankError::AllFiltered { .. }));
        assert!(err.to_string().contains("relaxing tau_avoid"));
    }

    #[test]
    fn topk_orders_and_truncates() {
        let pool = feature_pool(&[[0.1, 0.9], [0.8, 0.0], [0.5, 0.5], [0.8, 0.0]]);
        let all = select_topk(&pool, Theta::new(1.0, 0.0).unwrap(), 10).unwrap();
        let ids: Vec<_> = all.iter().map(|r| r.candidate.doc.id.as_str()).collect();
        assert_eq!(ids, ["c01", "c03", "c02", "c00"]);
        assert_eq!(select_topk(&pool, Theta::barycenter(), 2).unwrap().len(), 2);
    }

    #[test]
    fn theta_serde_rejects_off_simplex() {
        assert!(serde_json::from_str::<Theta>("[0.3, 0.7]").is_ok());
        assert!(serde_json::from_str::<Theta>("[0.5, 0.7]").is_err());
        assert!(serde_json::from_str::<Theta>("[-0.1, 1.1]").is_err());
    }

    fn arb_features() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| [a, b]), 1..16)
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one(f in arb_features(), t in 0.0f64..=1.0) {
            let obj = ListwiseObjective::from_features(f, 1e-9).unwrap();
            let p: f64 = obj.distribution([t, 1.0 - t]).iter().sum();
            let y: f64 = obj.target().iter().sum();
            prop_assert!((p - 1.0).abs() <= 1e-9 && (y - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn cross_entropy_bounded_by_entropy(f in arb_features(), t in 0.0f64..=1.0) {
            let obj = ListwiseObjective::from_features(f, 1e-9).unwrap();
            let h: f64 = -obj.target().iter().map(|y| y * y.ln()).sum::<f64>();
            prop_assert!(obj.loss([t, 1.0 - t]) >= h - 1e-12);
        }

        #[test]
        fn ranking_invariant_to_constant_shift(f in arb_features(), t in 0.0f64..=1.0, c in -3.0f64..3.0) {
            let pool = feature_pool(&f);
            let theta = Theta::new(t, 1.0 - t).unwrap();
            let ranked = select_topk(&pool, theta, f.len()).unwrap();
            let mut shifted: Vec<(f64, String)> = ranked.iter().map(|r| (r.score + c, r.candidate.doc.id.clone())).collect();
            shifted.sort_by(|a, b| by_score_then_id((a.0, &a.1), (b.0, &b.1)));
            let ids: Vec<_> = ranked.iter().map(|r| r.candidate.doc.id.clone()).collect();
            prop_assert_eq!(shifted.into_iter().map(|s| s.1).collect::<Vec<_>>(), ids);
        }
    }
}
