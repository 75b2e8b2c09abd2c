use debiasrag::corpus::{DocKind, Document, RepoName, Repository, TagLexicon};
use debiasrag::counterfactual::AttributeLexicon;
use debiasrag::embedding::{Embedder, HashEmbedder};
use debiasrag::pipeline::{assemble_prompt, NullGenerator, Pipeline, PipelineError};
use debiasrag::rerank::{max_avoid_similarity, RerankError, RerankerState, Theta, UpdateStatus, SIMPLEX_TOL};
use debiasrag::retrieval::RetrievalParams;
use debiasrag::scoring::CharNgramScorer;

const AVOID: [(&str, &str); 3] = [
    ("a1", "the nurse said she was gentle"),
    ("a2", "the engineer said he was strong"),
    ("a3", "the weather was cold"),
];

const NORMAL: [(&str, &str); 5] = [
    ("n1", "the nurse worked on the ward at night"),
    ("n2", "the engineer designed a bridge"),
    ("n3", "hospitals employ many nurses"),
    ("n4", "the nurse said she was gentle and kind"),
    ("n5", "the nurse said she was very gentle"),
];

const QUERY: &str = "What did the nurse say?";

fn embedder() -> HashEmbedder {
    HashEmbedder::new(256, 0).unwrap()
}

fn repo(name: RepoName, kind: DocKind, docs: &[(&str, &str)]) -> Repository {
    let e = embedder();
    let docs = docs
        .iter()
        .map(|(id, text)| Document::new(*id, *text, kind, vec![], e.embed(text).unwrap()))
        .collect();
    Repository::new(name, e.dim(), docs).unwrap()
}

fn lexicon() -> AttributeLexicon {
    AttributeLexicon::from_pairs([
        ("he", "she", Some("gender")),
        ("his", "her", Some("gender")),
        ("man", "woman", Some("gender")),
    ])
    .unwrap()
}

fn pipeline_with(avoid: &[(&str, &str)], normal: Option<&[(&str, &str)]>) -> Pipeline {
    let texts: Vec<&str> = NORMAL.iter().map(|(_, t)| *t).collect();
    Pipeline {
        avoid: repo(RepoName::A, DocKind::Avoid, avoid),
        normal: normal.map(|n| repo(RepoName::D, DocKind::Normal, n)),
        embedder: Box::new(embedder()),
        lexicon: lexicon(),
        scorer: Box::new(CharNgramScorer::train(3, &texts).unwrap()),
        tags: Some(TagLexicon::new([("nurse", "gender"), ("engineer", "gender")]).unwrap()),
        params: RetrievalParams::default(),
        generator: Box::new(NullGenerator),
    }
}

fn pipeline() -> Pipeline {
    pipeline_with(&AVOID, Some(&NORMAL))
}

#[test]
fn answer_query_respects_filter_and_budget() {
    let p = pipeline();
    let state = RerankerState::default();
    let (r, _) = p.answer_query(QUERY, &state, false).unwrap();
    assert!(r.contexts.len() <= state.k_final);
    assert_eq!(r.tag, "gender");
    assert_eq!(r.avoid_ids, ["a1", "a3", "a2"]);
    // a3 has no lexicon token, so only two counterfactuals exist.
    assert_eq!(r.fair.len(), 2);
    assert_eq!(r.pool_size, 7);
    let removed: Vec<_> = r.trace.candidates.iter().filter(|c| !c.kept).map(|c| c.id.as_str()).collect();
    assert_eq!(removed, ["n5"]);
    assert_eq!(r.pool_size_filtered, 6);

    let a_q: Vec<Document> = r
        .avoid_ids
        .iter()
        .map(|id| p.avoid.get(id).unwrap().clone())
        .collect();
    for c in &r.contexts {
        let emb = p.embedder.embed(&c.text).unwrap();
        let m = max_avoid_similarity(&emb, &a_q).unwrap().unwrap();
        assert!(m <= state.tau_avoid, "{} has max sim {m}", c.id);
    }
    let texts: Vec<&str> = r.contexts.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(r.prompt, assemble_prompt(QUERY, &texts));
    assert_eq!(r.generation, r.prompt);
    for w in r.contexts.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
}

#[test]
fn avoid_documents_never_reach_the_prompt() {
    let p = pipeline();
    for q in [QUERY, "Tell me about the engineer", "she was gentle", "the weather was cold"] {
        let (r, _) = p.answer_query(q, &RerankerState::default(), false).unwrap();
        for c in &r.contexts {
            assert_ne!(c.kind, DocKind::Avoid);
        }
        for (_, text) in AVOID {
            assert!(!r.prompt.lines().any(|l| l == format!("- {text}")), "{text:?} leaked");
        }
    }
}

#[test]
fn every_context_has_provenance() {
    let p = pipeline();
    let (r, _) = p.answer_query(QUERY, &RerankerState::default(), false).unwrap();
    for c in &r.contexts {
        match c.kind {
            DocKind::Normal => {
                assert_eq!(p.normal.as_ref().unwrap().get(&c.id).unwrap().text, c.text);
                assert!(c.source_id.is_none());
            }
            DocKind::FairSynth => {
                let src = c.source_id.as_deref().unwrap();
                assert!(p.avoid.get(src).is_some());
                assert!(r.fair.iter().any(|f| f.id() == c.id && f.text == c.text));
            }
            DocKind::Avoid => panic!("avoid document {} selected", c.id),
        }
    }
}

#[test]
fn frozen_theta_is_left_untouched() {
    let p = pipeline();
    let state = RerankerState {
        theta: Theta::new(0.8, 0.2).unwrap(),
        ..RerankerState::default()
    };
    let (r, next) = p.answer_query(QUERY, &state, false).unwrap();
    assert_eq!(next, state);
    assert_eq!(r.theta, state.theta);
    assert_eq!(r.trace.update, UpdateStatus::Disabled);
}

#[test]
fn learning_keeps_theta_feasible_and_loss_nonincreasing() {
    let p = pipeline();
    let mut state = RerankerState {
        theta: Theta::new(1.0, 0.0).unwrap(),
        ..RerankerState::default()
    };
    for q in [QUERY, "Tell me about the engineer", "she was gentle", QUERY] {
        let (r, next) = p.answer_query(q, &state, true).unwrap();
        let t = next.theta.as_array();
        assert!(t[0] >= 0.0 && t[1] >= 0.0);
        assert!((t[0] + t[1] - 1.0).abs() <= SIMPLEX_TOL);
        assert!(r.trace.loss_after <= r.trace.loss_before);
        state = next;
    }
    assert_ne!(state.theta, Theta::new(1.0, 0.0).unwrap());
}

#[test]
fn document_free_contexts_come_from_the_fair_subset() {
    let empty: [(&str, &str); 0] = [];
    for p in [pipeline_with(&AVOID, None), pipeline_with(&AVOID, Some(&empty))] {
        let (r, _) = p.answer_query(QUERY, &RerankerState::default(), false).unwrap();
        assert!(!r.contexts.is_empty());
        for c in &r.contexts {
            assert_eq!(c.kind, DocKind::FairSynth);
            assert!(r.fair.iter().any(|f| f.id() == c.id));
        }
    }
}

#[test]
fn dominant_fair_candidate_wins_for_every_theta() {
    let p = pipeline_with(
        &[("a", "nurse she gentle")],
        Some(&[("n1", "she gentle"), ("n2", "she nurse")]),
    );
    let query = "he gentle nurse ward";
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let state = RerankerState {
            theta: Theta::new(1.0 - t, t).unwrap(),
            ..RerankerState::default()
        };
        let (r, _) = p.answer_query(query, &state, false).unwrap();
        assert_eq!(r.contexts[0].id, "fair::a::0", "theta_2 = {t}");
        assert_eq!(r.contexts[0].text, "nurse he gentle");
    }
}

#[test]
fn prompt_matches_golden_file() {
    let p = pipeline();
    let state = RerankerState {
        theta: Theta::new(0.7, 0.3).unwrap(),
        k_final: 3,
        ..RerankerState::default()
    };
    let (r, _) = p.answer_query(QUERY, &state, false).unwrap();
    let golden = include_str!("data/golden_prompt.txt");
    assert_eq!(r.prompt, golden);
}

#[test]
fn repeated_runs_are_identical() {
    let run = || {
        let p = pipeline();
        let (r, s) = p.answer_query(QUERY, &RerankerState::default(), false).unwrap();
        (serde_json::to_string(&r).unwrap(), s)
    };
    assert_eq!(run(), run());
}

#[test]
fn synthesize_reports_dropped_and_pool() {
    let p = pipeline();
    let s = p.synthesize(QUERY).unwrap();
    assert_eq!(s.fair.iter().map(|f| f.source_id.as_str()).collect::<Vec<_>>(), ["a1", "a2"]);
    assert_eq!(s.fair[0].text, "the nurse said he was gentle");
    assert_eq!(s.normal_ids.len(), 5);
    assert_eq!(s.pool.len(), 7);
}

#[test]
fn empty_avoid_repository_is_rejected() {
    let empty: [(&str, &str); 0] = [];
    let p = pipeline_with(&empty, Some(&NORMAL));
    assert_eq!(
        p.answer_query(QUERY, &RerankerState::default(), false).unwrap_err(),
        PipelineError::EmptyAvoidRepository
    );
}

#[test]
fn filtering_everything_advises_relaxing_tau() {
    let p = pipeline_with(&AVOID, None);
    let state = RerankerState {
        tau_avoid: 0.1,
        ..RerankerState::default()
    };
    let err = p.answer_query(QUERY, &state, false).unwrap_err();
    assert!(matches!(err, PipelineError::Rerank(RerankError::AllFiltered { .. })));
    assert!(err.to_string().contains("relaxing tau_avoid"), "{err}");
}
