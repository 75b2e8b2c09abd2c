//! Counterfactual fair-context synthesis.
//!
//! An [`AttributeLexicon`] holds symmetric token pairs (`he ↔ she`,
//! `doctor ↔ nurse`, ...). Swapping every lexicon token of an avoid document
//! gives its counterfactual; a small fan of partial swaps (one attribute
//! class at a time) is scored by a fluency model and the lowest-perplexity
//! variant is kept.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::pipeline::Query;
use crate::scoring::{ScoreError, TextScorer};
use crate::text;

/// Most variants handed to [`refine`] per avoid document.
pub const MAX_VARIANTS: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CounterfactualError {
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error("refine called with no candidates")]
    NoCandidates,
    #[error("scorer failed on all {} candidates: {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    RefineFailed(Vec<CandidateFailure>),
}

/// Per-candidate scorer failure captured by [`refine`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("candidate #{index}: {error}")]
pub struct CandidateFailure {
    pub index: usize,
    pub error: ScoreError,
}

pub type Result<T> = std::result::Result<T, CounterfactualError>;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Partner {
    word: String,
    class: Option<String>,
}

/// Symmetric paired substitution map. Each word belongs to at most one pair.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributeLexicon {
    partners: HashMap<String, Partner>,
    pairs: usize,
}

impl AttributeLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add the pair `{a, b}` (lowercased). Rejects self-pairs and words that
    /// already belong to a different pair.
    pub fn insert(&mut self, a: &str, b: &str, class: Option<&str>) -> Result<()> {
        let (a, b) = (a.to_lowercase(), b.to_lowercase());
        if a.is_empty() || b.is_empty() {
            return Err(CounterfactualError::Lexicon("empty word in pair".into()));
        }
        if a == b {
            return Err(CounterfactualError::Lexicon(format!("{a:?} paired with itself")));
        }
        let class = class.map(str::to_string);
        for (w, other) in [(&a, &b), (&b, &a)] {
            if let Some(p) = self.partners.get(w) {
                if &p.word == other && p.class == class {
                    return Ok(());
                }
                return Err(CounterfactualError::Lexicon(format!(
                    "{w:?} already paired with {:?}",
                    p.word
                )));
            }
        }
        self.partners.insert(a.clone(), Partner { word: b.clone(), class: class.clone() });
        self.partners.insert(b, Partner { word: a, class });
        self.pairs += 1;
        Ok(())
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, Option<&'a str>)>,
    {
        let mut lex = Self::new();
        for (a, b, c) in pairs {
            lex.insert(a, b, c)?;
        }
        Ok(lex)
    }

    /// Parse `[["he","she"],["doctor","nurse","profession"], ...]`.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Vec<Vec<String>> =
            serde_json::from_str(s).map_err(|e| CounterfactualError::Lexicon(e.to_string()))?;
        let mut lex = Self::new();
        for (i, entry) in raw.iter().enumerate() {
            match entry.as_slice() {
                [a, b] => lex.insert(a, b, None)?,
                [a, b, c] => lex.insert(a, b, Some(c))?,
                _ => {
                    return Err(CounterfactualError::Lexicon(format!(
                        "entry {i} must have 2 or 3 elements, got {}",
                        entry.len()
                    )))
                }
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CounterfactualError::Lexicon(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// Partner of a lowercase token, if it is in the lexicon.
    pub fn partner(&self, token: &str) -> Option<&str> {
        self.partners.get(token).map(|p| p.word.as_str())
    }

    pub fn class_of(&self, token: &str) -> Option<&str> {
        self.partners.get(token).and_then(|p| p.class.as_deref())
    }

    pub fn len(&self) -> usize {
        self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs == 0
    }
}

/// Replace each token by its lexicon partner; other tokens pass through.
pub fn substitute<S: AsRef<str>>(tokens: &[S], lex: &AttributeLexicon) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            lex.partner(t).unwrap_or(t).to_string()
        })
        .collect()
}

/// Class key used for partial swaps; unclassed pairs share one group.
fn class_key(lex: &AttributeLexicon, lower: &str) -> String {
    lex.class_of(lower).unwrap_or("").to_string()
}

/// Swap the surface words of `words` whose class passes `keep`, matching
/// the original casing. Returns `None` if nothing changed.
fn swap_surface(words: &[&str], lex: &AttributeLexicon, keep: impl Fn(&str) -> bool) -> Option<Vec<String>> {
    let mut changed = false;
    let out = words
        .iter()
        .map(|w| {
            let lower = w.to_lowercase();
            match lex.partner(&lower) {
                Some(p) if keep(&class_key(lex, &lower)) => {
                    changed = true;
                    text::match_case(w, p)
                }
                _ => (*w).to_string(),
            }
        })
        .collect();
    changed.then_some(out)
}

/// Counterfactual variants of `text`: the full swap first, then one variant
/// per attribute class (ascending) when more than one class occurs.
/// Duplicates are dropped and the list is capped at [`MAX_VARIANTS`].
pub fn variants(text: &str, lex: &AttributeLexicon) -> Vec<Vec<String>> {
    let words = text::words(text);
    let Some(full) = swap_surface(&words, lex, |_| true) else {
        return Vec::new();
    };
    let classes: BTreeSet<String> = words
        .iter()
        .map(|w| w.to_lowercase())
        .filter(|l| lex.partner(l).is_some())
        .map(|l| class_key(lex, &l))
        .collect();
    let mut out = vec![full];
    if classes.len() > 1 {
        for class in &classes {
            if out.len() == MAX_VARIANTS {
                break;
            }
            if let Some(v) = swap_surface(&words, lex, |c| c == class) {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Outcome of [`refine`]: the most fluent candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub text: String,
    pub perplexity: f64,
    pub index: usize,
}

/// Pick the minimum-perplexity candidate (first wins ties). Candidates the
/// scorer fails on are skipped; if it fails on all, every failure is reported.
pub fn refine<S: AsRef<str>>(candidates: &[Vec<S>], scorer: &dyn TextScorer) -> Result<Refined> {
    if candidates.is_empty() {
        return Err(CounterfactualError::NoCandidates);
    }
    let texts: Vec<String> = candidates.iter().map(|c| text::detokenize(c)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let scores: Vec<std::result::Result<f64, ScoreError>> = match scorer.score_batch(&refs) {
        Ok(s) if s.len() == refs.len() => s.iter().map(|s| Ok(s.perplexity())).collect(),
        _ => refs.iter().map(|t| scorer.score(t).map(|s| s.perplexity())).collect(),
    };
    let mut best: Option<(usize, f64)> = None;
    let mut failures = Vec::new();
    for (index, s) in scores.into_iter().enumerate() {
        match s {
            Ok(p) if p.is_finite() && p > 0.0 => {
                if best.is_none_or(|(_, b)| p < b) {
                    best = Some((index, p));
                }
            }
            Ok(_) => failures.push(CandidateFailure {
                index,
                error: ScoreError::NonFinite { index },
            }),
            Err(error) => failures.push(CandidateFailure { index, error }),
        }
    }
    match best {
        Some((index, perplexity)) => Ok(Refined {
            text: texts[index].clone(),
            perplexity,
            index,
        }),
        None => Err(CounterfactualError::RefineFailed(failures)),
    }
}

/// A synthesized counterfactual of one avoid document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairCandidate {
    pub source_id: String,
    pub text: String,
    pub perplexity: f64,
    pub variant_index: usize,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl FairCandidate {
    /// Document id `fair::{source}::{variant}`.
    pub fn id(&self) -> String {
        format!("fair::{}::{}", self.source_id, self.variant_index)
    }
}

/// Per-query synthesis outcome.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FairSynthesis {
    pub candidates: Vec<FairCandidate>,
    /// Avoid documents with no lexicon token (no counterfactual exists).
    pub dropped: Vec<String>,
    /// Avoid documents whose refine step failed.
    pub failed: Vec<(String, CounterfactualError)>,
}

/// Build the query-specific fair subset from the retrieved avoid documents,
/// in `avoid_set` order. The query is carried for provenance only.
pub fn synthesize_fair(
    avoid_set: &[Document],
    query: &Query,
    lex: &AttributeLexicon,
    scorer: &dyn TextScorer,
) -> FairSynthesis {
    let mut out = FairSynthesis::default();
    for a in avoid_set {
        let vars = variants(&a.text, lex);
        if vars.is_empty() {
            log::debug!("avoid doc {} has no lexicon tokens; no counterfactual for query {:?}", a.id, query.text);
            out.dropped.push(a.id.clone());
            continue;
        }
        match refine(&vars, scorer) {
            Ok(r) => out.candidates.push(FairCandidate {
                source_id: a.id.clone(),
                text: r.text,
                perplexity: r.perplexity,
                variant_index: r.index,
                tags: a.tags.clone(),
            }),
            Err(e) => {
                log::warn!("refine failed for avoid doc {}: {e}", a.id);
                out.failed.push((a.id.clone(), e));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{CharNgramScorer, TextScore};

    fn lex() -> AttributeLexicon {
        AttributeLexicon::from_pairs([
            ("he", "she", Some("gender")),
            ("man", "woman", Some("gender")),
            ("doctor", "nurse", Some("profession")),
        ])
        .unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        text::tokenize(s)
    }

    #[test]
    fn gender_swap() {
        let l = AttributeLexicon::from_pairs([("he", "she", None)]).unwrap();
        assert_eq!(substitute(&toks("he is a doctor"), &l), toks("she is a doctor"));
        assert_eq!(substitute(&toks("she is a doctor"), &l), toks("he is a doctor"));
        assert_eq!(substitute(&toks("it is a table"), &l), toks("it is a table"));
    }

    #[test]
    fn lexicon_rejects_conflicts() {
        let mut l = lex();
        assert!(l.insert("he", "they", None).is_err());
        assert!(l.insert("x", "x", None).is_err());
        assert!(l.insert("she", "he", Some("gender")).is_ok());
        assert_eq!(l.len(), 3);
        assert!(AttributeLexicon::from_json(r#"[["a"]]"#).is_err());
        let parsed = AttributeLexicon::from_json(r#"[["He","She","gender"],["king","queen"]]"#).unwrap();
        assert_eq!(parsed.partner("she"), Some("he"));
        assert_eq!(parsed.class_of("he"), Some("gender"));
        assert_eq!(parsed.class_of("queen"), None);
    }

    #[test]
    fn variants_full_then_per_class() {
        let v = variants("He is a Doctor.", &lex());
        let joined: Vec<String> = v.iter().map(|t| text::detokenize(t)).collect();
        assert_eq!(joined, ["She is a Nurse", "She is a Doctor", "He is a Nurse"]);
        assert_eq!(variants("it is a table", &lex()), Vec::<Vec<String>>::new());
        assert_eq!(variants("he and she", &lex()).len(), 1);
    }

    #[test]
    fn refine_singleton_and_ties() {
        let m = CharNgramScorer::train(3, &["anything"]).unwrap();
        let one = vec![toks("a b")];
        assert_eq!(refine(&one, &m).unwrap().index, 0);
        let same = vec![toks("x y"), toks("x y"), toks("x y")];
        let r = refine(&same, &m).unwrap();
        assert_eq!(r.index, 0);
        assert!(refine::<String>(&[], &m).is_err());
    }

    #[test]
    fn refine_prefers_training_text() {
        let corpus = "the nurse helped the patient";
        let m = CharNgramScorer::train(3, &[corpus]).unwrap();
        let verbatim = m.score_text(corpus).perplexity();
        let other = m.score_text("the doctor helped the patient").perplexity();
        assert!(verbatim < other);
        let cands = vec![toks("the doctor helped the patient"), toks(corpus)];
        let r = refine(&cands, &m).unwrap();
        assert_eq!(r.index, 1);
        assert_eq!(r.perplexity, verbatim);
    }

    struct Failing;
    impl TextScorer for Failing {
        fn score_batch(&self, _: &[&str]) -> crate::scoring::Result<Vec<TextScore>> {
            Err(ScoreError::Config("down".into()))
        }
    }

    #[test]
    fn refine_reports_every_failure() {
        match refine(&[toks("a"), toks("b")], &Failing) {
            Err(CounterfactualError::RefineFailed(f)) => {
                assert_eq!(f.iter().map(|f| f.index).collect::<Vec<_>>(), [0, 1]);
            }
            other => panic!("{other:?}"),
        }
    }
}
