//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use debiasrag::embedding::EmbedderConfig;
use debiasrag::evalharness::Selection;
use debiasrag::pipeline::GeneratorConfig;
use debiasrag::rerank::{RerankerState, Theta};
use debiasrag::retrieval::RetrievalParams;
use debiasrag::scoring::ScorerConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avoid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<PathBuf>,
    /// Attribute-pair lexicon (JSON array of `[a, b]` or `[a, b, class]`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Word-to-class map used to tag queries and documents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub learn: bool,
    pub same_tag_only: bool,
    pub k_avoid: usize,
    pub k_normal: usize,
    pub k_final: usize,
    pub tau_avoid: f64,
    pub eta0: f64,
    pub theta: Theta,
    pub epsilon: f64,
    pub max_backtracks: u32,
    /// Suppression strength for biased tokens, in `[0, 1]`.
    pub alpha: f64,
    pub lambda: usize,
    pub iters: usize,
    pub selection: Selection,
    pub embedder: EmbedderConfig,
    pub scorer: ScorerConfig,
    pub generator: GeneratorConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let state = RerankerState::default();
        let params = RetrievalParams::default();
        Self {
            seed: 0,
            learn: true,
            same_tag_only: params.same_tag_only,
            k_avoid: params.k_avoid,
            k_normal: params.k_normal,
            k_final: state.k_final,
            tau_avoid: state.tau_avoid,
            eta0: state.eta0,
            theta: state.theta,
            epsilon: state.epsilon,
            max_backtracks: state.max_backtracks,
            alpha: 1.0,
            lambda: 3,
            iters: 50,
            selection: Selection::default(),
            embedder: EmbedderConfig::default(),
            scorer: ScorerConfig::default(),
            generator: GeneratorConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        })?;
        // Relative paths in a config file are relative to the file itself.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.avoid,
            &mut cfg.paths.normal,
            &mut cfg.paths.lexicon,
            &mut cfg.paths.tag_lexicon,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn state(&self) -> RerankerState {
        RerankerState {
            theta: self.theta,
            eta0: self.eta0,
            epsilon: self.epsilon,
            tau_avoid: self.tau_avoid,
            k_final: self.k_final,
            max_backtracks: self.max_backtracks,
        }
    }

    pub fn params(&self) -> RetrievalParams {
        RetrievalParams {
            k_avoid: self.k_avoid,
            k_normal: self.k_normal,
            same_tag_only: self.same_tag_only,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.state().validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.params().validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.embedder.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.scorer.validate() {
            return invalid(e.to_string());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if self.lambda == 0 {
            return invalid("lambda must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use debiasrag::embedding::EmbedderKind;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("k_final = 2\nbogus = 1\n").unwrap_err();
        assert!(err.contains("bogus"), "{err}");
        assert!(RunConfig::parse("[embedder]\nkind = \"remote\"\ndim = 4\ncolour = 1\n").is_err());
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = RunConfig::parse("theta = [0.9, 0.1]\nk_final = 2\n[paths]\navoid = \"a.jsonl\"\n").unwrap();
        assert_eq!(c.theta, Theta::new(0.9, 0.1).unwrap());
        assert_eq!(c.k_final, 2);
        assert_eq!(c.paths.avoid.as_deref(), Some(Path::new("a.jsonl")));
        assert_eq!(c.k_avoid, 5);
    }

    #[test]
    fn file_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[paths]\navoid = \"a.jsonl\"\nnormal = \"/abs/n.jsonl\"\n").unwrap();
        let c = RunConfig::load(&file).unwrap();
        assert_eq!(c.paths.avoid.unwrap(), dir.path().join("a.jsonl"));
        assert_eq!(c.paths.normal.unwrap(), PathBuf::from("/abs/n.jsonl"));
    }

    #[test]
    fn theta_off_the_simplex_does_not_parse() {
        assert!(RunConfig::parse("theta = [0.9, 0.2]\n").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig {
            seed: 11,
            tau_avoid: 0.75,
            theta: Theta::new(0.25, 0.75).unwrap(),
            alpha: 0.5,
            selection: Selection::Icat,
            ..RunConfig::default()
        };
        c.embedder.kind = EmbedderKind::Remote;
        c.embedder.endpoint = Some("http://localhost:1".into());
        c.paths.lexicon = Some("lex.json".into());
        let text = c.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn validation_catches_ranges() {
        let bad = RunConfig {
            alpha: 1.5,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            k_final: 0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            tau_avoid: -0.1,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
