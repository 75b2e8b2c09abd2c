mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use debiasrag::corpus::{self, DocKind, RepoName, Repository, TagLexicon, CACHE_MAGIC};
use debiasrag::counterfactual::AttributeLexicon;
use debiasrag::embedding::Embedder;
use debiasrag::evalharness::{
    eval_crows, eval_stereoset, load_crows, load_stereoset, optimize_loop, seat_effect_size, BiasMetrics,
    OptimizeConfig, PipelineContexts, SeatTest,
};
use debiasrag::pipeline::{assemble_prompt, Pipeline};
use debiasrag::rerank::{rerank, Theta};
use debiasrag::scoring::TextScorer;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "debiasrag", version, about = "Bias-aware retrieval-augmented generation")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k_avoid: Option<usize>,
    #[arg(long, global = true)]
    k_normal: Option<usize>,
    #[arg(long, global = true)]
    k_final: Option<usize>,
    #[arg(long, global = true)]
    tau_avoid: Option<f64>,
    #[arg(long, global = true)]
    eta0: Option<f64>,
    /// Initial weights as `relevance,avoid_distance`.
    #[arg(long, global = true, value_parser = parse_theta)]
    theta: Option<Theta>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    same_tag_only: bool,
    /// Avoid repository: JSONL documents or a vector cache.
    #[arg(long, global = true, value_name = "FILE")]
    avoid: Option<PathBuf>,
    /// Normal repository: JSONL documents or a vector cache.
    #[arg(long, global = true, value_name = "FILE")]
    normal: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    lexicon: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    tag_lexicon: Option<PathBuf>,
    #[arg(long, global = true, value_name = "URL")]
    embedder_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    scorer_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    generator_endpoint: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed a JSONL document file and write its vector cache.
    Ingest {
        #[arg(long, value_enum)]
        repo: RepoArg,
        file: PathBuf,
        /// Cache path; defaults to FILE with a `.vec` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer one query and print the full result.
    Query {
        text: String,
        /// Write the rerank trace as JSONL.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        /// Freeze θ for this call.
        #[arg(long)]
        no_learn: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run fair-context synthesis only.
    Synth {
        text: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream θ updates over sampled questions and report the selected snapshot.
    Optimize {
        /// StereoSet-style JSONL whose contexts are used as queries.
        #[arg(long, value_name = "FILE")]
        questions: PathBuf,
        #[arg(long)]
        lambda: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute bias metrics on a benchmark file.
    Eval {
        #[arg(long, value_enum)]
        benchmark: Benchmark,
        file: PathBuf,
        /// Prepend pipeline-retrieved contexts (StereoSet only).
        #[arg(long)]
        with_context: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time each pipeline stage.
    Bench {
        #[arg(long = "query", required = true)]
        queries: Vec<String>,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RepoArg {
    Avoid,
    Normal,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Benchmark {
    Stereoset,
    Crows,
    Seat,
}

fn parse_theta(s: &str) -> Result<Theta, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b] = parts.as_slice() else {
        return Err("expected two comma-separated weights".into());
    };
    let a: f64 = a.parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.parse().map_err(|e| format!("{e}"))?;
    Theta::new(a, b).map_err(|e| e.to_string())
}

/// Configuration and usage problems exit with 1, everything else with 2.
#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl RunError {
    fn code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Usage(_) => 1,
            RunError::Runtime(_) => 2,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    macro_rules! set {
        ($($field:ident),*) => {$( if let Some(v) = o.$field.clone() { cfg.$field = v; } )*};
    }
    set!(seed, k_avoid, k_normal, k_final, tau_avoid, eta0, theta, epsilon, alpha);
    if o.same_tag_only {
        cfg.same_tag_only = true;
    }
    for (slot, v) in [
        (&mut cfg.paths.avoid, &o.avoid),
        (&mut cfg.paths.normal, &o.normal),
        (&mut cfg.paths.lexicon, &o.lexicon),
        (&mut cfg.paths.tag_lexicon, &o.tag_lexicon),
    ] {
        if v.is_some() {
            slot.clone_from(v);
        }
    }
    if o.embedder_endpoint.is_some() {
        cfg.embedder.endpoint.clone_from(&o.embedder_endpoint);
    }
    if o.scorer_endpoint.is_some() {
        cfg.scorer.endpoint.clone_from(&o.scorer_endpoint);
    }
    if o.generator_endpoint.is_some() {
        cfg.generator.endpoint.clone_from(&o.generator_endpoint);
    }
    match &cli.command {
        Command::Optimize { lambda, iters, .. } => {
            if let Some(l) = lambda {
                cfg.lambda = *l;
            }
            if let Some(i) = iters {
                cfg.iters = *i;
            }
        }
        Command::Query { no_learn: true, .. } => cfg.learn = false,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), RunError> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Ingest { repo, file, out } => cmd_ingest(&cfg, *repo, file, out.as_deref()),
        Command::Query {
            text, trace, out, ..
        } => cmd_query(&cfg, text, trace.as_deref(), out.as_deref()),
        Command::Synth { text, out } => cmd_synth(&cfg, text, out.as_deref()),
        Command::Optimize {
            questions,
            trace,
            out,
            ..
        } => cmd_optimize(&cfg, questions, trace.as_deref(), out.as_deref()),
        Command::Eval {
            benchmark,
            file,
            with_context,
            out,
        } => cmd_eval(&cfg, *benchmark, file, *with_context, out.as_deref()),
        Command::Bench { queries, repeat, out } => cmd_bench(&cfg, queries, *repeat, out.as_deref()),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| runtime(format!("writing {}: {e}", p.display()))),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
            _ => Ok(()),
        },
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("creating {}: {e}", path.display())))
}

fn is_cache(path: &Path) -> Result<bool, RunError> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).map_err(|e| runtime(format!("opening {}: {e}", path.display())))?;
    let n = f.read(&mut head).map_err(runtime)?;
    Ok(n == 4 && &head == CACHE_MAGIC)
}

/// Load a repository from a vector cache or embed a JSONL file.
fn load_repo(path: &Path, kind: DocKind, embedder: &dyn Embedder) -> Result<Repository, RunError> {
    if is_cache(path)? {
        let repo = corpus::load_vectors(path).map_err(runtime)?;
        if repo.dim() != embedder.dim() {
            return Err(runtime(format!(
                "{}: cache dim {} does not match embedder dim {}",
                path.display(),
                repo.dim(),
                embedder.dim()
            )));
        }
        if !repo.is_empty() && repo.name() != RepoName::for_kind(kind) {
            return Err(runtime(format!("{}: cache holds the wrong repository", path.display())));
        }
        return Ok(repo);
    }
    let ingested = corpus::ingest(path, kind, embedder).map_err(runtime)?;
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    Ok(ingested.repository)
}

struct Loaded {
    avoid: Repository,
    normal: Option<Repository>,
    embedder: Box<dyn Embedder>,
}

fn load_repos(cfg: &RunConfig) -> Result<Loaded, RunError> {
    let embedder = cfg.embedder.build().map_err(|e| RunError::Usage(e.to_string()))?;
    let avoid_path = cfg
        .paths
        .avoid
        .as_deref()
        .ok_or_else(|| RunError::Usage("an avoid repository is required (--avoid or paths.avoid)".into()))?;
    let avoid = load_repo(avoid_path, DocKind::Avoid, embedder.as_ref())?;
    let normal = match cfg.paths.normal.as_deref() {
        Some(p) => Some(load_repo(p, DocKind::Normal, embedder.as_ref())?),
        None => None,
    };
    Ok(Loaded {
        avoid,
        normal,
        embedder,
    })
}

/// The char-ngram scorer trains on normal texts, falling back to avoid texts.
fn build_scorer(cfg: &RunConfig, avoid: Option<&Repository>, normal: Option<&Repository>) -> Result<Box<dyn TextScorer>, RunError> {
    let source = normal.filter(|r| !r.is_empty()).or(avoid);
    let corpus: Vec<&str> = source
        .map(|r| r.documents().iter().map(|d| d.text.as_str()).collect())
        .unwrap_or_default();
    cfg.scorer.build(&corpus).map_err(runtime)
}

fn build_pipeline(cfg: &RunConfig) -> Result<Pipeline, RunError> {
    let Loaded {
        avoid,
        normal,
        embedder,
    } = load_repos(cfg)?;
    let lex_path = cfg
        .paths
        .lexicon
        .as_deref()
        .ok_or_else(|| RunError::Usage("an attribute lexicon is required (--lexicon or paths.lexicon)".into()))?;
    let lexicon = AttributeLexicon::load(lex_path).map_err(runtime)?;
    let tags = match cfg.paths.tag_lexicon.as_deref() {
        Some(p) => Some(TagLexicon::load(p).map_err(runtime)?),
        None => None,
    };
    let scorer = build_scorer(cfg, Some(&avoid), normal.as_ref())?;
    let generator = cfg.generator.build().map_err(RunError::Usage)?;
    Ok(Pipeline {
        avoid,
        normal,
        embedder,
        lexicon,
        scorer,
        tags,
        params: cfg.params(),
        generator,
    })
}

fn cmd_ingest(cfg: &RunConfig, repo: RepoArg, file: &Path, out: Option<&Path>) -> Result<(), RunError> {
    let embedder = cfg.embedder.build().map_err(|e| RunError::Usage(e.to_string()))?;
    let kind = match repo {
        RepoArg::Avoid => DocKind::Avoid,
        RepoArg::Normal => DocKind::Normal,
    };
    let ingested = corpus::ingest(file, kind, embedder.as_ref()).map_err(runtime)?;
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    let out = out.map_or_else(|| file.with_extension("vec"), Path::to_path_buf);
    corpus::save_vectors(&ingested.repository, &out).map_err(runtime)?;
    emit(
        &json!({
            "repo": kind,
            "documents": ingested.repository.len(),
            "dim": ingested.repository.dim(),
            "skipped": ingested.warnings,
            "cache": out,
        }),
        None,
    )
}

fn cmd_query(cfg: &RunConfig, text: &str, trace: Option<&Path>, out: Option<&Path>) -> Result<(), RunError> {
    let pipeline = build_pipeline(cfg)?;
    let (result, _) = pipeline.answer_query(text, &cfg.state(), cfg.learn).map_err(runtime)?;
    if let Some(p) = trace {
        let mut w = create(p)?;
        serde_json::to_writer(&mut w, &result.trace).map_err(runtime)?;
        writeln!(w).and_then(|_| w.flush()).map_err(runtime)?;
    }
    emit(&result, out)
}

fn cmd_synth(cfg: &RunConfig, text: &str, out: Option<&Path>) -> Result<(), RunError> {
    let pipeline = build_pipeline(cfg)?;
    let s = pipeline.synthesize(text).map_err(runtime)?;
    let fair: Vec<_> = s
        .fair
        .iter()
        .map(|f| {
            json!({
                "id": f.id(),
                "source_id": f.source_id,
                "text": f.text,
                "perplexity": f.perplexity,
                "variant_index": f.variant_index,
                "tags": f.tags,
            })
        })
        .collect();
    emit(
        &json!({
            "query": s.query.text,
            "tag": s.query.tag,
            "avoid_ids": s.avoid_ids,
            "fair": fair,
            "normal_ids": s.normal_ids,
            "pool": s.pool.ids(),
        }),
        out,
    )
}

fn cmd_optimize(cfg: &RunConfig, questions: &Path, trace: Option<&Path>, out: Option<&Path>) -> Result<(), RunError> {
    let pipeline = build_pipeline(cfg)?;
    let items = load_stereoset(questions).map_err(runtime)?;
    let opt = OptimizeConfig {
        lambda: cfg.lambda,
        iters: cfg.iters,
        seed: cfg.seed,
        selection: cfg.selection,
    };
    let mut writer = trace.map(create).transpose()?;
    let mut write_err = None;
    let outcome = optimize_loop(&items, &pipeline, pipeline.scorer.as_ref(), &cfg.state(), &opt, |t| {
        if let Some(w) = writer.as_mut() {
            let res = serde_json::to_writer(&mut *w, t)
                .map_err(std::io::Error::from)
                .and_then(|_| writeln!(w));
            if let Err(e) = res {
                write_err.get_or_insert(e);
            }
        }
    })
    .map_err(runtime)?;
    if let Some(e) = write_err {
        return Err(runtime(format!("writing trace: {e}")));
    }
    if let Some(mut w) = writer {
        w.flush().map_err(runtime)?;
    }
    emit(&outcome, out)
}

fn cmd_eval(cfg: &RunConfig, benchmark: Benchmark, file: &Path, with_context: bool, out: Option<&Path>) -> Result<(), RunError> {
    let mut metrics = BiasMetrics::default();
    let report = match benchmark {
        Benchmark::Stereoset => {
            let items = load_stereoset(file).map_err(runtime)?;
            let scores = if with_context {
                let pipeline = build_pipeline(cfg)?;
                let state = cfg.state();
                let provider = PipelineContexts {
                    pipeline: &pipeline,
                    state: &state,
                };
                eval_stereoset(&items, pipeline.scorer.as_ref(), Some(&provider))
            } else {
                let scorer = scorer_for_eval(cfg)?;
                eval_stereoset(&items, scorer.as_ref(), None)
            }
            .map_err(runtime)?;
            metrics = metrics.with_stereoset(&scores);
            json!({ "benchmark": "stereoset", "with_context": with_context, "scores": scores })
        }
        Benchmark::Crows => {
            if with_context {
                return Err(RunError::Usage("--with-context applies to stereoset only".into()));
            }
            let pairs = load_crows(file).map_err(runtime)?;
            let cps = eval_crows(&pairs, scorer_for_eval(cfg)?.as_ref()).map_err(runtime)?;
            metrics.cps = Some(cps);
            json!({ "benchmark": "crows", "pairs": pairs.len() })
        }
        Benchmark::Seat => {
            if with_context {
                return Err(RunError::Usage("--with-context applies to stereoset only".into()));
            }
            let text = std::fs::read_to_string(file).map_err(|e| runtime(format!("reading {}: {e}", file.display())))?;
            let tests: BTreeMap<String, SeatTest> =
                serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
            let embedder = cfg.embedder.build().map_err(|e| RunError::Usage(e.to_string()))?;
            for (name, t) in &tests {
                let d = seat_effect_size(&t.x, &t.y, &t.a, &t.b, embedder.as_ref())
                    .map_err(|e| runtime(format!("SEAT test {name}: {e}")))?;
                metrics.seat.insert(name.clone(), d);
            }
            json!({ "benchmark": "seat", "tests": tests.len() })
        }
    };
    log::info!("\n{}", metrics.table());
    let mut report = report;
    report["metrics"] = serde_json::to_value(&metrics).map_err(runtime)?;
    report["alpha"] = json!(cfg.alpha);
    emit(&report, out)
}

/// A remote scorer needs no corpus; the char-ngram one trains on the
/// configured repositories.
fn scorer_for_eval(cfg: &RunConfig) -> Result<Box<dyn TextScorer>, RunError> {
    use debiasrag::scoring::ScorerKind;
    if cfg.scorer.kind == ScorerKind::Remote {
        return build_scorer(cfg, None, None);
    }
    if cfg.paths.avoid.is_none() && cfg.paths.normal.is_none() {
        return Err(RunError::Usage(
            "the char-ngram scorer trains on the configured repositories; set --normal or --avoid".into(),
        ));
    }
    let embedder = cfg.embedder.build().map_err(|e| RunError::Usage(e.to_string()))?;
    let avoid = match cfg.paths.avoid.as_deref() {
        Some(p) => Some(load_repo(p, DocKind::Avoid, embedder.as_ref())?),
        None => None,
    };
    let normal = match cfg.paths.normal.as_deref() {
        Some(p) => Some(load_repo(p, DocKind::Normal, embedder.as_ref())?),
        None => None,
    };
    build_scorer(cfg, avoid.as_ref(), normal.as_ref())
}

#[derive(Serialize, Default)]
struct StageTiming {
    embed_ms: f64,
    synthesize_ms: f64,
    rerank_ms: f64,
    generate_ms: f64,
}

fn cmd_bench(cfg: &RunConfig, queries: &[String], repeat: usize, out: Option<&Path>) -> Result<(), RunError> {
    let pipeline = build_pipeline(cfg)?;
    let state = cfg.state();
    let mut total = StageTiming::default();
    let runs = (repeat.max(1) * queries.len()) as f64;
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;
    for _ in 0..repeat.max(1) {
        for q in queries {
            let t = Instant::now();
            pipeline.query(q).map_err(runtime)?;
            total.embed_ms += ms(t);
            let t = Instant::now();
            let synth = pipeline.synthesize(q).map_err(runtime)?;
            total.synthesize_ms += ms(t);
            let t = Instant::now();
            let outcome = rerank(synth.pool, &state, false).map_err(runtime)?;
            total.rerank_ms += ms(t);
            let t = Instant::now();
            let texts: Vec<&str> = outcome.selected.iter().map(|r| r.candidate.doc.text.as_str()).collect();
            pipeline.generator.generate(&assemble_prompt(q, &texts)).map_err(runtime)?;
            total.generate_ms += ms(t);
        }
    }
    let mean = StageTiming {
        embed_ms: total.embed_ms / runs,
        synthesize_ms: total.synthesize_ms / runs,
        rerank_ms: total.rerank_ms / runs,
        generate_ms: total.generate_ms / runs,
    };
    emit(&json!({ "queries": queries.len(), "repeat": repeat.max(1), "mean": mean }), out)
}
