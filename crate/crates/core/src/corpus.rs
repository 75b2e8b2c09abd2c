//! Document repositories: JSONL ingestion, bias-tag classification and the
//! binary vector cache.
//!
//! Vector cache layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic "DBRG"
//! offset 4   version u16 = 1
//! offset 6   count u32
//! offset 10  dim u32
//! offset 14  count × dim f32, row-major
//! ...        JSONL footer, one metadata record per row, newline-terminated
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, Embedding, EmbeddingError};
use crate::text;

pub const CACHE_MAGIC: &[u8; 4] = b"DBRG";
pub const CACHE_VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate ids: {}", format_duplicates(.0))]
    DuplicateIds(Vec<DuplicateId>),
    #[error("vector cache format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("vector cache truncated in {section} at byte {offset}: expected {expected}, found {actual}")]
    Truncated {
        section: &'static str,
        offset: u64,
        expected: u64,
        actual: u64,
    },
    #[error("lexicon error: {0}")]
    Lexicon(String),
    #[error("embedding failed: {0}")]
    Embedding(#[from] EmbeddingError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// An id that occurs on more than one line of an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateId {
    pub id: String,
    pub lines: Vec<usize>,
}

fn format_duplicates(d: &[DuplicateId]) -> String {
    d.iter()
        .map(|d| {
            let lines: Vec<String> = d.lines.iter().map(ToString::to_string).collect();
            format!("\"{}\" (lines {})", d.id, lines.join(","))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocKind {
    Avoid,
    Normal,
    FairSynth,
}

impl fmt::Display for DocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DocKind::Avoid => "avoid",
            DocKind::Normal => "normal",
            DocKind::FairSynth => "fair-synth",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub kind: DocKind,
    pub tags: Vec<String>,
    pub embedding: Embedding,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, kind: DocKind, tags: Vec<String>, embedding: Embedding) -> Self {
        let text = text.into();
        Self {
            id: id.into(),
            tokens: text::tokenize(&text),
            text,
            kind,
            tags,
            embedding,
        }
    }
}

/// Which store a repository is: the avoid set or the normal corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepoName {
    A,
    D,
}

impl RepoName {
    pub fn for_kind(kind: DocKind) -> Self {
        match kind {
            DocKind::Avoid => RepoName::A,
            _ => RepoName::D,
        }
    }
}

/// Immutable, id-ordered document collection sharing one embedding dim.
#[derive(Debug, Clone, PartialEq)]
pub struct Repository {
    name: RepoName,
    dim: usize,
    documents: Vec<Document>,
}

impl Repository {
    /// Build from documents; sorts by id and rejects duplicate ids, mixed
    /// dims, and avoid documents outside repository A.
    pub fn new(name: RepoName, dim: usize, mut documents: Vec<Document>) -> Result<Self> {
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        let dups: Vec<DuplicateId> = documents
            .windows(2)
            .filter(|w| w[0].id == w[1].id)
            .map(|w| DuplicateId {
                id: w[0].id.clone(),
                lines: Vec::new(),
            })
            .collect();
        if !dups.is_empty() {
            return Err(CorpusError::DuplicateIds(dups));
        }
        for d in &documents {
            if d.embedding.dim() != dim {
                return Err(EmbeddingError::DimMismatch {
                    expected: dim,
                    actual: d.embedding.dim(),
                }
                .into());
            }
            if d.kind == DocKind::FairSynth || (d.kind == DocKind::Avoid) != (name == RepoName::A) {
                return Err(CorpusError::Malformed {
                    line: 0,
                    message: format!("document {} of kind {} cannot live in repository {:?}", d.id, d.kind, name),
                });
            }
        }
        Ok(Self { name, dim, documents })
    }

    pub fn name(&self) -> RepoName {
        self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.documents[i])
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    id: String,
    text: String,
    #[serde(default)]
    tags: Vec<String>,
}

/// Result of ingesting a document file.
#[derive(Debug)]
pub struct Ingested {
    pub repository: Repository,
    /// One entry per document excluded for having no embeddable tokens.
    pub warnings: Vec<String>,
}

/// Read a JSONL document file and embed every record.
///
/// Whitespace-only or token-free texts are excluded with a warning.
pub fn ingest(path: &Path, kind: DocKind, embedder: &dyn Embedder) -> Result<Ingested> {
    if kind == DocKind::FairSynth {
        return Err(CorpusError::Malformed {
            line: 0,
            message: "fair-synth documents are synthesized per query, not ingested".into(),
        });
    }
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut seen: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        seen.entry(rec.id.clone()).or_default().push(line_no);
        records.push(rec);
    }
    let mut dups: Vec<DuplicateId> = seen
        .into_iter()
        .filter(|(_, lines)| lines.len() > 1)
        .map(|(id, lines)| DuplicateId { id, lines })
        .collect();
    if !dups.is_empty() {
        dups.sort_by(|a, b| a.id.cmp(&b.id));
        return Err(CorpusError::DuplicateIds(dups));
    }

    let mut warnings = Vec::new();
    let mut kept = Vec::with_capacity(records.len());
    for rec in records {
        if text::tokenize(&rec.text).is_empty() {
            let msg = format!("document {} has no tokens; excluded", rec.id);
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            kept.push(rec);
        }
    }
    let embeddings = if kept.is_empty() {
        Vec::new()
    } else {
        let texts: Vec<&str> = kept.iter().map(|r| r.text.as_str()).collect();
        embedder.embed_batch(&texts)?
    };
    let mut documents = Vec::with_capacity(kept.len());
    for (rec, emb) in kept.into_iter().zip(embeddings) {
        if emb.is_degenerate() {
            let msg = format!("document {} embedded to the zero vector; excluded", rec.id);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        documents.push(Document::new(rec.id, rec.text, kind, rec.tags, emb));
    }
    let repository = Repository::new(RepoName::for_kind(kind), embedder.dim(), documents)?;
    Ok(Ingested { repository, warnings })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRecord {
    id: String,
    text: String,
    kind: DocKind,
    tags: Vec<String>,
}

/// Serialize a repository to the vector cache format.
pub fn encode_vectors(repo: &Repository) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + repo.len() * repo.dim * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(repo.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(repo.dim as u32).to_le_bytes());
    for d in &repo.documents {
        for v in d.embedding.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for d in &repo.documents {
        let rec = MetaRecord {
            id: d.id.clone(),
            text: d.text.clone(),
            kind: d.kind,
            tags: d.tags.clone(),
        };
        serde_json::to_writer(&mut buf, &rec).expect("metadata serializes");
        buf.push(b'\n');
    }
    buf
}

/// Decode the vector cache format.
///
/// An empty cache carries no kind information and decodes as repository D.
pub fn decode_vectors(bytes: &[u8]) -> Result<Repository> {
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(CorpusError::Format {
            offset: 0,
            message: "bad magic bytes, expected \"DBRG\"".into(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CorpusError::Truncated {
            section: "header",
            offset: bytes.len() as u64,
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(CorpusError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(CorpusError::Format {
            offset: 10,
            message: "dim must be positive".into(),
        });
    }
    let block_len = (count as u64) * (dim as u64) * 4;
    let vectors_end = HEADER_LEN as u64 + block_len;
    if (bytes.len() as u64) < vectors_end {
        return Err(CorpusError::Truncated {
            section: "vector block",
            offset: bytes.len() as u64,
            expected: vectors_end,
            actual: bytes.len() as u64,
        });
    }
    let vectors_end = vectors_end as usize;
    let mut rows = Vec::with_capacity(count);
    for row in bytes[HEADER_LEN..vectors_end].chunks_exact(dim * 4) {
        let vals: Vec<f32> = row
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        rows.push(vals);
    }

    let footer = &bytes[vectors_end..];
    let mut metas = Vec::with_capacity(count);
    let mut pos = 0usize;
    while metas.len() < count {
        let offset = (vectors_end + pos) as u64;
        let Some(nl) = footer[pos..].iter().position(|&b| b == b'\n') else {
            return Err(CorpusError::Truncated {
                section: "metadata footer (records)",
                offset: bytes.len() as u64,
                expected: count as u64,
                actual: metas.len() as u64,
            });
        };
        let line = &footer[pos..pos + nl];
        let meta: MetaRecord = serde_json::from_slice(line).map_err(|e| CorpusError::Format {
            offset,
            message: format!("metadata record {}: {e}", metas.len()),
        })?;
        metas.push(meta);
        pos += nl + 1;
    }
    if pos != footer.len() {
        return Err(CorpusError::Format {
            offset: (vectors_end + pos) as u64,
            message: format!("{} trailing bytes after {count} metadata records", footer.len() - pos),
        });
    }

    let name = metas
        .first()
        .map(|m| RepoName::for_kind(m.kind))
        .unwrap_or(RepoName::D);
    let mut documents = Vec::with_capacity(count);
    for (i, (meta, vals)) in metas.into_iter().zip(rows).enumerate() {
        let embedding = Embedding::from_stored(vals).map_err(|e| CorpusError::Format {
            offset: (HEADER_LEN + i * dim * 4) as u64,
            message: e.to_string(),
        })?;
        documents.push(Document::new(meta.id, meta.text, meta.kind, meta.tags, embedding));
    }
    Repository::new(name, dim, documents)
}

pub fn save_vectors(repo: &Repository, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_vectors(repo)).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn load_vectors(path: &Path) -> Result<Repository> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_vectors(&bytes)
}

/// Word → bias-class map used to tag queries and documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TagLexicon {
    entries: BTreeMap<String, String>,
}

impl TagLexicon {
    /// Words are lowercased; the same word mapped to two classes is rejected.
    pub fn new<I, W, C>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (W, C)>,
        W: AsRef<str>,
        C: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (w, c) in entries {
            let word = w.as_ref().to_lowercase();
            let class = c.into();
            if class.is_empty() || class == NO_TAG {
                return Err(CorpusError::Lexicon(format!("invalid class {class:?} for {word}")));
            }
            if let Some(prev) = map.insert(word.clone(), class.clone()) {
                if prev != class {
                    return Err(CorpusError::Lexicon(format!(
                        "word {word:?} mapped to both {prev:?} and {class:?}"
                    )));
                }
            }
        }
        if map.is_empty() {
            return Err(CorpusError::Lexicon("tag lexicon is empty".into()));
        }
        Ok(Self { entries: map })
    }

    /// Load a JSON object `{word: class}`.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(io_err(path))?;
        let raw: BTreeMap<String, String> =
            serde_json::from_str(&s).map_err(|e| CorpusError::Lexicon(e.to_string()))?;
        Self::new(raw)
    }

    pub fn class_of(&self, word: &str) -> Option<&str> {
        self.entries.get(word).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tag assigned when no lexicon word occurs in the text.
pub const NO_TAG: &str = "none";

/// Most frequent bias class among the tokens of `text`; ties go to the
/// lexicographically smallest class, no hits give [`NO_TAG`].
pub fn classify_bias_tag(text: &str, lex: &TagLexicon) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in text::tokenize(text) {
        if let Some(class) = lex.class_of(&tok) {
            *counts.entry(class).or_default() += 1;
        }
    }
    let mut best: Option<(&str, usize)> = None;
    for (class, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((class, n));
        }
    }
    best.map_or_else(|| NO_TAG.to_string(), |(c, _)| c.to_string())
}
