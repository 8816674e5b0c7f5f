//! Offline commonsense knowledge: weighted relation triples plus a term
//! embedding table, loaded from plain text files.
//!
//! Triples file: UTF-8 TSV with columns subject, relation, object, weight;
//! lines starting with '#' are comments. Embeddings file: first line
//! `DIM <d>`, then one term per line followed by d space-separated floats
//! (multi-word terms use underscores).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

/// The two commonsense relations the graph understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    AtLocation,
    UsedFor,
}

impl Relation {
    pub const ALL: [Relation; 2] = [Relation::AtLocation, Relation::UsedFor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::AtLocation => "AtLocation",
            Relation::UsedFor => "UsedFor",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "atlocation" | "atloc" => Ok(Relation::AtLocation),
            "usedfor" => Ok(Relation::UsedFor),
            other => Err(format!("unknown relation {other:?} (expected AtLocation or UsedFor)")),
        }
    }
}

/// A weighted (subject, relation, object) fact.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTriple {
    pub subject: String,
    pub relation: Relation,
    pub object: String,
    pub weight: f64,
}

/// Lowercases, maps underscores to spaces, and collapses whitespace runs.
/// All KB lookups go through this, so "Coffee_Table" and "coffee  table"
/// resolve identically.
pub fn normalise_term(term: &str) -> String {
    term.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// FNV-1a over the normalised term; stable across processes and platforms.
fn term_hash(term: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in term.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Term → vector table with a fixed dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, term: &str, vector: Vec<f64>) {
        debug_assert_eq!(vector.len(), self.dim);
        self.vectors.insert(normalise_term(term), vector);
    }

    pub fn get(&self, term: &str) -> Option<&Vec<f64>> {
        self.vectors.get(&normalise_term(term))
    }
}

/// Immutable knowledge base: relation triples indexed by (subject, relation)
/// plus the embedding table.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    triples: Vec<KnowledgeTriple>,
    index: BTreeMap<(String, Relation), Vec<(String, f64)>>,
    embeddings: EmbeddingTable,
}

impl KnowledgeBase {
    pub fn new(triples: Vec<KnowledgeTriple>, embeddings: EmbeddingTable) -> Self {
        // Deduplicate (subject, relation, object) keeping the max weight.
        let mut best: BTreeMap<(String, Relation, String), f64> = BTreeMap::new();
        for t in triples {
            let key = (normalise_term(&t.subject), t.relation, normalise_term(&t.object));
            let entry = best.entry(key).or_insert(f64::MIN);
            *entry = entry.max(t.weight);
        }
        let triples: Vec<KnowledgeTriple> = best
            .into_iter()
            .map(|((subject, relation, object), weight)| KnowledgeTriple {
                subject,
                relation,
                object,
                weight,
            })
            .collect();
        let mut index: BTreeMap<(String, Relation), Vec<(String, f64)>> = BTreeMap::new();
        for t in &triples {
            index
                .entry((t.subject.clone(), t.relation))
                .or_default()
                .push((t.object.clone(), t.weight));
        }
        Self { triples, index, embeddings }
    }

    pub fn triples(&self) -> &[KnowledgeTriple] {
        &self.triples
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// Concepts related to `object_class` with weight strictly above 1,
    /// ordered by descending weight, ties broken lexicographically.
    pub fn query_concepts(&self, object_class: &str, relation: Relation) -> Vec<(String, f64)> {
        let key = (normalise_term(object_class), relation);
        let mut out: Vec<(String, f64)> = match self.index.get(&key) {
            Some(entries) => entries.iter().filter(|(_, w)| *w > 1.0).cloned().collect(),
            None => Vec::new(),
        };
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Feature vector for a term: the stored vector when present, otherwise
    /// the mean of the per-token vectors that are present, otherwise a unit
    /// vector drawn from a PRNG seeded by a stable hash of the term.
    pub fn embed(&self, term: &str) -> Vec<f64> {
        let norm = normalise_term(term);
        if let Some(v) = self.embeddings.get(&norm) {
            return v.clone();
        }
        let token_vecs: Vec<&Vec<f64>> =
            norm.split(' ').filter_map(|tok| self.embeddings.get(tok)).collect();
        if !token_vecs.is_empty() {
            let dim = self.embeddings.dim();
            let mut mean = vec![0.0; dim];
            for v in &token_vecs {
                for (m, x) in mean.iter_mut().zip(v.iter()) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= token_vecs.len() as f64;
            }
            return mean;
        }
        hashed_unit_vector(&norm, self.embeddings.dim())
    }

    /// Serialises the triples back to the TSV format `load_kb` reads.
    pub fn write_triples(&self, path: &Path) -> Result<(), KbError> {
        let mut buf = String::from("# subject\trelation\tobject\tweight\n");
        for t in &self.triples {
            buf.push_str(&format!("{}\t{}\t{}\t{}\n", t.subject, t.relation, t.object, t.weight));
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(buf.as_bytes()))
            .map_err(|source| KbError::Io { path: path.display().to_string(), source })
    }
}

fn hashed_unit_vector(term: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(term_hash(term));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// Loads the knowledge base from a triples TSV and an embeddings text file.
/// Malformed rows abort the load with the offending line number.
pub fn load_kb(triples_path: &Path, embeddings_path: &Path) -> Result<KnowledgeBase, KbError> {
    let triples = load_triples(triples_path)?;
    let embeddings = load_embeddings(embeddings_path)?;
    Ok(KnowledgeBase::new(triples, embeddings))
}

fn load_triples(path: &Path) -> Result<Vec<KnowledgeTriple>, KbError> {
    let text = fs::read_to_string(path)
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    let perr = |line: usize, msg: String| KbError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(perr(lineno, format!("expected 4 tab-separated columns, got {}", cols.len())));
        }
        let relation = Relation::from_str(cols[1]).map_err(|e| perr(lineno, e))?;
        let weight: f64 = cols[3]
            .trim()
            .parse()
            .map_err(|_| perr(lineno, format!("bad weight {:?}", cols[3])))?;
        if !weight.is_finite() || weight < 0.0 {
            return Err(perr(lineno, format!("weight must be finite and non-negative, got {weight}")));
        }
        out.push(KnowledgeTriple {
            subject: normalise_term(cols[0]),
            relation,
            object: normalise_term(cols[2]),
            weight,
        });
    }
    Ok(out)
}

fn load_embeddings(path: &Path) -> Result<EmbeddingTable, KbError> {
    let text = fs::read_to_string(path)
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    let perr = |line: usize, msg: String| KbError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty embeddings file".into()))?;
    let dim: usize = header
        .strip_prefix("DIM ")
        .and_then(|d| d.trim().parse().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| perr(1, format!("expected header 'DIM <d>', got {header:?}")))?;
    let mut table = EmbeddingTable::new(dim);
    for (i, raw) in lines {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let term = fields.next().ok_or_else(|| perr(lineno, "missing term".into()))?;
        let values: Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let values = values.map_err(|e| perr(lineno, format!("bad float: {e}")))?;
        if values.len() != dim {
            return Err(perr(lineno, format!("expected {dim} floats, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(perr(lineno, "non-finite embedding entry".into()));
        }
        table.insert(term, values);
    }
    Ok(table)
}
