//! Concept vocabulary: tokenization, frequency selection, the co-occurrence
//! relation graph and its symmetric degree normalization.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CcaError, Result};
use crate::numerics::Tensor;

/// Default stop-word list, one word per line.
pub const DEFAULT_STOP_WORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StopWords {
    words: BTreeSet<String>,
}

impl Default for StopWords {
    fn default() -> Self {
        StopWords::parse(DEFAULT_STOP_WORDS)
    }
}

impl StopWords {
    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        StopWords { words }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    /// Hex SHA-256 of the sorted list joined by newlines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Lowercase, split on whitespace, trim punctuation from both ends of each
/// piece, drop empties and stop words.
pub fn tokenize(sentence: &str, stop: &StopWords) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|piece| piece.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty() && !stop.contains(t))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub video_id: String,
    pub duration_s: f64,
    pub start_s: f64,
    pub end_s: f64,
    pub sentence: String,
}

impl Sample {
    pub fn validate(&self, stop: &StopWords) -> Result<()> {
        let ok = self.duration_s > 0.0 && 0.0 <= self.start_s && self.start_s < self.end_s && self.end_s <= self.duration_s;
        if !ok {
            return Err(CcaError::Data(format!(
                "sample for video {:?} has span ({}, {}) outside duration {}",
                self.video_id, self.start_s, self.end_s, self.duration_s
            )));
        }
        if tokenize(&self.sentence, stop).is_empty() {
            return Err(CcaError::Data(format!(
                "sample for video {:?} has no tokens after tokenization: {:?}",
                self.video_id, self.sentence
            )));
        }
        Ok(())
    }
}

/// Annotated (video, span, sentence) triples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Validates every sample against the corpus invariants.
    pub fn new(samples: Vec<Sample>, stop: &StopWords) -> Result<Self> {
        for s in &samples {
            s.validate(stop)?;
        }
        Ok(Corpus { samples })
    }

    /// One JSON object per line; blank lines are skipped.
    pub fn from_jsonl(text: &str, stop: &StopWords) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(line).map_err(|e| CcaError::Data(format!("annotation line {}: {e}", i + 1)))?;
            samples.push(s);
        }
        Corpus::new(samples, stop)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("samples serialize"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn video_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.video_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Word vectors keyed by token; absent tokens read as the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Inserts or replaces `token`.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(CcaError::Data(format!(
                "embedding for {token:?} has {} entries, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(CcaError::Data(format!("embedding for {token:?} has non-finite entry {bad}")));
        }
        match self.index.get(token) {
            Some(&i) => self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(token.to_string(), self.tokens.len());
                self.tokens.push(token.to_string());
                self.vectors.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn vector_or_zero(&self, token: &str) -> Vec<f64> {
        self.get(token).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// `[tokens.len() × dim]` matrix of lookups.
    pub fn lookup(&self, tokens: &[String]) -> Tensor {
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in tokens {
            data.extend(self.vector_or_zero(t));
        }
        Tensor::matrix(tokens.len(), self.dim, data)
    }

    /// Parses the text format: a token followed by `dim` reals per line.
    pub fn parse_text(text: &str, dim: usize) -> Result<Self> {
        let mut table = EmbeddingTable::new(dim);
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let vector: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| CcaError::Data(format!("embedding line {}: {e}", i + 1)))
                })
                .collect::<Result<_>>()?;
            table
                .insert(token, &vector)
                .map_err(|e| CcaError::Data(format!("embedding line {}: {e}", i + 1)))?;
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                out.push(' ');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    /// Rows of the table as a `[len × dim]` tensor, in insertion order.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.tokens.len(), self.dim, self.vectors.clone())
    }

    pub fn from_tensor(tokens: Vec<String>, vectors: &Tensor) -> Result<Self> {
        let (rows, dim) = vectors.shape2();
        if rows != tokens.len() {
            return Err(CcaError::Data(format!("{} tokens but {rows} embedding rows", tokens.len())));
        }
        let mut table = EmbeddingTable::new(dim);
        for (i, t) in tokens.iter().enumerate() {
            table.insert(t, vectors.row(i))?;
        }
        Ok(table)
    }

    /// The table restricted to `tokens` that it contains, in the given order.
    pub fn restrict<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> EmbeddingTable {
        let mut out = EmbeddingTable::new(self.dim);
        for t in tokens {
            if let Some(v) = self.get(t) {
                out.insert(t, v).expect("source rows are valid");
            }
        }
        out
    }
}

/// Frequency-selected concepts with their graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary {
    pub concepts: Vec<String>,
    /// `[M × embed_dim]` initial node features.
    pub embeddings: Tensor,
    /// Whether each concept occurs in the training corpus.
    pub seen: Vec<bool>,
    pub min_freq: usize,
    pub stopword_hash: String,
    /// Relation graph `G` (symmetric, unit diagonal).
    pub graph: Option<Tensor>,
    /// `D^{-1/2} G D^{-1/2}`.
    pub adjacency: Option<Tensor>,
    /// Word vectors for every token the corpus uses, so queries can be
    /// encoded without the full embedding file.
    pub lexicon: EmbeddingTable,
}

fn token_counts(corpus: &Corpus, stop: &StopWords) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in &corpus.samples {
        for t in tokenize(&s.sentence, stop) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

/// Tokens with corpus frequency ≥ `min_freq`, by descending frequency then
/// lexicographically. Graph fields are left unset.
pub fn select_concepts(corpus: &Corpus, min_freq: usize, embeddings: &EmbeddingTable, stop: &StopWords) -> Result<ConceptVocabulary> {
    if corpus.is_empty() {
        return Err(CcaError::contract("concept selection needs a non-empty corpus"));
    }
    let counts = token_counts(corpus, stop);
    let mut selected: Vec<(&String, usize)> = counts.iter().filter(|(_, &c)| c >= min_freq).map(|(t, &c)| (t, c)).collect();
    if selected.is_empty() {
        let top = counts.values().max().copied().unwrap_or(0);
        return Err(CcaError::Config(format!(
            "no token reaches min_freq {min_freq} (most frequent occurs {top} times); lower the threshold"
        )));
    }
    selected.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let concepts: Vec<String> = selected.into_iter().map(|(t, _)| t.clone()).collect();
    let lexicon = embeddings.restrict(counts.keys().map(String::as_str));
    Ok(ConceptVocabulary {
        embeddings: embeddings.lookup(&concepts),
        seen: vec![true; concepts.len()],
        concepts,
        min_freq,
        stopword_hash: stop.hash(),
        graph: None,
        adjacency: None,
        lexicon,
    })
}

impl ConceptVocabulary {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.adjacency.is_some()
    }

    /// Appends externally supplied concepts not already present. They are
    /// marked unseen even if the corpus mentions them below threshold, so
    /// their edges come from embedding similarity.
    pub fn extend(&mut self, extra: &[String], embeddings: &EmbeddingTable) -> Result<()> {
        if self.graph.is_some() {
            return Err(CcaError::contract("concepts cannot be added after the graph is built"));
        }
        let mut rows: Vec<Vec<f64>> = (0..self.len()).map(|i| self.embeddings.row(i).to_vec()).collect();
        for token in extra {
            if self.concepts.contains(token) {
                continue;
            }
            self.concepts.push(token.clone());
            self.seen.push(false);
            let v = embeddings.vector_or_zero(token);
            if let Some(src) = embeddings.get(token) {
                self.lexicon.insert(token, src)?;
            }
            rows.push(v);
        }
        self.embeddings = Tensor::from_rows(&rows)?;
        Ok(())
    }

    /// Builds `G` from `corpus` and normalizes it into `A`. Fails if the
    /// vocabulary is already normalized.
    pub fn build_graph(&mut self, corpus: &Corpus, stop: &StopWords) -> Result<()> {
        if self.is_normalized() {
            return Err(CcaError::contract("adjacency is already normalized; normalization is applied once"));
        }
        let g = build_relation_graph(corpus, self, stop)?;
        let a = normalize_adjacency(&g)?;
        self.graph = Some(g);
        self.adjacency = Some(a);
        Ok(())
    }

    pub fn adjacency(&self) -> Result<&Tensor> {
        self.adjacency
            .as_ref()
            .ok_or_else(|| CcaError::contract("concept vocabulary has no normalized adjacency"))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Sentence-level co-occurrence graph.
///
/// `G_ij = max(c_ij / c_i, c_ij / c_j)` where `c_ij` counts sentences holding
/// both concepts and `c_i` sentences holding `i`. Pairs that never co-occur
/// and involve an unseen concept use `max(0, cosine)` of their embeddings.
/// The diagonal is 1.
pub fn build_relation_graph(corpus: &Corpus, vocab: &ConceptVocabulary, stop: &StopWords) -> Result<Tensor> {
    let m = vocab.len();
    if m == 0 {
        return Err(CcaError::contract("relation graph needs at least one concept"));
    }
    let index: HashMap<&str, usize> = vocab.concepts.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut single = vec![0usize; m];
    let mut pair = vec![0usize; m * m];
    for s in &corpus.samples {
        let present: BTreeSet<usize> = tokenize(&s.sentence, stop)
            .iter()
            .filter_map(|t| index.get(t.as_str()).copied())
            .collect();
        for &i in &present {
            single[i] += 1;
            for &j in &present {
                if i != j {
                    pair[i * m + j] += 1;
                }
            }
        }
    }
    let mut g = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            let v = if i == j {
                1.0
            } else {
                let c = pair[i * m + j] as f64;
                if c == 0.0 && (!vocab.seen[i] || !vocab.seen[j]) {
                    cosine(vocab.embeddings.row(i), vocab.embeddings.row(j)).max(0.0)
                } else {
                    let e_ij = c / single[i].max(1) as f64;
                    let e_ji = c / single[j].max(1) as f64;
                    e_ij.max(e_ji)
                }
            };
            g.set(i, j, v);
        }
    }
    Ok(g)
}

/// `A_ij = G_ij / sqrt(d_i d_j)` with `d_i = Σ_j G_ij`.
pub fn normalize_adjacency(g: &Tensor) -> Result<Tensor> {
    let (m, n) = g.shape2();
    if g.rank() != 2 || m != n {
        return Err(CcaError::contract(format!("adjacency must be square, got {:?}", g.dims())));
    }
    for i in 0..m {
        for j in 0..m {
            let v = g.at(i, j);
            if v < 0.0 || !v.is_finite() {
                return Err(CcaError::contract(format!("graph entry ({i},{j}) = {v} is negative or non-finite")));
            }
            if v != g.at(j, i) {
                return Err(CcaError::contract(format!("graph is asymmetric at ({i},{j})")));
            }
        }
    }
    let degree: Vec<f64> = (0..m).map(|i| g.row(i).iter().sum()).collect();
    if let Some(i) = degree.iter().position(|&d| d <= 0.0) {
        return Err(CcaError::contract(format!("concept {i} has zero degree")));
    }
    let mut a = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            a.set(i, j, g.at(i, j) / (degree[i] * degree[j]).sqrt());
        }
    }
    Ok(a)
}
