//! On-disk formats: binary tensors, model archives, vocabulary artifacts
//! and per-video feature files.
//!
//! Tensor files are `"CCT1"`, a little-endian `u32` rank, `rank` `u32`
//! dims and an `f32` little-endian row-major payload.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::{ConceptVocabulary, Corpus, EmbeddingTable, StopWords};
use crate::config::ModelConfig;
use crate::encoders::ClipFeatures;
use crate::error::{CcaError, Result};
use crate::numerics::Tensor;
use crate::params::ModelParams;

pub const TENSOR_MAGIC: &[u8; 4] = b"CCT1";
pub const FEATURE_EXT: &str = "ten";

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CcaError::Data(format!("{}: truncated at byte {} (need {n} more)", self.what, self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String> {
        let what = self.what;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CcaError::Data(format!("{what}: name is not UTF-8")))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CcaError::Data(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CcaError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CcaError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CcaError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CcaError::io(path, e))
}

fn write_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_tensor_body(r: &mut Reader) -> Result<Tensor> {
    if r.take(4)? != TENSOR_MAGIC {
        return Err(CcaError::Data(format!("{}: bad tensor magic", r.what)));
    }
    let rank = r.u32()? as usize;
    let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let bytes = count
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| CcaError::Data(format!("{}: dims {dims:?} overflow", r.what)))?;
    let payload = r.take(bytes)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(dims, data)
}

/// Serializes `t` in the tensor file format. Values are stored as `f32`.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    write_tensor_body(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor file");
    let t = read_tensor_body(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, "tensor file");
    let t = read_tensor_body(&mut r).map_err(|e| CcaError::Data(format!("{}: {e}", path.display())))?;
    r.finish().map_err(|e| CcaError::Data(format!("{}: {e}", path.display())))?;
    Ok(t)
}

/// Trained parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl ModelArchive {
    /// Wraps `params`, rounding them to the stored precision so an archive
    /// in memory equals its reloaded copy.
    pub fn new(config: ModelConfig, params: &ModelParams) -> Self {
        let params = params.map_named("", &mut |_, t| t.round_to_f32());
        ModelArchive { config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor_body(&mut out, t);
        }
        out.extend_from_slice(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        out
    }

    /// Parses an archive and validates every tensor against the echoed
    /// configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model archive");
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            if !seen.insert(name.clone()) {
                return Err(CcaError::Data(format!("model archive: duplicate tensor {name}")));
            }
            named.push((name, read_tensor_body(&mut r)?));
        }
        let config: ModelConfig =
            serde_json::from_slice(r.rest()).map_err(|e| CcaError::Data(format!("model archive: config echo: {e}")))?;
        config.validate()?;
        let params = ModelParams::from_named(&config, named)?;
        Ok(ModelArchive { config, params })
    }

    /// SHA-256 of the serialized archive, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| match e {
            CcaError::Data(m) => CcaError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabManifest {
    concepts: Vec<String>,
    seen: Vec<bool>,
    min_freq: usize,
    stopword_hash: String,
    stop_words: Vec<String>,
    lexicon_tokens: Vec<String>,
}

const VOCAB_MANIFEST: &str = "manifest.json";
const VOCAB_BLOBS: [&str; 4] = ["embeddings", "graph", "adjacency", "lexicon"];

/// Writes `manifest.json` plus tensor blobs for the embeddings, `G`, `A`
/// and the query lexicon into `dir`. The graph must be built.
pub fn save_vocabulary(dir: &Path, vocab: &ConceptVocabulary, stop: &StopWords) -> Result<()> {
    let (Some(graph), Some(adjacency)) = (&vocab.graph, &vocab.adjacency) else {
        return Err(CcaError::contract("vocabulary graph must be built before saving"));
    };
    let manifest = VocabManifest {
        concepts: vocab.concepts.clone(),
        seen: vocab.seen.clone(),
        min_freq: vocab.min_freq,
        stopword_hash: vocab.stopword_hash.clone(),
        stop_words: stop.words().map(String::from).collect(),
        lexicon_tokens: vocab.lexicon.tokens().to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join(VOCAB_MANIFEST), json.as_bytes())?;
    let lexicon = vocab.lexicon.to_tensor();
    for (name, t) in VOCAB_BLOBS.iter().zip([&vocab.embeddings, graph, adjacency, &lexicon]) {
        save_tensor(&dir.join(format!("{name}.{FEATURE_EXT}")), t)?;
    }
    Ok(())
}

/// Loads a vocabulary artifact with the stop-word list it was built with.
pub fn load_vocabulary(dir: &Path) -> Result<(ConceptVocabulary, StopWords)> {
    let manifest_path = dir.join(VOCAB_MANIFEST);
    let manifest: VocabManifest =
        serde_json::from_str(&read_text(&manifest_path)?).map_err(|e| CcaError::Data(format!("{}: {e}", manifest_path.display())))?;
    let stop = StopWords::parse(&manifest.stop_words.join("\n"));
    if stop.hash() != manifest.stopword_hash {
        return Err(CcaError::Data(format!("{}: stop-word hash mismatch", manifest_path.display())));
    }
    let mut blobs: Vec<Tensor> = VOCAB_BLOBS
        .iter()
        .map(|name| load_tensor(&dir.join(format!("{name}.{FEATURE_EXT}"))))
        .collect::<Result<_>>()?;
    let lexicon_t = blobs.pop().expect("four blobs");
    let adjacency = blobs.pop().expect("four blobs");
    let graph = blobs.pop().expect("four blobs");
    let embeddings = blobs.pop().expect("four blobs");
    let m = manifest.concepts.len();
    if manifest.seen.len() != m || embeddings.rank() != 2 || embeddings.rows() != m {
        return Err(CcaError::Data(format!("{}: concept count disagrees with blobs", dir.display())));
    }
    for (name, t) in [("graph", &graph), ("adjacency", &adjacency)] {
        if t.dims() != [m, m] {
            return Err(CcaError::Data(format!(
                "{}: {name} has dims {:?}, expected [{m}, {m}]",
                dir.display(),
                t.dims()
            )));
        }
    }
    let lexicon = if manifest.lexicon_tokens.is_empty() {
        EmbeddingTable::new(embeddings.cols())
    } else {
        EmbeddingTable::from_tensor(manifest.lexicon_tokens, &lexicon_t)?
    };
    let vocab = ConceptVocabulary {
        concepts: manifest.concepts,
        embeddings,
        seen: manifest.seen,
        min_freq: manifest.min_freq,
        stopword_hash: manifest.stopword_hash,
        graph: Some(graph),
        adjacency: Some(adjacency),
        lexicon,
    };
    Ok((vocab, stop))
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.{FEATURE_EXT}"))
}

/// Loads `<video_id>.ten` for every video of `corpus`, taking durations from
/// the annotations. Missing files are reported together, by video id.
pub fn load_features(dir: &Path, corpus: &Corpus) -> Result<HashMap<String, ClipFeatures>> {
    let mut durations: BTreeMap<&str, f64> = BTreeMap::new();
    for s in &corpus.samples {
        durations.entry(&s.video_id).or_insert(s.duration_s);
    }
    let missing: Vec<&str> = durations.keys().copied().filter(|id| !feature_path(dir, id).is_file()).collect();
    if !missing.is_empty() {
        return Err(CcaError::NotFound(format!(
            "feature files in {} for videos: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    durations
        .into_iter()
        .map(|(id, duration_s)| {
            let features = load_tensor(&feature_path(dir, id))?;
            if features.rank() != 2 {
                return Err(CcaError::Data(format!(
                    "features of {id:?} must be a matrix, got dims {:?}",
                    features.dims()
                )));
            }
            Ok((
                id.to_string(),
                ClipFeatures {
                    video_id: id.to_string(),
                    duration_s,
                    features,
                },
            ))
        })
        .collect()
}

pub fn load_corpus(path: &Path, stop: &StopWords) -> Result<Corpus> {
    Corpus::from_jsonl(&read_text(path)?, stop).map_err(|e| match e {
        CcaError::Data(m) => CcaError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_embeddings(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::parse_text(&read_text(path)?, dim).map_err(|e| match e {
        CcaError::Data(m) => CcaError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
