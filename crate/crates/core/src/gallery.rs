//! Offline proposal gallery and the timed query path.
//!
//! Gallery files are `"CCG1"`, the model hash, an entry count and per entry
//! the video id, duration, span table and the `f64` projections `G1`, `G2`.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::concepts::{tokenize, ConceptVocabulary, Corpus, StopWords};
use crate::config::ModelConfig;
use crate::encoders::{build_proposal_map, truncate_query, ClipFeatures, ConceptInputs};
use crate::error::{CcaError, Result};
use crate::eval::{rank_proposals, recall_report, EvalReport};
use crate::interaction::fusion_calls;
use crate::io::{read_file, write_file, ModelArchive, Reader};
use crate::model::Session;
use crate::numerics::Tensor;

pub const GALLERY_MAGIC: &[u8; 4] = b"CCG1";
/// Leading repetitions of each measurement set that are discarded.
pub const WARMUP_RUNS: usize = 3;

/// Precomputed projections of one video's proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub video_id: String,
    pub duration_s: f64,
    pub spans_s: Vec<(f64, f64)>,
    /// `φ1(P̂)`, `[N × d_q]`
    pub g1: Tensor,
    /// `φ2(P̂)`, `[N × d_q]`
    pub g2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub model_hash: String,
    entries: Vec<GalleryEntry>,
    index: HashMap<String, usize>,
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Gallery {
    pub fn new(model_hash: String, entries: Vec<GalleryEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.g1.rows() != e.spans_s.len() || e.g1.dims() != e.g2.dims() {
                return Err(CcaError::Data(format!(
                    "gallery entry {:?}: {} spans, G1 {:?}, G2 {:?}",
                    e.video_id,
                    e.spans_s.len(),
                    e.g1.dims(),
                    e.g2.dims()
                )));
            }
            if index.insert(e.video_id.clone(), i).is_some() {
                return Err(CcaError::Data(format!("gallery has duplicate video {:?}", e.video_id)));
            }
        }
        Ok(Gallery {
            model_hash,
            entries,
            index,
        })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, video_id: &str) -> Result<&GalleryEntry> {
        self.index
            .get(video_id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| CcaError::NotFound(format!("video {video_id:?} is not in the gallery")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = GALLERY_MAGIC.to_vec();
        out.extend_from_slice(&(self.model_hash.len() as u16).to_le_bytes());
        out.extend_from_slice(self.model_hash.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.video_id.len() as u16).to_le_bytes());
            out.extend_from_slice(e.video_id.as_bytes());
            out.extend_from_slice(&e.duration_s.to_le_bytes());
            out.extend_from_slice(&(e.spans_s.len() as u32).to_le_bytes());
            out.extend_from_slice(&(e.g1.cols() as u32).to_le_bytes());
            for &(s, t) in &e.spans_s {
                out.extend_from_slice(&s.to_le_bytes());
                out.extend_from_slice(&t.to_le_bytes());
            }
            put_f64s(&mut out, &e.g1);
            put_f64s(&mut out, &e.g2);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "gallery");
        if r.take(4)? != GALLERY_MAGIC {
            return Err(CcaError::Data("gallery: bad magic".into()));
        }
        let len = r.u16()? as usize;
        let model_hash = r.string(len)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let video_id = r.string(len)?;
            let duration_s = r.f64()?;
            let n = r.u32()? as usize;
            let d = r.u32()? as usize;
            let spans_s = (0..n).map(|_| Ok((r.f64()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
            let read = |r: &mut Reader| -> Result<Tensor> {
                let data = (0..n * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Tensor::matrix(n, d, data))
            };
            let g1 = read(&mut r)?;
            let g2 = read(&mut r)?;
            entries.push(GalleryEntry {
                video_id,
                duration_s,
                spans_s,
                g1,
                g2,
            });
        }
        r.finish()?;
        Gallery::new(model_hash, entries)
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

fn check_dims(cfg: &ModelConfig, vocab: &ConceptVocabulary) -> Result<()> {
    let emb = vocab.embeddings.cols();
    if emb != cfg.embed_dim || vocab.lexicon.dim() != cfg.embed_dim {
        return Err(CcaError::Config(format!(
            "vocabulary embeddings are {emb}-dimensional, model expects {}",
            cfg.embed_dim
        )));
    }
    Ok(())
}

/// Inference session for an archived model and its vocabulary.
pub fn open_session(archive: &ModelArchive, vocab: &ConceptVocabulary) -> Result<Session> {
    check_dims(&archive.config, vocab)?;
    let inputs = ConceptInputs::new(vocab)?;
    Session::new(archive.config.clone(), &archive.params, &inputs, vocab.lexicon.clone())
}

/// Runs the fusion block and both projections for every video offline.
pub fn precompute_gallery(archive: &ModelArchive, vocab: &ConceptVocabulary, videos: &[ClipFeatures]) -> Result<Gallery> {
    let mut session = open_session(archive, vocab)?;
    let cfg = archive.config.clone();
    let entries = videos
        .iter()
        .map(|v| {
            if v.features.rank() != 2 || v.features.cols() != cfg.d_v {
                return Err(CcaError::Data(format!(
                    "video {:?} has feature dims {:?}, model expects {} columns",
                    v.video_id,
                    v.features.dims(),
                    cfg.d_v
                )));
            }
            let proposals = build_proposal_map(v, cfg.n_clips, cfg.pooling, cfg.sparse_proposals)?;
            let (g1, g2) = session.gallery_projections(&proposals.features)?;
            Ok(GalleryEntry {
                video_id: v.video_id.clone(),
                duration_s: v.duration_s,
                spans_s: proposals.spans_s,
                g1,
                g2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Gallery::new(archive.hash(), entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankedSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

/// Wall-clock phases of one query in milliseconds; `all_ms = te_ms + cml_ms`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingBreakdown {
    pub te_ms: f64,
    pub cml_ms: f64,
    pub all_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub video_id: String,
    pub ranking: Vec<RankedSpan>,
    pub timing: TimingBreakdown,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Answers queries against a gallery built by the same model.
pub struct QueryEngine {
    session: Session,
    stop: StopWords,
    model_hash: String,
    nms_threshold: f64,
}

impl QueryEngine {
    pub fn new(archive: &ModelArchive, vocab: &ConceptVocabulary, stop: StopWords, nms_threshold: f64) -> Result<Self> {
        Ok(QueryEngine {
            session: open_session(archive, vocab)?,
            stop,
            model_hash: archive.hash(),
            nms_threshold,
        })
    }

    pub fn session(&mut self) -> &mut Session {
        &mut self.session
    }

    pub fn check(&self, gallery: &Gallery) -> Result<()> {
        if gallery.model_hash != self.model_hash {
            return Err(CcaError::Data(format!(
                "gallery was built by model {} but the loaded model is {}; rebuild the gallery",
                gallery.model_hash, self.model_hash
            )));
        }
        Ok(())
    }

    fn tokens(&self, sentence: &str) -> Vec<String> {
        truncate_query(tokenize(sentence, &self.stop), self.session.config().max_query_len)
    }

    /// TE = tokenize + encode; CML = text attention + scores + NMS + top-k.
    pub fn query(&mut self, gallery: &Gallery, video_id: &str, sentence: &str, top_k: usize) -> Result<QueryResult> {
        self.check(gallery)?;
        let entry = gallery.entry(video_id)?;
        let fusions = fusion_calls();
        let t0 = Instant::now();
        let tokens = self.tokens(sentence);
        let q = self.session.encode_sentence(&tokens)?;
        let t1 = Instant::now();
        let order = rank_proposals(&mut self.session, &entry.g1, &entry.g2, &entry.spans_s, &q, self.nms_threshold)?;
        let ranking: Vec<RankedSpan> = order
            .into_iter()
            .take(top_k)
            .map(|(i, score)| RankedSpan {
                start_s: entry.spans_s[i].0,
                end_s: entry.spans_s[i].1,
                score,
            })
            .collect();
        let t2 = Instant::now();
        debug_assert_eq!(fusion_calls(), fusions, "query path ran the fusion block");
        Ok(QueryResult {
            video_id: video_id.to_string(),
            ranking,
            timing: TimingBreakdown {
                te_ms: ms(t1 - t0),
                cml_ms: ms(t2 - t1),
                all_ms: ms(t2 - t0),
            },
        })
    }

    /// Counterfactual CML without a gallery: fusion, projections, scores,
    /// NMS and top-k recomputed from raw proposal features.
    pub fn query_without_gallery(
        &mut self,
        proposals: &Tensor,
        spans_s: &[(f64, f64)],
        q: &Tensor,
        top_k: usize,
    ) -> Result<Vec<(usize, f64)>> {
        let (g1, g2) = self.session.gallery_projections(proposals)?;
        let mut order = rank_proposals(&mut self.session, &g1, &g2, spans_s, q, self.nms_threshold)?;
        order.truncate(top_k);
        Ok(order)
    }

    /// Recall table over annotated queries, ranked from the gallery.
    pub fn evaluate(&mut self, gallery: &Gallery, corpus: &Corpus) -> Result<EvalReport> {
        self.check(gallery)?;
        let mut ranked = Vec::with_capacity(corpus.len());
        for s in &corpus.samples {
            let entry = gallery.entry(&s.video_id)?;
            let q = self.session.encode_sentence(&self.tokens(&s.sentence))?;
            let order = rank_proposals(&mut self.session, &entry.g1, &entry.g2, &entry.spans_s, &q, self.nms_threshold)?;
            ranked.push(order.into_iter().map(|(i, _)| entry.spans_s[i]).collect());
        }
        let gt: Vec<(f64, f64)> = corpus.samples.iter().map(|s| (s.start_s, s.end_s)).collect();
        recall_report(&ranked, &gt)
    }
}

/// Median and 95th percentile (nearest rank) in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Self {
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let pick = |q: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            let rank = (q * v.len() as f64).ceil() as usize;
            v[rank.clamp(1, v.len()) - 1]
        };
        let median = if v.is_empty() {
            f64::NAN
        } else if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        };
        Summary {
            median_ms: median,
            p95_ms: pick(0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub queries: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub proposals_per_video: usize,
    pub te: Summary,
    pub cml: Summary,
    pub all: Summary,
    /// Counterfactual CML that reruns the fusion block per query.
    pub cml_no_gallery: Summary,
    /// Median no-gallery CML over median gallery CML.
    pub speedup: f64,
    /// Largest `|all − (te + cml)|` seen, in milliseconds.
    pub max_additivity_gap_ms: f64,
}

/// A query for [`bench`]: the video to search and the sentence.
#[derive(Clone, Debug)]
pub struct BenchQuery {
    pub video_id: String,
    pub sentence: String,
}

/// Times every query `repetitions` times after [`WARMUP_RUNS`] discarded
/// runs, on the gallery path and on the no-gallery counterfactual (which
/// needs the raw clip features of each queried video).
pub fn bench(
    engine: &mut QueryEngine,
    gallery: &Gallery,
    features: &HashMap<String, ClipFeatures>,
    queries: &[BenchQuery],
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(CcaError::Config(format!("bench needs at least 3 repetitions, got {repetitions}")));
    }
    if queries.is_empty() {
        return Err(CcaError::Config("bench needs at least one query".into()));
    }
    engine.check(gallery)?;
    let cfg = engine.session.config().clone();
    let (mut te, mut cml, mut all, mut cf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut gap: f64 = 0.0;
    let mut proposals_per_video = 0;
    for query in queries {
        let entry = gallery.entry(&query.video_id)?;
        proposals_per_video = proposals_per_video.max(entry.spans_s.len());
        for rep in 0..WARMUP_RUNS + repetitions {
            let r = engine.query(gallery, &query.video_id, &query.sentence, 5)?;
            if rep >= WARMUP_RUNS {
                te.push(r.timing.te_ms);
                cml.push(r.timing.cml_ms);
                all.push(r.timing.all_ms);
                gap = gap.max((r.timing.all_ms - r.timing.te_ms - r.timing.cml_ms).abs());
            }
        }
        let clips = features
            .get(&query.video_id)
            .ok_or_else(|| CcaError::NotFound(format!("clip features for video {:?}", query.video_id)))?;
        let proposals = build_proposal_map(clips, cfg.n_clips, cfg.pooling, cfg.sparse_proposals)?;
        let q = engine.session.encode_sentence(&engine.tokens(&query.sentence))?;
        for rep in 0..WARMUP_RUNS + repetitions {
            let t0 = Instant::now();
            engine.query_without_gallery(&proposals.features, &proposals.spans_s, &q, 5)?;
            if rep >= WARMUP_RUNS {
                cf.push(ms(t0.elapsed()));
            }
        }
    }
    let cml_s = Summary::of(&cml);
    let cf_s = Summary::of(&cf);
    Ok(BenchReport {
        queries: queries.len(),
        repetitions,
        warmup: WARMUP_RUNS,
        proposals_per_video,
        te: Summary::of(&te),
        cml: cml_s,
        all: Summary::of(&all),
        cml_no_gallery: cf_s,
        speedup: cf_s.median_ms / cml_s.median_ms,
        max_additivity_gap_ms: gap,
    })
}
