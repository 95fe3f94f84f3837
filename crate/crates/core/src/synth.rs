//! Seeded synthetic grounding data with a planted concept structure.
//!
//! Each concept has an orthonormal visual prototype `p_i` and the word vector
//! `e_i = p_i Q`, where `Q` is a fixed random `d_v × embed_dim` map with
//! orthonormal rows, so clip content is a linear image of the concepts'
//! embeddings. A sample picks `k` concepts, preferring the paired partner
//! `i ^ 1` of the last pick, writes them into a sentence padded with stop
//! words, and fills its ground-truth clips with the mean of the chosen
//! prototypes; every other clip shows one of two distractor concepts.
//! Gaussian noise is added to every clip.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::concepts::{Corpus, EmbeddingTable, Sample, StopWords};
use crate::encoders::{span_seconds, ClipFeatures};
use crate::error::{CcaError, Result};
use crate::io::{feature_path, save_tensor, write_file};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_clips: usize,
    pub d_v: usize,
    /// Number of concepts `M_s`.
    pub n_concepts: usize,
    /// Concepts per sentence.
    pub k: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    /// Probability of continuing with the partner of the last concept.
    pub partner_prob: f64,
    pub distractors: usize,
    /// Inclusive range of ground-truth lengths in clips.
    pub span_clips: (usize, usize),
    /// Inclusive range of video durations in seconds.
    pub duration_s: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_train: 200,
            n_eval: 100,
            n_clips: 16,
            d_v: 64,
            n_concepts: 40,
            k: 3,
            embed_dim: 300,
            noise_sigma: 0.1,
            partner_prob: 0.8,
            distractors: 2,
            span_clips: (1, 1),
            duration_s: (20.0, 60.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CcaError::Config(m));
        if self.k == 0 || self.k > self.n_concepts {
            return fail(format!("need 1 ≤ k ≤ n_concepts, got k={} n_concepts={}", self.k, self.n_concepts));
        }
        if self.n_concepts < self.k + self.distractors {
            return fail(format!(
                "{} concepts cannot supply k={} plus {} distractors",
                self.n_concepts, self.k, self.distractors
            ));
        }
        if self.distractors == 0 {
            return fail("at least one distractor concept is needed".into());
        }
        let (lo, hi) = self.span_clips;
        if lo == 0 || hi < lo || hi > self.n_clips {
            return fail(format!("span_clips {:?} must satisfy 1 ≤ lo ≤ hi ≤ n_clips", self.span_clips));
        }
        if !(self.duration_s.0 > 0.0 && self.duration_s.1 >= self.duration_s.0) {
            return fail(format!("duration range {:?} is invalid", self.duration_s));
        }
        if self.n_clips == 0 || self.d_v == 0 || self.embed_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.d_v > self.embed_dim {
            return fail(format!("d_v {} must not exceed embed_dim {}", self.d_v, self.embed_dim));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || !(0.0..=1.0).contains(&self.partner_prob) {
            return fail("noise_sigma must be ≥ 0 and partner_prob in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Corpus,
    pub eval: Corpus,
    /// Clip features by video id; one video per sample.
    pub features: BTreeMap<String, ClipFeatures>,
    pub embeddings: EmbeddingTable,
    pub concept_names: Vec<String>,
    /// `[M_s × d_v]` visual prototypes.
    pub prototypes: Tensor,
    /// Planted concept indices of each sample, train then eval.
    pub planted: Vec<Vec<usize>>,
    /// Ground-truth clip span of each sample, train then eval.
    pub gt_clips: Vec<(usize, usize)>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const FILLERS: &[&str] = &["the", "a", "and", "with", "then", "in", "on", "of", "to", "at"];

/// Pronounceable pseudo-word for concept `i`; distinct for every `i`.
pub fn concept_name(mut i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut out = String::new();
    for _ in 0..2 {
        let s = i % n;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        i /= n;
    }
    while i > 0 {
        let s = i % n;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        i /= n;
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Gram–Schmidt over Gaussian draws while rows fit in `d`; beyond that,
/// plain random unit vectors.
fn prototypes(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut v = gaussian(rng, d);
        if i < d {
            for r in &rows[..i] {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        rows.push(unit(v));
    }
    Tensor::from_rows(&rows).expect("rows have equal width")
}

fn pick_concepts(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<usize> {
    let m = cfg.n_concepts;
    let mut chosen = vec![rng.random_range(0..m)];
    while chosen.len() < cfg.k {
        let partner = chosen[chosen.len() - 1] ^ 1;
        if partner < m && !chosen.contains(&partner) && rng.random::<f64>() < cfg.partner_prob {
            chosen.push(partner);
        } else {
            let c = rng.random_range(0..m);
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }
    }
    chosen
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..cfg.n_concepts).map(concept_name).collect();
    let protos = prototypes(&mut rng, cfg.n_concepts, cfg.d_v);
    let lift = prototypes(&mut rng, cfg.d_v, cfg.embed_dim);
    let word_vectors = crate::numerics::matmul(&protos, &lift)?;
    let mut embeddings = EmbeddingTable::new(cfg.embed_dim);
    for (i, name) in names.iter().enumerate() {
        embeddings.insert(name, word_vectors.row(i))?;
    }

    let total = cfg.n_train + cfg.n_eval;
    let mut samples = Vec::with_capacity(total);
    let mut features = BTreeMap::new();
    let mut planted = Vec::with_capacity(total);
    let mut gt_clips = Vec::with_capacity(total);
    for idx in 0..total {
        let chosen = pick_concepts(&mut rng, cfg);
        let len = rng.random_range(cfg.span_clips.0..=cfg.span_clips.1);
        let a = rng.random_range(0..=cfg.n_clips - len);
        let b = a + len - 1;
        let mut pool: Vec<usize> = (0..cfg.n_concepts).filter(|c| !chosen.contains(c)).collect();
        let mut distract = Vec::with_capacity(cfg.distractors);
        for _ in 0..cfg.distractors {
            let j = rng.random_range(0..pool.len());
            distract.push(pool.swap_remove(j));
        }
        let mut mean = vec![0.0; cfg.d_v];
        for &c in &chosen {
            mean.iter_mut().zip(protos.row(c)).for_each(|(m, p)| *m += p / cfg.k as f64);
        }
        let mut data = Vec::with_capacity(cfg.n_clips * cfg.d_v);
        for t in 0..cfg.n_clips {
            let base: Vec<f64> = if (a..=b).contains(&t) {
                mean.clone()
            } else {
                protos.row(distract[rng.random_range(0..distract.len())]).to_vec()
            };
            let noise = gaussian(&mut rng, cfg.d_v);
            data.extend(base.iter().zip(noise).map(|(x, e)| x + cfg.noise_sigma * e));
        }
        let duration_s = if cfg.duration_s.1 > cfg.duration_s.0 {
            rng.random_range(cfg.duration_s.0..cfg.duration_s.1)
        } else {
            cfg.duration_s.0
        };
        let duration_s = (duration_s * 100.0).round() / 100.0;
        let mut words = Vec::with_capacity(2 * cfg.k + 1);
        words.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        for (i, &c) in chosen.iter().enumerate() {
            if i > 0 {
                words.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
            }
            words.push(names[c].clone());
        }
        let video_id = format!("syn{:03}_{idx:04}", cfg.seed % 1000);
        let (start_s, end_s) = span_seconds((a, b), cfg.n_clips, duration_s);
        samples.push(Sample {
            video_id: video_id.clone(),
            duration_s,
            start_s,
            end_s,
            sentence: words.join(" "),
        });
        features.insert(
            video_id.clone(),
            ClipFeatures {
                video_id,
                duration_s,
                features: Tensor::matrix(cfg.n_clips, cfg.d_v, data).round_to_f32(),
            },
        );
        planted.push(chosen);
        gt_clips.push((a, b));
    }
    let stop = StopWords::default();
    let eval = samples.split_off(cfg.n_train);
    Ok(SynthDataset {
        train: Corpus::new(samples, &stop)?,
        eval: Corpus::new(eval, &stop)?,
        features,
        embeddings,
        concept_names: names,
        prototypes: protos,
        planted,
        gt_clips,
    })
}

/// File names inside a dataset directory written by [`write_dataset`].
pub mod layout {
    pub const TRAIN: &str = "train.jsonl";
    pub const EVAL: &str = "eval.jsonl";
    pub const EMBEDDINGS: &str = "embeddings.txt";
    pub const FEATURES: &str = "features";
    pub const SYNTH_CONFIG: &str = "synth.json";
}

/// Writes annotations, word vectors, one feature file per video and the
/// generator configuration under `dir`.
pub fn write_dataset(ds: &SynthDataset, cfg: &SynthConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(layout::TRAIN), ds.train.to_jsonl().as_bytes())?;
    write_file(&dir.join(layout::EVAL), ds.eval.to_jsonl().as_bytes())?;
    write_file(&dir.join(layout::EMBEDDINGS), ds.embeddings.to_text().as_bytes())?;
    write_file(&dir.join(layout::SYNTH_CONFIG), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let features = dir.join(layout::FEATURES);
    for (id, clips) in &ds.features {
        save_tensor(&feature_path(&features, id), &clips.features)?;
    }
    Ok(())
}
