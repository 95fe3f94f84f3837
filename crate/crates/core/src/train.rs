//! Mini-batch training with Adam and a deterministic shuffle.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::soft_labels;
use crate::concepts::{tokenize, ConceptVocabulary, Corpus, EmbeddingTable, StopWords};
use crate::config::{ModelConfig, TrainConfig};
use crate::encoders::{build_proposal_map, truncate_query, ClipFeatures, ConceptInputs, ProposalSet};
use crate::error::{CcaError, Result};
use crate::model::{concept_features, forward_sample};
use crate::numerics::{Tape, Tensor};
use crate::optim::Adam;
use crate::params::ModelParams;

/// Stream id of the shuffle generator (parameter init uses stream 0).
pub const SHUFFLE_STREAM: u64 = 1;

/// One prepared (video, query) pair.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    /// `<video_id>#<line index>`
    pub id: String,
    pub video_id: String,
    pub proposals: ProposalSet,
    pub tokens: Vec<String>,
    pub gt_s: (f64, f64),
    pub labels: Tensor,
}

/// Builds proposal maps, tokens and soft labels for every sample of
/// `corpus`. Proposal maps are shared per video.
pub fn prepare_samples(
    corpus: &Corpus,
    features: &HashMap<String, ClipFeatures>,
    cfg: &ModelConfig,
    t_min: f64,
    t_max: f64,
    stop: &StopWords,
) -> Result<Vec<PreparedSample>> {
    let mut maps: HashMap<&str, ProposalSet> = HashMap::new();
    let mut out = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.samples.iter().enumerate() {
        let clips = features
            .get(&s.video_id)
            .ok_or_else(|| CcaError::NotFound(format!("features for video {:?}", s.video_id)))?;
        if clips.features.cols() != cfg.d_v {
            return Err(CcaError::Data(format!(
                "video {:?} has {}-dim clip features, model expects {}",
                s.video_id,
                clips.features.cols(),
                cfg.d_v
            )));
        }
        if !maps.contains_key(s.video_id.as_str()) {
            let mut video = clips.clone();
            video.duration_s = s.duration_s;
            maps.insert(
                &s.video_id,
                build_proposal_map(&video, cfg.n_clips, cfg.pooling, cfg.sparse_proposals)?,
            );
        }
        let proposals = maps[s.video_id.as_str()].clone();
        let tokens = truncate_query(tokenize(&s.sentence, stop), cfg.max_query_len);
        let gt_s = (s.start_s, s.end_s);
        let labels = soft_labels(&proposals.spans_s, gt_s, t_min, t_max)?;
        out.push(PreparedSample {
            id: format!("{}#{i}", s.video_id),
            video_id: s.video_id.clone(),
            proposals,
            tokens,
            gt_s,
            labels,
        });
    }
    Ok(out)
}

/// Fisher–Yates over `0..n` drawing `next_u64() % (i + 1)` for `i` from
/// `n - 1` down to 1.
pub fn shuffle_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Loss and gradients of one batch; parameters are not modified.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[&PreparedSample],
    inputs: &ConceptInputs,
    lexicon: &EmbeddingTable,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let concepts = concept_features(&mut tape, &bound, inputs, cfg)?;
    let mut total = None;
    for s in batch {
        let out = forward_sample(&mut tape, &bound, concepts, &s.proposals.features, &s.tokens, lexicon, cfg)?;
        let loss = tape.bce_with_logits(out.scores.a, &s.labels)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(CcaError::Numeric(format!("non-finite loss {v} on sample {}", s.id)));
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| CcaError::contract("empty batch"))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(mean).data()[0];
    let grads = tape.backward(mean)?;
    let leaves: Vec<Tensor> = bound
        .leaves()
        .into_iter()
        .zip(params.leaves())
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();
    Ok((value, leaves))
}

/// Trains from `init` for `cfg.epochs` epochs. `on_epoch` sees each epoch's
/// index and mean loss as soon as it finishes.
pub fn train_from(
    cfg: &TrainConfig,
    init: ModelParams,
    samples: &[PreparedSample],
    inputs: &ConceptInputs,
    lexicon: &EmbeddingTable,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CcaError::contract("training set is empty"));
    }
    let model_cfg = cfg.model();
    let mut params = init;
    let names = params.names();
    let mut opt = Adam::new(params.leaves());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffle_indices(samples.len(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = batch_gradients(&params, &batch, inputs, lexicon, &model_cfg)?;
            sum += loss * batch.len() as f64;
            opt.step(&mut params.leaves_mut(), &grads, &names, cfg.learning_rate)?;
        }
        let mean = sum / samples.len() as f64;
        log::info!("epoch {} loss {mean:.6}", epoch + 1);
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainOutput { params, epoch_losses })
}

/// Seeded initialization followed by [`train_from`].
pub fn train(cfg: &TrainConfig, samples: &[PreparedSample], vocab: &ConceptVocabulary) -> Result<TrainOutput> {
    let model_cfg = cfg.model();
    let inputs = ConceptInputs::new(vocab)?;
    let init = ModelParams::init(&model_cfg, cfg.seed);
    train_from(cfg, init, samples, &inputs, &vocab.lexicon, |_, _| {})
}
