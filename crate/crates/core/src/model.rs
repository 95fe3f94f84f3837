//! End-to-end forward pass for one (video, query) sample, and a reusable
//! inference session.

use crate::alignment::{self, Scores};
use crate::concepts::EmbeddingTable;
use crate::config::ModelConfig;
use crate::encoders::{self, ConceptInputs};
use crate::error::Result;
use crate::interaction;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ModelParams;

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub scores: Scores,
    /// `[N × d_v]`
    pub p_hat: Var,
    /// `[d_q]`
    pub q: Var,
    /// `[d_q]`
    pub q_hat: Var,
}

/// Concept features `C`, or `None` when the ablation uses no concepts.
pub fn concept_features(tape: &mut Tape, bound: &ModelParams<Var>, inputs: &ConceptInputs, cfg: &ModelConfig) -> Result<Option<Var>> {
    if cfg.ablation.uses_concepts() {
        Ok(Some(encoders::encode_concepts(tape, inputs, &bound.gcn)?))
    } else {
        Ok(None)
    }
}

fn normalized_vector(tape: &mut Tape, v: Var) -> Result<Var> {
    let d = tape.value(v).len();
    let n = tape.l2_normalize_rows(v);
    tape.reshape(n, &[d])
}

/// Commonsense-guided proposals `P̂`: the fusion block, or plain row
/// normalization when the ablation skips it.
pub fn proposal_side(
    tape: &mut Tape,
    bound: &ModelParams<Var>,
    concepts: Option<Var>,
    proposals: &Tensor,
    cfg: &ModelConfig,
) -> Result<Var> {
    let p = tape.constant(proposals.clone());
    match concepts {
        Some(c) if cfg.ablation.uses_visual_fusion() => interaction::visual_commonsense(tape, p, c, &bound.fusion, cfg),
        _ => Ok(tape.l2_normalize_rows(p)),
    }
}

/// Sentence vector `q` and commonsense-guided query `q̂`.
pub fn query_side(
    tape: &mut Tape,
    bound: &ModelParams<Var>,
    concepts: Option<Var>,
    tokens: &[String],
    lexicon: &EmbeddingTable,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let enc = encoders::encode_query(tape, tokens, lexicon, &bound.gru)?;
    let q = enc.sentence;
    let q_hat = match concepts {
        Some(c) if cfg.ablation.uses_text_attention() => interaction::text_commonsense(tape, q, c, &bound.text, cfg)?,
        _ => normalized_vector(tape, q)?,
    };
    Ok((q, q_hat))
}

/// Full forward pass. `concepts` comes from [`concept_features`] and may be
/// shared by every sample in a batch.
pub fn forward_sample(
    tape: &mut Tape,
    bound: &ModelParams<Var>,
    concepts: Option<Var>,
    proposals: &Tensor,
    tokens: &[String],
    lexicon: &EmbeddingTable,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    let p_hat = proposal_side(tape, bound, concepts, proposals, cfg)?;
    let (q, q_hat) = query_side(tape, bound, concepts, tokens, lexicon, cfg)?;
    let scores = alignment::match_scores(tape, p_hat, q, q_hat, &bound.space, cfg.ablation)?;
    Ok(ForwardOutput { scores, p_hat, q, q_hat })
}

/// Gradient-free evaluation with parameters and concept features bound once.
/// Every call rewinds the tape to just after the shared prefix.
pub struct Session {
    cfg: ModelConfig,
    lexicon: EmbeddingTable,
    tape: Tape,
    bound: ModelParams<Var>,
    concepts: Option<Var>,
    mark: usize,
}

impl Session {
    pub fn new(cfg: ModelConfig, params: &ModelParams, inputs: &ConceptInputs, lexicon: EmbeddingTable) -> Result<Self> {
        let mut tape = Tape::inference();
        let bound = params.bind_constant(&mut tape);
        let concepts = concept_features(&mut tape, &bound, inputs, &cfg)?;
        let mark = tape.len();
        Ok(Session {
            cfg,
            lexicon,
            tape,
            bound,
            concepts,
            mark,
        })
    }

    /// `(φ1(P̂), φ2(P̂))` for one proposal map.
    pub fn gallery_projections(&mut self, proposals: &Tensor) -> Result<(Tensor, Tensor)> {
        self.tape.truncate(self.mark);
        let p_hat = proposal_side(&mut self.tape, &self.bound, self.concepts, proposals, &self.cfg)?;
        let (g1, g2) = alignment::project(&mut self.tape, p_hat, &self.bound.space)?;
        Ok((self.tape.value(g1).clone(), self.tape.value(g2).clone()))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Sentence vector `q` of a tokenized query.
    pub fn encode_sentence(&mut self, tokens: &[String]) -> Result<Tensor> {
        self.tape.truncate(self.mark);
        let enc = encoders::encode_query(&mut self.tape, tokens, &self.lexicon, &self.bound.gru)?;
        Ok(self.tape.value(enc.sentence).clone())
    }

    /// Scores from stored projections `g1 = φ1(P̂)`, `g2 = φ2(P̂)` and the
    /// sentence vector; runs the text attention but never the fusion block.
    pub fn score_projected(&mut self, g1: &Tensor, g2: &Tensor, q: &Tensor) -> Result<Tensor> {
        self.tape.truncate(self.mark);
        let t = &mut self.tape;
        let (g1, g2, q) = (t.constant(g1.clone()), t.constant(g2.clone()), t.constant(q.clone()));
        let q_hat = match self.concepts {
            Some(c) if self.cfg.ablation.uses_text_attention() => interaction::text_commonsense(t, q, c, &self.bound.text, &self.cfg)?,
            _ => normalized_vector(t, q)?,
        };
        let s = alignment::combine(t, g1, g2, q, q_hat, self.bound.space.g, self.cfg.ablation)?;
        Ok(self.tape.value(s.a).clone())
    }

    /// End-to-end scores `(a, m, n)` without any precomputation.
    pub fn forward(&mut self, proposals: &Tensor, tokens: &[String]) -> Result<(Tensor, Tensor, Tensor)> {
        self.tape.truncate(self.mark);
        let out = forward_sample(
            &mut self.tape,
            &self.bound,
            self.concepts,
            proposals,
            tokens,
            &self.lexicon,
            &self.cfg,
        )?;
        let v = |x: Var| self.tape.value(x).clone();
        Ok((v(out.scores.a), v(out.scores.m), v(out.scores.n)))
    }
}
