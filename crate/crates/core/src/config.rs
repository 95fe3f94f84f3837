//! Model and training configuration. `TrainConfig` is the JSON file the CLI
//! reads; `ModelConfig` is the subset that shapes parameters and is echoed
//! into every model archive.

use serde::{Deserialize, Serialize};

use crate::error::{CcaError, Result};

/// Which parts of the network are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Proposals skip the visual-commonsense fusion.
    NoVc,
    /// The query skips the text-commonsense attention.
    NoTc,
    /// Only the commonsense-guided space scores proposals.
    NoCc,
    /// No commonsense anywhere; a single common space.
    Backbone,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoVc, Ablation::NoTc, Ablation::NoCc, Ablation::Backbone];

    pub fn uses_visual_fusion(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoTc | Ablation::NoCc)
    }

    pub fn uses_text_attention(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoVc | Ablation::NoCc)
    }

    pub fn uses_concepts(self) -> bool {
        self != Ablation::Backbone
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoVc => "no_vc",
            Ablation::NoTc => "no_tc",
            Ablation::NoCc => "no_cc",
            Ablation::Backbone => "backbone",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = CcaError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| CcaError::Config(format!("unknown ablation {s:?}")))
    }
}

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d_h)` for the fusion heads and `sqrt(d_a)` for the text attention.
    FeatureDim,
    /// `sqrt((N + M) / n_heads)` for the fusion heads and `sqrt(M)` for the
    /// text attention.
    SequenceOverHeads,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Clips per video after resampling (side of the 2D proposal map).
    pub n_clips: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub d_c: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Width of the word and concept embeddings.
    pub embed_dim: usize,
    pub max_query_len: usize,
    pub attention_scale: AttentionScale,
    pub pooling: Pooling,
    /// Keep only a strided subset of long spans in the proposal map.
    pub sparse_proposals: bool,
    /// Scale of the tied query/key initialization of the fusion heads.
    pub qk_init_gain: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_clips: 16,
            d_v: 64,
            d_q: 64,
            d_c: 64,
            n_heads: 4,
            d_ff: 128,
            embed_dim: 300,
            max_query_len: 30,
            attention_scale: AttentionScale::FeatureDim,
            pooling: Pooling::Max,
            sparse_proposals: false,
            qk_init_gain: 8.0,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_v / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CcaError::Config(m));
        if self.n_clips == 0 || self.d_v == 0 || self.d_q == 0 || self.embed_dim == 0 || self.d_ff == 0 {
            return fail("dimensions and n_clips must be positive".into());
        }
        if self.d_c != self.d_v {
            return fail(format!("d_c ({}) must equal d_v ({})", self.d_c, self.d_v));
        }
        if self.n_heads == 0 || !self.d_v.is_multiple_of(self.n_heads) {
            return fail(format!("n_heads ({}) must divide d_v ({})", self.n_heads, self.d_v));
        }
        if !self.d_q.is_multiple_of(2) {
            return fail(format!("d_q ({}) must be even (two recurrent directions)", self.d_q));
        }
        if self.max_query_len == 0 {
            return fail("max_query_len must be positive".into());
        }
        if !self.qk_init_gain.is_finite() {
            return fail("qk_init_gain must be finite".into());
        }
        Ok(())
    }
}

/// Everything a training run needs besides data. Serialized flat so the
/// JSON file reads as one table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_clips: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub d_c: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub embed_dim: usize,
    pub max_query_len: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub nms_threshold: f64,
    pub min_freq: usize,
    pub ablation: Ablation,
    pub attention_scale: AttentionScale,
    pub pooling: Pooling,
    pub sparse_proposals: bool,
    pub qk_init_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 16,
            seed: 7,
            n_clips: m.n_clips,
            d_v: m.d_v,
            d_q: m.d_q,
            d_c: m.d_c,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            embed_dim: m.embed_dim,
            max_query_len: m.max_query_len,
            t_min: 0.5,
            t_max: 1.0,
            nms_threshold: 0.49,
            min_freq: 3,
            ablation: m.ablation,
            attention_scale: m.attention_scale,
            pooling: m.pooling,
            sparse_proposals: m.sparse_proposals,
            qk_init_gain: m.qk_init_gain,
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_clips: self.n_clips,
            d_v: self.d_v,
            d_q: self.d_q,
            d_c: self.d_c,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            embed_dim: self.embed_dim,
            max_query_len: self.max_query_len,
            attention_scale: self.attention_scale,
            pooling: self.pooling,
            sparse_proposals: self.sparse_proposals,
            qk_init_gain: self.qk_init_gain,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CcaError::Config(format!(
                "learning_rate {} must be a finite value ≥ 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(CcaError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.t_min) || self.t_max <= self.t_min || self.t_max > 1.0 {
            return Err(CcaError::Config(format!(
                "label thresholds need 0 ≤ t_min < t_max ≤ 1, got {} and {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(CcaError::Config(format!("nms_threshold {} must lie in (0, 1)", self.nms_threshold)));
        }
        if self.min_freq == 0 {
            return Err(CcaError::Config("min_freq must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
