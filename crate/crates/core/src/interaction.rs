//! Commonsense-aware interaction: proposals and concepts attend over each
//! other in one multi-head block, and the sentence vector attends over the
//! concepts.

use std::cell::Cell;

use crate::config::{AttentionScale, ModelConfig};
use crate::error::{CcaError, Result};
use crate::numerics::tensor::DEFAULT_LN_EPS;
use crate::numerics::{Tape, Var};
use crate::params::{TextAttentionParams, VisualFusionParams};

thread_local! {
    static FUSION_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`visual_commonsense`] evaluations on the current thread.
pub fn fusion_calls() -> u64 {
    FUSION_CALLS.with(Cell::get)
}

/// Visual-commonsense fusion.
///
/// `X = [P; C]`; head `i` computes `softmax(X W_q,i (X W_k,i)ᵀ / s) X W_v,i`;
/// `F = concat(heads) W_mul`; `F' = F + LN(ReLU(F W_1 + b_1) W_2 + b_2)`.
/// Returns the L2-normalized first `N` rows of `F'`.
pub fn visual_commonsense(tape: &mut Tape, p: Var, c: Var, params: &VisualFusionParams<Var>, cfg: &ModelConfig) -> Result<Var> {
    FUSION_CALLS.with(|n| n.set(n.get() + 1));
    let (n, d_v) = tape.value(p).shape2();
    let (m, d_c) = tape.value(c).shape2();
    if d_c != d_v {
        return Err(CcaError::contract(format!("concept width {d_c} differs from proposal width {d_v}")));
    }
    if n == 0 {
        return Err(CcaError::contract("fusion needs at least one proposal"));
    }
    let heads = cfg.n_heads;
    let d_h = tape.value(params.w_q).cols() / heads;
    let scale = match cfg.attention_scale {
        AttentionScale::FeatureDim => (d_h as f64).sqrt(),
        AttentionScale::SequenceOverHeads => ((n + m) as f64 / heads as f64).sqrt(),
    };
    let x = tape.concat_rows(&[p, c])?;
    let q = tape.matmul(x, params.w_q)?;
    let k = tape.matmul(x, params.w_k)?;
    let v = tape.matmul(x, params.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d_h, (h + 1) * d_h);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, 1.0 / scale);
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let f_mul = tape.matmul(cat, params.w_mul)?;
    let hidden = tape.matmul(f_mul, params.w_ff1)?;
    let hidden = tape.add_row(hidden, params.b_ff1)?;
    let hidden = tape.relu(hidden);
    let ff = tape.matmul(hidden, params.w_ff2)?;
    let ff = tape.add_row(ff, params.b_ff2)?;
    let ff = tape.layer_norm(ff, params.ln_gain, params.ln_bias, DEFAULT_LN_EPS)?;
    let f_cg = tape.add(f_mul, ff)?;
    let top = tape.slice_rows(f_cg, 0, n)?;
    Ok(tape.l2_normalize_rows(top))
}

/// Text-commonsense attention:
/// `q̂ = Norm(softmax((q W_q)(C W_k)ᵀ / s) · C W_v)`.
pub fn text_commonsense(tape: &mut Tape, q: Var, c: Var, params: &TextAttentionParams<Var>, cfg: &ModelConfig) -> Result<Var> {
    let m = tape.value(c).rows();
    if m == 0 {
        return Err(CcaError::contract("text attention needs at least one concept"));
    }
    let d_a = tape.value(params.w_q).cols();
    let scale = match cfg.attention_scale {
        AttentionScale::FeatureDim => (d_a as f64).sqrt(),
        AttentionScale::SequenceOverHeads => (m as f64).sqrt(),
    };
    let qa = tape.matmul(q, params.w_q)?;
    let ka = tape.matmul(c, params.w_k)?;
    let logits = tape.matmul_nt(qa, ka)?;
    let logits = tape.scale(logits, 1.0 / scale);
    let weights = tape.softmax_rows(logits);
    let values = tape.matmul(c, params.w_v)?;
    let mixed = tape.matmul(weights, values)?;
    let out = tape.l2_normalize_rows(mixed);
    let d_q = tape.value(out).len();
    tape.reshape(out, &[d_q])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::params::ModelParams;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_q: 4,
            d_v: 4,
            d_c: 4,
            d_ff: 8,
            n_heads: 2,
            embed_dim: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_parameters_give_zero_rows() {
        let cfg = cfg();
        let params = ModelParams::zeros(&cfg);
        let mut tape = Tape::inference();
        let b = params.bind_constant(&mut tape);
        let p = tape.constant(Tensor::full(&[3, 4], 0.7));
        let c = tape.constant(Tensor::full(&[2, 4], -0.2));
        let out = visual_commonsense(&mut tape, p, c, &b.fusion, &cfg).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_unit_and_counter_moves() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 5);
        let mut tape = Tape::inference();
        let b = params.bind_constant(&mut tape);
        let p = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()));
        let c = tape.constant(Tensor::matrix(2, 4, (0..8).map(|i| (i as f64 * 1.3).cos()).collect()));
        let before = fusion_calls();
        let out = visual_commonsense(&mut tape, p, c, &b.fusion, &cfg).unwrap();
        assert_eq!(fusion_calls(), before + 1);
        let v = tape.value(out);
        assert_eq!(v.dims(), [3, 4]);
        for i in 0..3 {
            let n: f64 = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let cfg = cfg();
        let params = ModelParams::zeros(&cfg);
        let mut tape = Tape::inference();
        let b = params.bind_constant(&mut tape);
        let p = tape.constant(Tensor::zeros(&[3, 4]));
        let c = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            visual_commonsense(&mut tape, p, c, &b.fusion, &cfg),
            Err(CcaError::Contract(_))
        ));
    }

    #[test]
    fn single_concept_collapses() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 2);
        let mut tape = Tape::inference();
        let b = params.bind_constant(&mut tape);
        let q = tape.constant(Tensor::vector(vec![0.3, -1.0, 0.2, 0.5]));
        let crow = Tensor::matrix(1, 4, vec![0.4, 0.1, -0.9, 0.3]);
        let c = tape.constant(crow.clone());
        let out = text_commonsense(&mut tape, q, c, &b.text, &cfg).unwrap();
        let expect = crate::numerics::l2_normalize_rows(&crate::numerics::matmul(&crow, &params.text.w_v).unwrap());
        assert!(tape.value(out).max_abs_diff(&expect.reshape(&[4]).unwrap()) < 1e-14);
    }
}
