//! Complementary common space: proposal projections against the plain and the
//! commonsense-guided query, their learned mixture, and the training loss.

use crate::config::Ablation;
use crate::error::{CcaError, Result};
use crate::numerics::tape::bce_value;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{CommonSpaceParams, MlpParams};

/// Intersection over union of two `(start, end)` intervals.
pub fn temporal_iou(s1: (f64, f64), s2: (f64, f64)) -> Result<f64> {
    if s1.0 >= s1.1 || s2.0 >= s2.1 {
        return Err(CcaError::contract(format!("degenerate span in IoU: {s1:?}, {s2:?}")));
    }
    Ok(iou_unchecked(s1, s2))
}

pub(crate) fn iou_unchecked(s1: (f64, f64), s2: (f64, f64)) -> f64 {
    let inter = (s1.1.min(s2.1) - s1.0.max(s2.0)).max(0.0);
    let union = s1.1.max(s2.1) - s1.0.min(s2.0);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `y_i = clamp((IoU_i − t_min) / (t_max − t_min), 0, 1)`.
pub fn soft_labels(spans_s: &[(f64, f64)], gt: (f64, f64), t_min: f64, t_max: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&t_min) || t_max <= t_min || t_max > 1.0 {
        return Err(CcaError::contract(format!(
            "label thresholds need 0 ≤ t_min < t_max ≤ 1, got {t_min}, {t_max}"
        )));
    }
    let mut y = Vec::with_capacity(spans_s.len());
    for &s in spans_s {
        let iou = temporal_iou(s, gt)?;
        y.push(((iou - t_min) / (t_max - t_min)).clamp(0.0, 1.0));
    }
    Ok(Tensor::vector(y))
}

fn mlp(tape: &mut Tape, x: Var, p: &MlpParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.w2)?;
    tape.add_row(o, p.b2)
}

/// `(φ1(P̂), φ2(P̂))`, each `[N × d_q]`. Query-independent.
pub fn project(tape: &mut Tape, p_hat: Var, params: &CommonSpaceParams<Var>) -> Result<(Var, Var)> {
    let g1 = mlp(tape, p_hat, &params.phi1)?;
    let g2 = mlp(tape, p_hat, &params.phi2)?;
    Ok((g1, g2))
}

#[derive(Clone, Copy, Debug)]
pub struct Scores {
    /// Mixed score used for ranking and the loss.
    pub a: Var,
    /// `φ1(p̂_i) · q`
    pub m: Var,
    /// `φ2(p̂_i) · q̂`
    pub n: Var,
}

fn rows_dot(tape: &mut Tape, rows: Var, v: Var) -> Result<Var> {
    let d = tape.value(v).len();
    let col = tape.reshape(v, &[d, 1])?;
    let out = tape.matmul(rows, col)?;
    let n = tape.value(out).len();
    tape.reshape(out, &[n])
}

/// Scores from projected proposals: `a = γ m + (1 − γ) n` with `γ = σ(g)`.
/// `no_cc` returns `a = n`, `backbone` returns `a = m`.
pub fn combine(tape: &mut Tape, g1: Var, g2: Var, q: Var, q_hat: Var, g: Var, ablation: Ablation) -> Result<Scores> {
    let m = rows_dot(tape, g1, q)?;
    let n = rows_dot(tape, g2, q_hat)?;
    let a = match ablation {
        Ablation::NoCc => n,
        Ablation::Backbone => m,
        _ => {
            let gamma = tape.sigmoid(g);
            let rest = tape.one_minus(gamma);
            let gm = tape.scale_by(m, gamma)?;
            let rn = tape.scale_by(n, rest)?;
            tape.add(gm, rn)?
        }
    };
    Ok(Scores { a, m, n })
}

/// `m_i = φ1(p̂_i)·q`, `n_i = φ2(p̂_i)·q̂`, mixed per [`combine`].
pub fn match_scores(
    tape: &mut Tape,
    p_hat: Var,
    q: Var,
    q_hat: Var,
    params: &CommonSpaceParams<Var>,
    ablation: Ablation,
) -> Result<Scores> {
    let (g1, g2) = project(tape, p_hat, params)?;
    combine(tape, g1, g2, q, q_hat, params.g, ablation)
}

/// Mean binary cross-entropy of `σ(a)` against `y`, log arguments clamped at 1e-12.
pub fn bce_loss(a: &Tensor, y: &Tensor) -> Result<f64> {
    if a.len() != y.len() {
        return Err(CcaError::Shape {
            op: "bce",
            left: a.dims().to_vec(),
            right: y.dims().to_vec(),
        });
    }
    Ok(bce_value(a.data(), y.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::params::ModelParams;

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou((2.0, 4.0), (2.0, 4.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou((0.0, 2.0), (3.0, 5.0)).unwrap(), 0.0);
        assert!((temporal_iou((0.0, 4.0), (2.0, 6.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(temporal_iou((1.0, 1.0), (0.0, 2.0)).is_err());
    }

    #[test]
    fn label_examples() {
        let spans = [(0.0, 1.0), (0.0, 4.0), (1.0, 3.0)];
        // IoUs with (0, 2): 0.5, 0.5, 1/3; with (0, 4): 0.25, 1, 0.5
        let y = soft_labels(&spans, (0.0, 2.0), 0.5, 1.0).unwrap();
        assert_eq!(y.data(), [0.0, 0.0, 0.0]);
        let y = soft_labels(&spans, (0.0, 4.0), 0.5, 1.0).unwrap();
        assert_eq!(y.data(), [0.0, 1.0, 0.0]);
        let y = soft_labels(&[(0.0, 3.0)], (0.0, 4.0), 0.5, 1.0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
    }

    fn identity_space(d: usize, g: f64) -> CommonSpaceParams {
        let mlp = || MlpParams {
            w1: Tensor::identity(d),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::identity(d),
            b2: Tensor::zeros(&[d]),
        };
        CommonSpaceParams {
            g: Tensor::vector(vec![g]),
            phi1: mlp(),
            phi2: mlp(),
        }
    }

    fn run(space: &CommonSpaceParams, p: Tensor, q: Tensor, qh: Tensor, ablation: Ablation) -> (Tensor, Tensor, Tensor) {
        let mut tape = Tape::inference();
        let s = space.map_named("", &mut |_, t| tape.constant(t.clone()));
        let p = tape.constant(p);
        let q = tape.constant(q);
        let qh = tape.constant(qh);
        let out = match_scores(&mut tape, p, q, qh, &s, ablation).unwrap();
        (tape.value(out.a).clone(), tape.value(out.m).clone(), tape.value(out.n).clone())
    }

    #[test]
    fn identity_projections_give_unit_scores() {
        let e1 = Tensor::vector(vec![1.0, 0.0, 0.0]);
        for g in [-3.0, 0.0, 2.0] {
            let (a, m, n) = run(
                &identity_space(3, g),
                Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]),
                e1.clone(),
                e1.clone(),
                Ablation::Full,
            );
            assert!((a.data()[0] - 1.0).abs() < 1e-15);
            assert_eq!(m.data(), [1.0]);
            assert_eq!(n.data(), [1.0]);
        }
    }

    #[test]
    fn mixing_limits() {
        let p = Tensor::matrix(2, 2, vec![0.6, 0.8, 1.0, 0.0]);
        let q = Tensor::vector(vec![1.0, 2.0]);
        let qh = Tensor::vector(vec![-1.0, 0.5]);
        let (a, m, _) = run(&identity_space(2, 30.0), p.clone(), q.clone(), qh.clone(), Ablation::Full);
        assert!(a.max_abs_diff(&m) < 1e-12);
        let (a, _, n) = run(&identity_space(2, -30.0), p.clone(), q.clone(), qh.clone(), Ablation::Full);
        assert!(a.max_abs_diff(&n) < 1e-12);
        let (a, _, n) = run(&identity_space(2, 0.0), p.clone(), q.clone(), qh.clone(), Ablation::NoCc);
        assert_eq!(a, n);
        let (a, m, _) = run(&identity_space(2, 0.0), p, q, qh, Ablation::Backbone);
        assert_eq!(a, m);
    }

    #[test]
    fn bce_examples() {
        let a = Tensor::zeros(&[5]);
        let y = Tensor::full(&[5], 0.5);
        assert!((bce_loss(&a, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&Tensor::vector(vec![30.0]), &Tensor::vector(vec![1.0])).unwrap() < 1e-12);
    }

    #[test]
    fn zero_backbone_scores_are_zero() {
        let cfg = ModelConfig::default();
        let params = ModelParams::zeros(&cfg);
        let p = Tensor::full(&[3, cfg.d_v], 0.125);
        let q = Tensor::full(&[cfg.d_q], 0.3);
        let (a, _, _) = run(&params.space, p, q.clone(), q, Ablation::Backbone);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }
}
