//! Central-difference verification of tape gradients.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{CcaError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many coordinates per parameter tensor, sampled
    /// without replacement. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// Per-parameter worst relative error, in input order.
    pub per_param: Vec<f64>,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Autodiff and finite-difference values at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    /// Coordinates whose ±h perturbation flipped a ReLU; excluded from the max.
    pub skipped_kinks: usize,
}

pub fn relative_error(autodiff: f64, finite_diff: f64) -> f64 {
    (autodiff - finite_diff).abs() / autodiff.abs().max(finite_diff.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    tape.track_kinks(true);
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(CcaError::contract(format!(
            "grad_check needs a scalar function, got dims {:?}",
            value.dims()
        )));
    }
    Ok((value.data()[0], tape.kink_signature()))
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(params: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let (_, base_sig) = eval_scalar(&f, params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: vec![0.0; params.len()],
        worst: None,
        worst_values: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut work = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], param);
        let coords = sample_coords(param.len(), opts.max_coords_per_param, &mut rng);
        for c in coords {
            let orig = param.data()[c];
            work[pi].data_mut()[c] = orig + opts.h;
            let (plus, sig_plus) = eval_scalar(&f, &work)?;
            work[pi].data_mut()[c] = orig - opts.h;
            let (minus, sig_minus) = eval_scalar(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(analytic.data()[c], fd);
            report.checked += 1;
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, c));
                report.worst_values = Some((analytic.data()[c], fd));
            }
        }
    }
    Ok(report)
}

fn sample_coords(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    match limit {
        Some(k) if k < len => {
            for i in 0..k {
                let j = rng.random_range(i..len);
                all.swap(i, j);
            }
            all.truncate(k);
            all
        }
        _ => all,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.01]);
        let report = grad_check(&[x], &GradCheckOptions::default(), |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::vector(vec![1.0]);
        let report = grad_check(&[x], &GradCheckOptions::default(), |tape, v| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn kink_crossing_is_skipped() {
        let x = Tensor::vector(vec![0.5e-4]);
        let report = grad_check(&[x], &GradCheckOptions::default(), |tape, v| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn non_scalar_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(&[x], &GradCheckOptions::default(), |_, v| Ok(v[0])).unwrap_err();
        assert!(matches!(err, CcaError::Contract(_)));
    }
}
