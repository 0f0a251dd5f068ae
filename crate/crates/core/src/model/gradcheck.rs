//! Central finite-difference check of the analytic gradient.
//!
//! The numerical side only calls the forward pass, so it stays independent of
//! the backward implementation it checks.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoder::{loss, loss_and_grad, Example};
use super::params::{ParamVector, ToyEncoderConfig};
use super::tem::{select_tokens, token_scores};
use crate::error::Result;
use crate::seed::rng_for;

pub const FD_STEP: f64 = 1e-6;
/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub parameters_checked: usize,
    pub max_relative_error: f64,
    pub worst_trial: usize,
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest relative error over every parameter for one random instance.
pub fn check_instance(cfg: ToyEncoderConfig, batch_size: usize, k: f64, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, "gradcheck", &[]);
    let params = ParamVector::random_init(cfg, &mut rng);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let tokens: Vec<Array2<f64>> = (0..batch_size)
        .map(|_| Array2::from_shape_fn((cfg.num_tokens, cfg.token_dim), |_| normal.sample(&mut rng)))
        .collect();
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let retained: Vec<Vec<usize>> = tokens
        .iter()
        .map(|t| select_tokens(&token_scores(t.view()), k))
        .collect();
    let batch: Vec<Example<'_>> = tokens
        .iter()
        .zip(&labels)
        .zip(&retained)
        .map(|((t, &label), r)| Example {
            tokens: t.view(),
            label,
            retained: r,
        })
        .collect();

    let (_, grad) = loss_and_grad(&params, &batch)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + FD_STEP;
        let up = loss(&probe, &batch)?;
        probe.as_mut_slice()[i] = orig - FD_STEP;
        let down = loss(&probe, &batch)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad.as_slice()[i], numeric));
    }
    Ok(worst)
}

/// Small random configurations used by the check.
pub fn trial_config(trial: usize) -> ToyEncoderConfig {
    ToyEncoderConfig {
        num_tokens: 3 + trial % 4,
        token_dim: 2 + trial % 3,
        ffn_dim: 3 + trial % 5,
        num_classes: 2 + trial % 3,
    }
}

pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        trials,
        parameters_checked: 0,
        max_relative_error: 0.0,
        worst_trial: 0,
    };
    for t in 0..trials {
        let cfg = trial_config(t);
        let k = [1.0, 0.8, 0.6, 0.5][t % 4];
        let err = check_instance(cfg, 1 + t % 3, k, seed.wrapping_add(t as u64))?;
        report.parameters_checked += cfg.param_count();
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_trial = t;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let r = run_gradcheck(20, 1234).unwrap();
        eprintln!("{r:?}");
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
