//! Uncertainty-weighted multi-task loss.
//!
//! Each task `i` has a learnable log-variance `s_i = log sigma_i^2`. The total
//! is `sum_i L_i / (2 sigma_i^2) + log sigma_i`, which in log-variance form is
//! `sum_i L_i / (2 exp(s_i)) + s_i / 2`. The same weighting applies to the
//! regression and classification terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_TASKS: usize = 3;

/// Per-task log-variances, ordered year, structure, property type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub log_var: [f64; N_TASKS],
}

impl Default for UncertaintyWeights {
    fn default() -> Self {
        UncertaintyWeights {
            log_var: [0.0; N_TASKS],
        }
    }
}

impl UncertaintyWeights {
    pub fn sigma(&self) -> [f64; N_TASKS] {
        self.log_var.map(|s| (s / 2.0).exp())
    }

    /// Multiplier applied to each task loss, `1 / (2 sigma_i^2)`.
    pub fn task_weights(&self) -> [f64; N_TASKS] {
        self.log_var.map(|s| 0.5 * (-s).exp())
    }
}

/// Per-task losses for one batch: normalized-year MSE, structure and
/// property-type cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLoss {
    pub year: f64,
    pub structure: f64,
    pub ptype: f64,
}

impl TaskLoss {
    pub fn as_array(&self) -> [f64; N_TASKS] {
        [self.year, self.structure, self.ptype]
    }
}

/// Combined loss over any number of tasks with log-variances `log_var`.
pub fn combined_loss(losses: &[f64], log_var: &[f64]) -> Result<f64> {
    combined_loss_with_grad(losses, log_var).map(|(v, _, _)| v)
}

/// Combined loss and its partial derivatives with respect to each `L_i` and
/// each `s_i`.
pub fn combined_loss_with_grad(
    losses: &[f64],
    log_var: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if losses.len() != log_var.len() {
        return Err(Error::LengthMismatch {
            left: losses.len(),
            right: log_var.len(),
        });
    }
    if losses.iter().chain(log_var).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("combined loss inputs".into()));
    }
    let mut total = 0.0;
    let mut d_loss = Vec::with_capacity(losses.len());
    let mut d_log_var = Vec::with_capacity(losses.len());
    for (&l, &s) in losses.iter().zip(log_var) {
        let w = 0.5 * (-s).exp();
        total += w * l + 0.5 * s;
        d_loss.push(w);
        d_log_var.push(0.5 - w * l);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("combined loss".into()));
    }
    Ok((total, d_loss, d_log_var))
}

/// Combined loss written with sigma directly: `L / (2 sigma^2) + ln sigma` per task.
pub fn combined_loss_sigma(losses: &[f64], sigma: &[f64]) -> Result<f64> {
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let log_var: Vec<f64> = sigma.iter().map(|s| 2.0 * s.ln()).collect();
    combined_loss(losses, &log_var)
}

/// The sigma minimizing `L / (2 sigma^2) + ln sigma`, which is `sqrt(L)`.
pub fn optimal_sigma(loss: f64) -> Result<f64> {
    if !(loss > 0.0) || !loss.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "optimal sigma needs a positive finite loss, got {loss}"
        )));
    }
    Ok(loss.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        assert!((combined_loss_sigma(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        let v = combined_loss_sigma(&[4.0], &[2.0]).unwrap();
        assert!((v - (0.5 + 2f64.ln())).abs() < 1e-12);
        assert!((v - 1.1931).abs() < 1e-4);
        assert_eq!(combined_loss(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(combined_loss(&[f64::NAN], &[0.0]).is_err());
        assert!(combined_loss(&[1.0], &[f64::INFINITY]).is_err());
        assert!(combined_loss(&[1.0, 2.0], &[0.0]).is_err());
        assert!(optimal_sigma(0.0).is_err());
        assert!(optimal_sigma(-1.0).is_err());
    }

    #[test]
    fn optimal_sigma_by_grid_search() {
        for (l, expect) in [(4.0, 2.0), (1.0, 1.0), (0.25, 0.5)] {
            let mut best = (f64::INFINITY, 0.0);
            for i in 1..=10_000 {
                let s = i as f64 * 1e-3;
                let v = combined_loss_sigma(&[l], &[s]).unwrap();
                if v < best.0 {
                    best = (v, s);
                }
            }
            assert!((best.1 - expect).abs() <= 1e-3, "L={l}: grid {}", best.1);
            assert_eq!(optimal_sigma(l).unwrap(), expect);
        }
    }

    #[test]
    fn weights_and_sigma() {
        let w = UncertaintyWeights {
            log_var: [0.0, 2f64.ln() * 2.0, -1.0],
        };
        let s = w.sigma();
        assert!((s[0] - 1.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12);
        assert!((w.task_weights()[1] - 0.125).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn log_var_gradient_matches_central_differences(
            l in proptest::collection::vec(0.0f64..10.0, 3),
            s in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let (_, _, ds) = combined_loss_with_grad(&l, &s).unwrap();
            let h = 1e-4;
            for i in 0..3 {
                let mut up = s.clone();
                up[i] += h;
                let mut dn = s.clone();
                dn[i] -= h;
                let fd = (combined_loss(&l, &up).unwrap() - combined_loss(&l, &dn).unwrap()) / (2.0 * h);
                let rel = (fd - ds[i]).abs() / ds[i].abs().max(1e-8);
                prop_assert!(rel < 1e-4 || (fd - ds[i]).abs() < 1e-9, "i={} fd={} an={}", i, fd, ds[i]);
            }
        }

        #[test]
        fn components_nonnegative_total_finite(
            l in proptest::collection::vec(0.0f64..1e3, 3),
            s in proptest::collection::vec(-20.0f64..20.0, 3),
        ) {
            prop_assert!(combined_loss(&l, &s).unwrap().is_finite());
        }
    }
}
