//! Laplace/Gaussian noise calibration, sampling and the analytic variance of
//! the aggregated per-round noise.

use ndarray::Array1;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedDpError, Result};

/// Per-client privacy budget (ε_i, δ_i). Laplace requires δ = 0, Gaussian δ > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(FedDpError::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(FedDpError::InvalidParameter(format!(
                "delta must lie in [0, 1), got {delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Laplace,
    Gaussian,
    None,
}

/// Mechanism choice with its clip bounds, sampling rate and the two
/// accountant constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpMechanismSpec {
    pub kind: MechanismKind,
    /// ℓ₁ clip bound, used by the Laplace mechanism.
    pub xi1: f64,
    /// ℓ₂ clip bound, used by the Gaussian mechanism.
    pub xi2: f64,
    /// Sample fraction per local step: 1 for Laplace, < 1 for Gaussian.
    pub q: f64,
    pub c1: f64,
    pub c2: f64,
}

impl DpMechanismSpec {
    pub fn laplace(xi1: f64) -> Self {
        Self {
            kind: MechanismKind::Laplace,
            xi1,
            xi2: f64::MAX,
            q: 1.0,
            c1: 10.0,
            c2: 1.0,
        }
    }

    pub fn gaussian(xi2: f64, q: f64, c1: f64, c2: f64) -> Self {
        Self {
            kind: MechanismKind::Gaussian,
            xi1: f64::MAX,
            xi2,
            q,
            c1,
            c2,
        }
    }

    pub fn none() -> Self {
        Self {
            kind: MechanismKind::None,
            xi1: f64::MAX,
            xi2: f64::MAX,
            q: 1.0,
            c1: 10.0,
            c2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MechanismKind::Laplace => {
                if self.q != 1.0 {
                    return Err(FedDpError::InvalidParameter(
                        "Laplace mechanism requires q = 1".into(),
                    ));
                }
                if self.xi1 <= 0.0 {
                    return Err(FedDpError::InvalidParameter(
                        "xi1 must be positive".into(),
                    ));
                }
            }
            MechanismKind::Gaussian => {
                if !(0.0..1.0).contains(&self.q) || self.q == 0.0 {
                    return Err(FedDpError::InvalidParameter(
                        "Gaussian mechanism requires q in (0, 1)".into(),
                    ));
                }
                if self.xi2 <= 0.0 || self.c1 <= 0.0 || self.c2 <= 0.0 {
                    return Err(FedDpError::InvalidParameter(
                        "xi2, c1, c2 must be positive".into(),
                    ));
                }
            }
            MechanismKind::None => {}
        }
        Ok(())
    }
}

fn check_positive(pairs: &[(&str, f64)]) -> Result<()> {
    for &(name, value) in pairs {
        if value <= 0.0 {
            return Err(FedDpError::InvalidParameter(format!(
                "{name} must be positive, got {value}"
            )));
        }
    }
    Ok(())
}

/// Laplace scale 2bTξ₁ / (N dᵢ εᵢ) making client i's replies ε_i-DP over T rounds.
pub fn laplace_scale(
    budget: &PrivacyBudget,
    xi1: f64,
    b: usize,
    t_total: usize,
    n_clients: usize,
    d_i: usize,
) -> Result<f64> {
    check_positive(&[
        ("epsilon", budget.epsilon),
        ("xi1", xi1),
        ("b", b as f64),
        ("T", t_total as f64),
        ("N", n_clients as f64),
        ("d_i", d_i as f64),
    ])?;
    if b > n_clients {
        return Err(FedDpError::InvalidParameter(format!(
            "b = {b} exceeds N = {n_clients}"
        )));
    }
    Ok(2.0 * b as f64 * t_total as f64 * xi1 / (n_clients as f64 * d_i as f64 * budget.epsilon))
}

/// Minimal Gaussian σᵢ with σᵢ² = c₂²ξ₂²/(dᵢ²εᵢ²) · (bT/N) · log(1/δᵢ).
pub fn gaussian_sigma(
    budget: &PrivacyBudget,
    xi2: f64,
    b: usize,
    t_total: usize,
    n_clients: usize,
    d_i: usize,
    c2: f64,
) -> Result<f64> {
    if budget.delta <= 0.0 {
        return Err(FedDpError::GaussianDeltaZero);
    }
    check_positive(&[
        ("epsilon", budget.epsilon),
        ("xi2", xi2),
        ("c2", c2),
        ("b", b as f64),
        ("T", t_total as f64),
        ("N", n_clients as f64),
        ("d_i", d_i as f64),
    ])?;
    let var = c2 * c2 * xi2 * xi2 / (d_i as f64 * d_i as f64 * budget.epsilon * budget.epsilon)
        * (b as f64 * t_total as f64 / n_clients as f64)
        * (1.0 / budget.delta).ln();
    Ok(var.sqrt())
}

/// Gaussian calibration is only stated for ε < c₁q²T.
pub fn validate_gaussian_epsilon(q: f64, t_total: usize, c1: f64, epsilon: f64) -> bool {
    epsilon < c1 * q * q * t_total as f64
}

/// Inverse-CDF Laplace draw with the given scale.
pub fn sample_laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    // u uniform in (-1/2, 1/2); x = -scale * sgn(u) * ln(1 - 2|u|)
    let u: f64 = rng.gen::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// One client's noise vector wᵗᵢ of length `p`.
pub fn sample_noise(
    spec: &DpMechanismSpec,
    budget: &PrivacyBudget,
    b: usize,
    t_total: usize,
    n_clients: usize,
    d_i: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    spec.validate()?;
    match spec.kind {
        MechanismKind::None => Ok(Array1::zeros(p)),
        MechanismKind::Laplace => {
            let scale = laplace_scale(budget, spec.xi1, b, t_total, n_clients, d_i)?;
            Ok(Array1::from_iter(
                (0..p).map(|_| sample_laplace(scale, rng)),
            ))
        }
        MechanismKind::Gaussian => {
            let sigma = gaussian_sigma(budget, spec.xi2, b, t_total, n_clients, d_i, spec.c2)?;
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| FedDpError::InvalidParameter(format!("bad sigma: {e}")))?;
            Ok(Array1::from_iter((0..p).map(|_| normal.sample(rng))))
        }
    }
}

/// Analytic E‖wᵗᵇ‖₂² of the aggregated round noise.
///
/// Laplace: 8η²pbT²ξ₁²/(Nd²) · Σ 1/εᵢ².
/// Gaussian: c₂²η²pTξ₂²/d² · Σ (1/εᵢ²)·log(1/δᵢ); note it carries no b.
pub fn aggregated_noise_variance(
    spec: &DpMechanismSpec,
    budgets: &[PrivacyBudget],
    b: usize,
    t_total: usize,
    eta_t: f64,
    p: usize,
    d_total: usize,
) -> Result<f64> {
    spec.validate()?;
    let n_clients = budgets.len();
    if n_clients == 0 {
        return Err(FedDpError::InvalidParameter("no budgets".into()));
    }
    let d = d_total as f64;
    match spec.kind {
        MechanismKind::None => Ok(0.0),
        MechanismKind::Laplace => {
            let sum_inv_eps_sq: f64 = budgets.iter().map(|bu| 1.0 / (bu.epsilon * bu.epsilon)).sum();
            Ok(8.0 * eta_t * eta_t * p as f64 * b as f64 * (t_total as f64).powi(2) * spec.xi1
                * spec.xi1
                / (n_clients as f64 * d * d)
                * sum_inv_eps_sq)
        }
        MechanismKind::Gaussian => {
            let mut sum = 0.0;
            for bu in budgets {
                if bu.delta <= 0.0 {
                    return Err(FedDpError::GaussianDeltaZero);
                }
                sum += (1.0 / bu.delta).ln() / (bu.epsilon * bu.epsilon);
            }
            Ok(spec.c2 * spec.c2 * eta_t * eta_t * p as f64 * t_total as f64 * spec.xi2 * spec.xi2
                / (d * d)
                * sum)
        }
    }
}
