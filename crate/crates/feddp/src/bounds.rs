//! Convergence-rate upper bounds U(T, b) for both mechanisms, their
//! closed-form minimizers, KKT candidate enumeration, alternate convex
//! search, and estimation of the constants feeding the bounds.

use serde::{Deserialize, Serialize};

use crate::data::ClientPartition;
use crate::dp::{MechanismKind, PrivacyBudget};
use crate::error::{FedDpError, Result};
use crate::model::{
    clip_gradient, gradient, loss, train_centralized, ModelParams, NormOrder,
};

/// Every constant feeding the bound U(T, b).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub mu: f64,
    pub lambda: f64,
    /// Gradient-norm bound G.
    pub g: f64,
    /// Non-iid degree Γ.
    pub non_iid_degree: f64,
    /// Initial squared distance Y₀.
    pub y0: f64,
    /// Parameter dimension p.
    pub p: usize,
    /// Total sample count d.
    pub d_total: usize,
    pub n_clients: usize,
    pub budgets: Vec<PrivacyBudget>,
    pub xi1: f64,
    pub xi2: f64,
    /// Per-client stochastic-gradient variance bounds Λᵢ.
    pub lambda_i: Vec<f64>,
    /// Batch sampling rate q.
    pub q: f64,
    pub c2: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        if self.mu <= 0.0 || self.lambda <= 0.0 || self.g <= 0.0 {
            return Err(FedDpError::InvalidParameter(
                "mu, lambda, G must be positive".into(),
            ));
        }
        if self.non_iid_degree < 0.0 || self.y0 < 0.0 {
            return Err(FedDpError::InvalidParameter(
                "Gamma and Y0 must be nonnegative".into(),
            ));
        }
        if self.budgets.len() != self.n_clients {
            return Err(FedDpError::InvalidParameter(format!(
                "{} budgets for {} clients",
                self.budgets.len(),
                self.n_clients
            )));
        }
        if self.p == 0 || self.d_total == 0 || self.n_clients == 0 {
            return Err(FedDpError::InvalidParameter(
                "p, d and N must be positive".into(),
            ));
        }
        Ok(())
    }

    /// γ = 2λ/μ.
    pub fn gamma(&self) -> f64 {
        2.0 * self.lambda / self.mu
    }

    pub fn sum_inv_eps_sq(&self) -> f64 {
        self.budgets
            .iter()
            .map(|b| 1.0 / (b.epsilon * b.epsilon))
            .sum()
    }

    /// Σ (1/εᵢ²)·log(1/δᵢ); errors when any δᵢ = 0.
    pub fn sum_inv_eps_sq_log_inv_delta(&self) -> Result<f64> {
        let mut sum = 0.0;
        for b in &self.budgets {
            if b.delta <= 0.0 {
                return Err(FedDpError::GaussianDeltaZero);
            }
            sum += (1.0 / b.delta).ln() / (b.epsilon * b.epsilon);
        }
        Ok(sum)
    }

    /// Σᵢ dᵢ Λᵢ²/(q d²) under the equal-size assumption dᵢ = d/N.
    pub fn batch_variance_term(&self) -> f64 {
        let d = self.d_total as f64;
        let d_i = d / self.n_clients as f64;
        self.lambda_i
            .iter()
            .map(|l| d_i * l * l / (self.q * d * d))
            .sum()
    }

    // C-form coefficients of the Laplace bound.
    pub fn c1_coeff(&self) -> f64 {
        let n = self.n_clients as f64;
        4.0 / (self.mu * self.mu) * 2.0 * n * self.g * self.g / (n - 1.0)
    }

    pub fn c2_coeff(&self) -> f64 {
        let n = self.n_clients as f64;
        let d = self.d_total as f64;
        32.0 * self.p as f64 * self.xi1 * self.xi1 / (self.mu * self.mu * n * d * d)
            * self.sum_inv_eps_sq()
    }

    pub fn c3_coeff(&self) -> f64 {
        let n = self.n_clients as f64;
        self.gamma() * self.y0
            + 4.0 / (self.mu * self.mu)
                * (2.0 * self.lambda * self.non_iid_degree - 2.0 * self.g * self.g / (n - 1.0))
    }

    // E-form coefficients of the Gaussian bound.
    pub fn e1_coeff(&self) -> f64 {
        let n = self.n_clients as f64;
        8.0 * self.g * self.g / (self.mu * self.mu) * n / (n - 1.0)
    }

    pub fn e2_coeff(&self) -> Result<f64> {
        let n = self.n_clients as f64;
        let d = self.d_total as f64;
        let noise = self.gamma() * self.c2 * self.c2 * self.p as f64 * self.xi2 * self.xi2
            / (d * d)
            * self.sum_inv_eps_sq_log_inv_delta()?;
        Ok(4.0 / (self.mu * self.mu)
            * (-2.0 * self.g * self.g / (n - 1.0)
                + self.batch_variance_term()
                + 2.0 * self.lambda * self.non_iid_degree)
            + self.gamma() * self.y0
            - 4.0 / (self.mu * self.mu) * noise)
    }

    /// E₃, the T → ∞ limit of the Gaussian bound.
    pub fn e3_coeff(&self) -> Result<f64> {
        let d = self.d_total as f64;
        Ok(4.0 / (self.mu * self.mu) * self.c2 * self.c2 * self.p as f64 * self.xi2 * self.xi2
            / (d * d)
            * self.sum_inv_eps_sq_log_inv_delta()?)
    }
}

fn check_b(b: f64, n: usize) -> Result<()> {
    if !(1.0..=n as f64).contains(&b) {
        return Err(FedDpError::InvalidParameter(format!(
            "b = {b} outside [1, {n}]"
        )));
    }
    Ok(())
}

/// Laplace-mechanism bound in its C-form:
/// U(T, b) = (C₁/b + C₂bT² + C₃)/(T + γ).
pub fn bound_laplace(t: f64, b: f64, consts: &BoundConstants) -> Result<f64> {
    check_b(b, consts.n_clients)?;
    let gamma = consts.gamma();
    Ok((consts.c1_coeff() / b + consts.c2_coeff() * b * t * t + consts.c3_coeff()) / (t + gamma))
}

/// The same Laplace bound assembled from the ω₀/ω₁ decomposition; kept as the
/// second algebraic route for identity tests.
pub fn bound_laplace_omega_form(t: f64, b: f64, consts: &BoundConstants) -> Result<f64> {
    check_b(b, consts.n_clients)?;
    let n = consts.n_clients as f64;
    let d = consts.d_total as f64;
    let gamma = consts.gamma();
    let mu_sq = consts.mu * consts.mu;
    let omega0 = 2.0 * (n - b) / (n - 1.0) * consts.g * consts.g / b
        + 2.0 * consts.lambda * consts.non_iid_degree;
    let omega1 = 32.0 * consts.p as f64 * b * t * t * consts.xi1 * consts.xi1 / (n * d * d)
        * consts.sum_inv_eps_sq();
    Ok((4.0 / mu_sq * omega0 + gamma * consts.y0) / (t + gamma) + omega1 / (mu_sq * (t + gamma)))
}

/// Gaussian-mechanism bound in its E-form:
/// U(T, b) = E₁/(b(T+γ)) + E₂/(T+γ) + E₃.
pub fn bound_gaussian(t: f64, b: f64, consts: &BoundConstants) -> Result<f64> {
    check_b(b, consts.n_clients)?;
    let gamma = consts.gamma();
    Ok(consts.e1_coeff() / (b * (t + gamma)) + consts.e2_coeff()? / (t + gamma)
        + consts.e3_coeff()?)
}

/// The Gaussian bound assembled from ω₀′/ω₁′; second algebraic route.
pub fn bound_gaussian_omega_form(t: f64, b: f64, consts: &BoundConstants) -> Result<f64> {
    check_b(b, consts.n_clients)?;
    let n = consts.n_clients as f64;
    let d = consts.d_total as f64;
    let gamma = consts.gamma();
    let mu_sq = consts.mu * consts.mu;
    let omega0 = 2.0 * (n - b) / (n - 1.0) * consts.g * consts.g / b
        + consts.batch_variance_term()
        + 2.0 * consts.lambda * consts.non_iid_degree;
    let omega1 = 4.0 * consts.c2 * consts.c2 * consts.p as f64 * t * consts.xi2 * consts.xi2
        / (d * d)
        * consts.sum_inv_eps_sq_log_inv_delta()?;
    Ok((4.0 / mu_sq * omega0 + gamma * consts.y0) / (t + gamma) + omega1 / (mu_sq * (t + gamma)))
}

/// Continuous minimizer T*(b) = √(γ² + (A₁ + γY₀)/A₂) − γ of the Laplace
/// bound at fixed b. Errors when the noise coefficient vanishes (T unbounded).
pub fn optimal_t_fixed_b_laplace(consts: &BoundConstants, b: f64) -> Result<f64> {
    check_b(b, consts.n_clients)?;
    let a2 = consts.c2_coeff() * b;
    if a2 <= 0.0 {
        return Err(FedDpError::UnboundedIterations);
    }
    let gamma = consts.gamma();
    let numerator = consts.c1_coeff() / b + consts.c3_coeff();
    let radicand = gamma * gamma + numerator / a2;
    if radicand <= 0.0 {
        // Stationary point leaves the feasible set; the boundary is optimal.
        return Ok(0.0);
    }
    Ok((radicand.sqrt() - gamma).max(0.0))
}

/// Continuous minimizer b*(T) = GNd/(2Tξ₁) · 1/√(p(N−1)) · 1/√(Σ1/εᵢ²) of
/// the Laplace bound at fixed T, clamped to [1, N].
pub fn optimal_b_fixed_t_laplace(consts: &BoundConstants, t: f64) -> f64 {
    let n = consts.n_clients;
    if n == 1 {
        return 1.0;
    }
    if t <= 0.0 {
        // U(0, b) is decreasing in b.
        return n as f64;
    }
    let unclamped = consts.g * n as f64 * consts.d_total as f64 / (2.0 * t * consts.xi1)
        / (consts.p as f64 * (n as f64 - 1.0)).sqrt()
        / consts.sum_inv_eps_sq().sqrt();
    unclamped.clamp(1.0, n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    KktSol1,
    KktSol2,
    KktSol3,
    Acs,
    ClosedFormT,
    ClosedFormB,
    GaussianSol1,
    GaussianSol2,
    Grid,
}

/// A candidate (T, b) with its bound value, after integerization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSolution {
    pub t: u64,
    /// Set when T is only bounded by the user-supplied cap (Gaussian "as
    /// large as possible" case); holds the T → ∞ limit value E₃.
    pub t_capped_limit: Option<f64>,
    pub b: usize,
    pub bound_value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMechanism {
    Laplace,
    Gaussian,
}

impl BoundMechanism {
    pub fn from_kind(kind: MechanismKind) -> Option<Self> {
        match kind {
            MechanismKind::Laplace => Some(Self::Laplace),
            MechanismKind::Gaussian => Some(Self::Gaussian),
            MechanismKind::None => None,
        }
    }

    pub fn bound(&self, t: f64, b: f64, consts: &BoundConstants) -> Result<f64> {
        match self {
            Self::Laplace => bound_laplace(t, b, consts),
            Self::Gaussian => bound_gaussian(t, b, consts),
        }
    }
}

/// Evaluates the bound at the integer neighbors of a continuous optimum and
/// keeps the smaller; valid because the bound is convex in each coordinate.
pub fn integerize(
    mechanism: BoundMechanism,
    t_cont: f64,
    b_cont: f64,
    consts: &BoundConstants,
    provenance: Provenance,
) -> Result<CandidateSolution> {
    let n = consts.n_clients;
    let t_lo = t_cont.floor().max(0.0) as u64;
    let t_hi = t_cont.ceil().max(0.0) as u64;
    let b_lo = (b_cont.floor() as usize).clamp(1, n);
    let b_hi = (b_cont.ceil() as usize).clamp(1, n);
    let mut best: Option<CandidateSolution> = None;
    for t in [t_lo, t_hi] {
        for b in [b_lo, b_hi] {
            let value = mechanism.bound(t as f64, b as f64, consts)?;
            if best.as_ref().is_none_or(|c| value < c.bound_value) {
                best = Some(CandidateSolution {
                    t,
                    t_capped_limit: None,
                    b,
                    bound_value: value,
                    provenance,
                });
            }
        }
    }
    Ok(best.expect("at least one candidate evaluated"))
}

/// Enumerates the KKT candidates of the Laplace bound: the two interior-T
/// solutions at b = 1 and b = N, and the no-iteration solution T = 0.
/// Returns all candidates; the first element of the pair is the argmin.
pub fn kkt_solutions_laplace(
    consts: &BoundConstants,
) -> Result<(CandidateSolution, Vec<CandidateSolution>)> {
    consts.validate()?;
    let n = consts.n_clients;
    let mut candidates = Vec::new();
    for (b, provenance) in [(1usize, Provenance::KktSol1), (n, Provenance::KktSol2)] {
        let t_cont = optimal_t_fixed_b_laplace(consts, b as f64)?;
        candidates.push(integerize(
            BoundMechanism::Laplace,
            t_cont,
            b as f64,
            consts,
            provenance,
        )?);
    }
    // Solution 3: T = 0 with the best integer b.
    let mut sol3: Option<CandidateSolution> = None;
    for b in 1..=n {
        let value = bound_laplace(0.0, b as f64, consts)?;
        if sol3.as_ref().is_none_or(|c| value < c.bound_value) {
            sol3 = Some(CandidateSolution {
                t: 0,
                t_capped_limit: None,
                b,
                bound_value: value,
                provenance: Provenance::KktSol3,
            });
        }
    }
    candidates.push(sol3.expect("n >= 1"));
    let best = candidates
        .iter()
        .min_by(|a, b| a.bound_value.total_cmp(&b.bound_value))
        .cloned()
        .expect("nonempty candidates");
    Ok((best, candidates))
}

/// Gaussian case: either run as long as the cap allows at b = N (the bound is
/// decreasing in T), or stop immediately when even one round hurts.
pub fn optimal_gaussian(consts: &BoundConstants, t_cap: u64) -> Result<CandidateSolution> {
    consts.validate()?;
    if t_cap == 0 {
        return Err(FedDpError::InvalidParameter("t_cap must be >= 1".into()));
    }
    let n = consts.n_clients;
    let run_long = CandidateSolution {
        t: t_cap,
        t_capped_limit: Some(consts.e3_coeff()?),
        b: n,
        bound_value: bound_gaussian(t_cap as f64, n as f64, consts)?,
        provenance: Provenance::GaussianSol1,
    };
    let mut stop_now: Option<CandidateSolution> = None;
    for b in 1..=n {
        let value = bound_gaussian(0.0, b as f64, consts)?;
        if stop_now.as_ref().is_none_or(|c| value < c.bound_value) {
            stop_now = Some(CandidateSolution {
                t: 0,
                t_capped_limit: None,
                b,
                bound_value: value,
                provenance: Provenance::GaussianSol2,
            });
        }
    }
    let stop_now = stop_now.expect("n >= 1");
    Ok(if run_long.bound_value <= stop_now.bound_value {
        run_long
    } else {
        stop_now
    })
}

/// Alternate Convex Search: alternates the continuous partial minimizers in T
/// and b (each clamped to the box) until the bound stops improving.
pub fn acs_minimize(
    mechanism: BoundMechanism,
    consts: &BoundConstants,
    t_cap: u64,
    tol: f64,
    max_iters: usize,
) -> Result<CandidateSolution> {
    consts.validate()?;
    if tol <= 0.0 {
        return Err(FedDpError::InvalidParameter("tol must be positive".into()));
    }
    let n = consts.n_clients as f64;
    let mut t = t_cap as f64 / 2.0;
    let mut b = n / 2.0;
    if b < 1.0 {
        b = 1.0;
    }
    let mut value = mechanism.bound(t, b, consts)?;
    for _ in 0..max_iters {
        t = match mechanism {
            BoundMechanism::Laplace => match optimal_t_fixed_b_laplace(consts, b) {
                Ok(t_star) => t_star.min(t_cap as f64),
                Err(FedDpError::UnboundedIterations) => t_cap as f64,
                Err(e) => return Err(e),
            },
            BoundMechanism::Gaussian => {
                // U is monotone in T at fixed b; the minimizer is an endpoint.
                let at_zero = bound_gaussian(0.0, b, consts)?;
                let at_cap = bound_gaussian(t_cap as f64, b, consts)?;
                if at_zero < at_cap {
                    0.0
                } else {
                    t_cap as f64
                }
            }
        };
        b = match mechanism {
            BoundMechanism::Laplace => optimal_b_fixed_t_laplace(consts, t),
            BoundMechanism::Gaussian => n,
        };
        let next = mechanism.bound(t, b, consts)?;
        let improved = value - next;
        value = next;
        if improved < tol {
            break;
        }
    }
    let mut candidate = integerize(mechanism, t, b, consts, Provenance::Acs)?;
    if mechanism == BoundMechanism::Gaussian && candidate.t == t_cap {
        candidate.t_capped_limit = Some(consts.e3_coeff()?);
    }
    Ok(candidate)
}

/// How μ and λ are obtained when estimating constants from data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureSource {
    /// User-supplied constants.
    Explicit { mu: f64, lambda: f64 },
    /// μ = ρ and λ = ¼·max‖x‖² + ρ for ridge coefficient ρ.
    Ridge { rho: f64 },
}

/// Inputs of [`estimate_constants`] beyond the partition itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub curvature: CurvatureSource,
    /// Iterations of full-batch descent for each local optimum.
    pub local_steps: usize,
    pub local_learning_rate: f64,
    /// Local fits whose final gradient norm exceeds this are flagged.
    pub convergence_tol: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub q: f64,
    pub c2: f64,
    pub budgets: Vec<PrivacyBudget>,
    /// Clip norm used when probing G; matches the mechanism in use.
    pub clip: Option<(f64, NormOrder)>,
}

/// Estimates Y₀, Γ, G and Λᵢ from per-client local optima, packing them with
/// the configured budget and curvature constants.
pub fn estimate_constants(
    partition: &ClientPartition,
    probe: &ProbeConfig,
) -> Result<BoundConstants> {
    if probe.budgets.len() != partition.n_clients() {
        return Err(FedDpError::InvalidParameter(format!(
            "{} budgets for {} clients",
            probe.budgets.len(),
            partition.n_clients()
        )));
    }
    let pooled = partition.pooled()?;
    let p = pooled.param_dim();
    let d = partition.total_size() as f64;
    let theta0 = ModelParams::zeros(p);

    let (mu, lambda) = match probe.curvature {
        CurvatureSource::Explicit { mu, lambda } => (mu, lambda),
        CurvatureSource::Ridge { rho } => {
            let max_feat_sq = pooled
                .features()
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>())
                .fold(0.0f64, f64::max);
            (rho, 0.25 * max_feat_sq + rho)
        }
    };

    let ridge = match probe.curvature {
        CurvatureSource::Ridge { rho } => rho,
        CurvatureSource::Explicit { .. } => 0.0,
    };

    let mut local_optima = Vec::with_capacity(partition.n_clients());
    let mut local_min_losses = Vec::with_capacity(partition.n_clients());
    for (client, dataset) in partition.clients().iter().enumerate() {
        let theta_i =
            train_centralized(dataset, probe.local_steps, probe.local_learning_rate, ridge)?;
        // Convergence is judged on the same (possibly ridge-augmented)
        // objective the local fit minimized.
        let mut grad = gradient(&theta_i.0.view(), dataset)?;
        if ridge > 0.0 {
            grad = grad + &(&theta_i.0 * ridge);
        }
        let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm > probe.convergence_tol {
            return Err(FedDpError::LocalFitNotConverged { client, grad_norm });
        }
        local_min_losses.push(loss(&theta_i.0.view(), dataset)?);
        local_optima.push(theta_i);
    }

    // Y0 ≈ Σ (dᵢ/d) ‖θ0 − θᵢ*‖².
    let mut y0 = 0.0;
    for (dataset, theta_i) in partition.clients().iter().zip(&local_optima) {
        let dist_sq = (&theta0.0 - &theta_i.0).iter().map(|v| v * v).sum::<f64>();
        y0 += dataset.n_samples() as f64 / d * dist_sq;
    }

    // Γ ≈ max_i Fᵢ* − Σ (dᵢ/d) Fᵢ*.
    let max_local = local_min_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weighted: f64 = partition
        .clients()
        .iter()
        .zip(&local_min_losses)
        .map(|(ds, &f)| ds.n_samples() as f64 / d * f)
        .sum();
    let non_iid_degree = (max_local - weighted).max(0.0);

    // G and Λᵢ from per-sample gradients at the probe points θ0 and θᵢ*.
    let mut probe_points: Vec<&ModelParams> = vec![&theta0];
    probe_points.extend(local_optima.iter());
    let mut g_max: f64 = 0.0;
    let mut lambda_i = vec![0.0f64; partition.n_clients()];
    for theta in &probe_points {
        for (client, dataset) in partition.clients().iter().enumerate() {
            let client_grad = gradient(&theta.0.view(), dataset)?;
            let mut mean_dev_sq = 0.0;
            for s in 0..dataset.n_samples() {
                let sample = dataset.subset(&[s]);
                let sample_grad = gradient(&theta.0.view(), &sample)?;
                let clipped = match probe.clip {
                    Some((bound, order)) => clip_gradient(&sample_grad.view(), bound, order)?,
                    None => sample_grad.clone(),
                };
                let norm = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
                g_max = g_max.max(norm);
                mean_dev_sq += (&client_grad - &sample_grad)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>();
            }
            mean_dev_sq /= dataset.n_samples() as f64;
            lambda_i[client] = lambda_i[client].max(mean_dev_sq.sqrt());
        }
    }

    let consts = BoundConstants {
        mu,
        lambda,
        g: g_max,
        non_iid_degree,
        y0,
        p,
        d_total: partition.total_size(),
        n_clients: partition.n_clients(),
        budgets: probe.budgets.clone(),
        xi1: probe.xi1,
        xi2: probe.xi2,
        lambda_i,
        q: probe.q,
        c2: probe.c2,
    };
    consts.validate()?;
    Ok(consts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, partition_noniid};
    use crate::seeding::rng_from;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn uniform_budgets(n: usize, epsilon: f64, delta: f64) -> Vec<PrivacyBudget> {
        vec![PrivacyBudget::new(epsilon, delta).unwrap(); n]
    }

    fn random_consts(rng: &mut impl Rng) -> BoundConstants {
        let n_clients = rng.gen_range(2..=8);
        let mu = rng.gen_range(0.3..2.0);
        let budgets: Vec<PrivacyBudget> = (0..n_clients)
            .map(|_| {
                PrivacyBudget::new(rng.gen_range(0.5..5.0), rng.gen_range(1e-6..1e-3)).unwrap()
            })
            .collect();
        BoundConstants {
            mu,
            lambda: mu * rng.gen_range(1.0..4.0),
            g: rng.gen_range(0.5..3.0),
            non_iid_degree: rng.gen_range(0.0..3.0),
            y0: rng.gen_range(0.0..5.0),
            p: rng.gen_range(1..=20),
            d_total: rng.gen_range(50..500),
            n_clients,
            budgets,
            xi1: rng.gen_range(0.5..5.0),
            xi2: rng.gen_range(0.5..5.0),
            lambda_i: (0..n_clients).map(|_| rng.gen_range(0.0..2.0)).collect(),
            q: rng.gen_range(0.1..0.9),
            c2: rng.gen_range(0.5..2.0),
        }
    }

    /// Constants engineered so gamma = 2, C1 = 4, C2 = 1, C3 = 17, giving the
    /// closed-form T*(b=1) = sqrt(4 + 21) - 2 = 3.
    fn engineered_consts() -> BoundConstants {
        BoundConstants {
            mu: 2.0,
            lambda: 2.0,
            g: 1.0,
            non_iid_degree: 4.0,
            y0: 1.5,
            p: 1,
            d_total: 2,
            n_clients: 2,
            budgets: uniform_budgets(2, 2f64.sqrt(), 0.0),
            xi1: 1.0,
            xi2: 1.0,
            lambda_i: vec![0.0; 2],
            q: 1.0,
            c2: 1.0,
        }
    }

    #[test]
    fn engineered_coefficients_are_as_planned() {
        let c = engineered_consts();
        assert_abs_diff_eq!(c.gamma(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c1_coeff(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c2_coeff(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c3_coeff(), 17.0, epsilon = 1e-12);
    }

    #[test]
    fn laplace_c_form_equals_omega_form() {
        let mut rng = rng_from(41, &[1]);
        for _ in 0..100 {
            let consts = random_consts(&mut rng);
            let t = rng.gen_range(0.0..500.0);
            let b = rng.gen_range(1.0..consts.n_clients as f64);
            let c_form = bound_laplace(t, b, &consts).unwrap();
            let omega = bound_laplace_omega_form(t, b, &consts).unwrap();
            assert_relative_eq!(c_form, omega, max_relative = 1e-12);
        }
    }

    #[test]
    fn gaussian_e_form_equals_omega_form() {
        let mut rng = rng_from(41, &[2]);
        for _ in 0..100 {
            let consts = random_consts(&mut rng);
            let t = rng.gen_range(0.0..500.0);
            let b = rng.gen_range(1.0..consts.n_clients as f64);
            let e_form = bound_gaussian(t, b, &consts).unwrap();
            let omega = bound_gaussian_omega_form(t, b, &consts).unwrap();
            assert_relative_eq!(e_form, omega, max_relative = 1e-12);
        }
    }

    #[test]
    fn laplace_noise_term_vanishes_at_t_zero() {
        let mut rng = rng_from(41, &[3]);
        let mut a = random_consts(&mut rng);
        let b_val = 1.0 + (a.n_clients - 1) as f64 / 2.0;
        let at_zero = bound_laplace(0.0, b_val, &a).unwrap();
        a.xi1 *= 100.0;
        assert_abs_diff_eq!(at_zero, bound_laplace(0.0, b_val, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn gaussian_bound_approaches_e3() {
        let mut rng = rng_from(41, &[4]);
        for _ in 0..10 {
            let consts = random_consts(&mut rng);
            let e3 = consts.e3_coeff().unwrap();
            for b in [1.0, consts.n_clients as f64] {
                let far = bound_gaussian(1e14, b, &consts).unwrap();
                assert_relative_eq!(far, e3, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_bound_decreases_with_q() {
        let mut rng = rng_from(41, &[5]);
        let mut consts = random_consts(&mut rng);
        consts.q = 0.2;
        let low_q = bound_gaussian(50.0, 2.0, &consts).unwrap();
        consts.q = 0.8;
        let high_q = bound_gaussian(50.0, 2.0, &consts).unwrap();
        assert!(high_q < low_q);
    }

    #[test]
    fn closed_form_t_matches_the_engineered_arithmetic() {
        let consts = engineered_consts();
        let t_star = optimal_t_fixed_b_laplace(&consts, 1.0).unwrap();
        assert_abs_diff_eq!(t_star, 3.0, epsilon = 1e-12);
        // Grid over T at b = 1 lands within one step of 3.
        let (mut best_t, mut best) = (0u64, f64::INFINITY);
        for t in 0..=100u64 {
            let v = bound_laplace(t as f64, 1.0, &consts).unwrap();
            if v < best {
                best = v;
                best_t = t;
            }
        }
        assert!((2..=4).contains(&best_t), "grid argmin {best_t}");
    }

    #[test]
    fn zero_initial_error_and_iid_mean_no_iterations_at_full_participation() {
        let mut consts = engineered_consts();
        consts.y0 = 0.0;
        consts.non_iid_degree = 0.0;
        let t_star = optimal_t_fixed_b_laplace(&consts, consts.n_clients as f64).unwrap();
        assert_abs_diff_eq!(t_star, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn closed_form_b_matches_the_printed_example() {
        let consts = BoundConstants {
            mu: 1.0,
            lambda: 1.0,
            g: 2.0,
            non_iid_degree: 0.5,
            y0: 1.0,
            p: 1,
            d_total: 10,
            n_clients: 5,
            budgets: uniform_budgets(5, 5f64.sqrt(), 0.0),
            xi1: 1.0,
            xi2: 1.0,
            lambda_i: vec![0.0; 5],
            q: 1.0,
            c2: 1.0,
        };
        assert_abs_diff_eq!(consts.sum_inv_eps_sq(), 1.0, epsilon = 1e-12);
        // Unclamped 25 clamps to N = 5.
        assert_abs_diff_eq!(optimal_b_fixed_t_laplace(&consts, 1.0), 5.0, epsilon = 1e-12);
        // Doubling T halves the unclamped optimum.
        let b10 = optimal_b_fixed_t_laplace(&consts, 10.0);
        let b20 = optimal_b_fixed_t_laplace(&consts, 20.0);
        assert_abs_diff_eq!(b10, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b20, 1.25, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_b_edge_cases() {
        let mut consts = engineered_consts();
        assert_abs_diff_eq!(
            optimal_b_fixed_t_laplace(&consts, 0.0),
            consts.n_clients as f64,
            epsilon = 1e-12
        );
        consts.n_clients = 1;
        consts.budgets.truncate(1);
        consts.lambda_i.truncate(1);
        assert_abs_diff_eq!(optimal_b_fixed_t_laplace(&consts, 5.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn strongly_non_iid_problems_pick_a_single_client() {
        // With a large heterogeneity penalty every extra participant mostly adds
        // noise, so the per-round budget is best spent on one client.
        let mut consts = engineered_consts();
        consts.xi1 = 0.1;
        let (best, candidates) = kkt_solutions_laplace(&consts).unwrap();
        assert_eq!(candidates.len(), 3);
        assert_eq!(best.b, 1);
        assert_eq!(best.provenance, Provenance::KktSol1);
    }

    #[test]
    fn near_iid_problems_favor_full_participation() {
        // Kill the heterogeneity penalty and start close to the optimum; the
        // sampling-variance term then rewards averaging over every client.
        let mut consts = engineered_consts();
        consts.non_iid_degree = 0.0;
        consts.y0 = 0.1;
        let (_, candidates) = kkt_solutions_laplace(&consts).unwrap();
        let sol1 = &candidates[0];
        let sol2 = &candidates[1];
        assert_eq!(sol2.provenance, Provenance::KktSol2);
        assert!(sol2.bound_value < sol1.bound_value);
        assert_eq!(sol2.b, consts.n_clients);
    }

    #[test]
    fn gaussian_optimum_is_run_long_or_stop_now() {
        let mut rng = rng_from(41, &[6]);
        let mut consts = random_consts(&mut rng);
        consts.y0 = 50.0; // plenty to gain from iterating
        let sol = optimal_gaussian(&consts, 500).unwrap();
        assert_eq!(sol.provenance, Provenance::GaussianSol1);
        assert_eq!(sol.t, 500);
        assert_eq!(sol.b, consts.n_clients);
        assert!(sol.t_capped_limit.is_some());

        consts.y0 = 0.0;
        consts.budgets = uniform_budgets(consts.n_clients, 1e-3, 1e-4);
        let sol = optimal_gaussian(&consts, 500).unwrap();
        assert_eq!(sol.provenance, Provenance::GaussianSol2);
        assert_eq!(sol.t, 0);
    }

    #[test]
    fn acs_agrees_with_kkt_on_noise_dominated_problems() {
        let mut consts = engineered_consts();
        consts.xi1 = 50.0;
        let (best, _) = kkt_solutions_laplace(&consts).unwrap();
        let acs = acs_minimize(BoundMechanism::Laplace, &consts, 1000, 1e-12, 200).unwrap();
        assert_eq!((acs.t, acs.b), (best.t, best.b));
        assert_relative_eq!(acs.bound_value, best.bound_value, max_relative = 1e-12);
    }

    #[test]
    fn acs_never_ends_above_its_starting_value() {
        let mut rng = rng_from(41, &[7]);
        for _ in 0..20 {
            let consts = random_consts(&mut rng);
            let t_cap = 1000u64;
            let start_b = (consts.n_clients as f64 / 2.0).max(1.0);
            let start = BoundMechanism::Laplace
                .bound(t_cap as f64 / 2.0, start_b, &consts)
                .unwrap();
            let acs =
                acs_minimize(BoundMechanism::Laplace, &consts, t_cap, 1e-12, 200).unwrap();
            assert!(acs.bound_value <= start + 1e-12);
        }
    }

    #[test]
    fn integerize_keeps_integral_points_and_picks_the_better_neighbor() {
        let consts = engineered_consts();
        let exact =
            integerize(BoundMechanism::Laplace, 3.0, 1.0, &consts, Provenance::ClosedFormT)
                .unwrap();
        assert_eq!((exact.t, exact.b), (3, 1));
        let between =
            integerize(BoundMechanism::Laplace, 2.6, 1.4, &consts, Provenance::ClosedFormT)
                .unwrap();
        assert!(between.t == 2 || between.t == 3);
        assert!(between.b == 1 || between.b == 2);
        let best = [(2u64, 1usize), (2, 2), (3, 1), (3, 2)]
            .iter()
            .map(|&(t, b)| bound_laplace(t as f64, b as f64, &consts).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(between.bound_value, best, epsilon = 1e-12);
    }

    #[test]
    fn identical_clients_have_no_non_iid_degree() {
        let data = make_synthetic_dataset(80, 3, 2, 2.0, 31).unwrap();
        let partition =
            crate::data::ClientPartition::new(vec![data.clone(), data.clone(), data.clone()])
                .unwrap();
        let probe = ProbeConfig {
            curvature: CurvatureSource::Explicit { mu: 0.5, lambda: 2.0 },
            local_steps: 1500,
            local_learning_rate: 0.3,
            convergence_tol: 0.05,
            xi1: 10.0,
            xi2: 10.0,
            q: 1.0,
            c2: 1.0,
            budgets: uniform_budgets(3, 1.0, 0.0),
            clip: None,
        };
        let consts = estimate_constants(&partition, &probe).unwrap();
        assert!(consts.non_iid_degree.abs() < 1e-9);
        assert!(consts.y0 > 0.0);
        assert_eq!(consts.n_clients, 3);
    }

    #[test]
    fn estimated_g_dominates_per_sample_gradients_at_probe_points() {
        let data = make_synthetic_dataset(60, 3, 2, 1.5, 37).unwrap();
        let partition = partition_noniid(&data, 2, 1, 37).unwrap();
        let probe = ProbeConfig {
            curvature: CurvatureSource::Ridge { rho: 0.1 },
            local_steps: 2000,
            local_learning_rate: 0.2,
            convergence_tol: 0.05,
            xi1: 10.0,
            xi2: 10.0,
            q: 1.0,
            c2: 1.0,
            budgets: uniform_budgets(2, 1.0, 0.0),
            clip: None,
        };
        let consts = estimate_constants(&partition, &probe).unwrap();
        let theta0 = ModelParams::zeros(partition.pooled().unwrap().param_dim());
        for client in partition.clients() {
            for s in 0..client.n_samples() {
                let g = gradient(&theta0.0.view(), &client.subset(&[s])).unwrap();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= consts.g + 1e-12);
            }
        }
        assert!(consts.mu > 0.0 && consts.lambda > consts.mu);
    }

    #[test]
    fn unconverged_local_fits_are_flagged() {
        let data = make_synthetic_dataset(60, 3, 2, 1.5, 37).unwrap();
        let partition = partition_noniid(&data, 2, 1, 37).unwrap();
        let probe = ProbeConfig {
            curvature: CurvatureSource::Explicit { mu: 0.5, lambda: 2.0 },
            local_steps: 1,
            local_learning_rate: 0.01,
            convergence_tol: 1e-9,
            xi1: 10.0,
            xi2: 10.0,
            q: 1.0,
            c2: 1.0,
            budgets: uniform_budgets(2, 1.0, 0.0),
            clip: None,
        };
        match estimate_constants(&partition, &probe) {
            Err(FedDpError::LocalFitNotConverged { .. }) => {}
            other => panic!("expected LocalFitNotConverged, got {other:?}"),
        }
    }

    #[test]
    fn invalid_constants_are_rejected() {
        let mut consts = engineered_consts();
        consts.mu = 0.0;
        assert!(consts.validate().is_err());
        let mut consts = engineered_consts();
        consts.budgets.pop();
        assert!(consts.validate().is_err());
        let consts = engineered_consts();
        assert!(bound_laplace(10.0, 0.5, &consts).is_err());
        assert!(bound_laplace(10.0, 3.0, &consts).is_err());
    }
}
