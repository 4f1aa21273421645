//! Monte-Carlo and brute-force oracles for the analytic noise-variance,
//! unbiasedness and gradient-variance statements, plus the exhaustive grid
//! minimizer used to cross-check the closed-form planners.

use itertools::Itertools;
use ndarray::Array1;
use rayon::prelude::*;

use crate::bounds::{BoundConstants, BoundMechanism};
use crate::data::ClientPartition;
use crate::dp::{sample_noise, DpMechanismSpec, PrivacyBudget};
use crate::error::{FedDpError, Result};
use crate::model::{gradient, ModelParams};
use crate::seeding::rng_from;

/// A Monte-Carlo mean with its normal-approximation standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

fn summarize(values: &[f64]) -> McEstimate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    McEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        trials: n,
    }
}

fn check_trials(trials: usize, minimum: usize) -> Result<()> {
    if trials < minimum {
        return Err(FedDpError::InvalidParameter(format!(
            "need at least {minimum} trials, got {trials}"
        )));
    }
    Ok(())
}

/// Simulates E‖wᵗᵇ‖² by drawing b-client subsets and their noise, forming
/// wᵗᵇ = (N/b) Σ (dᵢ/d) η wᵢ per round.
#[allow(clippy::too_many_arguments)]
pub fn mc_noise_variance(
    spec: &DpMechanismSpec,
    budgets: &[PrivacyBudget],
    b: usize,
    t_total: usize,
    client_sizes: &[usize],
    eta_t: f64,
    p: usize,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_trials(trials, 1_000)?;
    spec.validate()?;
    let n_clients = budgets.len();
    if client_sizes.len() != n_clients {
        return Err(FedDpError::InvalidParameter(
            "client_sizes and budgets length mismatch".into(),
        ));
    }
    let d_total: usize = client_sizes.iter().sum();
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<f64> {
            let mut rng = rng_from(seed, &[0x401e5, trial as u64]);
            let subset = rand::seq::index::sample(&mut rng, n_clients, b);
            let mut agg = Array1::<f64>::zeros(p);
            for i in subset {
                let noise = sample_noise(
                    spec,
                    &budgets[i],
                    b,
                    t_total,
                    n_clients,
                    client_sizes[i],
                    p,
                    &mut rng,
                )?;
                let weight =
                    n_clients as f64 / b as f64 * client_sizes[i] as f64 / d_total as f64 * eta_t;
                agg = agg + &(noise * weight);
            }
            Ok(agg.iter().map(|v| v * v).sum())
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&values))
}

fn weighted_full_average(values_per_client: &[f64], weights: &[f64]) -> f64 {
    values_per_client
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .sum()
}

/// Deviation of the empirical mean of the (N/b)-scaled weighted b-subset
/// average from the all-client weighted average.
pub fn mc_sampling_bias(
    values_per_client: &[f64],
    weights: &[f64],
    b: usize,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_trials(trials, 1_000)?;
    let n = values_per_client.len();
    if weights.len() != n || b == 0 || b > n {
        return Err(FedDpError::InvalidParameter(
            "inconsistent values/weights/b".into(),
        ));
    }
    let full = weighted_full_average(values_per_client, weights);
    let draws: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng_from(seed, &[0xb1a5, trial as u64]);
            let subset = rand::seq::index::sample(&mut rng, n, b);
            n as f64 / b as f64
                * subset
                    .iter()
                    .map(|i| values_per_client[i] * weights[i])
                    .sum::<f64>()
        })
        .collect();
    let sampled = summarize(&draws);
    Ok(McEstimate {
        mean: (sampled.mean - full).abs(),
        stderr: sampled.stderr,
        trials,
    })
}

/// Exact expectation of the sampled average over all C(N, b) subsets; the
/// deviation from the full average is analytically zero.
pub fn enumerate_sampling_bias(values_per_client: &[f64], weights: &[f64], b: usize) -> f64 {
    let n = values_per_client.len();
    let full = weighted_full_average(values_per_client, weights);
    let subsets: Vec<Vec<usize>> = (0..n).combinations(b).collect();
    let mean = subsets
        .iter()
        .map(|subset| {
            n as f64 / b as f64
                * subset
                    .iter()
                    .map(|&i| values_per_client[i] * weights[i])
                    .sum::<f64>()
        })
        .sum::<f64>()
        / subsets.len() as f64;
    (mean - full).abs()
}

/// Empirical E‖g^{b,q} − g‖² at fixed params: b clients drawn uniformly
/// without replacement, each contributing a ⌈q·dᵢ⌉-sample batch gradient.
pub fn mc_gradient_variance(
    partition: &ClientPartition,
    params: &ModelParams,
    b: usize,
    q: f64,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_trials(trials, 1_000)?;
    let n = partition.n_clients();
    if b == 0 || b > n {
        return Err(FedDpError::InvalidParameter(format!(
            "b = {b} outside [1, {n}]"
        )));
    }
    let d_total = partition.total_size() as f64;
    // Full-data per-client gradients are trial-independent.
    let full_grads: Vec<Array1<f64>> = partition
        .clients()
        .iter()
        .map(|ds| gradient(&params.0.view(), ds))
        .collect::<Result<_>>()?;
    let mut full = Array1::<f64>::zeros(params.dim());
    for (ds, g) in partition.clients().iter().zip(&full_grads) {
        full = full + &(g * (ds.n_samples() as f64 / d_total));
    }

    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<f64> {
            let mut rng = rng_from(seed, &[0x96ad, trial as u64]);
            let subset = rand::seq::index::sample(&mut rng, n, b);
            let mut sampled = Array1::<f64>::zeros(params.dim());
            for i in subset {
                let dataset = partition.client(i);
                let d_i = dataset.n_samples();
                let batch_size = ((q * d_i as f64).ceil() as usize).clamp(1, d_i);
                let g = if batch_size == d_i {
                    full_grads[i].clone()
                } else {
                    let indices = rand::seq::index::sample(&mut rng, d_i, batch_size).into_vec();
                    gradient(&params.0.view(), &dataset.subset(&indices))?
                };
                let weight = n as f64 / b as f64 * d_i as f64 / d_total;
                sampled = sampled + &(g * weight);
            }
            Ok((&sampled - &full).iter().map(|v| v * v).sum())
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&values))
}

/// Max observed per-client full gradient norm, the empirical stand-in for G.
pub fn empirical_gradient_bound(
    partition: &ClientPartition,
    params: &ModelParams,
) -> Result<f64> {
    let mut g_max: f64 = 0.0;
    for dataset in partition.clients() {
        let g = gradient(&params.0.view(), dataset)?;
        g_max = g_max.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(g_max)
}

/// Per-client empirical Λᵢ: sqrt of the mean squared deviation of per-sample
/// gradients from the client mean gradient.
pub fn empirical_lambda_i(partition: &ClientPartition, params: &ModelParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(partition.n_clients());
    for dataset in partition.clients() {
        let client_grad = gradient(&params.0.view(), dataset)?;
        let mut mean_dev_sq = 0.0;
        for s in 0..dataset.n_samples() {
            let sample_grad = gradient(&params.0.view(), &dataset.subset(&[s]))?;
            mean_dev_sq += (&client_grad - &sample_grad).iter().map(|v| v * v).sum::<f64>();
        }
        out.push((mean_dev_sq / dataset.n_samples() as f64).sqrt());
    }
    Ok(out)
}

/// Exhaustive minimum of the chosen bound over T ∈ {0, step, …, T_max} and
/// b ∈ {1..N}.
pub fn grid_minimize_bound(
    mechanism: BoundMechanism,
    consts: &BoundConstants,
    t_max: u64,
    step: u64,
) -> Result<(u64, usize, f64)> {
    if t_max < 1 || step < 1 {
        return Err(FedDpError::InvalidParameter(
            "t_max and step must be >= 1".into(),
        ));
    }
    let mut best: Option<(u64, usize, f64)> = None;
    let mut t = 0u64;
    while t <= t_max {
        for b in 1..=consts.n_clients {
            let value = mechanism.bound(t as f64, b as f64, consts)?;
            if best.is_none_or(|(_, _, v)| value < v) {
                best = Some((t, b, value));
            }
        }
        t += step;
    }
    Ok(best.expect("nonempty grid"))
}

/// One named oracle/analytic agreement check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The battery behind the `validate` CLI verb: Monte-Carlo oracles against
/// the analytic noise variances, unbiased sampling, and the two
/// gradient-variance bounds on a small synthetic federation.
pub fn run_validation_battery(seed: u64) -> Result<Vec<CheckOutcome>> {
    use crate::data::{make_synthetic_dataset, partition_noniid};
    use crate::dp::aggregated_noise_variance;

    let mut outcomes = Vec::new();
    let mut record = |name: &str, passed: bool, detail: String| {
        outcomes.push(CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        });
    };

    // Laplace aggregated noise variance vs the closed form.
    {
        let spec = DpMechanismSpec::laplace(1.0);
        let budgets = vec![PrivacyBudget::new(1.0, 0.0)?; 4];
        let sizes = vec![25usize; 4];
        let (b, t, eta, p) = (2usize, 10usize, 0.05, 8usize);
        let analytic = aggregated_noise_variance(&spec, &budgets, b, t, eta, p, 100)?;
        let mc = mc_noise_variance(&spec, &budgets, b, t, &sizes, eta, p, 50_000, seed)?;
        let passed = (mc.mean - analytic).abs() <= 3.0 * mc.stderr;
        record(
            "laplace-noise-variance",
            passed,
            format!("analytic {analytic:.6e}, mc {:.6e} ± {:.2e}", mc.mean, mc.stderr),
        );
    }

    // Gaussian aggregated noise variance vs the closed form.
    {
        let spec = DpMechanismSpec::gaussian(1.0, 0.1, 10.0, 1.0);
        let budgets = vec![PrivacyBudget::new(0.5, 1e-5)?; 5];
        let sizes = vec![20usize; 5];
        let (b, t, eta, p) = (3usize, 20usize, 0.05, 8usize);
        let analytic = aggregated_noise_variance(&spec, &budgets, b, t, eta, p, 100)?;
        let mc = mc_noise_variance(&spec, &budgets, b, t, &sizes, eta, p, 50_000, seed + 1)?;
        let passed = (mc.mean - analytic).abs() <= 3.0 * mc.stderr;
        record(
            "gaussian-noise-variance",
            passed,
            format!("analytic {analytic:.6e}, mc {:.6e} ± {:.2e}", mc.mean, mc.stderr),
        );
    }

    // Unbiased b-subset sampling (Monte Carlo and exact enumeration).
    {
        let values = [1.0, -2.5, 4.0, 0.5, 3.0];
        let weights = [0.2; 5];
        let mc = mc_sampling_bias(&values, &weights, 2, 50_000, seed + 2)?;
        let passed = mc.mean <= 4.0 * mc.stderr;
        record(
            "sampling-unbiased-mc",
            passed,
            format!("deviation {:.3e} vs 4·stderr {:.3e}", mc.mean, 4.0 * mc.stderr),
        );
        let exact = enumerate_sampling_bias(&values[..3], &[1.0 / 3.0; 3], 2);
        record(
            "sampling-unbiased-exact",
            exact < 1e-12,
            format!("enumerated deviation {exact:.3e}"),
        );
    }

    // Full-batch and sampled-batch gradient-variance bounds.
    {
        let data = make_synthetic_dataset(240, 4, 4, 2.0, seed + 3)?;
        let partition = partition_noniid(&data, 4, 2, seed + 3)?;
        let params = ModelParams::zeros(data.param_dim());
        let g = empirical_gradient_bound(&partition, &params)?;
        let n = partition.n_clients() as f64;
        for b in [1usize, 2, 4] {
            let full_batch_bound = if partition.n_clients() == b {
                0.0
            } else {
                2.0 * (n - b as f64) / (n - 1.0) * g * g / b as f64
            };
            let mc = mc_gradient_variance(&partition, &params, b, 1.0, 20_000, seed + 4)?;
            // Absolute floor covers b = N, where the estimator is exact up to
            // floating-point rounding and the stderr collapses to zero.
            let passed = mc.mean <= full_batch_bound + 3.0 * mc.stderr + 1e-12;
            record(
                &format!("gradient-variance-full-batch-b{b}"),
                passed,
                format!("mc {:.4e} vs bound {full_batch_bound:.4e}", mc.mean),
            );
        }
        let lambda_i = empirical_lambda_i(&partition, &params)?;
        let d = partition.total_size() as f64;
        let q = 0.5;
        let batch_term: f64 = partition
            .clients()
            .iter()
            .zip(&lambda_i)
            .map(|(ds, l)| ds.n_samples() as f64 * l * l / (q * d * d))
            .sum();
        let b = 2usize;
        let full_batch_bound = 2.0 * (n - b as f64) / (n - 1.0) * g * g / b as f64;
        let mc = mc_gradient_variance(&partition, &params, b, q, 20_000, seed + 5)?;
        let passed = mc.mean <= full_batch_bound + batch_term + 3.0 * mc.stderr;
        record(
            "gradient-variance-sampled-batch",
            passed,
            format!("mc {:.4e} vs bound {:.4e}", mc.mean, full_batch_bound + batch_term),
        );
    }

    Ok(outcomes)
}
