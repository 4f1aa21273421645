//! The federated SGD loop with client-side DP noise: client selection, local
//! noisy steps, weighted aggregation and trace recording.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, Dataset};
use crate::dp::{sample_noise, DpMechanismSpec, MechanismKind, PrivacyBudget};
use crate::error::{FedDpError, Result};
use crate::model::{clip_gradient, gradient, loss, accuracy, ModelParams, NormOrder};
use crate::seeding::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientSelection {
    /// Deterministic cycle: round t covers indices t·b mod N onward.
    RoundRobin,
    /// Uniform b-subsets without replacement, for validating the
    /// random-subset form of the analysis.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zeros,
    Gaussian,
}

/// Everything that fixes one federation run apart from the data and mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationSchedule {
    pub n_clients: usize,
    /// Participants per round, 1 ≤ b ≤ N.
    pub b: usize,
    /// Total global iterations.
    pub t_total: usize,
    /// Strong-convexity constant μ.
    pub mu: f64,
    /// Smoothness constant λ.
    pub lambda: f64,
    pub selection: ClientSelection,
    pub init: InitKind,
    pub base_seed: u64,
}

impl FederationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.b > self.n_clients {
            return Err(FedDpError::InvalidParameter(format!(
                "b = {} must lie in [1, N = {}]",
                self.b, self.n_clients
            )));
        }
        if self.mu <= 0.0 || self.lambda <= 0.0 {
            return Err(FedDpError::InvalidParameter(
                "mu and lambda must be positive".into(),
            ));
        }
        Ok(())
    }

    /// γ = 2λ/μ.
    pub fn gamma(&self) -> f64 {
        2.0 * self.lambda / self.mu
    }
}

/// Decaying step size η_t = (2/μ) / (t + 2λ/μ); η₀ = 1/λ.
pub fn learning_rate(t: usize, mu: f64, lambda: f64) -> f64 {
    (2.0 / mu) / (t as f64 + 2.0 * lambda / mu)
}

/// Clients ((t·b) mod N, …, (t·b + b − 1) mod N); over any N consecutive
/// rounds each client is selected exactly b times.
pub fn select_clients_round_robin(round_t: usize, n_clients: usize, b: usize) -> Vec<usize> {
    (0..b).map(|j| (round_t * b + j) % n_clients).collect()
}

fn select_clients(schedule: &FederationSchedule, t: usize) -> Vec<usize> {
    match schedule.selection {
        ClientSelection::RoundRobin => {
            select_clients_round_robin(t, schedule.n_clients, schedule.b)
        }
        ClientSelection::UniformRandom => {
            let mut rng = rng_from(schedule.base_seed, &[0x5e1ec7, t as u64]);
            let mut picks =
                rand::seq::index::sample(&mut rng, schedule.n_clients, schedule.b).into_vec();
            picks.sort_unstable();
            picks
        }
    }
}

/// One local noisy step: batch-mean gradient, clip, add mechanism noise,
/// return θ_t − η_t (g + w).
pub fn client_update(
    global_params: &ModelParams,
    client_dataset: &Dataset,
    spec: &DpMechanismSpec,
    budget: &PrivacyBudget,
    schedule: &FederationSchedule,
    t: usize,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    let d_i = client_dataset.n_samples();
    let batch_size = ((spec.q * d_i as f64).ceil() as usize).min(d_i);
    if batch_size == 0 {
        return Err(FedDpError::EmptyBatch);
    }
    let batch = if batch_size == d_i {
        client_dataset.clone()
    } else {
        let indices = rand::seq::index::sample(rng, d_i, batch_size).into_vec();
        client_dataset.subset(&indices)
    };

    let raw = gradient(&global_params.0.view(), &batch)?;
    let clipped = match spec.kind {
        MechanismKind::Laplace => clip_gradient(&raw.view(), spec.xi1, NormOrder::L1)?,
        MechanismKind::Gaussian => clip_gradient(&raw.view(), spec.xi2, NormOrder::L2)?,
        MechanismKind::None => raw,
    };
    let noise = sample_noise(
        spec,
        budget,
        schedule.b,
        schedule.t_total,
        schedule.n_clients,
        d_i,
        global_params.dim(),
        rng,
    )?;
    let eta = learning_rate(t, schedule.mu, schedule.lambda);
    Ok(ModelParams(&global_params.0 - &((clipped + noise) * eta)))
}

/// Weighted aggregation θ_{t+1} = (N/b) Σ_{i∈P_t} (dᵢ/d) θᵢ.
pub fn aggregate(
    replies: &[(usize, ModelParams)],
    client_sizes: &[usize],
    n_clients: usize,
    b: usize,
) -> Result<ModelParams> {
    if replies.len() != b {
        return Err(FedDpError::InvalidParameter(format!(
            "expected {b} replies, got {}",
            replies.len()
        )));
    }
    let mut seen = vec![false; n_clients];
    for &(id, _) in replies {
        if id >= n_clients || seen[id] {
            return Err(FedDpError::InvalidParameter(format!(
                "duplicate or out-of-range client id {id}"
            )));
        }
        seen[id] = true;
    }
    let d_total: usize = client_sizes.iter().sum();
    let p = replies[0].1.dim();
    // Deterministic reduction ordered by client id.
    let mut ordered: Vec<&(usize, ModelParams)> = replies.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    let mut acc = Array1::<f64>::zeros(p);
    for (id, params) in ordered {
        let weight = n_clients as f64 / b as f64 * client_sizes[*id] as f64 / d_total as f64;
        acc = acc + &(&params.0 * weight);
    }
    Ok(ModelParams(acc))
}

/// One per-round record of the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub selected: Vec<usize>,
    pub train_loss: f64,
    pub test_acc: Option<f64>,
    pub eta: f64,
    /// ‖θ_t − θ*‖₂² when a reference optimum was supplied.
    pub dist_sq_opt: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub rounds: Vec<RoundRecord>,
    pub final_params: ModelParams,
    pub final_train_loss: f64,
    pub final_test_acc: Option<f64>,
}

fn initial_params(schedule: &FederationSchedule, p: usize) -> ModelParams {
    match schedule.init {
        InitKind::Zeros => ModelParams::zeros(p),
        InitKind::Gaussian => {
            let mut rng = rng_from(schedule.base_seed, &[0x1417]);
            ModelParams(Array1::from_iter(
                (0..p).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.01),
            ))
        }
    }
}

/// Runs the full federated loop for `schedule.t_total` rounds and records the
/// trace. The trace is a pure function of its arguments.
pub fn run_federation(
    partition: &ClientPartition,
    spec: &DpMechanismSpec,
    budgets: &[PrivacyBudget],
    schedule: &FederationSchedule,
    reference_optimum: Option<&ModelParams>,
    test_set: Option<&Dataset>,
) -> Result<TrainingTrace> {
    schedule.validate()?;
    spec.validate()?;
    if partition.n_clients() != schedule.n_clients || budgets.len() != schedule.n_clients {
        return Err(FedDpError::InvalidParameter(format!(
            "partition has {} clients, {} budgets, schedule expects {}",
            partition.n_clients(),
            budgets.len(),
            schedule.n_clients
        )));
    }
    let pooled = partition.pooled()?;
    let client_sizes = partition.client_sizes();
    let p = pooled.param_dim();
    let mut params = initial_params(schedule, p);
    let mut rounds = Vec::with_capacity(schedule.t_total);

    for t in 0..schedule.t_total {
        let step = |params: &ModelParams| -> Result<(Vec<usize>, ModelParams)> {
            let selected = select_clients(schedule, t);
            // Client updates are independent; each gets its own seeded stream,
            // so the result does not depend on execution order.
            let replies: Vec<(usize, ModelParams)> = selected
                .par_iter()
                .map(|&id| {
                    let mut rng = rng_from(schedule.base_seed, &[0xc11e47, t as u64, id as u64]);
                    client_update(params, partition.client(id), spec, &budgets[id], schedule, t, &mut rng)
                        .map(|upd| (id, upd))
                })
                .collect::<Result<_>>()?;
            let next = aggregate(&replies, &client_sizes, schedule.n_clients, schedule.b)?;
            Ok((selected, next))
        };
        let (selected, next) = step(&params).map_err(|e| FedDpError::RoundFailed {
            round: t,
            source: Box::new(e),
        })?;
        params = next;

        let train_loss = loss(&params.0.view(), &pooled)?;
        let test_acc = match test_set {
            Some(test) => Some(accuracy(&params.0.view(), test)?),
            None => None,
        };
        let dist_sq_opt = reference_optimum.map(|opt| {
            (&params.0 - &opt.0).iter().map(|v| v * v).sum::<f64>()
        });
        rounds.push(RoundRecord {
            t,
            selected,
            train_loss,
            test_acc,
            eta: learning_rate(t, schedule.mu, schedule.lambda),
            dist_sq_opt,
        });
    }

    let final_train_loss = loss(&params.0.view(), &pooled)?;
    let final_test_acc = match test_set {
        Some(test) => Some(accuracy(&params.0.view(), test)?),
        None => None,
    };
    Ok(TrainingTrace {
        rounds,
        final_params: params,
        final_train_loss,
        final_test_acc,
    })
}
