//! Experiment configuration, orchestration (single runs, sweeps, repeated
//! trials) and result persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    acs_minimize, kkt_solutions_laplace, optimal_b_fixed_t_laplace, optimal_gaussian,
    optimal_t_fixed_b_laplace, BoundConstants, BoundMechanism, CandidateSolution, CurvatureSource,
    ProbeConfig,
};
use crate::data::{load_idx_dataset, make_synthetic_dataset, partition_noniid, ClientPartition, Dataset};
use crate::dp::{DpMechanismSpec, MechanismKind, PrivacyBudget};
use crate::error::{FedDpError, Result};
use crate::federation::{
    run_federation, ClientSelection, FederationSchedule, InitKind, TrainingTrace,
};
use crate::model::{train_centralized, NormOrder};
use crate::seeding::trial_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        class_separation: f64,
        /// Held out from the tail for test accuracy.
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr {
    Auto(AutoMarker),
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoMarker {
    Auto,
}

impl AutoOr {
    pub fn fixed(&self) -> Option<usize> {
        match self {
            AutoOr::Fixed(v) => Some(*v),
            AutoOr::Auto(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ConstantsSource {
    Inline { constants: BoundConstants },
    File { path: PathBuf },
    /// Estimate Y₀, Γ, G, Λᵢ from the partition before planning.
    Estimate {
        local_steps: usize,
        local_learning_rate: f64,
        convergence_tol: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub delta: f64,
    /// Overrides the uniform budget when present; length N.
    #[serde(default)]
    pub per_client: Option<Vec<PrivacyBudget>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub n_clients: usize,
    pub classes_per_client: usize,
    pub mechanism: DpMechanismSpec,
    pub budget: BudgetSpec,
    pub b: AutoOr,
    pub t: AutoOr,
    pub mu: f64,
    pub lambda: f64,
    #[serde(default = "default_selection")]
    pub selection: ClientSelection,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default)]
    pub constants: Option<ConstantsSource>,
    #[serde(default = "default_t_cap")]
    pub t_cap: u64,
    pub repeat: usize,
    pub seed: u64,
    /// Fraction of each client's samples kept for training, for data-size
    /// sweeps; 1.0 keeps everything.
    #[serde(default = "default_data_fraction")]
    pub data_fraction: f64,
    /// Record ‖θ_t − θ*‖² against a long noiseless centralized fit.
    #[serde(default)]
    pub record_distance: bool,
}

fn default_selection() -> ClientSelection {
    ClientSelection::RoundRobin
}

fn default_init() -> InitKind {
    InitKind::Zeros
}

fn default_t_cap() -> u64 {
    10_000
}

fn default_data_fraction() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.repeat == 0 {
            problems.push("repeat must be >= 1".to_string());
        }
        if self.n_clients == 0 {
            problems.push("n_clients must be >= 1".to_string());
        }
        if self.mu <= 0.0 || self.lambda <= 0.0 {
            problems.push("mu and lambda must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.data_fraction) || self.data_fraction == 0.0 {
            problems.push("data_fraction must lie in (0, 1]".to_string());
        }
        if let Err(e) = self.mechanism.validate() {
            problems.push(e.to_string());
        }
        if let Some(b) = self.b.fixed() {
            if b == 0 || b > self.n_clients {
                problems.push(format!("b = {b} outside [1, {}]", self.n_clients));
            }
        }
        let auto_requested = self.b.fixed().is_none() || self.t.fixed().is_none();
        if auto_requested {
            if self.mechanism.kind == MechanismKind::None {
                problems.push("auto schedule needs a DP mechanism".to_string());
            }
            if self.constants.is_none() {
                problems.push("auto schedule requires a constants source".to_string());
            }
        }
        if let Some(per_client) = &self.budget.per_client {
            if per_client.len() != self.n_clients {
                problems.push(format!(
                    "{} per-client budgets for {} clients",
                    per_client.len(),
                    self.n_clients
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FedDpError::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn budgets(&self) -> Result<Vec<PrivacyBudget>> {
        match &self.budget.per_client {
            Some(list) => Ok(list.clone()),
            None => {
                let budget = PrivacyBudget::new(self.budget.epsilon, self.budget.delta)?;
                Ok(vec![budget; self.n_clients])
            }
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        match &self.dataset {
            DatasetSource::Synthetic {
                n_samples,
                n_features,
                n_classes,
                class_separation,
                test_fraction,
            } => {
                let full = make_synthetic_dataset(
                    *n_samples,
                    *n_features,
                    *n_classes,
                    *class_separation,
                    self.seed,
                )?;
                if *test_fraction > 0.0 {
                    let n_test = ((*n_samples as f64) * test_fraction).round() as usize;
                    let (train, test) = full.split_tail(n_test)?;
                    Ok((train, Some(test)))
                } else {
                    Ok((full, None))
                }
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx_dataset(train_images, train_labels)?;
                let test = match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => Some(load_idx_dataset(ti, tl)?),
                    _ => None,
                };
                Ok((train, test))
            }
        }
    }

    pub fn build_partition(&self, train: &Dataset) -> Result<ClientPartition> {
        let partition = partition_noniid(train, self.n_clients, self.classes_per_client, self.seed)?;
        if self.data_fraction >= 1.0 {
            return Ok(partition);
        }
        let mut reduced = Vec::with_capacity(partition.n_clients());
        for dataset in partition.clients() {
            let keep = ((dataset.n_samples() as f64 * self.data_fraction).round() as usize).max(1);
            let indices: Vec<usize> = (0..keep).collect();
            reduced.push(dataset.subset(&indices));
        }
        ClientPartition::new(reduced)
    }

    pub fn probe_config(
        &self,
        local_steps: usize,
        local_learning_rate: f64,
        convergence_tol: f64,
    ) -> Result<ProbeConfig> {
        let clip = match self.mechanism.kind {
            MechanismKind::Laplace => Some((self.mechanism.xi1, NormOrder::L1)),
            MechanismKind::Gaussian => Some((self.mechanism.xi2, NormOrder::L2)),
            MechanismKind::None => None,
        };
        Ok(ProbeConfig {
            curvature: CurvatureSource::Explicit {
                mu: self.mu,
                lambda: self.lambda,
            },
            local_steps,
            local_learning_rate,
            convergence_tol,
            xi1: self.mechanism.xi1,
            xi2: self.mechanism.xi2,
            q: self.mechanism.q,
            c2: self.mechanism.c2,
            budgets: self.budgets()?,
            clip,
        })
    }

    pub fn resolve_constants(&self, partition: &ClientPartition) -> Result<BoundConstants> {
        match &self.constants {
            None => Err(FedDpError::InvalidConfig(
                "no constants source configured".into(),
            )),
            Some(ConstantsSource::Inline { constants }) => {
                constants.validate()?;
                Ok(constants.clone())
            }
            Some(ConstantsSource::File { path }) => {
                let text = fs::read_to_string(path)?;
                let constants: BoundConstants = serde_json::from_str(&text)?;
                constants.validate()?;
                Ok(constants)
            }
            Some(ConstantsSource::Estimate {
                local_steps,
                local_learning_rate,
                convergence_tol,
            }) => {
                let probe =
                    self.probe_config(*local_steps, *local_learning_rate, *convergence_tol)?;
                crate::bounds::estimate_constants(partition, &probe)
            }
        }
    }
}

/// Outcome of the `plan` verb: every candidate with the selected one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub mechanism: BoundMechanism,
    pub t_cap: u64,
    pub candidates: Vec<CandidateSolution>,
    pub selected: CandidateSolution,
    pub constants: BoundConstants,
    pub warnings: Vec<String>,
}

/// Enumerates the closed-form/KKT/ACS candidates for the configured
/// mechanism and selects the one with the smallest bound value.
pub fn plan(
    mechanism: BoundMechanism,
    constants: &BoundConstants,
    t_cap: u64,
) -> Result<PlanFile> {
    constants.validate()?;
    let mut candidates = Vec::new();
    match mechanism {
        BoundMechanism::Laplace => {
            let (_, kkt) = kkt_solutions_laplace(constants)?;
            candidates.extend(kkt);
            candidates.push(acs_minimize(mechanism, constants, t_cap, 1e-12, 200)?);
        }
        BoundMechanism::Gaussian => {
            candidates.push(optimal_gaussian(constants, t_cap)?);
            candidates.push(acs_minimize(mechanism, constants, t_cap, 1e-12, 200)?);
        }
    }
    let selected = candidates
        .iter()
        .min_by(|a, b| a.bound_value.total_cmp(&b.bound_value))
        .cloned()
        .expect("nonempty candidates");
    let mut warnings = Vec::new();
    if selected.t == 0 {
        warnings.push(
            "T* = 0: learning is useless at this budget; the DP noise overwhelms any progress"
                .to_string(),
        );
    }
    Ok(PlanFile {
        mechanism,
        t_cap,
        candidates,
        selected,
        constants: constants.clone(),
        warnings,
    })
}

/// Renders a plan as a small human-readable table.
pub fn format_plan(plan: &PlanFile) -> String {
    let mut out = String::new();
    out.push_str("provenance       T        b    bound\n");
    for c in &plan.candidates {
        let t_display = match c.t_capped_limit {
            Some(limit) => format!("{} (capped; limit {:.4e})", c.t, limit),
            None => c.t.to_string(),
        };
        out.push_str(&format!(
            "{:<16} {:<8} {:<4} {:.6e}\n",
            format!("{:?}", c.provenance),
            t_display,
            c.b,
            c.bound_value
        ));
    }
    out.push_str(&format!(
        "selected: T* = {}, b* = {} (bound {:.6e})\n",
        plan.selected.t, plan.selected.b, plan.selected.bound_value
    ));
    for w in &plan.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub final_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundAggregate {
    pub t: usize,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_acc: Option<f64>,
    pub std_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsSummary {
    pub config: ExperimentConfig,
    pub resolved_b: usize,
    pub resolved_t: usize,
    pub plan: Option<PlanFile>,
    pub trials: Vec<TrialRecord>,
    pub per_round: Vec<RoundAggregate>,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    pub mean_final_acc: Option<f64>,
}

/// Full in-memory outcome of one experiment.
pub struct ExperimentResults {
    pub summary: ResultsSummary,
    pub traces: Vec<TrainingTrace>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Resolves any "auto" entries of the (b, T) schedule through the planner.
pub fn resolve_schedule(
    config: &ExperimentConfig,
    partition: &ClientPartition,
) -> Result<(usize, usize, Option<PlanFile>)> {
    match (config.b.fixed(), config.t.fixed()) {
        (Some(b), Some(t)) => Ok((b, t, None)),
        (fixed_b, fixed_t) => {
            let constants = config.resolve_constants(partition)?;
            let mechanism = BoundMechanism::from_kind(config.mechanism.kind)
                .ok_or_else(|| FedDpError::InvalidConfig("auto schedule needs a DP mechanism".into()))?;
            match (fixed_b, fixed_t) {
                (None, None) => {
                    let plan_file = plan(mechanism, &constants, config.t_cap)?;
                    let b = plan_file.selected.b;
                    let t = plan_file.selected.t as usize;
                    Ok((b, t, Some(plan_file)))
                }
                (Some(b), None) => {
                    let t = match mechanism {
                        BoundMechanism::Laplace => {
                            optimal_t_fixed_b_laplace(&constants, b as f64)?.round() as usize
                        }
                        BoundMechanism::Gaussian => {
                            optimal_gaussian(&constants, config.t_cap)?.t as usize
                        }
                    };
                    Ok((b, t.min(config.t_cap as usize), None))
                }
                (None, Some(t)) => {
                    let b = match mechanism {
                        BoundMechanism::Laplace => {
                            optimal_b_fixed_t_laplace(&constants, t as f64).round() as usize
                        }
                        BoundMechanism::Gaussian => constants.n_clients,
                    };
                    Ok((b.clamp(1, config.n_clients), t, None))
                }
                (Some(_), Some(_)) => unreachable!("handled by the outer match"),
            }
        }
    }
}

/// Runs the configured number of trials and aggregates the traces.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let (train, test) = config.load_data()?;
    let partition = config.build_partition(&train)?;
    let (b, t_total, plan_file) = resolve_schedule(config, &partition)?;
    let budgets = config.budgets()?;

    let reference = if config.record_distance {
        let pooled = partition.pooled()?;
        let eta0 = 1.0 / config.lambda;
        Some(train_centralized(&pooled, 10 * t_total.max(1), eta0, 0.0)?)
    } else {
        None
    };

    let traces: Vec<TrainingTrace> = (0..config.repeat)
        .into_par_iter()
        .map(|trial| {
            let schedule = FederationSchedule {
                n_clients: config.n_clients,
                b,
                t_total,
                mu: config.mu,
                lambda: config.lambda,
                selection: config.selection,
                init: config.init,
                base_seed: trial_seed(config.seed, trial as u64),
            };
            run_federation(
                &partition,
                &config.mechanism,
                &budgets,
                &schedule,
                reference.as_ref(),
                test.as_ref(),
            )
        })
        .collect::<Result<_>>()?;

    let trials: Vec<TrialRecord> = traces
        .iter()
        .enumerate()
        .map(|(trial, trace)| TrialRecord {
            trial,
            seed: trial_seed(config.seed, trial as u64),
            final_loss: trace.final_train_loss,
            final_acc: trace.final_test_acc,
        })
        .collect();

    let mut per_round = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let losses: Vec<f64> = traces.iter().map(|tr| tr.rounds[t].train_loss).collect();
        let (mean_loss, std_loss) = mean_std(&losses);
        let accs: Option<Vec<f64>> = traces
            .iter()
            .map(|tr| tr.rounds[t].test_acc)
            .collect::<Option<Vec<f64>>>();
        let (mean_acc, std_acc) = match &accs {
            Some(a) => {
                let (m, s) = mean_std(a);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        per_round.push(RoundAggregate {
            t,
            mean_loss,
            std_loss,
            mean_acc,
            std_acc,
        });
    }

    let final_losses: Vec<f64> = trials.iter().map(|tr| tr.final_loss).collect();
    let (mean_final_loss, std_final_loss) = mean_std(&final_losses);
    let mean_final_acc = trials
        .iter()
        .map(|tr| tr.final_acc)
        .collect::<Option<Vec<f64>>>()
        .map(|a| mean_std(&a).0);

    Ok(ExperimentResults {
        summary: ResultsSummary {
            config: config.clone(),
            resolved_b: b,
            resolved_t: t_total,
            plan: plan_file,
            trials,
            per_round,
            mean_final_loss,
            std_final_loss,
            mean_final_acc,
        },
        traces,
    })
}

fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Long-format trace CSV: trial,t,loss,acc,eta,dist.
pub fn render_trace_csv(results: &ExperimentResults) -> String {
    let mut out = String::from("trial,t,loss,acc,eta,dist\n");
    for (trial, trace) in results.traces.iter().enumerate() {
        for round in &trace.rounds {
            let acc = round
                .test_acc
                .map(|a| format!("{a}"))
                .unwrap_or_default();
            let dist = round
                .dist_sq_opt
                .map(|d| format!("{d}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{trial},{},{},{acc},{},{dist}\n",
                round.t, round.train_loss, round.eta
            ));
        }
    }
    out
}

/// Writes `trace.csv` and `summary.json` into `dir` (atomic per file).
pub fn write_results(results: &ExperimentResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    atomic_write(&dir.join("trace.csv"), render_trace_csv(results).as_bytes())?;
    let summary = serde_json::to_string_pretty(&results.summary)?;
    atomic_write(&dir.join("summary.json"), summary.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    B,
    T,
    Epsilon,
    DataFraction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    pub mean_final_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<String>,
}

fn apply_axis(config: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut next = config.clone();
    match axis {
        SweepAxis::B => next.b = AutoOr::Fixed(value.round() as usize),
        SweepAxis::T => next.t = AutoOr::Fixed(value.round() as usize),
        SweepAxis::Epsilon => next.budget.epsilon = value,
        SweepAxis::DataFraction => next.data_fraction = value,
    }
    next
}

/// One run per axis value; failures are reported but do not stop the sweep.
pub fn sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: Option<&Path>,
) -> Result<SweepSummary> {
    if values.is_empty() {
        return Err(FedDpError::InvalidConfig("empty sweep values".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &value in values {
        let run_config = apply_axis(config, axis, value);
        match run_experiment(&run_config) {
            Ok(results) => {
                if let Some(dir) = out_dir {
                    write_results(&results, &dir.join(format!("{axis:?}_{value}")))?;
                }
                rows.push(SweepRow {
                    value,
                    mean_final_loss: results.summary.mean_final_loss,
                    std_final_loss: results.summary.std_final_loss,
                    mean_final_acc: results.summary.mean_final_acc,
                });
            }
            Err(e) => failures.push(format!("value {value}: {e}")),
        }
    }
    let summary = SweepSummary {
        axis,
        rows,
        failures,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        atomic_write(
            &dir.join("sweep.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
    }
    Ok(summary)
}
