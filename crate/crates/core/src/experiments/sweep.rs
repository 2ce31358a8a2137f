use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{stationary_point, OptimumReport, Problem};
use crate::error::{Error, Result};
use crate::operator::Chain;
use crate::optimizer::{run, stability_metrics, Mode, RunConfig};
use crate::perturbation::{mix_seed, Distribution, PerturbationPlan, PlanEntry, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Zero-mean uniform `δ` and `ε` at every iteration.
    #[default]
    FrequentZeroMean,
    /// Zero-mean `δ`, shifted-uniform `ε`, both at every iteration.
    FrequentBiasedBackward,
    /// Zero-mean `δ` and `ε` injected once every `Δt` iterations.
    IntermittentForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Zero,
    /// Start from a clean stationary point, so the recorded norm measures the
    /// steady state the perturbations sustain rather than the transient.
    #[default]
    CleanOptimum,
}

pub const DEFAULT_STEP_SIZES: [f64; 7] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4];
pub const BASELINE_LABEL: &str = "standard";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub step_sizes: Vec<f64>,
    pub sigma_f: Vec<f64>,
    pub sigma_b: Vec<f64>,
    /// Only read by the intermittent regime.
    pub intervals: Vec<u64>,
    pub regime: Regime,
    pub repetitions: usize,
    pub base: RunConfig,
    pub init: InitPolicy,
    /// Half-width of every uniform draw is `σ / √norm_dim`; defaults to the
    /// chain's input dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_dim: Option<usize>,
    pub include_baseline: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub plateau_threshold: f64,
    pub vanishing_threshold: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            step_sizes: DEFAULT_STEP_SIZES.to_vec(),
            sigma_f: vec![0.0],
            sigma_b: vec![0.5, 1.0, 2.0],
            intervals: vec![1],
            regime: Regime::FrequentZeroMean,
            repetitions: 3,
            base: RunConfig::default(),
            init: InitPolicy::CleanOptimum,
            norm_dim: None,
            include_baseline: true,
            workers: None,
            plateau_threshold: 0.5,
            vanishing_threshold: 0.25,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.step_sizes.is_empty()
            || self.sigma_f.is_empty()
            || self.sigma_b.is_empty()
            || self.intervals.is_empty()
        {
            return bad("grid lists must be nonempty");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.step_sizes.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("step sizes must be positive");
        }
        if self
            .sigma_f
            .iter()
            .chain(&self.sigma_b)
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return bad("perturbation scales must be nonnegative");
        }
        if self.intervals.contains(&0) {
            return bad("intervals must be at least 1");
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1");
        }
        if !(self.vanishing_threshold > 0.0 && self.vanishing_threshold <= self.plateau_threshold) {
            return bad("need 0 < vanishing_threshold <= plateau_threshold");
        }
        self.base.validate()
    }

    /// All cells: the baseline (if requested) and every nonzero
    /// `(σ_f, σ_b, Δt)` combination, each crossed with every step size.
    pub fn cells(&self) -> Vec<CellSpec> {
        let intervals: Vec<Option<u64>> = match self.regime {
            Regime::IntermittentForward => self.intervals.iter().map(|d| Some(*d)).collect(),
            _ => vec![None],
        };
        let mut settings = Vec::new();
        if self.include_baseline {
            settings.push((BASELINE_LABEL.to_string(), 0.0, 0.0, None));
        }
        for &sf in &self.sigma_f {
            for &sb in &self.sigma_b {
                if sf == 0.0 && sb == 0.0 {
                    continue;
                }
                for &dt in &intervals {
                    let label = match dt {
                        Some(dt) => format!("sf={sf},sb={sb},dt={dt}"),
                        None => format!("sf={sf},sb={sb}"),
                    };
                    settings.push((label, sf, sb, dt));
                }
            }
        }
        let mut cells = Vec::new();
        for (label, sf, sb, dt) in settings {
            for &gamma in &self.step_sizes {
                cells.push(CellSpec {
                    label: label.clone(),
                    sigma_f: sf,
                    sigma_b: sb,
                    interval: dt,
                    step_size: gamma,
                });
            }
        }
        cells.sort_by(|a, b| a.sort_key_cmp(b));
        cells.dedup_by(|a, b| a.sort_key_cmp(b).is_eq());
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSpec {
    pub label: String,
    pub sigma_f: f64,
    pub sigma_b: f64,
    pub interval: Option<u64>,
    pub step_size: f64,
}

impl CellSpec {
    pub fn is_baseline(&self) -> bool {
        self.label == BASELINE_LABEL
    }

    // Baseline first, then by scales and interval, then by decreasing step.
    fn sort_key_cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .is_baseline()
            .cmp(&self.is_baseline())
            .then(self.sigma_f.total_cmp(&other.sigma_f))
            .then(self.sigma_b.total_cmp(&other.sigma_b))
            .then(self.interval.cmp(&other.interval))
            .then(other.step_size.total_cmp(&self.step_size))
    }
}

/// Forward entries on layers `1..N-1`, backward entries on layers `2..N`.
pub fn regime_plan(
    chain: &Chain,
    regime: Regime,
    sigma_f: f64,
    sigma_b: f64,
    interval: Option<u64>,
    norm_dim: Option<usize>,
) -> PerturbationPlan {
    let schedule = match (regime, interval) {
        (Regime::IntermittentForward, Some(dt)) if dt > 1 => Schedule::Periodic {
            interval: dt,
            phase: 0,
        },
        _ => Schedule::EveryIteration,
    };
    let n = chain.n_layers();
    let mut plan = PerturbationPlan::clean();
    if sigma_f > 0.0 {
        for i in 1..n {
            let d = Distribution::ZeroMeanUniform {
                scale: sigma_f,
                norm_dim,
            };
            plan = plan.with_forward(i, PlanEntry::new(d, schedule));
        }
    }
    if sigma_b > 0.0 {
        for i in 2..=n {
            let d = match regime {
                Regime::FrequentBiasedBackward => Distribution::ShiftedUniform {
                    scale: sigma_b,
                    norm_dim,
                },
                _ => Distribution::ZeroMeanUniform {
                    scale: sigma_b,
                    norm_dim,
                },
            };
            plan = plan.with_backward(i, PlanEntry::new(d, schedule));
        }
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputRecord {
    pub regime: Regime,
    pub cell: String,
    pub step_size: f64,
    pub sigma_f: f64,
    pub sigma_b: f64,
    pub interval: Option<u64>,
    pub repetition: usize,
    pub seed: u64,
    pub horizon: u64,
    pub mode: Mode,
    pub momentum: f64,
    pub sampling_noise_std: f64,
    pub ewma_lambda: f64,
    pub stable_gradient_norm: f64,
    pub stable_iteration: Option<u64>,
    pub q_delta: u64,
    pub q_eps: u64,
    pub diverged: bool,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRecord {
    pub regime: Regime,
    pub cell: String,
    pub step_size: f64,
    pub sigma_f: f64,
    pub sigma_b: f64,
    pub interval: Option<u64>,
    pub repetitions: usize,
    pub mean_stable_gradient_norm: f64,
    /// Mean over the repetitions that reached stability.
    pub mean_stable_iteration: Option<f64>,
    pub reached: usize,
    pub diverged: usize,
    pub mean_q_delta: f64,
    pub mean_q_eps: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Plateau,
    Vanishing,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlateauVerdict {
    /// Stable norm at the smallest step over the one at the second smallest.
    pub ratio: f64,
    pub trend: Trend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<OutputRecord>,
    pub aggregates: Vec<AggregateRecord>,
    pub warm_start: Option<OptimumReport>,
    plateau_threshold: f64,
    vanishing_threshold: f64,
}

impl SweepResult {
    pub fn aggregate(&self, cell: &str, step_size: f64) -> Option<&AggregateRecord> {
        self.aggregates
            .iter()
            .find(|a| a.cell == cell && a.step_size == step_size)
    }

    pub fn cell_labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for a in &self.aggregates {
            if !out.contains(&a.cell.as_str()) {
                out.push(&a.cell);
            }
        }
        out
    }

    /// Classifies a cell by the ratio of its stable norms at the two smallest
    /// step sizes of the grid.
    pub fn plateau_verdict(&self, cell: &str) -> Option<PlateauVerdict> {
        let mut rows: Vec<&AggregateRecord> =
            self.aggregates.iter().filter(|a| a.cell == cell).collect();
        if rows.len() < 2 {
            return None;
        }
        rows.sort_by(|a, b| a.step_size.total_cmp(&b.step_size));
        let ratio = rows[0].mean_stable_gradient_norm / rows[1].mean_stable_gradient_norm;
        let trend = if ratio > self.plateau_threshold {
            Trend::Plateau
        } else if ratio < self.vanishing_threshold {
            Trend::Vanishing
        } else {
            Trend::Indeterminate
        };
        Some(PlateauVerdict { ratio, trend })
    }
}

pub(crate) fn hex_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Bit-exact fingerprint of a problem's data and chain description.
pub fn problem_fingerprint(problem: &Problem) -> String {
    let mut h = Sha256::new();
    for op in problem.chain.ops() {
        h.update(op.name().as_bytes());
        h.update((op.input_dim() as u64).to_le_bytes());
        h.update((op.weight_dim() as u64).to_le_bytes());
    }
    let reg = problem.chain.regularizer();
    h.update(format!("{:?}", reg.kind).as_bytes());
    h.update(reg.weight.to_le_bytes());
    for s in &problem.samples {
        for v in s.x.iter().chain(&s.ctx) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Job<'a> {
    cell: &'a CellSpec,
    repetition: usize,
    cfg: RunConfig,
    plan: PerturbationPlan,
    hash: String,
}

/// Runs every cell and repetition. Repetition `r` of every cell uses the same
/// seed, so cells differ only in their perturbation settings. Divergent cells
/// are recorded, never fatal.
pub fn sweep(grid: &SweepGrid, problem: &Problem) -> Result<SweepResult> {
    grid.validate()?;
    let chain = &problem.chain;
    let norm_dim = Some(grid.norm_dim.unwrap_or(chain.input_dim()));
    let (w0, warm_start) = match (&grid.base.initial_weights, grid.init) {
        (Some(w), _) => (w.clone(), None),
        (None, InitPolicy::Zero) => (vec![0.0; chain.weight_dim()], None),
        (None, InitPolicy::CleanOptimum) => {
            let r = stationary_point(problem, &vec![0.0; chain.weight_dim()], 1e-10, 100_000)?;
            (r.weights.clone(), Some(r))
        }
    };
    let fingerprint = problem_fingerprint(problem);
    let cells = grid.cells();
    let mut jobs = Vec::with_capacity(cells.len() * grid.repetitions);
    for cell in &cells {
        let plan = regime_plan(
            chain,
            grid.regime,
            cell.sigma_f,
            cell.sigma_b,
            cell.interval,
            norm_dim,
        );
        for repetition in 0..grid.repetitions {
            let cfg = RunConfig {
                step_size: cell.step_size,
                seed: mix_seed(&[grid.base.seed, repetition as u64]),
                initial_weights: Some(w0.clone()),
                ..grid.base.clone()
            };
            let hash = hex_digest(&format!(
                "{fingerprint}|{:?}|{:?}|{:?}|{:?}",
                grid.regime, cell, plan, cfg
            ));
            jobs.push(Job {
                cell,
                repetition,
                cfg,
                plan: plan.clone(),
                hash,
            });
        }
    }

    let execute = || -> Vec<Result<OutputRecord>> {
        jobs.par_iter()
            .map(|job| {
                let trace = run(chain, &problem.samples, &job.plan, &job.cfg)?;
                let m = stability_metrics(&trace);
                Ok(OutputRecord {
                    regime: grid.regime,
                    cell: job.cell.label.clone(),
                    step_size: job.cell.step_size,
                    sigma_f: job.cell.sigma_f,
                    sigma_b: job.cell.sigma_b,
                    interval: job.cell.interval,
                    repetition: job.repetition,
                    seed: job.cfg.seed,
                    horizon: job.cfg.horizon,
                    mode: job.cfg.mode,
                    momentum: job.cfg.momentum,
                    sampling_noise_std: job.cfg.sampling_noise_std,
                    ewma_lambda: job.cfg.ewma_lambda,
                    stable_gradient_norm: m.stable_gradient_norm,
                    stable_iteration: m.stable_iteration,
                    q_delta: trace.q_delta,
                    q_eps: trace.q_eps,
                    diverged: trace.diverged,
                    config_hash: job.hash.clone(),
                })
            })
            .collect()
    };
    let results = match grid.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?
            .install(execute),
        None => execute(),
    };
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut aggregates = Vec::with_capacity(cells.len());
    for (cell, group) in cells.iter().zip(records.chunks(grid.repetitions)) {
        let n = group.len() as f64;
        let reached: Vec<u64> = group.iter().filter_map(|r| r.stable_iteration).collect();
        let cell_hash = hex_digest(
            &group
                .iter()
                .map(|r| r.config_hash.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        aggregates.push(AggregateRecord {
            regime: grid.regime,
            cell: cell.label.clone(),
            step_size: cell.step_size,
            sigma_f: cell.sigma_f,
            sigma_b: cell.sigma_b,
            interval: cell.interval,
            repetitions: group.len(),
            mean_stable_gradient_norm: group.iter().map(|r| r.stable_gradient_norm).sum::<f64>()
                / n,
            mean_stable_iteration: if reached.is_empty() {
                None
            } else {
                Some(reached.iter().map(|t| *t as f64).sum::<f64>() / reached.len() as f64)
            },
            reached: reached.len(),
            diverged: group.iter().filter(|r| r.diverged).count(),
            mean_q_delta: group.iter().map(|r| r.q_delta as f64).sum::<f64>() / n,
            mean_q_eps: group.iter().map(|r| r.q_eps as f64).sum::<f64>() / n,
            config_hash: cell_hash,
        });
    }
    Ok(SweepResult {
        records,
        aggregates,
        warm_start,
        plateau_threshold: grid.plateau_threshold,
        vanishing_threshold: grid.vanishing_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::data::DatasetSpec;

    fn small_problem() -> Problem {
        Problem::logistic(&DatasetSpec {
            dim: 3,
            samples: 20,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn cells_skip_all_zero_and_add_baseline() {
        let g = SweepGrid {
            sigma_f: vec![0.0, 1.0],
            sigma_b: vec![0.0],
            step_sizes: vec![0.1, 0.01],
            ..Default::default()
        };
        let labels: Vec<String> = g.cells().into_iter().map(|c| c.label).collect();
        assert_eq!(
            labels,
            vec!["standard", "standard", "sf=1,sb=0", "sf=1,sb=0"]
        );
    }

    #[test]
    fn intermittent_schedule() {
        let p = small_problem();
        let plan = regime_plan(
            &p.chain,
            Regime::IntermittentForward,
            2.0,
            0.0,
            Some(10),
            Some(10),
        );
        assert_eq!(
            plan.forward[&1].schedule,
            Schedule::Periodic {
                interval: 10,
                phase: 0
            }
        );
        assert!(plan.backward.is_empty());
    }

    #[test]
    fn permuted_lists_give_identical_output() {
        let p = small_problem();
        let base = RunConfig {
            horizon: 50,
            ..Default::default()
        };
        let g1 = SweepGrid {
            sigma_b: vec![0.5, 2.0],
            step_sizes: vec![0.1, 0.01],
            repetitions: 2,
            base: base.clone(),
            ..Default::default()
        };
        let g2 = SweepGrid {
            sigma_b: vec![2.0, 0.5],
            step_sizes: vec![0.01, 0.1],
            ..g1.clone()
        };
        assert_eq!(
            sweep(&g1, &p).unwrap().aggregates,
            sweep(&g2, &p).unwrap().aggregates
        );
    }

    #[test]
    fn divergence_is_recorded() {
        let p = small_problem();
        let g = SweepGrid {
            step_sizes: vec![1e6],
            sigma_b: vec![1.0],
            repetitions: 1,
            init: InitPolicy::Zero,
            base: RunConfig {
                horizon: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = sweep(&g, &p).unwrap();
        assert_eq!(r.records.len(), 2);
    }
}
