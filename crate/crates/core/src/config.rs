//! TOML experiment configuration with `[dataset]`, `[chain]`, `[plan]`,
//! `[run]`, `[grid]` and `[bounds]` sections. Every section is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{BoundReportOptions, DatasetSpec, Problem, SweepGrid};
use crate::operator::{Chain, OperatorSpec, Sample};
use crate::optimizer::RunConfig;
use crate::perturbation::{Compressor, Distribution, PerturbationPlan, PlanEntry, Schedule};

/// Without `operators` the chain is the logistic chain over `[dataset]`. With
/// them, `samples` must be given as well.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operators: Option<Vec<OperatorSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Sample>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntryConfig {
    pub layer: usize,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<Compressor>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub forward: Vec<PlanEntryConfig>,
    pub backward: Vec<PlanEntryConfig>,
}

impl PlanConfig {
    pub fn to_plan(&self) -> Result<PerturbationPlan> {
        let mut plan = PerturbationPlan::clean();
        for (list, forward) in [(&self.forward, true), (&self.backward, false)] {
            for e in list {
                let entry = PlanEntry {
                    distribution: e.distribution.clone(),
                    schedule: e.schedule,
                    compressor: e.compressor,
                };
                let map = if forward {
                    &mut plan.forward
                } else {
                    &mut plan.backward
                };
                if map.insert(e.layer, entry).is_some() {
                    return Err(Error::InvalidPlan(format!(
                        "layer {} listed twice",
                        e.layer
                    )));
                }
            }
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub chain: ChainConfig,
    pub plan: PlanConfig,
    pub run: RunConfig,
    pub grid: SweepGrid,
    pub bounds: BoundReportOptions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Overrides every seed in the file.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.run.seed = seed;
        self.grid.base.seed = seed;
        self.bounds.dominance.seed = seed;
        self.bounds.rate.seed = seed;
        self
    }

    pub fn problem(&self) -> Result<Problem> {
        match (&self.chain.operators, &self.chain.samples) {
            (None, None) => Problem::logistic(&self.dataset),
            (Some(ops), Some(samples)) => {
                let ops = ops.iter().map(|o| o.build()).collect::<Result<Vec<_>>>()?;
                Problem::new(
                    Chain::new(ops, self.dataset.regularizer())?,
                    samples.clone(),
                )
            }
            (Some(_), None) => Err(Error::InvalidConfig(
                "[chain] operators need explicit samples".into(),
            )),
            (None, Some(_)) => Err(Error::InvalidConfig(
                "[chain] samples need explicit operators".into(),
            )),
        }
    }

    pub fn plan(&self) -> Result<PerturbationPlan> {
        self.plan.to_plan()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_plan_lists() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            [dataset]
            dim = 4
            samples = 8
            [[plan.forward]]
            layer = 1
            distribution = { kind = "zero_mean_uniform", scale = 0.1, norm_dim = 10 }
            schedule = { kind = "periodic", interval = 10 }
            [[plan.backward]]
            layer = 2
            compressor = { kind = "top_k", k = 1 }
            [run]
            horizon = 5
            "#,
        )
        .unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(
            plan.forward[&1].schedule,
            Schedule::Periodic {
                interval: 10,
                phase: 0
            }
        );
        assert_eq!(
            plan.backward[&2].compressor,
            Some(Compressor::TopK { k: 1 })
        );
        assert_eq!(cfg.run.horizon, 5);
        assert_eq!(cfg.run.step_size, RunConfig::default().step_size);
        plan.validate(&cfg.problem().unwrap().chain).unwrap();
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml("[dataset]\ndimension = 3\n").is_err());
    }

    #[test]
    fn custom_chain_needs_samples() {
        let cfg = ExperimentConfig::from_toml(
            "[chain]\noperators = [{ kind = \"softplus\" }, { kind = \"softplus\" }]\n",
        )
        .unwrap();
        assert!(cfg.problem().is_err());
    }
}
