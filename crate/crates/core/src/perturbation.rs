//! Perturbation sources for the forward (`δ_i`) and backward (`ε_i`) passes:
//! distributions, schedules, compressors, closed-form moments and event counts.
//!
//! Every draw comes from a private stream keyed by `(seed, t, slot, layer, pass)`,
//! so changing the plan of one layer never shifts the draws seen by another, and
//! two schedules that are both active at `t` see the same draw there.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::Chain;
use crate::optimizer::RunTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Forward,
    Backward,
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into one seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |h, w| splitmix64(h ^ splitmix64(*w)))
}

/// Position of a draw within a run: master seed, iteration, and a slot that
/// separates independent draws in the same iteration (e.g. sample index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub t: u64,
    pub slot: u64,
}

impl StreamKey {
    pub fn new(seed: u64, t: u64, slot: u64) -> Self {
        Self { seed, t, slot }
    }

    /// Substream for one `(layer, pass)`; `tag` distinguishes other consumers.
    pub fn rng(&self, tag: u64) -> Pcg64Mcg {
        let hi = mix_seed(&[self.seed, self.t, self.slot, tag]);
        let lo = splitmix64(hi ^ 0xD1B5_4A32_D192_ED03);
        Pcg64Mcg::new(((hi as u128) << 64) | lo as u128)
    }
}

fn layer_tag(layer: usize, pass: PassKind) -> u64 {
    let p = match pass {
        PassKind::Forward => 0,
        PassKind::Backward => 1,
    };
    ((layer as u64) << 1) | p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    None,
    /// `U(-c, c)` per coordinate with `c = scale / √norm_dim`.
    ZeroMeanUniform {
        scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm_dim: Option<usize>,
    },
    /// `U(0, c)` per coordinate with `c = scale / √norm_dim`.
    ShiftedUniform {
        scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm_dim: Option<usize>,
    },
    Constant {
        value: Vec<f64>,
    },
    /// Length-1 vectors broadcast to every coordinate.
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    /// Independent `±magnitude` per coordinate.
    TwoPoint {
        magnitude: f64,
    },
}

/// `norm_dim` defaults to the perturbed vector's dimension.
fn half_width(scale: f64, norm_dim: Option<usize>, dim: usize) -> f64 {
    scale / (norm_dim.unwrap_or(dim).max(1) as f64).sqrt()
}

fn broadcast(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

impl Distribution {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        match self {
            Distribution::None => Ok(()),
            Distribution::ZeroMeanUniform { scale, norm_dim }
            | Distribution::ShiftedUniform { scale, norm_dim } => {
                if !(*scale >= 0.0 && scale.is_finite()) {
                    return bad(format!("scale must be finite and nonnegative, got {scale}"));
                }
                if *norm_dim == Some(0) {
                    return bad("norm_dim must be positive".into());
                }
                Ok(())
            }
            Distribution::Constant { value } => {
                if value.len() != dim {
                    return bad(format!(
                        "constant has {} entries, layer has {dim}",
                        value.len()
                    ));
                }
                if value.iter().any(|x| !x.is_finite()) {
                    return bad("constant must be finite".into());
                }
                Ok(())
            }
            Distribution::Gaussian { mean, std } => {
                for (name, v) in [("mean", mean), ("std", std)] {
                    if v.len() != 1 && v.len() != dim {
                        return bad(format!(
                            "gaussian {name} has {} entries, layer has {dim}",
                            v.len()
                        ));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return bad(format!("gaussian {name} must be finite"));
                    }
                }
                if std.iter().any(|s| *s < 0.0) {
                    return bad("gaussian std must be nonnegative".into());
                }
                Ok(())
            }
            Distribution::TwoPoint { magnitude } => {
                if !(*magnitude >= 0.0 && magnitude.is_finite()) {
                    return bad(format!(
                        "magnitude must be finite and nonnegative, got {magnitude}"
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Distribution::None)
    }

    /// Writes one draw into `out` (overwriting it).
    pub fn sample_into<R: RngCore>(&self, rng: &mut R, out: &mut [f64]) {
        let dim = out.len();
        match self {
            Distribution::None => out.fill(0.0),
            Distribution::ZeroMeanUniform { scale, norm_dim } => {
                let c = half_width(*scale, *norm_dim, dim);
                for o in out.iter_mut() {
                    *o = c * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            Distribution::ShiftedUniform { scale, norm_dim } => {
                let c = half_width(*scale, *norm_dim, dim);
                for o in out.iter_mut() {
                    *o = c * rng.random::<f64>();
                }
            }
            Distribution::Constant { value } => out.copy_from_slice(value),
            Distribution::Gaussian { mean, std } => {
                for (k, o) in out.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = broadcast(mean, k) + broadcast(std, k) * z;
                }
            }
            Distribution::TwoPoint { magnitude } => {
                for o in out.iter_mut() {
                    *o = if rng.random::<bool>() {
                        *magnitude
                    } else {
                        -*magnitude
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    EveryIteration,
    Periodic {
        interval: u64,
        #[serde(default)]
        phase: u64,
    },
    OneShot {
        t0: u64,
    },
    Never,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if let Schedule::Periodic { interval, phase } = self {
            if *interval == 0 {
                return Err(Error::InvalidPlan("interval must be at least 1".into()));
            }
            if phase >= interval {
                return Err(Error::InvalidPlan(format!(
                    "phase {phase} must be below interval {interval}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn is_active(&self, t: u64) -> bool {
        match self {
            Schedule::EveryIteration => true,
            Schedule::Periodic { interval, phase } => t % interval == *phase,
            Schedule::OneShot { t0 } => t == *t0,
            Schedule::Never => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Compressor {
    TopK { k: usize },
}

impl Compressor {
    pub fn compress_in_place(&self, v: &mut [f64]) {
        match self {
            Compressor::TopK { k } => top_k_in_place(v, *k),
        }
    }
}

/// Keeps the `k` largest-magnitude entries (lowest index wins ties).
fn top_k_in_place(v: &mut [f64], k: usize) {
    if k >= v.len() {
        return;
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    for &i in &order[k..] {
        v[i] = 0.0;
    }
}

/// Returns the compressed vector and the implied perturbation `C(v) - v`.
pub fn top_k_compress(v: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = v.to_vec();
    top_k_in_place(&mut c, k);
    let implied = c.iter().zip(v).map(|(a, b)| a - b).collect();
    (c, implied)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PlanEntry {
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<Compressor>,
}

impl PlanEntry {
    pub fn new(distribution: Distribution, schedule: Schedule) -> Self {
        Self {
            distribution,
            schedule,
            compressor: None,
        }
    }

    pub fn compressor(compressor: Compressor) -> Self {
        Self {
            distribution: Distribution::None,
            schedule: Schedule::EveryIteration,
            compressor: Some(compressor),
        }
    }
}

/// Per-layer entries: `forward[i]` governs `δ_i` (`i = 1..N`), `backward[i]`
/// governs `ε_i` (`i = 2..N`), which is added to `v_{i-1}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerturbationPlan {
    pub forward: BTreeMap<usize, PlanEntry>,
    pub backward: BTreeMap<usize, PlanEntry>,
}

impl PerturbationPlan {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn entry(&self, pass: PassKind, layer: usize) -> Option<&PlanEntry> {
        match pass {
            PassKind::Forward => self.forward.get(&layer),
            PassKind::Backward => self.backward.get(&layer),
        }
    }

    pub fn with_forward(mut self, layer: usize, entry: PlanEntry) -> Self {
        self.forward.insert(layer, entry);
        self
    }

    pub fn with_backward(mut self, layer: usize, entry: PlanEntry) -> Self {
        self.backward.insert(layer, entry);
        self
    }

    /// True when no entry can ever produce a nonzero perturbation.
    pub fn is_clean(&self) -> bool {
        self.forward
            .values()
            .chain(self.backward.values())
            .all(|e| {
                (e.distribution.is_none() && e.compressor.is_none())
                    || e.schedule == Schedule::Never
            })
    }

    /// Dimension of the vector perturbed by an entry on `chain`.
    pub fn target_dim(chain: &Chain, pass: PassKind, layer: usize) -> usize {
        match pass {
            PassKind::Forward => chain.op(layer).output_dim(),
            PassKind::Backward => chain.op(layer).input_dim(),
        }
    }

    pub fn validate(&self, chain: &Chain) -> Result<()> {
        let n = chain.n_layers();
        for (pass, map, lo) in [
            (PassKind::Forward, &self.forward, 1),
            (PassKind::Backward, &self.backward, 2),
        ] {
            for (&layer, entry) in map {
                if layer < lo || layer > n {
                    return Err(Error::InvalidPlan(format!(
                        "{pass:?} entry for layer {layer} outside {lo}..={n}"
                    )));
                }
                let dim = Self::target_dim(chain, pass, layer);
                entry.distribution.validate(dim)?;
                entry.schedule.validate()?;
                if let Some(Compressor::TopK { k }) = entry.compressor {
                    if k == 0 || k > dim {
                        return Err(Error::InvalidPlan(format!(
                            "top-k needs 1 <= k <= {dim}, got {k}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// A single distribution draw, zero when the schedule is inactive.
    pub fn sample(&self, layer: usize, pass: PassKind, key: StreamKey, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        if let Some(e) = self.entry(pass, layer) {
            if e.schedule.is_active(key.t) {
                e.distribution
                    .sample_into(&mut key.rng(layer_tag(layer, pass)), &mut out);
            }
        }
        out
    }

    /// Applies the entry for `(pass, layer)` to `value` in place and writes the
    /// realized perturbation into `delta`. Returns whether it is nonzero.
    pub fn perturb(
        &self,
        pass: PassKind,
        layer: usize,
        key: StreamKey,
        value: &mut [f64],
        delta: &mut [f64],
    ) -> bool {
        delta.fill(0.0);
        let Some(e) = self.entry(pass, layer) else {
            return false;
        };
        if !e.schedule.is_active(key.t) {
            return false;
        }
        if !e.distribution.is_none() {
            e.distribution
                .sample_into(&mut key.rng(layer_tag(layer, pass)), delta);
        }
        match e.compressor {
            None => {
                for (v, d) in value.iter_mut().zip(delta.iter()) {
                    *v += d;
                }
            }
            Some(c) => {
                for (d, v) in delta.iter_mut().zip(value.iter()) {
                    *d += v;
                }
                c.compress_in_place(delta);
                for (d, v) in delta.iter_mut().zip(value.iter_mut()) {
                    let new = *d;
                    *d = new - *v;
                    *v = new;
                }
            }
        }
        delta.iter().any(|d| *d != 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentSummary {
    /// `E‖·‖²`
    pub second_moment: f64,
    /// `E‖·‖⁴`
    pub fourth_moment: f64,
    /// `‖E[·]‖²`
    pub mean_norm_sq: f64,
}

impl MomentSummary {
    pub const ZERO: Self = Self {
        second_moment: 0.0,
        fourth_moment: 0.0,
        mean_norm_sq: 0.0,
    };
}

/// Closed-form moments for a draw of dimension `dim`.
pub fn analytic_moments(dist: &Distribution, dim: usize) -> MomentSummary {
    let d = dim as f64;
    match dist {
        Distribution::None => MomentSummary::ZERO,
        Distribution::ZeroMeanUniform { scale, norm_dim } => {
            let c = half_width(*scale, *norm_dim, dim);
            let c2 = c * c;
            MomentSummary {
                second_moment: d * c2 / 3.0,
                fourth_moment: d * c2 * c2 / 5.0 + d * (d - 1.0) * c2 * c2 / 9.0,
                mean_norm_sq: 0.0,
            }
        }
        Distribution::ShiftedUniform { scale, norm_dim } => {
            let c = half_width(*scale, *norm_dim, dim);
            let c2 = c * c;
            MomentSummary {
                second_moment: d * c2 / 3.0,
                fourth_moment: d * c2 * c2 / 5.0 + d * (d - 1.0) * c2 * c2 / 9.0,
                mean_norm_sq: d * c2 / 4.0,
            }
        }
        Distribution::Constant { value } => {
            let s: f64 = value.iter().map(|x| x * x).sum();
            MomentSummary {
                second_moment: s,
                fourth_moment: s * s,
                mean_norm_sq: s,
            }
        }
        Distribution::Gaussian { mean, std } => {
            let (mut sum_a, mut sum_a2, mut sum_b, mut mean_sq) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..dim {
                let (m, s) = (broadcast(mean, k), broadcast(std, k));
                let (m2, s2) = (m * m, s * s);
                let a = m2 + s2;
                sum_a += a;
                sum_a2 += a * a;
                sum_b += m2 * m2 + 6.0 * m2 * s2 + 3.0 * s2 * s2;
                mean_sq += m2;
            }
            MomentSummary {
                second_moment: sum_a,
                fourth_moment: sum_a * sum_a - sum_a2 + sum_b,
                mean_norm_sq: mean_sq,
            }
        }
        Distribution::TwoPoint { magnitude } => {
            let s = d * magnitude * magnitude;
            MomentSummary {
                second_moment: s,
                fourth_moment: s * s,
                mean_norm_sq: 0.0,
            }
        }
    }
}

/// Standard errors attached to Monte Carlo moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MomentErrors {
    pub second_moment: f64,
    pub fourth_moment: f64,
    pub mean_norm_sq: f64,
}

/// Running moments of observed perturbation vectors (Welford updates).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sq_mean: f64,
    sq_m2: f64,
    q_mean: f64,
    q_m2: f64,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            sq_mean: 0.0,
            sq_m2: 0.0,
            q_mean: 0.0,
            q_m2: 0.0,
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, m2), xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = xi - *m;
            *m += d / n;
            *m2 += d * (xi - *m);
        }
        let s: f64 = x.iter().map(|v| v * v).sum();
        let ds = s - self.sq_mean;
        self.sq_mean += ds / n;
        self.sq_m2 += ds * (s - self.sq_mean);
        let q = s * s;
        let dq = q - self.q_mean;
        self.q_mean += dq / n;
        self.q_m2 += dq * (q - self.q_mean);
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Per-coordinate sample variance (zero below two observations).
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.m2.len()];
        }
        self.m2.iter().map(|m2| m2 / (self.n - 1) as f64).collect()
    }

    pub fn summary(&self) -> MomentSummary {
        MomentSummary {
            second_moment: self.sq_mean,
            fourth_moment: self.q_mean,
            mean_norm_sq: self.mean.iter().map(|m| m * m).sum(),
        }
    }

    pub fn errors(&self) -> MomentErrors {
        if self.n < 2 {
            return MomentErrors::default();
        }
        let n = self.n as f64;
        let se = |m2: f64| (m2 / (n - 1.0) / n).sqrt();
        // Delta method for ‖m‖²: gradient 2m against the per-coordinate mean errors.
        let mean_var: f64 = self
            .mean
            .iter()
            .zip(&self.m2)
            .map(|(m, m2)| 4.0 * m * m * m2 / (n - 1.0) / n)
            .sum();
        let floor: f64 = self.m2.iter().map(|m2| m2 / (n - 1.0) / n).sum();
        MomentErrors {
            second_moment: se(self.sq_m2),
            fourth_moment: se(self.q_m2),
            mean_norm_sq: mean_var.sqrt() + floor,
        }
    }
}

/// Monte Carlo moments with standard errors.
pub fn monte_carlo_moments(
    dist: &Distribution,
    dim: usize,
    draws: usize,
    seed: u64,
) -> (MomentSummary, MomentErrors) {
    let mut acc = MomentAccumulator::new(dim);
    let mut rng = StreamKey::new(seed, 0, 0).rng(u64::MAX);
    let mut buf = vec![0.0; dim];
    for _ in 0..draws {
        dist.sample_into(&mut rng, &mut buf);
        acc.push(&buf);
    }
    (acc.summary(), acc.errors())
}

/// `(Q_δ, Q_ε)`: iterations with any nonzero forward / backward perturbation.
pub fn count_events(trace: &RunTrace) -> (u64, u64) {
    let q = |v: &[bool]| v.iter().filter(|a| **a).count() as u64;
    (q(&trace.delta_active), q(&trace.eps_active))
}
