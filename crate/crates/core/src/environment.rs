//! The stochastic bandit environment.
//!
//! A hidden reward vector, a finite-support distribution over K-armed context
//! sets, Gaussian reward noise with optional clipping, realized-regret
//! bookkeeping, and the hard-instance generator used for lower-bound style
//! experiments.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{self, domain};

/// Norm slack when validating unit-bounded vectors.
pub const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("reward vector norm {norm} exceeds 1")]
    ThetaTooLong { norm: f64 },
    #[error("noise standard deviation must be nonnegative, got {0}")]
    NegativeSigma(f64),
    #[error("arm {arm} in set {set} has norm {norm} > 1")]
    ArmTooLong { set: usize, arm: usize, norm: f64 },
    #[error("weights must be nonnegative and sum to 1 (sum = {sum})")]
    BadWeights { sum: f64 },
    #[error("support must contain at least one context set")]
    EmptySupport,
    #[error("set {set} has {got} arms, expected {expected}")]
    RaggedSets {
        set: usize,
        got: usize,
        expected: usize,
    },
    #[error("arm dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("hard instance needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// The environment's secret: hidden reward vector plus the noise model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta_star: Vec<f64>,
    pub noise_sigma: f64,
    /// Clamp observed rewards to [-1, 1] so the boundedness assumption holds
    /// exactly rather than only with high probability.
    pub clip_rewards: bool,
}

impl GroundTruth {
    pub fn new(
        theta_star: Vec<f64>,
        noise_sigma: f64,
        clip_rewards: bool,
    ) -> Result<Self, EnvError> {
        let norm = norm2(&theta_star);
        if norm > 1.0 + NORM_TOL {
            return Err(EnvError::ThetaTooLong { norm });
        }
        if noise_sigma < 0.0 {
            return Err(EnvError::NegativeSigma(noise_sigma));
        }
        Ok(Self {
            theta_star,
            noise_sigma,
            clip_rewards,
        })
    }

    /// Standard-Gaussian draw normalized to unit norm.
    pub fn random_unit(d: usize, noise_sigma: f64, clip_rewards: bool, rng: &mut impl Rng) -> Self {
        let theta = random_unit_vector(d, rng);
        Self {
            theta_star: theta,
            noise_sigma,
            clip_rewards,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn mean_reward(&self, x: &[f64]) -> f64 {
        dot(&self.theta_star, x)
    }
}

fn random_unit_vector(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Observed reward ⟨θ*, x⟩ + η with η ~ N(0, σ²), optionally clipped.
pub fn reward(x: &[f64], gt: &GroundTruth, rng: &mut impl Rng) -> f64 {
    let noise: f64 = if gt.noise_sigma > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        z * gt.noise_sigma
    } else {
        0.0
    };
    let y = gt.mean_reward(x) + noise;
    if gt.clip_rewards {
        y.clamp(-1.0, 1.0)
    } else {
        y
    }
}

// ---------------------------------------------------------------------------
// Decision support
// ---------------------------------------------------------------------------

/// Finite-support distribution over K-armed context sets, known to the agents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionSupport {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// `sets[j][a]` is the a-th feature vector of support set j.
    pub sets: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
}

impl DecisionSupport {
    pub fn new(sets: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> Result<Self, EnvError> {
        if sets.is_empty() {
            return Err(EnvError::EmptySupport);
        }
        let k = sets[0].len();
        let d = sets[0].first().map(|a| a.len()).unwrap_or(0);
        for (j, set) in sets.iter().enumerate() {
            if set.len() != k {
                return Err(EnvError::RaggedSets {
                    set: j,
                    got: set.len(),
                    expected: k,
                });
            }
            for (a, arm) in set.iter().enumerate() {
                if arm.len() != d {
                    return Err(EnvError::DimensionMismatch {
                        expected: d,
                        actual: arm.len(),
                    });
                }
                let n = norm2(arm);
                if n > 1.0 + NORM_TOL {
                    return Err(EnvError::ArmTooLong {
                        set: j,
                        arm: a,
                        norm: n,
                    });
                }
            }
        }
        if weights.len() != sets.len() || weights.iter().any(|&w| w < 0.0) {
            return Err(EnvError::BadWeights {
                sum: weights.iter().sum(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EnvError::BadWeights { sum });
        }
        Ok(Self {
            d,
            k,
            sets,
            weights,
        })
    }

    pub fn uniform(sets: Vec<Vec<Vec<f64>>>) -> Result<Self, EnvError> {
        let l = sets.len().max(1);
        let w = vec![1.0 / l as f64; sets.len()];
        Self::new(sets, w)
    }

    /// Support of `l_sup` sets, each of K standard-Gaussian arms normalized to
    /// unit norm, drawn uniformly.
    pub fn random_unit_support(
        d: usize,
        k: usize,
        l_sup: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, EnvError> {
        let sets: Vec<Vec<Vec<f64>>> = (0..l_sup)
            .map(|_| (0..k).map(|_| random_unit_vector(d, rng)).collect())
            .collect();
        Self::uniform(sets)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set(&self, j: usize) -> &Vec<Vec<f64>> {
        &self.sets[j]
    }
}

/// Draws a support index according to the weights.
pub fn sample_decision_set<'a>(
    support: &'a DecisionSupport,
    rng: &mut impl Rng,
) -> (usize, &'a Vec<Vec<f64>>) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &w) in support.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return (j, &support.sets[j]);
        }
    }
    let last = support.sets.len() - 1;
    (last, &support.sets[last])
}

/// Best achievable mean reward in a set.
pub fn best_mean_reward(set: &[Vec<f64>], gt: &GroundTruth) -> f64 {
    set.iter()
        .map(|x| gt.mean_reward(x))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Realized instantaneous regret of playing `chosen` from `set`.
pub fn instantaneous_regret(set: &[Vec<f64>], chosen: &[f64], gt: &GroundTruth) -> f64 {
    best_mean_reward(set, gt) - gt.mean_reward(chosen)
}

// ---------------------------------------------------------------------------
// Hard instance
// ---------------------------------------------------------------------------

/// Two-armed block construction: decision sets drawn uniformly from the d/2
/// pairs {(e₁,e₂), (e₃,e₄), …}, reward vector with one ±Δ coordinate per
/// block, Δ = (1/8)√(d/T).
pub fn make_lower_bound_instance(
    d: usize,
    t_horizon: usize,
    rng: &mut impl Rng,
) -> Result<(DecisionSupport, GroundTruth), EnvError> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(EnvError::OddDimension(d));
    }
    if t_horizon == 0 {
        return Err(EnvError::ZeroHorizon);
    }
    let delta = 0.125 * (d as f64 / t_horizon as f64).sqrt();
    let mut sets = Vec::with_capacity(d / 2);
    for block in 0..d / 2 {
        let mut e_odd = vec![0.0; d];
        let mut e_even = vec![0.0; d];
        e_odd[2 * block] = 1.0;
        e_even[2 * block + 1] = 1.0;
        sets.push(vec![e_odd, e_even]);
    }
    let mut theta = vec![0.0; d];
    for block in 0..d / 2 {
        let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
        theta[2 * block] = sign * delta;
    }
    let support = DecisionSupport::uniform(sets)?;
    let gt = GroundTruth::new(theta, 0.1, true)?;
    Ok((support, gt))
}

// ---------------------------------------------------------------------------
// Regret ledger
// ---------------------------------------------------------------------------

/// Realized (non-expectation) regret, recorded per agent per round.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RegretLedger {
    /// `inst[agent][idx]` in round order.
    inst: Vec<Vec<f64>>,
    cum_per_agent: Vec<f64>,
    cum_total: f64,
}

impl RegretLedger {
    pub fn new(n_agents: usize) -> Self {
        Self {
            inst: vec![Vec::new(); n_agents],
            cum_per_agent: vec![0.0; n_agents],
            cum_total: 0.0,
        }
    }

    pub fn record(&mut self, agent: usize, r: f64) {
        debug_assert!(r >= -1e-9, "instantaneous regret must be nonnegative");
        let r = r.max(0.0);
        self.inst[agent].push(r);
        self.cum_per_agent[agent] += r;
        self.cum_total += r;
    }

    pub fn n_agents(&self) -> usize {
        self.inst.len()
    }

    pub fn cumulative_total(&self) -> f64 {
        self.cum_total
    }

    pub fn cumulative_per_agent(&self) -> &[f64] {
        &self.cum_per_agent
    }

    pub fn instantaneous(&self, agent: usize) -> &[f64] {
        &self.inst[agent]
    }

    /// Total cumulative regret over all agents after each round (1-indexed by
    /// position). Agents may have recorded different round counts only before
    /// a run completes; this assumes the rectangular, completed case.
    pub fn cumulative_total_by_round(&self) -> Vec<f64> {
        let rounds = self.inst.iter().map(|v| v.len()).max().unwrap_or(0);
        let mut out = Vec::with_capacity(rounds);
        let mut acc = 0.0;
        for t in 0..rounds {
            for agent in &self.inst {
                if let Some(&r) = agent.get(t) {
                    acc += r;
                }
            }
            out.push(acc);
        }
        out
    }

    /// Drops all rounds past `t_max` (used when a grid overshoots the horizon).
    pub fn truncate(&mut self, t_max: usize) {
        for agent in 0..self.inst.len() {
            if self.inst[agent].len() > t_max {
                let dropped: f64 = self.inst[agent][t_max..].iter().sum();
                self.inst[agent].truncate(t_max);
                self.cum_per_agent[agent] -= dropped;
                self.cum_total -= dropped;
            }
        }
    }
}

/// Deterministic instance construction from a master seed: the hidden vector
/// and the support depend only on (seed, d, K, support size).
pub fn build_instance(
    seed: u64,
    d: usize,
    k: usize,
    support_size: usize,
    noise_sigma: f64,
    clip_rewards: bool,
) -> Result<(DecisionSupport, GroundTruth), EnvError> {
    let mut theta_rng = stream::substream(&[seed, domain::THETA, d as u64]);
    let gt = GroundTruth::random_unit(d, noise_sigma, clip_rewards, &mut theta_rng);
    let mut sup_rng = stream::substream(&[
        seed,
        domain::SUPPORT,
        d as u64,
        k as u64,
        support_size as u64,
    ]);
    let support = DecisionSupport::random_unit_support(d, k, support_size, &mut sup_rng)?;
    Ok((support, gt))
}
