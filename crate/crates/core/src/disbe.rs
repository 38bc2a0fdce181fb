//! Server-coordinated batch-elimination runner.
//!
//! Rounds are grouped into a doubling batch grid. Within a batch every agent
//! plays a frozen exploration policy on the arms that survive elimination
//! under all past confidence intervals. At each batch boundary the agents
//! upload one d-vector of reward-weighted features, the server broadcasts the
//! sum, and each agent rebuilds its Gram statistic from the *known* context
//! distribution rather than from realized features — that is what keeps the
//! upload at d scalars instead of d².
//!
//! Statistics use the regularizer λ = 5·ln(4dT/δ) and confidence radius
//! β = 6·√(ln(2KNT/δ)) + √λ. The quantized variant rounds uploads to a fixed
//! precision and widens the radius to 2β; the relaxed variant perturbs the
//! Gram matrix multiplicatively and widens the radius to
//! 6·√(ln(2KNT/δ)/(1−ε)) + 4√λ.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_math::{MathError, PsdMatrix};
use crate::environment::{
    dot, sample_decision_set, DecisionSupport, EnvError, GroundTruth, RegretLedger,
};
use crate::policies::{self, BatchPolicy, PolicyError, WeightedSet};
use crate::stream::{self, domain};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("grid undefined: N·T must exceed d (N·T = {nt}, d = {d})")]
    GridUndefined { nt: usize, d: usize },
    #[error("batch count must be 0 (auto) or at least 2, got {0}")]
    BadBatchCount(usize),
    #[error("grid infeasible: batch {batch} has nonpositive length")]
    InfeasibleGrid { batch: usize },
    #[error("expected exactly one message per agent: {0}")]
    BadMessages(String),
    #[error("eps_m = {eps} exceeds the admissible bound {limit} (batch length {t_m})")]
    InadmissibleEps { eps: f64, limit: f64, t_m: usize },
    #[error("graph must have at least 2 nodes for the serverless runner")]
    GraphTooSmall,
    #[error("|λ₂| = {0} is not in (0, 1); consensus acceleration undefined")]
    Lambda2OutOfRange(f64),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

// ---------------------------------------------------------------------------
// Constants of the method
// ---------------------------------------------------------------------------

/// λ = 5·ln(4dT/δ).
pub fn lambda_regularizer(d: usize, t: usize, delta: f64) -> f64 {
    5.0 * (4.0 * d as f64 * t as f64 / delta).ln()
}

/// β = 6·√(ln(2KNT/δ)) + √λ.
pub fn confidence_radius(k: usize, n: usize, t: usize, delta: f64, lambda: f64) -> f64 {
    6.0 * (2.0 * k as f64 * n as f64 * t as f64 / delta).ln().sqrt() + lambda.sqrt()
}

/// Default upload precision for the quantized variant: β/(N√(dT)).
pub fn default_eps0(beta: f64, n: usize, d: usize, t: usize) -> f64 {
    beta / (n as f64 * (d as f64 * t as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Batch grid
// ---------------------------------------------------------------------------

/// The doubling batch grid: lengths T_1 = T_2 = a√(d/N) and
/// T_m = a√(T_{m-1}) thereafter, with a chosen so that T_M = T.
///
/// Lengths are floors of the exact real-valued recurrence, so the final
/// length lands within ±1 of T; boundaries may overshoot T and execution
/// truncates there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchGrid {
    pub batch_count: usize,
    pub a: f64,
    /// T_1 … T_M.
    pub lengths: Vec<usize>,
    /// 𝒯_0 = 0, 𝒯_m = 𝒯_{m-1} + T_m.
    pub boundaries: Vec<usize>,
}

impl BatchGrid {
    pub fn total_rounds(&self) -> usize {
        *self.boundaries.last().unwrap()
    }
}

/// M = ⌈1 + log₂(log₂(NT/d)/2 + 1)⌉, at least 2.
pub fn default_batch_count(n_agents: usize, t: usize, d: usize) -> Result<usize, RunError> {
    let nt = n_agents * t;
    if nt <= d {
        return Err(RunError::GridUndefined { nt, d });
    }
    let ratio = nt as f64 / d as f64;
    let m = 1.0 + (ratio.log2() / 2.0 + 1.0).log2();
    Ok((m.ceil() as usize).max(2))
}

pub(crate) fn real_lengths(a: f64, n_agents: usize, d: usize, m: usize) -> Vec<f64> {
    let mut lens = Vec::with_capacity(m);
    let t12 = a * (d as f64 / n_agents as f64).sqrt();
    lens.push(t12);
    if m >= 2 {
        lens.push(t12);
    }
    for _ in 2..m {
        let prev = *lens.last().unwrap();
        lens.push(a * prev.sqrt());
    }
    lens
}

pub fn batch_grid(
    n_agents: usize,
    t: usize,
    d: usize,
    m_batches: usize,
) -> Result<BatchGrid, RunError> {
    let m = if m_batches == 0 {
        default_batch_count(n_agents, t, d)?
    } else if m_batches == 1 {
        return Err(RunError::BadBatchCount(1));
    } else {
        m_batches
    };
    let nt = n_agents * t;
    if nt <= d {
        return Err(RunError::GridUndefined { nt, d });
    }
    let ratio = nt as f64 / d as f64;
    let exponent = 1.0 / (2.0 * ((1u64 << (m - 1)) as f64 - 1.0));
    let a = (t as f64).sqrt() * ratio.powf(exponent);
    let reals = real_lengths(a, n_agents, d, m);
    let mut lengths = Vec::with_capacity(m);
    let mut boundaries = vec![0usize];
    for (idx, &r) in reals.iter().enumerate() {
        let len = r.floor() as usize;
        if len == 0 {
            return Err(RunError::InfeasibleGrid { batch: idx + 1 });
        }
        lengths.push(len);
        boundaries.push(boundaries.last().unwrap() + len);
    }
    debug_assert!(
        *boundaries.last().unwrap() >= t,
        "grid must cover the horizon"
    );
    Ok(BatchGrid {
        batch_count: m,
        a,
        lengths,
        boundaries,
    })
}

// ---------------------------------------------------------------------------
// Per-agent statistics
// ---------------------------------------------------------------------------

/// One batch's frozen statistics: the Gram matrix, its inverse, the estimate,
/// and the confidence radius in force for that batch.
#[derive(Debug, Clone)]
pub struct StatsEntry {
    pub gram: PsdMatrix,
    pub gram_inv: PsdMatrix,
    pub theta: Vec<f64>,
    pub radius: f64,
}

/// History of (Λ_k, θ_k) pairs for one agent, index 0 being the prior
/// (Λ_0 = λI, θ_0 = 0).
#[derive(Debug, Clone)]
pub struct AgentStats {
    pub lambda: f64,
    pub beta: f64,
    pub entries: Vec<StatsEntry>,
}

impl AgentStats {
    pub fn new(d: usize, lambda: f64, beta: f64, initial_radius: f64) -> Self {
        let gram = PsdMatrix::scaled_identity(d, lambda);
        let gram_inv = PsdMatrix::scaled_identity(d, 1.0 / lambda);
        Self {
            lambda,
            beta,
            entries: vec![StatsEntry {
                gram,
                gram_inv,
                theta: vec![0.0; d],
                radius: initial_radius,
            }],
        }
    }
}

/// Arms surviving every past confidence interval: x stays iff for every k,
/// ⟨θ_k, x⟩ + r_k‖x‖_{Λ_k⁻¹} ≥ max_y ⟨θ_k, y⟩ − r_k‖y‖_{Λ_k⁻¹}.
///
/// The result can be empty only through floating-point pathology across
/// different k; callers fall back to the full set in that case.
pub fn eliminate(set: &[Vec<f64>], entries: &[StatsEntry]) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..set.len()).collect();
    for entry in entries {
        if alive.is_empty() {
            break;
        }
        let mut ucb = Vec::with_capacity(alive.len());
        let mut max_lcb = f64::NEG_INFINITY;
        for &a in &alive {
            let x = &set[a];
            let norm = entry.gram_inv.quadratic_form(x).unwrap_or(0.0).sqrt();
            let mean = dot(&entry.theta, x);
            ucb.push(mean + entry.radius * norm);
            max_lcb = max_lcb.max(mean - entry.radius * norm);
        }
        alive = alive
            .iter()
            .zip(&ucb)
            .filter(|(_, &u)| u >= max_lcb - 1e-12)
            .map(|(&a, _)| a)
            .collect();
    }
    alive
}

/// Λ = λI + (N·T_m/2)·esm.
pub fn compute_gram(
    lambda: f64,
    n_agents: usize,
    t_m: usize,
    esm: &PsdMatrix,
) -> Result<PsdMatrix, MathError> {
    let d = esm.dim();
    debug_assert!(esm.trace() <= 1.0 + 1e-6, "second moment trace must be ≤ 1");
    let scale = n_agents as f64 * t_m as f64 / 2.0;
    PsdMatrix::new(DMatrix::identity(d, d) * lambda + esm.matrix() * scale)
}

/// θ = Λ⁻¹ u, solved through a factorization with a conditioning guard.
pub fn update_theta(gram: &PsdMatrix, u_sum: &[f64]) -> Result<Vec<f64>, MathError> {
    gram.solve(u_sum)
}

// ---------------------------------------------------------------------------
// Messages, quantization, ledger
// ---------------------------------------------------------------------------

/// One agent's end-of-batch upload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchMessage {
    pub agent: usize,
    pub batch: usize,
    pub u: Vec<f64>,
    /// Bits used on the wire when the payload was quantized.
    pub bits: Option<u64>,
}

/// Rounds each entry to the nearest multiple of `eps0` (ties away from zero)
/// and prices the message at d·⌈log₂(2·range/eps0 + 1)⌉ bits, `range` being
/// the per-entry magnitude bound.
pub fn quantize_message(u: &[f64], eps0: f64, range: f64) -> (Vec<f64>, u64) {
    assert!(eps0 > 0.0, "quantization step must be positive");
    let q: Vec<f64> = u.iter().map(|&v| (v / eps0).round() * eps0).collect();
    let levels = 2.0 * range / eps0 + 1.0;
    let bits = u.len() as u64 * (levels.log2().ceil() as u64);
    (q, bits)
}

/// Which transmissions count toward `scalars_sent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommConvention {
    /// Agent-sent scalars only (uploads, gossip).
    #[default]
    UploadOnly,
    /// Uploads plus server broadcasts.
    UploadBroadcast,
}

/// Ground truth for communication cost: every scalar and bit that crossed a
/// link, plus a per-agent breakdown of agent-sent scalars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommLedger {
    pub convention: CommConvention,
    /// Scalars sent by agents (uploads and gossip messages).
    pub agent_scalars: u64,
    /// Scalars broadcast by the server back to agents.
    pub broadcast_scalars: u64,
    pub bits_sent: u64,
    pub rounds_with_communication: u64,
    pub per_agent_scalars: Vec<u64>,
}

impl CommLedger {
    pub fn new(n_agents: usize, convention: CommConvention) -> Self {
        Self {
            convention,
            agent_scalars: 0,
            broadcast_scalars: 0,
            bits_sent: 0,
            rounds_with_communication: 0,
            per_agent_scalars: vec![0; n_agents],
        }
    }

    pub fn record_upload(&mut self, agent: usize, scalars: u64) {
        self.agent_scalars += scalars;
        self.per_agent_scalars[agent] += scalars;
    }

    pub fn record_broadcast(&mut self, scalars: u64) {
        self.broadcast_scalars += scalars;
    }

    pub fn record_bits(&mut self, bits: u64) {
        self.bits_sent += bits;
    }

    /// Total under the configured convention.
    pub fn scalars_sent(&self) -> u64 {
        match self.convention {
            CommConvention::UploadOnly => self.agent_scalars,
            CommConvention::UploadBroadcast => self.agent_scalars + self.broadcast_scalars,
        }
    }
}

/// Sums the per-agent uploads, charging d scalars per upload and d per
/// broadcast per agent to the ledger.
pub fn server_aggregate(
    messages: &[BatchMessage],
    ledger: &mut CommLedger,
) -> Result<Vec<f64>, RunError> {
    let n = ledger.per_agent_scalars.len();
    if messages.len() != n {
        return Err(RunError::BadMessages(format!(
            "got {} messages for {} agents",
            messages.len(),
            n
        )));
    }
    let mut seen = vec![false; n];
    let d = messages[0].u.len();
    let mut sum = vec![0.0; d];
    let mut ordered: Vec<&BatchMessage> = messages.iter().collect();
    ordered.sort_by_key(|m| m.agent);
    for msg in ordered {
        if msg.agent >= n || seen[msg.agent] {
            return Err(RunError::BadMessages(format!(
                "duplicate or out-of-range agent {}",
                msg.agent
            )));
        }
        seen[msg.agent] = true;
        for (s, &v) in sum.iter_mut().zip(&msg.u) {
            *s += v;
        }
        ledger.record_upload(msg.agent, d as u64);
        if let Some(bits) = msg.bits {
            ledger.record_bits(bits);
        }
    }
    for _ in 0..n {
        ledger.record_broadcast(d as u64);
    }
    ledger.rounds_with_communication += 1;
    Ok(sum)
}

/// Multiplicative spectral perturbation of a Gram estimate plus the enlarged
/// radius β_m = 6√(ln(2KNT/δ)/(1−ε)) + 4√λ. Requires ε ≤ √(λ/(N·T_m)).
#[allow(clippy::too_many_arguments)]
pub fn relaxed_confidence(
    gram: &PsdMatrix,
    eps_m: f64,
    k: usize,
    n: usize,
    t: usize,
    delta: f64,
    lambda: f64,
    t_m: usize,
    rng: &mut impl Rng,
) -> Result<(PsdMatrix, f64), RunError> {
    let limit = (lambda / (n as f64 * t_m as f64)).sqrt();
    if !(0.0..1.0).contains(&eps_m) || eps_m > limit {
        return Err(RunError::InadmissibleEps {
            eps: eps_m,
            limit,
            t_m,
        });
    }
    let radius = 6.0 * ((2.0 * k as f64 * n as f64 * t as f64 / delta).ln() / (1.0 - eps_m)).sqrt()
        + 4.0 * lambda.sqrt();
    if eps_m == 0.0 {
        return Ok((gram.clone(), radius));
    }
    let d = gram.dim();
    // Λ̃ = Λ^{1/2} (I + E) Λ^{1/2} with ‖E‖ ≤ ε keeps the spectral sandwich
    // (1-ε)Λ ⪯ Λ̃ ⪯ (1+ε)Λ.
    let eig = nalgebra::SymmetricEigen::new(gram.matrix().clone());
    let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    let half = &eig.eigenvectors
        * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sqrt_vals.clone()))
        * eig.eigenvectors.transpose();
    let gauss = DMatrix::from_fn(d, d, |_, _| {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        z
    });
    let qr = gauss.qr();
    let q = qr.q();
    let scales: Vec<f64> = (0..d)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * eps_m)
        .collect();
    let e = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales)) * q.transpose();
    let perturbed = &half * (DMatrix::identity(d, d) + e) * &half;
    Ok((PsdMatrix::new(perturbed)?, radius))
}

// ---------------------------------------------------------------------------
// Run configuration and output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Exact,
    Quantized {
        #[serde(default)]
        eps0: Option<f64>,
    },
    Relaxed {
        eps_m: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_agents: usize,
    pub d: usize,
    pub k_arms: usize,
    pub horizon: usize,
    pub delta: f64,
    pub seed: u64,
    pub support_size: usize,
    pub noise_sigma: f64,
    pub clip_rewards: bool,
    pub variant: Variant,
    /// 0 selects the default batch count.
    pub m_batches: usize,
    pub comm_convention: CommConvention,
}

impl RunConfig {
    pub fn new(n_agents: usize, d: usize, k_arms: usize, horizon: usize, seed: u64) -> Self {
        Self {
            n_agents,
            d,
            k_arms,
            horizon,
            delta: 0.01,
            seed,
            support_size: 100,
            noise_sigma: 0.1,
            clip_rewards: true,
            variant: Variant::Exact,
            m_batches: 0,
            comm_convention: CommConvention::UploadOnly,
        }
    }
}

/// Cumulative communication totals at a batch boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommCheckpoint {
    pub batch: usize,
    pub t_end: usize,
    pub scalars: u64,
    pub bits: u64,
}

/// Consensus bookkeeping for one serverless batch: the true uploads and each
/// agent's estimate of their sum.
#[derive(Debug, Clone)]
pub struct BatchConsensus {
    pub batch: usize,
    pub u_by_agent: Vec<Vec<f64>>,
    pub estimate_by_agent: Vec<Vec<f64>>,
}

/// One recorded gossip iterate entry (debugging aid, off by default).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GossipStepRecord {
    pub batch: usize,
    pub step: usize,
    pub agent: usize,
    pub coord: usize,
    pub value: f64,
}

/// CSV form of a gossip trace: `batch,step,agent,coord,value`.
pub fn gossip_trace_csv(rows: &[GossipStepRecord]) -> String {
    let mut out = String::from("batch,step,agent,coord,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.batch, r.step, r.agent, r.coord, r.value
        ));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub anomalies: Vec<String>,
    pub batch_comm: Vec<CommCheckpoint>,
    /// (batch, agent, λ-deviation of the policy in force) for batches ≥ 2.
    pub lambda_deviations: Vec<(usize, usize, f64)>,
    /// Rounds in which the drawn set's true best arm was not in the survivor
    /// set (instrumentation; the algorithm cannot observe this).
    pub best_arm_eliminated_rounds: u64,
    /// Serverless runs only.
    pub consensus: Vec<BatchConsensus>,
    /// Per-step gossip iterates; populated only when the run asks for it.
    pub gossip_rows: Vec<GossipStepRecord>,
}

pub struct RunOutput {
    pub grid: BatchGrid,
    pub regret: RegretLedger,
    pub comm: CommLedger,
    pub trace: RunTrace,
    pub stats: Vec<AgentStats>,
}

impl RunOutput {
    /// Full per-round trace in CSV form:
    /// `t, agent, inst_regret, cum_regret_total, comm_scalars, comm_bits`.
    /// Communication columns are cumulative totals as of the end of round t.
    pub fn per_round_csv(&self) -> String {
        let mut out = String::from("t,agent,inst_regret,cum_regret_total,comm_scalars,comm_bits\n");
        let cum = self.regret.cumulative_total_by_round();
        let rounds = cum.len();
        let mut comm_idx = 0usize;
        let (mut scalars, mut bits) = (0u64, 0u64);
        for t in 1..=rounds {
            while comm_idx < self.trace.batch_comm.len()
                && self.trace.batch_comm[comm_idx].t_end <= t
            {
                scalars = self.trace.batch_comm[comm_idx].scalars;
                bits = self.trace.batch_comm[comm_idx].bits;
                comm_idx += 1;
            }
            for agent in 0..self.regret.n_agents() {
                let inst = self
                    .regret
                    .instantaneous(agent)
                    .get(t - 1)
                    .copied()
                    .unwrap_or(0.0);
                out.push_str(&format!(
                    "{t},{agent},{inst},{},{scalars},{bits}\n",
                    cum[t - 1]
                ));
            }
        }
        out
    }

    /// Machine-readable run summary.
    pub fn summary_json(&self) -> serde_json::Value {
        let devs: Vec<f64> = self.trace.lambda_deviations.iter().map(|d| d.2).collect();
        let dev_max = devs.iter().cloned().fold(f64::NAN, f64::max);
        serde_json::json!({
            "grid": {
                "batch_count": self.grid.batch_count,
                "lengths": self.grid.lengths,
                "boundaries": self.grid.boundaries,
            },
            "regret": {
                "total": self.regret.cumulative_total(),
                "per_agent": self.regret.cumulative_per_agent(),
            },
            "communication": {
                "scalars_sent": self.comm.scalars_sent(),
                "agent_scalars": self.comm.agent_scalars,
                "broadcast_scalars": self.comm.broadcast_scalars,
                "bits_sent": self.comm.bits_sent,
                "rounds_with_communication": self.comm.rounds_with_communication,
                "per_agent": self.comm.per_agent_scalars,
            },
            "lambda_deviation_max": dev_max,
            "best_arm_eliminated_rounds": self.trace.best_arm_eliminated_rounds,
            "anomalies": self.trace.anomalies,
        })
    }
}

// ---------------------------------------------------------------------------
// Shared per-batch machinery
// ---------------------------------------------------------------------------

pub(crate) struct BatchCache {
    /// Survivor arm indices per support entry.
    pub survivors: Vec<Vec<usize>>,
    /// Survivor arms materialized as sets.
    pub sets: Vec<Vec<Vec<f64>>>,
    /// Action marginal per entry, aligned with `survivors`.
    pub marginals: Vec<Vec<f64>>,
    /// Whether the entry's true best arm survived.
    pub best_alive: Vec<bool>,
    pub esm: PsdMatrix,
}

#[allow(clippy::needless_range_loop)]
pub(crate) fn build_batch_cache(
    support: &DecisionSupport,
    entries: &[StatsEntry],
    policy: &BatchPolicy,
    best_arms: &[Vec<usize>],
    anomalies: &mut Vec<String>,
    label: &str,
) -> Result<BatchCache, RunError> {
    let d = support.d;
    let mut survivors = Vec::with_capacity(support.len());
    let mut sets = Vec::with_capacity(support.len());
    let mut marginals = Vec::with_capacity(support.len());
    let mut best_alive = Vec::with_capacity(support.len());
    let mut esm_acc = DMatrix::zeros(d, d);
    for j in 0..support.len() {
        let full = support.set(j);
        let mut alive = eliminate(full, entries);
        if alive.is_empty() {
            anomalies.push(format!(
                "{label}: support entry {j} lost every arm; using the full set"
            ));
            alive = (0..full.len()).collect();
        }
        let set: Vec<Vec<f64>> = alive.iter().map(|&a| full[a].clone()).collect();
        let marginal = match policy.action_marginal(&set) {
            Ok(m) => m,
            Err(e) => {
                anomalies.push(format!(
                    "{label}: marginal failed on entry {j} ({e}); using uniform"
                ));
                vec![1.0 / set.len() as f64; set.len()]
            }
        };
        esm_acc += policies::weighted_second_moment(&set, &marginal) * support.weights[j];
        best_alive.push(best_arms[j].iter().any(|b| alive.contains(b)));
        survivors.push(alive);
        sets.push(set);
        marginals.push(marginal);
    }
    Ok(BatchCache {
        survivors,
        sets,
        marginals,
        best_alive,
        esm: PsdMatrix::new(esm_acc)?,
    })
}

pub(crate) fn deviation_from_cache(
    cache: &BatchCache,
    weights: &[f64],
    lambda_prime: f64,
) -> Result<f64, RunError> {
    let d = cache.esm.dim();
    let a = PsdMatrix::new(cache.esm.matrix() + DMatrix::identity(d, d) * lambda_prime)?;
    let a_inv = a.inverse()?;
    let mut total = 0.0;
    for (set, &w) in cache.sets.iter().zip(weights) {
        let worst = set
            .iter()
            .map(|x| a_inv.quadratic_form(x).unwrap_or(0.0).sqrt())
            .fold(0.0f64, f64::max);
        total += w * worst;
    }
    Ok(total)
}

pub(crate) fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub(crate) fn best_arm_table(
    support: &DecisionSupport,
    env: &GroundTruth,
) -> (Vec<f64>, Vec<Vec<usize>>) {
    let mut best_vals = Vec::with_capacity(support.len());
    let mut best_arms = Vec::with_capacity(support.len());
    for j in 0..support.len() {
        let vals: Vec<f64> = support.set(j).iter().map(|x| env.mean_reward(x)).collect();
        let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        best_vals.push(best);
        best_arms.push(
            vals.iter()
                .enumerate()
                .filter(|(_, &v)| v == best)
                .map(|(i, _)| i)
                .collect(),
        );
    }
    (best_vals, best_arms)
}

/// Rebuilds the exploration policy from the second half's realized survivor
/// sets; falls back to the pure G-optimal policy when the pipeline fails.
#[allow(clippy::too_many_arguments)]
pub(crate) fn refresh_policy(
    support: &DecisionSupport,
    stats_entries: &[StatsEntry],
    second_half_counts: &[usize],
    lambda_prime: f64,
    k_arms: usize,
    anomalies: &mut Vec<String>,
    label: &str,
) -> BatchPolicy {
    if !(lambda_prime > 0.0 && lambda_prime < 1.0) {
        anomalies.push(format!(
            "{label}: exploration regularizer λ' = {lambda_prime:.6} outside (0, 1)"
        ));
    }
    let mut filtered: Vec<(Vec<Vec<f64>>, usize)> = Vec::new();
    for (j, &count) in second_half_counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let full = support.set(j);
        let mut alive = eliminate(full, stats_entries);
        if alive.is_empty() {
            anomalies.push(format!(
                "{label}: policy-build entry {j} lost every arm; using the full set"
            ));
            alive = (0..full.len()).collect();
        }
        filtered.push((alive.iter().map(|&a| full[a].clone()).collect(), count));
    }
    if filtered.is_empty() {
        anomalies.push(format!("{label}: no second-half draws; keeping G-optimal"));
        return BatchPolicy::GOptimal;
    }
    let entries: Vec<WeightedSet<'_>> = filtered
        .iter()
        .map(|(set, count)| WeightedSet {
            set: set.as_slice(),
            count: *count,
        })
        .collect();
    match policies::build_exploration_policy_weighted(lambda_prime, &entries, k_arms) {
        Ok((policy, _)) => BatchPolicy::Mixed(policy),
        Err(e) => {
            anomalies.push(format!("{label}: exploration policy fallback ({e})"));
            BatchPolicy::GOptimal
        }
    }
}

// ---------------------------------------------------------------------------
// The runner
// ---------------------------------------------------------------------------

fn validate_config(
    env: &GroundTruth,
    support: &DecisionSupport,
    cfg: &RunConfig,
) -> Result<(), RunError> {
    if env.dim() != cfg.d || support.d != cfg.d {
        return Err(RunError::Config(format!(
            "dimension mismatch: config d = {}, env d = {}, support d = {}",
            cfg.d,
            env.dim(),
            support.d
        )));
    }
    if support.k != cfg.k_arms {
        return Err(RunError::Config(format!(
            "arm-count mismatch: config K = {}, support K = {}",
            cfg.k_arms, support.k
        )));
    }
    if cfg.n_agents == 0 || cfg.horizon == 0 {
        return Err(RunError::Config(
            "need at least one agent and one round".into(),
        ));
    }
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(RunError::Config(format!(
            "delta must be in (0,1), got {}",
            cfg.delta
        )));
    }
    match cfg.variant {
        Variant::Relaxed { eps_m } if !(0.0..1.0).contains(&eps_m) => {
            return Err(RunError::Config(format!(
                "eps_m must be in [0,1), got {eps_m}"
            )));
        }
        Variant::Quantized { eps0: Some(step) } if step <= 0.0 => {
            return Err(RunError::Config(format!(
                "quantization step must be positive, got {step}"
            )));
        }
        _ => {}
    }
    Ok(())
}

pub fn run_disbe(
    env: &GroundTruth,
    support: &DecisionSupport,
    cfg: &RunConfig,
) -> Result<RunOutput, RunError> {
    validate_config(env, support, cfg)?;
    let n = cfg.n_agents;
    let d = cfg.d;
    let t_horizon = cfg.horizon;
    let grid = batch_grid(n, t_horizon, d, cfg.m_batches)?;
    let m_total = grid.batch_count;

    let lambda = lambda_regularizer(d, t_horizon, cfg.delta);
    let beta = confidence_radius(cfg.k_arms, n, t_horizon, cfg.delta, lambda);
    let base_radius = match cfg.variant {
        Variant::Exact => beta,
        Variant::Quantized { .. } => 2.0 * beta,
        Variant::Relaxed { .. } => {
            6.0 * (2.0 * cfg.k_arms as f64 * n as f64 * t_horizon as f64 / cfg.delta)
                .ln()
                .sqrt()
                + 4.0 * lambda.sqrt()
        }
    };
    let eps0 = match cfg.variant {
        Variant::Quantized { eps0 } => Some(eps0.unwrap_or(default_eps0(beta, n, d, t_horizon))),
        _ => None,
    };

    let mut stats: Vec<AgentStats> = (0..n)
        .map(|_| AgentStats::new(d, lambda, beta, base_radius))
        .collect();
    let mut policies_now: Vec<BatchPolicy> = vec![BatchPolicy::GOptimal; n];
    let mut ledger = CommLedger::new(n, cfg.comm_convention);
    let mut regret = RegretLedger::new(n);
    let mut trace = RunTrace::default();
    let (best_vals, best_arms) = best_arm_table(support, env);

    for m in 1..=m_total {
        let t_m = grid.lengths[m - 1];
        let t_start = grid.boundaries[m - 1] + 1;
        let t_end = grid.boundaries[m].min(t_horizon);
        let first_half_end = grid.boundaries[m - 1] + t_m.div_ceil(2);

        // Per-agent play caches for this batch.
        let mut caches = Vec::with_capacity(n);
        for (i, st) in stats.iter().enumerate() {
            let cache = build_batch_cache(
                support,
                &st.entries,
                &policies_now[i],
                &best_arms,
                &mut trace.anomalies,
                &format!("batch {m} agent {i}"),
            )?;
            if m >= 2 {
                let t_prev = grid.lengths[m - 2];
                let lp = 2.0 * lambda / (n as f64 * t_prev as f64);
                if let Ok(dev) = deviation_from_cache(&cache, &support.weights, lp) {
                    trace.lambda_deviations.push((m, i, dev));
                }
            }
            caches.push(cache);
        }

        let mut uploads = vec![vec![0.0f64; d]; n];
        let mut second_half_counts = vec![vec![0usize; support.len()]; n];

        for t in t_start..=t_end {
            for i in 0..n {
                let mut rng = stream::play_stream(cfg.seed, i, t);
                let (j, full_set) = sample_decision_set(support, &mut rng);
                let cache = &caches[i];
                let local = categorical(&cache.marginals[j], &mut rng);
                let arm = cache.survivors[j][local];
                let x = &full_set[arm];
                let y = crate::environment::reward(x, env, &mut rng);
                regret.record(i, best_vals[j] - env.mean_reward(x));
                if !cache.best_alive[j] {
                    trace.best_arm_eliminated_rounds += 1;
                }
                if t <= first_half_end {
                    for (acc, &v) in uploads[i].iter_mut().zip(x) {
                        *acc += v * y;
                    }
                } else {
                    second_half_counts[i][j] += 1;
                }
            }
        }

        // Communication at the batch boundary.
        #[cfg(debug_assertions)]
        if cfg.clip_rewards {
            let bound = t_m.div_ceil(2) as f64 + 1e-9;
            for u in &uploads {
                debug_assert!(u.iter().all(|v| v.abs() <= bound));
            }
        }
        let messages: Vec<BatchMessage> = (0..n)
            .map(|i| match eps0 {
                Some(step) => {
                    let (q, bits) = quantize_message(&uploads[i], step, t_m as f64 / 2.0);
                    BatchMessage {
                        agent: i,
                        batch: m,
                        u: q,
                        bits: Some(bits),
                    }
                }
                None => BatchMessage {
                    agent: i,
                    batch: m,
                    u: uploads[i].clone(),
                    bits: None,
                },
            })
            .collect();
        let u_sum = server_aggregate(&messages, &mut ledger)?;
        trace.batch_comm.push(CommCheckpoint {
            batch: m,
            t_end,
            scalars: ledger.scalars_sent(),
            bits: ledger.bits_sent,
        });

        // Statistics refresh.
        for i in 0..n {
            let gram = compute_gram(lambda, n, t_m, &caches[i].esm)?;
            let (gram_eff, radius) = match cfg.variant {
                Variant::Relaxed { eps_m } => {
                    let limit = (lambda / (n as f64 * t_m as f64)).sqrt();
                    let eps_eff = if eps_m > limit {
                        trace.anomalies.push(format!(
                            "batch {m} agent {i}: eps_m {eps_m} clamped to admissible {limit:.6}"
                        ));
                        limit
                    } else {
                        eps_m
                    };
                    let mut rng =
                        stream::substream(&[cfg.seed, domain::PERTURB, m as u64, i as u64]);
                    relaxed_confidence(
                        &gram, eps_eff, cfg.k_arms, n, t_horizon, cfg.delta, lambda, t_m, &mut rng,
                    )?
                }
                _ => (gram, base_radius),
            };
            let (gram_final, gram_inv) = match gram_eff.inverse() {
                Ok(inv) => (gram_eff, inv),
                Err(e) => {
                    trace.anomalies.push(format!(
                        "batch {m} agent {i}: ill-conditioned Gram ({e}); falling back to λI"
                    ));
                    (
                        PsdMatrix::scaled_identity(d, lambda),
                        PsdMatrix::scaled_identity(d, 1.0 / lambda),
                    )
                }
            };
            let theta = update_theta(&gram_final, &u_sum)?;
            stats[i].entries.push(StatsEntry {
                gram: gram_final,
                gram_inv,
                theta,
                radius,
            });
        }

        // Policy refresh for the next batch.
        if m < m_total {
            let lambda_prime = 2.0 * lambda / (n as f64 * t_m as f64);
            for i in 0..n {
                policies_now[i] = refresh_policy(
                    support,
                    &stats[i].entries,
                    &second_half_counts[i],
                    lambda_prime,
                    cfg.k_arms,
                    &mut trace.anomalies,
                    &format!("batch {m} agent {i}"),
                );
            }
        }
    }

    Ok(RunOutput {
        grid,
        regret,
        comm: ledger,
        trace,
        stats,
    })
}
