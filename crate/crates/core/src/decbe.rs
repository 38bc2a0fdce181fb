//! Serverless batch-elimination runner over a communication graph.
//!
//! Instead of uploading to a server, each agent spreads its end-of-batch
//! vector through the network with a Chebyshev-accelerated running consensus:
//! after S neighbor-exchange rounds every agent holds N·[q_S(P)ν₀]_i per
//! coordinate, an approximation of the network-wide sum. The batch grid
//! reserves the final S rounds of every batch for mixing (arms are still
//! played during those rounds), statistics scale with T_m − S, and the
//! elimination radius is doubled to absorb the consensus error.

use nalgebra::DMatrix;

use crate::core_math::{build_communication_matrix, AgentGraph, CommMatrix, PsdMatrix, Scheme};
use crate::disbe::{
    self, batch_grid, best_arm_table, build_batch_cache, categorical, compute_gram,
    confidence_radius, lambda_regularizer, refresh_policy, update_theta, AgentStats,
    BatchConsensus, BatchGrid, CommCheckpoint, CommLedger, RunConfig, RunError, RunOutput,
    RunTrace, StatsEntry,
};
use crate::environment::{sample_decision_set, DecisionSupport, GroundTruth, RegretLedger};
use crate::policies::BatchPolicy;
use crate::stream;

// ---------------------------------------------------------------------------
// Mixing budget
// ---------------------------------------------------------------------------

/// Number of gossip rounds guaranteeing ‖N·q_S(P)ν₀ − 𝟙‖₂ ≤ ε for simplex ν₀.
#[derive(Debug, Clone, Copy)]
pub struct MixingBudget {
    pub s: usize,
    pub epsilon: f64,
    pub lambda2_abs: f64,
}

/// S = ⌈ln(2N/ε) / √(2·ln(1/|λ₂|))⌉ (natural logs), at least 1.
///
/// |λ₂| = 0 means one exchange already averages exactly, so S = 1; |λ₂| ≥ 1
/// is rejected (disconnected or periodic matrix).
pub fn mixing_rounds(
    n_agents: usize,
    epsilon: f64,
    lambda2_abs: f64,
) -> Result<MixingBudget, RunError> {
    if epsilon <= 0.0 {
        return Err(RunError::Config(format!(
            "mixing accuracy must be positive, got {epsilon}"
        )));
    }
    if !(0.0..1.0).contains(&lambda2_abs) {
        return Err(RunError::Lambda2OutOfRange(lambda2_abs));
    }
    if lambda2_abs == 0.0 {
        return Ok(MixingBudget {
            s: 1,
            epsilon,
            lambda2_abs,
        });
    }
    let s = ((2.0 * n_agents as f64 / epsilon).ln() / (2.0 * (1.0 / lambda2_abs).ln()).sqrt())
        .ceil()
        .max(1.0) as usize;
    Ok(MixingBudget {
        s,
        epsilon,
        lambda2_abs,
    })
}

// ---------------------------------------------------------------------------
// Chebyshev-accelerated consensus
// ---------------------------------------------------------------------------

/// State of the accelerated recursion on a stacked N×c iterate. After ℓ
/// exchange rounds the iterate equals q_ℓ(P)·ν₀ with
/// q_ℓ(P) = T_ℓ(P/|λ₂|)/T_ℓ(1/|λ₂|).
#[derive(Debug, Clone)]
pub struct ChebyshevState {
    ell: usize,
    weights: Vec<f64>,
    nu_now: DMatrix<f64>,
    nu_prev: DMatrix<f64>,
    lambda2_abs: f64,
}

impl ChebyshevState {
    /// Performs the first exchange (ν₁ = P·ν₀) and seeds the weight
    /// recursion w₀ = 1, w₁ = 1/|λ₂|.
    pub fn new(p: &CommMatrix, nu0: DMatrix<f64>) -> Result<Self, RunError> {
        if p.n() < 2 {
            return Err(RunError::GraphTooSmall);
        }
        let lambda2 = p.lambda2_abs();
        if lambda2 <= 0.0 || lambda2 >= 1.0 {
            return Err(RunError::Lambda2OutOfRange(lambda2));
        }
        let nu_now = p.apply_matrix(&nu0);
        Ok(Self {
            ell: 1,
            weights: vec![1.0, 1.0 / lambda2],
            nu_now,
            nu_prev: nu0,
            lambda2_abs: lambda2,
        })
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn current(&self) -> &DMatrix<f64> {
        &self.nu_now
    }

    /// One more exchange round: w_{ℓ+1} = 2w_ℓ/|λ₂| − w_{ℓ−1} and
    /// ν_{ℓ+1} = (2w_ℓ/(|λ₂|w_{ℓ+1}))·P·ν_ℓ − (w_{ℓ−1}/w_{ℓ+1})·ν_{ℓ−1}.
    pub fn step(&mut self, p: &CommMatrix) {
        let l2 = self.lambda2_abs;
        let w_l = self.weights[self.ell];
        let w_prev = self.weights[self.ell - 1];
        let w_next = 2.0 * w_l / l2 - w_prev;
        self.weights.push(w_next);
        let propagated = p.apply_matrix(&self.nu_now);
        let nu_next = propagated * (2.0 * w_l / (l2 * w_next)) - &self.nu_prev * (w_prev / w_next);
        self.nu_prev = std::mem::replace(&mut self.nu_now, nu_next);
        self.ell += 1;
    }
}

/// Runs d parallel consensus chains for `budget.s` exchange rounds and
/// returns each agent's estimate of Σ_j initials[j] (the consensus value
/// scaled by N). The ledger is charged d scalars per directed edge per round.
pub fn gossip_consensus(
    initials: &[Vec<f64>],
    p: &CommMatrix,
    budget: &MixingBudget,
    ledger: &mut CommLedger,
) -> Result<Vec<Vec<f64>>, RunError> {
    gossip_consensus_observed(initials, p, budget, ledger, |_, _| {})
}

/// `gossip_consensus` with a per-step observer receiving (step index,
/// current N×d iterate) after every exchange round.
pub fn gossip_consensus_observed(
    initials: &[Vec<f64>],
    p: &CommMatrix,
    budget: &MixingBudget,
    ledger: &mut CommLedger,
    mut observe: impl FnMut(usize, &DMatrix<f64>),
) -> Result<Vec<Vec<f64>>, RunError> {
    let n = p.n();
    if initials.len() != n {
        return Err(RunError::Config(format!(
            "got {} initial vectors for {} agents",
            initials.len(),
            n
        )));
    }
    let d = initials[0].len();
    let nu0 = DMatrix::from_fn(n, d, |i, j| initials[i][j]);

    let charge_round = |ledger: &mut CommLedger| {
        for (i, &deg) in p.degrees().iter().enumerate() {
            ledger.record_upload(i, (deg * d) as u64);
        }
        ledger.rounds_with_communication += 1;
    };

    let final_nu = if budget.s == 1 {
        charge_round(ledger);
        let nu = p.apply_matrix(&nu0);
        observe(1, &nu);
        nu
    } else {
        let mut state = ChebyshevState::new(p, nu0)?;
        charge_round(ledger);
        observe(1, state.current());
        for step in 2..=budget.s {
            state.step(p);
            charge_round(ledger);
            observe(step, state.current());
        }
        state.current().clone()
    };

    let scale = n as f64;
    Ok((0..n)
        .map(|i| (0..d).map(|j| scale * final_nu[(i, j)]).collect())
        .collect())
}

// ---------------------------------------------------------------------------
// Modified batch grid
// ---------------------------------------------------------------------------

/// Grid with every batch stretched by the mixing budget:
/// T_1 = T_2 = a√(d/N) + S and T_m = ⌊a√(T_{m−1} − S)⌋ + S, with
/// a = √(T+S)·(N(T+S)/d)^{1/(2(2^{M−1}−1))}. With S = 0 this is exactly the
/// server grid.
pub fn decbe_grid(
    n_agents: usize,
    t: usize,
    d: usize,
    m_batches: usize,
    s_rounds: usize,
) -> Result<BatchGrid, RunError> {
    if s_rounds == 0 {
        return batch_grid(n_agents, t, d, m_batches);
    }
    let t_eff = t + s_rounds;
    let m = if m_batches == 0 {
        disbe::default_batch_count(n_agents, t_eff, d)?
    } else if m_batches == 1 {
        return Err(RunError::BadBatchCount(1));
    } else {
        m_batches
    };
    let nt = n_agents * t_eff;
    if nt <= d {
        return Err(RunError::GridUndefined { nt, d });
    }
    let ratio = nt as f64 / d as f64;
    let exponent = 1.0 / (2.0 * ((1u64 << (m - 1)) as f64 - 1.0));
    let a = (t_eff as f64).sqrt() * ratio.powf(exponent);
    let reals = disbe::real_lengths(a, n_agents, d, m);
    let mut lengths = Vec::with_capacity(m);
    let mut boundaries = vec![0usize];
    for (idx, &r) in reals.iter().enumerate() {
        let len = r.floor() as usize;
        if len == 0 {
            return Err(RunError::InfeasibleGrid { batch: idx + 1 });
        }
        lengths.push(len + s_rounds);
        boundaries.push(boundaries.last().unwrap() + len + s_rounds);
    }
    Ok(BatchGrid {
        batch_count: m,
        a,
        lengths,
        boundaries,
    })
}

// ---------------------------------------------------------------------------
// The runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DecbeConfig {
    pub base: RunConfig,
    pub scheme: Scheme,
    /// Consensus accuracy target; defaults to β/√d.
    pub mixing_epsilon: Option<f64>,
    /// Overrides the computed mixing budget when set.
    pub s_rounds: Option<usize>,
    /// Record every gossip iterate into the trace (debugging; large).
    pub dump_gossip: bool,
}

impl DecbeConfig {
    pub fn new(base: RunConfig) -> Self {
        Self {
            base,
            scheme: Scheme::Metropolis,
            mixing_epsilon: None,
            s_rounds: None,
            dump_gossip: false,
        }
    }
}

pub fn run_decbe(
    env: &GroundTruth,
    support: &DecisionSupport,
    graph: &AgentGraph,
    cfg: &DecbeConfig,
) -> Result<RunOutput, RunError> {
    let base = &cfg.base;
    if graph.n() < 2 {
        return Err(RunError::GraphTooSmall);
    }
    if graph.n() != base.n_agents {
        return Err(RunError::Config(format!(
            "graph has {} nodes but config expects {} agents",
            graph.n(),
            base.n_agents
        )));
    }
    let n = base.n_agents;
    let d = base.d;
    let t_horizon = base.horizon;

    let p = build_communication_matrix(graph, cfg.scheme)?;
    let lambda = lambda_regularizer(d, t_horizon, base.delta);
    let beta = confidence_radius(base.k_arms, n, t_horizon, base.delta, lambda);
    let gamma = 2.0 * beta; // = 12√(ln(2KNT/δ)) + 2√λ

    let epsilon = cfg.mixing_epsilon.unwrap_or(beta / (d as f64).sqrt());
    let budget = match cfg.s_rounds {
        Some(s) => MixingBudget {
            s: s.max(1),
            epsilon,
            lambda2_abs: p.lambda2_abs(),
        },
        None => mixing_rounds(n, epsilon, p.lambda2_abs())?,
    };
    let s_rounds = budget.s;
    let grid = decbe_grid(n, t_horizon, d, base.m_batches, s_rounds)?;
    let m_total = grid.batch_count;

    let mut stats: Vec<AgentStats> = (0..n)
        .map(|_| AgentStats::new(d, lambda, beta, gamma))
        .collect();
    let mut policies_now: Vec<BatchPolicy> = vec![BatchPolicy::GOptimal; n];
    let mut ledger = CommLedger::new(n, base.comm_convention);
    let mut regret = RegretLedger::new(n);
    let mut trace = RunTrace::default();
    let (best_vals, best_arms) = best_arm_table(support, env);

    for m in 1..=m_total {
        let t_m = grid.lengths[m - 1];
        let t_eff = t_m - s_rounds; // guaranteed ≥ 1 by the grid
        let t_start = grid.boundaries[m - 1] + 1;
        let t_end = grid.boundaries[m];
        let first_half_end = grid.boundaries[m - 1] + t_eff.div_ceil(2);

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
                let t_prev_eff = grid.lengths[m - 2] - s_rounds;
                let lp = 2.0 * lambda / (n as f64 * t_prev_eff as f64);
                if let Ok(dev) = disbe::deviation_from_cache(&cache, &support.weights, lp) {
                    trace.lambda_deviations.push((m, i, dev));
                }
            }
            caches.push(cache);
        }

        let mut uploads = vec![vec![0.0f64; d]; n];
        let mut second_half_counts = vec![vec![0usize; support.len()]; n];

        // Arms are played on every round of the batch, including the final S
        // mixing rounds.
        for t in t_start..=t_end {
            for i in 0..n {
                let mut rng = stream::play_stream(base.seed, i, t);
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

        // The S mixing rounds, folded into one call: message content was
        // frozen when the first half ended.
        let mut gossip_rows = Vec::new();
        let estimates =
            gossip_consensus_observed(&uploads, &p, &budget, &mut ledger, |step, iterate| {
                if cfg.dump_gossip {
                    for agent in 0..n {
                        for coord in 0..d {
                            gossip_rows.push(crate::disbe::GossipStepRecord {
                                batch: m,
                                step,
                                agent,
                                coord,
                                value: iterate[(agent, coord)],
                            });
                        }
                    }
                }
            })?;
        trace.gossip_rows.extend(gossip_rows);
        trace.batch_comm.push(CommCheckpoint {
            batch: m,
            t_end: t_end.min(t_horizon),
            scalars: ledger.scalars_sent(),
            bits: ledger.bits_sent,
        });
        trace.consensus.push(BatchConsensus {
            batch: m,
            u_by_agent: uploads.clone(),
            estimate_by_agent: estimates.clone(),
        });

        for i in 0..n {
            let gram = compute_gram(lambda, n, t_eff, &caches[i].esm)?;
            let (gram_final, gram_inv) = match gram.inverse() {
                Ok(inv) => (gram, inv),
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
            let theta = update_theta(&gram_final, &estimates[i])?;
            stats[i].entries.push(StatsEntry {
                gram: gram_final,
                gram_inv,
                theta,
                radius: gamma,
            });
        }

        if m < m_total {
            let lambda_prime = 2.0 * lambda / (n as f64 * t_eff as f64);
            for i in 0..n {
                policies_now[i] = refresh_policy(
                    support,
                    &stats[i].entries,
                    &second_half_counts[i],
                    lambda_prime,
                    base.k_arms,
                    &mut trace.anomalies,
                    &format!("batch {m} agent {i}"),
                );
            }
        }
    }

    // The grid covers at least T rounds and may overshoot; report exactly T.
    regret.truncate(t_horizon);

    Ok(RunOutput {
        grid,
        regret,
        comm: ledger,
        trace,
        stats,
    })
}
