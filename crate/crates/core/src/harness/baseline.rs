//! Synchronous event-triggered LinUCB baseline.
//!
//! Each agent runs ridge LinUCB on its own observations. Whenever any agent's
//! local log-det has grown by more than `sync_threshold` since the last
//! synchronization, every agent ships its (d² + d) accumulated statistics and
//! all agents continue from the pooled state. This is comparison plumbing:
//! per-sync cost is quadratic in d, so its communication grows superlinearly
//! with the dimension where the batch-elimination runner stays linear.

use nalgebra::{DMatrix, DVector};

use crate::core_math::RankOneInverse;
use crate::disbe::{
    batch_grid, BatchGrid, CommCheckpoint, CommLedger, RunConfig, RunError, RunOutput, RunTrace,
};
use crate::environment::{sample_decision_set, DecisionSupport, GroundTruth, RegretLedger};
use crate::stream;

struct AgentState {
    model: RankOneInverse,
    b: DVector<f64>,
    delta_v: DMatrix<f64>,
    delta_b: DVector<f64>,
    log_det_at_sync: f64,
}

const RIDGE: f64 = 1.0;

pub fn dislinucb_baseline(
    env: &GroundTruth,
    support: &DecisionSupport,
    cfg: &RunConfig,
    sync_threshold: f64,
) -> Result<RunOutput, RunError> {
    let n = cfg.n_agents;
    let d = cfg.d;
    let t_horizon = cfg.horizon;
    if env.dim() != d || support.d != d {
        return Err(RunError::Config("dimension mismatch".into()));
    }

    let mut shared_v = DMatrix::identity(d, d) * RIDGE;
    let mut shared_b = DVector::zeros(d);
    let mut agents: Vec<AgentState> = (0..n)
        .map(|_| AgentState {
            model: RankOneInverse::new(d, RIDGE),
            b: DVector::zeros(d),
            delta_v: DMatrix::zeros(d, d),
            delta_b: DVector::zeros(d),
            log_det_at_sync: (d as f64) * RIDGE.ln(),
        })
        .collect();

    let mut ledger = CommLedger::new(n, cfg.comm_convention);
    let mut regret = RegretLedger::new(n);
    let mut trace = RunTrace::default();
    let (best_vals, _) = crate::disbe::best_arm_table(support, env);

    for t in 1..=t_horizon {
        for (i, state) in agents.iter_mut().enumerate() {
            let mut rng = stream::play_stream(cfg.seed, i, t);
            let (j, set) = sample_decision_set(support, &mut rng);
            // OFUL-style radius; constants are conventional, not tuned.
            let alpha = RIDGE.sqrt()
                + (2.0 * (1.0 / cfg.delta).ln()
                    + d as f64 * (1.0 + t as f64 / (RIDGE * d as f64)).ln())
                .sqrt();
            let theta = {
                let sol = state.model.solve(state.b.as_slice())?;
                DVector::from_vec(sol)
            };
            let mut best_arm = 0usize;
            let mut best_ucb = f64::NEG_INFINITY;
            for (a, x) in set.iter().enumerate() {
                let xv = DVector::from_column_slice(x);
                let width = state.model.quadratic_form_inv(x).sqrt();
                let ucb = theta.dot(&xv) + alpha * width;
                if ucb > best_ucb {
                    best_ucb = ucb;
                    best_arm = a;
                }
            }
            let x = &set[best_arm];
            let y = crate::environment::reward(x, env, &mut rng);
            regret.record(i, best_vals[j] - env.mean_reward(x));

            let xv = DVector::from_column_slice(x);
            state.model.update(x);
            state.b += &xv * y;
            state.delta_v += &xv * xv.transpose();
            state.delta_b += &xv * y;
        }

        let should_sync = sync_threshold.is_finite()
            && agents
                .iter()
                .any(|s| s.model.log_det() - s.log_det_at_sync > sync_threshold);
        if should_sync {
            for state in agents.iter() {
                shared_v += &state.delta_v;
                shared_b += &state.delta_b;
            }
            for (i, state) in agents.iter_mut().enumerate() {
                state.model = RankOneInverse::from_matrix(shared_v.clone())?;
                state.b = shared_b.clone();
                state.delta_v.fill(0.0);
                state.delta_b.fill(0.0);
                state.log_det_at_sync = state.model.log_det();
                ledger.record_upload(i, (d * d + d) as u64);
            }
            ledger.rounds_with_communication += 1;
            trace.batch_comm.push(CommCheckpoint {
                batch: ledger.rounds_with_communication as usize,
                t_end: t,
                scalars: ledger.scalars_sent(),
                bits: ledger.bits_sent,
            });
        }
    }

    // Synthetic single-batch grid so the output shape matches the others.
    let grid = batch_grid(n, t_horizon, d, 0).unwrap_or(BatchGrid {
        batch_count: 1,
        a: t_horizon as f64,
        lengths: vec![t_horizon],
        boundaries: vec![0, t_horizon],
    });

    Ok(RunOutput {
        grid,
        regret,
        comm: ledger,
        trace,
        stats: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::build_instance;
    use crate::harness::{run_experiment, Algorithm};

    #[test]
    fn infinite_threshold_means_no_communication() {
        let (support, env) = build_instance(41, 2, 4, 6, 0.1, true).unwrap();
        let cfg = RunConfig::new(3, 2, 4, 300, 41);
        let out = dislinucb_baseline(&env, &support, &cfg, f64::INFINITY).unwrap();
        assert_eq!(out.comm.scalars_sent(), 0);
        assert!(out.regret.cumulative_total() >= 0.0);
    }

    #[test]
    fn zero_threshold_syncs_every_round() {
        let (support, env) = build_instance(42, 2, 3, 6, 0.1, true).unwrap();
        let (n, d, t) = (2usize, 2usize, 120usize);
        let cfg = RunConfig::new(n, d, 3, t, 42);
        let out = dislinucb_baseline(&env, &support, &cfg, 0.0).unwrap();
        assert_eq!(out.comm.scalars_sent(), (n * (d * d + d) * t) as u64);
        assert_eq!(out.comm.rounds_with_communication, t as u64);
    }

    #[test]
    fn communication_grows_superlinearly_in_d_vs_linear_for_batches() {
        // Qualitative scaling only: per-dimension cost must increase with d
        // for the baseline and stay flat (M·N scalars per dimension) for the
        // batch-elimination runner.
        let mut base = crate::harness::tests_support_config();
        base.sweep.d = vec![2, 4, 8];
        base.sweep.horizon = vec![1500];
        base.seeds = vec![5];
        base.algorithm = Algorithm::Dislinucb;
        let lin = run_experiment(&base).unwrap();
        let per_d: Vec<f64> = lin
            .iter()
            .map(|r| r.comm_scalars as f64 / r.d as f64)
            .collect();
        assert!(per_d[1] > per_d[0] && per_d[2] > per_d[1], "{per_d:?}");

        base.algorithm = Algorithm::Disbe;
        let be = run_experiment(&base).unwrap();
        for r in &be {
            let grid = batch_grid(r.n_agents, r.horizon, r.d, 0).unwrap();
            assert_eq!(r.comm_scalars, (r.d * r.n_agents * grid.batch_count) as u64);
        }
    }

    #[test]
    fn baseline_learns_versus_uniform() {
        // On a no-noise instance LinUCB should beat uniform play by a wide
        // margin over 800 rounds.
        let (support, env) = build_instance(43, 3, 5, 10, 0.0, false).unwrap();
        let cfg = RunConfig::new(1, 3, 5, 800, 43);
        let out = dislinucb_baseline(&env, &support, &cfg, 1.0).unwrap();
        let mut uniform_total = 0.0;
        for j in 0..support.len() {
            let best = support
                .set(j)
                .iter()
                .map(|x| env.mean_reward(x))
                .fold(f64::NEG_INFINITY, f64::max);
            let mean: f64 = support
                .set(j)
                .iter()
                .map(|x| env.mean_reward(x))
                .sum::<f64>()
                / support.k as f64;
            uniform_total += (best - mean) * support.weights[j];
        }
        let uniform_regret = uniform_total * 800.0;
        assert!(
            out.regret.cumulative_total() < 0.5 * uniform_regret,
            "baseline regret {} vs uniform {}",
            out.regret.cumulative_total(),
            uniform_regret
        );
    }
}
