//! Exploration-policy machinery.
//!
//! - G-optimal experimental design solved by Frank–Wolfe with away steps,
//!   certified through the Kiefer–Wolfowitz duality gap.
//! - Softmax policies with matrix-valued temperatures, and mixed-softmax
//!   policies that flip a fair coin between the G-optimal design and a
//!   mixture of softmax components.
//! - Core identification over a list of context sets, and the epoch-based
//!   mixed-softmax construction driven by determinant doubling.
//!
//! All probability vectors returned by this module are nonnegative and sum
//! to one within 1e-9.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_math::{MathError, PsdMatrix};

/// Default Kiefer–Wolfowitz certificate slack.
pub const DESIGN_TOL: f64 = 1e-3;
/// Core identification stops with an error after this many shrink rounds.
pub const CORE_ITERATION_CAP: usize = 64;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context set is empty")]
    EmptySet,
    #[error("all arms in the set are zero vectors")]
    AllZeroArms,
    #[error(
        "design not certified after {iterations} iterations (g = {achieved:.6}, target {target:.6})"
    )]
    NonConvergence {
        achieved: f64,
        target: f64,
        iterations: usize,
    },
    #[error("core shrinking made no progress within {iterations} iterations")]
    IterationCap { iterations: usize },
    #[error("core became empty at iteration {iteration}")]
    EmptyCore { iteration: usize },
    #[error("all epochs are shorter than the set count; mixture weights are undefined")]
    ZeroEpochMass,
    #[error(transparent)]
    Math(#[from] MathError),
}

// ---------------------------------------------------------------------------
// G-optimal design
// ---------------------------------------------------------------------------

/// A distribution over the arms of one context set together with its
/// certificate value g(π) = max_x ‖x‖²_{V(π)⁻¹}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignWeights {
    pub weights: Vec<f64>,
    pub g_value: f64,
    pub span_rank: usize,
    pub iterations: usize,
}

impl DesignWeights {
    /// Second-moment matrix Σ_a w_a x_a x_aᵀ in the original d dimensions.
    pub fn second_moment(&self, set: &[Vec<f64>]) -> DMatrix<f64> {
        weighted_second_moment(set, &self.weights)
    }
}

pub fn weighted_second_moment(set: &[Vec<f64>], probs: &[f64]) -> DMatrix<f64> {
    let d = set.first().map(|a| a.len()).unwrap_or(0);
    let mut m = DMatrix::zeros(d, d);
    for (arm, &p) in set.iter().zip(probs) {
        if p == 0.0 {
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += p * arm[i] * arm[j];
            }
        }
    }
    m
}

/// Minimizes g(π) = max_x xᵀ V(π)⁻¹ x over the simplex by Frank–Wolfe with
/// away steps on the log-det objective, stopping at the Kiefer–Wolfowitz
/// certificate g(π) ≤ rank·(1 + tol).
///
/// Zero arms receive zero weight; rank-deficient sets are handled by working
/// inside the arms' span, where the optimum equals the span rank.
#[allow(clippy::needless_range_loop)]
pub fn g_optimal_design(
    set: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<DesignWeights, PolicyError> {
    if set.is_empty() {
        return Err(PolicyError::EmptySet);
    }
    let d = set[0].len();
    let nonzero: Vec<usize> = (0..set.len())
        .filter(|&j| set[j].iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-12)
        .collect();
    if nonzero.is_empty() {
        return Err(PolicyError::AllZeroArms);
    }

    // Orthonormal basis of the arms' span.
    let arms = DMatrix::from_fn(d, nonzero.len(), |i, j| set[nonzero[j]][i]);
    let svd = nalgebra::SVD::new(arms.clone(), true, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax.max(1.0))
        .count();
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let basis = u.columns(0, rank).into_owned();
    let z = basis.transpose() * &arms; // rank x K'

    let k = nonzero.len();
    let r = rank;
    let target = r as f64 * (1.0 + tol);
    let mut w = vec![1.0 / k as f64; k];
    let mut g_vals = vec![0.0f64; k];
    let mut iterations = 0usize;

    loop {
        let mut v = DMatrix::zeros(r, r);
        for (j, &wj) in w.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            let col = z.column(j);
            v += wj * col * col.transpose();
        }
        let chol = match Cholesky::new(v) {
            Some(c) => c,
            None => {
                return Err(PolicyError::NonConvergence {
                    achieved: f64::INFINITY,
                    target,
                    iterations,
                })
            }
        };
        let mut g_max = f64::NEG_INFINITY;
        let mut j_plus = 0;
        for j in 0..k {
            let col = z.column(j).into_owned();
            let sol = chol.solve(&col);
            g_vals[j] = col.dot(&sol).max(0.0);
            if g_vals[j] > g_max {
                g_max = g_vals[j];
                j_plus = j;
            }
        }
        if g_max <= target {
            // map back to original arm indices
            let mut full = vec![0.0; set.len()];
            for (slot, &orig) in nonzero.iter().enumerate() {
                full[orig] = w[slot];
            }
            return Ok(DesignWeights {
                weights: full,
                g_value: g_max,
                span_rank: r,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(PolicyError::NonConvergence {
                achieved: g_max,
                target,
                iterations,
            });
        }
        iterations += 1;

        let rf = r as f64;
        // Frank–Wolfe step toward the worst-covered arm.
        let g_p = g_max;
        let gamma_fw = ((g_p / rf) - 1.0) / (g_p - 1.0);
        let gain_fw = if gamma_fw > 0.0 && gamma_fw < 1.0 {
            rf * (1.0 - gamma_fw).ln() + (1.0 + gamma_fw / (1.0 - gamma_fw) * g_p).ln()
        } else {
            f64::NEG_INFINITY
        };

        // Away step from the best-covered support atom.
        let mut j_minus = None;
        let mut g_m = f64::INFINITY;
        for j in 0..k {
            if w[j] > 0.0 && g_vals[j] < g_m {
                g_m = g_vals[j];
                j_minus = Some(j);
            }
        }
        let mut gain_away = f64::NEG_INFINITY;
        let mut gamma_away = 0.0;
        let mut drop_atom = false;
        if let Some(jm) = j_minus {
            if g_m < rf && w[jm] < 1.0 {
                let gamma_max = w[jm] / (1.0 - w[jm]);
                let gamma_star = if g_m > 1.0 {
                    ((g_m / rf) - 1.0) / (1.0 - g_m)
                } else {
                    f64::INFINITY
                };
                let gamma = gamma_star.min(gamma_max).max(0.0);
                let inner = 1.0 - gamma * g_m / (1.0 + gamma);
                if gamma > 0.0 && inner > 0.0 {
                    gain_away = rf * (1.0 + gamma).ln() + inner.ln();
                    gamma_away = gamma;
                    drop_atom = (gamma - gamma_max).abs() < 1e-15;
                }
            }
        }

        if gain_fw >= gain_away {
            if !gain_fw.is_finite() {
                return Err(PolicyError::NonConvergence {
                    achieved: g_max,
                    target,
                    iterations,
                });
            }
            for wj in w.iter_mut() {
                *wj *= 1.0 - gamma_fw;
            }
            w[j_plus] += gamma_fw;
        } else {
            let jm = j_minus.expect("away step requires an atom");
            for wj in w.iter_mut() {
                *wj *= 1.0 + gamma_away;
            }
            w[jm] -= gamma_away;
            if drop_atom || w[jm] < 1e-15 {
                w[jm] = 0.0;
            }
            // renormalize away drift
            let total: f64 = w.iter().sum();
            for wj in w.iter_mut() {
                *wj /= total;
            }
        }
    }
}

/// Design with the default tolerance and the default 10·d·K iteration budget.
pub fn g_optimal_design_default(set: &[Vec<f64>]) -> Result<DesignWeights, PolicyError> {
    let d = set.first().map(|a| a.len()).unwrap_or(0).max(1);
    g_optimal_design(set, DESIGN_TOL, 10 * d * set.len().max(1))
}

// ---------------------------------------------------------------------------
// Softmax policies
// ---------------------------------------------------------------------------

/// π(x_i) ∝ (x_iᵀ M x_i)^α, computed in log space so a common scale factor in
/// M cancels. When every quadratic form is zero the distribution degenerates
/// to 0/0; we return the uniform completion.
pub fn softmax_policy(
    set: &[Vec<f64>],
    m: &PsdMatrix,
    alpha: f64,
) -> Result<Vec<f64>, PolicyError> {
    if set.is_empty() {
        return Err(PolicyError::EmptySet);
    }
    let mut q = Vec::with_capacity(set.len());
    for arm in set {
        q.push(m.quadratic_form(arm)?);
    }
    let q_max = q.iter().cloned().fold(0.0f64, f64::max);
    if q_max <= 0.0 {
        return Ok(vec![1.0 / set.len() as f64; set.len()]);
    }
    let logs: Vec<f64> = q
        .iter()
        .map(|&v| {
            if v > 0.0 {
                alpha * v.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let l_max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logs.iter().map(|&l| (l - l_max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(probs)
}

// ---------------------------------------------------------------------------
// Mixed-softmax policies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixComponent {
    pub p: f64,
    #[serde(rename = "M")]
    pub matrix: PsdMatrix,
}

/// Coin-flip mixture: with probability 1/2 sample from the G-optimal design
/// of the presented set, otherwise pick component i with probability p_i and
/// sample its softmax.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedSoftmaxPolicy {
    pub alpha: f64,
    pub components: Vec<MixComponent>,
}

impl MixedSoftmaxPolicy {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("policy serialization")
    }
}

/// Indices of the context sets surviving core identification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoreSet {
    pub indices: Vec<usize>,
    pub lambda_prime: f64,
}

/// A context set with a repetition count, the deduplicated form of a list
/// that contains the same set many times.
#[derive(Debug, Clone)]
pub struct WeightedSet<'a> {
    pub set: &'a [Vec<f64>],
    pub count: usize,
}

fn design_moments(entries: &[WeightedSet<'_>]) -> Result<Vec<DMatrix<f64>>, PolicyError> {
    entries
        .iter()
        .map(|e| {
            let design = g_optimal_design_default(e.set)?;
            Ok(design.second_moment(e.set))
        })
        .collect()
}

fn core_identification_inner(
    lambda_prime: f64,
    entries: &[WeightedSet<'_>],
    moments: &[DMatrix<f64>],
) -> Result<Vec<usize>, PolicyError> {
    if entries.is_empty() {
        return Err(PolicyError::EmptySet);
    }
    let d = entries[0].set[0].len();
    let l_total: usize = entries.iter().map(|e| e.count).sum();
    let threshold = (d as f64).powi(5);

    let mut live: Vec<usize> = (0..entries.len()).collect();
    for iteration in 1..=CORE_ITERATION_CAP {
        let mut a = DMatrix::identity(d, d) * lambda_prime;
        for &i in &live {
            a += &moments[i] * (entries[i].count as f64 / l_total as f64);
        }
        let a_inv = PsdMatrix::new(a)?.inverse()?;
        let mut q = Vec::with_capacity(live.len());
        let mut q_max = f64::NEG_INFINITY;
        for &i in &live {
            let qi = entries[i]
                .set
                .iter()
                .map(|x| a_inv.quadratic_form(x).unwrap_or(0.0))
                .fold(0.0f64, f64::max);
            q.push(qi);
            q_max = q_max.max(qi);
        }
        if q_max > threshold {
            return Ok(live);
        }
        let next: Vec<usize> = live
            .iter()
            .zip(&q)
            .filter(|(_, &qi)| qi <= threshold / 2.0)
            .map(|(&i, _)| i)
            .collect();
        if next.is_empty() {
            return Err(PolicyError::EmptyCore { iteration });
        }
        if next.len() == live.len() {
            // Fixed point: the shrink rule will never remove another set and
            // the return condition is unreachable.
            return Err(PolicyError::IterationCap {
                iterations: iteration,
            });
        }
        live = next;
    }
    Err(PolicyError::IterationCap {
        iterations: CORE_ITERATION_CAP,
    })
}

/// Shrinks the input list until some surviving set is badly covered by the
/// averaged G-optimal information matrix A(C) = λ'I + (1/L)Σ E[xxᵀ].
pub fn core_identification(
    lambda_prime: f64,
    sets: &[Vec<Vec<f64>>],
) -> Result<CoreSet, PolicyError> {
    let entries: Vec<WeightedSet<'_>> = sets
        .iter()
        .map(|s| WeightedSet { set: s, count: 1 })
        .collect();
    let moments = design_moments(&entries)?;
    let indices = core_identification_inner(lambda_prime, &entries, &moments)?;
    Ok(CoreSet {
        indices,
        lambda_prime,
    })
}

/// Epoch bookkeeping from the mixed-softmax construction, kept for
/// diagnostics and tests: epoch lengths |τ_i| and log det of each epoch-start
/// matrix W_i.
#[derive(Debug, Clone)]
pub struct EpochTrace {
    pub epoch_lengths: Vec<usize>,
    pub epoch_log_dets: Vec<f64>,
    pub replicated_len: usize,
}

fn log_det_of(m: &DMatrix<f64>) -> Result<f64, PolicyError> {
    let chol = Cholesky::new(m.clone()).ok_or(MathError::NotPsd { min_eig: 0.0 })?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>())
}

fn mixed_softmax_inner(
    lambda_prime: f64,
    entries: &[WeightedSet<'_>],
    moments: &[DMatrix<f64>],
    k_arms: usize,
) -> Result<(MixedSoftmaxPolicy, EpochTrace), PolicyError> {
    if entries.is_empty() {
        return Err(PolicyError::EmptySet);
    }
    let d = entries[0].set[0].len();
    let alpha = (k_arms.max(1) as f64).ln();
    let l_total: usize = entries.iter().map(|e| e.count).sum();
    let q_reps = ((2.0 * (d as f64).powi(2) * (d as f64).ln()).ceil() as usize).max(1);
    let replicated = q_reps * l_total;

    // Flat entry order: the list expanded by multiplicity, cycled Q times.
    let mut flat = Vec::with_capacity(l_total);
    for (i, e) in entries.iter().enumerate() {
        flat.extend(std::iter::repeat_n(i, e.count));
    }

    let mut u = DMatrix::identity(d, d) * (lambda_prime * replicated as f64);
    for (e, g) in entries.iter().zip(moments) {
        u += g * (q_reps as f64 * e.count as f64 / 2.0);
    }

    let mut epoch_starts = vec![u.clone()];
    let mut epoch_log_dets = vec![log_det_of(&u)?];
    let mut epoch_lengths = vec![0usize];
    let mut w_inv = PsdMatrix::new(u.clone())?.inverse()?;
    // Softmax draws are fixed within an epoch; cache probabilities and the
    // induced second moment per entry.
    let mut cache: Vec<Option<(Vec<f64>, DMatrix<f64>)>> = vec![None; entries.len()];
    let mut chol = Cholesky::new(u.clone()).ok_or(MathError::NotPsd { min_eig: 0.0 })?;

    for s in 0..replicated {
        let entry = flat[s % l_total];
        let n_epochs = epoch_lengths.len();
        epoch_lengths[n_epochs - 1] += 1;

        if cache[entry].is_none() {
            let probs = softmax_policy(entries[entry].set, &w_inv, alpha)?;
            let moment = weighted_second_moment(entries[entry].set, &probs);
            cache[entry] = Some((probs, moment));
        }
        let (probs, moment) = cache[entry].as_ref().unwrap();
        u += moment;
        // Rank-one updates keep the factor (and so the log-det) current.
        for (arm, &p) in entries[entry].set.iter().zip(probs.iter()) {
            if p > 0.0 {
                let x = DVector::from_column_slice(arm);
                chol.rank_one_update(&x, p);
            }
        }
        let log_det_u: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();

        let current_w_log_det = *epoch_log_dets.last().unwrap();
        if log_det_u - current_w_log_det > std::f64::consts::LN_2 {
            epoch_starts.push(u.clone());
            epoch_log_dets.push(log_det_of(&u)?);
            epoch_lengths.push(0);
            w_inv = PsdMatrix::new(u.clone())?.inverse()?;
            cache = vec![None; entries.len()];
            // Refresh the factor to shed accumulated update drift.
            chol = Cholesky::new(u.clone()).ok_or(MathError::NotPsd { min_eig: 0.0 })?;
        }
    }

    debug_assert_eq!(epoch_lengths.iter().sum::<usize>(), replicated);

    let qualifying: f64 = epoch_lengths
        .iter()
        .filter(|&&len| len >= l_total)
        .map(|&len| len as f64)
        .sum();
    if qualifying == 0.0 {
        return Err(PolicyError::ZeroEpochMass);
    }
    let mut components = Vec::new();
    for (i, &len) in epoch_lengths.iter().enumerate() {
        if len >= l_total {
            let w_inv_i = PsdMatrix::new(epoch_starts[i].clone())?.inverse()?;
            let m = PsdMatrix::new(w_inv_i.matrix() * replicated as f64)?;
            components.push(MixComponent {
                p: len as f64 / qualifying,
                matrix: m,
            });
        }
    }
    let trace = EpochTrace {
        epoch_lengths,
        epoch_log_dets,
        replicated_len: replicated,
    };
    Ok((MixedSoftmaxPolicy { alpha, components }, trace))
}

/// Builds the mixed-softmax policy over a list of context sets.
pub fn mixed_softmax_build(
    lambda_prime: f64,
    sets: &[Vec<Vec<f64>>],
    k_arms: usize,
) -> Result<(MixedSoftmaxPolicy, EpochTrace), PolicyError> {
    let entries: Vec<WeightedSet<'_>> = sets
        .iter()
        .map(|s| WeightedSet { set: s, count: 1 })
        .collect();
    let moments = design_moments(&entries)?;
    mixed_softmax_inner(lambda_prime, &entries, &moments, k_arms)
}

/// Core identification followed by the mixed-softmax construction on the
/// surviving sets.
pub fn build_exploration_policy(
    lambda_prime: f64,
    sets: &[Vec<Vec<f64>>],
    k_arms: usize,
) -> Result<(MixedSoftmaxPolicy, EpochTrace), PolicyError> {
    let entries: Vec<WeightedSet<'_>> = sets
        .iter()
        .map(|s| WeightedSet { set: s, count: 1 })
        .collect();
    build_exploration_policy_weighted(lambda_prime, &entries, k_arms)
}

/// Weighted form used by the run loops, where the realized list of sets is
/// stored as (distinct set, multiplicity) pairs.
pub fn build_exploration_policy_weighted(
    lambda_prime: f64,
    entries: &[WeightedSet<'_>],
    k_arms: usize,
) -> Result<(MixedSoftmaxPolicy, EpochTrace), PolicyError> {
    let moments = design_moments(entries)?;
    let live = core_identification_inner(lambda_prime, entries, &moments)?;
    let core_entries: Vec<WeightedSet<'_>> = live.iter().map(|&i| entries[i].clone()).collect();
    let core_moments: Vec<DMatrix<f64>> = live.iter().map(|&i| moments[i].clone()).collect();
    mixed_softmax_inner(lambda_prime, &core_entries, &core_moments, k_arms)
}

// ---------------------------------------------------------------------------
// Sampling and exact marginals
// ---------------------------------------------------------------------------

fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
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

/// Two-stage draw: fair coin for the G-optimal branch, then within the
/// mixture branch component i with probability p_i, then the softmax draw.
pub fn sample_action(
    policy: &MixedSoftmaxPolicy,
    set: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<usize, PolicyError> {
    if set.is_empty() {
        return Err(PolicyError::EmptySet);
    }
    let coin: f64 = rng.random();
    if coin < 0.5 || policy.components.is_empty() {
        let design = g_optimal_design_default(set)?;
        Ok(categorical(&design.weights, rng))
    } else {
        let comp_probs: Vec<f64> = policy.components.iter().map(|c| c.p).collect();
        let ci = categorical(&comp_probs, rng);
        let probs = softmax_policy(set, &policy.components[ci].matrix, policy.alpha)?;
        Ok(categorical(&probs, rng))
    }
}

/// Either a pure G-optimal exploration policy or a mixed-softmax policy;
/// the pure form is both the initial policy and the fallback when the
/// exploration-policy pipeline fails.
#[derive(Debug, Clone)]
pub enum BatchPolicy {
    GOptimal,
    Mixed(MixedSoftmaxPolicy),
}

impl BatchPolicy {
    /// Exact per-arm marginal of one action draw on `set`.
    pub fn action_marginal(&self, set: &[Vec<f64>]) -> Result<Vec<f64>, PolicyError> {
        match self {
            BatchPolicy::GOptimal => Ok(g_optimal_design_default(set)?.weights),
            BatchPolicy::Mixed(p) => {
                let g = g_optimal_design_default(set)?.weights;
                let mut marginal: Vec<f64> = g.iter().map(|&w| 0.5 * w).collect();
                if p.components.is_empty() {
                    return Ok(g);
                }
                for comp in &p.components {
                    let probs = softmax_policy(set, &comp.matrix, p.alpha)?;
                    for (m, q) in marginal.iter_mut().zip(&probs) {
                        *m += 0.5 * comp.p * q;
                    }
                }
                Ok(marginal)
            }
        }
    }
}

/// Exact E_{X}[E_{x∼π(X)} x xᵀ] over a finite weighted family of sets; no
/// sampling is involved.
pub fn expected_second_moment(
    policy: &BatchPolicy,
    entries: &[(&[Vec<f64>], f64)],
) -> Result<PsdMatrix, PolicyError> {
    if entries.is_empty() {
        return Err(PolicyError::EmptySet);
    }
    let d = entries[0].0[0].len();
    let mut m = DMatrix::zeros(d, d);
    for (set, weight) in entries {
        if set.is_empty() {
            return Err(PolicyError::EmptySet);
        }
        let marginal = policy.action_marginal(set)?;
        m += weighted_second_moment(set, &marginal) * *weight;
    }
    Ok(PsdMatrix::new(m)?)
}

/// E_X[max_x √(xᵀ (λ'I + E E[yyᵀ])⁻¹ x)], evaluated exactly over the support.
pub fn lambda_deviation(
    policy: &BatchPolicy,
    entries: &[(&[Vec<f64>], f64)],
    lambda_prime: f64,
) -> Result<f64, PolicyError> {
    let esm = expected_second_moment(policy, entries)?;
    let d = esm.dim();
    let a = PsdMatrix::new(esm.matrix() + DMatrix::identity(d, d) * lambda_prime)?;
    let a_inv = a.inverse()?;
    let mut total = 0.0;
    for (set, weight) in entries {
        let worst = set
            .iter()
            .map(|x| a_inv.quadratic_form(x).unwrap_or(0.0).sqrt())
            .fold(0.0f64, f64::max);
        total += weight * worst;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream;
    use proptest::prelude::*;

    fn basis(i: usize, d: usize) -> Vec<f64> {
        let mut x = vec![0.0; d];
        x[i] = 1.0;
        x
    }

    fn random_unit_set(d: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream::substream(&[seed, 0xA]);
        (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect()
    }

    #[test]
    fn design_on_basis_is_uniform() {
        for d in [2usize, 4, 6] {
            let set: Vec<Vec<f64>> = (0..d).map(|i| basis(i, d)).collect();
            let design = g_optimal_design_default(&set).unwrap();
            for &w in &design.weights {
                assert!((w - 1.0 / d as f64).abs() < 5e-3);
            }
            assert!((design.g_value - d as f64).abs() / d as f64 <= DESIGN_TOL + 1e-9);
        }
    }

    #[test]
    fn design_single_arm() {
        let design = g_optimal_design_default(&[vec![0.3, 0.4]]).unwrap();
        assert_eq!(design.weights, vec![1.0]);
        assert!((design.g_value - 1.0).abs() < 1e-9);
        assert_eq!(design.span_rank, 1);
    }

    #[test]
    fn design_matches_brute_force_grid() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let set = vec![basis(0, 2), basis(1, 2), vec![s, s]];
        let design = g_optimal_design(&set, 1e-3, 5000).unwrap();

        // Brute force over the simplex at resolution 1e-3.
        let mut best = (f64::INFINITY, [0.0f64; 3]);
        let steps = 1000usize;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let w = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                // V entries for these three arms
                let v00 = w[0] + w[2] * 0.5;
                let v11 = w[1] + w[2] * 0.5;
                let v01 = w[2] * 0.5;
                let det = v00 * v11 - v01 * v01;
                if det <= 1e-12 {
                    continue;
                }
                let inv = [v11 / det, v00 / det, -v01 / det]; // [i00, i11, i01]
                let g0 = inv[0];
                let g1 = inv[1];
                let g2 = 0.5 * (inv[0] + inv[1] + 2.0 * inv[2]);
                let g = g0.max(g1).max(g2);
                if g < best.0 {
                    best = (g, w);
                }
            }
        }
        assert!((best.0 - 2.0).abs() < 5e-3, "grid optimum {}", best.0);
        assert!((design.g_value - 2.0).abs() < 4e-3);
        for (w, b) in design.weights.iter().zip(best.1.iter()) {
            assert!(
                (w - b).abs() < 5e-3,
                "weights {:?} vs {:?}",
                design.weights,
                best.1
            );
        }
    }

    #[test]
    fn design_certificate_on_random_sets() {
        let mut rng = stream::substream(&[20, 1]);
        for trial in 0..30 {
            let d = 2 + (rng.random::<u64>() % 7) as usize;
            let k = 2 + (rng.random::<u64>() % 29) as usize;
            let set = random_unit_set(d, k, 1000 + trial);
            let design = g_optimal_design_default(&set).unwrap();
            assert!(design.g_value <= design.span_rank as f64 * (1.0 + DESIGN_TOL) + 1e-9);
            let sum: f64 = design.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(design.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn design_rejects_degenerate_inputs() {
        assert!(matches!(
            g_optimal_design_default(&[]),
            Err(PolicyError::EmptySet)
        ));
        assert!(matches!(
            g_optimal_design_default(&[vec![0.0, 0.0]]),
            Err(PolicyError::AllZeroArms)
        ));
    }

    #[test]
    fn design_zero_arms_get_zero_weight() {
        let set = vec![basis(0, 2), vec![0.0, 0.0], basis(1, 2)];
        let design = g_optimal_design_default(&set).unwrap();
        assert_eq!(design.weights[1], 0.0);
        assert!((design.weights[0] - 0.5).abs() < 5e-3);
    }

    #[test]
    fn softmax_uniform_cases() {
        let set = vec![basis(0, 2), basis(0, 2)];
        let m = PsdMatrix::identity(2);
        let p = softmax_policy(&set, &m, 2.0_f64.ln()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);

        let unit_set = vec![basis(0, 2), basis(1, 2)];
        let p = softmax_policy(&unit_set, &PsdMatrix::identity(2), 5.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_diagonal_example() {
        let set = vec![basis(0, 2), basis(1, 2)];
        let m = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        let p = softmax_policy(&set, &m, 2.0_f64.ln()).unwrap();
        // 4^{ln 2} / (4^{ln 2} + 1)
        let expect = 4.0f64.powf(2.0f64.ln()) / (4.0f64.powf(2.0f64.ln()) + 1.0);
        assert!((p[0] - expect).abs() < 1e-12);
        assert!((expect - 0.7233).abs() < 1e-4);
    }

    #[test]
    fn softmax_zero_forms_fall_back_to_uniform() {
        let set = vec![basis(0, 2), basis(0, 2), basis(0, 2)];
        let m = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])).unwrap();
        let p = softmax_policy(&set, &m, 1.0).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_scale_invariant(seed in 0u64..200, scale in 1e-6f64..1e6) {
            let set = random_unit_set(3, 5, seed);
            let mut rng = stream::substream(&[seed, 0xB]);
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
            let m = PsdMatrix::new(&a * a.transpose()).unwrap();
            let scaled = PsdMatrix::new(m.matrix() * scale).unwrap();
            let p1 = softmax_policy(&set, &m, 5.0f64.ln()).unwrap();
            let p2 = softmax_policy(&set, &scaled, 5.0f64.ln()).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn core_identification_immediate_return() {
        // 39 well-covered copies of {e1} plus a lone {e2}: the lone direction
        // is covered with mass 1/40 only, so its quadratic form exceeds d^5.
        let mut sets: Vec<Vec<Vec<f64>>> = (0..39).map(|_| vec![basis(0, 2)]).collect();
        sets.push(vec![basis(1, 2)]);
        let core = core_identification(1e-4, &sets).unwrap();
        assert_eq!(core.indices.len(), 40);
    }

    #[test]
    fn core_identification_cap_on_large_lambda() {
        // λ' ≥ 1 bounds every quadratic form by 1 < d^5, and nothing is ever
        // removed, so the shrink rule stalls.
        let sets: Vec<Vec<Vec<f64>>> = (0..5).map(|i| vec![basis(i % 2, 2)]).collect();
        assert!(matches!(
            core_identification(1.0, &sets),
            Err(PolicyError::IterationCap { .. })
        ));
    }

    #[test]
    fn core_identification_single_small_arm_stalls() {
        let sets = vec![vec![vec![1e-3, 0.0]]];
        assert!(matches!(
            core_identification(1e-4, &sets),
            Err(PolicyError::IterationCap { .. })
        ));
    }

    #[test]
    fn core_identification_shrinks_then_returns() {
        // 96 sets covering e1 heavily, 3 medium arms on e2 (forms in
        // (d^5/2, d^5], removed by the shrink rule), and one small arm on e2
        // that blows past d^5 once the medium sets are gone.
        let mut sets: Vec<Vec<Vec<f64>>> = (0..96).map(|_| vec![basis(0, 2)]).collect();
        let c = 0.015f64.sqrt();
        for _ in 0..3 {
            sets.push(vec![vec![0.0, c]]);
        }
        sets.push(vec![vec![0.0, 0.1]]);
        let core = core_identification(1e-4, &sets).unwrap();
        assert_eq!(core.indices.len(), 97);
        assert!(core.indices.contains(&99));
        assert!(!core.indices.contains(&96));
        assert!(!core.indices.contains(&98));
    }

    #[test]
    fn mixed_softmax_single_epoch_degenerate() {
        // A huge regularizer freezes the determinant, so one epoch spans the
        // whole schedule and carries all the mass.
        let sets = vec![vec![basis(0, 2), basis(1, 2)]];
        let (policy, trace) = mixed_softmax_build(1e6, &sets, 2).unwrap();
        assert_eq!(policy.components.len(), 1);
        assert!((policy.components[0].p - 1.0).abs() < 1e-12);
        assert_eq!(
            trace.epoch_lengths.iter().sum::<usize>(),
            trace.replicated_len
        );
    }

    #[test]
    fn mixed_softmax_scripted_two_epoch_trace() {
        // Singleton sets {e1}, {e2} with λ'·QL + Q/2 = 10 give U diagonal with
        // entries 10 + (arm counts); the determinant ratio first exceeds 2 at
        // s = 9, leaving epochs of length 9 and 3.
        let sets = vec![vec![basis(0, 2)], vec![basis(1, 2)]];
        let d: f64 = 2.0;
        let q = (2.0 * d * d * d.ln()).ceil(); // 6
        assert_eq!(q as usize, 6);
        let ql = 12.0;
        // choose λ' so that λ'·QL + Q/2 = 10
        let lambda_prime = (10.0 - q / 2.0) / ql;
        let (policy, trace) = mixed_softmax_build(lambda_prime, &sets, 2).unwrap();
        assert_eq!(trace.epoch_lengths, vec![9, 3]);
        assert_eq!(policy.components.len(), 2);
        assert!((policy.components[0].p - 0.75).abs() < 1e-12);
        assert!((policy.components[1].p - 0.25).abs() < 1e-12);
        // M_1 = QL·W_1⁻¹ = 12/10 I
        let m1 = &policy.components[0].matrix;
        assert!((m1.matrix()[(0, 0)] - 1.2).abs() < 1e-9);
        assert!((m1.matrix()[(1, 1)] - 1.2).abs() < 1e-9);
        // M_2 = QL·diag(1/15, 1/14)
        let m2 = &policy.components[1].matrix;
        assert!((m2.matrix()[(0, 0)] - 12.0 / 15.0).abs() < 1e-9);
        assert!((m2.matrix()[(1, 1)] - 12.0 / 14.0).abs() < 1e-9);
        // consecutive epoch determinant ratio strictly above 2
        assert!(trace.epoch_log_dets[1] - trace.epoch_log_dets[0] > std::f64::consts::LN_2);
    }

    #[test]
    fn mixed_softmax_structure_on_random_instances() {
        for trial in 0..10u64 {
            let mut rng = stream::substream(&[trial, 0xC]);
            let d = 2 + (rng.random::<u64>() % 3) as usize;
            let l = 2 + (rng.random::<u64>() % 4) as usize;
            let k = 3 + (rng.random::<u64>() % 6) as usize;
            let sets: Vec<Vec<Vec<f64>>> = (0..l)
                .map(|i| random_unit_set(d, k, 31 * trial + i as u64))
                .collect();
            let lambda_prime = 1e-4 + rng.random::<f64>() * 0.05;
            let (policy, trace) = mixed_softmax_build(lambda_prime, &sets, k).unwrap();
            let p_sum: f64 = policy.components.iter().map(|c| c.p).sum();
            assert!((p_sum - 1.0).abs() < 1e-9);
            assert_eq!(
                trace.epoch_lengths.iter().sum::<usize>(),
                trace.replicated_len
            );
            for pair in trace.epoch_log_dets.windows(2) {
                assert!(pair[1] - pair[0] > std::f64::consts::LN_2);
            }
            assert!((policy.alpha - (k as f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn exploration_policy_composes_the_two_stages() {
        // Same construction as the immediate-return core test; the pipeline
        // output must match running the stages by hand.
        let mut sets: Vec<Vec<Vec<f64>>> = (0..39).map(|_| vec![basis(0, 2)]).collect();
        sets.push(vec![basis(1, 2)]);
        let lambda_prime = 1e-4;
        let (policy, _) = build_exploration_policy(lambda_prime, &sets, 2).unwrap();
        let core = core_identification(lambda_prime, &sets).unwrap();
        let core_sets: Vec<Vec<Vec<f64>>> = core.indices.iter().map(|&i| sets[i].clone()).collect();
        let (manual, _) = mixed_softmax_build(lambda_prime, &core_sets, 2).unwrap();
        assert_eq!(policy.components.len(), manual.components.len());
        for (a, b) in policy.components.iter().zip(&manual.components) {
            assert!((a.p - b.p).abs() < 1e-12);
        }
        assert!((policy.alpha - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sample_single_arm_always_zero() {
        let policy = MixedSoftmaxPolicy {
            alpha: 1.0,
            components: vec![MixComponent {
                p: 1.0,
                matrix: PsdMatrix::identity(2),
            }],
        };
        let set = vec![basis(0, 2)];
        let mut rng = stream::substream(&[33, 1]);
        for _ in 0..50 {
            assert_eq!(sample_action(&policy, &set, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn sample_branch_frequency_is_half() {
        // Softmax component is degenerate on arm 1, the G design is uniform
        // on {e1, e2}; arm 0 can only come from the G branch, so
        // P(arm 0) = 1/2 · 1/2.
        let m = PsdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])).unwrap();
        let policy = MixedSoftmaxPolicy {
            alpha: 2.0f64.ln(),
            components: vec![MixComponent { p: 1.0, matrix: m }],
        };
        let set = vec![basis(0, 2), basis(1, 2)];
        let mut rng = stream::substream(&[34, 2]);
        let n = 100_000;
        let mut zeros = 0usize;
        for _ in 0..n {
            if sample_action(&policy, &set, &mut rng).unwrap() == 0 {
                zeros += 1;
            }
        }
        let freq = zeros as f64 / n as f64;
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        assert!((freq - 0.25).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn sample_marginal_matches_exact_within_tv() {
        let mut rng = stream::substream(&[35, 3]);
        let set = random_unit_set(3, 6, 77);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        let m1 = PsdMatrix::new(&a * a.transpose()).unwrap();
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        let m2 = PsdMatrix::new(&b * b.transpose()).unwrap();
        let policy = MixedSoftmaxPolicy {
            alpha: 6.0f64.ln(),
            components: vec![
                MixComponent { p: 0.3, matrix: m1 },
                MixComponent { p: 0.7, matrix: m2 },
            ],
        };
        let exact = BatchPolicy::Mixed(policy.clone())
            .action_marginal(&set)
            .unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; set.len()];
        for _ in 0..n {
            counts[sample_action(&policy, &set, &mut rng).unwrap()] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&exact)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn expected_second_moment_point_masses() {
        let e1 = vec![basis(0, 2)];
        let policy = BatchPolicy::GOptimal;
        let m = expected_second_moment(&policy, &[(&e1, 1.0)]).unwrap();
        assert!((m.matrix()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(m.matrix()[(1, 1)].abs() < 1e-12);

        let e2 = vec![basis(1, 2)];
        let m = expected_second_moment(&policy, &[(&e1, 0.5), (&e2, 0.5)]).unwrap();
        assert!((m.matrix()[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((m.matrix()[(1, 1)] - 0.5).abs() < 1e-12);
        assert!(m.trace() <= 1.0 + 1e-9);
    }

    #[test]
    fn expected_second_moment_matches_monte_carlo() {
        let sets: Vec<Vec<Vec<f64>>> = (0..3).map(|i| random_unit_set(3, 4, 50 + i)).collect();
        let mut rng = stream::substream(&[36, 4]);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        let policy = MixedSoftmaxPolicy {
            alpha: 4.0f64.ln(),
            components: vec![
                MixComponent {
                    p: 0.4,
                    matrix: PsdMatrix::new(&a * a.transpose()).unwrap(),
                },
                MixComponent {
                    p: 0.6,
                    matrix: PsdMatrix::new(&b * b.transpose()).unwrap(),
                },
            ],
        };
        let entries: Vec<(&[Vec<f64>], f64)> =
            sets.iter().map(|s| (s.as_slice(), 1.0 / 3.0)).collect();
        let exact = expected_second_moment(&BatchPolicy::Mixed(policy.clone()), &entries).unwrap();

        let n = 1_000_000usize;
        let mut mc = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let set_idx = (rng.random::<u64>() % 3) as usize;
            let arm = sample_action(&policy, &sets[set_idx], &mut rng).unwrap();
            let x = &sets[set_idx][arm];
            for i in 0..3 {
                for j in 0..3 {
                    mc[(i, j)] += x[i] * x[j];
                }
            }
        }
        mc /= n as f64;
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (mc[(i, j)] - exact.matrix()[(i, j)]).abs() < 1e-2,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn lambda_deviation_diagonal_case() {
        for d in [2usize, 4] {
            let set: Vec<Vec<f64>> = (0..d).map(|i| basis(i, d)).collect();
            let entries: Vec<(&[Vec<f64>], f64)> = vec![(set.as_slice(), 1.0)];
            let lp = 0.3;
            let v = lambda_deviation(&BatchPolicy::GOptimal, &entries, lp).unwrap();
            let expect = (1.0 / (lp + 1.0 / d as f64)).sqrt();
            assert!((v - expect).abs() < 1e-6, "d={d}: {v} vs {expect}");
        }
    }

    #[test]
    fn lambda_deviation_limits() {
        let set = vec![basis(0, 3)];
        let entries: Vec<(&[Vec<f64>], f64)> = vec![(set.as_slice(), 1.0)];
        let v = lambda_deviation(&BatchPolicy::GOptimal, &entries, 1.0).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
        let v = lambda_deviation(&BatchPolicy::GOptimal, &entries, 1e6).unwrap();
        assert!(v <= (1.0f64 / 1e6).sqrt() + 1e-12);
    }

    #[test]
    fn policy_json_shape() {
        let policy = MixedSoftmaxPolicy {
            alpha: 3.0f64.ln(),
            components: vec![MixComponent {
                p: 1.0,
                matrix: PsdMatrix::identity(2),
            }],
        };
        let js = policy.to_json();
        assert!(js["alpha"].is_number());
        assert!(js["components"][0]["p"].is_number());
        assert!(js["components"][0]["M"].is_array());
        let back: MixedSoftmaxPolicy = serde_json::from_value(js).unwrap();
        assert_eq!(back.components.len(), 1);
    }
}
