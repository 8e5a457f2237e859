//! Global independent proposal `q(theta)` for the Metropolis moves: a chain
//! of nested logistic regressions over the group indicators, extended with
//! conditional Bernoulli terms for the variable indicators that respect the
//! bi-level constraint (`eta_j = 0` whenever its group is off).
//!
//! `q(gamma, eta) = q_1(gamma_1) prod_k q_k(gamma_k | gamma_{1:k-1})
//! prod_j q_j(eta_j | gamma_{g(j)})`, all parameters calibrated by weighted
//! maximum likelihood on the current particle sample.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::link::logistic;
use crate::model::{Theta, ThetaKey};

const RIDGE: f64 = 1e-4;
const NEWTON_MAX_ITER: usize = 25;
const NEWTON_GRAD_TOL: f64 = 1e-9;

/// Calibrated proposal parameters.
///
/// Every Bernoulli rate the proposal ever uses is clipped to
/// `[kappa, 1 - kappa]`, which bounds `log_q` below on the constrained
/// support and keeps the independent Metropolis ratio finite.
#[derive(Debug, Clone)]
pub struct ProposalParams {
    /// Lower-triangular logistic coefficients: `b[(k,k)]` is the intercept of
    /// group `k`'s regression, `b[(k,i)]` (`i < k`) the coefficient on
    /// `gamma_i`. Rows of degenerate groups are zero.
    pub b: DMatrix<f64>,
    /// Whether group `k` uses its fitted regression (vs. a clipped
    /// independent Bernoulli).
    pub active_regression: Vec<bool>,
    /// Clipped marginal frequency, used when `active_regression[k]` is false.
    pub marginal_gamma: Vec<f64>,
    /// Conditional inclusion rate of `eta_j` given its group is active.
    pub c: Vec<f64>,
    /// Clipping constant.
    pub kappa: f64,
    /// 0-based group of each variable.
    pub group_map: Vec<usize>,
}

impl ProposalParams {
    /// Conditional probability that `gamma_k = 1` given the earlier draws.
    fn gamma_prob(&self, k: usize, gamma: &[bool]) -> f64 {
        if !self.active_regression[k] {
            return self.marginal_gamma[k];
        }
        let mut lin = self.b[(k, k)];
        for (i, &g) in gamma.iter().enumerate().take(k) {
            if g {
                lin += self.b[(k, i)];
            }
        }
        clip(logistic(lin), self.kappa)
    }
}

fn clip(v: f64, kappa: f64) -> f64 {
    v.clamp(kappa, 1.0 - kappa)
}

fn bernoulli_log_mass(active: bool, prob: f64) -> f64 {
    if active {
        prob.ln()
    } else {
        (1.0 - prob).ln()
    }
}

/// Fits the proposal to a weighted particle sample.
///
/// Group `k` gets a weighted ridge-penalized logistic regression of
/// `gamma_k` on an intercept plus the non-degenerate predecessors; groups
/// whose weighted frequency is already outside `(kappa, 1 - kappa)` fall
/// back to a clipped independent Bernoulli. `c_j` is the clipped weighted
/// frequency of `eta_j` among particles with the group active, falling back
/// to the prior rate `p_eta_fallback[j]` when no particle has it active.
pub fn fit_proposal(
    thetas: &[Theta],
    weights: &[f64],
    group_map: &[usize],
    p_eta_fallback: &[f64],
) -> Result<ProposalParams> {
    let n = thetas.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "proposal fit needs at least 2 particles, got {n}"
        )));
    }
    if weights.len() != n {
        return Err(Error::Dim(format!(
            "{} weights for {n} particles",
            weights.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput(
            "weights must be nonnegative, finite, with positive sum".into(),
        ));
    }
    let q = thetas[0].gamma.len();
    let p = thetas[0].eta.len();
    if group_map.len() != p || p_eta_fallback.len() != p {
        return Err(Error::Dim("group_map/p_eta length mismatch with particles".into()));
    }

    let kappa = (1.0 / n as f64).clamp(1e-6, 1e-2);

    // Particles repeat heavily after resampling; aggregate identical
    // configurations once, in first-seen (deterministic) order.
    let mut agg: BTreeMap<ThetaKey, (usize, f64)> = BTreeMap::new();
    for (i, (theta, w)) in thetas.iter().zip(weights).enumerate() {
        let e = agg.entry(theta.key()).or_insert((i, 0.0));
        e.1 += w / wsum;
    }
    let rows: Vec<(&Theta, f64)> = agg.values().map(|&(i, w)| (&thetas[i], w)).collect();

    let mut params = ProposalParams {
        b: DMatrix::zeros(q, q),
        active_regression: vec![false; q],
        marginal_gamma: vec![0.0; q],
        c: vec![0.0; p],
        kappa,
        group_map: group_map.to_vec(),
    };

    for k in 0..q {
        let freq: f64 = rows
            .iter()
            .filter(|(t, _)| t.gamma[k])
            .map(|(_, w)| *w)
            .sum();
        if freq <= kappa || freq >= 1.0 - kappa {
            params.marginal_gamma[k] = clip(freq, kappa);
            continue;
        }
        let preds: Vec<usize> = (0..k).filter(|&i| params.active_regression[i]).collect();
        let coefs = fit_weighted_logistic(&rows, k, &preds)?;
        params.active_regression[k] = true;
        params.b[(k, k)] = coefs[0];
        for (slot, &i) in preds.iter().enumerate() {
            params.b[(k, i)] = coefs[slot + 1];
        }
    }

    for j in 0..p {
        let g = group_map[j];
        let denom: f64 = rows
            .iter()
            .filter(|(t, _)| t.gamma[g])
            .map(|(_, w)| *w)
            .sum();
        params.c[j] = if denom > 0.0 {
            let num: f64 = rows
                .iter()
                .filter(|(t, _)| t.gamma[g] && t.eta[j])
                .map(|(_, w)| *w)
                .sum();
            clip(num / denom, kappa)
        } else {
            clip(p_eta_fallback[j], kappa)
        };
    }

    Ok(params)
}

/// Weighted ridge-penalized logistic MLE of `gamma_k` on an intercept plus
/// the predecessor indicators in `preds`, by Newton iteration from zero.
fn fit_weighted_logistic(
    rows: &[(&Theta, f64)],
    k: usize,
    preds: &[usize],
) -> Result<Vec<f64>> {
    let d = 1 + preds.len();
    let mut coefs = DVector::zeros(d);
    let features: Vec<(Vec<f64>, f64, f64)> = rows
        .iter()
        .map(|(t, w)| {
            let mut x = Vec::with_capacity(d);
            x.push(1.0);
            x.extend(preds.iter().map(|&i| f64::from(u8::from(t.gamma[i]))));
            let y = f64::from(u8::from(t.gamma[k]));
            (x, y, *w)
        })
        .collect();

    let objective = |b: &DVector<f64>| -> f64 {
        let mut nll = 0.0;
        for (x, y, w) in &features {
            let lin: f64 = x.iter().zip(b.iter()).map(|(xi, bi)| xi * bi).sum();
            // -w [y log p + (1-y) log(1-p)] = w [softplus(lin) - y lin]
            nll += w * (crate::link::softplus(lin) - y * lin);
        }
        nll + RIDGE * b.norm_squared()
    };

    let mut obj = objective(&coefs);
    for _ in 0..NEWTON_MAX_ITER {
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for (x, y, w) in &features {
            let lin: f64 = x.iter().zip(coefs.iter()).map(|(xi, bi)| xi * bi).sum();
            let prob = logistic(lin);
            let resid = w * (prob - y);
            let curv = w * prob * (1.0 - prob);
            for a in 0..d {
                grad[a] += resid * x[a];
                for b in a..d {
                    hess[(a, b)] += curv * x[a] * x[b];
                }
            }
        }
        for a in 0..d {
            grad[a] += 2.0 * RIDGE * coefs[a];
            hess[(a, a)] += 2.0 * RIDGE;
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        if grad.amax() <= NEWTON_GRAD_TOL {
            break;
        }
        let chol = Cholesky::new(hess)
            .ok_or_else(|| Error::Numerical("logistic fit Hessian not positive definite".into()))?;
        let step = chol.solve(&grad);
        let mut alpha = 1.0;
        for _ in 0..40 {
            let cand = &coefs - alpha * &step;
            let cand_obj = objective(&cand);
            if cand_obj <= obj {
                coefs = cand;
                obj = cand_obj;
                break;
            }
            alpha *= 0.5;
        }
    }
    Ok(coefs.iter().copied().collect())
}

/// Draws `theta ~ q` and returns it with its exact log-density.
///
/// Group indicators are drawn sequentially through the logistic chain, then
/// each variable indicator is Bernoulli(`c_j`) when its group came up active
/// and zero otherwise, so every draw satisfies the bi-level constraint.
pub fn sample_proposal<R: Rng>(params: &ProposalParams, rng: &mut R) -> (Theta, f64) {
    let q = params.active_regression.len();
    let p = params.c.len();
    let mut gamma = Vec::with_capacity(q);
    let mut log_q_val = 0.0;
    for k in 0..q {
        let prob = params.gamma_prob(k, &gamma);
        let draw = rng.random_bool(prob);
        log_q_val += bernoulli_log_mass(draw, prob);
        gamma.push(draw);
    }
    let mut eta = Vec::with_capacity(p);
    for j in 0..p {
        if gamma[params.group_map[j]] {
            let prob = params.c[j];
            let draw = rng.random_bool(prob);
            log_q_val += bernoulli_log_mass(draw, prob);
            eta.push(draw);
        } else {
            eta.push(false);
        }
    }
    (Theta { gamma, eta }, log_q_val)
}

/// Exact log-density of `theta` under the proposal; `-inf` iff `theta`
/// violates the bi-level constraint (needed for Metropolis-ratio safety,
/// although such configurations are never sampled).
pub fn log_q(theta: &Theta, params: &ProposalParams) -> f64 {
    if !theta.satisfies_constraint(&params.group_map) {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for (k, &g) in theta.gamma.iter().enumerate() {
        let prob = params.gamma_prob(k, &theta.gamma);
        total += bernoulli_log_mass(g, prob);
    }
    for (j, &e) in theta.eta.iter().enumerate() {
        if theta.gamma[params.group_map[j]] {
            total += bernoulli_log_mass(e, params.c[j]);
        }
    }
    total
}
