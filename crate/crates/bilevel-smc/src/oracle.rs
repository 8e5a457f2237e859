//! Ground-truth posterior by exhaustive enumeration over the constrained
//! indicator space, for validating the sampler end to end on small
//! instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::log_sum_exp;
use crate::marglik::{MarglikEvaluator, MarglikMethod};
use crate::model::{log_prior_theta, Dataset, PriorConfig, Theta};
use crate::smc::{SmcResult, SCHEMA_VERSION};

/// Number of valid configurations, `prod_k (1 + 2^{p_k})` with `p_k` the
/// size of group `k`; `None` on overflow.
pub fn valid_theta_count(q: usize, group_map: &[usize]) -> Option<u128> {
    let mut sizes = vec![0u32; q];
    for &g in group_map {
        sizes[g] += 1;
    }
    let mut count: u128 = 1;
    for pk in sizes {
        let per_group = 1u128.checked_shl(pk)?.checked_add(1)?;
        count = count.checked_mul(per_group)?;
    }
    Some(count)
}

/// Enumerates every `theta` with `eta_j <= gamma_{g(j)}`, groups outer
/// (binary counter over `gamma`), variable masks inner over the active
/// groups' variables.
pub fn valid_thetas(q: usize, group_map: &[usize]) -> Vec<Theta> {
    assert!(q <= 30, "gamma counter limited to 30 groups");
    let p = group_map.len();
    let mut out = Vec::new();
    for gbits in 0u64..(1u64 << q) {
        let gamma: Vec<bool> = (0..q).map(|k| gbits >> k & 1 == 1).collect();
        let active: Vec<usize> = (0..p).filter(|&j| gamma[group_map[j]]).collect();
        assert!(active.len() <= 30, "eta counter limited to 30 active variables");
        for mask in 0u64..(1u64 << active.len()) {
            let mut eta = vec![false; p];
            for (bit, &j) in active.iter().enumerate() {
                eta[j] = mask >> bit & 1 == 1;
            }
            out.push(Theta {
                gamma: gamma.clone(),
                eta,
            });
        }
    }
    out
}

/// Exact (up to the marginal evaluator) posterior over all valid
/// configurations.
#[derive(Debug, Clone)]
pub struct EnumeratedPosterior {
    pub configs: Vec<Theta>,
    /// Unnormalized `log p(theta) + log L(theta)`.
    pub log_post: Vec<f64>,
    pub probs: Vec<f64>,
    pub gamma_incl: Vec<f64>,
    pub eta_incl: Vec<f64>,
}

/// Caps enumeration at this many configurations.
pub const MAX_CONFIGS: u128 = 1_000_000;

/// Evaluates `log p(theta) + log L(theta)` for every valid configuration and
/// normalizes by log-sum-exp.
pub fn enumerate_posterior(
    data: &Dataset,
    prior: &PriorConfig,
    method: MarglikMethod,
) -> Result<EnumeratedPosterior> {
    let count = valid_theta_count(data.q(), data.group_map());
    match count {
        Some(c) if c <= MAX_CONFIGS => {}
        _ => {
            return Err(Error::Unsupported(format!(
                "{} valid configurations exceed the enumeration cap of {MAX_CONFIGS}",
                count.map_or_else(|| "overflowing".into(), |c| c.to_string())
            )))
        }
    }

    let evaluator = MarglikEvaluator::new(method, data, prior)?;
    let configs = valid_thetas(data.q(), data.group_map());
    let mut log_post = Vec::with_capacity(configs.len());
    for theta in &configs {
        let lp = log_prior_theta(theta, prior, data.group_map())?;
        let ll = evaluator.log_marglik(theta)?;
        log_post.push(lp + ll);
    }

    let lse = log_sum_exp(&log_post);
    if !lse.is_finite() {
        return Err(Error::Numerical("posterior mass vanished everywhere".into()));
    }
    let probs: Vec<f64> = log_post.iter().map(|lp| (lp - lse).exp()).collect();

    let mut gamma_incl = vec![0.0; data.q()];
    let mut eta_incl = vec![0.0; data.p()];
    for (theta, &pr) in configs.iter().zip(&probs) {
        for (k, &g) in theta.gamma.iter().enumerate() {
            if g {
                gamma_incl[k] += pr;
            }
        }
        for (j, &e) in theta.eta.iter().enumerate() {
            if e {
                eta_incl[j] += pr;
            }
        }
    }

    Ok(EnumeratedPosterior {
        configs,
        log_post,
        probs,
        gamma_incl,
        eta_incl,
    })
}

/// Deterministic diff between the enumerated posterior and a sampler run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub max_gamma_gap: f64,
    pub max_eta_gap: f64,
    /// Largest inclusion-probability gap over groups and variables.
    pub max_abs_gap: f64,
    /// Total variation over configurations; not recoverable from a
    /// `SmcResult`, which carries marginals only.
    pub total_variation: Option<f64>,
}

pub fn compare(enumerated: &EnumeratedPosterior, result: &SmcResult) -> Result<ComparisonReport> {
    if enumerated.gamma_incl.len() != result.gamma_incl.len()
        || enumerated.eta_incl.len() != result.eta_incl.len()
    {
        return Err(Error::Dim(format!(
            "oracle sized (q={}, p={}) but sampler result has (q={}, p={})",
            enumerated.gamma_incl.len(),
            enumerated.eta_incl.len(),
            result.gamma_incl.len(),
            result.eta_incl.len()
        )));
    }
    let gap = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max)
    };
    let max_gamma_gap = gap(&enumerated.gamma_incl, &result.gamma_incl);
    let max_eta_gap = gap(&enumerated.eta_incl, &result.eta_incl);
    Ok(ComparisonReport {
        schema_version: SCHEMA_VERSION,
        max_gamma_gap,
        max_eta_gap,
        max_abs_gap: max_gamma_gap.max(max_eta_gap),
        total_variation: None,
    })
}
