//! Tempering waste-free SMC sampler over the constrained indicator space.
//!
//! The sampler tracks the geometric bridge `pi_t ∝ p(theta) L(theta)^lambda_t`
//! from the prior (`lambda = 0`) to the posterior (`lambda = 1`). Each stage
//! resamples `M` ancestors from the `N = M*P` particles, moves every ancestor
//! `P - 1` times with an independent Metropolis kernel invariant for the
//! current tempered target, keeps all `P` states of each chain as the new
//! particle set, and then picks the next exponent by matching the effective
//! sample size of the incremental weights to a target fraction.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::log_sum_exp;
use crate::marglik::{MarglikEvaluator, MarglikMethod};
use crate::model::{log_prior_theta, Dataset, PriorConfig, Theta};
use crate::proposal::{fit_proposal, log_q, sample_proposal, ProposalParams};

/// Version tag carried by every serialized artifact.
pub const SCHEMA_VERSION: u32 = 1;

const RESAMPLE_LANE: u64 = u32::MAX as u64;

/// Sampler configuration. `n_particles = n_ancestors * chain_len`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmcConfig {
    #[serde(rename = "N")]
    pub n_particles: usize,
    #[serde(rename = "M")]
    pub n_ancestors: usize,
    #[serde(rename = "P")]
    pub chain_len: usize,
    /// Target ESS fraction for the adaptive exponent (`tau`).
    pub ess_ratio: f64,
    pub bisection_tol: f64,
    pub seed: u64,
    pub marglik_method: MarglikMethod,
    pub max_stages: usize,
    /// Chain-level parallelism; `None` uses the global thread pool. Not part
    /// of the result schema: it cannot change any output.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            n_particles: 25_000,
            n_ancestors: 125,
            chain_len: 200,
            ess_ratio: 0.5,
            bisection_tol: 1e-8,
            seed: 0,
            marglik_method: MarglikMethod::Ala,
            max_stages: 200,
            workers: None,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles != self.n_ancestors * self.chain_len {
            return Err(Error::InvalidInput(format!(
                "N ({}) must equal M ({}) * P ({})",
                self.n_particles, self.n_ancestors, self.chain_len
            )));
        }
        if self.n_ancestors == 0 || self.chain_len == 0 {
            return Err(Error::InvalidInput("M and P must be positive".into()));
        }
        if !(self.ess_ratio > 0.0 && self.ess_ratio < 1.0) {
            return Err(Error::InvalidInput(format!(
                "ess_ratio must lie in (0,1), got {}",
                self.ess_ratio
            )));
        }
        if !(self.bisection_tol > 0.0) {
            return Err(Error::InvalidInput("bisection_tol must be positive".into()));
        }
        if self.max_stages == 0 {
            return Err(Error::InvalidInput("max_stages must be positive".into()));
        }
        if self.marglik_method == MarglikMethod::Quadrature {
            return Err(Error::InvalidInput(
                "sampler supports the la and ala marginal evaluators".into(),
            ));
        }
        Ok(())
    }
}

/// The weighted particle population at one tempering stage.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub thetas: Vec<Theta>,
    /// Cached `log L(theta)` per particle.
    pub log_l: Vec<f64>,
    /// Normalized log-weights (`log_sum_exp = 0`).
    pub log_weights: Vec<f64>,
    /// Current tempering exponent in `[0, 1]`.
    pub lambda: f64,
    pub stage: usize,
    /// Accumulated log normalizing-constant estimate.
    pub log_evidence: f64,
}

impl ParticleSystem {
    /// Linear-scale normalized weights.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }
}

/// Posterior inclusion estimates plus run diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmcResult {
    pub schema_version: u32,
    pub gamma_incl: Vec<f64>,
    pub eta_incl: Vec<f64>,
    /// `lambda_0 = 0` through the final `1`.
    pub lambda_schedule: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
    pub log_evidence: f64,
    pub stage_wall_times_s: Vec<f64>,
    pub config: SmcConfig,
}

impl SmcResult {
    /// Equality of everything except wall-clock measurements; this is the
    /// payload the determinism contract covers.
    pub fn statistics_eq(&self, other: &Self) -> bool {
        self.gamma_incl == other.gamma_incl
            && self.eta_incl == other.eta_incl
            && self.lambda_schedule == other.lambda_schedule
            && self.acceptance_rates == other.acceptance_rates
            && self.log_evidence == other.log_evidence
    }
}

/// Diagnostics from one tempering stage.
#[derive(Debug, Clone, Copy)]
pub struct StageStats {
    pub lambda: f64,
    pub acceptance_rate: f64,
    pub wall_s: f64,
}

/// One reproducible stream per (stage, lane); parallel execution over chains
/// cannot change any draw.
fn stream_rng(seed: u64, stage: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 32) | lane);
    rng
}

/// Effective sample size `(sum w)^2 / sum w^2` from log-weights, computed
/// with max-subtraction.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(
            "all log-weights are -inf; ESS undefined".into(),
        ));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for lw in log_weights {
        let w = (lw - max).exp();
        sum += w;
        sum_sq += w * w;
    }
    Ok(sum * sum / sum_sq)
}

fn ess_of_increment(log_l: &[f64], delta: f64) -> Result<f64> {
    let scaled: Vec<f64> = log_l.iter().map(|l| delta * l).collect();
    ess(&scaled)
}

/// Draws `N` particles from the hierarchical prior with their cached
/// marginal likelihoods; uniform weights, `lambda = 0`.
pub fn init_particles(
    prior: &PriorConfig,
    group_map: &[usize],
    config: &SmcConfig,
    evaluator: &MarglikEvaluator,
) -> Result<ParticleSystem> {
    let n = config.n_particles;
    let mut rng = stream_rng(config.seed, 0, 0);
    let thetas: Vec<Theta> = (0..n)
        .map(|_| Theta::sample_from_prior(prior, group_map, &mut rng))
        .collect();
    let log_l = thetas
        .par_iter()
        .map(|t| evaluator.log_marglik(t))
        .collect::<Result<Vec<f64>>>()?;
    let lw = -(n as f64).ln();
    Ok(ParticleSystem {
        thetas,
        log_l,
        log_weights: vec![lw; n],
        lambda: 0.0,
        stage: 0,
        log_evidence: 0.0,
    })
}

/// Picks the next exponent: jump to 1 when the incremental-weight ESS over
/// the full remaining increment stays at or above `tau * N`, otherwise
/// bisect `ESS(delta) = tau * N` over `delta in (0, 1 - lambda)`.
pub fn adapt_lambda(system: &ParticleSystem, config: &SmcConfig) -> Result<f64> {
    if system.lambda >= 1.0 {
        return Err(Error::InvalidInput(
            "lambda is already 1; nothing to adapt".into(),
        ));
    }
    let remaining = 1.0 - system.lambda;
    let target = config.ess_ratio * system.log_l.len() as f64;
    if ess_of_increment(&system.log_l, remaining)? >= target {
        return Ok(1.0);
    }
    // ESS(0) = N > target and ESS(remaining) < target; ESS is nonincreasing
    // in delta up to ties, so bisection brackets the crossing.
    let mut lo = 0.0;
    let mut hi = remaining;
    for _ in 0..60 {
        if hi - lo <= config.bisection_tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ess_of_increment(&system.log_l, mid)? >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(system.lambda + 0.5 * (lo + hi))
}

/// Applies the incremental weights `L^(lambda_next - lambda)` in log space,
/// normalizes, and accumulates the evidence increment.
pub fn reweight(system: &mut ParticleSystem, lambda_next: f64) -> Result<()> {
    if !(lambda_next > system.lambda) {
        return Err(Error::InvalidInput(format!(
            "lambda_next ({lambda_next}) must exceed current lambda ({})",
            system.lambda
        )));
    }
    let delta = lambda_next - system.lambda;
    let n = system.log_l.len() as f64;
    let incr: Vec<f64> = system.log_l.iter().map(|l| delta * l).collect();
    let lse = log_sum_exp(&incr);
    if !lse.is_finite() {
        return Err(Error::Numerical("all incremental weights vanished".into()));
    }
    system.log_evidence += lse - n.ln();
    system.log_weights = incr.iter().map(|lw| lw - lse).collect();
    system.lambda = lambda_next;
    Ok(())
}

/// `M` iid multinomial ancestor draws from the normalized weights.
pub fn resample_ancestors<R: Rng>(
    weights: &[f64],
    n_ancestors: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights.iter().copied())
        .map_err(|e| Error::InvalidInput(format!("resampling weights: {e}")))?;
    Ok((0..n_ancestors).map(|_| dist.sample(rng)).collect())
}

/// One independent Metropolis step targeting `pi_lambda ∝ p(theta)
/// L(theta)^lambda`; returns the new state with its cached `log L` and the
/// acceptance flag.
#[allow(clippy::too_many_arguments)]
pub fn metropolis_move<R: Rng>(
    theta: &Theta,
    log_l_theta: f64,
    params: &ProposalParams,
    lambda: f64,
    prior: &PriorConfig,
    group_map: &[usize],
    evaluator: &MarglikEvaluator,
    rng: &mut R,
) -> Result<(Theta, f64, bool)> {
    let (proposal, log_q_proposal) = sample_proposal(params, rng);
    let log_prior_proposal = log_prior_theta(&proposal, prior, group_map)?;
    if log_prior_proposal == f64::NEG_INFINITY {
        // Unreachable under the constrained proposal; auto-reject for safety.
        return Ok((theta.clone(), log_l_theta, false));
    }
    let log_l_proposal = evaluator.log_marglik(&proposal)?;
    let log_prior_current = log_prior_theta(theta, prior, group_map)?;
    let log_q_current = log_q(theta, params);
    let log_ratio = (log_prior_proposal + lambda * log_l_proposal + log_q_current)
        - (log_prior_current + lambda * log_l_theta + log_q_proposal);
    let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accept {
        Ok((proposal, log_l_proposal, true))
    } else {
        Ok((theta.clone(), log_l_theta, false))
    }
}

struct ChainOutput {
    thetas: Vec<Theta>,
    log_l: Vec<f64>,
    accepted: usize,
}

fn run_chain(
    start: Theta,
    start_log_l: f64,
    chain_len: usize,
    params: &ProposalParams,
    lambda: f64,
    prior: &PriorConfig,
    group_map: &[usize],
    evaluator: &MarglikEvaluator,
    mut rng: ChaCha8Rng,
) -> Result<ChainOutput> {
    let mut thetas = Vec::with_capacity(chain_len);
    let mut log_l = Vec::with_capacity(chain_len);
    let mut accepted = 0;
    let mut current = start;
    let mut current_log_l = start_log_l;
    thetas.push(current.clone());
    log_l.push(current_log_l);
    for _ in 1..chain_len {
        let (next, next_log_l, acc) = metropolis_move(
            &current,
            current_log_l,
            params,
            lambda,
            prior,
            group_map,
            evaluator,
            &mut rng,
        )?;
        current = next;
        current_log_l = next_log_l;
        accepted += usize::from(acc);
        thetas.push(current.clone());
        log_l.push(current_log_l);
    }
    Ok(ChainOutput {
        thetas,
        log_l,
        accepted,
    })
}

/// One full tempering stage: resample ancestors, fit the proposal on the
/// pre-resampling weighted sample, move each ancestor chain `P - 1` steps
/// under the current target, gather all `M*P` states, then adapt the next
/// exponent and reweight.
pub fn waste_free_stage(
    system: &mut ParticleSystem,
    config: &SmcConfig,
    prior: &PriorConfig,
    group_map: &[usize],
    evaluator: &MarglikEvaluator,
) -> Result<StageStats> {
    if system.lambda >= 1.0 {
        return Err(Error::InvalidInput("sampler already at lambda = 1".into()));
    }
    let start = Instant::now();
    let stage = system.stage + 1;
    let weights = system.weights();

    let mut resample_rng = stream_rng(config.seed, stage as u64, RESAMPLE_LANE);
    let ancestors = resample_ancestors(&weights, config.n_ancestors, &mut resample_rng)?;

    // Frozen for every move this stage; refitting per move would break the
    // invariance of the independent kernel.
    let params = fit_proposal(&system.thetas, &weights, group_map, &prior.p_eta)?;

    let lambda_prev = system.lambda;
    let outputs: Vec<ChainOutput> = ancestors
        .par_iter()
        .enumerate()
        .map(|(m, &a)| {
            run_chain(
                system.thetas[a].clone(),
                system.log_l[a],
                config.chain_len,
                &params,
                lambda_prev,
                prior,
                group_map,
                evaluator,
                stream_rng(config.seed, stage as u64, m as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut thetas = Vec::with_capacity(config.n_particles);
    let mut log_l = Vec::with_capacity(config.n_particles);
    let mut accepted = 0usize;
    for out in outputs {
        thetas.extend(out.thetas);
        log_l.extend(out.log_l);
        accepted += out.accepted;
    }
    system.thetas = thetas;
    system.log_l = log_l;
    system.stage = stage;

    let lambda_next = adapt_lambda(system, config)?;
    reweight(system, lambda_next)?;

    let moves = config.n_ancestors * (config.chain_len - 1);
    Ok(StageStats {
        lambda: lambda_next,
        acceptance_rate: if moves == 0 {
            0.0
        } else {
            accepted as f64 / moves as f64
        },
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs the sampler end to end with the evaluator built from
/// `config.marglik_method`.
pub fn run(data: &Dataset, prior: &PriorConfig, config: &SmcConfig) -> Result<SmcResult> {
    config.validate()?;
    let evaluator = MarglikEvaluator::new(config.marglik_method, data, prior)?;
    run_with_evaluator(data, prior, config, &evaluator)
}

/// Runs the sampler with a caller-supplied marginal-likelihood evaluator
/// (shared caches, instrumentation).
pub fn run_with_evaluator(
    data: &Dataset,
    prior: &PriorConfig,
    config: &SmcConfig,
    evaluator: &MarglikEvaluator,
) -> Result<SmcResult> {
    config.validate()?;
    if prior.p_gamma.len() != data.q() || prior.p_eta.len() != data.p() {
        return Err(Error::Dim(format!(
            "prior sized (q={}, p={}) but data has (q={}, p={})",
            prior.p_gamma.len(),
            prior.p_eta.len(),
            data.q(),
            data.p()
        )));
    }

    let body = || -> Result<SmcResult> {
        let mut system = init_particles(prior, data.group_map(), config, evaluator)?;
        let mut lambda_schedule = vec![0.0];
        let mut acceptance_rates = Vec::new();
        let mut stage_wall_times_s = Vec::new();
        while system.lambda < 1.0 {
            if system.stage >= config.max_stages {
                return Err(Error::MaxStages {
                    max_stages: config.max_stages,
                    lambda: system.lambda,
                });
            }
            let stats = waste_free_stage(&mut system, config, prior, data.group_map(), evaluator)?;
            lambda_schedule.push(stats.lambda);
            acceptance_rates.push(stats.acceptance_rate);
            stage_wall_times_s.push(stats.wall_s);
        }

        let weights = system.weights();
        let weight_sum: f64 = weights.iter().sum();
        let mut gamma_incl = vec![0.0; data.q()];
        let mut eta_incl = vec![0.0; data.p()];
        for (theta, w) in system.thetas.iter().zip(&weights) {
            for (k, &g) in theta.gamma.iter().enumerate() {
                if g {
                    gamma_incl[k] += w;
                }
            }
            for (j, &e) in theta.eta.iter().enumerate() {
                if e {
                    eta_incl[j] += w;
                }
            }
        }
        // Round-off in the weight sum can push a saturated inclusion a few
        // ulps past 1; renormalize and clamp.
        for incl in gamma_incl.iter_mut().chain(eta_incl.iter_mut()) {
            *incl = (*incl / weight_sum).clamp(0.0, 1.0);
        }

        let mut config_echo = config.clone();
        config_echo.marglik_method = evaluator.method();
        Ok(SmcResult {
            schema_version: SCHEMA_VERSION,
            gamma_incl,
            eta_incl,
            lambda_schedule,
            acceptance_rates,
            log_evidence: system.log_evidence,
            stage_wall_times_s,
            config: config_echo,
        })
    };

    match config.workers {
        Some(workers) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            pool.install(body)
        }
        None => body(),
    }
}
