//! Data, indicator and prior types for the bi-level binary regression model,
//! with exact log-likelihood, log-prior, and posterior derivative evaluations.
//!
//! The model: `P(Y_i = 1 | beta, theta) = F(sum_j eta_j beta^x_j x_ij +
//! sum_k gamma_k beta^u_k u_ik + sum_l beta^z_l z_il)`, where `gamma` selects
//! groups, `eta` selects individual variables, and a variable may be active
//! only when its group is (`eta_j <= gamma_{g(j)}`).

use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::link::Link;

/// Response vector plus design matrices, stored with columns concatenated in
/// canonical order `[Z | U | X]` (always-included block first, then group
/// variables, then individual variables).
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<bool>,
    signs: Vec<f64>,
    design: Array2<f64>,
    group_map: Vec<usize>,
    p: usize,
    q: usize,
    r: usize,
}

impl Dataset {
    /// Builds a dataset from the three design blocks.
    ///
    /// `group_map` is 0-based (`group_map[j]` is the group of variable `j`);
    /// the on-disk sidecar uses 1-based indices, converted at the I/O
    /// boundary. `n = 0` is accepted so a flat-likelihood posterior (no data)
    /// can be represented.
    pub fn new(
        y: Vec<u8>,
        x: Array2<f64>,
        u: Array2<f64>,
        z: Array2<f64>,
        group_map: Vec<usize>,
    ) -> Result<Self> {
        let n = y.len();
        let (p, q, r) = (x.ncols(), u.ncols(), z.ncols());
        if p == 0 || q == 0 {
            return Err(Error::InvalidInput("p and q must be at least 1".into()));
        }
        for (name, rows) in [("X", x.nrows()), ("U", u.nrows()), ("Z", z.nrows())] {
            if rows != n {
                return Err(Error::Dim(format!(
                    "{name} has {rows} rows but y has length {n}"
                )));
            }
        }
        if group_map.len() != p {
            return Err(Error::Dim(format!(
                "group_map has length {} but p = {p}",
                group_map.len()
            )));
        }
        if let Some(&g) = group_map.iter().find(|&&g| g >= q) {
            return Err(Error::InvalidInput(format!(
                "group index {g} out of range for q = {q}"
            )));
        }
        let mut seen = vec![false; q];
        for &g in &group_map {
            seen[g] = true;
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidInput(format!("group {k} has no variables")));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "response entries must be 0 or 1, got {bad}"
            )));
        }
        for m in [&x, &u, &z] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("design entries must be finite".into()));
            }
        }

        let design = concatenate(Axis(1), &[z.view(), u.view(), x.view()])
            .expect("row counts already checked")
            .as_standard_layout()
            .into_owned();
        let y: Vec<bool> = y.into_iter().map(|v| v == 1).collect();
        let signs = y.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        Ok(Self {
            y,
            signs,
            design,
            group_map,
            p,
            q,
            r,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Total number of design columns, `r + q + p`.
    pub fn total_cols(&self) -> usize {
        self.r + self.q + self.p
    }

    pub fn y(&self) -> &[bool] {
        &self.y
    }

    /// Per-observation signs `2y - 1`.
    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// The concatenated `n x (r+q+p)` design, columns `[Z | U | X]`.
    pub fn design(&self) -> &Array2<f64> {
        &self.design
    }

    /// 0-based group of each individual variable.
    pub fn group_map(&self) -> &[usize] {
        &self.group_map
    }

    /// Canonical column index of `z_l`.
    pub fn z_col(&self, l: usize) -> usize {
        debug_assert!(l < self.r);
        l
    }

    /// Canonical column index of `u_k`.
    pub fn u_col(&self, k: usize) -> usize {
        debug_assert!(k < self.q);
        self.r + k
    }

    /// Canonical column index of `x_j`.
    pub fn x_col(&self, j: usize) -> usize {
        debug_assert!(j < self.p);
        self.r + self.q + j
    }
}

/// Pair of indicator vectors: `gamma` over groups, `eta` over variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Theta {
    pub gamma: Vec<bool>,
    pub eta: Vec<bool>,
}

/// Packed bitmask of a `Theta`, used as a memoization key.
pub type ThetaKey = Vec<u64>;

impl Theta {
    /// Builds a `Theta`, rejecting bi-level constraint violations.
    pub fn new(gamma: Vec<bool>, eta: Vec<bool>, group_map: &[usize]) -> Result<Self> {
        let theta = Self { gamma, eta };
        theta.check(group_map)?;
        Ok(theta)
    }

    pub fn all_zero(q: usize, p: usize) -> Self {
        Self {
            gamma: vec![false; q],
            eta: vec![false; p],
        }
    }

    pub fn full(q: usize, p: usize) -> Self {
        Self {
            gamma: vec![true; q],
            eta: vec![true; p],
        }
    }

    /// `eta_j <= gamma_{g(j)}` for every variable `j`.
    pub fn satisfies_constraint(&self, group_map: &[usize]) -> bool {
        self.eta.len() == group_map.len()
            && self
                .eta
                .iter()
                .zip(group_map)
                .all(|(&e, &g)| !e || self.gamma[g])
    }

    pub fn check(&self, group_map: &[usize]) -> Result<()> {
        if self.eta.len() != group_map.len() {
            return Err(Error::Dim(format!(
                "eta has length {} but group_map has length {}",
                self.eta.len(),
                group_map.len()
            )));
        }
        if !self.satisfies_constraint(group_map) {
            return Err(Error::Constraint(
                "eta selects a variable whose group is inactive".into(),
            ));
        }
        Ok(())
    }

    /// Number of active coordinates excluding the always-included block.
    pub fn active_count(&self) -> usize {
        self.gamma.iter().filter(|&&g| g).count() + self.eta.iter().filter(|&&e| e).count()
    }

    /// Packs the indicators into a bitmask key (gamma bits first).
    pub fn key(&self) -> ThetaKey {
        let total = self.gamma.len() + self.eta.len();
        let mut words = vec![0u64; total.div_ceil(64)];
        for (i, &b) in self.gamma.iter().chain(self.eta.iter()).enumerate() {
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }

    /// Draws from the hierarchical prior: `gamma_k ~ Bern(p^gamma_k)`, then
    /// `eta_j ~ Bern(p^eta_j)` when its group is active, else 0.
    pub fn sample_from_prior<R: Rng>(
        prior: &PriorConfig,
        group_map: &[usize],
        rng: &mut R,
    ) -> Self {
        let gamma: Vec<bool> = prior.p_gamma.iter().map(|&pk| rng.random_bool(pk)).collect();
        let eta: Vec<bool> = prior
            .p_eta
            .iter()
            .zip(group_map)
            .map(|(&pj, &g)| gamma[g] && rng.random_bool(pj))
            .collect();
        Self { gamma, eta }
    }
}

/// Prior hyperparameters: shared coefficient variance, group and conditional
/// variable inclusion probabilities, and the link function.
#[derive(Debug, Clone)]
pub struct PriorConfig {
    pub sigma2: f64,
    pub p_gamma: Vec<f64>,
    pub p_eta: Vec<f64>,
    pub link: Link,
}

impl PriorConfig {
    pub fn new(sigma2: f64, p_gamma: Vec<f64>, p_eta: Vec<f64>, link: Link) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma2 must be positive and finite, got {sigma2}"
            )));
        }
        for (name, probs) in [("p_gamma", &p_gamma), ("p_eta", &p_eta)] {
            if let Some(&bad) = probs.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::InvalidInput(format!(
                    "{name} entries must lie strictly in (0,1), got {bad}"
                )));
            }
        }
        Ok(Self {
            sigma2,
            p_gamma,
            p_eta,
            link,
        })
    }

    /// All inclusion probabilities set to 1/2.
    pub fn flat(q: usize, p: usize, sigma2: f64, link: Link) -> Result<Self> {
        Self::new(sigma2, vec![0.5; q], vec![0.5; p], link)
    }

    fn check_dims(&self, data: &Dataset) -> Result<()> {
        if self.p_gamma.len() != data.q() || self.p_eta.len() != data.p() {
            return Err(Error::Dim(format!(
                "prior sized for (q={}, p={}) but data has (q={}, p={})",
                self.p_gamma.len(),
                self.p_eta.len(),
                data.q(),
                data.p()
            )));
        }
        Ok(())
    }
}

/// Full-length regression coefficients for the three blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefVector {
    pub beta_x: Vec<f64>,
    pub beta_u: Vec<f64>,
    pub beta_z: Vec<f64>,
}

impl CoefVector {
    pub fn zeros(p: usize, q: usize, r: usize) -> Self {
        Self {
            beta_x: vec![0.0; p],
            beta_u: vec![0.0; q],
            beta_z: vec![0.0; r],
        }
    }

    fn check_dims(&self, data: &Dataset) -> Result<()> {
        if self.beta_x.len() != data.p()
            || self.beta_u.len() != data.q()
            || self.beta_z.len() != data.r()
        {
            return Err(Error::Dim(format!(
                "coefficients sized ({}, {}, {}) but data has (p={}, q={}, r={})",
                self.beta_x.len(),
                self.beta_u.len(),
                self.beta_z.len(),
                data.p(),
                data.q(),
                data.r()
            )));
        }
        Ok(())
    }
}

/// Canonical design-column indices of the coordinates active under a `Theta`:
/// the z-block, then active u-columns in group order, then active x-columns
/// in variable order.
#[derive(Debug, Clone)]
pub struct ActiveSet {
    pub cols: Vec<usize>,
}

impl ActiveSet {
    pub fn new(theta: &Theta, r: usize) -> Self {
        let q = theta.gamma.len();
        let mut cols: Vec<usize> = (0..r).collect();
        cols.extend(theta.gamma.iter().enumerate().filter(|(_, &g)| g).map(|(k, _)| r + k));
        cols.extend(theta.eta.iter().enumerate().filter(|(_, &e)| e).map(|(j, _)| r + q + j));
        Self { cols }
    }

    /// `d_theta = r + sum(gamma) + sum(eta)`.
    pub fn d(&self) -> usize {
        self.cols.len()
    }
}

/// Active-coordinate view of a dataset: the gathered `n x d` design for one
/// `Theta`, with the negative log-posterior `h` and its derivatives.
///
/// `h(beta) = -log L(beta, theta) - log N(beta; 0, sigma2 I_d)`, smooth and
/// strictly convex for both links.
#[derive(Debug, Clone)]
pub struct ActiveDesign {
    cols: Array2<f64>,
    signs: Vec<f64>,
    sigma2: f64,
    link: Link,
}

impl ActiveDesign {
    pub fn new(theta: &Theta, data: &Dataset, prior: &PriorConfig) -> Result<Self> {
        check_theta_dims(theta, data)?;
        theta.check(data.group_map())?;
        prior.check_dims(data)?;
        let active = ActiveSet::new(theta, data.r());
        Ok(Self::from_active_set(&active, data, prior))
    }

    pub(crate) fn from_active_set(active: &ActiveSet, data: &Dataset, prior: &PriorConfig) -> Self {
        let n = data.n();
        let d = active.d();
        let mut cols = Array2::zeros((n, d));
        for (a, &c) in active.cols.iter().enumerate() {
            cols.column_mut(a).assign(&data.design().column(c));
        }
        Self {
            cols,
            signs: data.signs().to_vec(),
            sigma2: prior.sigma2,
            link: prior.link,
        }
    }

    pub fn d(&self) -> usize {
        self.cols.ncols()
    }

    pub fn n(&self) -> usize {
        self.signs.len()
    }

    fn predictor(&self, i: usize, beta: &[f64]) -> f64 {
        let row = self.cols.row(i);
        let row = row.as_slice().expect("row-major layout");
        row.iter().zip(beta).map(|(x, b)| x * b).sum()
    }

    /// `h(beta)`, the negative log-posterior kernel at the active coordinates.
    pub fn h(&self, beta: &[f64]) -> f64 {
        assert_eq!(beta.len(), self.d(), "beta length must equal d");
        let d = self.d() as f64;
        let mut nll = 0.0;
        for i in 0..self.n() {
            let u = self.signs[i] * self.predictor(i, beta);
            nll -= self.link.log_cdf(u);
        }
        let sq: f64 = beta.iter().map(|b| b * b).sum();
        nll + 0.5 * sq / self.sigma2
            + 0.5 * d * (2.0 * std::f64::consts::PI * self.sigma2).ln()
    }

    /// Analytic gradient and Hessian of `h` at `beta`.
    ///
    /// The Hessian is `sum_i v(u_i) d_i d_i^T + I/sigma2` with `v > 0`, hence
    /// symmetric positive definite everywhere.
    pub fn grad_hess(&self, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        assert_eq!(beta.len(), self.d(), "beta length must equal d");
        let d = self.d();
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..self.n() {
            let row = self.cols.row(i);
            let row = row.as_slice().expect("row-major layout");
            let t = self.signs[i];
            let u = t * row.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>();
            let a = -t * self.link.pdf_cdf_ratio(u);
            let v = self.link.nll_curvature(u);
            for b in 0..d {
                grad[b] += a * row[b];
                let w = v * row[b];
                for c in b..d {
                    hess[(b, c)] += w * row[c];
                }
            }
        }
        for b in 0..d {
            grad[b] += beta[b] / self.sigma2;
            hess[(b, b)] += 1.0 / self.sigma2;
            for c in 0..b {
                hess[(b, c)] = hess[(c, b)];
            }
        }
        (grad, hess)
    }
}

fn check_theta_dims(theta: &Theta, data: &Dataset) -> Result<()> {
    if theta.gamma.len() != data.q() || theta.eta.len() != data.p() {
        return Err(Error::Dim(format!(
            "theta sized (q={}, p={}) but data has (q={}, p={})",
            theta.gamma.len(),
            theta.eta.len(),
            data.q(),
            data.p()
        )));
    }
    Ok(())
}

/// Exact log-likelihood `sum_i log P(Y_i = y_i | beta, theta)` under the
/// masked linear predictor.
pub fn log_likelihood(
    beta: &CoefVector,
    theta: &Theta,
    data: &Dataset,
    link: Link,
) -> Result<f64> {
    beta.check_dims(data)?;
    check_theta_dims(theta, data)?;
    theta.check(data.group_map())?;

    // Active (column, coefficient) pairs; masked coordinates contribute 0.
    let mut terms: Vec<(usize, f64)> = Vec::with_capacity(data.total_cols());
    for (l, &b) in beta.beta_z.iter().enumerate() {
        terms.push((data.z_col(l), b));
    }
    for (k, &b) in beta.beta_u.iter().enumerate() {
        if theta.gamma[k] {
            terms.push((data.u_col(k), b));
        }
    }
    for (j, &b) in beta.beta_x.iter().enumerate() {
        if theta.eta[j] {
            terms.push((data.x_col(j), b));
        }
    }

    let mut total = 0.0;
    for i in 0..data.n() {
        let row = data.design().row(i);
        let row = row.as_slice().expect("row-major layout");
        let s: f64 = terms.iter().map(|&(c, b)| row[c] * b).sum();
        total += link.log_cdf(data.signs()[i] * s);
    }
    Ok(total)
}

/// Log prior mass of an indicator pair; `-inf` iff the bi-level constraint is
/// violated (the "spike" branch of the spike-and-slab prior).
pub fn log_prior_theta(theta: &Theta, prior: &PriorConfig, group_map: &[usize]) -> Result<f64> {
    if theta.gamma.len() != prior.p_gamma.len() || theta.eta.len() != prior.p_eta.len() {
        return Err(Error::Dim(format!(
            "theta sized (q={}, p={}) but prior has (q={}, p={})",
            theta.gamma.len(),
            theta.eta.len(),
            prior.p_gamma.len(),
            prior.p_eta.len()
        )));
    }
    if !theta.satisfies_constraint(group_map) {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total = 0.0;
    for (&g, &pk) in theta.gamma.iter().zip(&prior.p_gamma) {
        total += if g { pk.ln() } else { (1.0 - pk).ln() };
    }
    for (j, (&e, &pj)) in theta.eta.iter().zip(&prior.p_eta).enumerate() {
        if theta.gamma[group_map[j]] {
            total += if e { pj.ln() } else { (1.0 - pj).ln() };
        }
    }
    Ok(total)
}

/// `h_theta(beta_theta) = -log{L(beta, theta) p(beta_theta)}` evaluated at
/// the active coordinates only (canonical order: z, then active u, then
/// active x).
pub fn neg_log_posterior_h(
    beta_active: &[f64],
    theta: &Theta,
    data: &Dataset,
    prior: &PriorConfig,
) -> Result<f64> {
    let ad = ActiveDesign::new(theta, data, prior)?;
    if beta_active.len() != ad.d() {
        return Err(Error::Dim(format!(
            "beta_active has length {} but d_theta = {}",
            beta_active.len(),
            ad.d()
        )));
    }
    Ok(ad.h(beta_active))
}

/// Analytic gradient and Hessian of `h_theta` at `beta_active`.
pub fn grad_hess_h(
    beta_active: &[f64],
    theta: &Theta,
    data: &Dataset,
    prior: &PriorConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ad = ActiveDesign::new(theta, data, prior)?;
    if beta_active.len() != ad.d() {
        return Err(Error::Dim(format!(
            "beta_active has length {} but d_theta = {}",
            beta_active.len(),
            ad.d()
        )));
    }
    Ok(ad.grad_hess(beta_active))
}
