//! Shared helpers for module tests: randomized instances and the
//! finite-difference oracle.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datagen::block_group_map;
use crate::link::Link;
use crate::model::{Dataset, PriorConfig, Theta};

/// Standard-normal design with responses drawn from a random full-model fit;
/// contiguous group blocks.
pub fn random_dataset(n: usize, p: usize, q: usize, r: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = r + q + p;
    let mut design = Array2::zeros((n, m));
    for v in design.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let beta: Vec<f64> = (0..m)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y: Vec<u8> = (0..n)
        .map(|i| {
            let s: f64 = design.row(i).iter().zip(&beta).map(|(x, b)| x * b).sum();
            u8::from(rng.random_bool(Link::Probit.cdf(s)))
        })
        .collect();
    let z = design.slice(ndarray::s![.., 0..r]).to_owned();
    let u = design.slice(ndarray::s![.., r..r + q]).to_owned();
    let x = design.slice(ndarray::s![.., r + q..]).to_owned();
    Dataset::new(y, x, u, z, block_group_map(p, q)).expect("valid test dataset")
}

pub fn flat_prior(data: &Dataset, sigma2: f64, link: Link) -> PriorConfig {
    PriorConfig::flat(data.q(), data.p(), sigma2, link).expect("valid prior")
}

/// A uniformly random constraint-respecting indicator pair.
pub fn random_theta<R: Rng>(group_map: &[usize], q: usize, rng: &mut R) -> Theta {
    let gamma: Vec<bool> = (0..q).map(|_| rng.random_bool(0.5)).collect();
    let eta: Vec<bool> = group_map
        .iter()
        .map(|&g| gamma[g] && rng.random_bool(0.5))
        .collect();
    Theta { gamma, eta }
}

/// Central-difference gradient, step `h`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Four-point central-difference Hessian, step `h`.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut hess = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let mut pp = x.to_vec();
            let mut pm = x.to_vec();
            let mut mp = x.to_vec();
            let mut mm = x.to_vec();
            pp[i] += h;
            pp[j] += h;
            pm[i] += h;
            pm[j] -= h;
            mp[i] -= h;
            mp[j] += h;
            mm[i] -= h;
            mm[j] -= h;
            let v = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}
