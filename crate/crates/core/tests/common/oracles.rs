//! Independent oracles for the closed-form KL and the latent statistics.

use latent_drive::losses::kl_gaussian;
use latent_drive::metrics::{predictivity_rho, temporal_coherence_xi};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Monte Carlo `E_q[log q(z) - log p(z)]` with antithetic pairs.
pub fn kl_monte_carlo(mu: &[f64], log_var: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples / 2 {
        // One draw per pair; the second sample mirrors it.
        let eps: Vec<f64> = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
        for sign in [1.0, -1.0] {
            let mut log_ratio = 0.0;
            for ((&m, &lv), &e) in mu.iter().zip(log_var).zip(&eps) {
                let z = m + (0.5 * lv).exp() * sign * e;
                // log N(z | m, e^lv) - log N(z | 0, 1); the 2π terms cancel.
                log_ratio += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
            }
            acc += log_ratio;
        }
    }
    acc / (2 * (samples / 2)) as f64
}

/// Largest relative gap between the closed form and Monte Carlo over
/// `draws` random Gaussians of `dim` dimensions.
pub fn kl_worst_relative_error(draws: usize, dim: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let exact = kl_gaussian(&mu, &lv).unwrap();
        let mc = kl_monte_carlo(&mu, &lv, samples, &mut rng);
        worst = worst.max((exact - mc).abs() / exact);
    }
    worst
}

/// Trajectories following `z(t+2) = a·z(t) + b·z(t+1)` with per-dimension
/// coefficients and random starts.
pub fn linear_recurrence(seqs: usize, len: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<(f64, f64)> = (0..width)
        .map(|_| (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
        .collect();
    (0..seqs)
        .map(|_| {
            let mut t: Vec<f64> = (0..2 * width).map(|_| rng.random_range(-1.0..1.0)).collect();
            for k in 2..len {
                for d in 0..width {
                    let v = coef[d].0 * t[(k - 2) * width + d] + coef[d].1 * t[(k - 1) * width + d];
                    t.push(v);
                }
            }
            t
        })
        .collect()
}

pub fn iid_noise(seqs: usize, len: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..seqs)
        .map(|_| (0..len * width).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// `(ρ on a recurrence, ρ on noise, ξ on noise)`.
pub fn latent_stat_anchors(seed: u64) -> (f64, f64, f64) {
    let width = 8;
    let rec = linear_recurrence(500, 16, width, seed);
    let noise = iid_noise(2000, 20, width, seed + 1);
    (
        predictivity_rho(width, &rec, seed).unwrap(),
        predictivity_rho(width, &noise, seed).unwrap(),
        temporal_coherence_xi(width, &noise).unwrap(),
    )
}
