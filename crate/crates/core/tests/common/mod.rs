//! Shared fixtures: a tiny architecture, deterministic data and a central
//! finite-difference oracle for reverse-mode gradients.
#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;

use latent_drive::losses::FrameBatch;
use latent_drive::networks::{
    ArchConfig, Bindings, ConvSpec, DecoderConfig, EncoderConfig, LatentLayout, Model, PredictorConfig,
};
use latent_drive::tensor::{Tape, Tensor, Var};
use latent_drive::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

/// 8×8 frames, one conv each way, 6 latent units split 2/2/2.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        resolution: 8,
        layout: LatentLayout::new(6, 2, 2).unwrap(),
        encoder: EncoderConfig {
            convs: vec![ConvSpec::new(3, 2)],
            dense: vec![5],
        },
        decoder: DecoderConfig {
            dense: vec![5],
            start_channels: 2,
            deconvs: vec![ConvSpec::new(3, 2)],
            output_kernel: 3,
        },
        predictor: PredictorConfig {
            inputs: 3,
            outputs: 2,
            stacked: 1,
        },
    }
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

pub fn mask(n: usize, density: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(density)))).collect();
    // Both classes present.
    m[0] = 1.0;
    m[n - 1] = 0.0;
    m
}

/// Batch of `n` random frames for `arch`, with masks, at `(seq, t0..)`.
pub fn frame_batch(arch: &ArchConfig, n: usize, t0: usize, seed: u64) -> FrameBatch<f64> {
    let r = arch.resolution;
    FrameBatch {
        images: uniform(&[n, 3, r, r], 0.0, 1.0, seed),
        cars: Some(mask(n * r * r, 0.1, seed + 1)),
        lanes: Some(mask(n * r * r, 0.2, seed + 2)),
        positions: Some((0..n).map(|i| (i, t0)).collect()),
    }
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= REL_TOL * a.abs().max(n.abs()).max(1e-2)
}

/// Checks `d f / d inputs` from `backward` against central differences.
pub fn check_op<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().tracked()).collect();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    assert_eq!(tape.value(out).len(), 1, "check_op needs a scalar output");
    tape.backward(out).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            assert!(
                close(a, numeric),
                "input {i} element {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

/// Checks parameter gradients of a model-level scalar loss. At most
/// `per_tensor` elements of each parameter tensor are probed.
pub fn check_model<F>(model: &Model<f64>, per_tensor: usize, loss: F) -> usize
where
    F: Fn(&mut Tape<f64>, &Model<f64>, &Bindings) -> Result<Var>,
{
    let eval = |m: &Model<f64>| -> f64 {
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, false);
        let out = loss(&mut tape, m, &b).unwrap();
        tape.value(out)[0]
    };
    let mut analytic = model.clone();
    let mut tape = Tape::new();
    let b = analytic.params.bind(&mut tape, true);
    let out = loss(&mut tape, &analytic, &b).unwrap();
    tape.backward(out).unwrap();
    analytic.params.zero_grads();
    analytic.params.absorb_grads(&tape, &b).unwrap();

    let mut probed = 0;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let grad = analytic.params.get(&name).unwrap().grad().unwrap().to_vec();
        let n = grad.len();
        let step = (n / per_tensor.max(1)).max(1);
        for j in (0..n).step_by(step).take(per_tensor) {
            let mut plus = model.clone();
            plus.params.get_mut(&name).unwrap().data_mut()[j] += STEP;
            let mut minus = model.clone();
            minus.params.get_mut(&name).unwrap().data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            assert!(
                close(grad[j], numeric),
                "{name}[{j}]: analytic {} numeric {numeric}",
                grad[j]
            );
            probed += 1;
        }
    }
    probed
}

/// Analytic parameter gradients, keyed by parameter name.
pub fn param_grads<F>(model: &Model<f64>, loss: F) -> Vec<(String, Vec<f64>)>
where
    F: Fn(&mut Tape<f64>, &Model<f64>, &Bindings) -> Result<Var>,
{
    let mut m = model.clone();
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, true);
    let out = loss(&mut tape, &m, &b).unwrap();
    tape.backward(out).unwrap();
    m.params.zero_grads();
    m.params.absorb_grads(&tape, &b).unwrap();
    m.params
        .iter()
        .map(|(n, t)| (n.clone(), t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)))
        .collect()
}
