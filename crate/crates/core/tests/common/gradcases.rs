//! Finite-difference gradient cases, shared by the test suite and the
//! acceptance harness.

use super::{check_model, check_op, frame_batch, mask, normal, tiny_arch, uniform};
use latent_drive::losses::{loss_net1, loss_net2, loss_net3, loss_net4, ConceptLossConfig, LossWeights};
use latent_drive::networks::{Concept, Model, ModelKind};
use latent_drive::tensor::{Tape, Tensor, Var};

/// Reduces any tensor to a scalar with fixed, non-uniform weights so every
/// output element gets a distinct upstream gradient.
fn weigh(tape: &mut Tape<f64>, y: Var) -> latent_drive::Result<Var> {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7) % 11) as f64 / 10.0).collect();
    let shape = tape.shape(y).to_vec();
    let c = tape.constant(&shape, w)?;
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

pub fn dense_with_and_without_bias() {
    let x = uniform(&[3, 4], -1.0, 1.0, 1);
    let w = uniform(&[4, 5], -1.0, 1.0, 2);
    let b = uniform(&[5], -1.0, 1.0, 3);
    check_op(&[x.clone(), w.clone(), b], |t, v| {
        let y = t.dense(v[0], v[1], Some(v[2]))?;
        weigh(t, y)
    });
    check_op(&[x, w], |t, v| {
        let y = t.dense(v[0], v[1], None)?;
        weigh(t, y)
    });
}

pub fn conv2d_strides_and_padding() {
    for (stride, pad, k, h) in [(1, 0, 3, 5), (1, 1, 3, 5), (2, 1, 3, 6), (2, 2, 5, 7)] {
        let x = uniform(&[2, 2, h, h], -1.0, 1.0, 10 + h as u64);
        let kern = uniform(&[3, 2, k, k], -1.0, 1.0, 20 + k as u64);
        check_op(&[x, kern], |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            weigh(t, y)
        });
    }
}

pub fn transpose_conv2d_strides_and_output_padding() {
    for (stride, pad, op, k) in [(1, 1, 0, 3), (2, 1, 1, 3), (2, 2, 1, 5), (2, 1, 0, 3)] {
        let x = uniform(&[2, 3, 3, 3], -1.0, 1.0, 30 + k as u64);
        let kern = uniform(&[3, 2, k, k], -1.0, 1.0, 40 + op as u64);
        check_op(&[x, kern], |t, v| {
            let y = t.transpose_conv2d(v[0], v[1], stride, pad, op)?;
            weigh(t, y)
        });
    }
}

pub fn channel_bias_and_elementwise() {
    let x = uniform(&[2, 3, 2, 2], -1.0, 1.0, 50);
    let b = uniform(&[3], -1.0, 1.0, 51);
    check_op(&[x, b], |t, v| {
        let y = t.channel_bias(v[0], v[1])?;
        weigh(t, y)
    });
    let a = uniform(&[2, 3], -2.0, 2.0, 52);
    let c = uniform(&[2, 3], -2.0, 2.0, 53);
    check_op(&[a.clone(), c.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let m = t.mul(s, d)?;
        let m = t.mul(m, v[1])?;
        let y = t.affine(m, 0.7, -0.2);
        weigh(t, y)
    });
}

pub fn activations() {
    // Keep clear of the relu kink.
    let mut x = uniform(&[4, 5], -2.0, 2.0, 60);
    x.data_mut().iter_mut().filter(|v| v.abs() < 0.05).for_each(|v| *v += 0.2);
    check_op(&[x.clone()], |t, v| {
        let y = t.relu(v[0]);
        weigh(t, y)
    });
    check_op(&[x.clone()], |t, v| {
        let y = t.sigmoid(v[0]);
        weigh(t, y)
    });
    check_op(&[x], |t, v| {
        let y = t.tanh(v[0]);
        weigh(t, y)
    });
}

pub fn reshape_and_slice() {
    let x = uniform(&[2, 12], -1.0, 1.0, 70);
    check_op(std::slice::from_ref(&x), |t, v| {
        let r = t.reshape(v[0], &[2, 3, 2, 2])?;
        let r = t.reshape(r, &[2, 12])?;
        let s = t.slice_cols(r, 3, 5)?;
        weigh(t, s)
    });
}

pub fn reparameterize_kl_and_regression_losses() {
    let mu = uniform(&[3, 4], -1.0, 1.0, 80);
    let lv = uniform(&[3, 4], -1.5, 1.0, 81);
    let noise = normal(&[3, 4], 82);
    check_op(&[mu.clone(), lv.clone()], |t, v| {
        let z = t.reparameterize(v[0], v[1], &noise)?;
        weigh(t, z)
    });
    check_op(&[mu.clone(), lv], |t, v| t.kl_gaussian(v[0], v[1]));
    let target = uniform(&[3, 4], -1.0, 1.0, 83).into_data();
    check_op(std::slice::from_ref(&mu), |t, v| t.half_sse(v[0], &target));
    check_op(&[mu], |t, v| t.mse(v[0], &target));
}

pub fn weighted_bce_per_sample_normalization() {
    let prob = uniform(&[3, 1, 4, 4], 0.05, 0.95, 90);
    let target = mask(48, 0.3, 91);
    for p in [0.1, 0.5, 0.9] {
        check_op(std::slice::from_ref(&prob), |t, v| t.weighted_bce(v[0], &target, p));
    }
}

pub fn composite_through_layers() {
    // Conv, bias, relu, dense, sigmoid, half-SSE chained on one tape.
    let x = uniform(&[2, 1, 4, 4], -1.0, 1.0, 100);
    let k = uniform(&[2, 1, 3, 3], -1.0, 1.0, 101);
    let cb = uniform(&[2], 0.1, 0.5, 102);
    let w = uniform(&[8, 3], -1.0, 1.0, 103);
    let target = uniform(&[2, 3], 0.0, 1.0, 104).into_data();
    check_op(&[x, k, cb, w], |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        let y = t.channel_bias(y, v[2])?;
        let y = t.tanh(y);
        let y = t.reshape(y, &[2, 8])?;
        let y = t.dense(y, v[3], None)?;
        let y = t.sigmoid(y);
        t.half_sse(y, &target)
    });
}

/// Fresh parameters plus jitter: zero-initialized biases put many ReLU inputs
/// exactly on the kink, where finite differences are one-sided.
fn tiny_model(kind: ModelKind, seed: u64) -> Model<f64> {
    let mut m: Model<f64> = Model::<f32>::init(kind, &tiny_arch(), seed).unwrap().cast();
    for (i, (_, t)) in m.params.iter_mut().enumerate() {
        let j = uniform(t.shape(), -0.1, 0.1, seed * 1000 + i as u64);
        t.data_mut().iter_mut().zip(j.data()).for_each(|(v, d)| *v += d);
    }
    m
}

fn concepts() -> ConceptLossConfig {
    ConceptLossConfig::new(0.4, 0.5, 4.0).unwrap()
}

pub fn net1_loss_parameter_gradients() {
    let m = tiny_model(ModelKind::Net1, 1);
    let batch = frame_batch(&m.arch, 2, 0, 5);
    let noise = normal(&[2, 6], 6);
    let n = check_model(&m, 6, |t, m, b| {
        Ok(loss_net1(t, m, b, &batch, &noise, 0.3, &LossWeights::default())?.total)
    });
    assert!(n > 40);
}

pub fn net2_loss_parameter_gradients() {
    let m = tiny_model(ModelKind::Net2, 2);
    let batch = frame_batch(&m.arch, 2, 0, 7);
    let noise = normal(&[2, 6], 8);
    check_model(&m, 4, |t, m, b| {
        Ok(loss_net2(t, m, b, &batch, &noise, 0.6, &LossWeights::default(), &concepts())?.total)
    });
}

pub fn net3_loss_parameter_gradients() {
    let m = tiny_model(ModelKind::Net3, 3);
    let arch = m.arch.clone();
    let x = frame_batch(&arch, 2, 0, 9);
    let x1 = frame_batch(&arch, 2, 1, 10);
    let x2 = frame_batch(&arch, 2, 2, 11);
    let (n0, n1) = (normal(&[2, 6], 12), normal(&[2, 6], 13));
    check_model(&m, 3, |t, m, b| {
        Ok(loss_net3(t, m, b, [&x, &x1, &x2], [&n0, &n1], 0.8, &LossWeights::default(), &concepts())?.total)
    });
}

pub fn concept_decoder_from_latent_gradients() {
    let m = tiny_model(ModelKind::Net2, 4);
    let z = normal(&[2, 6], 14);
    let target = mask(2 * 64, 0.2, 15);
    check_model(&m, 4, |t, m, b| {
        let zv = t.leaf(&z);
        let y = m.decode_concept_from_latent(t, b, zv, Concept::Lanes)?;
        t.weighted_bce(y, &target, 0.5)
    });
}

pub fn predictor_loss_parameter_gradients() {
    let m = tiny_model(ModelKind::Net4, 5);
    let inputs: Vec<Tensor<f64>> = (0..3).map(|i| normal(&[2, 6], 20 + i)).collect();
    let targets: Vec<Tensor<f64>> = (0..2).map(|i| normal(&[2, 6], 30 + i)).collect();
    let n = check_model(&m, 4, |t, m, b| {
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x)).collect();
        let preds = m.predictor()?.forward(t, b, &vars)?;
        loss_net4(t, &preds, &targets)
    });
    assert!(n > 20);
}

pub const CASES: &[(&str, fn())] = &[
    ("dense_with_and_without_bias", dense_with_and_without_bias),
    ("conv2d_strides_and_padding", conv2d_strides_and_padding),
    ("transpose_conv2d_strides_and_output_padding", transpose_conv2d_strides_and_output_padding),
    ("channel_bias_and_elementwise", channel_bias_and_elementwise),
    ("activations", activations),
    ("reshape_and_slice", reshape_and_slice),
    ("reparameterize_kl_and_regression_losses", reparameterize_kl_and_regression_losses),
    ("weighted_bce_per_sample_normalization", weighted_bce_per_sample_normalization),
    ("composite_through_layers", composite_through_layers),
    ("net1_loss_parameter_gradients", net1_loss_parameter_gradients),
    ("net2_loss_parameter_gradients", net2_loss_parameter_gradients),
    ("net3_loss_parameter_gradients", net3_loss_parameter_gradients),
    ("concept_decoder_from_latent_gradients", concept_decoder_from_latent_gradients),
    ("predictor_loss_parameter_gradients", predictor_loss_parameter_gradients),
];
