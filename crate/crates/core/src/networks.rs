//! The four networks: a variational autoencoder (Net1), the topological
//! autoencoder with concept decoders on partitioned latents (Net2), the
//! temporal autoencoder adding an order-2 latent recurrence (Net3) and the
//! stacked + parallel GRU latent predictor (Net4).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Checkpoint, TensorBlock};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Threshold turning a probability map into a binary mask.
pub const MASK_THRESHOLD: f64 = 0.5;

// ---- latent partition ------------------------------------------------------

/// Partition `[z_C, z̃, z_L]` of a latent vector: cars first, generic visual
/// features in the middle, lanes last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct LatentLayout {
    total: usize,
    cars: usize,
    lanes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    total: usize,
    cars: usize,
    lanes: usize,
}

impl TryFrom<RawLayout> for LatentLayout {
    type Error = Error;
    fn try_from(r: RawLayout) -> Result<Self> {
        LatentLayout::new(r.total, r.cars, r.lanes)
    }
}

impl From<LatentLayout> for RawLayout {
    fn from(l: LatentLayout) -> Self {
        RawLayout {
            total: l.total,
            cars: l.cars,
            lanes: l.lanes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Concept {
    Cars,
    Lanes,
}

impl LatentLayout {
    pub fn new(total: usize, cars: usize, lanes: usize) -> Result<Self> {
        if cars == 0 || lanes == 0 || cars + lanes >= total {
            return Err(Error::Config(format!(
                "latent layout needs 0 < cars, 0 < lanes and cars + lanes < total \
                 (got total={total}, cars={cars}, lanes={lanes})"
            )));
        }
        Ok(LatentLayout { total, cars, lanes })
    }

    /// 128 latents with 16 for each concept.
    pub fn full() -> Self {
        LatentLayout::new(128, 16, 16).unwrap()
    }

    /// 32 latents with 8 for each concept.
    pub fn desk() -> Self {
        LatentLayout::new(32, 8, 8).unwrap()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn cars(&self) -> usize {
        self.cars
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn middle(&self) -> usize {
        self.total - self.cars - self.lanes
    }

    pub fn range(&self, concept: Concept) -> Range<usize> {
        match concept {
            Concept::Cars => 0..self.cars,
            Concept::Lanes => self.total - self.lanes..self.total,
        }
    }

    pub fn middle_range(&self) -> Range<usize> {
        self.cars..self.total - self.lanes
    }

    pub fn width(&self, concept: Concept) -> usize {
        self.range(concept).len()
    }

    pub fn project<'a, T>(&self, z: &'a [T], concept: Concept) -> Result<&'a [T]> {
        if z.len() != self.total {
            return Err(Error::dim("project_latent", &[z.len()], &[self.total]));
        }
        Ok(&z[self.range(concept)])
    }
}

// ---- architecture configuration ------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Net1,
    Net2,
    Net3,
    Net4,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Net1 => 1,
            ModelKind::Net2 => 2,
            ModelKind::Net3 => 3,
            ModelKind::Net4 => 4,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            1 => ModelKind::Net1,
            2 => ModelKind::Net2,
            3 => ModelKind::Net3,
            4 => ModelKind::Net4,
            other => return Err(Error::Data(format!("unknown model kind {other}"))),
        })
    }

    pub fn has_concepts(self) -> bool {
        matches!(self, ModelKind::Net2 | ModelKind::Net3)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "net{}", self.code())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "net1" => Ok(ModelKind::Net1),
            "net2" => Ok(ModelKind::Net2),
            "net3" => Ok(ModelKind::Net3),
            "net4" => Ok(ModelKind::Net4),
            _ => Err(Error::Config(format!("unknown model kind '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, filters: usize) -> Self {
        ConvSpec {
            kernel,
            filters,
            stride: 2,
        }
    }

    fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn output_padding(&self) -> usize {
        self.stride - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Rgb,
    ProbabilityMap,
}

impl OutputKind {
    pub fn channels(self) -> usize {
        match self {
            OutputKind::Rgb => 3,
            OutputKind::ProbabilityMap => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub convs: Vec<ConvSpec>,
    pub dense: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Hidden dense widths before the dense layer that fills the start grid.
    pub dense: Vec<usize>,
    /// Channels of the grid the transposed convolutions start from.
    pub start_channels: usize,
    /// Hidden transposed convolutions; a final one maps to the output kind.
    pub deconvs: Vec<ConvSpec>,
    pub output_kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub inputs: usize,
    pub outputs: usize,
    pub stacked: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub resolution: usize,
    pub layout: LatentLayout,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub predictor: PredictorConfig,
}

impl ArchConfig {
    /// Layer pattern of the original 256×256 models.
    pub fn full() -> Self {
        ArchConfig {
            resolution: 256,
            layout: LatentLayout::full(),
            encoder: EncoderConfig {
                convs: vec![
                    ConvSpec::new(7, 16),
                    ConvSpec::new(7, 32),
                    ConvSpec::new(5, 32),
                    ConvSpec::new(5, 32),
                ],
                dense: vec![2048, 512],
            },
            decoder: DecoderConfig {
                dense: vec![2048],
                start_channels: 16,
                deconvs: vec![ConvSpec::new(5, 32), ConvSpec::new(5, 32), ConvSpec::new(7, 16)],
                output_kernel: 7,
            },
            predictor: PredictorConfig {
                inputs: 8,
                outputs: 4,
                stacked: 2,
            },
        }
    }

    /// Same topology with narrower layers, for 32×32 or 64×64 frames.
    pub fn desk(resolution: usize) -> Self {
        ArchConfig {
            resolution,
            layout: LatentLayout::desk(),
            encoder: EncoderConfig {
                convs: vec![
                    ConvSpec::new(7, 8),
                    ConvSpec::new(7, 16),
                    ConvSpec::new(5, 16),
                    ConvSpec::new(5, 16),
                ],
                dense: vec![256, 128],
            },
            decoder: DecoderConfig {
                dense: vec![128],
                start_channels: 16,
                deconvs: vec![ConvSpec::new(5, 16), ConvSpec::new(5, 16), ConvSpec::new(7, 8)],
                output_kernel: 7,
            },
            predictor: PredictorConfig {
                inputs: 8,
                outputs: 4,
                stacked: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.encoder.convs.len();
        if self.encoder.convs.iter().any(|c| c.stride != 2 || c.kernel % 2 == 0) {
            return Err(Error::Config("encoder convolutions must use stride 2 and odd kernels".into()));
        }
        if self.decoder.deconvs.iter().any(|c| c.stride != 2 || c.kernel % 2 == 0)
            || self.decoder.output_kernel.is_multiple_of(2)
        {
            return Err(Error::Config("decoder deconvolutions must use stride 2 and odd kernels".into()));
        }
        if !self.resolution.is_multiple_of(down) || self.resolution / down == 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.encoder.convs.len()
            )));
        }
        let up = 1usize << (self.decoder.deconvs.len() + 1);
        if !self.resolution.is_multiple_of(up) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.decoder.deconvs.len() + 1
            )));
        }
        if self.predictor.inputs == 0 || self.predictor.outputs == 0 || self.predictor.stacked == 0 {
            return Err(Error::Config("predictor sizes must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the model kind and the canonical JSON of this config.
    pub fn digest(&self, kind: ModelKind) -> [u8; 32] {
        let json = serde_json::to_string(&(kind, self)).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }
}

// ---- parameters ------------------------------------------------------------

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for every parameter of a bound model.
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter '{name}' is not bound")))
    }
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name '{name}'")));
        }
        self.tensors.insert(name, t.tracked());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on the tape; `track` selects whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if track {
                    tape.leaf(t)
                } else {
                    tape.constant(t.shape(), t.data().to_vec()).expect("valid tensor")
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Copies the gradients of the last backward pass into each tensor.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bindings: &Bindings) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let v = bindings.get(name)?;
            let g = tape
                .grad(v)
                .ok_or_else(|| Error::Usage(format!("no gradient recorded for '{name}'")))?;
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn to_blocks(&self) -> Vec<TensorBlock> {
        self.tensors
            .iter()
            .map(|(name, t)| TensorBlock {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
            .collect()
    }

    /// Overwrites values from checkpoint blocks; names and shapes must match.
    pub fn load_blocks(&mut self, blocks: &[TensorBlock]) -> Result<()> {
        if blocks.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter blocks, model expects {}",
                blocks.len(),
                self.tensors.len()
            )));
        }
        for b in blocks {
            let t = self
                .tensors
                .get_mut(&b.name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter '{}'", b.name)))?;
            if t.shape() != b.shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    b.name,
                    b.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&b.data) {
                *dst = T::of(src as f64);
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast::<U>().tracked()))
                .collect(),
        }
    }
}

/// Uniform initializer with variance `1 / fan_in`.
fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let a = (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec()).expect("positive extents")
}

// ---- layers ----------------------------------------------------------------

#[derive(Clone, Debug)]
struct DenseLayer {
    name: String,
    inputs: usize,
    outputs: usize,
}

impl DenseLayer {
    fn new(name: String, inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            name,
            inputs,
            outputs,
        }
    }

    fn init<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        p.insert(format!("{}.w", self.name), init_uniform(&[self.inputs, self.outputs], self.inputs, rng))?;
        p.insert(format!("{}.b", self.name), zeros(&[self.outputs]))
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        let w = b.get(&format!("{}.w", self.name))?;
        let bias = b.get(&format!("{}.b", self.name))?;
        tape.dense(x, w, Some(bias))
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    in_channels: usize,
    spec: ConvSpec,
    transposed: bool,
}

impl ConvLayer {
    fn init<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let k = self.spec.kernel;
        let (shape, fan_in) = if self.transposed {
            // Each output pixel of a stride-s transposed conv sees about
            // in·k²/s² inputs.
            let s2 = self.spec.stride * self.spec.stride;
            (
                [self.in_channels, self.spec.filters, k, k],
                (self.in_channels * k * k / s2).max(1),
            )
        } else {
            ([self.spec.filters, self.in_channels, k, k], self.in_channels * k * k)
        };
        p.insert(format!("{}.w", self.name), init_uniform(&shape, fan_in, rng))?;
        p.insert(format!("{}.b", self.name), zeros(&[self.spec.filters]))
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        let w = b.get(&format!("{}.w", self.name))?;
        let bias = b.get(&format!("{}.b", self.name))?;
        let y = if self.transposed {
            tape.transpose_conv2d(x, w, self.spec.stride, self.spec.padding(), self.spec.output_padding())?
        } else {
            tape.conv2d(x, w, self.spec.stride, self.spec.padding())?
        };
        tape.channel_bias(y, bias)
    }
}

/// Convolutional encoder emitting `(mu, log_var)`, each `B × N_V`.
#[derive(Clone, Debug)]
pub struct Encoder {
    resolution: usize,
    convs: Vec<ConvLayer>,
    flat: usize,
    dense: Vec<DenseLayer>,
    head: DenseLayer,
    latent: usize,
}

impl Encoder {
    pub fn new(prefix: &str, arch: &ArchConfig) -> Self {
        let mut channels = 3;
        let convs: Vec<ConvLayer> = arch
            .encoder
            .convs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                let l = ConvLayer {
                    name: format!("{prefix}.conv{i}"),
                    in_channels: channels,
                    spec,
                    transposed: false,
                };
                channels = spec.filters;
                l
            })
            .collect();
        let grid = arch.resolution >> convs.len();
        let flat = channels * grid * grid;
        let mut width = flat;
        let dense = arch
            .encoder
            .dense
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = DenseLayer::new(format!("{prefix}.dense{i}"), width, w);
                width = w;
                l
            })
            .collect();
        let latent = arch.layout.total();
        Encoder {
            resolution: arch.resolution,
            convs,
            flat,
            dense,
            head: DenseLayer::new(format!("{prefix}.head"), width, 2 * latent),
            latent,
        }
    }

    fn init<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for c in &self.convs {
            c.init(p, rng)?;
        }
        for d in &self.dense {
            d.init(p, rng)?;
        }
        self.head.init(p, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::dim("encode", &s, &[s.first().copied().unwrap_or(0), 3, self.resolution, self.resolution]));
        }
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(tape, b, h)?;
            h = tape.relu(y);
        }
        h = tape.reshape(h, &[s[0], self.flat])?;
        for d in &self.dense {
            let y = d.forward(tape, b, h)?;
            h = tape.relu(y);
        }
        let out = self.head.forward(tape, b, h)?;
        let mu = tape.slice_cols(out, 0, self.latent)?;
        let log_var = tape.slice_cols(out, self.latent, self.latent)?;
        Ok((mu, log_var))
    }
}

/// Dense layers into a small grid, then stride-2 transposed convolutions up
/// to the full resolution with a sigmoid output.
#[derive(Clone, Debug)]
pub struct Decoder {
    input: usize,
    dense: Vec<DenseLayer>,
    start: (usize, usize),
    deconvs: Vec<ConvLayer>,
    output: OutputKind,
}

impl Decoder {
    pub fn new(prefix: &str, arch: &ArchConfig, input: usize, output: OutputKind) -> Self {
        let cfg = &arch.decoder;
        let grid = arch.resolution >> (cfg.deconvs.len() + 1);
        let mut width = input;
        let mut dense: Vec<DenseLayer> = cfg
            .dense
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = DenseLayer::new(format!("{prefix}.dense{i}"), width, w);
                width = w;
                l
            })
            .collect();
        dense.push(DenseLayer::new(
            format!("{prefix}.dense{}", cfg.dense.len()),
            width,
            cfg.start_channels * grid * grid,
        ));
        let mut channels = cfg.start_channels;
        let mut deconvs: Vec<ConvLayer> = cfg
            .deconvs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                let l = ConvLayer {
                    name: format!("{prefix}.deconv{i}"),
                    in_channels: channels,
                    spec,
                    transposed: true,
                };
                channels = spec.filters;
                l
            })
            .collect();
        deconvs.push(ConvLayer {
            name: format!("{prefix}.deconv{}", cfg.deconvs.len()),
            in_channels: channels,
            spec: ConvSpec::new(cfg.output_kernel, output.channels()),
            transposed: true,
        });
        Decoder {
            input,
            dense,
            start: (cfg.start_channels, grid),
            deconvs,
            output,
        }
    }

    fn init<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for d in &self.dense {
            d.init(p, rng)?;
        }
        for c in &self.deconvs {
            c.init(p, rng)?;
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.input {
            return Err(Error::dim("decode", &s, &[s.first().copied().unwrap_or(0), self.input]));
        }
        let mut h = z;
        for d in &self.dense {
            let y = d.forward(tape, b, h)?;
            h = tape.relu(y);
        }
        let (c, g) = self.start;
        h = tape.reshape(h, &[s[0], c, g, g])?;
        let last = self.deconvs.len() - 1;
        for (i, l) in self.deconvs.iter().enumerate() {
            let y = l.forward(tape, b, h)?;
            h = if i == last { tape.sigmoid(y) } else { tape.relu(y) };
        }
        Ok(h)
    }
}

/// Basic recurrent cell `h' = tanh(x·Wx + h·Wh + b)` with a linear readout,
/// unrolled over a two-step window: `(z, z1) ↦ ẑ2`.
#[derive(Clone, Debug)]
pub struct LatentRnn {
    name: String,
    width: usize,
    hidden: usize,
    readout: DenseLayer,
}

impl LatentRnn {
    pub fn new(prefix: &str, width: usize, hidden: usize) -> Self {
        LatentRnn {
            name: prefix.to_string(),
            width,
            hidden,
            readout: DenseLayer::new(format!("{prefix}.out"), hidden, width),
        }
    }

    fn init<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        p.insert(format!("{}.wx", self.name), init_uniform(&[self.width, self.hidden], self.width, rng))?;
        p.insert(format!("{}.wh", self.name), init_uniform(&[self.hidden, self.hidden], self.hidden, rng))?;
        p.insert(format!("{}.b", self.name), zeros(&[self.hidden]))?;
        self.readout.init(p, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, z: Var, z1: Var) -> Result<Var> {
        for v in [z, z1] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.width {
                return Err(Error::dim("latent_rnn_step", s, &[self.width]));
            }
        }
        let wx = b.get(&format!("{}.wx", self.name))?;
        let wh = b.get(&format!("{}.wh", self.name))?;
        let bias = b.get(&format!("{}.b", self.name))?;
        // h0 = 0, so the first step has no recurrent term.
        let a0 = tape.dense(z, wx, Some(bias))?;
        let h1 = tape.tanh(a0);
        let x1 = tape.dense(z1, wx, Some(bias))?;
        let r1 = tape.dense(h1, wh, None)?;
        let a1 = tape.add(x1, r1)?;
        let h2 = tape.tanh(a1);
        self.readout.forward(tape, b, h2)
    }
}

/// Gated recurrent unit with reset, update and candidate gates packed along
/// the output axis of `wi` (`in × 3H`) and `wh` (`H × 3H`).
#[derive(Clone, Debug)]
pub struct GruCell {
    name: String,
    input: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(name: String, input: usize, hidden: usize) -> Self {
        GruCell { name, input, hidden }
    }

    fn init<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let h3 = 3 * self.hidden;
        p.insert(format!("{}.wi", self.name), init_uniform(&[self.input, h3], self.input, rng))?;
        p.insert(format!("{}.wh", self.name), init_uniform(&[self.hidden, h3], self.hidden, rng))?;
        p.insert(format!("{}.bi", self.name), zeros(&[h3]))?;
        p.insert(format!("{}.bh", self.name), zeros(&[h3]))
    }

    /// One step; `h = None` stands for the zero initial state.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var, h: Option<Var>) -> Result<Var> {
        let hd = self.hidden;
        let batch = tape.shape(x)[0];
        let wi = b.get(&format!("{}.wi", self.name))?;
        let wh = b.get(&format!("{}.wh", self.name))?;
        let bi = b.get(&format!("{}.bi", self.name))?;
        let bh = b.get(&format!("{}.bh", self.name))?;
        let h = match h {
            Some(h) => h,
            None => tape.constant(&[batch, hd], vec![T::zero(); batch * hd])?,
        };
        let gx = tape.dense(x, wi, Some(bi))?;
        let gh = tape.dense(h, wh, Some(bh))?;
        let (xr, xz, xn) = (tape.slice_cols(gx, 0, hd)?, tape.slice_cols(gx, hd, hd)?, tape.slice_cols(gx, 2 * hd, hd)?);
        let (hr, hz, hn) = (tape.slice_cols(gh, 0, hd)?, tape.slice_cols(gh, hd, hd)?, tape.slice_cols(gh, 2 * hd, hd)?);
        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre);
        let u_pre = tape.add(xz, hz)?;
        let u = tape.sigmoid(u_pre);
        let gated = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, gated)?;
        let n = tape.tanh(n_pre);
        // h' = (1 - u)·n + u·h = n + u·(h - n)
        let diff = tape.sub(h, n)?;
        let mix = tape.mul(u, diff)?;
        tape.add(n, mix)
    }
}

/// Two stacked GRUs emitting full sequences feed `outputs` parallel GRUs,
/// each keeping only its last state and reading out one future latent.
#[derive(Clone, Debug)]
pub struct Predictor {
    width: usize,
    inputs: usize,
    stacked: Vec<GruCell>,
    branches: Vec<(GruCell, DenseLayer)>,
}

impl Predictor {
    pub fn new(prefix: &str, arch: &ArchConfig) -> Self {
        let w = arch.layout.total();
        let p = arch.predictor;
        Predictor {
            width: w,
            inputs: p.inputs,
            stacked: (0..p.stacked)
                .map(|i| GruCell::new(format!("{prefix}.stack{i}"), w, w))
                .collect(),
            branches: (0..p.outputs)
                .map(|k| {
                    (
                        GruCell::new(format!("{prefix}.branch{k}"), w, w),
                        DenseLayer::new(format!("{prefix}.branch{k}.out"), w, w),
                    )
                })
                .collect(),
        }
    }

    fn init<T: Scalar>(&self, p: &mut ModelParams<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for c in &self.stacked {
            c.init(p, rng)?;
        }
        for (c, d) in &self.branches {
            c.init(p, rng)?;
            d.init(p, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.inputs {
            return Err(Error::Usage(format!(
                "predictor takes exactly {} latents, got {}",
                self.inputs,
                inputs.len()
            )));
        }
        for &v in inputs {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.width {
                return Err(Error::dim("sequence_predict", s, &[self.width]));
            }
        }
        let mut seq = inputs.to_vec();
        for cell in &self.stacked {
            let mut h = None;
            let mut out = Vec::with_capacity(seq.len());
            for &x in &seq {
                let next = cell.step(tape, b, x, h)?;
                out.push(next);
                h = Some(next);
            }
            seq = out;
        }
        let mut preds = Vec::with_capacity(self.branches.len());
        for (cell, readout) in &self.branches {
            let mut h = None;
            for &x in &seq {
                h = Some(cell.step(tape, b, x, h)?);
            }
            preds.push(readout.forward(tape, b, h.expect("at least one input"))?);
        }
        Ok(preds)
    }
}

// ---- models ----------------------------------------------------------------

/// One of the four networks with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub params: ModelParams<T>,
    pub encoder: Option<Encoder>,
    pub visual: Option<Decoder>,
    pub cars: Option<Decoder>,
    pub lanes: Option<Decoder>,
    pub rnn: Option<LatentRnn>,
    pub predictor: Option<Predictor>,
}

impl<T: Scalar> Model<T> {
    /// Builds the model and draws its initial parameters from `seed`.
    pub fn init(kind: ModelKind, arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout;
        let has_ae = kind != ModelKind::Net4;
        let mut m = Model {
            kind,
            arch: arch.clone(),
            params: ModelParams::default(),
            encoder: has_ae.then(|| Encoder::new("enc", arch)),
            visual: has_ae.then(|| Decoder::new("dec_v", arch, layout.total(), OutputKind::Rgb)),
            cars: kind
                .has_concepts()
                .then(|| Decoder::new("dec_c", arch, layout.cars(), OutputKind::ProbabilityMap)),
            lanes: kind
                .has_concepts()
                .then(|| Decoder::new("dec_l", arch, layout.lanes(), OutputKind::ProbabilityMap)),
            rnn: (kind == ModelKind::Net3).then(|| LatentRnn::new("rnn", layout.total(), layout.total())),
            predictor: (kind == ModelKind::Net4).then(|| Predictor::new("pred", arch)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::default();
        if let Some(e) = &m.encoder {
            e.init(&mut params, &mut rng)?;
        }
        for d in [&m.visual, &m.cars, &m.lanes].into_iter().flatten() {
            d.init(&mut params, &mut rng)?;
        }
        if let Some(r) = &m.rnn {
            r.init(&mut params, &mut rng)?;
        }
        if let Some(p) = &m.predictor {
            p.init(&mut params, &mut rng)?;
        }
        m.params = params;
        Ok(m)
    }

    pub fn layout(&self) -> LatentLayout {
        self.arch.layout
    }

    pub fn digest(&self) -> [u8; 32] {
        self.arch.digest(self.kind)
    }

    pub fn from_checkpoint(arch: &ArchConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.digest != arch.digest(ck.kind) {
            return Err(Error::Config(
                "checkpoint architecture digest does not match the configured model".into(),
            ));
        }
        let mut m = Model::init(ck.kind, arch, 0)?;
        m.params.load_blocks(&ck.params)?;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            arch: self.arch.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            visual: self.visual.clone(),
            cars: self.cars.clone(),
            lanes: self.lanes.clone(),
            rnn: self.rnn.clone(),
            predictor: self.predictor.clone(),
        }
    }

    fn part<'a, P>(&self, p: &'a Option<P>, what: &str) -> Result<&'a P> {
        p.as_ref()
            .ok_or_else(|| Error::Usage(format!("{} has no {what}", self.kind)))
    }

    pub fn encoder(&self) -> Result<&Encoder> {
        self.part(&self.encoder, "encoder")
    }

    pub fn visual_decoder(&self) -> Result<&Decoder> {
        self.part(&self.visual, "visual decoder")
    }

    pub fn concept_decoder(&self, c: Concept) -> Result<&Decoder> {
        match c {
            Concept::Cars => self.part(&self.cars, "cars decoder"),
            Concept::Lanes => self.part(&self.lanes, "lanes decoder"),
        }
    }

    pub fn latent_rnn(&self) -> Result<&LatentRnn> {
        self.part(&self.rnn, "latent recurrence")
    }

    pub fn predictor(&self) -> Result<&Predictor> {
        self.part(&self.predictor, "sequence predictor")
    }

    /// Decodes the projection of `z` onto one concept segment.
    pub fn decode_concept_from_latent(&self, tape: &mut Tape<T>, b: &Bindings, z: Var, c: Concept) -> Result<Var> {
        let r = self.layout().range(c);
        let seg = tape.slice_cols(z, r.start, r.len())?;
        self.concept_decoder(c)?.forward(tape, b, seg)
    }

    // Untracked evaluation helpers ------------------------------------------

    /// Encoder means and log-variances for a `B×3×R×R` batch.
    pub fn encode(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.leaf(images);
        let (mu, lv) = self.encoder()?.forward(&mut tape, &b, x)?;
        Ok((tape.tensor(mu), tape.tensor(lv)))
    }

    pub fn decode_visual(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let z = tape.leaf(z);
        let y = self.visual_decoder()?.forward(&mut tape, &b, z)?;
        Ok(tape.tensor(y))
    }

    /// Probability map `B×1×R×R` from a concept segment `B×N_C` (or `B×N_L`).
    pub fn decode_concept(&self, c: Concept, segment: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let s = tape.leaf(segment);
        let y = self.concept_decoder(c)?.forward(&mut tape, &b, s)?;
        Ok(tape.tensor(y))
    }

    pub fn latent_rnn_step(&self, z: &Tensor<T>, z1: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let (z, z1) = (tape.leaf(z), tape.leaf(z1));
        let y = self.latent_rnn()?.forward(&mut tape, &b, z, z1)?;
        Ok(tape.tensor(y))
    }

    pub fn sequence_predict(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = self.predictor()?.forward(&mut tape, &b, &vars)?;
        Ok(out.into_iter().map(|v| tape.tensor(v)).collect())
    }
}

/// Thresholds a probability map at [`MASK_THRESHOLD`].
pub fn binarize<T: Scalar>(prob: &[T]) -> Vec<u8> {
    let t = T::of(MASK_THRESHOLD);
    prob.iter().map(|&p| u8::from(p >= t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(resolution: usize) -> ArchConfig {
        ArchConfig {
            resolution,
            layout: LatentLayout::new(8, 2, 2).unwrap(),
            encoder: EncoderConfig {
                convs: vec![ConvSpec::new(3, 2), ConvSpec::new(3, 3)],
                dense: vec![6],
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
                stacked: 2,
            },
        }
    }

    #[test]
    fn projection_slices_follow_partition_order() {
        let layout = LatentLayout::new(8, 2, 2).unwrap();
        let z: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(layout.project(&z, Concept::Cars).unwrap(), &[1.0, 2.0]);
        assert_eq!(layout.project(&z, Concept::Lanes).unwrap(), &[7.0, 8.0]);
        let mut joined = layout.project(&z, Concept::Cars).unwrap().to_vec();
        joined.extend_from_slice(&z[layout.middle_range()]);
        joined.extend_from_slice(layout.project(&z, Concept::Lanes).unwrap());
        assert_eq!(joined, z);
        assert!(layout.project(&z[..7], Concept::Cars).is_err());
    }

    #[test]
    fn layout_validation() {
        assert!(LatentLayout::new(8, 4, 4).is_err());
        assert!(LatentLayout::new(8, 0, 4).is_err());
        let desk = LatentLayout::desk();
        let ratio = desk.cars() as f64 / desk.total() as f64;
        assert!((0.0625..=0.25).contains(&ratio));
    }

    #[test]
    fn encode_decode_shapes_round_trip() {
        for res in [8, 16] {
            let arch = tiny_arch(res);
            let m = Model::<f64>::init(ModelKind::Net2, &arch, 1).unwrap();
            let x = Tensor::new([2, 3, res, res], vec![0.25; 2 * 3 * res * res]).unwrap();
            let (mu, lv) = m.encode(&x).unwrap();
            assert_eq!(mu.shape(), &[2, 8]);
            assert_eq!(lv.shape(), &[2, 8]);
            let y = m.decode_visual(&mu).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let seg = Tensor::new([2, 2], mu.data().iter().step_by(4).copied().collect()).unwrap();
            let pm = m.decode_concept(Concept::Cars, &seg).unwrap();
            assert_eq!(pm.shape(), &[2, 1, res, res]);
            assert!(binarize(pm.data()).iter().all(|&v| v <= 1));
            let again = m.encode(&x).unwrap();
            assert_eq!(again.0, mu);
        }
    }

    #[test]
    fn resolution_and_width_mismatches_are_dimension_errors() {
        let m = Model::<f64>::init(ModelKind::Net2, &tiny_arch(8), 1).unwrap();
        let x = Tensor::new([1, 3, 16, 16], vec![0.0; 768]).unwrap();
        assert!(matches!(m.encode(&x), Err(Error::Dimension { .. })));
        let z = Tensor::new([1, 7], vec![0.0; 7]).unwrap();
        assert!(matches!(m.decode_visual(&z), Err(Error::Dimension { .. })));
        let seg = Tensor::new([1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(m.decode_concept(Concept::Lanes, &seg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn fresh_decoder_on_zero_latent_gives_half_maps() {
        let m = Model::<f64>::init(ModelKind::Net2, &tiny_arch(8), 4).unwrap();
        let seg = Tensor::new([1, 2], vec![0.0; 2]).unwrap();
        let pm = m.decode_concept(Concept::Cars, &seg).unwrap();
        assert!(pm.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::<f32>::init(ModelKind::Net3, &tiny_arch(8), 5).unwrap();
        let b = Model::<f32>::init(ModelKind::Net3, &tiny_arch(8), 5).unwrap();
        let c = Model::<f32>::init(ModelKind::Net3, &tiny_arch(8), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let mut p = ModelParams::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        DenseLayer::new("d".into(), 400, 300).init(&mut p, &mut rng).unwrap();
        let w = p.get("d.w").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var * 400.0 - 1.0).abs() < 0.2, "variance·fan_in = {}", var * 400.0);
        assert!(p.get("d.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rnn_and_predictor_shapes() {
        let arch = tiny_arch(8);
        let m3 = Model::<f64>::init(ModelKind::Net3, &arch, 2).unwrap();
        let z = Tensor::new([1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = m3.latent_rnn_step(&z, &z).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        assert_eq!(out, m3.latent_rnn_step(&z, &z).unwrap());
        let bad = Tensor::new([1, 7], vec![0.0; 7]).unwrap();
        assert!(m3.latent_rnn_step(&z, &bad).is_err());

        let m4 = Model::<f64>::init(ModelKind::Net4, &arch, 2).unwrap();
        let inputs = vec![z.clone(); 3];
        let preds = m4.sequence_predict(&inputs).unwrap();
        assert_eq!(preds.len(), 2);
        assert!(preds.iter().all(|p| p.shape() == [1, 8]));
        assert!(matches!(m4.sequence_predict(&inputs[..2]), Err(Error::Usage(_))));
    }

    #[test]
    fn desk_preset_gives_four_by_four_grid() {
        let arch = ArchConfig::desk(64);
        arch.validate().unwrap();
        let e = Encoder::new("enc", &arch);
        assert_eq!(e.flat, 16 * 4 * 4);
        let d = Decoder::new("d", &arch, 32, OutputKind::Rgb);
        assert_eq!(d.start, (16, 4));
        ArchConfig::full().validate().unwrap();
        assert_ne!(arch.digest(ModelKind::Net2), arch.digest(ModelKind::Net3));
    }
}
