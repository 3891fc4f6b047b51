//! Optimization loop: Adam with global-norm clipping, KL annealing by batch
//! counter, seeded data order and noise, checkpoints and resumable runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Checkpoint, Dataset, LatentTrajectories, TensorBlock};
use crate::error::{Error, Result};
use crate::losses::{
    loss_net1, loss_net2, loss_net3, loss_net4, AnnealSchedule, ConceptLossConfig, FrameBatch, LossTerms, LossWeights,
    Term,
};
use crate::networks::{ArchConfig, Model, ModelKind, ModelParams};
use crate::scene::class_pixel_ratio;
use crate::tensor::{Tape, Tensor, Var};

/// Frames the predictor sees per window: its inputs followed by its targets.
pub fn predictor_window(arch: &ArchConfig) -> usize {
    arch.predictor.inputs + arch.predictor.outputs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: u32,
    pub batch_size: usize,
    /// Samples per tape; gradients of the pieces are summed in order, so the
    /// result does not depend on the thread count.
    pub micro_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: u32,
    pub weights: LossWeights,
    pub k0: f64,
    /// KL annealing constant; derived from the batch budget when absent.
    pub kappa: Option<f64>,
    pub smoothing: f64,
    /// Train / validation / test fractions over whole sequences.
    pub split: [f64; 3],
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::Net2,
            epochs: 30,
            batch_size: 16,
            micro_batch: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            k0: 0.01,
            kappa: None,
            smoothing: 4.0,
            split: [0.7, 0.25, 0.05],
            arch: ArchConfig::desk(64),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("epochs, batch_size and micro_batch must be at least 1".into()));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("clip_norm", self.clip_norm),
            ("smoothing", self.smoothing),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if let Some(k) = self.kappa {
            AnnealSchedule::new(self.k0, k)?;
        } else if !(self.k0 > 0.0 && self.k0 <= 1.0) {
            return Err(Error::Config(format!("k0 must lie in (0, 1], got {}", self.k0)));
        }
        self.weights.validate()?;
        self.arch.validate()
    }

    pub fn schedule(&self, batches_per_epoch: usize) -> Result<AnnealSchedule> {
        match self.kappa {
            Some(k) => AnnealSchedule::new(self.k0, k),
            None => AnnealSchedule::for_budget(self.k0, self.epochs as u64 * batches_per_epoch as u64),
        }
    }

    fn split_fractions(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

/// Deterministic 64-bit mixing of a seed with two tags.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    splitmix(seed ^ splitmix(a ^ splitmix(b.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

const TAG_SHUFFLE: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_VAL_NOISE: u64 = 3;

/// Standard normal draws for one batch; `stream` separates the latents of
/// different frames within the batch.
pub fn batch_noise(seed: u64, tag: u64, index: u64, stream: u64, rows: usize, width: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index));
    rng.set_stream(stream);
    let data = (0..rows * width).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new([rows, width], data).expect("positive batch")
}

/// Gathers `(sequence, time)` frames of a dataset into a batch.
pub fn frame_batch(ds: &Dataset, frames: &[(usize, usize)]) -> Result<FrameBatch<f32>> {
    if frames.is_empty() {
        return Err(Error::Usage("empty frame batch".into()));
    }
    let r = ds.resolution;
    let plane = r * r;
    let mut images = Vec::with_capacity(frames.len() * 3 * plane);
    let mut cars = Vec::with_capacity(frames.len() * plane);
    let mut lanes = Vec::with_capacity(frames.len() * plane);
    for &(s, t) in frames {
        let f = ds
            .sequences
            .get(s)
            .and_then(|q| q.frames.get(t))
            .ok_or_else(|| Error::Usage(format!("frame ({s}, {t}) is out of range")))?;
        images.extend_from_slice(&f.rgb);
        cars.extend(f.car_mask.iter().map(|&v| f32::from(v)));
        lanes.extend(f.lane_mask.iter().map(|&v| f32::from(v)));
    }
    Ok(FrameBatch {
        images: Tensor::new([frames.len(), 3, r, r], images)?,
        cars: Some(cars),
        lanes: Some(lanes),
        positions: Some(frames.to_vec()),
    })
}

/// Class ratios of both concepts over the given sequences.
pub fn concept_config(ds: &Dataset, sequences: &[usize], smoothing: f64) -> Result<ConceptLossConfig> {
    let frames = || sequences.iter().flat_map(|&s| ds.sequences[s].frames.iter());
    let p_cars = class_pixel_ratio(frames().map(|f| f.car_mask.as_slice()), smoothing)?;
    let p_lanes = class_pixel_ratio(frames().map(|f| f.lane_mask.as_slice()), smoothing)?;
    ConceptLossConfig::new(p_cars, p_lanes, smoothing)
}

// ---- optimizer ---------------------------------------------------------------

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update from the gradients stored on the parameters; parameters
    /// without a gradient are left alone.
    pub fn update(&mut self, params: &mut ModelParams<f32>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let step = (self.lr * c2.sqrt() / c1) as f32;
            let eps = (self.epsilon * c2.sqrt()) as f32;
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }

    pub fn to_blocks(&self, params: &ModelParams<f32>) -> Vec<TensorBlock> {
        let mut out = Vec::new();
        for (name, p) in params.iter() {
            if let Some((m, v)) = self.moments.get(name) {
                for (prefix, data) in [("m", m), ("v", v)] {
                    out.push(TensorBlock {
                        name: format!("{prefix}:{name}"),
                        shape: p.shape().to_vec(),
                        data: data.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn load_blocks(&mut self, step: u64, blocks: &[TensorBlock]) -> Result<()> {
        self.step = step;
        self.moments.clear();
        let mut firsts: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for b in blocks {
            let (prefix, name) = b
                .name
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("bad optimizer block '{}'", b.name)))?;
            match prefix {
                "m" => {
                    firsts.insert(name.to_string(), b.data.clone());
                }
                "v" => {
                    let m = firsts
                        .remove(name)
                        .ok_or_else(|| Error::Data(format!("optimizer block 'v:{name}' without 'm:{name}'")))?;
                    self.moments.insert(name.to_string(), (m, b.data.clone()));
                }
                _ => return Err(Error::Data(format!("bad optimizer block '{}'", b.name))),
            }
        }
        if !firsts.is_empty() {
            return Err(Error::Data("optimizer state has unpaired moment blocks".into()));
        }
        Ok(())
    }
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(params: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled = g.iter().map(|&v| v * s).collect();
                p.set_grad(scaled).expect("same length");
            }
        }
    }
    norm
}

// ---- reports -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub batch_counter: u64,
    /// Per-sample means over the epoch, `total` last.
    pub train: Vec<(String, f64)>,
    pub val: Vec<(String, f64)>,
    pub seconds: f64,
}

impl EpochRecord {
    fn lookup(list: &[(String, f64)], name: &str) -> Option<f64> {
        list.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn train_value(&self, name: &str) -> Option<f64> {
        Self::lookup(&self.train, name)
    }

    pub fn val_value(&self, name: &str) -> Option<f64> {
        Self::lookup(&self.val, name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub batches_per_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,batch,split,term,value\n";

    /// One row per epoch, split and term; wall-clock is left out so repeat
    /// runs produce identical files.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            for (split, list) in [("train", &e.train), ("val", &e.val)] {
                for (term, v) in list {
                    let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.batch_counter, split, term, v);
                }
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", Self::CSV_HEADER, self.csv_rows())
    }
}

// ---- training ---------------------------------------------------------------

/// What the model trains on.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Frames(&'a Dataset),
    Latents(&'a LatentTrajectories),
}

impl TrainData<'_> {
    fn sequence_lengths(&self) -> Vec<usize> {
        match self {
            TrainData::Frames(ds) => ds.sequence_lengths(),
            TrainData::Latents(l) => (0..l.trajectories.len()).map(|i| l.len_of(i)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Final checkpoint path; cadence checkpoints go next to it with an
    /// `-epochNNNN` suffix. Nothing is written when absent.
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub progress: bool,
}

/// Sample starts: a frame, a consecutive triple or a predictor window.
fn samples(kind: ModelKind, arch: &ArchConfig, lengths: &[usize], seqs: &[usize]) -> Result<Vec<(usize, usize)>> {
    let span = match kind {
        ModelKind::Net1 | ModelKind::Net2 => 1,
        ModelKind::Net3 => 3,
        ModelKind::Net4 => predictor_window(arch),
    };
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(dataset::batch_windows(seqs, lengths, span, 1, None)?
        .into_iter()
        .map(|w| (w.sequence, w.start))
        .collect())
}

struct Session<'a> {
    cfg: &'a TrainConfig,
    data: TrainData<'a>,
    concepts: Option<ConceptLossConfig>,
}

struct ChunkResult {
    total: f64,
    terms: Vec<(Term, f64)>,
    grads: Option<Vec<Vec<f32>>>,
}

impl Session<'_> {
    /// Loss over one chunk of samples; `noise_index` keys its noise draws.
    fn chunk(
        &self,
        model: &Model<f32>,
        chunk: &[(usize, usize)],
        noise_tag: u64,
        noise_index: u64,
        anneal: f64,
        with_grad: bool,
    ) -> Result<ChunkResult> {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, with_grad);
        let width = model.layout().total();
        let n = chunk.len();
        let noise = |stream| batch_noise(self.cfg.seed, noise_tag, noise_index, stream, n, width);
        let terms: LossTerms = match self.data {
            TrainData::Frames(ds) => {
                let at = |dt: usize| -> Result<FrameBatch<f32>> {
                    let f: Vec<_> = chunk.iter().map(|&(s, t)| (s, t + dt)).collect();
                    frame_batch(ds, &f)
                };
                let x = at(0)?;
                match model.kind {
                    ModelKind::Net1 => loss_net1(&mut tape, model, &b, &x, &noise(0), anneal, &self.cfg.weights)?,
                    ModelKind::Net2 => loss_net2(
                        &mut tape,
                        model,
                        &b,
                        &x,
                        &noise(0),
                        anneal,
                        &self.cfg.weights,
                        self.concepts.as_ref().expect("concept config"),
                    )?,
                    ModelKind::Net3 => {
                        let (x1, x2) = (at(1)?, at(2)?);
                        let (n0, n1) = (noise(0), noise(1));
                        loss_net3(
                            &mut tape,
                            model,
                            &b,
                            [&x, &x1, &x2],
                            [&n0, &n1],
                            anneal,
                            &self.cfg.weights,
                            self.concepts.as_ref().expect("concept config"),
                        )?
                    }
                    ModelKind::Net4 => return Err(Error::Usage("the predictor trains on latent trajectories".into())),
                }
            }
            TrainData::Latents(lat) => {
                if model.kind != ModelKind::Net4 {
                    return Err(Error::Usage(format!("{} trains on frames, not latents", model.kind)));
                }
                let p = model.arch.predictor;
                let step = |k: usize| -> Result<Tensor<f32>> {
                    let data = chunk.iter().flat_map(|&(s, t)| lat.latent(s, t + k).iter().copied()).collect();
                    Tensor::new([n, width], data)
                };
                let inputs: Vec<Var> = (0..p.inputs).map(|k| step(k).map(|t| tape.leaf(&t))).collect::<Result<_>>()?;
                let targets: Vec<Tensor<f32>> = (0..p.outputs).map(|k| step(p.inputs + k)).collect::<Result<_>>()?;
                let preds = model.predictor()?.forward(&mut tape, &b, &inputs)?;
                let mse = loss_net4(&mut tape, &preds, &targets)?;
                // Per-sample scale so chunks add up like the other losses.
                let total = tape.affine(mse, n as f32, 0.0);
                LossTerms {
                    total,
                    terms: vec![(Term::Latent, Some(total))],
                }
            }
        };
        let total = terms.total_value(&tape);
        let values = terms.values(&tape);
        let grads = if with_grad && total.is_finite() {
            tape.backward(terms.total)?;
            let mut out = Vec::with_capacity(model.params.len());
            for (name, _) in model.params.iter() {
                out.push(tape.grad(b.get(name)?).expect("tracked parameter"));
            }
            Some(out)
        } else {
            None
        };
        Ok(ChunkResult {
            total,
            terms: values,
            grads,
        })
    }

    /// Runs the chunks of one batch (in parallel) and sums them in order.
    fn batch(
        &self,
        model: &Model<f32>,
        batch: &[(usize, usize)],
        noise_tag: u64,
        noise_base: u64,
        anneal: f64,
        with_grad: bool,
    ) -> Result<ChunkResult> {
        let chunks: Vec<_> = batch.chunks(self.cfg.micro_batch).collect();
        let results: Vec<Result<ChunkResult>> = chunks
            .par_iter()
            .enumerate()
            .map(|(i, c)| self.chunk(model, c, noise_tag, noise_base * 1024 + i as u64, anneal, with_grad))
            .collect();
        let mut acc: Option<ChunkResult> = None;
        for r in results {
            let r = r?;
            acc = Some(match acc {
                None => r,
                Some(mut a) => {
                    a.total += r.total;
                    for (dst, src) in a.terms.iter_mut().zip(&r.terms) {
                        dst.1 += src.1;
                    }
                    match (&mut a.grads, r.grads) {
                        (Some(g), Some(h)) => {
                            for (gv, hv) in g.iter_mut().zip(h) {
                                for (x, y) in gv.iter_mut().zip(hv) {
                                    *x += y;
                                }
                            }
                        }
                        _ => a.grads = None,
                    }
                    a
                }
            });
        }
        acc.ok_or_else(|| Error::Usage("empty batch".into()))
    }
}

fn breakdown(kind: ModelKind, sums: &[(Term, f64)], total: f64, n: usize) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Term::for_kind(kind)
        .iter()
        .map(|t| {
            let v = sums.iter().find(|(s, _)| s == t).map_or(0.0, |&(_, v)| v);
            (t.name().to_string(), v / n as f64)
        })
        .collect();
    out.push(("total".to_string(), total / n as f64));
    out
}

fn format_terms(list: &[(Term, f64)]) -> String {
    list.iter()
        .map(|(t, v)| format!("{t}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains `model` in place and returns the per-epoch record.
pub fn train(cfg: &TrainConfig, model: &mut Model<f32>, data: TrainData<'_>, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if model.kind != cfg.kind {
        return Err(Error::Config(format!("config trains {} but the model is {}", cfg.kind, model.kind)));
    }
    if model.arch != cfg.arch {
        return Err(Error::Config("model architecture differs from the configured one".into()));
    }
    let lengths = data.sequence_lengths();
    match data {
        TrainData::Frames(ds) if ds.resolution != cfg.arch.resolution => {
            return Err(Error::Config(format!(
                "dataset resolution {} differs from model resolution {}",
                ds.resolution, cfg.arch.resolution
            )))
        }
        TrainData::Latents(l) if l.layout != cfg.arch.layout => {
            return Err(Error::Config("latent file layout differs from the configured model".into()))
        }
        _ => {}
    }
    let parts = dataset::split(lengths.len(), cfg.split_fractions(), cfg.seed)?;
    let train_samples = samples(cfg.kind, &cfg.arch, &lengths, &parts.train)?;
    let val_samples = samples(cfg.kind, &cfg.arch, &lengths, &parts.val)?;
    if train_samples.is_empty() {
        return Err(Error::Data("no training samples in the training split".into()));
    }
    let concepts = match data {
        TrainData::Frames(ds) if cfg.kind.has_concepts() => Some(concept_config(ds, &parts.train, cfg.smoothing)?),
        _ => None,
    };
    let session = Session { cfg, data, concepts };
    let batches_per_epoch = train_samples.len().div_ceil(cfg.batch_size);
    let schedule = match cfg.kind {
        ModelKind::Net4 => None,
        _ => Some(cfg.schedule(batches_per_epoch)?),
    };
    let anneal_at = |b: u64| schedule.map_or(1.0, |s| s.weight(b));

    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut first_epoch = 1;
    let mut b: u64 = 0;
    if let Some(ck) = &opts.resume {
        if ck.kind != cfg.kind || ck.digest != model.digest() {
            return Err(Error::Config("checkpoint does not match the configured model".into()));
        }
        model.params.load_blocks(&ck.params)?;
        adam.load_blocks(ck.optimizer_step, &ck.optimizer)?;
        first_epoch = ck.epoch + 1;
        b = ck.batch_counter;
    }
    if let Some(dir) = opts.checkpoint.as_ref().and_then(|p| p.parent()) {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }

    let mut report = TrainReport {
        kind: cfg.kind,
        batches_per_epoch,
        epochs: Vec::new(),
        final_checkpoint: None,
    };
    for epoch in first_epoch..=cfg.epochs {
        let started = Instant::now();
        let mut order = train_samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SHUFFLE, epoch as u64)));
        let mut sum_total = 0.0;
        let mut sum_terms: Vec<(Term, f64)> = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let anneal = anneal_at(b);
            let r = session.batch(model, batch, TAG_NOISE, b, anneal, true)?;
            let grads_finite = r.grads.as_ref().is_some_and(|g| g.iter().flatten().all(|v| v.is_finite()));
            if !r.total.is_finite() || !grads_finite {
                return Err(Error::Numeric(format!(
                    "non-finite {} at batch {b} (epoch {epoch}): {}",
                    if r.total.is_finite() { "gradient" } else { "loss" },
                    format_terms(&r.terms)
                )));
            }
            let grads = r.grads.expect("gradients present");
            for ((_, p), g) in model.params.iter_mut().zip(grads) {
                p.set_grad(g)?;
            }
            clip_global_norm(&mut model.params, cfg.clip_norm);
            adam.update(&mut model.params);
            model.params.zero_grads();
            sum_total += r.total;
            if sum_terms.is_empty() {
                sum_terms = r.terms;
            } else {
                for (dst, src) in sum_terms.iter_mut().zip(&r.terms) {
                    dst.1 += src.1;
                }
            }
            b += 1;
        }
        let train_terms = breakdown(cfg.kind, &sum_terms, sum_total, train_samples.len());
        let val_terms = if val_samples.is_empty() {
            Vec::new()
        } else {
            let anneal = anneal_at(b);
            let mut vt = 0.0;
            let mut vterms: Vec<(Term, f64)> = Vec::new();
            for (i, batch) in val_samples.chunks(cfg.batch_size).enumerate() {
                let r = session.batch(model, batch, TAG_VAL_NOISE, i as u64, anneal, false)?;
                vt += r.total;
                if vterms.is_empty() {
                    vterms = r.terms;
                } else {
                    for (dst, src) in vterms.iter_mut().zip(&r.terms) {
                        dst.1 += src.1;
                    }
                }
            }
            breakdown(cfg.kind, &vterms, vt, val_samples.len())
        };
        let record = EpochRecord {
            epoch,
            batch_counter: b,
            train: train_terms,
            val: val_terms,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.progress {
            let val = record.val_value("total").map_or("-".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "[{}] epoch {epoch}/{} b={b} train={:.4} val={val} ({:.1}s)",
                cfg.kind,
                cfg.epochs,
                record.train_value("total").unwrap_or(f64::NAN),
                record.seconds
            );
        }
        report.epochs.push(record);
        let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if let Some(last) = &opts.checkpoint {
            if due || epoch == cfg.epochs {
                let ck = checkpoint(model, &adam, epoch, b);
                let path = if epoch == cfg.epochs {
                    last.clone()
                } else {
                    cadence_path(last, epoch)
                };
                ck.save(&path)?;
                if epoch == cfg.epochs {
                    report.final_checkpoint = Some(path);
                }
            }
        }
    }
    Ok(report)
}

/// `dir/name-epoch0003.ext` for `dir/name.ext`.
pub fn cadence_path(last: &Path, epoch: u32) -> PathBuf {
    let stem = last.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match last.extension() {
        Some(ext) => format!("{stem}-epoch{epoch:04}.{}", ext.to_string_lossy()),
        None => format!("{stem}-epoch{epoch:04}"),
    };
    last.with_file_name(name)
}

fn checkpoint(model: &Model<f32>, adam: &Adam, epoch: u32, b: u64) -> Checkpoint {
    Checkpoint {
        kind: model.kind,
        digest: model.digest(),
        epoch,
        batch_counter: b,
        params: model.params.to_blocks(),
        optimizer_step: adam.step,
        optimizer: adam.to_blocks(&model.params),
    }
}

/// Checkpoint of an untrained model (epoch 0, empty optimizer state).
pub fn initial_checkpoint(model: &Model<f32>) -> Checkpoint {
    checkpoint(model, &Adam::new(1e-3, 0.9, 0.999, 1e-8), 0, 0)
}

/// Encoder means of every frame, in frame order, per sequence.
pub fn export_latents(model: &Model<f32>, ds: &Dataset) -> Result<LatentTrajectories> {
    if ds.resolution != model.arch.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from model resolution {}",
            ds.resolution, model.arch.resolution
        )));
    }
    model.encoder()?;
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(ds.sequences.len());
    for (s, seq) in ds.sequences.iter().enumerate() {
        let mut traj = Vec::with_capacity(seq.frames.len() * model.layout().total());
        let idx: Vec<(usize, usize)> = (0..seq.frames.len()).map(|t| (s, t)).collect();
        for c in idx.chunks(CHUNK) {
            let batch = frame_batch(ds, c)?;
            let (mu, _) = model.encode(&batch.images)?;
            traj.extend_from_slice(mu.data());
        }
        out.push(traj);
    }
    LatentTrajectories::new(model.layout(), out)
}

/// Loads a checkpoint file into a model of the configured architecture.
pub fn load_model(path: &Path, kind: ModelKind, arch: &ArchConfig) -> Result<Model<f32>> {
    let ck = Checkpoint::load_expecting(path, kind, &arch.digest(kind))?;
    Model::from_checkpoint(arch, &ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
        assert_eq!(derive_seed(7, 1, 1), derive_seed(7, 1, 1));
        let a = batch_noise(0, TAG_NOISE, 5, 0, 2, 3);
        let b = batch_noise(0, TAG_NOISE, 5, 1, 2, 3);
        assert_ne!(a, b);
        assert_eq!(a, batch_noise(0, TAG_NOISE, 5, 0, 2, 3));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = ModelParams::<f32>::default();
        p.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let before = p.clone();
        p.get_mut("w").unwrap().set_grad(vec![0.0; 3]).unwrap();
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        adam.update(&mut p);
        assert_eq!(p.get("w").unwrap().data(), before.get("w").unwrap().data());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = ModelParams::<f32>::default();
        p.insert("w", Tensor::new([2], vec![0.0, 0.0]).unwrap()).unwrap();
        p.get_mut("w").unwrap().set_grad(vec![3.0, -0.01]).unwrap();
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        adam.update(&mut p);
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 1e-2).abs() < 1e-6);
        assert!((w[1] - 1e-2).abs() < 1e-5);
        let blocks = adam.to_blocks(&p);
        let mut again = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        again.load_blocks(adam.step, &blocks).unwrap();
        assert_eq!(again, adam);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut p = ModelParams::<f32>::default();
        p.insert("a", Tensor::new([2], vec![0.0; 2]).unwrap()).unwrap();
        p.insert("b", Tensor::new([1], vec![0.0]).unwrap()).unwrap();
        p.get_mut("a").unwrap().set_grad(vec![3.0, 4.0]).unwrap();
        p.get_mut("b").unwrap().set_grad(vec![12.0]).unwrap();
        let before = clip_global_norm(&mut p, 5.0);
        assert!((before - 13.0).abs() < 1e-9);
        let after = clip_global_norm(&mut p, 5.0);
        assert!((after - 5.0).abs() < 1e-5);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
            TrainConfig { beta2: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
