//! Evaluation: IoU per concept and condition, latent temporal coherence ξ
//! and predictivity residual ρ, latent interpolation and imagery rollout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Dataset, LatentTrajectories};
use crate::error::{Error, Result};
use crate::networks::{binarize, Concept, Model, ModelKind};
use crate::scene::Condition;
use crate::tensor::Tensor;
use crate::trainer::{frame_batch, predictor_window};

// ---- IoU ---------------------------------------------------------------------

/// Intersection and union pixel counts of one or more mask pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &[u8], target: &[u8]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::dim("iou", &[pred.len()], &[target.len()]));
        }
        let mut c = IouCounts::default();
        for (&p, &t) in pred.iter().zip(target) {
            if p > 1 || t > 1 {
                return Err(Error::Usage("iou expects binary masks".into()));
            }
            c.intersection += u64::from(p & t);
            c.union += u64::from(p | t);
        }
        Ok(c)
    }

    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// 1 when both masks are empty.
    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[u8], target: &[u8]) -> Result<f64> {
    Ok(IouCounts::of(pred, target)?.value())
}

/// IoU per condition, concept and horizon, kept as pixel counts so that the
/// "All" row pools every bucket.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouReport {
    pub horizons: Vec<String>,
    counts: BTreeMap<(Condition, usize, u8), IouCounts>,
}

/// Table row order.
pub const REPORT_CONDITIONS: [Condition; 4] = [Condition::City, Condition::Freeway, Condition::Sunny, Condition::Dark];

fn concept_code(c: Concept) -> u8 {
    match c {
        Concept::Cars => 0,
        Concept::Lanes => 1,
    }
}

impl IouReport {
    pub fn new(horizons: Vec<String>) -> Self {
        IouReport {
            horizons,
            counts: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, condition: Condition, horizon: usize, concept: Concept, counts: IouCounts) {
        self.counts
            .entry((condition, horizon, concept_code(concept)))
            .or_default()
            .add(counts);
    }

    pub fn merge(&mut self, other: &IouReport) {
        for (&(cond, h, c), &v) in &other.counts {
            self.counts.entry((cond, h, c)).or_default().add(v);
        }
    }

    /// `None` when the condition bucket holds no frames; `condition = None`
    /// pools every bucket.
    pub fn value(&self, condition: Option<Condition>, concept: Concept, horizon: usize) -> Option<f64> {
        let code = concept_code(concept);
        let mut pooled = IouCounts::default();
        let mut any = false;
        for (&(cond, h, c), &v) in &self.counts {
            if h == horizon && c == code && condition.is_none_or(|want| want == cond) {
                pooled.add(v);
                any = true;
            }
        }
        any.then(|| pooled.value())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition");
        let multi = self.horizons.len() > 1;
        for h in &self.horizons {
            for label in ["IoU car", "IoU lane"] {
                if multi {
                    let _ = write!(s, ",{h} {label}");
                } else {
                    let _ = write!(s, ",{label}");
                }
            }
        }
        s.push('\n');
        let rows = REPORT_CONDITIONS
            .iter()
            .map(|&c| (c.label(), Some(c)))
            .chain(std::iter::once(("All frames", None)));
        for (label, cond) in rows {
            s.push_str(label);
            for h in 0..self.horizons.len() {
                for concept in [Concept::Cars, Concept::Lanes] {
                    match self.value(cond, concept, h) {
                        Some(v) => {
                            let _ = write!(s, ",{v:.6}");
                        }
                        None => s.push_str(",NA"),
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// IoU of predicting every pixel positive: the concept's pixel fraction.
pub fn all_positive_baseline(ds: &Dataset, sequences: &[usize]) -> IouReport {
    let mut r = IouReport::new(vec!["Frame".into()]);
    for &s in sequences {
        let seq = &ds.sequences[s];
        for f in &seq.frames {
            for (concept, mask) in [(Concept::Cars, &f.car_mask), (Concept::Lanes, &f.lane_mask)] {
                let inter = mask.iter().map(|&v| u64::from(v)).sum();
                r.add(
                    seq.condition,
                    0,
                    concept,
                    IouCounts {
                        intersection: inter,
                        union: mask.len() as u64,
                    },
                );
            }
        }
    }
    r
}

/// Encodes each frame to its latent mean, decodes both concept segments and
/// scores the thresholded maps against the masks.
pub fn evaluate_concepts(model: &Model<f32>, ds: &Dataset, sequences: &[usize]) -> Result<IouReport> {
    check_resolution(model, ds)?;
    if !model.kind.has_concepts() {
        return Err(Error::Usage(format!("{} has no concept decoders", model.kind)));
    }
    let partial: Vec<Result<IouReport>> = sequences
        .par_iter()
        .map(|&s| {
            let seq = &ds.sequences[s];
            let mut r = IouReport::new(vec!["Frame".into()]);
            let idx: Vec<(usize, usize)> = (0..seq.frames.len()).map(|t| (s, t)).collect();
            for chunk in idx.chunks(16) {
                let batch = frame_batch(ds, chunk)?;
                let (mu, _) = model.encode(&batch.images)?;
                for concept in [Concept::Cars, Concept::Lanes] {
                    let pm = decode_segments(model, &mu, concept)?;
                    let plane = ds.resolution * ds.resolution;
                    for (k, &(_, t)) in chunk.iter().enumerate() {
                        let f = &seq.frames[t];
                        let target = match concept {
                            Concept::Cars => &f.car_mask,
                            Concept::Lanes => &f.lane_mask,
                        };
                        let pred = binarize(&pm.data()[k * plane..(k + 1) * plane]);
                        r.add(seq.condition, 0, concept, IouCounts::of(&pred, target)?);
                    }
                }
            }
            Ok(r)
        })
        .collect();
    let mut report = IouReport::new(vec!["Frame".into()]);
    for p in partial {
        report.merge(&p?);
    }
    Ok(report)
}

fn decode_segments(model: &Model<f32>, z: &Tensor<f32>, concept: Concept) -> Result<Tensor<f32>> {
    let w = model.layout().total();
    let range = model.layout().range(concept);
    let rows = z.shape()[0];
    let data: Vec<f32> = (0..rows)
        .flat_map(|i| z.data()[i * w + range.start..i * w + range.end].iter().copied())
        .collect();
    model.decode_concept(concept, &Tensor::new([rows, range.len()], data)?)
}

fn check_resolution(model: &Model<f32>, ds: &Dataset) -> Result<()> {
    if model.arch.resolution != ds.resolution {
        return Err(Error::Config(format!(
            "model resolution {} differs from dataset resolution {}",
            model.arch.resolution, ds.resolution
        )));
    }
    Ok(())
}

/// Scores the predictor: from every window of 8 encoded frames it predicts
/// the next 4 latents, which the autoencoder's concept decoders turn into
/// masks compared with frames 9..12.
pub fn evaluate_predictor(
    autoencoder: &Model<f32>,
    predictor: &Model<f32>,
    ds: &Dataset,
    latents: &LatentTrajectories,
    sequences: &[usize],
) -> Result<IouReport> {
    check_resolution(autoencoder, ds)?;
    if predictor.kind != ModelKind::Net4 {
        return Err(Error::Usage(format!("{} is not a sequence predictor", predictor.kind)));
    }
    if latents.trajectories.len() != ds.sequences.len() {
        return Err(Error::Data("latent file and dataset hold different sequence counts".into()));
    }
    let p = predictor.arch.predictor;
    let window = predictor_window(&predictor.arch);
    let horizons: Vec<String> = (0..p.outputs).map(|k| format!("Frame {}", p.inputs + k + 1)).collect();
    let width = latents.width();
    let partial: Vec<Result<IouReport>> = sequences
        .par_iter()
        .map(|&s| {
            let seq = &ds.sequences[s];
            let len = latents.len_of(s);
            if len != seq.frames.len() {
                return Err(Error::Data(format!("sequence {s}: latent and frame counts differ")));
            }
            let mut r = IouReport::new(horizons.clone());
            for start in 0..(len + 1).saturating_sub(window) {
                let inputs: Vec<Tensor<f32>> = (0..p.inputs)
                    .map(|k| Tensor::new([1, width], latents.latent(s, start + k).to_vec()))
                    .collect::<Result<_>>()?;
                let preds = predictor.sequence_predict(&inputs)?;
                for (h, z) in preds.iter().enumerate() {
                    let f = &seq.frames[start + p.inputs + h];
                    for concept in [Concept::Cars, Concept::Lanes] {
                        let pm = decode_segments(autoencoder, z, concept)?;
                        let target = match concept {
                            Concept::Cars => &f.car_mask,
                            Concept::Lanes => &f.lane_mask,
                        };
                        r.add(seq.condition, h, concept, IouCounts::of(&binarize(pm.data()), target)?);
                    }
                }
            }
            Ok(r)
        })
        .collect();
    let mut report = IouReport::new(horizons);
    for p in partial {
        report.merge(&p?);
    }
    Ok(report)
}

// ---- latent statistics -----------------------------------------------------

/// Fraction of triples kept for the ρ regression.
pub const RHO_SUBSAMPLE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    /// Per-dimension variance over every latent.
    pub variance: Vec<f64>,
    /// Contiguous pairs entering ξ.
    pub pairs: usize,
    /// Triples used by the ρ regression.
    pub rows: usize,
    pub subsample: f64,
    pub xi: f64,
    pub rho: f64,
}

impl LatentStats {
    pub fn to_csv(&self) -> String {
        format!(
            "xi,rho,pairs,rho_rows,subsample\n{},{},{},{},{}\n",
            self.xi, self.rho, self.pairs, self.rows, self.subsample
        )
    }
}

/// Row-major `len × width` trajectories in 64-bit.
pub fn trajectories_f64(l: &LatentTrajectories) -> Vec<Vec<f64>> {
    l.trajectories
        .iter()
        .map(|t| t.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn check_width(width: usize, trajs: &[Vec<f64>]) -> Result<()> {
    if width == 0 {
        return Err(Error::Usage("latent width must be positive".into()));
    }
    if let Some(t) = trajs.iter().find(|t| t.len() % width != 0) {
        return Err(Error::dim("latent trajectory", &[t.len()], &[width]));
    }
    Ok(())
}

/// Population variance of every dimension over all latents.
pub fn latent_variance(width: usize, trajs: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_width(width, trajs)?;
    let n: usize = trajs.iter().map(|t| t.len() / width).sum();
    if n == 0 {
        return Err(Error::Degenerate("no latents".into()));
    }
    let mut mean = vec![0.0; width];
    for t in trajs {
        for row in t.chunks(width) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for t in trajs {
        for row in t.chunks(width) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    Ok(var)
}

/// Mean over dimensions of the squared step between consecutive latents,
/// normalized by the pair count and that dimension's variance.
pub fn temporal_coherence_xi(width: usize, trajs: &[Vec<f64>]) -> Result<f64> {
    let var = latent_variance(width, trajs)?;
    xi_with_variance(width, trajs, &var).map(|(xi, _)| xi)
}

fn xi_with_variance(width: usize, trajs: &[Vec<f64>], var: &[f64]) -> Result<(f64, usize)> {
    if let Some(t) = trajs.iter().find(|t| t.len() / width < 2) {
        return Err(Error::Usage(format!(
            "temporal coherence needs trajectories of at least 2 latents, got {}",
            t.len() / width
        )));
    }
    if let Some(i) = var.iter().position(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::Degenerate(format!("latent dimension {i} has zero variance")));
    }
    let mut sums = vec![0.0; width];
    let mut pairs = 0;
    for t in trajs {
        let rows: Vec<&[f64]> = t.chunks(width).collect();
        for w in rows.windows(2) {
            for ((s, &a), &b) in sums.iter_mut().zip(w[0]).zip(w[1]) {
                *s += (a - b) * (a - b);
            }
            pairs += 1;
        }
    }
    let xi = sums.iter().zip(var).map(|(&s, &v)| s / (pairs as f64 * v)).sum::<f64>() / width as f64;
    Ok((xi, pairs))
}

/// Per dimension, least-squares fit of `z_i(t+2) ≈ a·z_i(t) + b·z_i(t+1)`
/// over a seeded tenth of all triples; mean over dimensions of the mean
/// squared residual.
pub fn predictivity_rho(width: usize, trajs: &[Vec<f64>], seed: u64) -> Result<f64> {
    rho_rows(width, trajs, seed).map(|(r, _)| r)
}

fn rho_rows(width: usize, trajs: &[Vec<f64>], seed: u64) -> Result<(f64, usize)> {
    check_width(width, trajs)?;
    if let Some(t) = trajs.iter().find(|t| t.len() / width < 3) {
        return Err(Error::Usage(format!(
            "predictivity needs trajectories of at least 3 latents, got {}",
            t.len() / width
        )));
    }
    let mut triples: Vec<(usize, usize)> = Vec::new();
    for (s, t) in trajs.iter().enumerate() {
        for i in 0..t.len() / width - 2 {
            triples.push((s, i));
        }
    }
    let keep = (triples.len() as f64 * RHO_SUBSAMPLE).ceil() as usize;
    if keep < 2 {
        return Err(Error::Usage(format!(
            "predictivity subsample has {keep} rows, fewer than the 2 unknowns"
        )));
    }
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    triples.truncate(keep);
    triples.sort_unstable();
    let at = |s: usize, t: usize, i: usize| trajs[s][t * width + i];
    let mut total = 0.0;
    for i in 0..width {
        let (mut s00, mut s01, mut s11, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(s, t) in &triples {
            let (x0, x1, y) = (at(s, t, i), at(s, t + 1, i), at(s, t + 2, i));
            s00 += x0 * x0;
            s01 += x0 * x1;
            s11 += x1 * x1;
            r0 += x0 * y;
            r1 += x1 * y;
        }
        let (a, b) = solve_normal_2x2(s00, s01, s11, r0, r1);
        let mut sse = 0.0;
        for &(s, t) in &triples {
            let e = at(s, t + 2, i) - a * at(s, t, i) - b * at(s, t + 1, i);
            sse += e * e;
        }
        total += sse / keep as f64;
    }
    Ok((total / width as f64, keep))
}

/// Minimum-norm solution of the symmetric 2×2 normal equations.
fn solve_normal_2x2(s00: f64, s01: f64, s11: f64, r0: f64, r1: f64) -> (f64, f64) {
    let det = s00 * s11 - s01 * s01;
    let scale = (s00 + s11).max(f64::MIN_POSITIVE);
    if det > 1e-12 * scale * scale {
        return ((s11 * r0 - s01 * r1) / det, (s00 * r1 - s01 * r0) / det);
    }
    // Collinear columns: regress on their common direction.
    if scale <= f64::MIN_POSITIVE {
        return (0.0, 0.0);
    }
    let (u0, u1) = if s00 >= s11 {
        (1.0, s01 / s00)
    } else {
        (s01 / s11, 1.0)
    };
    let quad = u0 * u0 * s00 + 2.0 * u0 * u1 * s01 + u1 * u1 * s11;
    if quad <= 0.0 {
        return (0.0, 0.0);
    }
    let c = (u0 * r0 + u1 * r1) / quad;
    (c * u0, c * u1)
}

pub fn latent_stats(width: usize, trajs: &[Vec<f64>], seed: u64) -> Result<LatentStats> {
    let variance = latent_variance(width, trajs)?;
    let (xi, pairs) = xi_with_variance(width, trajs, &variance)?;
    let (rho, rows) = rho_rows(width, trajs, seed)?;
    Ok(LatentStats {
        variance,
        pairs,
        rows,
        subsample: RHO_SUBSAMPLE,
        xi,
        rho,
    })
}

// ---- interpolation and imagery ------------------------------------------

/// Decodings of one latent through every decoder of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub latent: Vec<f32>,
    /// `3×R×R` in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub cars: Option<Vec<f32>>,
    pub lanes: Option<Vec<f32>>,
}

/// Decodes a single latent (batch of one).
pub fn decode_latent(model: &Model<f32>, z: &[f32]) -> Result<Decoded> {
    let w = model.layout().total();
    if z.len() != w {
        return Err(Error::dim("decode_latent", &[z.len()], &[w]));
    }
    let zt = Tensor::new([1, w], z.to_vec())?;
    let rgb = model.decode_visual(&zt)?.into_data();
    let concept = |c: Concept| -> Result<Option<Vec<f32>>> {
        if !model.kind.has_concepts() {
            return Ok(None);
        }
        let seg = model.layout().project(z, c)?.to_vec();
        let t = Tensor::new([1, seg.len()], seg)?;
        Ok(Some(model.decode_concept(c, &t)?.into_data()))
    };
    Ok(Decoded {
        latent: z.to_vec(),
        cars: concept(Concept::Cars)?,
        lanes: concept(Concept::Lanes)?,
        rgb,
    })
}

/// Latent mean of a single `3×R×R` frame.
pub fn encode_frame(model: &Model<f32>, rgb: &[f32]) -> Result<Vec<f32>> {
    let r = model.arch.resolution;
    if rgb.len() != 3 * r * r {
        return Err(Error::Config(format!(
            "frame holds {} values, model expects 3×{r}×{r}",
            rgb.len()
        )));
    }
    let (mu, _) = model.encode(&Tensor::new([1, 3, r, r], rgb.to_vec())?)?;
    Ok(mu.into_data())
}

/// `(1 - α)·a + α·b`, elementwise.
pub fn mix_latents(a: &[f32], b: &[f32], alpha: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| (1.0 - alpha) * x + alpha * y).collect()
}

/// Decodes the latent mixes at the given factors between two frames.
pub fn interpolate_at(model: &Model<f32>, frame_a: &[f32], frame_b: &[f32], alphas: &[f32]) -> Result<Vec<Decoded>> {
    let za = encode_frame(model, frame_a)?;
    let zb = encode_frame(model, frame_b)?;
    alphas
        .iter()
        .map(|&a| decode_latent(model, &mix_latents(&za, &zb, a)))
        .collect()
}

/// `steps` evenly spaced mixes strictly between the two frames' latents.
pub fn interpolate(model: &Model<f32>, frame_a: &[f32], frame_b: &[f32], steps: usize) -> Result<Vec<Decoded>> {
    if steps == 0 {
        return Err(Error::Usage("interpolation needs at least one step".into()));
    }
    let alphas: Vec<f32> = (1..=steps).map(|k| k as f32 / (steps + 1) as f32).collect();
    interpolate_at(model, frame_a, frame_b, &alphas)
}

/// Feeds the first predicted latent back as the newest input, `iterations`
/// times.
pub fn imagery_rollout(predictor: &Model<f32>, seed_latents: &[Vec<f32>], iterations: usize) -> Result<Vec<Vec<f32>>> {
    predictor.predictor()?;
    let n_in = predictor.arch.predictor.inputs;
    if seed_latents.len() != n_in {
        return Err(Error::Usage(format!(
            "imagery needs exactly {n_in} seed latents, got {}",
            seed_latents.len()
        )));
    }
    let width = predictor.layout().total();
    let mut window: Vec<Vec<f32>> = seed_latents.to_vec();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let inputs: Vec<Tensor<f32>> = window
            .iter()
            .map(|z| Tensor::new([1, width], z.clone()))
            .collect::<Result<_>>()?;
        let next = predictor.sequence_predict(&inputs)?.swap_remove(0).into_data();
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

// ---- image output ------------------------------------------------------------

/// `3×R×R` channel-major values in `[0, 1]` as interleaved 8-bit RGB.
pub fn to_rgb8(chw: &[f32], resolution: usize) -> Vec<u8> {
    let plane = resolution * resolution;
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push((chw[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Paints thresholded car pixels cyan and lane pixels yellow over a frame.
pub fn overlay(chw: &[f32], cars: Option<&[f32]>, lanes: Option<&[f32]>, resolution: usize) -> Vec<f32> {
    let plane = resolution * resolution;
    let mut out = chw.to_vec();
    for (map, color) in [(lanes, [1.0, 1.0, 0.0]), (cars, [0.0, 1.0, 1.0])] {
        let Some(map) = map else { continue };
        for (p, &v) in binarize(map).iter().enumerate() {
            if v == 1 {
                for c in 0..3 {
                    out[c * plane + p] = color[c];
                }
            }
        }
    }
    out
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, chw: &[f32], resolution: usize) -> Result<()> {
    let mut bytes = format!("P6\n{resolution} {resolution}\n255\n").into_bytes();
    bytes.extend(to_rgb8(chw, resolution));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
