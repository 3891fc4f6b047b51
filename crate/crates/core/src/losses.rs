//! Training objectives: annealed KL, visual reconstruction, class-balanced
//! concept cross-entropy and the composite losses of each network.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Bindings, Concept, Model, ModelKind};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// KL weight `1 - (1 - k0)·κ^b` at batch `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub k0: f64,
    pub kappa: f64,
}

impl AnnealSchedule {
    pub fn new(k0: f64, kappa: f64) -> Result<Self> {
        let s = AnnealSchedule { k0, kappa };
        s.validate()?;
        Ok(s)
    }

    /// Picks κ so the weight reaches 0.99 after 60% of `total_batches`.
    pub fn for_budget(k0: f64, total_batches: u64) -> Result<Self> {
        if !(k0 > 0.0 && k0 <= 1.0) {
            return Err(Error::Config(format!("k0 must lie in (0, 1], got {k0}")));
        }
        let reach = (0.6 * total_batches as f64).max(1.0);
        let kappa = if k0 >= 0.99 {
            0.5
        } else {
            (0.01 / (1.0 - k0)).powf(1.0 / reach)
        };
        AnnealSchedule::new(k0, kappa)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k0 > 0.0 && self.k0 <= 1.0) {
            return Err(Error::Config(format!("k0 must lie in (0, 1], got {}", self.k0)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        Ok(())
    }

    pub fn weight(&self, b: u64) -> f64 {
        1.0 - (1.0 - self.k0) * self.kappa.powf(b as f64)
    }
}

/// Term weights; `*_next` scale the reconstruction of the following frame
/// and `*_pred` the reconstruction of the frame after it from the recurrent
/// prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub visual: f64,
    pub cars: f64,
    pub lanes: f64,
    pub visual_next: f64,
    pub cars_next: f64,
    pub lanes_next: f64,
    pub visual_pred: f64,
    pub cars_pred: f64,
    pub lanes_pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            visual: 1.0,
            cars: 10.0,
            lanes: 10.0,
            visual_next: 1.0,
            cars_next: 10.0,
            lanes_next: 10.0,
            visual_pred: 1.0,
            cars_pred: 10.0,
            lanes_pred: 10.0,
        }
    }
}

impl LossWeights {
    fn all(&self) -> [f64; 9] {
        [
            self.visual,
            self.cars,
            self.lanes,
            self.visual_next,
            self.cars_next,
            self.lanes_next,
            self.visual_pred,
            self.cars_pred,
            self.lanes_pred,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.all();
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// Only the three unprimed weights, others zero.
    pub fn frame_only(self) -> Self {
        LossWeights {
            visual_next: 0.0,
            cars_next: 0.0,
            lanes_next: 0.0,
            visual_pred: 0.0,
            cars_pred: 0.0,
            lanes_pred: 0.0,
            ..self
        }
    }
}

/// Class ratios `P` of the two concepts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptLossConfig {
    pub p_cars: f64,
    pub p_lanes: f64,
    pub smoothing: f64,
}

impl ConceptLossConfig {
    pub fn new(p_cars: f64, p_lanes: f64, smoothing: f64) -> Result<Self> {
        for (name, p) in [("cars", p_cars), ("lanes", p_lanes)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("class ratio for {name} must lie in (0, 1], got {p}")));
            }
        }
        Ok(ConceptLossConfig {
            p_cars,
            p_lanes,
            smoothing,
        })
    }

    pub fn ratio(&self, c: Concept) -> f64 {
        match c {
            Concept::Cars => self.p_cars,
            Concept::Lanes => self.p_lanes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Kl,
    Visual,
    Cars,
    Lanes,
    VisualNext,
    CarsNext,
    LanesNext,
    VisualPred,
    CarsPred,
    LanesPred,
    Latent,
}

impl Term {
    pub const NET3: [Term; 10] = [
        Term::Kl,
        Term::Visual,
        Term::Cars,
        Term::Lanes,
        Term::VisualNext,
        Term::CarsNext,
        Term::LanesNext,
        Term::VisualPred,
        Term::CarsPred,
        Term::LanesPred,
    ];

    pub fn for_kind(kind: ModelKind) -> &'static [Term] {
        match kind {
            ModelKind::Net1 => &Term::NET3[..2],
            ModelKind::Net2 => &Term::NET3[..4],
            ModelKind::Net3 => &Term::NET3,
            ModelKind::Net4 => &[Term::Latent],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::Kl => "E_K",
            Term::Visual => "E_V",
            Term::Cars => "E_C",
            Term::Lanes => "E_L",
            Term::VisualNext => "E'_V",
            Term::CarsNext => "E'_C",
            Term::LanesNext => "E'_L",
            Term::VisualPred => "E''_V",
            Term::CarsPred => "E''_C",
            Term::LanesPred => "E''_L",
            Term::Latent => "E_Z",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Frames of one batch in `B×3×R×R` layout with optional `B×1×R×R` masks.
#[derive(Clone, Debug)]
pub struct FrameBatch<T> {
    pub images: Tensor<T>,
    pub cars: Option<Vec<T>>,
    pub lanes: Option<Vec<T>>,
    /// `(sequence, time)` of each sample, when known.
    pub positions: Option<Vec<(usize, usize)>>,
}

impl<T: Scalar> FrameBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    fn mask(&self, c: Concept) -> Result<&[T]> {
        let m = match c {
            Concept::Cars => &self.cars,
            Concept::Lanes => &self.lanes,
        };
        m.as_deref()
            .ok_or_else(|| Error::Usage(format!("batch has no {c:?} masks")))
    }
}

/// Weighted terms recorded on a tape and their sum.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub terms: Vec<(Term, Option<Var>)>,
}

impl LossTerms {
    /// Term values; zero-weight terms that were skipped report 0.
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Vec<(Term, f64)> {
        self.terms
            .iter()
            .map(|&(t, v)| (t, v.map_or(0.0, |v| tape.value(v)[0].to_f64().unwrap_or(f64::NAN))))
            .collect()
    }

    pub fn total_value<T: Scalar>(&self, tape: &Tape<T>) -> f64 {
        tape.value(self.total)[0].to_f64().unwrap_or(f64::NAN)
    }
}

struct Accumulator {
    total: Option<Var>,
    terms: Vec<(Term, Option<Var>)>,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator {
            total: None,
            terms: Vec::new(),
        }
    }

    /// Adds `weight·f()`; `f` is not evaluated for zero weights.
    fn push<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        term: Term,
        weight: f64,
        f: impl FnOnce(&mut Tape<T>) -> Result<Var>,
    ) -> Result<()> {
        if weight == 0.0 {
            self.terms.push((term, None));
            return Ok(());
        }
        let raw = f(tape)?;
        let v = if weight == 1.0 {
            raw
        } else {
            tape.affine(raw, T::of(weight), T::zero())
        };
        self.total = Some(match self.total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
        self.terms.push((term, Some(v)));
        Ok(())
    }

    fn finish<T: Scalar>(self, tape: &mut Tape<T>) -> Result<LossTerms> {
        let total = match self.total {
            Some(t) => t,
            None => tape.constant(&[1], vec![T::zero()])?,
        };
        Ok(LossTerms {
            total,
            terms: self.terms,
        })
    }
}

// ---- standalone terms ------------------------------------------------------

/// Closed-form KL of `N(mu, exp(log_var))` from the standard normal.
pub fn kl_gaussian<T: Scalar>(mu: &[T], log_var: &[T]) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(&[mu.len().max(1)], pad(mu))?;
    let l = tape.constant(&[log_var.len().max(1)], pad(log_var))?;
    let v = tape.kl_gaussian(m, l)?;
    Ok(tape.value(v)[0].to_f64().unwrap_or(f64::NAN))
}

fn pad<T: Scalar>(x: &[T]) -> Vec<T> {
    if x.is_empty() {
        vec![T::zero()]
    } else {
        x.to_vec()
    }
}

/// Unit-variance Gaussian negative log-likelihood without constants:
/// `½·Σ (x - x̂)²`.
pub fn recon_nll_visual<T: Scalar>(reconstruction: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if reconstruction.shape() != target.shape() {
        return Err(Error::dim("recon_nll_visual", reconstruction.shape(), target.shape()));
    }
    let mut tape = Tape::new();
    let r = tape.leaf(reconstruction);
    let v = tape.half_sse(r, target.data())?;
    Ok(tape.value(v)[0].to_f64().unwrap_or(f64::NAN))
}

/// Class-balanced cross-entropy of one or more probability maps (leading
/// axis = sample) against binary masks.
pub fn weighted_concept_nll<T: Scalar>(prob: &Tensor<T>, mask: &[T], p: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.leaf(prob);
    let v = tape.weighted_bce(q, mask, T::of(p))?;
    Ok(tape.value(v)[0].to_f64().unwrap_or(f64::NAN))
}

// ---- composite losses ------------------------------------------------------

fn check_images<T: Scalar>(batch: &FrameBatch<T>, noise: &Tensor<T>, width: usize) -> Result<()> {
    let want = [batch.batch_size(), width];
    if noise.shape() != want {
        return Err(Error::dim("reparameterize", noise.shape(), &want));
    }
    Ok(())
}

/// Encodes the batch and samples `z = mu + exp(½·log_var)·noise`.
fn sample_latent<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    b: &Bindings,
    batch: &FrameBatch<T>,
    noise: &Tensor<T>,
) -> Result<(Var, Var, Var)> {
    check_images(batch, noise, model.layout().total())?;
    let x = tape.constant(batch.images.shape(), batch.images.data().to_vec())?;
    let (mu, lv) = model.encoder()?.forward(tape, b, x)?;
    let z = tape.reparameterize(mu, lv, noise)?;
    Ok((mu, lv, z))
}

fn visual_term<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>, b: &Bindings, z: Var, target: &FrameBatch<T>) -> Result<Var> {
    let y = model.visual_decoder()?.forward(tape, b, z)?;
    tape.half_sse(y, target.images.data())
}

fn concept_term<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    b: &Bindings,
    z: Var,
    target: &FrameBatch<T>,
    c: Concept,
    cfg: &ConceptLossConfig,
) -> Result<Var> {
    let mask = target.mask(c)?;
    let y = model.decode_concept_from_latent(tape, b, z, c)?;
    tape.weighted_bce(y, mask, T::of(cfg.ratio(c)))
}

/// Annealed KL plus visual reconstruction.
pub fn loss_net1<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    b: &Bindings,
    batch: &FrameBatch<T>,
    noise: &Tensor<T>,
    anneal: f64,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let (mu, lv, z) = sample_latent(tape, model, b, batch, noise)?;
    let mut acc = Accumulator::new();
    acc.push(tape, Term::Kl, anneal, |t| t.kl_gaussian(mu, lv))?;
    acc.push(tape, Term::Visual, weights.visual, |t| visual_term(t, model, b, z, batch))?;
    acc.finish(tape)
}

#[allow(clippy::too_many_arguments)]
fn net2_terms<T: Scalar>(
    tape: &mut Tape<T>,
    acc: &mut Accumulator,
    model: &Model<T>,
    b: &Bindings,
    batch: &FrameBatch<T>,
    noise: &Tensor<T>,
    anneal: f64,
    weights: &LossWeights,
    concepts: &ConceptLossConfig,
) -> Result<Var> {
    batch.mask(Concept::Cars)?;
    batch.mask(Concept::Lanes)?;
    let (mu, lv, z) = sample_latent(tape, model, b, batch, noise)?;
    acc.push(tape, Term::Kl, anneal, |t| t.kl_gaussian(mu, lv))?;
    acc.push(tape, Term::Visual, weights.visual, |t| visual_term(t, model, b, z, batch))?;
    acc.push(tape, Term::Cars, weights.cars, |t| {
        concept_term(t, model, b, z, batch, Concept::Cars, concepts)
    })?;
    acc.push(tape, Term::Lanes, weights.lanes, |t| {
        concept_term(t, model, b, z, batch, Concept::Lanes, concepts)
    })?;
    Ok(z)
}

/// `E_K + E_V + E_C + E_L`, the concept terms decoding only their segment.
#[allow(clippy::too_many_arguments)]
pub fn loss_net2<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    b: &Bindings,
    batch: &FrameBatch<T>,
    noise: &Tensor<T>,
    anneal: f64,
    weights: &LossWeights,
    concepts: &ConceptLossConfig,
) -> Result<LossTerms> {
    let mut acc = Accumulator::new();
    net2_terms(tape, &mut acc, model, b, batch, noise, anneal, weights, concepts)?;
    acc.finish(tape)
}

/// Net2 loss on `x`, reconstruction of `x¹` from its own sampled latent and
/// reconstruction of `x²` from the recurrent prediction `h(z, z¹)`.
///
/// `noise[0]` samples `z` and `noise[1]` samples `z¹`.
#[allow(clippy::too_many_arguments)]
pub fn loss_net3<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    b: &Bindings,
    frames: [&FrameBatch<T>; 3],
    noise: [&Tensor<T>; 2],
    anneal: f64,
    weights: &LossWeights,
    concepts: &ConceptLossConfig,
) -> Result<LossTerms> {
    let [x, x1, x2] = frames;
    check_consecutive(frames)?;
    let n = x.batch_size();
    if x1.batch_size() != n || x2.batch_size() != n {
        return Err(Error::Usage("the three frame batches differ in size".into()));
    }
    let mut acc = Accumulator::new();
    let z = net2_terms(tape, &mut acc, model, b, x, noise[0], anneal, weights, concepts)?;

    let needs_z1 = [
        weights.visual_next,
        weights.cars_next,
        weights.lanes_next,
        weights.visual_pred,
        weights.cars_pred,
        weights.lanes_pred,
    ]
    .iter()
    .any(|&w| w != 0.0);
    if !needs_z1 {
        for t in &Term::NET3[4..] {
            acc.terms.push((*t, None));
        }
        return acc.finish(tape);
    }
    for f in [x1, x2] {
        f.mask(Concept::Cars)?;
        f.mask(Concept::Lanes)?;
    }
    let (_, _, z1) = sample_latent(tape, model, b, x1, noise[1])?;
    acc.push(tape, Term::VisualNext, weights.visual_next, |t| visual_term(t, model, b, z1, x1))?;
    acc.push(tape, Term::CarsNext, weights.cars_next, |t| {
        concept_term(t, model, b, z1, x1, Concept::Cars, concepts)
    })?;
    acc.push(tape, Term::LanesNext, weights.lanes_next, |t| {
        concept_term(t, model, b, z1, x1, Concept::Lanes, concepts)
    })?;

    let needs_pred = weights.visual_pred != 0.0 || weights.cars_pred != 0.0 || weights.lanes_pred != 0.0;
    let z2 = if needs_pred {
        Some(model.latent_rnn()?.forward(tape, b, z, z1)?)
    } else {
        None
    };
    let z2v = z2.unwrap_or(z1);
    acc.push(tape, Term::VisualPred, weights.visual_pred, |t| visual_term(t, model, b, z2v, x2))?;
    acc.push(tape, Term::CarsPred, weights.cars_pred, |t| {
        concept_term(t, model, b, z2v, x2, Concept::Cars, concepts)
    })?;
    acc.push(tape, Term::LanesPred, weights.lanes_pred, |t| {
        concept_term(t, model, b, z2v, x2, Concept::Lanes, concepts)
    })?;
    acc.finish(tape)
}

fn check_consecutive<T: Scalar>(frames: [&FrameBatch<T>; 3]) -> Result<()> {
    let pos: Vec<_> = frames.iter().map(|f| f.positions.as_ref()).collect();
    let (Some(p0), Some(p1), Some(p2)) = (pos[0], pos[1], pos[2]) else {
        return Ok(());
    };
    if p0.len() != p1.len() || p0.len() != p2.len() {
        return Err(Error::Usage("frame position lists differ in length".into()));
    }
    for ((a, b), c) in p0.iter().zip(p1).zip(p2) {
        if a.0 != b.0 || a.0 != c.0 || b.1 != a.1 + 1 || c.1 != a.1 + 2 {
            return Err(Error::Usage(format!(
                "frames {a:?}, {b:?}, {c:?} are not consecutive in one sequence"
            )));
        }
    }
    Ok(())
}

/// Mean squared error over every horizon and latent dimension.
pub fn loss_net4<T: Scalar>(tape: &mut Tape<T>, predicted: &[Var], targets: &[Tensor<T>]) -> Result<Var> {
    if predicted.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Usage("no predictions to score".into()));
    }
    let mut total: Option<Var> = None;
    for (&p, t) in predicted.iter().zip(targets) {
        if tape.shape(p) != t.shape() {
            return Err(Error::dim("loss_net4", tape.shape(p), t.shape()));
        }
        let e = tape.mse(p, t.data())?;
        total = Some(match total {
            Some(acc) => tape.add(acc, e)?,
            None => e,
        });
    }
    let k = predicted.len() as f64;
    Ok(tape.affine(total.expect("nonempty"), T::of(1.0 / k), T::zero()))
}
