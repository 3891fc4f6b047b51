//! Binary containers (datasets, latent trajectories, checkpoints) and the
//! deterministic split/window machinery used by training.
//!
//! Every container is little-endian with byte offsets measured from the
//! start of the file:
//!
//! ```text
//! LSDS  magic[4] version:u32 resolution:u32 sequences:u32 frames:u64
//!       { offset:u64 length:u32 } * sequences
//!       { rgb:f32[3·R·R] car:u8[R·R] lane:u8[R·R] condition:u8 } * frames
//!
//! LSLT  magic[4] version:u32 width:u32 cars:u32 lanes:u32 trajectories:u32
//!       { offset:u64 length:u32 } * trajectories
//!       latent:f32[width] * (sum of lengths)
//!
//! LSCK  magic[4] version:u32 kind:u8 digest[32] epoch:u32 batches:u64
//!       params:u32 block * params  optimizer_step:u64 slots:u32 block * slots
//!       block = name_len:u16 name[name_len] ndim:u8 dims:u32[ndim] data:f32[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::networks::{LatentLayout, ModelKind};
use crate::scene::{generate_sequence, Condition, Frame, SceneConfig, SceneSequence};

pub const FORMAT_VERSION: u32 = 1;

const DATASET_MAGIC: &[u8; 4] = b"LSDS";
const LATENT_MAGIC: &[u8; 4] = b"LSLT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"LSCK";

// ---- byte helpers ----------------------------------------------------------

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Data(format!(
                "{}: truncated at byte {} (wanted {n} more of {})",
                self.what,
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Data(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported version {version}",
                self.what
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Data("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes after declared payload",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Offsets must be strictly increasing, contiguous with the payload that
/// follows the index, and consistent with the record sizes.
fn check_index(
    what: &str,
    index: &[(u64, u32)],
    payload_start: u64,
    record: u64,
    file_len: u64,
) -> Result<()> {
    let mut expected = payload_start;
    for (i, &(off, len)) in index.iter().enumerate() {
        if off != expected {
            return Err(Error::Data(format!(
                "{what}: index entry {i} points at byte {off}, expected {expected}"
            )));
        }
        if len == 0 {
            return Err(Error::Data(format!("{what}: index entry {i} is empty")));
        }
        expected = off + len as u64 * record;
        if expected > file_len {
            return Err(Error::Data(format!(
                "{what}: index entry {i} runs past end of file"
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---- datasets --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DataSequence {
    pub condition: Condition,
    pub frames: Vec<Frame>,
}

impl From<SceneSequence> for DataSequence {
    fn from(s: SceneSequence) -> Self {
        DataSequence {
            condition: s.condition,
            frames: s.frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub sequences: Vec<DataSequence>,
}

impl Dataset {
    pub fn new(resolution: usize, sequences: Vec<DataSequence>) -> Result<Self> {
        let plane = resolution * resolution;
        for (i, s) in sequences.iter().enumerate() {
            if s.frames.is_empty() {
                return Err(Error::Data(format!("sequence {i} has no frames")));
            }
            for f in &s.frames {
                if f.rgb.len() != 3 * plane || f.car_mask.len() != plane || f.lane_mask.len() != plane {
                    return Err(Error::Data(format!(
                        "sequence {i} has a frame that is not {resolution}×{resolution}"
                    )));
                }
            }
        }
        Ok(Dataset {
            resolution,
            sequences,
        })
    }

    /// `count` sequences from `base`, cycling through the four conditions,
    /// each with its own seed drawn from `base.seed`.
    pub fn generate(base: &SceneConfig, count: usize) -> Result<Self> {
        base.validate()?;
        if count == 0 {
            return Err(Error::Config("dataset needs at least one sequence".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        let mut seqs = Vec::with_capacity(count);
        for i in 0..count {
            let cfg = SceneConfig {
                condition: Condition::ALL[i % Condition::ALL.len()],
                seed: rng.random(),
                ..base.clone()
            };
            seqs.push(generate_sequence(&cfg)?.into());
        }
        Dataset::new(base.resolution, seqs)
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn sequence_lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.frames.len()).collect()
    }

    fn record_len(&self) -> usize {
        let plane = self.resolution * self.resolution;
        3 * plane * 4 + 2 * plane + 1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.resolution as u32);
        w.u32(self.sequences.len() as u32);
        w.u64(self.frame_count() as u64);
        let header = 4 + 4 + 4 + 4 + 8 + 12 * self.sequences.len();
        let mut offset = header as u64;
        for s in &self.sequences {
            w.u64(offset);
            w.u32(s.frames.len() as u32);
            offset += (s.frames.len() * self.record_len()) as u64;
        }
        for s in &self.sequences {
            for f in &s.frames {
                w.f32s(&f.rgb);
                w.bytes(&f.car_mask);
                w.bytes(&f.lane_mask);
                w.u8(s.condition.code());
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(DATASET_MAGIC)?;
        let resolution = r.u32()? as usize;
        if resolution == 0 || resolution > 4096 {
            return Err(Error::Data(format!("dataset: implausible resolution {resolution}")));
        }
        let n_seq = r.u32()? as usize;
        let n_frames = r.u64()?;
        let mut index = Vec::with_capacity(n_seq.min(1 << 16));
        for _ in 0..n_seq {
            index.push((r.u64()?, r.u32()?));
        }
        let plane = resolution * resolution;
        let record = (3 * plane * 4 + 2 * plane + 1) as u64;
        check_index("dataset", &index, r.pos as u64, record, bytes.len() as u64)?;
        let declared: u64 = index.iter().map(|&(_, l)| l as u64).sum();
        if declared != n_frames {
            return Err(Error::Data(format!(
                "dataset: index lists {declared} frames, header declares {n_frames}"
            )));
        }
        if r.pos as u64 + n_frames * record != bytes.len() as u64 {
            return Err(Error::Data(format!(
                "dataset: {} bytes do not match {n_frames} frames of {record} bytes",
                bytes.len()
            )));
        }
        let mut sequences = Vec::with_capacity(n_seq);
        for (i, &(_, len)) in index.iter().enumerate() {
            let mut frames = Vec::with_capacity(len as usize);
            let mut condition = None;
            for _ in 0..len {
                let rgb = r.f32s(3 * plane)?;
                let car_mask = r.take(plane)?.to_vec();
                let lane_mask = r.take(plane)?.to_vec();
                if car_mask.iter().chain(&lane_mask).any(|&v| v > 1) {
                    return Err(Error::Data(format!("dataset: sequence {i} has non-binary mask")));
                }
                let c = Condition::from_code(r.u8()?)?;
                if condition.is_some_and(|p| p != c) {
                    return Err(Error::Data(format!(
                        "dataset: sequence {i} mixes condition tags"
                    )));
                }
                condition = Some(c);
                frames.push(Frame {
                    rgb,
                    car_mask,
                    lane_mask,
                });
            }
            sequences.push(DataSequence {
                condition: condition.expect("non-empty sequence"),
                frames,
            });
        }
        r.finish()?;
        Dataset::new(resolution, sequences)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

// ---- latent trajectories ---------------------------------------------------

/// Time-ordered latent vectors, one trajectory per driving sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectories {
    pub layout: LatentLayout,
    /// Each entry is `length × width`, row-major.
    pub trajectories: Vec<Vec<f32>>,
}

impl LatentTrajectories {
    pub fn new(layout: LatentLayout, trajectories: Vec<Vec<f32>>) -> Result<Self> {
        let width = layout.total();
        for (i, t) in trajectories.iter().enumerate() {
            if t.len() % width != 0 {
                return Err(Error::Data(format!(
                    "trajectory {i} is not a whole number of width-{width} vectors"
                )));
            }
            if t.len() / width < 3 {
                return Err(Error::Data(format!(
                    "trajectory {i} has {} latents; at least 3 are required",
                    t.len() / width
                )));
            }
        }
        Ok(LatentTrajectories {
            layout,
            trajectories,
        })
    }

    pub fn width(&self) -> usize {
        self.layout.total()
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.trajectories[i].len() / self.width()
    }

    /// Latent `t` of trajectory `i`.
    pub fn latent(&self, i: usize, t: usize) -> &[f32] {
        let w = self.width();
        &self.trajectories[i][t * w..(t + 1) * w]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(LATENT_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.layout.total() as u32);
        w.u32(self.layout.cars() as u32);
        w.u32(self.layout.lanes() as u32);
        w.u32(self.trajectories.len() as u32);
        let mut offset = (4 + 4 * 5 + 12 * self.trajectories.len()) as u64;
        for t in &self.trajectories {
            w.u64(offset);
            w.u32((t.len() / self.width()) as u32);
            offset += (t.len() * 4) as u64;
        }
        for t in &self.trajectories {
            w.f32s(t);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "latent file");
        r.magic(LATENT_MAGIC)?;
        let width = r.u32()? as usize;
        let cars = r.u32()? as usize;
        let lanes = r.u32()? as usize;
        let layout = LatentLayout::new(width, cars, lanes).map_err(|e| Error::Data(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            index.push((r.u64()?, r.u32()?));
        }
        check_index("latent file", &index, r.pos as u64, (width * 4) as u64, bytes.len() as u64)?;
        let mut trajectories = Vec::with_capacity(count);
        for &(_, len) in &index {
            trajectories.push(r.f32s(len as usize * width)?);
        }
        r.finish()?;
        LatentTrajectories::new(layout, trajectories)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorBlock {
    fn write(&self, w: &mut Writer) {
        w.u16(self.name.len() as u16);
        w.bytes(self.name.as_bytes());
        w.u8(self.shape.len() as u8);
        for &d in &self.shape {
            w.u32(d as u32);
        }
        w.f32s(&self.data);
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Data("checkpoint: block name is not utf-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().product();
        let data = r.f32s(numel)?;
        Ok(TensorBlock { name, shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// SHA-256 of the canonical architecture description.
    pub digest: [u8; 32],
    pub epoch: u32,
    /// Batch iterations completed; drives the KL annealing weight.
    pub batch_counter: u64,
    pub params: Vec<TensorBlock>,
    pub optimizer_step: u64,
    pub optimizer: Vec<TensorBlock>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.kind.code());
        w.bytes(&self.digest);
        w.u32(self.epoch);
        w.u64(self.batch_counter);
        w.u32(self.params.len() as u32);
        for b in &self.params {
            b.write(&mut w);
        }
        w.u64(self.optimizer_step);
        w.u32(self.optimizer.len() as u32);
        for b in &self.optimizer {
            b.write(&mut w);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let kind = ModelKind::from_code(r.u8()?)?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let epoch = r.u32()?;
        let batch_counter = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 12));
        for _ in 0..n {
            params.push(TensorBlock::read(&mut r)?);
        }
        let optimizer_step = r.u64()?;
        let m = r.u32()? as usize;
        let mut optimizer = Vec::with_capacity(m.min(1 << 12));
        for _ in 0..m {
            optimizer.push(TensorBlock::read(&mut r)?);
        }
        r.finish()?;
        Ok(Checkpoint {
            kind,
            digest,
            epoch,
            batch_counter,
            params,
            optimizer_step,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Loads and rejects a checkpoint whose model kind or architecture
    /// digest differs from the expected one.
    pub fn load_expecting(path: impl AsRef<Path>, kind: ModelKind, digest: &[u8; 32]) -> Result<Self> {
        let ck = Self::load(path.as_ref())?;
        if ck.kind != kind {
            return Err(Error::Config(format!(
                "{}: checkpoint holds {:?}, expected {:?}",
                path.as_ref().display(),
                ck.kind,
                kind
            )));
        }
        if &ck.digest != digest {
            return Err(Error::Config(format!(
                "{}: architecture digest does not match the configured model",
                path.as_ref().display()
            )));
        }
        Ok(ck)
    }
}

// ---- splitting and windows -------------------------------------------------

/// Whole-sequence partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `n_sequences` whole sequences by `fractions`, shuffled by `seed`.
pub fn split(n_sequences: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "split fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let nonzero = f.iter().filter(|&&v| v > 0.0).count();
    if n_sequences < nonzero {
        return Err(Error::Usage(format!(
            "{n_sequences} sequences cannot fill {nonzero} nonzero partitions"
        )));
    }
    // Largest-remainder apportionment, then make sure every nonzero share
    // gets at least one sequence.
    let exact: Vec<f64> = f.iter().map(|&v| v * n_sequences as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut i = 0;
    while counts.iter().sum::<usize>() < n_sequences {
        let k = order[i % 3];
        if f[k] > 0.0 {
            counts[k] += 1;
        }
        i += 1;
    }
    for k in 0..3 {
        if f[k] > 0.0 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[k] = 1;
        }
    }
    let mut idx: Vec<usize> = (0..n_sequences).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut cursor = 0;
    for k in 0..3 {
        parts[k] = idx[cursor..cursor + counts[k]].to_vec();
        parts[k].sort_unstable();
        cursor += counts[k];
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

/// A run of consecutive frames inside one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub sequence: usize,
    pub start: usize,
}

/// All windows of `window` frames at multiples of `stride` inside the
/// listed sequences, shuffled by `seed` (pass `None` to keep natural order).
pub fn batch_windows(
    sequences: &[usize],
    lengths: &[usize],
    window: usize,
    stride: usize,
    seed: Option<u64>,
) -> Result<Vec<Window>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    let shortest = sequences.iter().map(|&s| lengths[s]).min().unwrap_or(0);
    if window > shortest {
        return Err(Error::Config(format!(
            "window {window} exceeds the shortest sequence ({shortest} frames)"
        )));
    }
    let mut out = Vec::new();
    for &s in sequences {
        let mut start = 0;
        while start + window <= lengths[s] {
            out.push(Window { sequence: s, start });
            start += stride;
        }
    }
    if let Some(seed) = seed {
        out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(out)
}
