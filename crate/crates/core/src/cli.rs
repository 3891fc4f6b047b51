//! Command-line front end: one subcommand per pipeline stage, all driven by
//! a TOML run configuration and a single seed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Checkpoint, Dataset, LatentTrajectories};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics;
use crate::networks::{ArchConfig, Model, ModelKind};
use crate::scene::{class_pixel_ratio, SceneConfig};
use crate::trainer::{self, TrainConfig, TrainData, TrainOptions};

/// Training knobs shared by every model (the kind comes from the command).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u32,
    pub k0: f64,
    pub kappa: Option<f64>,
    pub smoothing: f64,
    pub split: [f64; 3],
    pub weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            micro_batch: t.micro_batch,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            k0: t.k0,
            kappa: t.kappa,
            smoothing: t.smoothing,
            split: t.split,
            weights: t.weights,
        }
    }
}

/// Overrides applied when training the sequence predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        PredictorSection {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
        }
    }
}

/// Everything one run needs; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Sequences written by `gen-data`.
    pub sequences: usize,
    /// Seed of the ρ subsample.
    pub stats_seed: u64,
    pub scene: SceneConfig,
    pub train: TrainSection,
    pub predictor: PredictorSection,
    /// Network sizes; the desk preset for the scene resolution when absent.
    pub arch: Option<ArchConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sequences: 64,
            stats_seed: 0,
            scene: SceneConfig::default(),
            train: TrainSection::default(),
            predictor: PredictorSection::default(),
            arch: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fills in the architecture and propagates the seed.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.scene.seed = self.seed;
        if self.arch.is_none() {
            self.arch = Some(ArchConfig::desk(self.scene.resolution));
        }
        self.scene.validate()?;
        self.arch().validate()?;
        if self.sequences == 0 {
            return Err(Error::Config("sequences must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn arch(&self) -> &ArchConfig {
        self.arch.as_ref().expect("resolved config")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig {
            kind,
            epochs: t.epochs,
            batch_size: t.batch_size,
            micro_batch: t.micro_batch,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            clip_norm: t.clip_norm,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            weights: t.weights,
            k0: t.k0,
            kappa: t.kappa,
            smoothing: t.smoothing,
            split: t.split,
            arch: self.arch().clone(),
        };
        if kind == ModelKind::Net4 {
            cfg.epochs = self.predictor.epochs;
            cfg.batch_size = self.predictor.batch_size;
            cfg.learning_rate = self.predictor.learning_rate;
        }
        cfg
    }

    pub fn split(&self, n_sequences: usize) -> Result<dataset::Split> {
        let f = self.train.split;
        dataset::split(n_sequences, (f[0], f[1], f[2]), self.seed)
    }
}

// ---- argument parsing ------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "latent-drive", version, about = "Concept-partitioned driving-scene autoencoders")]
pub struct Cli {
    /// Worker threads (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true, default_value_t = false)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train net1, net2 or net3 on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: ModelKind,
        /// Final checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training log (default: the checkpoint path with a .csv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the sequence predictor on exported latents.
    TrainPredictor {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode every frame with a trained autoencoder and save the means.
    ExportLatents {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "net3")]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// IoU table on the test split, plus latent statistics for autoencoders.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model: ModelKind,
        /// Autoencoder whose decoders render predicted latents (net4 only).
        #[arg(long)]
        decoder: Option<PathBuf>,
        /// Kind of the decoder checkpoint.
        #[arg(long, default_value = "net3")]
        decoder_model: ModelKind,
        /// Exported latents (net4 only).
        #[arg(long)]
        latents: Option<PathBuf>,
        /// IoU table; latent statistics go to the same stem with `-latent.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode evenly spaced mixes between two frames' latents.
    Interpolate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "net3")]
        model: ModelKind,
        /// Global frame index of the first endpoint.
        #[arg(long)]
        a: usize,
        /// Global frame index of the second endpoint.
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Output directory for the PPM frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll the predictor forward on its own outputs.
    Imagine {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long, default_value = "net3")]
        decoder_model: ModelKind,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 9)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Temporal coherence ξ and predictivity residual ρ of a latent file.
    LatentStats {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn config(&self) -> &ConfigArg {
        match self {
            Command::GenData { config, .. }
            | Command::Train { config, .. }
            | Command::TrainPredictor { config, .. }
            | Command::ExportLatents { config, .. }
            | Command::Eval { config, .. }
            | Command::Interpolate { config, .. }
            | Command::Imagine { config, .. }
            | Command::LatentStats { config, .. } => config,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let base = match &cli.command.config().config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed)?;
    if !cli.quiet {
        eprintln!("# resolved configuration\n{}", cfg.to_toml());
    }
    let progress = !cli.quiet;
    match &cli.command {
        Command::GenData { out, .. } => gen_data(&cfg, out),
        Command::Train {
            data,
            model,
            out,
            log,
            resume,
            ..
        } => {
            if *model == ModelKind::Net4 {
                return Err(Error::Usage("use train-predictor for net4".into()));
            }
            let ds = Dataset::load(data)?;
            train_cmd(&cfg, *model, TrainData::Frames(&ds), out, log.as_deref(), resume.as_deref(), progress)
        }
        Command::TrainPredictor {
            latents,
            out,
            log,
            resume,
            ..
        } => {
            let lat = LatentTrajectories::load(latents)?;
            train_cmd(
                &cfg,
                ModelKind::Net4,
                TrainData::Latents(&lat),
                out,
                log.as_deref(),
                resume.as_deref(),
                progress,
            )
        }
        Command::ExportLatents {
            data,
            checkpoint,
            model,
            out,
            ..
        } => {
            let ds = Dataset::load(data)?;
            let m = trainer::load_model(checkpoint, *model, cfg.arch())?;
            let lat = trainer::export_latents(&m, &ds)?;
            lat.save(out)?;
            println!("exported {} trajectories of width {}", lat.trajectories.len(), lat.width());
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            model,
            decoder,
            decoder_model,
            latents,
            out,
            ..
        } => eval_cmd(&cfg, data, checkpoint, *model, decoder.as_deref(), *decoder_model, latents.as_deref(), out),
        Command::Interpolate {
            data,
            checkpoint,
            model,
            a,
            b,
            steps,
            out,
            ..
        } => interpolate_cmd(&cfg, data, checkpoint, *model, *a, *b, *steps, out),
        Command::Imagine {
            checkpoint,
            decoder,
            decoder_model,
            latents,
            sequence,
            start,
            iters,
            out,
            ..
        } => imagine_cmd(&cfg, checkpoint, decoder, *decoder_model, latents, *sequence, *start, *iters, out),
        Command::LatentStats { latents, out, .. } => {
            let lat = LatentTrajectories::load(latents)?;
            let st = metrics::latent_stats(lat.width(), &metrics::trajectories_f64(&lat), cfg.stats_seed)?;
            println!("xi = {}", st.xi);
            println!("rho = {}", st.rho);
            if let Some(p) = out {
                write_text(p, &st.to_csv())?;
            }
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = Dataset::generate(&cfg.scene, cfg.sequences)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ds.save(out)?;
    let frames = || ds.sequences.iter().flat_map(|s| s.frames.iter());
    let s = cfg.train.smoothing;
    let car = class_pixel_ratio(frames().map(|f| f.car_mask.as_slice()), 1.0)?;
    let lane = class_pixel_ratio(frames().map(|f| f.lane_mask.as_slice()), 1.0)?;
    println!("sequences = {}", ds.sequences.len());
    println!("frames = {}", ds.frame_count());
    println!("car pixel ratio = {car:.6} (P = {:.6})", car.powf(1.0 / s));
    println!("lane pixel ratio = {lane:.6} (P = {:.6})", lane.powf(1.0 / s));
    Ok(())
}

fn train_cmd(
    cfg: &RunConfig,
    kind: ModelKind,
    data: TrainData<'_>,
    out: &Path,
    log: Option<&Path>,
    resume: Option<&Path>,
    progress: bool,
) -> Result<()> {
    let tc = cfg.train_config(kind);
    let mut model = Model::<f32>::init(kind, &tc.arch, cfg.seed)?;
    let resume = match resume {
        Some(p) => Some(Checkpoint::load_expecting(p, kind, &model.digest())?),
        None => None,
    };
    let resuming = resume.is_some();
    let opts = TrainOptions {
        checkpoint: Some(out.to_path_buf()),
        resume,
        progress,
    };
    let report = trainer::train(&tc, &mut model, data, &opts)?;
    let log = log.map_or_else(|| out.with_extension("csv"), Path::to_path_buf);
    if resuming && log.exists() {
        use std::io::Write;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log)
            .map_err(|e| Error::io(&log, e))?;
        f.write_all(report.csv_rows().as_bytes()).map_err(|e| Error::io(&log, e))?;
    } else {
        write_text(&log, &report.to_csv())?;
    }
    if let Some(last) = report.epochs.last() {
        println!("epochs = {}", last.epoch);
        println!("batches = {}", last.batch_counter);
        if let Some(v) = last.val_value("total") {
            println!("final validation loss = {v}");
        }
    }
    println!("checkpoint = {}", out.display());
    println!("log = {}", log.display());
    Ok(())
}

fn stats_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}-latent.csv"))
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    kind: ModelKind,
    decoder: Option<&Path>,
    decoder_kind: ModelKind,
    latents: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let parts = cfg.split(ds.sequences.len())?;
    let model = trainer::load_model(checkpoint, kind, cfg.arch())?;
    let report = if kind == ModelKind::Net4 {
        let dec_path = decoder.ok_or_else(|| Error::Usage("eval of net4 needs --decoder".into()))?;
        let dec = trainer::load_model(dec_path, decoder_kind, cfg.arch())?;
        let lat = match latents {
            Some(p) => LatentTrajectories::load(p)?,
            None => trainer::export_latents(&dec, &ds)?,
        };
        metrics::evaluate_predictor(&dec, &model, &ds, &lat, &parts.test)?
    } else {
        let lat = trainer::export_latents(&model, &ds)?;
        let st = metrics::latent_stats(lat.width(), &metrics::trajectories_f64(&lat), cfg.stats_seed)?;
        let sp = stats_path(out);
        write_text(&sp, &st.to_csv())?;
        println!("xi = {}", st.xi);
        println!("rho = {}", st.rho);
        println!("latent stats = {}", sp.display());
        if kind.has_concepts() {
            metrics::evaluate_concepts(&model, &ds, &parts.test)?
        } else {
            write_text(out, "")?;
            println!("{kind} has no concept decoders; no IoU table");
            return Ok(());
        }
    };
    let csv = report.to_csv();
    write_text(out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn global_frame(ds: &Dataset, index: usize) -> Result<(usize, usize)> {
    let mut left = index;
    for (s, seq) in ds.sequences.iter().enumerate() {
        if left < seq.frames.len() {
            return Ok((s, left));
        }
        left -= seq.frames.len();
    }
    Err(Error::Usage(format!(
        "frame index {index} is out of range (dataset has {} frames)",
        ds.frame_count()
    )))
}

fn write_decoded(dir: &Path, name: &str, d: &metrics::Decoded, resolution: usize) -> Result<()> {
    metrics::write_ppm(&dir.join(format!("{name}.ppm")), &d.rgb, resolution)?;
    if d.cars.is_some() || d.lanes.is_some() {
        let over = metrics::overlay(&d.rgb, d.cars.as_deref(), d.lanes.as_deref(), resolution);
        metrics::write_ppm(&dir.join(format!("{name}-concepts.ppm")), &over, resolution)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn interpolate_cmd(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    kind: ModelKind,
    a: usize,
    b: usize,
    steps: usize,
    out: &Path,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let model = trainer::load_model(checkpoint, kind, cfg.arch())?;
    if ds.resolution != model.arch.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from model resolution {}",
            ds.resolution, model.arch.resolution
        )));
    }
    let (sa, ta) = global_frame(&ds, a)?;
    let (sb, tb) = global_frame(&ds, b)?;
    let fa = &ds.sequences[sa].frames[ta].rgb;
    let fb = &ds.sequences[sb].frames[tb].rgb;
    let frames = metrics::interpolate(&model, fa, fb, steps)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (k, d) in frames.iter().enumerate() {
        write_decoded(out, &format!("interp-{:02}", k + 1), d, ds.resolution)?;
    }
    println!("wrote {} interpolated frames to {}", frames.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn imagine_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    decoder: &Path,
    decoder_kind: ModelKind,
    latents: &Path,
    sequence: usize,
    start: usize,
    iters: usize,
    out: &Path,
) -> Result<()> {
    let predictor = trainer::load_model(checkpoint, ModelKind::Net4, cfg.arch())?;
    let dec = trainer::load_model(decoder, decoder_kind, cfg.arch())?;
    let lat = LatentTrajectories::load(latents)?;
    if sequence >= lat.trajectories.len() {
        return Err(Error::Usage(format!("sequence {sequence} is out of range")));
    }
    let n = predictor.arch.predictor.inputs;
    if start + n > lat.len_of(sequence) {
        return Err(Error::Usage(format!(
            "sequence {sequence} has no {n} latents from frame {start}"
        )));
    }
    let seeds: Vec<Vec<f32>> = (0..n).map(|k| lat.latent(sequence, start + k).to_vec()).collect();
    let imagined = metrics::imagery_rollout(&predictor, &seeds, iters)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (k, z) in imagined.iter().enumerate() {
        let d = metrics::decode_latent(&dec, z)?;
        write_decoded(out, &format!("imagine-{:02}", k + 1), &d, dec.arch.resolution)?;
    }
    println!("wrote {} imagined frames to {}", imagined.len(), out.display());
    Ok(())
}
