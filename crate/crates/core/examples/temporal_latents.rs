//! Trains the temporally coupled autoencoder, exports the latent trajectories
//! and reports their temporal coherence ξ and predictivity residual ρ next to
//! those of the frame-only model.
//!
//!     cargo run --example temporal_latents -- [epochs]

use latent_drive::dataset::Dataset;
use latent_drive::metrics::{latent_stats, trajectories_f64};
use latent_drive::networks::{ArchConfig, Model, ModelKind};
use latent_drive::scene::SceneConfig;
use latent_drive::trainer::{export_latents, train, TrainConfig, TrainData, TrainOptions};

fn main() -> latent_drive::Result<()> {
    let epochs: u32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let scene = SceneConfig { resolution: 32, seed: 8, ..SceneConfig::default() };
    let ds = Dataset::generate(&scene, 16)?;

    println!("model      xi        rho       pairs");
    for kind in [ModelKind::Net2, ModelKind::Net3] {
        let cfg = TrainConfig { kind, epochs, seed: 8, arch: ArchConfig::desk(32), ..TrainConfig::default() };
        let mut model = Model::<f32>::init(kind, &cfg.arch, cfg.seed)?;
        train(&cfg, &mut model, TrainData::Frames(&ds), &TrainOptions::default())?;
        let latents = export_latents(&model, &ds)?;
        let stats = latent_stats(latents.width(), &trajectories_f64(&latents), 0)?;
        println!("{kind:<8} {:>9.5} {:>9.5} {:>8}", stats.xi, stats.rho, stats.pairs);
    }
    Ok(())
}
