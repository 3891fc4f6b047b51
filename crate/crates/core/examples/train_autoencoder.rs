//! Trains the concept autoencoder on a small dataset and compares its
//! test-split IoU with the predict-everything baseline.
//!
//!     cargo run --example train_autoencoder -- [net1|net2] [epochs]

use latent_drive::dataset::{split, Dataset};
use latent_drive::metrics::{all_positive_baseline, evaluate_concepts};
use latent_drive::networks::{ArchConfig, Concept, Model, ModelKind};
use latent_drive::scene::SceneConfig;
use latent_drive::trainer::{train, TrainConfig, TrainData, TrainOptions};

fn main() -> latent_drive::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: ModelKind = args.next().as_deref().unwrap_or("net2").parse()?;
    let epochs: u32 = args.next().and_then(|s| s.parse().ok()).unwrap_or(15);

    let scene = SceneConfig { resolution: 32, seed: 5, ..SceneConfig::default() };
    let ds = Dataset::generate(&scene, 24)?;
    let mut cfg = TrainConfig {
        kind,
        epochs,
        seed: 5,
        arch: ArchConfig::desk(32),
        ..TrainConfig::default()
    };
    // Concept terms are per-pixel means; scale them up against the summed visual term.
    for w in [&mut cfg.weights.cars, &mut cfg.weights.lanes] {
        *w = 3000.0;
    }

    let mut model = Model::<f32>::init(kind, &cfg.arch, cfg.seed)?;
    let report = train(&cfg, &mut model, TrainData::Frames(&ds), &TrainOptions::default())?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}  train {:>9.3}  val {:>9.3}  val E_V {:>8.3}",
            e.epoch,
            e.train_value("total").unwrap_or(f64::NAN),
            e.val_value("total").unwrap_or(f64::NAN),
            e.val_value("E_V").unwrap_or(f64::NAN),
        );
    }

    if kind.has_concepts() {
        let parts = split(ds.sequences.len(), (0.7, 0.25, 0.05), cfg.seed)?;
        let iou = evaluate_concepts(&model, &ds, &parts.test)?;
        let base = all_positive_baseline(&ds, &parts.test);
        for c in [Concept::Cars, Concept::Lanes] {
            println!(
                "{c:?}: IoU {:.3} (all-positive baseline {:.3})",
                iou.value(None, c, 0).unwrap_or(f64::NAN),
                base.value(None, c, 0).unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
