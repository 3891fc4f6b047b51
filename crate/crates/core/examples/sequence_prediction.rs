//! Trains an autoencoder, fits the recurrent predictor on its latents, scores
//! predicted masks four frames ahead and rolls the predictor forward on its own
//! outputs.
//!
//!     cargo run --example sequence_prediction -- [out_dir]

use std::path::PathBuf;

use latent_drive::dataset::{split, Dataset};
use latent_drive::metrics::{decode_latent, evaluate_predictor, imagery_rollout, overlay, write_ppm};
use latent_drive::networks::{ArchConfig, Concept, Model, ModelKind};
use latent_drive::scene::SceneConfig;
use latent_drive::trainer::{export_latents, train, TrainConfig, TrainData, TrainOptions};

fn main() -> latent_drive::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("latent-drive-imagery"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| latent_drive::Error::io(&out, e))?;

    let scene = SceneConfig { resolution: 32, seed: 21, ..SceneConfig::default() };
    let ds = Dataset::generate(&scene, 16)?;
    let arch = ArchConfig::desk(32);

    let ae_cfg = TrainConfig { kind: ModelKind::Net3, epochs: 4, seed: 21, arch: arch.clone(), ..TrainConfig::default() };
    let mut autoencoder = Model::<f32>::init(ModelKind::Net3, &arch, 21)?;
    train(&ae_cfg, &mut autoencoder, TrainData::Frames(&ds), &TrainOptions::default())?;
    let latents = export_latents(&autoencoder, &ds)?;

    let p_cfg = TrainConfig { kind: ModelKind::Net4, epochs: 10, batch_size: 32, ..ae_cfg };
    let mut predictor = Model::<f32>::init(ModelKind::Net4, &arch, 21)?;
    let report = train(&p_cfg, &mut predictor, TrainData::Latents(&latents), &TrainOptions::default())?;
    if let Some(last) = report.epochs.last() {
        println!("predictor validation MSE {:.5}", last.val_value("total").unwrap_or(f64::NAN));
    }

    let parts = split(ds.sequences.len(), (0.7, 0.25, 0.05), 21)?;
    let iou = evaluate_predictor(&autoencoder, &predictor, &ds, &latents, &parts.test)?;
    for (h, name) in iou.horizons.iter().enumerate() {
        println!(
            "{name}: car IoU {:.3}, lane IoU {:.3}",
            iou.value(None, Concept::Cars, h).unwrap_or(f64::NAN),
            iou.value(None, Concept::Lanes, h).unwrap_or(f64::NAN)
        );
    }

    let n = arch.predictor.inputs;
    let seeds: Vec<Vec<f32>> = (0..n).map(|t| latents.latent(0, t).to_vec()).collect();
    let imagined = imagery_rollout(&predictor, &seeds, 9)?;
    for (k, z) in imagined.iter().enumerate() {
        let d = decode_latent(&autoencoder, z)?;
        let img = overlay(&d.rgb, d.cars.as_deref(), d.lanes.as_deref(), 32);
        write_ppm(&out.join(format!("imagine-{:02}.ppm", k + 1)), &img, 32)?;
    }
    println!("{} imagined frames in {}", imagined.len(), out.display());
    Ok(())
}
