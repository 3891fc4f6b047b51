//! Decodes evenly spaced mixes of two encoded frames and checks that the
//! latents move monotonically from one endpoint to the other.
//!
//!     cargo run --example interpolation -- [out_dir]

use std::path::PathBuf;

use latent_drive::dataset::Dataset;
use latent_drive::metrics::{encode_frame, interpolate, overlay, write_ppm};
use latent_drive::networks::{ArchConfig, Model, ModelKind};
use latent_drive::scene::SceneConfig;
use latent_drive::trainer::{train, TrainConfig, TrainData, TrainOptions};

fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

fn main() -> latent_drive::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("latent-drive-interp"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| latent_drive::Error::io(&out, e))?;

    let scene = SceneConfig { resolution: 32, seed: 2, ..SceneConfig::default() };
    let ds = Dataset::generate(&scene, 12)?;
    let cfg = TrainConfig { kind: ModelKind::Net2, epochs: 5, seed: 2, arch: ArchConfig::desk(32), ..TrainConfig::default() };
    let mut model = Model::<f32>::init(ModelKind::Net2, &cfg.arch, 2)?;
    train(&cfg, &mut model, TrainData::Frames(&ds), &TrainOptions::default())?;

    // Two frames from different conditions.
    let a = &ds.sequences[0].frames[0].rgb;
    let b = &ds.sequences[1].frames[8].rgb;
    let (za, zb) = (encode_frame(&model, a)?, encode_frame(&model, b)?);
    let frames = interpolate(&model, a, b, 5)?;
    for (k, d) in frames.iter().enumerate() {
        let img = overlay(&d.rgb, d.cars.as_deref(), d.lanes.as_deref(), 32);
        write_ppm(&out.join(format!("interp-{:02}.ppm", k + 1)), &img, 32)?;
        println!("step {}: |z - z_a| = {:.3}, |z - z_b| = {:.3}", k + 1, dist(&d.latent, &za), dist(&d.latent, &zb));
    }
    println!("frames in {}", out.display());
    Ok(())
}
