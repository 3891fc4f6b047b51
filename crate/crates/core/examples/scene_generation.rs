//! Renders one sequence per condition, writes the frames and their concept
//! overlays as PPM images and prints the class pixel ratios.
//!
//!     cargo run --example scene_generation -- [out_dir]

use std::path::PathBuf;

use latent_drive::metrics::{overlay, write_ppm};
use latent_drive::scene::{class_pixel_ratio, generate_sequence, Condition, SceneConfig};

fn main() -> latent_drive::Result<()> {
    let out = std::env::args_os()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("latent-drive-scenes"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| latent_drive::Error::io(&out, e))?;

    for (i, condition) in Condition::ALL.into_iter().enumerate() {
        let cfg = SceneConfig { condition, seed: 11 + i as u64, ..SceneConfig::default() };
        let seq = generate_sequence(&cfg)?;
        let r = cfg.resolution;
        for (t, f) in seq.frames.iter().enumerate().step_by(5) {
            let cars: Vec<f32> = f.car_mask.iter().map(|&m| f32::from(m)).collect();
            let lanes: Vec<f32> = f.lane_mask.iter().map(|&m| f32::from(m)).collect();
            let name = condition.label().to_lowercase();
            write_ppm(&out.join(format!("{name}-{t:02}.ppm")), &f.rgb, r)?;
            write_ppm(&out.join(format!("{name}-{t:02}-masks.ppm")), &overlay(&f.rgb, Some(&cars), Some(&lanes), r), r)?;
        }
        let car = class_pixel_ratio(seq.frames.iter().map(|f| f.car_mask.as_slice()), 1.0)?;
        let lane = class_pixel_ratio(seq.frames.iter().map(|f| f.lane_mask.as_slice()), 1.0)?;
        println!(
            "{:<8} {} frames, {} other cars, car pixels {:.2}%, lane pixels {:.2}%",
            condition.label(),
            seq.frames.len(),
            seq.kinematics[0].len(),
            100.0 * car,
            100.0 * lane
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
