//! Procedural driving scenes: a perspective road with dashed lane markings,
//! a few rectangular cars, and binary car/lane masks for every frame.
//!
//! Rendering is flat-shaded with no anti-aliasing so masks are exactly
//! binary. A frame is a pure function of the config, the frame index and the
//! per-frame kinematic state, which makes re-rendering from the log exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Sunny,
    Dark,
    City,
    Freeway,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::City,
        Condition::Freeway,
        Condition::Sunny,
        Condition::Dark,
    ];

    pub fn code(self) -> u8 {
        match self {
            Condition::Sunny => 0,
            Condition::Dark => 1,
            Condition::City => 2,
            Condition::Freeway => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Condition::Sunny,
            1 => Condition::Dark,
            2 => Condition::City,
            3 => Condition::Freeway,
            other => return Err(Error::Data(format!("unknown condition tag {other}"))),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::Sunny => "Sunny",
            Condition::Dark => "Dark",
            Condition::City => "City",
            Condition::Freeway => "Freeway",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Square frame side in pixels.
    pub resolution: usize,
    /// Horizon row as a fraction of the frame height.
    pub horizon_y: f64,
    pub lane_count: usize,
    /// Period of the dashed markings in pixel rows.
    pub dash_period: usize,
    pub max_other_cars: usize,
    pub condition: Condition,
    pub seed: u64,
    pub sequence_length: usize,
    /// Downward scroll of the markings in pixel rows per frame.
    pub ego_speed: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            resolution: 64,
            horizon_y: 0.375,
            lane_count: 3,
            dash_period: 16,
            max_other_cars: 3,
            condition: Condition::Sunny,
            seed: 0,
            sequence_length: 16,
            ego_speed: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if ![32, 64, 128, 256].contains(&self.resolution) {
            return Err(Error::Config(format!(
                "resolution must be one of 32, 64, 128, 256 (got {})",
                self.resolution
            )));
        }
        if self.sequence_length < 12 {
            return Err(Error::Config(format!(
                "sequence_length must be at least 12 (got {})",
                self.sequence_length
            )));
        }
        if !(0.1..0.9).contains(&self.horizon_y) {
            return Err(Error::Config(format!(
                "horizon_y must lie in [0.1, 0.9) (got {})",
                self.horizon_y
            )));
        }
        if self.lane_count == 0 || self.lane_count > 6 {
            return Err(Error::Config("lane_count must be in 1..=6".into()));
        }
        if self.dash_period < 2 {
            return Err(Error::Config("dash_period must be at least 2".into()));
        }
        if self.max_other_cars > 3 {
            return Err(Error::Config("max_other_cars must be in 0..=3".into()));
        }
        Ok(())
    }
}

/// Position and velocity of one car at one frame. Lateral position is a
/// fraction of the road width measured from its center; distance is in
/// units where 1.0 is the bottom edge of the frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CarState {
    pub lateral: f64,
    pub distance: f64,
    pub lateral_velocity: f64,
    pub distance_velocity: f64,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Channel-major RGB, `3 × R × R`, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub car_mask: Vec<u8>,
    pub lane_mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub resolution: usize,
    pub condition: Condition,
    pub frames: Vec<Frame>,
    /// Per frame, the state of every other car.
    pub kinematics: Vec<Vec<CarState>>,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

struct Palette {
    sky: [f32; 3],
    ground: [f32; 3],
    road: [f32; 3],
    marking: [f32; 3],
    building: Option<[f32; 3]>,
}

fn palette(condition: Condition) -> Palette {
    match condition {
        Condition::Sunny => Palette {
            sky: [0.45, 0.70, 0.95],
            ground: [0.30, 0.60, 0.25],
            road: [0.45, 0.45, 0.47],
            marking: [0.95, 0.95, 0.90],
            building: None,
        },
        Condition::Dark => Palette {
            sky: [0.04, 0.04, 0.10],
            ground: [0.06, 0.10, 0.06],
            road: [0.12, 0.12, 0.13],
            marking: [0.45, 0.45, 0.40],
            building: None,
        },
        Condition::City => Palette {
            sky: [0.70, 0.74, 0.80],
            ground: [0.55, 0.52, 0.50],
            road: [0.33, 0.33, 0.35],
            marking: [0.92, 0.92, 0.85],
            building: Some([0.40, 0.36, 0.34]),
        },
        Condition::Freeway => Palette {
            sky: [0.55, 0.75, 0.95],
            ground: [0.55, 0.55, 0.30],
            road: [0.50, 0.50, 0.50],
            marking: [0.98, 0.90, 0.40],
            building: None,
        },
    }
}

const CAR_COLORS: [[f32; 3]; 5] = [
    [0.85, 0.12, 0.10],
    [0.10, 0.25, 0.80],
    [0.95, 0.85, 0.15],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
];

const ROAD_BOTTOM_WIDTH: f64 = 0.95;
const MARKING_WIDTH: f64 = 0.03;
const CAR_WIDTH: f64 = 0.7;
const CAR_ASPECT: f64 = 0.75;
const LANE_CHANGE_FRAMES: usize = 8;

struct Geometry {
    res: usize,
    horizon: usize,
}

impl Geometry {
    fn new(cfg: &SceneConfig) -> Self {
        let res = cfg.resolution;
        Geometry {
            res,
            horizon: (cfg.horizon_y * res as f64).round() as usize,
        }
    }

    /// Road width in pixels at row `y` (zero above the horizon).
    fn road_width(&self, y: f64) -> f64 {
        let span = (self.res - self.horizon) as f64;
        let s = ((y - self.horizon as f64 + 1.0) / span).max(0.0);
        s * ROAD_BOTTOM_WIDTH * self.res as f64
    }

    fn center(&self) -> f64 {
        self.res as f64 / 2.0
    }
}

fn put(rgb: &mut [f32], res: usize, y: usize, x: usize, c: [f32; 3]) {
    let plane = res * res;
    for (ch, v) in c.iter().enumerate() {
        rgb[ch * plane + y * res + x] = *v;
    }
}

fn scale(c: [f32; 3], k: f32) -> [f32; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Renders frame `t` from the car states at that frame.
pub fn render_frame(cfg: &SceneConfig, t: usize, cars: &[CarState]) -> Frame {
    let res = cfg.resolution;
    let geo = Geometry::new(cfg);
    let pal = palette(cfg.condition);
    let mut rgb = vec![0.0f32; 3 * res * res];
    let mut car_mask = vec![0u8; res * res];
    let mut lane_mask = vec![0u8; res * res];
    let period = cfg.dash_period as i64;
    let shift = (t * cfg.ego_speed) as i64;

    for y in 0..res {
        for x in 0..res {
            let mut c = if y < geo.horizon { pal.sky } else { pal.ground };
            if let Some(b) = pal.building {
                // Building blocks flanking the road above the horizon.
                let band = res / 8;
                let tall = (x / band.max(1)).is_multiple_of(2);
                let top = if tall { geo.horizon / 3 } else { geo.horizon / 2 };
                let side = x < res / 4 || x >= res - res / 4;
                if y < geo.horizon && y >= top && side {
                    c = b;
                }
            }
            put(&mut rgb, res, y, x, c);
        }
    }

    for y in geo.horizon..res {
        let yf = y as f64;
        let width = geo.road_width(yf);
        let left = geo.center() - width / 2.0;
        let right = geo.center() + width / 2.0;
        let mark = (MARKING_WIDTH * width).round().max(1.0);
        let dash_on = (y as i64 - shift).rem_euclid(period) < period / 2;
        for x in 0..res {
            let xc = x as f64 + 0.5;
            if xc < left || xc >= right {
                continue;
            }
            put(&mut rgb, res, y, x, pal.road);
            for j in 0..=cfg.lane_count {
                let outer = j == 0 || j == cfg.lane_count;
                if !outer && !dash_on {
                    continue;
                }
                let bx = left + width * j as f64 / cfg.lane_count as f64;
                let lo = (bx - mark / 2.0).clamp(left, right - mark);
                if xc >= lo && xc < lo + mark {
                    put(&mut rgb, res, y, x, pal.marking);
                    lane_mask[y * res + x] = 1;
                }
            }
        }
    }

    // Far cars first so nearer ones overwrite them.
    let mut order: Vec<&CarState> = cars.iter().collect();
    order.sort_by(|a, b| b.distance.total_cmp(&a.distance));
    let dim = if cfg.condition == Condition::Dark { 0.35 } else { 1.0 };
    for car in order {
        if car.distance < 0.9 {
            continue;
        }
        let s = 1.0 / car.distance;
        let bottom = geo.horizon as f64 + s * (res - geo.horizon) as f64;
        let road_w = geo.road_width(bottom);
        let w = CAR_WIDTH * road_w / cfg.lane_count as f64;
        let h = CAR_ASPECT * w;
        let cx = geo.center() + car.lateral * road_w;
        let (x0, x1) = ((cx - w / 2.0).round(), (cx + w / 2.0).round());
        let (y0, y1) = ((bottom - h).round(), bottom.round());
        let x0 = x0.max(0.0) as usize;
        let x1 = (x1.max(0.0) as usize).min(res);
        let y0 = y0.max(0.0) as usize;
        let y1 = (y1.max(0.0) as usize).min(res);
        let body = scale(car.color, dim);
        for y in y0..y1 {
            for x in x0..x1 {
                put(&mut rgb, res, y, x, body);
                car_mask[y * res + x] = 1;
                lane_mask[y * res + x] = 0;
            }
        }
    }

    Frame {
        rgb,
        car_mask,
        lane_mask,
    }
}

struct CarScript {
    lane_center: f64,
    distance0: f64,
    velocity: f64,
    color: [f32; 3],
    lane_change: Option<(usize, f64)>,
}

impl CarScript {
    fn state(&self, t: usize) -> CarState {
        let mut lateral = self.lane_center;
        let mut lateral_velocity = 0.0;
        if let Some((start, delta)) = self.lane_change {
            let rate = delta / LANE_CHANGE_FRAMES as f64;
            if t >= start + LANE_CHANGE_FRAMES {
                lateral += delta;
            } else if t >= start {
                lateral += rate * (t - start) as f64;
                lateral_velocity = rate;
            }
        }
        CarState {
            lateral,
            distance: self.distance0 + self.velocity * t as f64,
            lateral_velocity,
            distance_velocity: self.velocity,
            color: self.color,
        }
    }
}

/// Generates one sequence; bit-identical for identical configs.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<SceneSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_cars = rng.random_range(cfg.max_other_cars.min(1)..=cfg.max_other_cars);
    let lanes = cfg.lane_count;
    let lane_center = |i: usize| -0.5 + (i as f64 + 0.5) / lanes as f64;
    let mut scripts = Vec::with_capacity(n_cars);
    let mut used: Vec<usize> = Vec::new();
    for _ in 0..n_cars {
        // Prefer distinct lanes so cars rarely overlap.
        let mut lane = rng.random_range(0..lanes);
        for _ in 0..4 {
            if !used.contains(&lane) {
                break;
            }
            lane = rng.random_range(0..lanes);
        }
        used.push(lane);
        let distance0 = rng.random_range(1.0..2.6);
        let velocity = rng.random_range(-0.04..0.06);
        let color = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
        scripts.push(CarScript {
            lane_center: lane_center(lane),
            distance0,
            velocity,
            color,
            lane_change: None,
        });
    }
    if let Some(first) = scripts.first_mut() {
        if lanes > 1 && rng.random_bool(0.75) {
            let latest = cfg.sequence_length.saturating_sub(LANE_CHANGE_FRAMES);
            let start = rng.random_range(0..=latest);
            let lane = ((first.lane_center + 0.5) * lanes as f64 - 0.5).round() as usize;
            let dir: i64 = if lane == 0 {
                1
            } else if lane + 1 == lanes {
                -1
            } else if rng.random_bool(0.5) {
                1
            } else {
                -1
            };
            first.lane_change = Some((start, dir as f64 / lanes as f64));
        }
    }

    let mut frames = Vec::with_capacity(cfg.sequence_length);
    let mut kinematics = Vec::with_capacity(cfg.sequence_length);
    for t in 0..cfg.sequence_length {
        let states: Vec<CarState> = scripts.iter().map(|s| s.state(t)).collect();
        frames.push(render_frame(cfg, t, &states));
        kinematics.push(states);
    }
    Ok(SceneSequence {
        resolution: cfg.resolution,
        condition: cfg.condition,
        frames,
        kinematics,
    })
}

/// `(true pixels / all pixels)^(1/s)` pooled over every mask.
pub fn class_pixel_ratio<'a, I>(masks: I, smoothing: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    if smoothing.is_nan() || smoothing <= 0.0 {
        return Err(Error::Usage(format!(
            "smoothing must be positive (got {smoothing})"
        )));
    }
    let (mut on, mut total) = (0u64, 0u64);
    for m in masks {
        on += m.iter().filter(|&&v| v != 0).count() as u64;
        total += m.len() as u64;
    }
    if total == 0 {
        return Err(Error::Usage("class ratio needs at least one mask".into()));
    }
    Ok((on as f64 / total as f64).powf(1.0 / smoothing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn no_other_cars_means_empty_car_masks() {
        let seq = generate_sequence(&SceneConfig {
            max_other_cars: 0,
            ..cfg(3)
        })
        .unwrap();
        assert!(seq.frames.iter().all(|f| f.car_mask.iter().all(|&v| v == 0)));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(
            generate_sequence(&cfg(11)).unwrap(),
            generate_sequence(&cfg(11)).unwrap()
        );
    }

    #[test]
    fn dash_phase_repeats_after_period_over_speed() {
        let c = SceneConfig {
            ego_speed: 4,
            dash_period: 16,
            max_other_cars: 0,
            ..cfg(5)
        };
        let seq = generate_sequence(&c).unwrap();
        for t in 0..seq.len() - 4 {
            assert_eq!(seq.frames[t].lane_mask, seq.frames[t + 4].lane_mask, "t={t}");
        }
        assert_ne!(seq.frames[0].lane_mask, seq.frames[1].lane_mask);
    }

    #[test]
    fn rerender_from_kinematic_log_is_exact() {
        for seed in 0..6 {
            let c = cfg(seed);
            let seq = generate_sequence(&c).unwrap();
            for (t, states) in seq.kinematics.iter().enumerate() {
                assert_eq!(render_frame(&c, t, states), seq.frames[t]);
            }
        }
    }

    #[test]
    fn masks_are_binary_and_images_in_unit_range() {
        let seq = generate_sequence(&cfg(2)).unwrap();
        for f in &seq.frames {
            assert!(f.car_mask.iter().chain(&f.lane_mask).all(|&v| v <= 1));
            assert!(f.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_imbalance_is_preserved() {
        for cond in Condition::ALL {
            let mut cars = Vec::new();
            let mut lanes = Vec::new();
            for seed in 0..20 {
                let seq = generate_sequence(&SceneConfig {
                    condition: cond,
                    ..cfg(seed)
                })
                .unwrap();
                for f in seq.frames {
                    cars.push(f.car_mask);
                    lanes.push(f.lane_mask);
                }
            }
            let car = class_pixel_ratio(cars.iter().map(Vec::as_slice), 1.0).unwrap();
            let lane = class_pixel_ratio(lanes.iter().map(Vec::as_slice), 1.0).unwrap();
            assert!(car < 0.25, "{cond:?} car ratio {car}");
            assert!(lane < 0.08, "{cond:?} lane ratio {lane}");
            assert!(car > 0.0 && lane > 0.0);
        }
    }

    #[test]
    fn class_pixel_ratio_anchor_values() {
        let all = vec![1u8; 8];
        assert_eq!(class_pixel_ratio([all.as_slice()], 4.0).unwrap(), 1.0);
        let half = [1u8, 0, 1, 0];
        let p = class_pixel_ratio([&half[..]], 4.0).unwrap();
        assert!((p - 0.5f64.powf(0.25)).abs() < 1e-12);
        assert!((p - 0.8409).abs() < 1e-4);
        let none = [0u8; 4];
        assert_eq!(class_pixel_ratio([&none[..]], 4.0).unwrap(), 0.0);
        assert!(matches!(
            class_pixel_ratio(std::iter::empty::<&[u8]>(), 4.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn rejects_short_sequences_and_odd_resolutions() {
        assert!(generate_sequence(&SceneConfig {
            sequence_length: 11,
            ..cfg(0)
        })
        .is_err());
        assert!(generate_sequence(&SceneConfig {
            resolution: 48,
            ..cfg(0)
        })
        .is_err());
    }
}
