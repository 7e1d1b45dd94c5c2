//! Seeded synthetic tracking sequences: boxes sliding horizontally in
//! separate lanes and bouncing off the image edges, observed with optional
//! Gaussian corner noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub objects: usize,
    pub frames: usize,
    /// Standard deviation of the per-corner noise, pixels.
    pub noise: f64,
    pub seed: u64,
    pub width: f64,
    pub height: f64,
}

impl SyntheticConfig {
    pub fn new(objects: usize, frames: usize, noise: f64, seed: u64) -> Self {
        Self {
            objects,
            frames,
            noise,
            seed,
            width: 1280.0,
            height: 720.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    /// Per frame, `(object id, true box)`; ids start at 1.
    pub ground_truth: Vec<Vec<(u64, BoundingBox)>>,
    /// Per frame, noisy observations of every object.
    pub detections: Vec<Vec<BoundingBox>>,
}

/// Fold a free coordinate into `[0, span]` as if bouncing between walls.
fn bounce(x: f64, span: f64) -> f64 {
    let period = 2.0 * span;
    let m = x.rem_euclid(period);
    if m <= span {
        m
    } else {
        period - m
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lane = cfg.height / cfg.objects.max(1) as f64;
    let objects: Vec<(f64, f64, f64, f64, f64)> = (0..cfg.objects)
        .map(|i| {
            let w = rng.gen_range(40.0..80.0);
            let h = (lane * 0.7).min(rng.gen_range(40.0..90.0));
            let x0 = rng.gen_range(0.0..cfg.width - w);
            let speed = rng.gen_range(2.0..6.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = i as f64 * lane + (lane - h) / 2.0;
            (w, h, x0, speed, y)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let mut seq = SyntheticSequence {
        ground_truth: Vec::with_capacity(cfg.frames),
        detections: Vec::with_capacity(cfg.frames),
    };
    for t in 0..cfg.frames {
        let mut gt = Vec::with_capacity(cfg.objects);
        let mut dets = Vec::with_capacity(cfg.objects);
        for (i, &(w, h, x0, speed, y)) in objects.iter().enumerate() {
            let x = bounce(x0 + speed * t as f64, cfg.width - w);
            let b = BoundingBox::new(x, y, x + w, y + h).with_score(0.9);
            gt.push((i as u64 + 1, b));
            let d = if cfg.noise > 0.0 {
                let mut j = || noise.sample(&mut rng);
                let (x1, y1, x2, y2) = (b.x_min + j(), b.y_min + j(), b.x_max + j(), b.y_max + j());
                BoundingBox::new(x1.min(x2 - 1.0), y1.min(y2 - 1.0), x2, y2).with_score(0.9)
            } else {
                b
            };
            dets.push(d);
        }
        seq.ground_truth.push(gt);
        seq.detections.push(dets);
    }
    seq
}

/// Two equal boxes approaching each other head-on along x with a small
/// vertical offset, crossing mid-sequence.
pub fn crossing(frames: usize, y_offset: f64) -> SyntheticSequence {
    let mut seq = SyntheticSequence {
        ground_truth: Vec::new(),
        detections: Vec::new(),
    };
    let span = 10.0 * frames as f64;
    for t in 0..frames {
        let a = 10.0 * t as f64;
        let b = span - a;
        let boxes = [
            BoundingBox::new(a, 100.0, a + 40.0, 140.0).with_score(0.9),
            BoundingBox::new(b, 100.0 + y_offset, b + 40.0, 140.0 + y_offset).with_score(0.9),
        ];
        seq.ground_truth.push(vec![(1, boxes[0]), (2, boxes[1])]);
        seq.detections.push(boxes.to_vec());
    }
    seq
}
