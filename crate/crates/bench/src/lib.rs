//! Seeded fixtures shared by the criterion benches.

use vspw_core::gradcheck::{random_clip, random_probs};
use vspw_core::{FeatureClip, ProbField, ProbMap, SegMask};

/// Deterministic xorshift stream; fixtures must not depend on `rand` versions.
pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        Self(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }
}

pub fn label_mask(seed: u64, width: usize, height: usize, classes: u8) -> SegMask {
    let mut rng = XorShift::new(seed);
    let labels = (0..width * height)
        .map(|_| (rng.next_u64() % u64::from(classes)) as u8)
        .collect();
    SegMask::new(width, height, labels).expect("shape by construction")
}

pub fn prob_map(seed: u64, classes: usize, height: usize, width: usize) -> ProbMap {
    let mut rng = XorShift::new(seed);
    let plane = height * width;
    let mut values = vec![0.0f32; classes * plane];
    for pix in 0..plane {
        let raw: Vec<f32> = (0..classes).map(|_| rng.unit() + 0.01).collect();
        let sum: f32 = raw.iter().sum();
        for (c, r) in raw.iter().enumerate() {
            values[c * plane + pix] = r / sum;
        }
    }
    ProbMap::new(classes, height, width, true, values).expect("normalized by construction")
}

pub fn nce_clip(seed: u64) -> FeatureClip {
    use rand::SeedableRng;
    random_clip(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

pub fn seg_instance(seed: u64) -> (ProbField, SegMask) {
    use rand::SeedableRng;
    random_probs(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}
