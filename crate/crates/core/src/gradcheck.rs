//! Central finite-difference checks of the analytic loss gradients.
//!
//! The numeric side only ever calls the loss *value*; it never touches the
//! gradient code it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::losses::{
    ce_loss, dice_loss, nce_loss, seg_loss, total_loss, DivideBy, FeatureClip, LossError,
    LossWeights, NceConfig, ProbField,
};
use crate::tensor_io::{SegMask, IGNORE};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate `k`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_k |a_k - n_k| / max(|a_k|, |n_k|, REL_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// A random clip with at least one positive pair.
pub fn random_clip(rng: &mut impl Rng) -> FeatureClip {
    let m = rng.random_range(2..=16usize);
    let d = rng.random_range(1..=16usize);
    let kinds = rng.random_range(1..=4u8);
    let mut classes: Vec<u8> = (0..m)
        .map(|_| {
            if rng.random_bool(0.1) {
                IGNORE
            } else {
                rng.random_range(0..kinds)
            }
        })
        .collect();
    classes[0] = 0;
    classes[1] = 0;
    let frames = (0..m).map(|i| u8::from(i >= m / 2)).collect();
    let scale = rng.random_range(0.2..1.0);
    let features = (0..m * d)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng) / (d as f64).sqrt())
        .collect();
    FeatureClip::new(d, features, classes, frames).expect("generated clip is valid")
}

pub fn random_nce_config(rng: &mut impl Rng) -> NceConfig {
    NceConfig {
        temperature: rng.random_range(0.1..1.0),
        negatives: rng.random_range(0..=16),
        positive_cap: rng.random_range(1..=4),
        rng_seed: rng.random(),
        normalize_features: rng.random_bool(0.5),
        divide_by: if rng.random_bool(0.5) {
            DivideBy::Contributing
        } else {
            DivideBy::All
        },
    }
}

/// Softmax probabilities over a random small image with a partly ignored mask.
pub fn random_probs(rng: &mut impl Rng) -> (ProbField, SegMask) {
    let c = rng.random_range(2..=5usize);
    let h = rng.random_range(1..=8usize);
    let w = rng.random_range(1..=64 / h);
    let plane = h * w;
    let mut values = vec![0.0; c * plane];
    for pix in 0..plane {
        let logits: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (k, l) in logits.iter().enumerate() {
            values[k * plane + pix] = l.exp() / z;
        }
    }
    let mut labels: Vec<u8> = (0..plane)
        .map(|_| {
            if rng.random_bool(0.15) {
                IGNORE
            } else {
                rng.random_range(0..c as u8)
            }
        })
        .collect();
    labels[0] = rng.random_range(0..c as u8);
    let probs = ProbField::new(c, h, w, values).expect("shape by construction");
    (
        probs,
        SegMask::new(w, h, labels).expect("shape by construction"),
    )
}

pub fn random_weights(rng: &mut impl Rng) -> LossWeights {
    LossWeights {
        seg: rng.random_range(0.0..2.0),
        nce: rng.random_range(0.0..2.0),
        dice: rng.random_range(0.0..6.0),
        ce: rng.random_range(0.0..2.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn prob_fd<F>(probs: &ProbField, f: F) -> Vec<f64>
where
    F: Fn(&ProbField) -> Result<f64, LossError>,
{
    central_difference(
        |v| f(&probs.with_values(v.to_vec()).expect("same length")).expect("loss defined"),
        &probs.values,
        FD_STEP,
    )
}

fn feature_fd<F>(clip: &FeatureClip, f: F) -> Vec<f64>
where
    F: Fn(&FeatureClip) -> Result<f64, LossError>,
{
    central_difference(
        |v| f(&clip.with_features(v.to_vec()).expect("same length")).expect("loss defined"),
        clip.features(),
        FD_STEP,
    )
}

/// Worst relative error of one random instance per loss.
pub fn check_instance(loss: &str, rng: &mut impl Rng) -> Result<f64, LossError> {
    Ok(match loss {
        "nce" => {
            let clip = random_clip(rng);
            let cfg = random_nce_config(rng);
            let analytic = nce_loss(&clip, &cfg)?.grad;
            let numeric = feature_fd(&clip, |c| nce_loss(c, &cfg).map(|o| o.value));
            max_relative_error(&analytic, &numeric)
        }
        "ce" => {
            let (p, gt) = random_probs(rng);
            let analytic = ce_loss(&p, &gt)?.grad;
            max_relative_error(
                &analytic,
                &prob_fd(&p, |q| ce_loss(q, &gt).map(|o| o.value)),
            )
        }
        "dice" => {
            let (p, gt) = random_probs(rng);
            let analytic = dice_loss(&p, &gt)?.grad;
            max_relative_error(
                &analytic,
                &prob_fd(&p, |q| dice_loss(q, &gt).map(|o| o.value)),
            )
        }
        "seg" => {
            let (p, gt) = random_probs(rng);
            let w = random_weights(rng);
            let analytic = seg_loss(&p, &gt, &w)?.grad;
            max_relative_error(
                &analytic,
                &prob_fd(&p, |q| seg_loss(q, &gt, &w).map(|o| o.value)),
            )
        }
        "total" => {
            let (p, gt) = random_probs(rng);
            let clip = random_clip(rng);
            let cfg = random_nce_config(rng);
            let w = random_weights(rng);
            let out = total_loss(&p, &gt, &clip, &cfg, &w)?;
            let np = prob_fd(&p, |q| total_loss(q, &gt, &clip, &cfg, &w).map(|o| o.value));
            let nf = feature_fd(&clip, |c| total_loss(&p, &gt, c, &cfg, &w).map(|o| o.value));
            max_relative_error(&out.prob_grad, &np).max(max_relative_error(&out.feature_grad, &nf))
        }
        other => panic!("unknown loss {other}"),
    })
}

pub const LOSSES: [&str; 5] = ["nce", "ce", "dice", "seg", "total"];

/// Runs `instances` random checks of every loss from one seed.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckReport>, LossError> {
    LOSSES
        .iter()
        .enumerate()
        .map(|(i, &loss)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(check_instance(loss, &mut rng)?);
            }
            Ok(GradCheckReport {
                loss,
                instances,
                max_rel_error: worst,
                passed: worst < GRAD_TOLERANCE,
            })
        })
        .collect()
}
