//! Model aggregation: weighted pair blending, N-model soft averaging,
//! per-pixel majority voting and argmax decoding.
//!
//! Blends accumulate in `f64` in input order and round to `f32` once, so
//! results are bit-reproducible. Every tie resolves to the smallest class id.

use thiserror::Error;

use crate::tensor_io::{FormatError, ProbMap, SegMask, IGNORE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("no inputs")]
    Empty,
    #[error("shape mismatch: input {index} is {found}, expected {expected}")]
    Shape {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("ensemble coefficient {0} is outside [0, 1]")]
    Coefficient(f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Weight on the first model of a pair, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct EnsembleCoefficient(f64);

impl EnsembleCoefficient {
    pub fn new(tau: f64) -> Result<Self, EnsembleError> {
        if (0.0..=1.0).contains(&tau) {
            Ok(Self(tau))
        } else {
            Err(EnsembleError::Coefficient(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn shape_str(p: &ProbMap) -> String {
    let (c, h, w) = p.shape();
    format!("{c}x{h}x{w}")
}

fn check_shapes(maps: &[&ProbMap]) -> Result<(), EnsembleError> {
    let first = maps.first().ok_or(EnsembleError::Empty)?;
    for (index, m) in maps.iter().enumerate().skip(1) {
        if !m.same_shape(first) {
            return Err(EnsembleError::Shape {
                index,
                expected: shape_str(first),
                found: shape_str(m),
            });
        }
    }
    Ok(())
}

/// `tau * p1 + (1 - tau) * p2`, elementwise. The output is flagged
/// normalized when both inputs are.
pub fn weighted_pair(
    p1: &ProbMap,
    p2: &ProbMap,
    tau: EnsembleCoefficient,
) -> Result<ProbMap, EnsembleError> {
    check_shapes(&[p1, p2])?;
    let t = tau.get();
    let values: Vec<f64> = p1
        .values()
        .iter()
        .zip(p2.values())
        .map(|(&a, &b)| t * f64::from(a) + (1.0 - t) * f64::from(b))
        .collect();
    Ok(p1.with_values_f64(p1.is_normalized() && p2.is_normalized(), &values)?)
}

/// Elementwise mean of all inputs, summed in list order.
pub fn soft_average(models: &[ProbMap]) -> Result<ProbMap, EnsembleError> {
    let refs: Vec<&ProbMap> = models.iter().collect();
    check_shapes(&refs)?;
    let n = models.len() as f64;
    let mut acc = vec![0.0f64; models[0].values().len()];
    for m in models {
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += f64::from(v);
        }
    }
    for a in &mut acc {
        *a /= n;
    }
    let normalized = models.iter().all(ProbMap::is_normalized);
    Ok(models[0].with_values_f64(normalized, &acc)?)
}

/// Per-pixel majority over hard label maps. Ignore votes are not counted;
/// a pixel with no counted vote stays ignore.
pub fn vote(masks: &[SegMask]) -> Result<SegMask, EnsembleError> {
    let first = masks.first().ok_or(EnsembleError::Empty)?;
    for (index, m) in masks.iter().enumerate().skip(1) {
        if !m.same_dims(first) {
            return Err(EnsembleError::Shape {
                index,
                expected: format!("{}x{}", first.height(), first.width()),
                found: format!("{}x{}", m.height(), m.width()),
            });
        }
    }
    let mut out = Vec::with_capacity(first.len());
    let mut counts = [0u32; 256];
    for pix in 0..first.len() {
        counts.fill(0);
        for m in masks {
            counts[m.labels()[pix] as usize] += 1;
        }
        let mut best = (IGNORE, 0u32);
        for (label, &n) in counts[..IGNORE as usize].iter().enumerate() {
            if n > best.1 {
                best = (label as u8, n);
            }
        }
        out.push(best.0);
    }
    Ok(SegMask::new(first.width(), first.height(), out)?)
}

/// Smallest class index attaining each pixel's maximum score.
pub fn argmax_map(p: &ProbMap) -> Result<SegMask, EnsembleError> {
    let plane = p.plane();
    let values = p.values();
    let mut out = Vec::with_capacity(plane);
    for pix in 0..plane {
        let mut best = (0usize, f32::NEG_INFINITY);
        for c in 0..p.classes() {
            let v = values[c * plane + pix];
            if v > best.1 {
                best = (c, v);
            }
        }
        let label = u8::try_from(best.0)
            .ok()
            .filter(|&l| l != IGNORE)
            .ok_or_else(|| {
                FormatError::Dimensions(format!("class {} does not fit a mask label", best.0))
            })?;
        out.push(label);
    }
    Ok(SegMask::new(p.width(), p.height(), out)?)
}

/// One-hot probability map of a mask; ignore pixels become all-zero vectors.
pub fn one_hot(mask: &SegMask, classes: usize) -> Result<ProbMap, EnsembleError> {
    let plane = mask.len();
    let mut values = vec![0.0f32; classes * plane];
    for (pix, &l) in mask.labels().iter().enumerate() {
        if l != IGNORE {
            let c = l as usize;
            if c >= classes {
                return Err(FormatError::Dimensions(format!(
                    "label {l} is not below class count {classes}"
                ))
                .into());
            }
            values[c * plane + pix] = 1.0;
        }
    }
    Ok(ProbMap::new(
        classes,
        mask.height(),
        mask.width(),
        false,
        values,
    )?)
}
