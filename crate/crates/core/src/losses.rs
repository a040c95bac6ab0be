//! Spatial-temporal contrastive loss, Dice and cross-entropy segmentation
//! losses, and their weighted composition. Every loss returns its value
//! together with the exact analytic gradient of that value.
//!
//! All arithmetic is `f64`. Probability inputs are a [`ProbField`], the
//! `f64` counterpart of [`ProbMap`], so gradients can be checked with
//! finite differences at `h = 1e-5`.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::tensor_io::{ProbMap, SegMask, IGNORE};

/// Lower clamp applied to the true-class probability before the log in CE.
pub const CE_CLAMP: f64 = 1e-12;
/// Additive smoothing in the numerator and denominator of each Dice term.
pub const DICE_SMOOTH: f64 = 1.0;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("no positive pairs: every anchor lacks a same-class peer")]
    NoPositivePairs,
    #[error("all pixels are ignored")]
    AllIgnored,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid feature clip: {0}")]
    Clip(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("label {label} at pixel {pixel} is not below class count {classes}")]
    LabelOutOfRange {
        label: u8,
        pixel: usize,
        classes: usize,
    },
}

/// Patch embeddings drawn from consecutive frames of one clip.
///
/// `features` is row-major `M×D`. Patches whose class is [`IGNORE`] are
/// never used as anchors, positives or negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    dim: usize,
    features: Vec<f64>,
    patch_class: Vec<u8>,
    frame_index: Vec<u8>,
}

impl FeatureClip {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        patch_class: Vec<u8>,
        frame_index: Vec<u8>,
    ) -> Result<Self, LossError> {
        let m = patch_class.len();
        if dim == 0 {
            return Err(LossError::Clip("embedding dimension must be >= 1".into()));
        }
        if m < 2 {
            return Err(LossError::Clip(format!("need at least 2 patches, got {m}")));
        }
        if features.len() != m * dim {
            return Err(LossError::Clip(format!(
                "{m} patches of dimension {dim} need {} values, got {}",
                m * dim,
                features.len()
            )));
        }
        if frame_index.len() != m {
            return Err(LossError::Clip(format!(
                "{} frame indices for {m} patches",
                frame_index.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(LossError::Clip(format!("feature value {i} is not finite")));
        }
        Ok(Self {
            dim,
            features,
            patch_class,
            frame_index,
        })
    }

    pub fn patches(&self) -> usize {
        self.patch_class.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn patch_class(&self) -> &[u8] {
        &self.patch_class
    }

    pub fn frame_index(&self) -> &[u8] {
        &self.frame_index
    }

    /// Same labels and frames, new feature values.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self, LossError> {
        Self::new(
            self.dim,
            features,
            self.patch_class.clone(),
            self.frame_index.clone(),
        )
    }
}

/// Normalizer of the summed per-anchor terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DivideBy {
    /// Number of anchors with at least one positive.
    #[default]
    Contributing,
    /// Every patch in the clip, skipped or not.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NceConfig {
    pub temperature: f64,
    /// Maximum negatives sampled per anchor.
    pub negatives: usize,
    /// Maximum positives sampled per anchor.
    pub positive_cap: usize,
    pub rng_seed: u64,
    pub normalize_features: bool,
    pub divide_by: DivideBy,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            negatives: 64,
            positive_cap: 8,
            rng_seed: 0,
            normalize_features: false,
            divide_by: DivideBy::Contributing,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LossError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.positive_cap == 0 {
            return Err(LossError::Config("positive_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// `seg` and `nce` weight the two top-level terms, `dice` and `ce` weight the
/// two parts of the segmentation term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub seg: f64,
    pub nce: f64,
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            nce: 0.1,
            dice: 5.0,
            ce: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("seg", self.seg),
            ("nce", self.nce),
            ("dice", self.dice),
            ("ce", self.ce),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Config(format!(
                    "weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPairs {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPlan {
    pub anchors: Vec<AnchorPairs>,
    /// Labeled anchors without any same-class peer.
    pub skipped: usize,
    /// Patches carrying the ignore label.
    pub ignored: usize,
}

fn draw(rng: &mut ChaCha8Rng, pool: Vec<usize>, cap: usize) -> Vec<usize> {
    if pool.len() <= cap {
        return pool;
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), cap)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Chooses positives and negatives for every labeled anchor, without
/// replacement and deterministically for a given `rng_seed`. The generator
/// is only consulted when a pool exceeds its cap.
pub fn sample_pairs(clip: &FeatureClip, cfg: &NceConfig) -> PairPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let classes = clip.patch_class();
    let mut anchors = Vec::new();
    let (mut skipped, mut ignored) = (0, 0);
    for (i, &ci) in classes.iter().enumerate() {
        if ci == IGNORE {
            ignored += 1;
            continue;
        }
        let mut same = Vec::new();
        let mut other = Vec::new();
        for (j, &cj) in classes.iter().enumerate() {
            if j == i || cj == IGNORE {
                continue;
            }
            if cj == ci {
                same.push(j);
            } else {
                other.push(j);
            }
        }
        if same.is_empty() {
            skipped += 1;
            continue;
        }
        let positives = draw(&mut rng, same, cfg.positive_cap);
        let negatives = draw(&mut rng, other, cfg.negatives);
        anchors.push(AnchorPairs {
            anchor: i,
            positives,
            negatives,
        });
    }
    PairPlan {
        anchors,
        skipped,
        ignored,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NceOutput {
    pub value: f64,
    /// `dL/dx`, row-major `M×D`.
    pub grad: Vec<f64>,
    /// `M`, all patches in the clip.
    pub patches: usize,
    /// `M'`, anchors that contributed a term.
    pub contributing: usize,
    pub skipped: usize,
}

/// Sum by recursive halving; the split points depend only on the length.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn unit_rows(clip: &FeatureClip) -> (Vec<f64>, Vec<f64>) {
    let d = clip.dim();
    let mut out = Vec::with_capacity(clip.features().len());
    let mut norms = Vec::with_capacity(clip.patches());
    for i in 0..clip.patches() {
        let row = clip.feature(i);
        let n = dot(row, row).sqrt().max(NORM_EPS);
        norms.push(n);
        out.extend(row.iter().map(|v| v / n));
    }
    debug_assert_eq!(out.len(), clip.patches() * d);
    (out, norms)
}

/// Contrastive loss over a clip: for each anchor the log-softmax of each
/// positive similarity against the anchor's negatives, averaged over the
/// positives, then negated and averaged over anchors.
pub fn nce_loss(clip: &FeatureClip, cfg: &NceConfig) -> Result<NceOutput, LossError> {
    let plan = sample_pairs(clip, cfg);
    nce_loss_with_plan(clip, cfg, &plan)
}

/// [`nce_loss`] with a precomputed pairing plan.
pub fn nce_loss_with_plan(
    clip: &FeatureClip,
    cfg: &NceConfig,
    plan: &PairPlan,
) -> Result<NceOutput, LossError> {
    cfg.validate()?;
    if plan.anchors.is_empty() {
        return Err(LossError::NoPositivePairs);
    }
    let d = clip.dim();
    let m = clip.patches();
    let (feats, norms) = if cfg.normalize_features {
        let (u, n) = unit_rows(clip);
        (u, Some(n))
    } else {
        (clip.features().to_vec(), None)
    };
    let row = |i: usize| &feats[i * d..(i + 1) * d];
    let inv_tau = 1.0 / cfg.temperature;
    let denom = match cfg.divide_by {
        DivideBy::Contributing => plan.anchors.len(),
        DivideBy::All => m,
    } as f64;

    let mut anchor_terms = Vec::with_capacity(plan.anchors.len());
    let mut grad = vec![0.0; m * d];
    let mut logits = Vec::new();
    for a in &plan.anchors {
        let xi = row(a.anchor);
        let neg_sims: Vec<f64> = a
            .negatives
            .iter()
            .map(|&n| dot(xi, row(n)) * inv_tau)
            .collect();
        let coef = -1.0 / (denom * a.positives.len() as f64);
        let mut neg_weight = vec![0.0; a.negatives.len()];
        let mut terms = Vec::with_capacity(a.positives.len());
        for &p in &a.positives {
            let sp = dot(xi, row(p)) * inv_tau;
            logits.clear();
            logits.push(sp);
            logits.extend_from_slice(&neg_sims);
            let lse = log_sum_exp(&logits);
            terms.push(sp - lse);

            // d(term)/d(s_p) = 1 - softmax_p, d(term)/d(s_n) = -softmax_n
            let gp = coef * (1.0 - (sp - lse).exp());
            accumulate_pair(&mut grad, &feats, d, a.anchor, p, gp * inv_tau);
            for (w, s) in neg_weight.iter_mut().zip(&neg_sims) {
                *w -= coef * (s - lse).exp();
            }
        }
        for (&n, &gn) in a.negatives.iter().zip(&neg_weight) {
            accumulate_pair(&mut grad, &feats, d, a.anchor, n, gn * inv_tau);
        }
        anchor_terms.push(pairwise_sum(&terms) / a.positives.len() as f64);
    }
    let value = -pairwise_sum(&anchor_terms) / denom;

    if let Some(norms) = norms {
        // Back through x_hat = x / |x|: g_x = (g - x_hat (x_hat . g)) / |x|
        for i in 0..m {
            let u = &feats[i * d..(i + 1) * d];
            let g = &mut grad[i * d..(i + 1) * d];
            let proj = dot(u, g);
            for (gk, uk) in g.iter_mut().zip(u) {
                *gk = (*gk - uk * proj) / norms[i];
            }
        }
    }

    Ok(NceOutput {
        value,
        grad,
        patches: m,
        contributing: plan.anchors.len(),
        skipped: plan.skipped,
    })
}

/// Adds `g * d(x_i . x_j)` to both rows.
fn accumulate_pair(grad: &mut [f64], feats: &[f64], d: usize, i: usize, j: usize, g: f64) {
    for k in 0..d {
        let (fi, fj) = (feats[i * d + k], feats[j * d + k]);
        grad[i * d + k] += g * fj;
        grad[j * d + k] += g * fi;
    }
}

/// `f64` class scores in `C×H×W` layout, the differentiable view of a
/// [`ProbMap`]. Normalization is not enforced so that finite-difference
/// perturbations stay valid inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbField {
    pub fn new(
        classes: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, LossError> {
        if values.len() != classes * height * width {
            return Err(LossError::Shape(format!(
                "{classes}x{height}x{width} field needs {} values, got {}",
                classes * height * width,
                values.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            values,
        })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, LossError> {
        Self::new(self.classes, self.height, self.width, values)
    }
}

impl From<&ProbMap> for ProbField {
    fn from(p: &ProbMap) -> Self {
        Self {
            classes: p.classes(),
            height: p.height(),
            width: p.width(),
            values: p.values().iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Scored pixel indices after validating shapes and label range.
fn scored_pixels(probs: &ProbField, gt: &SegMask) -> Result<Vec<usize>, LossError> {
    if probs.height != gt.height() || probs.width != gt.width() {
        return Err(LossError::Shape(format!(
            "probabilities are {}x{}, ground truth is {}x{}",
            probs.height,
            probs.width,
            gt.height(),
            gt.width()
        )));
    }
    let mut scored = Vec::with_capacity(gt.len());
    for (pixel, &label) in gt.labels().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        if label as usize >= probs.classes {
            return Err(LossError::LabelOutOfRange {
                label,
                pixel,
                classes: probs.classes,
            });
        }
        scored.push(pixel);
    }
    if scored.is_empty() {
        return Err(LossError::AllIgnored);
    }
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// Same layout as the probability input.
    pub grad: Vec<f64>,
}

/// Mean over scored pixels of `-ln(max(p_true, CE_CLAMP))`.
pub fn ce_loss(probs: &ProbField, gt: &SegMask) -> Result<LossGrad, LossError> {
    let scored = scored_pixels(probs, gt)?;
    let n = scored.len() as f64;
    let plane = probs.plane();
    let mut grad = vec![0.0; probs.values.len()];
    let mut terms = Vec::with_capacity(scored.len());
    for &pix in &scored {
        let idx = gt.labels()[pix] as usize * plane + pix;
        let p = probs.values[idx];
        if p >= CE_CLAMP {
            terms.push(-p.ln());
            grad[idx] = -1.0 / (n * p);
        } else {
            terms.push(-CE_CLAMP.ln());
        }
    }
    Ok(LossGrad {
        value: pairwise_sum(&terms) / n,
        grad,
    })
}

/// Soft Dice loss averaged over the classes present in the ground truth,
/// with [`DICE_SMOOTH`] added to numerator and denominator of each term.
pub fn dice_loss(probs: &ProbField, gt: &SegMask) -> Result<LossGrad, LossError> {
    let scored = scored_pixels(probs, gt)?;
    let plane = probs.plane();
    let labels = gt.labels();

    let mut present: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for &pix in &scored {
        present.entry(labels[pix] as usize).or_default();
    }
    for (&c, acc) in present.iter_mut() {
        let base = c * plane;
        let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
        for &pix in &scored {
            let p = probs.values[base + pix];
            psum += p;
            if labels[pix] as usize == c {
                inter += p;
                gsum += 1.0;
            }
        }
        *acc = (inter, psum, gsum);
    }

    let k = present.len() as f64;
    let mut grad = vec![0.0; probs.values.len()];
    let mut ratios = Vec::with_capacity(present.len());
    for (&c, &(inter, psum, gsum)) in &present {
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = psum + gsum + DICE_SMOOTH;
        ratios.push(num / den);
        let base = c * plane;
        let off = num / (den * den);
        for &pix in &scored {
            let g = if labels[pix] as usize == c { 1.0 } else { 0.0 };
            grad[base + pix] = -(2.0 * g / den - off) / k;
        }
    }
    Ok(LossGrad {
        value: 1.0 - pairwise_sum(&ratios) / k,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegLossOutput {
    pub value: f64,
    pub dice: f64,
    pub ce: f64,
    pub grad: Vec<f64>,
}

/// `w.dice * Dice + w.ce * CE`.
pub fn seg_loss(
    probs: &ProbField,
    gt: &SegMask,
    w: &LossWeights,
) -> Result<SegLossOutput, LossError> {
    w.validate()?;
    let dice = dice_loss(probs, gt)?;
    let ce = ce_loss(probs, gt)?;
    let grad = dice
        .grad
        .iter()
        .zip(&ce.grad)
        .map(|(gd, gc)| w.dice * gd + w.ce * gc)
        .collect();
    Ok(SegLossOutput {
        value: w.dice * dice.value + w.ce * ce.value,
        dice: dice.value,
        ce: ce.value,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLossOutput {
    pub value: f64,
    pub seg: SegLossOutput,
    pub nce: NceOutput,
    /// Gradient with respect to the probabilities.
    pub prob_grad: Vec<f64>,
    /// Gradient with respect to the clip features.
    pub feature_grad: Vec<f64>,
}

/// `w.seg * seg_loss + w.nce * nce_loss`. The two gradients belong to
/// disjoint inputs and are returned separately.
pub fn total_loss(
    probs: &ProbField,
    gt: &SegMask,
    clip: &FeatureClip,
    cfg: &NceConfig,
    w: &LossWeights,
) -> Result<TotalLossOutput, LossError> {
    let seg = seg_loss(probs, gt, w)?;
    let nce = nce_loss(clip, cfg)?;
    let value = w.seg * seg.value + w.nce * nce.value;
    let prob_grad = seg.grad.iter().map(|g| w.seg * g).collect();
    let feature_grad = nce.grad.iter().map(|g| w.nce * g).collect();
    Ok(TotalLossOutput {
        value,
        seg,
        nce,
        prob_grad,
        feature_grad,
    })
}

/// One class per patch on a `grid_h × grid_w` grid laid over `mask`: the most
/// frequent label inside the patch footprint (ignore counts as a label),
/// with ties resolved to [`IGNORE`]. Patch order is row-major.
pub fn majority_patch_labels(
    mask: &SegMask,
    grid_h: usize,
    grid_w: usize,
) -> Result<Vec<u8>, LossError> {
    if grid_h == 0
        || grid_w == 0
        || !mask.height().is_multiple_of(grid_h)
        || !mask.width().is_multiple_of(grid_w)
    {
        return Err(LossError::Shape(format!(
            "{}x{} mask does not divide into a {grid_h}x{grid_w} patch grid",
            mask.height(),
            mask.width()
        )));
    }
    let (ph, pw) = (mask.height() / grid_h, mask.width() / grid_w);
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut counts = [0u32; 256];
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    counts[mask.get(x, y) as usize] += 1;
                }
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            let mut winners = counts.iter().enumerate().filter(|(_, &n)| n == best);
            let first = winners.next().map(|(l, _)| l as u8).unwrap_or(IGNORE);
            out.push(if winners.next().is_some() {
                IGNORE
            } else {
                first
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(features: Vec<f64>, dim: usize, classes: Vec<u8>) -> FeatureClip {
        let m = classes.len();
        let frames = (0..m).map(|i| u8::from(i >= m / 2)).collect();
        FeatureClip::new(dim, features, classes, frames).unwrap()
    }

    fn cfg(tau: f64, k: usize) -> NceConfig {
        NceConfig {
            temperature: tau,
            negatives: k,
            ..NceConfig::default()
        }
    }

    #[test]
    fn two_same_class_patches() {
        let c = clip(vec![1.0, 0.0], 1, vec![4, 4]);
        let plan = sample_pairs(&c, &cfg(1.0, 5));
        assert_eq!(plan.anchors[0].positives, vec![1]);
        assert!(plan.anchors[0].negatives.is_empty());
        assert_eq!(plan.anchors.len(), 2);
    }

    #[test]
    fn forced_pair_structure() {
        let c = clip(vec![0.0; 4], 1, vec![0, 0, 1, 1]);
        let plan = sample_pairs(&c, &cfg(1.0, 1));
        for a in &plan.anchors {
            assert_eq!(a.positives, vec![a.anchor ^ 1]);
            assert_eq!(a.negatives.len(), 1);
            assert_ne!(c.patch_class()[a.negatives[0]], c.patch_class()[a.anchor]);
        }
    }

    #[test]
    fn distinct_classes_have_no_pairs() {
        let c = clip(vec![0.0; 3], 1, vec![0, 1, 2]);
        let plan = sample_pairs(&c, &NceConfig::default());
        assert!(plan.anchors.is_empty());
        assert_eq!(plan.skipped, 3);
        assert_eq!(
            nce_loss(&c, &NceConfig::default()).unwrap_err(),
            LossError::NoPositivePairs
        );
    }

    #[test]
    fn ignore_patches_are_excluded() {
        let c = clip(vec![0.0; 4], 1, vec![0, IGNORE, 0, 1]);
        let plan = sample_pairs(&c, &NceConfig::default());
        assert_eq!(plan.ignored, 1);
        for a in &plan.anchors {
            assert!(!a.positives.contains(&1) && !a.negatives.contains(&1));
        }
    }

    #[test]
    fn caps_are_respected() {
        let classes: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let c = clip(vec![0.0; 40], 1, classes);
        let plan = sample_pairs(
            &c,
            &NceConfig {
                negatives: 3,
                positive_cap: 2,
                ..NceConfig::default()
            },
        );
        for a in &plan.anchors {
            assert_eq!(a.positives.len(), 2);
            assert_eq!(a.negatives.len(), 3);
        }
    }

    // Patch 0 anchors against positive 1 and negative 2.
    fn single_anchor_value(pos_dot: f64) -> f64 {
        let c = clip(vec![1.0, pos_dot, 0.0], 1, vec![0, 0, 1]);
        let plan = PairPlan {
            anchors: vec![AnchorPairs {
                anchor: 0,
                positives: vec![1],
                negatives: vec![2],
            }],
            skipped: 0,
            ignored: 0,
        };
        nce_loss_with_plan(&c, &cfg(1.0, 1), &plan).unwrap().value
    }

    #[test]
    fn closed_form_values() {
        assert!((single_anchor_value(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((single_anchor_value(1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn no_negatives_gives_zero() {
        let c = clip(vec![0.3, -1.2, 2.0, 0.7], 1, vec![1, 1, 1, 1]);
        let out = nce_loss(&c, &cfg(0.1, 64)).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn divide_by_all_counts_skipped_patches() {
        let c = clip(vec![0.1, 0.2, 0.3, 0.4], 1, vec![0, 0, 1, 2]);
        let a = nce_loss(&c, &cfg(1.0, 4)).unwrap();
        let b = nce_loss(
            &c,
            &NceConfig {
                divide_by: DivideBy::All,
                ..cfg(1.0, 4)
            },
        )
        .unwrap();
        assert_eq!((a.patches, a.contributing, a.skipped), (4, 2, 2));
        assert!((b.value - a.value * 2.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn ce_closed_forms() {
        let gt = SegMask::new(1, 1, vec![0]).unwrap();
        let p = ProbField::new(2, 1, 1, vec![0.5, 0.5]).unwrap();
        assert!((ce_loss(&p, &gt).unwrap().value - std::f64::consts::LN_2).abs() < 1e-15);
        let p = ProbField::new(2, 1, 1, vec![0.25, 0.75]).unwrap();
        assert!((ce_loss(&p, &gt).unwrap().value - 4f64.ln()).abs() < 1e-15);
        let p = ProbField::new(2, 1, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(ce_loss(&p, &gt).unwrap().value, 0.0);
        let p = ProbField::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let clamped = ce_loss(&p, &gt).unwrap();
        assert!((clamped.value + CE_CLAMP.ln()).abs() < 1e-12);
        assert_eq!(clamped.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn dice_closed_forms() {
        let gt = SegMask::new(2, 1, vec![0, 1]).unwrap();
        let p = ProbField::new(2, 1, 2, vec![0.5; 4]).unwrap();
        assert!((dice_loss(&p, &gt).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
        let perfect = ProbField::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dice_loss(&perfect, &gt).unwrap().value, 0.0);
    }

    #[test]
    fn seg_weights_select_terms() {
        let gt = SegMask::new(2, 1, vec![0, 1]).unwrap();
        let p = ProbField::new(2, 1, 2, vec![0.5; 4]).unwrap();
        let def = seg_loss(&p, &gt, &LossWeights::default()).unwrap();
        assert!((def.value - (5.0 / 3.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((def.value - 2.359814).abs() < 1e-6);
        let ce_only = LossWeights {
            dice: 0.0,
            ..LossWeights::default()
        };
        let out = seg_loss(&p, &gt, &ce_only).unwrap();
        let ce = ce_loss(&p, &gt).unwrap();
        assert_eq!(out.value, ce.value);
        assert_eq!(out.grad, ce.grad);
        let dice_only = LossWeights {
            dice: 1.0,
            ce: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(
            seg_loss(&p, &gt, &dice_only).unwrap().value,
            dice_loss(&p, &gt).unwrap().value
        );
    }

    #[test]
    fn errors_on_bad_inputs() {
        let gt = SegMask::filled(2, 1, IGNORE).unwrap();
        let p = ProbField::new(2, 1, 2, vec![0.5; 4]).unwrap();
        assert_eq!(ce_loss(&p, &gt).unwrap_err(), LossError::AllIgnored);
        assert_eq!(dice_loss(&p, &gt).unwrap_err(), LossError::AllIgnored);
        let gt = SegMask::new(2, 1, vec![0, 3]).unwrap();
        assert!(matches!(
            ce_loss(&p, &gt),
            Err(LossError::LabelOutOfRange { label: 3, .. })
        ));
        let gt = SegMask::new(1, 2, vec![0, 1]).unwrap();
        assert!(matches!(ce_loss(&p, &gt), Err(LossError::Shape(_))));
        assert!(FeatureClip::new(1, vec![0.0], vec![0], vec![0]).is_err());
        assert!(FeatureClip::new(1, vec![0.0, f64::NAN], vec![0, 0], vec![0, 1]).is_err());
        let bad = NceConfig {
            temperature: 0.0,
            ..NceConfig::default()
        };
        assert!(matches!(bad.validate(), Err(LossError::Config(_))));
    }

    #[test]
    fn majority_labels_break_ties_to_ignore() {
        let m = SegMask::new(4, 2, vec![1, 1, 2, 3, 1, 0, 2, 3]).unwrap();
        assert_eq!(majority_patch_labels(&m, 1, 2).unwrap(), vec![1, IGNORE]);
        assert_eq!(
            majority_patch_labels(&m, 2, 4).unwrap(),
            vec![1, 1, 2, 3, 1, 0, 2, 3]
        );
        assert!(majority_patch_labels(&m, 3, 1).is_err());
    }

    #[test]
    fn pairwise_sum_matches_plain_sum_on_integers() {
        let xs: Vec<f64> = (0..37).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 666.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
