//! Desk-scale training demo: a linear patch embedder and linear classifier
//! trained with plain gradient descent on `seg + nce`, over synthetic clips
//! whose consecutive frames are jittered copies of each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::losses::{total_loss, FeatureClip, LossError, LossWeights, NceConfig, ProbField};
use crate::tensor_io::{SegMask, IGNORE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("data stream ended after {0} steps")]
    DataExhausted(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub d_in: usize,
    /// Patches per frame.
    pub patches: usize,
    pub frames: usize,
    /// Spread of patches around their class mean.
    pub sigma_class: f64,
    /// Frame-to-frame jitter.
    pub sigma_t: f64,
    /// Scale of the class means.
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            d_in: 8,
            patches: 24,
            frames: 2,
            sigma_class: 2.0,
            sigma_t: 0.1,
            margin: 3.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.classes < 2 {
            return Err(TrainError::Config("need at least 2 classes".into()));
        }
        if self.classes > IGNORE as usize {
            return Err(TrainError::Config(
                "too many classes for 8-bit labels".into(),
            ));
        }
        if self.patches < 2 * self.classes {
            return Err(TrainError::Config(format!(
                "{} patches per frame cannot hold two of each of {} classes",
                self.patches, self.classes
            )));
        }
        if self.d_in == 0 || self.frames == 0 || self.frames > IGNORE as usize {
            return Err(TrainError::Config("d_in and frames must be >= 1".into()));
        }
        for (name, v) in [
            ("sigma_class", self.sigma_class),
            ("sigma_t", self.sigma_t),
            ("margin", self.margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Raw patch inputs for `frames` consecutive frames, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub d_in: usize,
    pub frames: usize,
    pub inputs: Vec<f64>,
    pub patch_class: Vec<u8>,
    pub frame_index: Vec<u8>,
    pub seed: u64,
}

impl SynthClip {
    pub fn patches(&self) -> usize {
        self.patch_class.len()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d_in..(i + 1) * self.d_in]
    }
}

/// An endless stream of clips sharing one set of class means.
#[derive(Debug, Clone)]
pub struct SynthSource {
    cfg: SynthConfig,
    seed: u64,
    rng: ChaCha8Rng,
    means: Vec<f64>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl SynthSource {
    pub fn new(seed: u64, cfg: SynthConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = (0..cfg.classes * cfg.d_in)
            .map(|_| cfg.margin * normal(&mut rng))
            .collect();
        Ok(Self {
            cfg,
            seed,
            rng,
            means,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn next_clip(&mut self) -> SynthClip {
        let SynthConfig {
            classes,
            d_in,
            patches,
            frames,
            sigma_class,
            sigma_t,
            ..
        } = self.cfg;
        let rng = &mut self.rng;
        let frame_classes: Vec<u8> = (0..patches).map(|j| (j % classes) as u8).collect();
        let mut inputs = Vec::with_capacity(patches * frames * d_in);
        for &c in &frame_classes {
            let mean = &self.means[c as usize * d_in..(c as usize + 1) * d_in];
            inputs.extend(mean.iter().map(|m| m + sigma_class * normal(rng)));
        }
        for t in 1..frames {
            let prev = (t - 1) * patches * d_in;
            for k in 0..patches * d_in {
                let v = inputs[prev + k] + sigma_t * normal(rng);
                inputs.push(v);
            }
        }
        SynthClip {
            d_in,
            frames,
            inputs,
            patch_class: frame_classes.repeat(frames),
            frame_index: (0..frames)
                .flat_map(|t| std::iter::repeat_n(t as u8, patches))
                .collect(),
            seed: self.seed,
        }
    }
}

impl Iterator for SynthSource {
    type Item = SynthClip;

    fn next(&mut self) -> Option<SynthClip> {
        Some(self.next_clip())
    }
}

/// The first clip of the stream seeded with `seed`.
pub fn generate(seed: u64, cfg: SynthConfig) -> Result<SynthClip, TrainError> {
    Ok(SynthSource::new(seed, cfg)?.next_clip())
}

/// `embed` is `d_in × d_emb`, `classifier` is `d_emb × classes`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub d_in: usize,
    pub d_emb: usize,
    pub classes: usize,
    pub embed: Vec<f64>,
    pub classifier: Vec<f64>,
}

impl ToyModel {
    pub fn init(seed: u64, d_in: usize, d_emb: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_in = 1.0 / (d_in as f64).sqrt();
        let s_emb = 1.0 / (d_emb as f64).sqrt();
        let embed = (0..d_in * d_emb).map(|_| s_in * normal(&mut rng)).collect();
        let classifier = (0..d_emb * classes)
            .map(|_| s_emb * normal(&mut rng))
            .collect();
        Self {
            d_in,
            d_emb,
            classes,
            embed,
            classifier,
        }
    }

    /// Row-major `N × d_emb` embeddings.
    pub fn embed_clip(&self, clip: &SynthClip) -> Vec<f64> {
        matmul(
            &clip.inputs,
            &self.embed,
            clip.patches(),
            self.d_in,
            self.d_emb,
        )
    }

    fn is_finite(&self) -> bool {
        self.embed
            .iter()
            .chain(&self.classifier)
            .all(|v| v.is_finite())
    }
}

/// `a (n×k) · b (k×m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += aip * b[p * m + j];
            }
        }
    }
    out
}

/// `aᵀ (k×n)ᵀ · b (k×m)` where `a` is stored `k×n`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        for i in 0..n {
            let api = a[p * n + i];
            for j in 0..m {
                out[i * m + j] += api * b[p * m + j];
            }
        }
    }
    out
}

/// `a (n×k) · bᵀ` where `b` is stored `m×k`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub seg: f64,
    pub nce: f64,
}

struct StepResult {
    log: StepLog,
    grad_embed: Vec<f64>,
    grad_classifier: Vec<f64>,
}

fn step_gradients(
    model: &ToyModel,
    clip: &SynthClip,
    cfg: &NceConfig,
    w: &LossWeights,
    step: usize,
) -> Result<StepResult, TrainError> {
    let (n, d_emb, c) = (clip.patches(), model.d_emb, model.classes);
    let emb = model.embed_clip(clip);
    let logits = matmul(&emb, &model.classifier, n, d_emb, c);

    // Each patch is one pixel of a 1×N image; probabilities are C×1×N.
    let mut probs = vec![0.0; c * n];
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for k in 0..c {
            probs[k * n + i] = (row[k] - max).exp() / z;
        }
    }
    let field = ProbField::new(c, 1, n, probs.clone())?;
    let gt = SegMask::new(n, 1, clip.patch_class.clone())
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let feats = FeatureClip::new(
        d_emb,
        emb.clone(),
        clip.patch_class.clone(),
        clip.frame_index.clone(),
    )?;
    let out = total_loss(&field, &gt, &feats, cfg, w)?;
    if !out.value.is_finite() {
        return Err(TrainError::NonFinite { step });
    }

    let mut grad_logits = vec![0.0; n * c];
    for i in 0..n {
        let dot: f64 = (0..c)
            .map(|k| out.prob_grad[k * n + i] * probs[k * n + i])
            .sum();
        for k in 0..c {
            grad_logits[i * c + k] = probs[k * n + i] * (out.prob_grad[k * n + i] - dot);
        }
    }
    let grad_classifier = matmul_tn(&emb, &grad_logits, n, d_emb, c);
    let mut grad_emb = matmul_nt(&grad_logits, &model.classifier, n, c, d_emb);
    for (g, f) in grad_emb.iter_mut().zip(&out.feature_grad) {
        *g += f;
    }
    let grad_embed = matmul_tn(&clip.inputs, &grad_emb, n, model.d_in, d_emb);
    Ok(StepResult {
        log: StepLog {
            step,
            total: out.value,
            seg: out.seg.value,
            nce: out.nce.value,
        },
        grad_embed,
        grad_classifier,
    })
}

/// Objective value and gradients of `model` on one clip, as used by [`train`].
pub fn objective(
    model: &ToyModel,
    clip: &SynthClip,
    cfg: &NceConfig,
    w: &LossWeights,
) -> Result<(StepLog, Vec<f64>, Vec<f64>), TrainError> {
    let r = step_gradients(model, clip, cfg, w, 0)?;
    Ok((r.log, r.grad_embed, r.grad_classifier))
}

/// Plain gradient descent, one clip per step. Each log entry holds the
/// losses evaluated before that step's update.
pub fn train<I>(
    mut model: ToyModel,
    data: I,
    cfg: &NceConfig,
    w: &LossWeights,
    lr: f64,
    steps: usize,
) -> Result<(ToyModel, Vec<StepLog>), TrainError>
where
    I: IntoIterator<Item = SynthClip>,
{
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(TrainError::Config(format!("learning rate {lr} is invalid")));
    }
    cfg.validate()?;
    w.validate()?;
    let mut data = data.into_iter();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let clip = data.next().ok_or(TrainError::DataExhausted(step))?;
        if clip.d_in != model.d_in {
            return Err(TrainError::Config(format!(
                "clip input dimension {} does not match model {}",
                clip.d_in, model.d_in
            )));
        }
        let r = step_gradients(&model, &clip, cfg, w, step)?;
        for (p, g) in model.embed.iter_mut().zip(&r.grad_embed) {
            *p -= lr * g;
        }
        for (p, g) in model.classifier.iter_mut().zip(&r.grad_classifier) {
            *p -= lr * g;
        }
        if !model.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        log.push(r.log);
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    /// Mean cosine over same-class pairs.
    pub intra: f64,
    /// Mean cosine over cross-class pairs.
    pub inter: f64,
    /// Patches per class, ascending class id.
    pub class_counts: Vec<(u8, usize)>,
    /// Classes with fewer than two patches, left out of `intra`.
    pub skipped_classes: Vec<u8>,
}

impl SeparationReport {
    pub fn gap(&self) -> f64 {
        self.intra - self.inter
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairwise cosine statistics of row-major `embeddings` grouped by `classes`.
/// Ignore-labelled rows are left out. Means of empty pair sets are `NaN`.
pub fn separation(embeddings: &[f64], dim: usize, classes: &[u8]) -> SeparationReport {
    let rows: Vec<&[f64]> = embeddings.chunks_exact(dim).collect();
    let mut counts = std::collections::BTreeMap::new();
    for &c in classes.iter().filter(|&&c| c != IGNORE) {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        if classes[i] == IGNORE {
            continue;
        }
        for j in i + 1..rows.len() {
            if classes[j] == IGNORE {
                continue;
            }
            let cos = cosine(rows[i], rows[j]);
            if classes[i] == classes[j] {
                intra += cos;
                n_intra += 1;
            } else {
                inter += cos;
                n_inter += 1;
            }
        }
    }
    SeparationReport {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
        skipped_classes: counts
            .iter()
            .filter(|(_, &n)| n < 2)
            .map(|(&c, _)| c)
            .collect(),
        class_counts: counts.into_iter().collect(),
    }
}

pub fn separation_report(model: &ToyModel, clip: &SynthClip) -> SeparationReport {
    separation(&model.embed_clip(clip), model.d_emb, &clip.patch_class)
}

/// Everything needed for one seeded training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub d_emb: usize,
    pub lr: f64,
    pub steps: usize,
    pub nce: NceConfig,
    pub weights: LossWeights,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth: SynthConfig::default(),
            d_emb: 8,
            lr: 0.05,
            steps: 200,
            // Raw dot products only stretch the class-mean directions; the
            // cosine form also pulls same-class patches together.
            nce: NceConfig {
                normalize_features: true,
                ..NceConfig::default()
            },
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyOutcome {
    pub log: Vec<StepLog>,
    /// Losses of the initial model on the held-out clip.
    pub held_out_initial: StepLog,
    /// Losses of the trained model on the held-out clip.
    pub held_out_final: StepLog,
    pub initial: SeparationReport,
    #[serde(rename = "final")]
    pub final_report: SeparationReport,
    #[serde(skip)]
    pub model: ToyModel,
}

const MODEL_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeds the data stream, the model and NCE sampling from `cfg.seed`, holds
/// out the stream's first clip for the separation reports, and trains on the
/// clips that follow.
pub fn run(cfg: &ToyConfig) -> Result<ToyOutcome, TrainError> {
    if cfg.d_emb == 0 {
        return Err(TrainError::Config("d_emb must be >= 1".into()));
    }
    let mut source = SynthSource::new(cfg.seed, cfg.synth.clone())?;
    let held_out = source.next_clip();
    let model = ToyModel::init(
        cfg.seed ^ MODEL_SEED_SALT,
        cfg.synth.d_in,
        cfg.d_emb,
        cfg.synth.classes,
    );
    let initial = separation_report(&model, &held_out);
    let nce = NceConfig {
        rng_seed: cfg.seed,
        ..cfg.nce.clone()
    };
    let held_out_initial = objective(&model, &held_out, &nce, &cfg.weights)?.0;
    let (model, log) = train(model, source, &nce, &cfg.weights, cfg.lr, cfg.steps)?;
    let held_out_final = StepLog {
        step: cfg.steps,
        ..objective(&model, &held_out, &nce, &cfg.weights)?.0
    };
    let final_report = separation_report(&model, &held_out);
    Ok(ToyOutcome {
        log,
        held_out_initial,
        held_out_final,
        initial,
        final_report,
        model,
    })
}
