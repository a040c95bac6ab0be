//! `gradcheck`, `nce-eval` and `train-toy`.

use std::fmt::Write as _;
use std::fs;

use anyhow::{bail, Context, Result};
use serde_json::json;
use vspw_core::gradcheck::{run_suite, GRAD_TOLERANCE};
use vspw_core::losses::{majority_patch_labels, nce_loss, DivideBy};
use vspw_core::toytrain::{run, SynthConfig, ToyConfig};
use vspw_core::{FeatureClip, LossWeights, NceConfig, IGNORE};

use crate::files::{load_masks, load_tensors};
use crate::{CheckFailed, DivideByArg, GradcheckArgs, NceEvalArgs, TrainToyArgs};

pub fn gradcheck(a: &GradcheckArgs) -> Result<String> {
    let reports = run_suite(a.seed, a.instances)?;
    let out = if a.json {
        serde_json::to_string_pretty(&reports)? + "\n"
    } else {
        let mut out = String::from("loss\tinstances\tmax_rel_error\tpassed\n");
        for r in &reports {
            writeln!(
                out,
                "{}\t{}\t{:.3e}\t{}",
                r.loss, r.instances, r.max_rel_error, r.passed
            )?;
        }
        out
    };
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.loss)
        .collect();
    if !failed.is_empty() {
        return Err(CheckFailed {
            stdout: out,
            message: format!(
                "gradient check above {GRAD_TOLERANCE:e} for: {}",
                failed.join(", ")
            ),
        }
        .into());
    }
    Ok(out)
}

fn parse_classes(text: &str) -> Result<Vec<u8>> {
    text.split_whitespace()
        .map(|tok| {
            if tok == "-" {
                Ok(IGNORE)
            } else {
                tok.parse::<u8>()
                    .with_context(|| format!("bad class id {tok:?}"))
            }
        })
        .collect()
}

pub fn nce_eval(a: &NceEvalArgs) -> Result<String> {
    let frames = load_tensors(&a.frames)?;
    if !frames[0].same_shape(&frames[1]) {
        bail!(
            "frame shapes differ: {:?} vs {:?}",
            frames[0].shape(),
            frames[1].shape()
        );
    }
    let (dim, h, w) = frames[0].shape();
    let plane = h * w;
    let patch_class = match (&a.classes, &a.gt) {
        (Some(path), _) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let classes = parse_classes(&text)?;
            if classes.len() != 2 * plane {
                bail!(
                    "{} lists {} classes, expected {} (2 frames of {h}x{w} patches)",
                    path.display(),
                    classes.len(),
                    2 * plane
                );
            }
            classes
        }
        (None, Some(gt)) => {
            let mut classes = Vec::with_capacity(2 * plane);
            for mask in load_masks(gt)? {
                classes.extend(majority_patch_labels(&mask, h, w)?);
            }
            classes
        }
        (None, None) => unreachable!("clap requires one label source"),
    };
    let mut features = Vec::with_capacity(2 * plane * dim);
    for frame in &frames {
        let values = frame.values();
        for pix in 0..plane {
            features.extend((0..dim).map(|c| f64::from(values[c * plane + pix])));
        }
    }
    let frame_index = (0..2 * plane).map(|i| u8::from(i >= plane)).collect();
    let clip = FeatureClip::new(dim, features, patch_class, frame_index)?;
    let cfg = NceConfig {
        temperature: a.nce.temperature,
        negatives: a.nce.negatives,
        positive_cap: a.nce.positive_cap,
        rng_seed: a.seed,
        normalize_features: a.nce.normalize,
        divide_by: match a.nce.divide_by {
            DivideByArg::Contributing => DivideBy::Contributing,
            DivideByArg::All => DivideBy::All,
        },
    };
    let out = nce_loss(&clip, &cfg)?;
    if a.json {
        let doc = json!({
            "value": out.value,
            "patches": out.patches,
            "contributing": out.contributing,
            "skipped": out.skipped,
        });
        return Ok(serde_json::to_string_pretty(&doc)? + "\n");
    }
    Ok(format!(
        "value\t{}\npatches\t{}\ncontributing\t{}\nskipped\t{}\n",
        out.value, out.patches, out.contributing, out.skipped
    ))
}

pub fn train_toy(a: &TrainToyArgs) -> Result<String> {
    let defaults = ToyConfig::default();
    let cfg = ToyConfig {
        seed: a.seed,
        synth: SynthConfig {
            classes: a.classes,
            patches: a.patches,
            frames: a.frames,
            ..defaults.synth.clone()
        },
        d_emb: a.d_emb,
        lr: a.lr,
        steps: a.steps,
        nce: NceConfig {
            temperature: a.temperature,
            negatives: a.negatives,
            normalize_features: !a.dot_product,
            ..defaults.nce.clone()
        },
        weights: LossWeights {
            seg: a.lambda1,
            nce: a.lambda2,
            dice: a.lambda3,
            ce: a.lambda4,
        },
    };
    cfg.weights.validate()?;
    let outcome = run(&cfg)?;
    if a.json {
        let doc = json!({ "config": cfg, "outcome": outcome });
        return Ok(serde_json::to_string_pretty(&doc)? + "\n");
    }
    let mut out = String::from("step\ttotal\tseg\tnce\n");
    for s in &outcome.log {
        writeln!(
            out,
            "{}\t{:.9}\t{:.9}\t{:.9}",
            s.step, s.total, s.seg, s.nce
        )?;
    }
    out.push_str("\nheld_out\tintra\tinter\tgap\ttotal\tseg\tnce\n");
    for (name, r, l) in [
        ("initial", &outcome.initial, &outcome.held_out_initial),
        ("final", &outcome.final_report, &outcome.held_out_final),
    ] {
        writeln!(
            out,
            "{name}\t{:.6}\t{:.6}\t{:.6}\t{:.9}\t{:.9}\t{:.9}",
            r.intra,
            r.inter,
            r.gap(),
            l.total,
            l.seg,
            l.nce
        )?;
    }
    let counts: Vec<String> = outcome
        .final_report
        .class_counts
        .iter()
        .map(|(c, n)| format!("{c}:{n}"))
        .collect();
    writeln!(out, "class_counts\t{}", counts.join(" "))?;
    if !outcome.final_report.skipped_classes.is_empty() {
        let skipped: Vec<String> = outcome
            .final_report
            .skipped_classes
            .iter()
            .map(u8::to_string)
            .collect();
        writeln!(out, "skipped_classes\t{}", skipped.join(" "))?;
    }
    Ok(out)
}
