//! `remap`, `filter` and `eval`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rayon::prelude::*;
use vspw_core::label_map::{
    filter_decision_with, parse_mapping, remap as remap_mask, valid_ratio, Comparison,
};
use vspw_core::metrics::{miou_with, MeanOver};
use vspw_core::tensor_io::write_mask;
use vspw_core::{ConfusionMatrix, MappingTable, MissingPolicy, SegMask};

use crate::files::{files_by_stem, load_mask, pair_by_stem, write_all_atomic, write_atomic};
use crate::{EvalArgs, FilterArgs, RemapArgs};

fn load_table(path: &Path) -> Result<MappingTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_mapping(&text).with_context(|| format!("parsing {}", path.display()))
}

fn comparison(strict: bool) -> Comparison {
    if strict {
        Comparison::Strict
    } else {
        Comparison::Inclusive
    }
}

fn manifest_line(
    out: &mut String,
    path: &Path,
    mask: &SegMask,
    threshold: f64,
    cmp: Comparison,
) -> Result<()> {
    let ratio = valid_ratio(mask)?;
    let decision = filter_decision_with(mask, threshold, cmp)?;
    writeln!(out, "{}\t{ratio:.6}\t{decision}", path.display())?;
    Ok(())
}

fn masks_in(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let found = files_by_stem(dir, "pgm")?;
    if found.is_empty() {
        bail!("no .pgm files in {}", dir.display());
    }
    Ok(found.into_iter().collect())
}

pub fn remap(a: &RemapArgs) -> Result<String> {
    let table = load_table(&a.table)?;
    let policy = if a.strict_table {
        MissingPolicy::Error
    } else {
        MissingPolicy::ToIgnore
    };
    let inputs = masks_in(&a.input)?;
    let remapped: Vec<(PathBuf, SegMask)> = inputs
        .par_iter()
        .map(|(stem, path)| {
            let mask = load_mask(path)?;
            let out = remap_mask(&mask, &table, policy)
                .with_context(|| format!("remapping {}", path.display()))?;
            Ok((a.output.join(stem).with_extension("pgm"), out))
        })
        .collect::<Result<_>>()?;
    let writes: Vec<(PathBuf, Vec<u8>)> = remapped
        .iter()
        .map(|(p, m)| (p.clone(), write_mask(m)))
        .collect();
    write_all_atomic(&writes)?;
    let mut out = String::new();
    for (path, mask) in &remapped {
        manifest_line(
            &mut out,
            path,
            mask,
            vspw_core::label_map::DEFAULT_KEEP_THRESHOLD,
            Comparison::Inclusive,
        )?;
    }
    Ok(out)
}

pub fn filter(a: &FilterArgs) -> Result<String> {
    let table = a.table.as_deref().map(load_table).transpose()?;
    let cmp = comparison(a.strict);
    let inputs = masks_in(&a.input)?;
    let lines: Vec<String> = inputs
        .par_iter()
        .map(|(_, path)| {
            let mut mask = load_mask(path)?;
            if let Some(t) = &table {
                mask = remap_mask(&mask, t, MissingPolicy::ToIgnore)?;
            }
            let mut line = String::new();
            manifest_line(&mut line, path, &mask, a.threshold, cmp)
                .with_context(|| format!("measuring {}", path.display()))?;
            Ok(line)
        })
        .collect::<Result<_>>()?;
    let manifest = lines.concat();
    match &a.output {
        Some(path) => {
            write_atomic(path, manifest.as_bytes())?;
            Ok(String::new())
        }
        None => Ok(manifest),
    }
}

fn accumulate(classes: usize, pairs: &[(PathBuf, PathBuf, PathBuf)]) -> Result<ConfusionMatrix> {
    let parts: Vec<ConfusionMatrix> = pairs
        .par_iter()
        .map(|(_, pred, gt)| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&load_mask(pred)?, &load_mask(gt)?)
                .with_context(|| format!("scoring {} against {}", pred.display(), gt.display()))?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    parts
        .iter()
        .try_fold(ConfusionMatrix::new(classes), |acc, cm| acc.merge(cm))
        .map_err(Into::into)
}

fn ratio_str(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

fn rational_f64(r: &BigRational) -> f64 {
    num_traits::ToPrimitive::to_f64(r).unwrap_or(f64::NAN)
}

pub fn eval(a: &EvalArgs) -> Result<String> {
    if a.classes == 0 || a.classes > vspw_core::IGNORE as usize {
        return Err(crate::usage(format!(
            "--classes must be in 1..=254, got {}",
            a.classes
        )));
    }
    let over = if a.all_classes {
        MeanOver::All
    } else {
        MeanOver::Present
    };
    let pairs = pair_by_stem(
        &files_by_stem(&a.pred, "pgm")?,
        &files_by_stem(&a.gt, "pgm")?,
        "pred",
        "gt",
    )?;
    let mut out = String::new();
    if a.per_video {
        let mut videos: BTreeMap<PathBuf, Vec<(PathBuf, PathBuf, PathBuf)>> = BTreeMap::new();
        for pair in pairs {
            let mut parts = pair.0.components();
            let video = match (parts.next(), parts.next()) {
                (Some(v), Some(_)) => PathBuf::from(v.as_os_str()),
                _ => bail!(
                    "--per-video expects one subdirectory per video; {} is not in one",
                    pair.1.display()
                ),
            };
            videos.entry(video).or_default().push(pair);
        }
        let mut sum = BigRational::zero();
        for (video, pairs) in &videos {
            let report = miou_with(&accumulate(a.classes, pairs)?, over)
                .with_context(|| format!("video {}", video.display()))?;
            writeln!(
                out,
                "{}\t{:.6}",
                a.pred.join(video).display(),
                report.mean_f64
            )?;
            sum += report.mean;
        }
        let mean = sum / BigRational::from_integer(BigInt::from(videos.len()));
        writeln!(
            out,
            "mIoU\t{}\t{:.6}",
            ratio_str(&mean),
            rational_f64(&mean)
        )?;
    } else {
        let report = miou_with(&accumulate(a.classes, &pairs)?, over)?;
        out.push_str("class\tiou\tratio\n");
        for c in &report.per_class {
            match c.iou {
                Some(r) => writeln!(out, "{}\t{:.6}\t{r}", c.class, r.to_f64())?,
                None => writeln!(out, "{}\t-\t-", c.class)?,
            }
        }
        writeln!(
            out,
            "mIoU\t{}\t{:.6}",
            ratio_str(&report.mean),
            report.mean_f64
        )?;
    }
    Ok(out)
}
