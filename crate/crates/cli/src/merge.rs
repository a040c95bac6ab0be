//! `ensemble`, `vote`, `argmax`, `tta-merge` and `flip-merge`.

use anyhow::{Context, Result};
use vspw_core::ensemble::{argmax_map, soft_average, vote as vote_masks, weighted_pair};
use vspw_core::tensor_io::{write_mask, write_tensor};
use vspw_core::tta::{default_stride, hflip_merge, plan_windows, stitch};
use vspw_core::EnsembleCoefficient;

use crate::files::{load_masks, load_tensor, load_tensors, write_atomic};
use crate::{usage, ArgmaxArgs, EnsembleArgs, FlipMergeArgs, TtaMergeArgs, VoteArgs};

pub fn ensemble(a: &EnsembleArgs) -> Result<String> {
    let out = match a.tau {
        Some(tau) => {
            if a.inputs.len() != 2 {
                return Err(usage(format!(
                    "--tau takes exactly 2 inputs, got {}",
                    a.inputs.len()
                )));
            }
            let tau = EnsembleCoefficient::new(tau)?;
            let maps = load_tensors(&a.inputs)?;
            weighted_pair(&maps[0], &maps[1], tau)?
        }
        None => soft_average(&load_tensors(&a.inputs)?)?,
    };
    write_atomic(&a.output, &write_tensor(&out))?;
    Ok(String::new())
}

pub fn vote(a: &VoteArgs) -> Result<String> {
    let out = vote_masks(&load_masks(&a.inputs)?)?;
    write_atomic(&a.output, &write_mask(&out))?;
    Ok(String::new())
}

pub fn argmax(a: &ArgmaxArgs) -> Result<String> {
    let out = argmax_map(&load_tensor(&a.input)?)?;
    write_atomic(&a.output, &write_mask(&out))?;
    Ok(String::new())
}

fn parse_plan(text: &str) -> Result<[usize; 5]> {
    let fields = text
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("--plan {text:?}: {e}")))?;
    match fields[..] {
        [h, w, wh, ww, s] => Ok([h, w, wh, ww, s]),
        [h, w, wh, ww] => Ok([h, w, wh, ww, default_stride(wh.min(ww))]),
        _ => Err(usage(format!("--plan expects H,W,hw,ww[,s], got {text:?}"))),
    }
}

pub fn tta_merge(a: &TtaMergeArgs) -> Result<String> {
    let [h, w, wh, ww, s] = parse_plan(&a.plan)?;
    let plan = plan_windows(h, w, wh, ww, s).context("building window plan")?;
    let out = stitch(&plan, &load_tensors(&a.inputs)?)?;
    write_atomic(&a.output, &write_tensor(&out))?;
    Ok(String::new())
}

pub fn flip_merge(a: &FlipMergeArgs) -> Result<String> {
    let out = hflip_merge(&load_tensor(&a.input)?, &load_tensor(&a.flipped)?)?;
    write_atomic(&a.output, &write_tensor(&out))?;
    Ok(String::new())
}
