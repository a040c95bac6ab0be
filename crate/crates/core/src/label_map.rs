//! Remapping masks from a source taxonomy into the target one, and the
//! valid-pixel filter used to decide which remapped images are kept.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::tensor_io::{SegMask, IGNORE};

/// Default minimum fraction of non-ignore pixels for an image to be kept.
pub const DEFAULT_KEEP_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelMapError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("source id {id} has no mapping (first seen at pixel {pixel})")]
    Unmapped { id: u8, pixel: usize },
    #[error("mask has zero area")]
    EmptyMask,
    #[error("threshold {0} is outside [0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Class(u8),
    Ignore,
}

impl Target {
    fn label(self) -> u8 {
        match self {
            Target::Class(id) => id,
            Target::Ignore => IGNORE,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Class(id) => write!(f, "{id}"),
            Target::Ignore => f.write_str("-"),
        }
    }
}

/// Source class id → target class id (or ignore). Source ids are unique and
/// all ids are at most 254.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingTable {
    entries: BTreeMap<u8, Target>,
}

impl MappingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry, rejecting duplicates and reserved ids.
    pub fn insert(&mut self, source: u8, target: Target) -> Result<(), String> {
        if source == IGNORE {
            return Err(format!("source id {source} is reserved for ignore"));
        }
        if let Target::Class(IGNORE) = target {
            return Err(format!(
                "target id {IGNORE} is reserved for ignore, use '-'"
            ));
        }
        if self.entries.contains_key(&source) {
            return Err(format!("duplicate source id {source}"));
        }
        self.entries.insert(source, target);
        Ok(())
    }

    pub fn get(&self, source: u8) -> Option<Target> {
        self.entries.get(&source).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, Target)> + '_ {
        self.entries.iter().map(|(&s, &t)| (s, t))
    }

    fn lookup(&self) -> [Option<u8>; 256] {
        let mut lut = [None; 256];
        for (src, dst) in self.iter() {
            lut[src as usize] = Some(dst.label());
        }
        lut[IGNORE as usize] = Some(IGNORE);
        lut
    }
}

fn parse_id(token: &str, line: usize, what: &str) -> Result<u8, LabelMapError> {
    let err = |message: String| LabelMapError::Parse { line, message };
    let value: u32 = token
        .parse()
        .map_err(|_| err(format!("{what} '{token}' is not an integer")))?;
    if value > 254 {
        return Err(err(format!("{what} {value} exceeds 254")));
    }
    Ok(value as u8)
}

/// Parses `src<TAB>dst` lines; `dst` may be `-` for ignore. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_mapping(text: &str) -> Result<MappingTable, LabelMapError> {
    let mut table = MappingTable::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (Some(src), Some(dst), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(LabelMapError::Parse {
                line,
                message: "expected exactly two tab-separated fields".into(),
            });
        };
        let source = parse_id(src.trim(), line, "source id")?;
        let target = match dst.trim() {
            "-" => Target::Ignore,
            tok => Target::Class(parse_id(tok, line, "target id")?),
        };
        table
            .insert(source, target)
            .map_err(|message| LabelMapError::Parse { line, message })?;
    }
    Ok(table)
}

/// What to do with a source id the table does not mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Error,
    ToIgnore,
}

pub fn remap(
    mask: &SegMask,
    table: &MappingTable,
    policy: MissingPolicy,
) -> Result<SegMask, LabelMapError> {
    let lut = table.lookup();
    let mut out = Vec::with_capacity(mask.len());
    for (pixel, &id) in mask.labels().iter().enumerate() {
        let mapped = match (lut[id as usize], policy) {
            (Some(t), _) => t,
            (None, MissingPolicy::ToIgnore) => IGNORE,
            (None, MissingPolicy::Error) => return Err(LabelMapError::Unmapped { id, pixel }),
        };
        out.push(mapped);
    }
    Ok(SegMask::new(mask.width(), mask.height(), out).expect("shape preserved"))
}

/// Exact valid-pixel count as `(valid, total)`.
pub fn valid_count(mask: &SegMask) -> Result<(u64, u64), LabelMapError> {
    if mask.is_empty() {
        return Err(LabelMapError::EmptyMask);
    }
    let valid = mask.labels().iter().filter(|&&l| l != IGNORE).count() as u64;
    Ok((valid, mask.len() as u64))
}

pub fn valid_ratio(mask: &SegMask) -> Result<f64, LabelMapError> {
    let (valid, total) = valid_count(mask)?;
    Ok(valid as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Drop,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Keep => "keep",
            Decision::Drop => "drop",
        })
    }
}

/// Comparison used against the threshold. `Inclusive` keeps ratios equal to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Comparison {
    #[default]
    Inclusive,
    Strict,
}

pub fn filter_decision(mask: &SegMask, threshold: f64) -> Result<Decision, LabelMapError> {
    filter_decision_with(mask, threshold, Comparison::Inclusive)
}

pub fn filter_decision_with(
    mask: &SegMask,
    threshold: f64,
    cmp: Comparison,
) -> Result<Decision, LabelMapError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(LabelMapError::Threshold(threshold));
    }
    let ratio = valid_ratio(mask)?;
    let keep = match cmp {
        Comparison::Inclusive => ratio >= threshold,
        Comparison::Strict => ratio > threshold,
    };
    Ok(if keep { Decision::Keep } else { Decision::Drop })
}
