//! File plumbing shared by the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use tempfile::NamedTempFile;
use vspw_core::tensor_io::{read_mask, read_tensor};
use vspw_core::{ProbMap, SegMask};

pub fn load_mask(path: &Path) -> Result<SegMask> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_mask(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_tensor(path: &Path) -> Result<ProbMap> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_tensor(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_masks(paths: &[PathBuf]) -> Result<Vec<SegMask>> {
    paths.par_iter().map(|p| load_mask(p)).collect()
}

pub fn load_tensors(paths: &[PathBuf]) -> Result<Vec<ProbMap>> {
    paths.par_iter().map(|p| load_tensor(p)).collect()
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes every file only after all of them are ready.
pub fn write_all_atomic(outputs: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut staged = Vec::with_capacity(outputs.len());
    for (path, bytes) in outputs {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut tmp = NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Files under `root` with extension `ext`, keyed by their path relative to
/// `root` without the extension. Recurses into subdirectories.
pub fn files_by_stem(root: &Path, ext: &str) -> Result<BTreeMap<PathBuf, PathBuf>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == ext) {
                let rel = path.strip_prefix(root).expect("walked from root");
                out.insert(rel.with_extension(""), path);
            }
        }
    }
    Ok(out)
}

/// Pairs two stem maps; any file without a partner aborts the run.
pub fn pair_by_stem(
    left: &BTreeMap<PathBuf, PathBuf>,
    right: &BTreeMap<PathBuf, PathBuf>,
    left_name: &str,
    right_name: &str,
) -> Result<Vec<(PathBuf, PathBuf, PathBuf)>> {
    let only = |a: &BTreeMap<PathBuf, PathBuf>, b: &BTreeMap<PathBuf, PathBuf>| -> Vec<String> {
        a.keys()
            .filter(|k| !b.contains_key(*k))
            .map(|k| k.display().to_string())
            .collect()
    };
    let l = only(left, right);
    let r = only(right, left);
    if !l.is_empty() || !r.is_empty() {
        let mut msg = String::from("unpaired files");
        if !l.is_empty() {
            msg += &format!("; only in {left_name}: {}", l.join(", "));
        }
        if !r.is_empty() {
            msg += &format!("; only in {right_name}: {}", r.join(", "));
        }
        bail!(msg);
    }
    if left.is_empty() {
        bail!("no files found in {left_name}");
    }
    Ok(left
        .iter()
        .map(|(stem, a)| (stem.clone(), a.clone(), right[stem].clone()))
        .collect())
}
