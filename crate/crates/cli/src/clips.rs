//! Clip directories.
//!
//! A directory holding frame files is one clip. Otherwise every
//! subdirectory holding frame files is a clip, taken in name order.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ftvsr::frames::{list_frames, read_sequence, write_sequence};
use ftvsr::Tensor;

#[derive(Clone, Debug)]
pub struct Clip {
    /// Subdirectory name, empty for a single-clip directory.
    pub name: String,
    pub frames: Tensor,
}

pub fn clip_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    if !list_frames(dir)?.is_empty() {
        return Ok(vec![(String::new(), dir.to_path_buf())]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut out = Vec::new();
    for p in subdirs {
        if !list_frames(&p)?.is_empty() {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.push((name, p));
        }
    }
    if out.is_empty() {
        bail!("no frames found in {}", dir.display());
    }
    Ok(out)
}

pub fn read_clips(dir: &Path) -> Result<Vec<Clip>> {
    clip_dirs(dir)?
        .into_iter()
        .map(|(name, p)| {
            let frames = read_sequence(&p).with_context(|| format!("reading clip {}", p.display()))?;
            Ok(Clip { name, frames })
        })
        .collect()
}

pub fn write_clip(dir: &Path, clip: &Clip) -> Result<Vec<PathBuf>> {
    let target = if clip.name.is_empty() { dir.to_path_buf() } else { dir.join(&clip.name) };
    Ok(write_sequence(&target, &clip.frames)?)
}

/// Pairs clips of two directories by name.
pub fn pair_clips(a: Vec<Clip>, b: Vec<Clip>, what: &str) -> Result<Vec<(Clip, Clip)>> {
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.name != y.name) {
        let names = |v: &[Clip]| v.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
        bail!("{} clip sets differ: {:?} vs {:?}", what, names(&a), names(&b));
    }
    Ok(a.into_iter().zip(b).collect())
}

/// Splits `T×C×H×W` frames into `T` single-frame clips.
pub fn split_frames(frames: &Tensor) -> Result<Vec<Tensor>> {
    let shape = frames.shape().to_vec();
    if shape.len() != 4 {
        bail!("expected T×C×H×W frames, got {:?}", shape);
    }
    let per: usize = shape[1..].iter().product();
    frames
        .data()
        .chunks(per)
        .map(|c| Ok(Tensor::new(vec![1, shape[1], shape[2], shape[3]], c.to_vec())?))
        .collect()
}

pub fn join_frames(parts: Vec<Tensor>) -> Result<Tensor> {
    let first = parts.first().context("no frames to join")?.shape().to_vec();
    let mut shape = first.clone();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Ok(Tensor::new(shape, parts.into_iter().flat_map(Tensor::into_data).collect())?)
}

/// Writes `count` synthetic clips named `clip000`, `clip001`, … with
/// per-clip seeds `seed + i`.
pub fn write_toy_corpus(dir: &Path, count: usize, frames: usize, channels: usize, size: usize, seed: u64) -> Result<()> {
    for i in 0..count {
        let clip = Clip {
            name: format!("clip{:03}", i),
            frames: ftvsr::degradation::synthetic_clip(seed + i as u64, frames, channels, size, size),
        };
        write_clip(dir, &clip)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_nested_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64 / 255.0);
        write_clip(dir.path(), &Clip { name: "b".into(), frames: f.clone() }).unwrap();
        write_clip(dir.path(), &Clip { name: "a".into(), frames: f.clone() }).unwrap();
        let clips = read_clips(dir.path()).unwrap();
        assert_eq!(clips.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let single = read_clips(&dir.path().join("a")).unwrap();
        assert_eq!(single[0].name, "");
        assert_eq!(single[0].frames, f);
        assert!(read_clips(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn split_then_join_is_identity() {
        let f = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64);
        assert_eq!(join_frames(split_frames(&f).unwrap()).unwrap(), f);
    }
}
