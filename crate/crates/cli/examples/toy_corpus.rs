//! Writes a synthetic clip corpus as PPM/PGM frames.
//!
//! `cargo run --example toy_corpus -- DIR [CLIPS] [FRAMES] [CHANNELS] [SIZE] [SEED]`

use std::path::PathBuf;

use anyhow::{Context, Result};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().context("usage: toy_corpus DIR [CLIPS] [FRAMES] [CHANNELS] [SIZE] [SEED]")?);
    let mut next = |default: u64| -> Result<u64> {
        args.next().map_or(Ok(default), |a| a.parse().with_context(|| format!("bad number `{}`", a)))
    };
    let (clips, frames, channels, size, seed) = (next(20)?, next(10)?, next(3)?, next(32)?, next(0)?);
    ftvsr_cli::clips::write_toy_corpus(&dir, clips as usize, frames as usize, channels as usize, size as usize, seed)?;
    eprintln!("wrote {} clips to {}", clips, dir.display());
    Ok(())
}
