//! Command-line driver: `degrade`, `train`, `eval`, `spectra` and
//! `gradcheck`.
//!
//! Every configuration key is also a global `--key value` flag (underscores
//! become dashes), applied over `--config FILE` and `FTVSR_SEED`.

pub mod clips;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use ftvsr::kv::KvFile;

pub use config::RunConfig;

fn key_help(key: &str) -> &'static str {
    match key {
        "scale" => "upscaling factor, shared by the degradation",
        "block" => "DCT block size",
        "cells" => "blocks per token side",
        "channels" => "colour channels (1 or 3)",
        "dim" => "attention width",
        "heads" => "attention heads",
        "hidden_channels" => "channels of the recurrent state",
        "phi_width" => "width of the upsampler convolution",
        "scheme" => "attention scheme: sf, tf, joint, ts, st",
        "attention" => "attention inside each stage: fa or dfa",
        "kernel" => "blur before downsampling: none (bicubic) or gaussian",
        "kernel_sigma" => "gaussian blur sigma",
        "kernel_size" => "gaussian blur taps (odd)",
        "noise_sigma" => "additive gaussian noise sigma, in [0,1] units",
        "compression" => "compression stand-in: none or quantize",
        "q" => "quantisation strength",
        "compression_block" => "DCT block size of the compression stand-in",
        "seed" => "random seed (FTVSR_SEED overrides the config file)",
        "base_lr" => "initial learning rate",
        "final_lr" => "learning rate at the end of the cosine schedule",
        "total_steps" => "training steps",
        "batch" => "clips per training step",
        "augment" => "training augmentation, changed every pass over the clips: none, flips, dihedral",
        "checkpoint_every" => "steps between checkpoints",
        "jobs" => "worker threads",
        "channel_mode" => "evaluation channels: rgb or y",
        "band_lo" => "first spectral band",
        "band_hi" => "last spectral band",
        "input" => "input frame directory",
        "output" => "output directory",
        "checkpoint" => "checkpoint directory",
        "lr" => "low-resolution frame directory",
        "hr" => "high-resolution frame directory",
        "sr" => "super-resolved frame directory",
        "reference" => "reference frame directory for spectra",
        _ => "",
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn cli() -> Command {
    let mut cmd = Command::new("ftvsr")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Frequency-transformer video super-resolution toolkit")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key=value configuration file"),
        );
    for key in config::known_keys() {
        cmd = cmd.arg(
            Arg::new(key)
                .long(flag_name(key))
                .global(true)
                .value_name("VALUE")
                .help(key_help(key)),
        );
    }
    cmd.subcommand(Command::new("degrade").about("Degrade HR frames into LR frames and write a manifest"))
        .subcommand(
            Command::new("train")
                .about("Train on paired LR/HR clips")
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("continue from the checkpoint"),
                )
                .arg(
                    Arg::new("until")
                        .long("until")
                        .value_name("STEP")
                        .value_parser(clap::value_parser!(u64))
                        .help("stop once this many steps are done"),
                ),
        )
        .subcommand(Command::new("eval").about("Score SR frames, or a checkpoint on LR frames, against HR frames"))
        .subcommand(Command::new("spectra").about("Amplitude-frequency curves over DCT bands"))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference gradient suite")
                .arg(
                    Arg::new("filter")
                        .long("filter")
                        .value_name("TEXT")
                        .help("only checks whose name contains TEXT"),
                ),
        )
}

/// Flag values given on the command line, as configuration keys.
fn flag_overrides(m: &ArgMatches) -> KvFile {
    let mut kv = KvFile::new();
    for key in config::known_keys() {
        if let Some(v) = m.get_one::<String>(key) {
            kv.set(key, v);
        }
    }
    kv
}

/// Resolves the configuration for the chosen verb and runs it. Results go
/// to stdout, progress to stderr.
pub fn execute(m: &ArgMatches) -> Result<()> {
    let Some((verb, sub)) = m.subcommand() else {
        bail!("no command given");
    };
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let cfg = RunConfig::resolve(
        sub.get_one::<PathBuf>("config").map(PathBuf::as_path),
        env_seed.as_deref(),
        &flag_overrides(sub),
    )?;
    match verb {
        "degrade" => {
            let out = commands::degrade(&cfg)?;
            eprintln!("degraded {} frames in {} clips", out.frames, out.clips);
        }
        "train" => {
            let out = commands::train(&cfg, sub.get_flag("resume"), sub.get_one::<u64>("until").copied())?;
            eprintln!("{} steps; checkpoint at {}", out.steps.len(), out.checkpoint.display());
        }
        "eval" => {
            let out = commands::eval(&cfg)?;
            print!("{}", out.report.to_csv());
            eprintln!("psnr {:.4} dB  ssim {:.4}", out.report.mean_psnr_db, out.report.mean_ssim);
            if let Some(b) = out.bicubic {
                eprintln!("bicubic psnr {:.4} dB  ssim {:.4}", b.mean_psnr_db, b.mean_ssim);
            }
        }
        "spectra" => print!("{}", commands::spectra(&cfg)?.to_csv()),
        "gradcheck" => {
            let out = commands::gradcheck(&cfg, sub.get_one::<String>("filter").map(String::as_str))?;
            print!("{}", out.table());
            if !out.ok() {
                bail!("gradient check failed");
            }
        }
        other => bail!("unknown command `{}`", other),
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(&cli().try_get_matches_from(args)?)
}
