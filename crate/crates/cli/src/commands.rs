//! The five verbs. Each takes a resolved [`RunConfig`] and returns its
//! result so the binary and the tests share one code path.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ftvsr::degradation::{band_count, degrade as degrade_frames, spectral_curve};
use ftvsr::gradcheck::GradCheckReport;
use ftvsr::metrics::{evaluate, EvalReport};
use ftvsr::model::{schedule_slot, Checkpoint, Model, TrainStep, Trainer};
use ftvsr::resample::{bicubic_upsample, dihedral};
use ftvsr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clips::{join_frames, pair_clips, read_clips, split_frames, write_clip, Clip};
use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOSS_LOG: &str = "loss.csv";
const LOSS_HEADER: &str = "step,loss,lr";

/// Noise seed of clip `index`. Frame `t` of the clip then draws from
/// `clip_seed ^ t`, so clips never share a stream.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    seed ^ ((index as u64) << 32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradeOutcome {
    pub clips: usize,
    pub frames: usize,
}

/// Degrades every clip of `input` into `output` and writes the manifest.
pub fn degrade(cfg: &RunConfig) -> Result<DegradeOutcome> {
    let input = cfg.require(&cfg.paths.input, "input")?;
    let output = cfg.require(&cfg.paths.output, "output")?;
    let spec = cfg.degradation;
    let clips = read_clips(input)?;
    let work: Vec<(usize, Tensor)> = clips
        .iter()
        .enumerate()
        .map(|(k, c)| Ok(split_frames(&c.frames)?.into_iter().map(move |f| (k, f))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut frame_index = Vec::with_capacity(work.len());
    for (k, c) in clips.iter().enumerate() {
        frame_index.extend((0..c.frames.shape()[0]).map(|t| (k, t as u64)));
    }
    let degraded: Vec<Tensor> = cfg.pool()?.install(|| {
        work.par_iter()
            .zip(frame_index.par_iter())
            .map(|((_, frame), &(k, t))| degrade_frames(frame, &spec, clip_seed(cfg.seed, k) ^ t))
            .collect::<ftvsr::Result<Vec<_>>>()
    })?;
    let mut parts = degraded.into_iter();
    for c in &clips {
        let t = c.frames.shape()[0];
        let frames = join_frames(parts.by_ref().take(t).collect())?;
        write_clip(
            output,
            &Clip {
                name: c.name.clone(),
                frames,
            },
        )?;
    }
    let mut manifest = spec.to_kv();
    manifest.set("seed", cfg.seed);
    manifest.save(output.join(MANIFEST_FILE))?;
    cfg.echo(output)?;
    Ok(DegradeOutcome {
        clips: clips.len(),
        frames: work.len(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Steps taken by this invocation.
    pub steps: Vec<TrainStep>,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_dir(cfg: &RunConfig) -> Result<PathBuf> {
    match (&cfg.paths.checkpoint, &cfg.paths.output) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(o)) => Ok(o.join("checkpoint")),
        (None, None) => bail!("--output or --checkpoint is required"),
    }
}

/// Saves into a sibling directory first so an interrupted save never
/// replaces the last good checkpoint.
fn save_checkpoint(dir: &Path, trainer: &Trainer) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    Checkpoint::save(&staging, trainer)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

/// Loss log lines up to and including `step`, header first.
fn kept_log(path: &Path, step: u64) -> Result<String> {
    let mut out = format!("{}\n", LOSS_HEADER);
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if s <= step {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Trains on paired clips of `lr` and `hr`, logging every step and
/// checkpointing every `checkpoint_every` steps and at the end. With
/// `resume`, continues from the checkpoint. `until` stops early at that
/// step count.
pub fn train(cfg: &RunConfig, resume: bool, until: Option<u64>) -> Result<TrainOutcome> {
    let output = cfg.require(&cfg.paths.output, "output")?;
    let lr = read_clips(cfg.require(&cfg.paths.lr, "lr")?)?;
    let hr = read_clips(cfg.require(&cfg.paths.hr, "hr")?)?;
    let pairs = pair_clips(lr, hr, "LR/HR")?;
    let s = cfg.model.scale;
    for (l, h) in &pairs {
        let (ls, hs) = (l.frames.shape(), h.frames.shape());
        if ls[0] != hs[0] || ls[1] != cfg.model.channels || hs[1] != ls[1] || hs[2] != ls[2] * s || hs[3] != ls[3] * s {
            bail!("clip `{}`: LR {:?} and HR {:?} do not match the model (scale {}, {} channels)", l.name, ls, hs, s, cfg.model.channels);
        }
    }
    let (lr_clips, hr_clips): (Vec<Tensor>, Vec<Tensor>) = pairs.into_iter().map(|(l, h)| (l.frames, h.frames)).unzip();

    let ckpt = checkpoint_dir(cfg)?;
    let mut trainer = if resume {
        let t = Checkpoint::load(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?;
        if t.model.config != cfg.model {
            bail!("checkpoint at {} was trained with a different model configuration", ckpt.display());
        }
        t
    } else {
        let model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Trainer::new(model, cfg.base_lr, cfg.final_lr, cfg.total_steps)
    };
    fs::create_dir_all(output)?;
    cfg.echo(output)?;
    let log_path = output.join(LOSS_LOG);
    let kept = if resume { kept_log(&log_path, trainer.step)? } else { format!("{}\n", LOSS_HEADER) };
    let mut log = fs::File::create(&log_path)?;
    log.write_all(kept.as_bytes())?;

    let stop = until.unwrap_or(trainer.total_steps).min(trainer.total_steps);
    let n = lr_clips.len();
    let mut steps = Vec::new();
    while trainer.step < stop {
        let mut lr_batch = Vec::with_capacity(cfg.batch);
        let mut hr_batch = Vec::with_capacity(cfg.batch);
        for j in 0..cfg.batch as u64 {
            let (clip, transform) = schedule_slot(trainer.step * cfg.batch as u64 + j, n, cfg.augment);
            lr_batch.push(dihedral(&lr_clips[clip], transform)?);
            hr_batch.push(dihedral(&hr_clips[clip], transform)?);
        }
        let step = match trainer.train_step(&lr_batch, &hr_batch) {
            Ok(s) => s,
            Err(e) => {
                log.flush()?;
                return Err(anyhow::Error::new(e).context(format!(
                    "training aborted at step {}; last good checkpoint kept at {}",
                    trainer.step + 1,
                    ckpt.display()
                )));
            }
        };
        writeln!(log, "{},{:.12e},{:.6e}", step.step, step.loss, step.lr)?;
        steps.push(step);
        if step.step % cfg.checkpoint_every == 0 || step.step == stop {
            log.flush()?;
            save_checkpoint(&ckpt, &trainer)?;
            eprintln!("step {:>6}  loss {:.6}  lr {:.3e}", step.step, step.loss, step.lr);
        }
    }
    log.flush()?;
    Ok(TrainOutcome { steps, checkpoint: ckpt })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Bicubic upsampling of the LR input, when one was given.
    pub bicubic: Option<EvalReport>,
}

fn merged_report(cfg: &RunConfig, pairs: &[(Tensor, Tensor)]) -> Result<EvalReport> {
    let reports = cfg.pool()?.install(|| {
        pairs
            .par_iter()
            .map(|(sr, hr)| evaluate(sr, hr, cfg.channel_mode, 1.0))
            .collect::<ftvsr::Result<Vec<_>>>()
    })?;
    Ok(EvalReport::from_frames(
        reports.into_iter().flat_map(|r| r.per_frame).collect(),
        cfg.channel_mode,
    )?)
}

/// Scores `sr` clips, or the super-resolved `lr` clips of a checkpoint,
/// against `hr`. Frames of all clips are pooled in clip order.
pub fn eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let hr = read_clips(cfg.require(&cfg.paths.hr, "hr")?)?;
    let lr = cfg.paths.lr.as_deref().map(read_clips).transpose()?;
    let (sr, scale) = match (&cfg.paths.sr, &cfg.paths.checkpoint, &lr) {
        (Some(dir), _, _) => (read_clips(dir)?, cfg.model.scale),
        (None, Some(ckpt), Some(lr)) => {
            let model = Checkpoint::load_model(ckpt)?;
            let sr = cfg.pool()?.install(|| {
                lr.par_iter()
                    .map(|c| {
                        Ok(Clip {
                            name: c.name.clone(),
                            frames: model.super_resolve(&c.frames, None)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            (sr, model.config.scale)
        }
        (None, Some(_), None) => bail!("--checkpoint needs --lr frames to super-resolve"),
        (None, None, _) => bail!("either --sr or --checkpoint with --lr is required"),
    };
    let tensors = |v: Vec<(Clip, Clip)>| v.into_iter().map(|(a, b)| (a.frames, b.frames)).collect::<Vec<_>>();
    let report = merged_report(cfg, &tensors(pair_clips(sr, hr.clone(), "SR/HR")?))?;
    let bicubic = match lr {
        Some(lr) => {
            let up = lr
                .into_iter()
                .map(|c| {
                    Ok(Clip {
                        name: c.name,
                        frames: bicubic_upsample(&c.frames, scale)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(merged_report(cfg, &tensors(pair_clips(up, hr, "LR/HR")?))?)
        }
        None => None,
    };
    if let Some(out) = &cfg.paths.output {
        cfg.echo(out)?;
        fs::write(out.join("eval.csv"), report.to_csv())?;
        if let Some(b) = &bicubic {
            fs::write(out.join("bicubic.csv"), b.to_csv())?;
        }
    }
    Ok(EvalOutcome { report, bicubic })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectraTable {
    pub band_lo: usize,
    pub input: Vec<f64>,
    pub reference: Option<Vec<f64>>,
}

impl SpectraTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.reference.is_some() { "band,input,reference\n" } else { "band,input\n" });
        for (i, v) in self.input.iter().enumerate() {
            let _ = write!(s, "{},{:.9e}", self.band_lo + i, v);
            if let Some(r) = &self.reference {
                let _ = write!(s, ",{:.9e}", r[i]);
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the per-clip amplitude curves of a clip directory.
fn mean_curve(cfg: &RunConfig, dir: &Path, lo: usize, hi: usize) -> Result<Vec<f64>> {
    let clips = read_clips(dir)?;
    let curves = cfg.pool()?.install(|| {
        clips
            .par_iter()
            .map(|c| spectral_curve(&c.frames, cfg.model.block, lo, hi))
            .collect::<ftvsr::Result<Vec<_>>>()
    })?;
    let n = curves.len() as f64;
    Ok((0..=hi - lo).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / n).collect())
}

/// Amplitude-frequency curves over radial bands `band_lo..=band_hi` of
/// `block`-sized DCT blocks.
pub fn spectra(cfg: &RunConfig) -> Result<SpectraTable> {
    let bands = band_count(cfg.model.block);
    let hi = cfg.band_hi.unwrap_or(bands - 1);
    let lo = cfg.band_lo;
    if lo > hi || hi >= bands {
        bail!("band range {}..={} is not within 0..={} for block size {}", lo, hi, bands - 1, cfg.model.block);
    }
    let input = mean_curve(cfg, cfg.require(&cfg.paths.input, "input")?, lo, hi)?;
    let reference = cfg.paths.reference.as_deref().map(|r| mean_curve(cfg, r, lo, hi)).transpose()?;
    let table = SpectraTable {
        band_lo: lo,
        input,
        reference,
    };
    if let Some(out) = &cfg.paths.output {
        cfg.echo(out)?;
        fs::write(out.join("spectra.csv"), table.to_csv())?;
    }
    Ok(table)
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub reports: Vec<GradCheckReport>,
    /// The checker run against a deliberately wrong derivative; it must fail.
    pub self_test: GradCheckReport,
}

impl GradcheckOutcome {
    pub fn ok(&self) -> bool {
        !self.reports.is_empty() && self.reports.iter().all(|r| r.passed) && !self.self_test.passed
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<34} {:>6} {:>12}  {}\n", "check", "n", "max_rel_err", "result");
        for r in &self.reports {
            let _ = writeln!(s, "{}", r.row());
        }
        let _ = writeln!(
            s,
            "self-test (corrupted rule) {}",
            if self.self_test.passed { "NOT DETECTED" } else { "detected" }
        );
        s
    }
}

pub fn gradcheck(cfg: &RunConfig, filter: Option<&str>) -> Result<GradcheckOutcome> {
    let outcome = GradcheckOutcome {
        reports: ftvsr::grad_suite::run(filter)?,
        self_test: ftvsr::grad_suite::corrupted_rule_check()?,
    };
    if outcome.reports.is_empty() {
        bail!("no gradient check matches filter {:?}", filter.unwrap_or(""));
    }
    if let Some(out) = &cfg.paths.output {
        cfg.echo(out)?;
        fs::write(out.join("gradcheck.txt"), outcome.table())?;
    }
    Ok(outcome)
}
