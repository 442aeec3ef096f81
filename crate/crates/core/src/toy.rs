//! A small synthetic super-resolution task: clips from [`synthetic_clip`],
//! degraded by bicubic downsampling plus block quantisation, split into
//! training and held-out halves.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degradation::{degrade, synthetic_clip, DegradationSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ChannelMode};
use crate::model::{schedule_slot, Augment, Model, ModelConfig, Trainer};
use crate::resample::{bicubic_upsample, dihedral};
use crate::tensor::Tensor;
use crate::video_attention::{InnerAttention, SchemeKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySetup {
    pub clips: usize,
    pub held_out: usize,
    pub frames: usize,
    pub channels: usize,
    pub size: usize,
    pub scale: usize,
    pub q: f64,
    pub seed: u64,
}

impl Default for ToySetup {
    fn default() -> Self {
        ToySetup {
            clips: 20,
            held_out: 10,
            frames: 10,
            channels: 3,
            size: 32,
            scale: 2,
            q: 4.0,
            seed: 0,
        }
    }
}

/// Paired `(lr, hr)` clips.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub train: Vec<(Tensor, Tensor)>,
    pub test: Vec<(Tensor, Tensor)>,
}

impl ToyCorpus {
    /// Clip `i` uses content seed `seed + i` and the same degradation seed.
    pub fn generate(setup: &ToySetup) -> Result<Self> {
        if setup.held_out == 0 || setup.held_out >= setup.clips {
            return Err(Error::invalid(format!(
                "{} held-out clips of {} leaves no training or test split",
                setup.held_out, setup.clips
            )));
        }
        let spec = DegradationSpec::bi(setup.scale).with_quantization(setup.q);
        let mut pairs = Vec::with_capacity(setup.clips);
        for i in 0..setup.clips as u64 {
            let seed = setup.seed.wrapping_add(i);
            let hr = synthetic_clip(seed, setup.frames, setup.channels, setup.size, setup.size);
            pairs.push((degrade(&hr, &spec, seed)?, hr));
        }
        let test = pairs.split_off(setup.clips - setup.held_out);
        Ok(ToyCorpus { train: pairs, test })
    }

    /// Mean RGB PSNR over held-out frames, clip means averaged, for `sr(lr)`.
    pub fn held_out_psnr(&self, mut sr: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
        let mut total = 0.0;
        for (lr, hr) in &self.test {
            total += evaluate(&sr(lr)?, hr, ChannelMode::Rgb, 1.0)?.mean_psnr_db;
        }
        Ok(total / self.test.len() as f64)
    }

    pub fn bicubic_psnr(&self, scale: usize) -> Result<f64> {
        self.held_out_psnr(|lr| bicubic_upsample(lr, scale))
    }
}

/// Model and optimiser settings for a toy run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyRun {
    pub model: ModelConfig,
    pub steps: u64,
    pub batch: usize,
    pub augment: Augment,
    pub base_lr: f64,
    pub final_lr: f64,
    pub init_seed: u64,
}

impl ToyRun {
    pub fn new(channels: usize, scheme: SchemeKind) -> Self {
        ToyRun {
            model: ModelConfig {
                scale: 2,
                block: 4,
                cells: 2,
                channels,
                dim: 16,
                heads: 2,
                hidden_channels: 4,
                phi_width: 16,
                scheme,
                attention: InnerAttention::Fa,
            },
            steps: 500,
            batch: 8,
            augment: Augment::Dihedral,
            base_lr: 3e-3,
            final_lr: 3e-5,
            init_seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub losses: Vec<f64>,
    pub model_psnr: f64,
    pub bicubic_psnr: f64,
    pub elapsed: Duration,
}

impl ToyOutcome {
    pub fn gain_db(&self) -> f64 {
        self.model_psnr - self.bicubic_psnr
    }

    /// Trailing means over `window` steps, one per full window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.losses.len() < window {
            return Vec::new();
        }
        self.losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }

    /// Final steps (1-based) of the windows whose mean did not drop below
    /// the previous window's.
    pub fn moving_average_rises(&self, window: usize) -> Vec<usize> {
        self.moving_average(window)
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] >= w[0])
            .map(|(i, _)| i + window + 1)
            .collect()
    }
}

/// Trains on the corpus' training clips, scheduled by [`schedule_slot`]
/// `batch` at a time, and scores the result on the held-out clips.
pub fn train_toy(corpus: &ToyCorpus, run: &ToyRun) -> Result<(Model, ToyOutcome)> {
    let n = corpus.train.len();
    if run.batch == 0 || n == 0 {
        return Err(Error::invalid("toy training needs a positive batch and training clips"));
    }
    let start = Instant::now();
    let model = Model::new(run.model, &mut ChaCha8Rng::seed_from_u64(run.init_seed))?;
    let mut trainer = Trainer::new(model, run.base_lr, run.final_lr, run.steps);
    let mut losses = Vec::with_capacity(run.steps as usize);
    for step in 0..run.steps as usize {
        let mut lr = Vec::with_capacity(run.batch);
        let mut hr = Vec::with_capacity(run.batch);
        for j in 0..run.batch {
            let (clip, transform) = schedule_slot((step * run.batch + j) as u64, n, run.augment);
            lr.push(dihedral(&corpus.train[clip].0, transform)?);
            hr.push(dihedral(&corpus.train[clip].1, transform)?);
        }
        losses.push(trainer.train_step(&lr, &hr)?.loss);
    }
    let model = trainer.model;
    let model_psnr = corpus.held_out_psnr(|lr| model.super_resolve(lr, None))?;
    let outcome = ToyOutcome {
        losses,
        model_psnr,
        bicubic_psnr: corpus.bicubic_psnr(run.model.scale)?,
        elapsed: start.elapsed(),
    };
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySetup {
        ToySetup {
            clips: 3,
            held_out: 1,
            frames: 2,
            channels: 1,
            size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_splits_and_degrades() {
        let c = ToyCorpus::generate(&small()).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (2, 1));
        assert_eq!(c.train[0].0.shape(), &[2, 1, 4, 4]);
        assert_eq!(c.train[0].1.shape(), &[2, 1, 8, 8]);
        assert!(ToyCorpus::generate(&ToySetup { held_out: 3, ..small() }).is_err());
    }

    #[test]
    fn moving_average_and_rises() {
        let o = ToyOutcome {
            losses: vec![4.0, 3.0, 3.0, 1.0, 2.0],
            model_psnr: 30.0,
            bicubic_psnr: 29.5,
            elapsed: Duration::ZERO,
        };
        assert_eq!(o.moving_average(2), vec![3.5, 3.0, 2.0, 1.5]);
        assert!(o.moving_average_rises(2).is_empty());
        assert_eq!(o.moving_average_rises(1), vec![3, 5]);
        assert_eq!(o.gain_db(), 0.5);
    }

    #[test]
    fn zero_steps_leave_the_model_at_bicubic() {
        // scoring includes SSIM, which needs at least an 11×11 frame
        let corpus = ToyCorpus::generate(&ToySetup { size: 12, ..small() }).unwrap();
        let mut run = ToyRun::new(1, SchemeKind::SpaceTime);
        run.model.block = 2;
        run.steps = 0;
        let (_, out) = train_toy(&corpus, &run).unwrap();
        assert!(out.losses.is_empty());
        assert!(out.gain_db().abs() < 1e-9);
    }
}
