//! Trains the toy model and compares it with bicubic upsampling on the
//! held-out clips.
//!
//! `cargo run --release --example toy_train -- [key=value ...]` with keys
//! `steps`, `batch`, `lr`, `final_lr`, `augment`, `scheme`, `attention`,
//! `channels`.

use ftvsr::model::Augment;
use ftvsr::toy::{train_toy, ToyCorpus, ToyRun, ToySetup};
use ftvsr::video_attention::{InnerAttention, SchemeKind};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn main() -> Result<()> {
    let mut setup = ToySetup::default();
    let mut run = ToyRun::new(setup.channels, SchemeKind::SpaceTime);
    for arg in std::env::args().skip(1) {
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{}`", arg))?;
        let number = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number `{}`", v));
        match key {
            "steps" => run.steps = number(value)? as u64,
            "batch" => run.batch = number(value)? as usize,
            "lr" => run.base_lr = number(value)?,
            "final_lr" => run.final_lr = number(value)?,
            "augment" => run.augment = Augment::parse(value)?,
            "scheme" => run.model.scheme = value.parse()?,
            "attention" => run.model.attention = value.parse::<InnerAttention>()?,
            "channels" => {
                setup.channels = number(value)? as usize;
                run.model.channels = setup.channels;
            }
            _ => return Err(format!("unknown key `{}`", key).into()),
        }
    }
    let corpus = ToyCorpus::generate(&setup)?;
    let (_, out) = train_toy(&corpus, &run)?;
    for (i, m) in out.moving_average(50).iter().enumerate().step_by(50) {
        println!("step {:>4}  50-step mean loss {:.6}", i + 50, m);
    }
    println!("moving-average rises at steps {:?}", out.moving_average_rises(50));
    println!(
        "held-out psnr {:.3} dB, bicubic {:.3} dB, gain {:+.3} dB, {:.0} s",
        out.model_psnr,
        out.bicubic_psnr,
        out.gain_db(),
        out.elapsed.as_secs_f64()
    );
    Ok(())
}
