//! Loss, optimiser, learning-rate schedule and checkpoints.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{FramePlan, Model, ModelConfig, Network};

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Frame-averaged Charbonnier penalty over `T×…` sequences:
/// `mean_t sqrt(‖sr_t − hr_t‖² + ε²)`.
pub fn charbonnier_loss<'t>(sr: Var<'t>, hr: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let shape = sr.shape();
    if shape != hr.shape() || shape.is_empty() {
        return Err(Error::shape(
            "charbonnier_loss",
            format!("{:?} vs {:?}", shape, hr.shape()),
        ));
    }
    let frames = shape[0];
    let per_frame: usize = shape[1..].iter().product();
    sr.sub(hr)?
        .square()?
        .reshape(&[frames, per_frame])?
        .sum_axis(1)?
        .add_scalar(eps * eps)?
        .sqrt()?
        .mean()
}

/// Cosine annealing from `base` at step 0 to `floor` at `total`.
pub fn cosine_lr(base: f64, floor: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            steps: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    /// One bias-corrected update using the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimiser tracks {} tensors, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let grad = match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn moments_store(&self, params: &ParamStore, which: &[Vec<f64>]) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for ((name, t), m) in params.iter().zip(which) {
            s.insert(name, Tensor::new(t.shape().to_vec(), m.clone())?);
        }
        Ok(s)
    }

    fn save(&self, dir: &Path, params: &ParamStore) -> Result<()> {
        self.moments_store(params, &self.first)?.save(dir.join("first"))?;
        self.moments_store(params, &self.second)?.save(dir.join("second"))?;
        let mut kv = KvFile::new();
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("steps", self.steps);
        kv.save(dir.join("adam.txt"))
    }

    fn load(dir: &Path, params: &ParamStore) -> Result<Self> {
        let kv = KvFile::load(dir.join("adam.txt"))?;
        let read = |sub: &str| -> Result<Vec<Vec<f64>>> {
            let store = ParamStore::load(dir.join(sub))?;
            params
                .iter()
                .map(|(name, t)| {
                    let m = store.get(name)?;
                    if m.shape() != t.shape() {
                        return Err(Error::format("optimiser state", format!("shape of `{}`", name)));
                    }
                    Ok(m.data().to_vec())
                })
                .collect()
        };
        Ok(Adam {
            beta1: kv.parse_value("beta1")?,
            beta2: kv.parse_value("beta2")?,
            eps: kv.parse_value("eps")?,
            steps: kv.parse_value("steps")?,
            first: read("first")?,
            second: read("second")?,
        })
    }
}

/// Geometric augmentation of training clips, as dihedral indices (see
/// [`crate::resample::dihedral`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Augment {
    #[default]
    None,
    /// Identity, half turn, left-right and up-down mirrors; keeps the frame shape.
    Flips,
    /// All quarter turns and mirrors.
    Dihedral,
}

impl Augment {
    pub fn transforms(self) -> &'static [usize] {
        match self {
            Augment::None => &[0],
            Augment::Flips => &[0, 2, 4, 6],
            Augment::Dihedral => &[0, 1, 2, 3, 4, 5, 6, 7],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::Flips => "flips",
            Augment::Dihedral => "dihedral",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "flips" => Ok(Augment::Flips),
            "dihedral" => Ok(Augment::Dihedral),
            _ => Err(Error::invalid(format!("unknown augmentation `{}` (none, flips, dihedral)", s))),
        }
    }
}

/// Clip index and dihedral index for training slot `slot` (step × batch +
/// position in the batch). Clips are visited cyclically; each full pass
/// over the clips uses the next transform.
pub fn schedule_slot(slot: u64, clips: usize, augment: Augment) -> (usize, usize) {
    let n = clips.max(1) as u64;
    let set = augment.transforms();
    ((slot % n) as usize, set[((slot / n) % set.len() as u64) as usize])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStep {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Model, optimiser and schedule state for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub base_lr: f64,
    pub final_lr: f64,
    pub total_steps: u64,
    plans: HashMap<(usize, usize), FramePlan>,
}

impl Trainer {
    pub fn new(model: Model, base_lr: f64, final_lr: f64, total_steps: u64) -> Self {
        Trainer {
            adam: Adam::new(&model.params),
            model,
            step: 0,
            base_lr,
            final_lr,
            total_steps,
            plans: HashMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.final_lr, self.step, self.total_steps)
    }

    fn plan(&mut self, h: usize, w: usize) -> Result<FramePlan> {
        if let Some(p) = self.plans.get(&(h, w)) {
            return Ok(p.clone());
        }
        let p = self.model.plan(h, w)?;
        self.plans.insert((h, w), p.clone());
        Ok(p)
    }

    /// Loss of the current parameters on paired clips, averaged over clips,
    /// without updating anything.
    pub fn loss(&mut self, lr_clips: &[Tensor], hr_clips: &[Tensor]) -> Result<f64> {
        let plans = self.plans_for(lr_clips)?;
        let tape = Tape::new();
        let net = Network::bind(&self.model.config, &self.model.params, &tape)?;
        batch_loss(&net, &tape, &plans, lr_clips, hr_clips)?.with_value(|v| v.item())
    }

    fn plans_for(&mut self, lr_clips: &[Tensor]) -> Result<Vec<FramePlan>> {
        lr_clips
            .iter()
            .map(|c| match *c.shape() {
                [_, _, h, w] => self.plan(h, w),
                _ => Err(Error::shape("train_step", format!("clip shape {:?}", c.shape()))),
            })
            .collect()
    }

    /// One optimiser step on a batch of paired `T×C×H×W` clips. A
    /// non-finite loss or gradient aborts before any parameter changes.
    pub fn train_step(&mut self, lr_clips: &[Tensor], hr_clips: &[Tensor]) -> Result<TrainStep> {
        let plans = self.plans_for(lr_clips)?;
        let lr = self.current_lr();
        let loss = {
            let tape = Tape::new();
            let net = Network::bind(&self.model.config, &self.model.params, &tape)?;
            let loss = batch_loss(&net, &tape, &plans, lr_clips, hr_clips)?;
            let value = loss.with_value(|v| v.item())?;
            tape.backward(loss)?;
            self.model.params.zero_grad();
            self.model.params.accumulate_grads(net.params())?;
            value
        };
        if !loss.is_finite() || !self.model.params.iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite()))) {
            return Err(Error::NonFinite { op: "train_step" });
        }
        self.adam.update(&mut self.model.params, lr)?;
        self.model.params.zero_grad();
        self.step += 1;
        Ok(TrainStep {
            step: self.step,
            loss,
            lr,
        })
    }
}

fn batch_loss<'t>(
    net: &Network<'t>,
    tape: &'t Tape,
    plans: &[FramePlan],
    lr_clips: &[Tensor],
    hr_clips: &[Tensor],
) -> Result<Var<'t>> {
    if lr_clips.is_empty() || lr_clips.len() != hr_clips.len() {
        return Err(Error::invalid(format!(
            "{} LR clips paired with {} HR clips",
            lr_clips.len(),
            hr_clips.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for ((lr, hr), plan) in lr_clips.iter().zip(hr_clips).zip(plans) {
        let sr = net.forward_sequence(plan, tape.constant(lr.clone())?, None)?;
        let l = charbonnier_loss(sr, tape.constant(hr.clone())?, CHARBONNIER_EPS)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    total.expect("non-empty batch").scale(1.0 / lr_clips.len() as f64)
}

/// Checkpoint directories: `model.txt`, `params/`, and for training runs
/// `train.txt` plus `optimizer/`.
pub struct Checkpoint;

impl Checkpoint {
    pub fn save_model(dir: impl AsRef<Path>, model: &Model) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        model.config.to_kv().save(dir.join("model.txt"))?;
        model.params.save(dir.join("params"))
    }

    pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
        let dir = dir.as_ref();
        if !dir.join("model.txt").is_file() {
            return Err(Error::invalid(format!("no checkpoint at {}", dir.display())));
        }
        let config = ModelConfig::from_kv(&KvFile::load(dir.join("model.txt"))?)?;
        let params = ParamStore::load(dir.join("params"))?;
        let expected = super::init_params(&config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (name, t) in expected.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::format("checkpoint", format!("shape of `{}` does not match model.txt", name)));
            }
        }
        Ok(Model { config, params })
    }

    pub fn save(dir: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
        let dir = dir.as_ref();
        Self::save_model(dir, &trainer.model)?;
        trainer.adam.save(&dir.join("optimizer"), &trainer.model.params)?;
        let mut kv = KvFile::new();
        kv.set("step", trainer.step);
        kv.set("base_lr", trainer.base_lr);
        kv.set("final_lr", trainer.final_lr);
        kv.set("total_steps", trainer.total_steps);
        kv.save(dir.join("train.txt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Trainer> {
        let dir = dir.as_ref();
        let model = Self::load_model(dir)?;
        let kv = KvFile::load(dir.join("train.txt"))?;
        let adam = Adam::load(&dir.join("optimizer"), &model.params)?;
        Ok(Trainer {
            adam,
            step: kv.parse_value("step")?,
            base_lr: kv.parse_value("base_lr")?,
            final_lr: kv.parse_value("final_lr")?,
            total_steps: kv.parse_value("total_steps")?,
            model,
            plans: HashMap::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckConfig};
    use crate::model::tests::tiny_config;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_visits_clips_then_transforms() {
        let got: Vec<(usize, usize)> = (0..7).map(|s| schedule_slot(s, 3, Augment::Flips)).collect();
        assert_eq!(got, vec![(0, 0), (1, 0), (2, 0), (0, 2), (1, 2), (2, 2), (0, 4)]);
        assert_eq!(schedule_slot(12, 3, Augment::Flips), (0, 0));
        assert!((0..40).all(|s| schedule_slot(s, 5, Augment::None).1 == 0));
        for a in [Augment::None, Augment::Flips, Augment::Dihedral] {
            assert_eq!(Augment::parse(a.name()).unwrap(), a);
        }
        assert!(Augment::parse("mirror").is_err());
    }

    #[test]
    fn identical_sequences_cost_epsilon() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 1, 2, 2], 0.5)).unwrap();
        let l = charbonnier_loss(x, x, CHARBONNIER_EPS).unwrap().value().item().unwrap();
        assert_eq!(l, 1e-3);
    }

    #[test]
    fn single_pixel_hand_value() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 1], vec![0.5 + 3e-3]).unwrap()).unwrap();
        let b = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        let l = charbonnier_loss(a, b, CHARBONNIER_EPS).unwrap().value().item().unwrap();
        assert!((l - 3.1623e-3).abs() < 1e-7);
        assert!(charbonnier_loss(a, tape.constant(Tensor::zeros(&[1, 2])).unwrap(), 1e-3).is_err());
    }

    #[test]
    fn charbonnier_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sr = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random::<f64>());
        let hr = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random::<f64>());
        let r = check("charbonnier", &[sr, hr], |_, v| charbonnier_loss(v[0], v[1], CHARBONNIER_EPS), GradCheckConfig::default())
            .unwrap();
        assert!(r.passed, "{}", r.row());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0.0, 0, 100), 2e-4);
        assert!((cosine_lr(2e-4, 0.0, 50, 100) - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(2e-4, 1e-6, 100, 100) - 1e-6 < 1e-18);
        assert_eq!(cosine_lr(2e-4, 1e-6, 500, 100), cosine_lr(2e-4, 1e-6, 100, 100));
    }

    #[test]
    fn adam_single_step_on_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.5));
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = bound.get("x").unwrap();
        tape.backward(x.square().unwrap()).unwrap();
        store.accumulate_grads(&bound).unwrap();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, 0.1).unwrap();
        // g = 3; m = 0.3, v = 0.09; corrected m = 3, v = 9.
        let g = 3.0f64;
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.01 * g * g) / (1.0 - 0.99);
        let expect = 1.5 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((store.get("x").unwrap().data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_fn(&[3], |i| i as f64));
        let before = store.clone();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, 0.5).unwrap();
        assert_eq!(store.get("w").unwrap().data(), before.get("w").unwrap().data());
    }

    fn toy_batch(seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random::<f64>());
        let lr = crate::resample::bicubic_resize(&hr, 4, 4, true).unwrap();
        (vec![lr], vec![hr])
    }

    #[test]
    fn training_steps_are_reproducible_and_resume_from_checkpoint() {
        let (lr, hr) = toy_batch(2);
        let make = || Trainer::new(Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap(), 1e-2, 0.0, 10);
        let mut a = make();
        let mut b = make();
        for _ in 0..3 {
            assert_eq!(a.train_step(&lr, &hr).unwrap(), b.train_step(&lr, &hr).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::save(dir.path(), &a).unwrap();
        let mut resumed = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(resumed.step, 3);
        let next = a.train_step(&lr, &hr).unwrap();
        assert_eq!(resumed.train_step(&lr, &hr).unwrap(), next);
        assert_eq!(next.step, 4);
    }

    #[test]
    fn a_few_steps_reduce_the_loss() {
        let (lr, hr) = toy_batch(4);
        let mut t = Trainer::new(Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap(), 1e-2, 1e-2, 0);
        let start = t.loss(&lr, &hr).unwrap();
        for _ in 0..20 {
            t.train_step(&lr, &hr).unwrap();
        }
        assert!(t.loss(&lr, &hr).unwrap() < start);
    }

    #[test]
    fn non_finite_input_aborts_without_touching_parameters() {
        let (mut lr, hr) = toy_batch(6);
        lr[0].data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap(), 1e-2, 0.0, 10);
        let before = t.model.params.clone();
        assert!(t.train_step(&lr, &hr).is_err());
        assert_eq!(t.model.params, before);
        assert_eq!(t.step, 0);
    }

    #[test]
    fn missing_checkpoint_is_a_clear_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::load_model(dir.path().join("nope")).unwrap_err();
        assert!(err.to_string().contains("no checkpoint"));
    }
}
