//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it is
//! independent of every adjoint rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Added to `|fd|` in the denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn row(&self) -> String {
        format!(
            "{:<34} {:>6} {:>12.3e}  {}",
            self.name,
            self.checked,
            self.max_rel_error,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Compares tape gradients of `f` at `inputs` against central differences.
/// `f` must return a scalar.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars = perturbed
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        out.with_value(|v| v.item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[which].numel() {
            let orig = inputs[which].data()[j];
            work[which].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[which].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * cfg.step);
            let rel = (grad.data()[j] - fd).abs() / (fd.abs() + cfg.floor);
            checked += 1;
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some((which, j));
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked,
        max_rel_error: max_rel,
        worst,
        passed: max_rel < cfg.tolerance,
    })
}

/// Reduces a non-scalar output to a scalar by a fixed random weighting, so
/// every output element contributes a distinct coefficient.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = out.tape().constant(w)?;
    out.mul(w)?.sum()
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
