//! Frequency attention: scaled dot-product attention between frequency
//! tokens, its multi-head form, the global/local variants and the dual
//! (global + local) form.
//!
//! Token grids are `T×N×F×d` tensors (frames, spatial blocks, frequencies,
//! feature width). Every variant is the same batched attention kernel run on
//! a different regrouping of the grid axes, described by [`Grouping`]:
//! which axes index independent softmax problems, which axes enumerate the
//! tokens that attend to each other, and which axes are folded into the
//! token feature vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "model width {} is not divisible into {} heads",
                dim, heads
            )));
        }
        Ok(AttentionConfig { dim, heads })
    }

    pub fn key_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Configuration of each half-width branch of dual frequency attention.
    pub fn branch(&self) -> Result<AttentionConfig> {
        if self.dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "dual frequency attention needs an even feature width, got {}",
                self.dim
            )));
        }
        let half = self.dim / 2;
        let heads = if half % self.heads == 0 { self.heads } else { 1 };
        AttentionConfig::new(half, heads)
    }
}

/// Which grid axes play which role in one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// Per frame, the `F` whole-plane tokens attend to each other; the `N`
    /// block slices of a plane form one long feature vector.
    Global,
    /// Per frame, all `N·F` block-frequency tokens attend to each other.
    Local,
    /// Per spatial block, the `T·F` tokens across frames attend to each other.
    Time,
    /// One softmax over all `T·N·F` tokens.
    Joint,
}

const T_AXIS: usize = 0;
const N_AXIS: usize = 1;
const F_AXIS: usize = 2;
const H_AXIS: usize = 3;
const DK_AXIS: usize = 4;

impl Grouping {
    /// (group, token, feature) axes of the `T×N×F` token index.
    fn axes(self) -> (&'static [usize], &'static [usize], &'static [usize]) {
        match self {
            Grouping::Global => (&[T_AXIS], &[F_AXIS], &[N_AXIS]),
            Grouping::Local => (&[T_AXIS], &[N_AXIS, F_AXIS], &[]),
            Grouping::Time => (&[N_AXIS], &[T_AXIS, F_AXIS], &[]),
            Grouping::Joint => (&[], &[T_AXIS, N_AXIS, F_AXIS], &[]),
        }
    }

    fn permutation(self) -> Vec<usize> {
        let (g, t, f) = self.axes();
        g.iter()
            .copied()
            .chain([H_AXIS])
            .chain(t.iter().copied())
            .chain(f.iter().copied())
            .chain([DK_AXIS])
            .collect()
    }

    /// Softmax width for a key grid of `frames × blocks × freqs` tokens.
    pub fn softmax_width(self, frames: usize, blocks: usize, freqs: usize) -> usize {
        let sizes = [frames, blocks, freqs];
        self.axes().1.iter().map(|&a| sizes[a]).product()
    }
}

/// Query/key/value/output projections, each `d×d`.
#[derive(Clone, Copy, Debug)]
pub struct Projections<'t> {
    pub query: Var<'t>,
    pub key: Var<'t>,
    pub value: Var<'t>,
    pub output: Var<'t>,
}

const PROJ_NAMES: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl<'t> Projections<'t> {
    pub fn bind(bound: &BoundParams<'t>, prefix: &str) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{}.{}", prefix, n));
        Ok(Projections {
            query: get("wq")?,
            key: get("wk")?,
            value: get("wv")?,
            output: get("wo")?,
        })
    }
}

/// Uniform `[-1/√d, 1/√d]` projections under `prefix`.
pub fn init_projections(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (dim as f64).sqrt();
    for n in PROJ_NAMES {
        store.insert_uniform(format!("{}.{}", prefix, n), &[dim, dim], bound, rng);
    }
}

pub fn init_identity_projections(store: &mut ParamStore, prefix: &str, dim: usize) {
    for n in PROJ_NAMES {
        store.insert(format!("{}.{}", prefix, n), crate::tensor::Tensor::eye(dim));
    }
}

/// Applies a `d_in×d_out` matrix to the last axis.
pub fn project_last<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let (d_in, d_out) = match w.shape()[..] {
        [a, b] => (a, b),
        ref s => return Err(Error::shape("project_last", format!("weight shape {:?}", s))),
    };
    let last = *shape.last().ok_or_else(|| Error::shape("project_last", "scalar input"))?;
    if last != d_in {
        return Err(Error::shape("project_last", format!("width {} into {}×{}", last, d_in, d_out)));
    }
    let rows = shape[..shape.len() - 1].iter().product();
    let mut out_shape = shape.clone();
    *out_shape.last_mut().expect("non-empty") = d_out;
    x.reshape(&[rows, d_in])?.matmul(w)?.reshape(&out_shape)
}

/// Output of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct Attended<'t> {
    /// Same shape as the queries.
    pub output: Var<'t>,
    /// Row-stochastic attention matrices, `(groups·heads)×n_q×n_k`.
    pub weights: Var<'t>,
}

fn grid_dims(x: &Var<'_>, what: &str) -> Result<[usize; 4]> {
    match x.shape()[..] {
        [t, n, f, d] => Ok([t, n, f, d]),
        ref s => Err(Error::shape("attention", format!("{} must be T×N×F×d, got {:?}", what, s))),
    }
}

fn split_heads<'t>(x: Var<'t>, grouping: Grouping, heads: usize) -> Result<(Var<'t>, Vec<usize>)> {
    let [t, n, f, d] = grid_dims(&x, "tokens")?;
    let perm = grouping.permutation();
    let x5 = x.reshape(&[t, n, f, heads, d / heads])?.permute(&perm)?;
    let permuted = x5.shape();
    let (g, tok, feat) = grouping.axes();
    let sizes = [t, n, f];
    let groups: usize = g.iter().map(|&a| sizes[a]).product();
    let tokens: usize = tok.iter().map(|&a| sizes[a]).product();
    let features: usize = feat.iter().map(|&a| sizes[a]).product::<usize>() * (d / heads);
    Ok((x5.reshape(&[groups * heads, tokens, features])?, permuted))
}

/// Multi-head attention of a query grid against a key/value grid under
/// `grouping`. Queries and keys must agree on the group and feature axes;
/// key and value grids must have identical shapes.
pub fn grid_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    grouping: Grouping,
    cfg: AttentionConfig,
    proj: &Projections<'t>,
) -> Result<Attended<'t>> {
    let qd = grid_dims(&q, "queries")?;
    let kd = grid_dims(&k, "keys")?;
    let vd = grid_dims(&v, "values")?;
    if kd != vd {
        return Err(Error::shape("attention", format!("keys {:?} vs values {:?}", kd, vd)));
    }
    if qd[3] != cfg.dim || kd[3] != cfg.dim {
        return Err(Error::shape(
            "attention",
            format!("token widths {} / {} for model width {}", qd[3], kd[3], cfg.dim),
        ));
    }
    if grouping.softmax_width(kd[0], kd[1], kd[2]) == 0 || kd[..3].contains(&0) {
        return Err(Error::invalid("attention over an empty key set"));
    }
    let (g, _, feat) = grouping.axes();
    for &a in g.iter().chain(feat) {
        if qd[a] != kd[a] {
            return Err(Error::shape(
                "attention",
                format!("queries {:?} and keys {:?} differ on a grouped axis", qd, kd),
            ));
        }
    }

    let qp = project_last(q, proj.query)?;
    let kp = project_last(k, proj.key)?;
    let vp = project_last(v, proj.value)?;
    let (q3, q_perm_shape) = split_heads(qp, grouping, cfg.heads)?;
    let (k3, _) = split_heads(kp, grouping, cfg.heads)?;
    let (v3, _) = split_heads(vp, grouping, cfg.heads)?;

    let width = q3.shape()[2] as f64;
    let weights = q3.bmm_nt(k3)?.scale(1.0 / width.sqrt())?.softmax(2)?;
    let mixed = weights.bmm(v3)?;

    let perm = grouping.permutation();
    let mut inverse = vec![0; perm.len()];
    for (i, &a) in perm.iter().enumerate() {
        inverse[a] = i;
    }
    let merged = mixed
        .reshape(&q_perm_shape)?
        .permute(&inverse)?
        .reshape(&[qd[0], qd[1], qd[2], cfg.dim])?;
    Ok(Attended {
        output: project_last(merged, proj.output)?,
        weights,
    })
}

fn as_grid<'t>(x: Var<'t>, what: &str) -> Result<(Var<'t>, usize)> {
    match x.shape()[..] {
        [n, d] => Ok((x.reshape(&[1, n, 1, d])?, n)),
        ref s => Err(Error::shape("attention", format!("{} must be n×d, got {:?}", what, s))),
    }
}

/// Multi-head frequency attention over flat token lists `n×d`.
pub fn multi_head<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    cfg: AttentionConfig,
    proj: &Projections<'t>,
) -> Result<Attended<'t>> {
    let (qg, nq) = as_grid(q, "queries")?;
    let (kg, _) = as_grid(k, "keys")?;
    let (vg, _) = as_grid(v, "values")?;
    let out = grid_attention(qg, kg, vg, Grouping::Local, cfg, proj)?;
    Ok(Attended {
        output: out.output.reshape(&[nq, cfg.dim])?,
        weights: out.weights,
    })
}

/// Single-band frequency attention: one head spanning the full width.
pub fn freq_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, proj: &Projections<'t>) -> Result<Attended<'t>> {
    let dim = *q.shape().last().ok_or_else(|| Error::shape("freq_attention", "scalar queries"))?;
    multi_head(q, k, v, AttentionConfig::new(dim, 1)?, proj)
}

/// Global frequency attention: whole-plane tokens, an `F×F` matrix per frame.
pub fn gfa<'t>(grid: Var<'t>, cfg: AttentionConfig, proj: &Projections<'t>) -> Result<Attended<'t>> {
    grid_attention(grid, grid, grid, Grouping::Global, cfg, proj)
}

/// Local frequency attention: block tokens, an `FN×FN` matrix per frame.
pub fn lfa<'t>(grid: Var<'t>, cfg: AttentionConfig, proj: &Projections<'t>) -> Result<Attended<'t>> {
    grid_attention(grid, grid, grid, Grouping::Local, cfg, proj)
}

/// A dual-attention branch: learned attention or a pass-through.
#[derive(Clone, Copy, Debug)]
pub enum Branch<'t> {
    Attention(Projections<'t>),
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub struct DualWeights<'t> {
    pub fused: Projections<'t>,
    pub global: Branch<'t>,
    pub local: Branch<'t>,
}

impl<'t> DualWeights<'t> {
    /// Branches missing from the store bind as identities.
    pub fn bind(bound: &BoundParams<'t>, prefix: &str) -> Result<Self> {
        let branch = |name: &str| -> Result<Branch<'t>> {
            let p = format!("{}.{}", prefix, name);
            if bound.contains(&format!("{}.wq", p)) {
                Ok(Branch::Attention(Projections::bind(bound, &p)?))
            } else {
                Ok(Branch::Identity)
            }
        };
        Ok(DualWeights {
            fused: Projections::bind(bound, &format!("{}.fused", prefix))?,
            global: branch("global")?,
            local: branch("local")?,
        })
    }
}

pub fn init_dual(store: &mut ParamStore, prefix: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Result<()> {
    let half = cfg.branch()?.dim;
    init_projections(store, &format!("{}.fused", prefix), cfg.dim, rng);
    init_projections(store, &format!("{}.global", prefix), half, rng);
    init_projections(store, &format!("{}.local", prefix), half, rng);
    Ok(())
}

fn run_branch<'t>(x: Var<'t>, branch: &Branch<'t>, grouping: Grouping, cfg: AttentionConfig) -> Result<Var<'t>> {
    match branch {
        Branch::Identity => Ok(x),
        Branch::Attention(p) => Ok(grid_attention(x, x, x, grouping, cfg, p)?.output),
    }
}

/// Dual frequency attention. Keys and values are each split in half along
/// the feature axis; the first half passes through global attention and the
/// second through local attention, the halves are concatenated back, and
/// the original queries attend to the result under `grouping`.
pub fn dfa<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    grouping: Grouping,
    cfg: AttentionConfig,
    weights: &DualWeights<'t>,
) -> Result<Attended<'t>> {
    let bcfg = cfg.branch()?;
    let half = bcfg.dim;
    let transform = |x: Var<'t>| -> Result<Var<'t>> {
        let g = run_branch(x.slice(3, 0, half)?, &weights.global, Grouping::Global, bcfg)?;
        let l = run_branch(x.slice(3, half, half)?, &weights.local, Grouping::Local, bcfg)?;
        x.tape().concat(&[g, l], 3)
    };
    let k2 = transform(k)?;
    let v2 = transform(v)?;
    grid_attention(q, k2, v2, grouping, cfg, &weights.fused)
}

/// Position-wise feed-forward network `W₂·tanh(W₁x + b₁) + b₂`, hidden
/// width `2d`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> FeedForward<'t> {
    pub fn bind(bound: &BoundParams<'t>, prefix: &str) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{}.{}", prefix, n));
        Ok(FeedForward {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h = project_last(x, self.w1)?.add_broadcast(self.b1)?.tanh()?;
        project_last(h, self.w2)?.add_broadcast(self.b2)
    }
}

pub fn init_feed_forward(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) {
    let hidden = 2 * dim;
    store.insert_uniform(format!("{}.w1", prefix), &[dim, hidden], 1.0 / (dim as f64).sqrt(), rng);
    store.insert_uniform(format!("{}.b1", prefix), &[hidden], 0.0, rng);
    store.insert_uniform(format!("{}.w2", prefix), &[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng);
    store.insert_uniform(format!("{}.b2", prefix), &[dim], 0.0, rng);
}
