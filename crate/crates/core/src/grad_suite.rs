//! The finite-difference suite: every differentiable operation, the
//! attention variants and schemes, and the full tiny model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dfa, freq_attention, gfa, init_dual, init_feed_forward, lfa, multi_head, AttentionConfig, Branch, DualWeights,
    FeedForward, Grouping, Projections,
};
use crate::dct::{BlockDct, SpectralGeometry, SpectralTransform};
use crate::error::Result;
use crate::gradcheck::{check, project, random_tensor, GradCheckConfig, GradCheckReport};
use crate::model::{charbonnier_loss, conv3x3, im2col_map, init_params, ModelConfig, Network, CHARBONNIER_EPS};
use crate::params::{BoundParams, ParamStore};
use crate::resample::{resize_map, warp};
use crate::tape::{Backward, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenLayout, TokenTransform};
use crate::video_attention::{attend_divided, attend_joint, attend_sf, attend_tf, InnerAttention, Order, SchemeKind, StageWeights};

fn rand(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn projections<'t>(v: &[Var<'t>]) -> Projections<'t> {
    Projections {
        query: v[0],
        key: v[1],
        value: v[2],
        output: v[3],
    }
}

fn projection_inputs(dim: usize, seed: u64) -> Vec<Tensor> {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4).map(|_| random_tensor(&[dim, dim], -bound, bound, &mut rng)).collect()
}

fn store_tensors(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

/// The tiny full-model configuration: one channel, ×2, 2×2 DCT blocks,
/// 2×2 block cells, divided space-then-time attention.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        scale: 2,
        block: 2,
        cells: 2,
        channels: 1,
        dim: 4,
        heads: 2,
        hidden_channels: 2,
        phi_width: 3,
        scheme: SchemeKind::SpaceTime,
        attention: InnerAttention::Fa,
    }
}

/// Full-model check: every parameter (re-drawn at random so zero-initialised
/// paths are exercised) and the LR input, `T = 2`, 16×16 LR frames.
///
/// The redraw gain of 1.5 keeps attention logits away from the flat regime.
/// Below about 1, query/key gradients of the second stage fall to ~1e-8,
/// where central-difference roundoff alone exceeds the relative tolerance.
pub fn full_model_check(config: &ModelConfig, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut store = init_params(config, &mut rng)?;
    for (_, t) in store.iter_mut() {
        let bound = 1.5 / (t.shape()[0] as f64).sqrt();
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    }
    let (names, mut inputs) = store_tensors(&store);
    let lr_shape = [2, config.channels, 16, 16];
    inputs.push(random_tensor(&lr_shape, 0.0, 1.0, &mut rng));
    let hr = random_tensor(&[2, config.channels, 16 * config.scale, 16 * config.scale], 0.0, 1.0, &mut rng);
    let plan = crate::model::FramePlan::new(config, 16, 16)?;
    let n = names.len();
    check(
        &format!("model[{} {}]", config.scheme, config.attention),
        &inputs,
        |tape, v| {
            let net = Network::new(config, BoundParams::from_vars(names.iter().cloned(), &v[..n])?)?;
            let sr = net.forward_sequence(&plan, v[n], None)?;
            charbonnier_loss(sr, tape.constant(hr.clone())?, CHARBONNIER_EPS)
        },
        cfg,
    )
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig::default();
    let wanted = |name: &str| filter.is_none_or(|f| name.contains(f));
    let mut out = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            if wanted($name) {
                out.push(check($name, &$inputs, $f, cfg)?);
            }
        };
    }

    case!("add/sub/mul", [rand(&[3, 4], 1), rand(&[3, 4], 2)], |_, v| {
        project(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?, 3)
    });
    case!("add_broadcast", [rand(&[2, 3, 4], 4), rand(&[4], 5)], |_, v| project(v[0].add_broadcast(v[1])?, 6));
    case!("scale/add_scalar", [rand(&[5], 7)], |_, v| project(v[0].scale(-1.7)?.add_scalar(0.3)?, 8));
    case!("square/sqrt", [positive(&[6], 9)], |_, v| project(v[0].square()?.add(v[0].sqrt()?)?, 10));
    case!("tanh", [rand(&[6], 11)], |_, v| project(v[0].tanh()?, 12));
    case!("matmul", [rand(&[3, 4], 13), rand(&[4, 2], 14)], |_, v| project(v[0].matmul(v[1])?, 15));
    case!("bmm", [rand(&[2, 3, 4], 16), rand(&[2, 4, 2], 17)], |_, v| project(v[0].bmm(v[1])?, 18));
    case!("bmm_nt", [rand(&[2, 3, 4], 19), rand(&[2, 5, 4], 20)], |_, v| project(v[0].bmm_nt(v[1])?, 21));
    case!("softmax", [rand(&[2, 3, 4], 22)], |_, v| {
        project(v[0].softmax(2)?.add(v[0].softmax(1)?)?, 23)
    });
    case!("reshape/permute", [rand(&[2, 3, 4], 24)], |_, v| {
        project(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?, 25)
    });
    case!("slice/concat", [rand(&[4, 3], 26), rand(&[2, 3], 27)], |tape, v| {
        project(tape.concat(&[v[1], v[0].slice(0, 1, 2)?], 0)?, 28)
    });
    case!("sum/mean/sum_axis", [rand(&[3, 4], 29)], |_, v| {
        let s = v[0].sum_axis(0)?.square()?.sum()?;
        s.add(v[0].mean()?.square()?)
    });

    let dct = BlockDct::new(4)?;
    case!("dct2/idct2", [rand(&[4, 4], 30)], |_, v| {
        project(dct.dct2_var(v[0])?.add(dct.idct2_var(v[0])?)?, 31)
    });
    let spectral = SpectralTransform::new(SpectralGeometry::new(2, 2, 6, 5, 2, 1)?)?;
    case!("spectral map", [rand(&[2, 2, 6, 5], 32)], |_, v| {
        let s = spectral.to_spectral(v[0])?;
        project(s, 33)?.add(project(spectral.from_spectral(s.scale(0.5)?)?, 34)?)
    });
    let tokens = TokenTransform::new(TokenLayout::new(SpectralGeometry::new(2, 1, 8, 8, 2, 2)?, 2)?)?;
    case!("tokenize/detokenize", [rand(&[2, 1, 8, 8], 35)], |_, v| {
        let t = tokens.encode(v[0])?;
        project(t, 36)?.add(project(tokens.decode(t.tanh()?)?, 37)?)
    });

    let a4 = AttentionConfig::new(4, 2)?;
    let mut inputs = projection_inputs(4, 38);
    inputs.extend([rand(&[3, 4], 39), rand(&[5, 4], 40), rand(&[5, 4], 41)]);
    case!("freq_attention", inputs, |_, v| {
        project(freq_attention(v[4], v[5], v[6], &projections(v))?.output, 42)
    });
    case!("multi_head", inputs, |_, v| project(multi_head(v[4], v[5], v[6], a4, &projections(v))?.output, 43));
    let mut grid_inputs = projection_inputs(4, 44);
    grid_inputs.push(rand(&[2, 2, 4, 4], 45));
    case!("gfa", grid_inputs, |_, v| project(gfa(v[4], a4, &projections(v))?.output, 46));
    case!("lfa", grid_inputs, |_, v| project(lfa(v[4], a4, &projections(v))?.output, 47));

    let mut dual = ParamStore::new();
    init_dual(&mut dual, "d", a4, &mut ChaCha8Rng::seed_from_u64(48))?;
    let (_, mut dual_inputs) = store_tensors(&dual);
    dual_inputs.push(rand(&[1, 2, 4, 4], 49));
    case!("dfa", dual_inputs, |_, v| {
        let w = DualWeights {
            fused: projections(&v[0..4]),
            global: Branch::Attention(projections(&v[4..8])),
            local: Branch::Attention(projections(&v[8..12])),
        };
        project(dfa(v[12], v[12], v[12], Grouping::Local, a4, &w)?.output, 50)
    });

    let mut stage_inputs = projection_inputs(4, 51);
    stage_inputs.extend(projection_inputs(4, 52));
    stage_inputs.push(rand(&[2, 2, 2, 4], 53));
    type Stage = for<'t> fn(Var<'t>, Var<'t>, AttentionConfig, &StageWeights<'t>) -> Result<Var<'t>>;
    let stages: [(&str, Stage); 3] = [
        ("attend_sf", attend_sf),
        ("attend_tf", attend_tf),
        ("attend_joint", attend_joint),
    ];
    for (name, f) in stages {
        case!(name, stage_inputs, |_, v| {
            project(f(v[8], v[8], a4, &StageWeights::Plain(projections(v)))?, 54)
        });
    }
    for (name, order) in [("attend_divided[st]", Order::SpaceTime), ("attend_divided[ts]", Order::TimeSpace)] {
        case!(name, stage_inputs, |_, v| {
            let (s, t) = (StageWeights::Plain(projections(&v[0..4])), StageWeights::Plain(projections(&v[4..8])));
            project(attend_divided(v[8], v[8], v[8], a4, order, &s, &t)?.second, 55)
        });
    }

    let mut ffn = ParamStore::new();
    init_feed_forward(&mut ffn, "f", 4, &mut ChaCha8Rng::seed_from_u64(56));
    let (_, mut ffn_inputs) = store_tensors(&ffn);
    for t in ffn_inputs.iter_mut().skip(1).step_by(2) {
        *t = rand(t.shape(), 57);
    }
    ffn_inputs.push(rand(&[2, 3, 4], 58));
    case!("feed_forward", ffn_inputs, |_, v| {
        let f = FeedForward {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        };
        project(f.forward(v[4])?, 59)
    });

    let up = Arc::new(resize_map(2, 4, 5, 8, 10, false)?);
    case!("bicubic", [rand(&[1, 2, 4, 5], 60)], |_, v| project(v[0].linear_map(&up, &[1, 2, 8, 10])?, 61));
    let flow = random_tensor(&[2, 5, 5], -1.5, 1.5, &mut ChaCha8Rng::seed_from_u64(62));
    case!("warp", [rand(&[1, 2, 5, 5], 63)], |_, v| project(warp(v[0], &flow)?, 64));
    let patches = Arc::new(im2col_map(2, 4, 5)?);
    case!("conv3x3", [rand(&[1, 2, 4, 5], 65), rand(&[18, 3], 66), rand(&[3], 67)], |_, v| {
        project(conv3x3(v[0], &patches, v[1], v[2])?, 68)
    });
    case!("charbonnier", [rand(&[2, 1, 3, 3], 69), rand(&[2, 1, 3, 3], 70)], |_, v| {
        charbonnier_loss(v[0], v[1], CHARBONNIER_EPS)
    });

    if wanted("model") {
        out.push(full_model_check(&tiny_model_config(), cfg)?);
    }
    Ok(out)
}

/// Self-test of the checker: an operation whose adjoint rule is off by 10%
/// must be reported as failing.
pub fn corrupted_rule_check() -> Result<GradCheckReport> {
    check(
        "corrupted square rule",
        &[rand(&[4], 71)],
        |tape, v| {
            let value = v[0].value().map(|x| x * x);
            let backward: Backward = Box::new(|g, inputs, _, _| {
                vec![Some(g.iter().zip(inputs[0].data()).map(|(g, x)| 2.2 * x * g).collect())]
            });
            let sq = tape.custom("bad_square", &[v[0]], value, backward)?;
            project(sq, 72)
        },
        GradCheckConfig::default(),
    )
}
