//! The recurrent frequency-transformer restoration network.
//!
//! Per output frame:
//! 1. the LR frame is bicubic-upsampled (`bic`) and refined by a small
//!    residual convolution stack (`phi`);
//! 2. the previous hidden state is warped by the frame's flow;
//! 3. `bic`, `phi` and the warped state are moved to frequency tokens and
//!    embedded: queries from `bic`, current keys/values from `phi`, memory
//!    keys/values from the state;
//! 4. the configured attention scheme plus a feed-forward block produce
//!    attended tokens, which are fused with the `phi` tokens into a
//!    spectral correction added back onto `phi`;
//! 5. the state is rebuilt from the last attention stage and the `phi`
//!    tokens.

mod train;

pub use train::{
    charbonnier_loss, cosine_lr, schedule_slot, Adam, Augment, Checkpoint, TrainStep, Trainer, CHARBONNIER_EPS,
};

use std::sync::Arc;

use rand::Rng;

use crate::attention::{init_feed_forward, project_last, AttentionConfig, FeedForward};
use crate::dct::SpectralGeometry;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::params::{BoundParams, ParamStore};
use crate::resample::{frame_dims, resize_map, warp};
use crate::tape::{Tape, Var};
use crate::tensor::{SparseMap, Tensor};
use crate::tokenizer::{TokenLayout, TokenTransform};
use crate::video_attention::{apply_scheme, init_scheme, InnerAttention, Scheme, SchemeKind, SchemeWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub scale: usize,
    pub block: usize,
    pub cells: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden_channels: usize,
    pub phi_width: usize,
    pub scheme: SchemeKind,
    pub attention: InnerAttention,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 4,
            block: 8,
            cells: 4,
            channels: 3,
            dim: 32,
            heads: 4,
            hidden_channels: 16,
            phi_width: 16,
            scheme: SchemeKind::SpaceTime,
            attention: InnerAttention::Fa,
        }
    }
}

const KEYS: [&str; 10] = [
    "scale",
    "block",
    "cells",
    "channels",
    "dim",
    "heads",
    "hidden_channels",
    "phi_width",
    "scheme",
    "attention",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scale", self.scale),
            ("block", self.block),
            ("cells", self.cells),
            ("channels", self.channels),
            ("hidden_channels", self.hidden_channels),
            ("phi_width", self.phi_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{} must be positive", name)));
            }
        }
        let cfg = self.attention_config()?;
        if self.attention == InnerAttention::Dfa {
            cfg.branch()?;
        }
        Ok(())
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.dim, self.heads)
    }

    pub fn scheme(&self) -> Result<Scheme> {
        Ok(Scheme {
            kind: self.scheme,
            inner: self.attention,
            attention: self.attention_config()?,
        })
    }

    /// Width of a pixel-frame token.
    pub fn token_width(&self) -> usize {
        self.channels * self.cells * self.cells
    }

    pub fn hidden_token_width(&self) -> usize {
        self.hidden_channels * self.cells * self.cells
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        let values = [
            self.scale.to_string(),
            self.block.to_string(),
            self.cells.to_string(),
            self.channels.to_string(),
            self.dim.to_string(),
            self.heads.to_string(),
            self.hidden_channels.to_string(),
            self.phi_width.to_string(),
            self.scheme.to_string(),
            self.attention.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            kv.set(k, v);
        }
        kv
    }

    /// Reads every model key present in `kv` over the defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = ModelConfig::default();
        let num = |key: &str, slot: &mut usize| -> Result<()> {
            if kv.get(key).is_some() {
                *slot = kv.parse_value(key)?;
            }
            Ok(())
        };
        num("scale", &mut c.scale)?;
        num("block", &mut c.block)?;
        num("cells", &mut c.cells)?;
        num("channels", &mut c.channels)?;
        num("dim", &mut c.dim)?;
        num("heads", &mut c.heads)?;
        num("hidden_channels", &mut c.hidden_channels)?;
        num("phi_width", &mut c.phi_width)?;
        if let Some(s) = kv.get("scheme") {
            c.scheme = s.parse()?;
        }
        if let Some(s) = kv.get("attention") {
            c.attention = s.parse()?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Fresh parameters. The last convolution of the upsampler and the fusion
/// layer start at zero, so an untrained model returns the bicubic upsample.
pub fn init_params(config: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    config.validate()?;
    let mut s = ParamStore::new();
    let c = config.channels;
    let w = config.phi_width;
    let d = config.dim;
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    s.insert_uniform("phi.conv1.w", &[c * 9, w], bound(c * 9), rng);
    s.insert_uniform("phi.conv1.b", &[w], 0.0, rng);
    s.insert_uniform("phi.conv2.w", &[w * 9, c], 0.0, rng);
    s.insert_uniform("phi.conv2.b", &[c], 0.0, rng);
    let tw = config.token_width();
    let hw = config.hidden_token_width();
    s.insert_uniform("embed.query", &[tw, d], bound(tw), rng);
    s.insert_uniform("embed.key", &[tw, d], bound(tw), rng);
    s.insert_uniform("embed.memory", &[hw, d], bound(hw), rng);
    init_scheme(&mut s, "tsf", &config.scheme()?, rng)?;
    init_feed_forward(&mut s, "ffn", d, rng);
    s.insert_uniform("fuse.w", &[d + tw, tw], 0.0, rng);
    s.insert_uniform("fuse.b", &[tw], 0.0, rng);
    s.insert_uniform("state.w", &[d + tw, hw], bound(d + tw), rng);
    s.insert_uniform("state.b", &[hw], 0.0, rng);
    Ok(s)
}

/// `C×H×W` → `(H·W)×(C·9)` patch matrix for a 3×3 convolution with zero
/// padding.
pub fn im2col_map(channels: usize, h: usize, w: usize) -> Result<SparseMap> {
    let cols = channels * 9;
    SparseMap::from_rows(channels * h * w, h * w * cols, |r, e| {
        let (p, k) = (r / cols, r % cols);
        let (c, tap) = (k / 9, k % 9);
        let y = (p / w) as i64 + (tap / 3) as i64 - 1;
        let x = (p % w) as i64 + (tap % 3) as i64 - 1;
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            e.push(((c * h + y as usize) * w + x as usize, 1.0));
        }
    })
}

/// 3×3 same-size convolution of a `1×C×H×W` input through a prepared
/// patch map. `weight` is `(C·9)×C_out`.
pub fn conv3x3<'t>(x: Var<'t>, patches: &Arc<SparseMap>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let [_, c, h, w] = frame_dims(&x.shape())?;
    let out = weight.shape()[1];
    let cols = x.linear_map(patches, &[h * w, c * 9])?;
    cols.matmul(weight)?
        .add_broadcast(bias)?
        .permute(&[1, 0])?
        .reshape(&[1, out, h, w])
}

/// Fixed operators for one LR frame size.
#[derive(Clone, Debug)]
pub struct FramePlan {
    pub lr_height: usize,
    pub lr_width: usize,
    upsample: Arc<SparseMap>,
    patches_in: Arc<SparseMap>,
    patches_mid: Arc<SparseMap>,
    pixels: TokenTransform,
    hidden: TokenTransform,
}

impl FramePlan {
    pub fn new(config: &ModelConfig, lr_height: usize, lr_width: usize) -> Result<Self> {
        if lr_height == 0 || lr_width == 0 {
            return Err(Error::invalid("LR frames must have positive extents"));
        }
        let (h, w) = (lr_height * config.scale, lr_width * config.scale);
        let c = config.channels;
        let geom = SpectralGeometry::new(1, c, h, w, config.block, config.cells)?;
        let layout = TokenLayout::new(geom, config.cells)?;
        Ok(FramePlan {
            lr_height,
            lr_width,
            upsample: Arc::new(resize_map(c, lr_height, lr_width, h, w, false)?),
            patches_in: Arc::new(im2col_map(c, h, w)?),
            patches_mid: Arc::new(im2col_map(config.phi_width, h, w)?),
            hidden: TokenTransform::new(layout.with_channels(config.hidden_channels))?,
            pixels: TokenTransform::new(layout)?,
        })
    }

    pub fn hr_size(&self) -> (usize, usize) {
        let g = &self.pixels.layout.spectral;
        (g.height, g.width)
    }

    pub fn state_shape(&self) -> [usize; 4] {
        let (h, w) = self.hr_size();
        [1, self.hidden.layout.spectral.channels, h, w]
    }
}

/// Parameters bound onto a tape, grouped by component.
pub struct Network<'t> {
    config: ModelConfig,
    scheme: Scheme,
    params: BoundParams<'t>,
    stages: SchemeWeights<'t>,
    ffn: FeedForward<'t>,
}

/// Output of one recurrent step.
#[derive(Clone, Copy, Debug)]
pub struct FrameOutput<'t> {
    pub sr: Var<'t>,
    pub state: Var<'t>,
    pub bicubic: Var<'t>,
    pub upsampled: Var<'t>,
}

impl<'t> Network<'t> {
    pub fn new(config: &ModelConfig, params: BoundParams<'t>) -> Result<Self> {
        let scheme = config.scheme()?;
        Ok(Network {
            config: *config,
            scheme,
            stages: SchemeWeights::bind(&params, "tsf", &scheme)?,
            ffn: FeedForward::bind(&params, "ffn")?,
            params,
        })
    }

    pub fn bind(config: &ModelConfig, store: &ParamStore, tape: &'t Tape) -> Result<Self> {
        Self::new(config, store.bind(tape)?)
    }

    pub fn params(&self) -> &BoundParams<'t> {
        &self.params
    }

    fn p(&self, name: &str) -> Result<Var<'t>> {
        self.params.get(name)
    }

    /// The learned upsampler: bicubic plus a residual two-layer convolution.
    pub fn upsample(&self, plan: &FramePlan, lr: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let [_, c, _, _] = frame_dims(&lr.shape())?;
        let (h, w) = plan.hr_size();
        let bic = lr.linear_map(&plan.upsample, &[1, c, h, w])?;
        let mid = conv3x3(bic, &plan.patches_in, self.p("phi.conv1.w")?, self.p("phi.conv1.b")?)?.tanh()?;
        let res = conv3x3(mid, &plan.patches_mid, self.p("phi.conv2.w")?, self.p("phi.conv2.b")?)?;
        Ok((bic, bic.add(res)?))
    }

    /// One recurrent step for an LR frame `1×C×H×W` and state `1×C_h×αH×αW`.
    pub fn forward_frame(
        &self,
        plan: &FramePlan,
        lr: Var<'t>,
        state: Var<'t>,
        flow: Option<&Tensor>,
    ) -> Result<FrameOutput<'t>> {
        let shape = lr.shape();
        if shape != [1, self.config.channels, plan.lr_height, plan.lr_width] {
            return Err(Error::shape(
                "forward_frame",
                format!("LR frame {:?} for plan {}×{}", shape, plan.lr_height, plan.lr_width),
            ));
        }
        if state.shape() != plan.state_shape() {
            return Err(Error::shape(
                "forward_frame",
                format!("state {:?}, expected {:?}", state.shape(), plan.state_shape()),
            ));
        }
        let (bic, phi) = self.upsample(plan, lr)?;
        let warped = match flow {
            Some(f) => warp(state, f)?,
            None => state,
        };

        let lr_tokens = plan.pixels.encode(phi)?;
        let query = project_last(plan.pixels.encode(bic)?, self.p("embed.query")?)?;
        let current = project_last(lr_tokens, self.p("embed.key")?)?;
        let memory = project_last(plan.hidden.encode(warped)?, self.p("embed.memory")?)?;

        let attended = apply_scheme(&self.scheme, query, current, memory, &self.stages)?;
        let mixed = attended.combined.add(self.ffn.forward(attended.combined)?)?;

        let tape = lr.tape();
        let fused = project_last(tape.concat(&[mixed, lr_tokens], 3)?, self.p("fuse.w")?)?
            .add_broadcast(self.p("fuse.b")?)?;
        let sr = phi.add(plan.pixels.decode(fused)?)?;

        let state_tokens = project_last(tape.concat(&[attended.last, lr_tokens], 3)?, self.p("state.w")?)?
            .add_broadcast(self.p("state.b")?)?;
        let state = plan.hidden.decode(state_tokens)?;
        Ok(FrameOutput {
            sr,
            state,
            bicubic: bic,
            upsampled: phi,
        })
    }

    /// Left-to-right recurrence over `T×C×H×W` LR frames from a zero state.
    /// `flows`, when given, holds one `2×αH×αW` field per frame.
    pub fn forward_sequence(&self, plan: &FramePlan, lr: Var<'t>, flows: Option<&[Tensor]>) -> Result<Var<'t>> {
        let [t, _, _, _] = frame_dims(&lr.shape())?;
        if t == 0 {
            return Err(Error::invalid("empty LR sequence"));
        }
        if let Some(f) = flows {
            if f.len() != t {
                return Err(Error::invalid(format!("{} flow fields for {} frames", f.len(), t)));
            }
        }
        let tape = lr.tape();
        let mut state = tape.constant(Tensor::zeros(&plan.state_shape()))?;
        let mut outputs = Vec::with_capacity(t);
        for i in 0..t {
            let frame = lr.slice(0, i, 1)?;
            let out = self.forward_frame(plan, frame, state, flows.map(|f| &f[i]))?;
            outputs.push(out.sr);
            state = out.state;
        }
        tape.concat(&outputs, 0)
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Model {
            params: init_params(&config, rng)?,
            config,
        })
    }

    pub fn plan(&self, lr_height: usize, lr_width: usize) -> Result<FramePlan> {
        FramePlan::new(&self.config, lr_height, lr_width)
    }

    /// Inference on `T×C×H×W` LR frames; returns unclipped SR frames.
    pub fn super_resolve(&self, lr: &Tensor, flows: Option<&[Tensor]>) -> Result<Tensor> {
        let [_, c, h, w] = frame_dims(lr.shape())?;
        if c != self.config.channels {
            return Err(Error::shape(
                "super_resolve",
                format!("{} channels for a {}-channel model", c, self.config.channels),
            ));
        }
        let plan = self.plan(h, w)?;
        let tape = Tape::new();
        let net = Network::bind(&self.config, &self.params, &tape)?;
        let out = net.forward_sequence(&plan, tape.constant(lr.clone())?, flows)?;
        Ok(out.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
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

    fn random_frames(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>())
    }

    #[test]
    fn config_round_trips_through_kv() {
        let c = ModelConfig {
            scheme: SchemeKind::Joint,
            attention: InnerAttention::Dfa,
            ..tiny_config()
        };
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut bad = c.to_kv();
        bad.set("heads", 3);
        assert!(ModelConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn im2col_convolution_matches_direct_loops() {
        let (c, h, w, out) = (2, 3, 4, 2);
        let x = random_frames(&[1, c, h, w], 1);
        let wt = random_frames(&[c * 9, out], 2);
        let b = random_frames(&[out], 3);
        let tape = Tape::new();
        let map = Arc::new(im2col_map(c, h, w).unwrap());
        let got = conv3x3(
            tape.constant(x.clone()).unwrap(),
            &map,
            tape.constant(wt.clone()).unwrap(),
            tape.constant(b.clone()).unwrap(),
        )
        .unwrap()
        .value();
        for o in 0..out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (y as i64 + dy - 1, xx as i64 + dx - 1);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                let v = x.get(&[0, ci, sy as usize, sx as usize]).unwrap();
                                acc += v * wt.get(&[ci * 9 + (dy * 3 + dx) as usize, o]).unwrap();
                            }
                        }
                    }
                    assert!((got.get(&[0, o, y, xx]).unwrap() - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn untrained_model_returns_the_upsampled_frame_exactly() {
        let config = tiny_config();
        let model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let plan = model.plan(8, 8).unwrap();
        let tape = Tape::new();
        let net = Network::bind(&config, &model.params, &tape).unwrap();
        let lr = tape.constant(random_frames(&[1, 1, 8, 8], 5)).unwrap();
        let state = tape.constant(random_frames(&plan.state_shape(), 6)).unwrap();
        let out = net.forward_frame(&plan, lr, state, None).unwrap();
        assert_eq!(out.sr.shape(), vec![1, 1, 16, 16]);
        assert_eq!(out.sr.value(), out.upsampled.value());
        assert_eq!(out.upsampled.value(), out.bicubic.value());
    }

    #[test]
    fn constant_frame_upsamples_to_constant() {
        let config = tiny_config();
        let model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let sr = model.super_resolve(&Tensor::full(&[2, 1, 4, 6], 0.4), None).unwrap();
        assert_eq!(sr.shape(), &[2, 1, 8, 12]);
        assert!(sr.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn sequence_of_one_is_forward_frame_and_runs_are_bit_identical() {
        let config = ModelConfig {
            phi_width: 2,
            ..tiny_config()
        };
        let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let lr = random_frames(&[1, 1, 4, 4], 10);
        let seq = model.super_resolve(&lr, None).unwrap();
        let plan = model.plan(4, 4).unwrap();
        let tape = Tape::new();
        let net = Network::bind(&config, &model.params, &tape).unwrap();
        let zero = tape.constant(Tensor::zeros(&plan.state_shape())).unwrap();
        let one = net.forward_frame(&plan, tape.constant(lr.clone()).unwrap(), zero, None).unwrap();
        assert_eq!(seq, one.sr.value());

        let lr3 = random_frames(&[3, 1, 4, 4], 11);
        assert_eq!(model.super_resolve(&lr3, None).unwrap(), model.super_resolve(&lr3, None).unwrap());
        let zeros: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[2, 8, 8])).collect();
        assert_eq!(model.super_resolve(&lr3, Some(&zeros)).unwrap(), model.super_resolve(&lr3, None).unwrap());
    }

    #[test]
    fn every_scheme_and_inner_attention_runs() {
        for kind in SchemeKind::ALL {
            for attention in [InnerAttention::Fa, InnerAttention::Dfa] {
                let config = ModelConfig {
                    scheme: kind,
                    attention,
                    ..tiny_config()
                };
                let model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
                let sr = model.super_resolve(&random_frames(&[2, 1, 4, 4], 13), None).unwrap();
                assert_eq!(sr.shape(), &[2, 1, 8, 8]);
            }
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        assert!(model.super_resolve(&Tensor::zeros(&[0, 1, 4, 4]), None).is_err());
        assert!(model.super_resolve(&Tensor::zeros(&[1, 3, 4, 4]), None).is_err());
        assert!(model.super_resolve(&Tensor::zeros(&[1, 1, 4, 4]), Some(&[])).is_err());
    }
}
