//! Frequency attention over video token grids: space-frequency,
//! time-frequency, joint, and the two divided orderings.
//!
//! Every scheme takes a query grid and key/value grids; keys double as
//! values. In the divided schemes the first stage's output becomes the
//! second stage's queries while keys/values stay the un-attended tokens.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    dfa, grid_attention, init_dual, init_projections, AttentionConfig, DualWeights, Grouping, Projections,
};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    Space,
    Time,
    Joint,
    TimeSpace,
    SpaceTime,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Space,
        SchemeKind::Time,
        SchemeKind::Joint,
        SchemeKind::TimeSpace,
        SchemeKind::SpaceTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Space => "sf",
            SchemeKind::Time => "tf",
            SchemeKind::Joint => "joint",
            SchemeKind::TimeSpace => "ts",
            SchemeKind::SpaceTime => "st",
        }
    }

    pub fn is_divided(self) -> bool {
        matches!(self, SchemeKind::TimeSpace | SchemeKind::SpaceTime)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scheme `{}` (expected sf, tf, joint, ts or st)", s)))
    }
}

/// The attention block used inside every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InnerAttention {
    Fa,
    Dfa,
}

impl InnerAttention {
    pub fn name(self) -> &'static str {
        match self {
            InnerAttention::Fa => "fa",
            InnerAttention::Dfa => "dfa",
        }
    }
}

impl fmt::Display for InnerAttention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InnerAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fa" => Ok(InnerAttention::Fa),
            "dfa" => Ok(InnerAttention::Dfa),
            _ => Err(Error::invalid(format!("unknown attention `{}` (expected fa or dfa)", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub inner: InnerAttention,
    pub attention: AttentionConfig,
}

#[derive(Clone, Copy, Debug)]
pub enum StageWeights<'t> {
    Plain(Projections<'t>),
    Dual(DualWeights<'t>),
}

impl<'t> StageWeights<'t> {
    pub fn bind(bound: &BoundParams<'t>, prefix: &str, inner: InnerAttention) -> Result<Self> {
        Ok(match inner {
            InnerAttention::Fa => StageWeights::Plain(Projections::bind(bound, prefix)?),
            InnerAttention::Dfa => StageWeights::Dual(DualWeights::bind(bound, prefix)?),
        })
    }
}

pub fn init_stage(
    store: &mut ParamStore,
    prefix: &str,
    inner: InnerAttention,
    cfg: AttentionConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    match inner {
        InnerAttention::Fa => init_projections(store, prefix, cfg.dim, rng),
        InnerAttention::Dfa => init_dual(store, prefix, cfg, rng)?,
    }
    Ok(())
}

fn stage<'t>(q: Var<'t>, kv: Var<'t>, grouping: Grouping, cfg: AttentionConfig, w: &StageWeights<'t>) -> Result<Var<'t>> {
    if q.value().numel() == 0 {
        return Err(Error::invalid("attention over an empty token grid"));
    }
    Ok(match w {
        StageWeights::Plain(p) => grid_attention(q, kv, kv, grouping, cfg, p)?.output,
        StageWeights::Dual(d) => dfa(q, kv, kv, grouping, cfg, d)?.output,
    })
}

/// Space-frequency attention: per frame, over the `N·F` block tokens.
pub fn attend_sf<'t>(q: Var<'t>, kv: Var<'t>, cfg: AttentionConfig, w: &StageWeights<'t>) -> Result<Var<'t>> {
    stage(q, kv, Grouping::Local, cfg, w)
}

/// Time-frequency attention: per spatial block, over the `T·F` tokens of
/// that block across frames.
pub fn attend_tf<'t>(q: Var<'t>, kv: Var<'t>, cfg: AttentionConfig, w: &StageWeights<'t>) -> Result<Var<'t>> {
    stage(q, kv, Grouping::Time, cfg, w)
}

/// One attention over all `T·N·F` tokens.
pub fn attend_joint<'t>(q: Var<'t>, kv: Var<'t>, cfg: AttentionConfig, w: &StageWeights<'t>) -> Result<Var<'t>> {
    stage(q, kv, Grouping::Joint, cfg, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    SpaceTime,
    TimeSpace,
}

/// Both stage outputs of a divided scheme.
#[derive(Clone, Copy, Debug)]
pub struct Divided<'t> {
    pub first: Var<'t>,
    pub second: Var<'t>,
}

/// Two-stage attention. The space stage always attends against `space_kv`
/// and the time stage against `time_kv`, whichever runs first.
#[allow(clippy::too_many_arguments)]
pub fn attend_divided<'t>(
    q: Var<'t>,
    space_kv: Var<'t>,
    time_kv: Var<'t>,
    cfg: AttentionConfig,
    order: Order,
    space: &StageWeights<'t>,
    time: &StageWeights<'t>,
) -> Result<Divided<'t>> {
    let (first, second) = match order {
        Order::SpaceTime => {
            let r = attend_sf(q, space_kv, cfg, space)?;
            (r, attend_tf(r, time_kv, cfg, time)?)
        }
        Order::TimeSpace => {
            let r = attend_tf(q, time_kv, cfg, time)?;
            (r, attend_sf(r, space_kv, cfg, space)?)
        }
    };
    Ok(Divided { first, second })
}

/// Stage weights for one scheme, bound under `{prefix}.space`,
/// `{prefix}.time` or `{prefix}.joint`.
#[derive(Clone, Copy, Debug)]
pub struct SchemeWeights<'t> {
    pub space: Option<StageWeights<'t>>,
    pub time: Option<StageWeights<'t>>,
    pub joint: Option<StageWeights<'t>>,
}

fn stage_names(kind: SchemeKind) -> &'static [&'static str] {
    match kind {
        SchemeKind::Space => &["space"],
        SchemeKind::Time => &["time"],
        SchemeKind::Joint => &["joint"],
        SchemeKind::TimeSpace | SchemeKind::SpaceTime => &["space", "time"],
    }
}

impl<'t> SchemeWeights<'t> {
    pub fn bind(bound: &BoundParams<'t>, prefix: &str, scheme: &Scheme) -> Result<Self> {
        let mut w = SchemeWeights {
            space: None,
            time: None,
            joint: None,
        };
        for &name in stage_names(scheme.kind) {
            let sw = Some(StageWeights::bind(bound, &format!("{}.{}", prefix, name), scheme.inner)?);
            match name {
                "space" => w.space = sw,
                "time" => w.time = sw,
                _ => w.joint = sw,
            }
        }
        Ok(w)
    }
}

pub fn init_scheme(store: &mut ParamStore, prefix: &str, scheme: &Scheme, rng: &mut impl Rng) -> Result<()> {
    for &name in stage_names(scheme.kind) {
        init_stage(store, &format!("{}.{}", prefix, name), scheme.inner, scheme.attention, rng)?;
    }
    Ok(())
}

/// Result of running a scheme for one output frame.
#[derive(Clone, Copy, Debug)]
pub struct SchemeOutput<'t> {
    /// What the fusion stage consumes: the sum of both stage outputs for
    /// divided schemes, the single output otherwise.
    pub combined: Var<'t>,
    /// The final stage output, used to update the recurrent state.
    pub last: Var<'t>,
}

/// Runs `scheme` for queries `q` against the current frame's tokens and a
/// memory grid of the same shape. Memory joins the current tokens along the
/// time axis for time-aware stages and along the block axis for a pure
/// space scheme.
pub fn apply_scheme<'t>(
    scheme: &Scheme,
    q: Var<'t>,
    current: Var<'t>,
    memory: Var<'t>,
    w: &SchemeWeights<'t>,
) -> Result<SchemeOutput<'t>> {
    let tape = q.tape();
    let cfg = scheme.attention;
    let missing = |s: &str| Error::invalid(format!("scheme {} has no {} stage weights", scheme.kind, s));
    let single = |out: Var<'t>| SchemeOutput {
        combined: out,
        last: out,
    };
    match scheme.kind {
        SchemeKind::Space => {
            let kv = tape.concat(&[current, memory], 1)?;
            Ok(single(attend_sf(q, kv, cfg, w.space.as_ref().ok_or_else(|| missing("space"))?)?))
        }
        SchemeKind::Time => {
            let kv = tape.concat(&[current, memory], 0)?;
            Ok(single(attend_tf(q, kv, cfg, w.time.as_ref().ok_or_else(|| missing("time"))?)?))
        }
        SchemeKind::Joint => {
            let kv = tape.concat(&[current, memory], 0)?;
            Ok(single(attend_joint(q, kv, cfg, w.joint.as_ref().ok_or_else(|| missing("joint"))?)?))
        }
        SchemeKind::SpaceTime | SchemeKind::TimeSpace => {
            let order = if scheme.kind == SchemeKind::SpaceTime {
                Order::SpaceTime
            } else {
                Order::TimeSpace
            };
            let time_kv = tape.concat(&[current, memory], 0)?;
            let d = attend_divided(
                q,
                current,
                time_kv,
                cfg,
                order,
                w.space.as_ref().ok_or_else(|| missing("space"))?,
                w.time.as_ref().ok_or_else(|| missing("time"))?,
            )?;
            Ok(SchemeOutput {
                combined: d.second.add(d.first)?,
                last: d.second,
            })
        }
    }
}
