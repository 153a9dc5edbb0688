//! Scale-sensitive attention (SSA) between encoder and decoder stages.
//!
//! A simplified CBAM (channel excitation, then a 7x7 spatial gate over the
//! per-position channel mean and max) followed by a scalar global gate `g`
//! with an identity skip: `Z = g * Z_cbam + U`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Group, Linear, ParamStore};
use crate::tensor::{pool_and_fc, Activation, Conv2dArgs, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct SsaParams {
    pub channel_fc1: Linear,
    pub channel_fc2: Linear,
    pub spatial: Conv,
    pub global_fc1: Linear,
    pub global_fc2: Linear,
    pub channels: usize,
}

/// Hidden width of the excitation MLPs: `2C / min(16, 2C)`.
pub fn excitation_width(channels: usize) -> usize {
    channels / channels.min(16)
}

impl SsaParams {
    /// `channels` is the fused width `2C`.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("ssa", "zero channels"));
        }
        let hidden = excitation_width(channels);
        let g = Group::Bridge;
        Ok(Self {
            channel_fc1: Linear::new(store, &format!("{prefix}.channel_fc1"), g, (channels, hidden), 2.0, rng),
            channel_fc2: Linear::new(store, &format!("{prefix}.channel_fc2"), g, (hidden, channels), 1.0, rng),
            spatial: Conv::new(store, &format!("{prefix}.spatial"), g, (1, 2, 7), Conv2dArgs::same(7, 1), 1.0, rng),
            global_fc1: Linear::new(store, &format!("{prefix}.global_fc1"), g, (channels, hidden), 1.0, rng),
            global_fc2: Linear::new(store, &format!("{prefix}.global_fc2"), g, (hidden, 1), 1.0, rng),
            channels,
        })
    }
}

fn check_input(tape: &Tape, u: Var, params: &SsaParams, op: &'static str) -> Result<()> {
    let s = tape.shape(u);
    if s.len() != 4 || s[0] != 1 || s[1] != params.channels {
        return Err(Error::shape(op, format!("expected [1, {}, H, W], got {s:?}", params.channels)));
    }
    Ok(())
}

/// Channel excitation vector `e`, shaped `[1, 2C, 1, 1]`.
pub fn channel_gate(tape: &mut Tape, bound: &Bound, params: &SsaParams, u: Var) -> Result<Var> {
    check_input(tape, u, params, "channel_attention")?;
    let e = pool_and_fc(
        tape,
        u,
        &[params.channel_fc1.vars(bound), params.channel_fc2.vars(bound)],
        &[Activation::Relu, Activation::Sigmoid],
    )?;
    tape.reshape(e, &[1, params.channels, 1, 1])
}

/// `Z_c = e ★ U`.
pub fn channel_attention(tape: &mut Tape, bound: &Bound, params: &SsaParams, u: Var) -> Result<Var> {
    let e = channel_gate(tape, bound, params, u)?;
    tape.mul(u, e)
}

/// Spatial gate `p`, shaped `[1, 1, H, W]`.
pub fn spatial_gate(tape: &mut Tape, bound: &Bound, params: &SsaParams, z_c: Var) -> Result<Var> {
    check_input(tape, z_c, params, "spatial_attention")?;
    let mean = tape.mean_axes(z_c, &[1])?;
    let max = tape.max_axes(z_c, &[1])?;
    let descriptor = tape.concat(&[mean, max], 1)?;
    let logits = params.spatial.forward(tape, bound, descriptor)?;
    Ok(tape.sigmoid(logits))
}

/// `Z_cbam = p ⊙ Z_c`.
pub fn spatial_attention(tape: &mut Tape, bound: &Bound, params: &SsaParams, z_c: Var) -> Result<Var> {
    let p = spatial_gate(tape, bound, params, z_c)?;
    tape.mul(z_c, p)
}

/// Scalar gate `g` from the squeeze of `Z_cbam`, shaped `[1, 1, 1, 1]`.
///
/// No activation between the two fully connected layers.
pub fn global_gate(tape: &mut Tape, bound: &Bound, params: &SsaParams, z_cbam: Var) -> Result<Var> {
    let g = pool_and_fc(
        tape,
        z_cbam,
        &[params.global_fc1.vars(bound), params.global_fc2.vars(bound)],
        &[Activation::Identity, Activation::Sigmoid],
    )?;
    tape.reshape(g, &[1, 1, 1, 1])
}

#[derive(Debug, Clone, Copy)]
pub struct SsaOut {
    pub z: Var,
    pub z_cbam: Var,
    pub gate: Var,
}

pub fn ssa_forward(tape: &mut Tape, bound: &Bound, params: &SsaParams, u: Var) -> Result<SsaOut> {
    let z_c = channel_attention(tape, bound, params, u)?;
    let z_cbam = spatial_attention(tape, bound, params, z_c)?;
    let gate = global_gate(tape, bound, params, z_cbam)?;
    let scaled = tape.mul(z_cbam, gate)?;
    let z = tape.add(scaled, u)?;
    Ok(SsaOut { z, z_cbam, gate })
}
