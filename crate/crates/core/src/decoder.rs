//! Boundary-aware refinement (BAR) decoder.
//!
//! `BAR_5 .. BAR_2` run coarse to fine. Each block predicts a boundary map
//! from its incoming feature `F_i`, fuses `[ASPP(Z_i), F_i, M_i^b]`, adds
//! `F_i` back, and upsamples to the next stage's resolution. The finest
//! feature goes through `conv(3x3, 1)`, bilinear upsampling to the input
//! resolution and a sigmoid.

use rand::Rng;

use crate::encoder::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Group, ParamStore};
use crate::tensor::{Conv2dArgs, Tape, Var};

/// Dilation rates of the three 3x3 ASPP branches.
pub const ASPP_RATES: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone)]
pub struct BarParams {
    /// 3x3 branches at [`ASPP_RATES`] followed by the 1x1 branch.
    pub aspp_branches: [Conv; 4],
    pub aspp_fuse: Conv,
    pub head: [Conv; 3],
    pub fuse: Conv,
}

impl BarParams {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        let g = Group::Decoder;
        let branch = |store: &mut ParamStore, rng: &mut _, i: usize| {
            let (k, args) = if i < 3 {
                (3, Conv2dArgs::same(3, ASPP_RATES[i]))
            } else {
                (1, Conv2dArgs::default())
            };
            Conv::new(store, &format!("{prefix}.aspp{i}"), g, (width, in_channels, k), args, 2.0, rng)
        };
        let aspp_branches = [
            branch(store, rng, 0),
            branch(store, rng, 1),
            branch(store, rng, 2),
            branch(store, rng, 3),
        ];
        let aspp_fuse = Conv::new(store, &format!("{prefix}.aspp_fuse"), g, (width, 4 * width, 1), Conv2dArgs::default(), 2.0, rng);
        let head = [
            Conv::new(store, &format!("{prefix}.head0"), g, (width, width, 3), Conv2dArgs::same(3, 1), 2.0, rng),
            Conv::new(store, &format!("{prefix}.head1"), g, (width, width, 3), Conv2dArgs::same(3, 1), 1.0, rng),
            Conv::new(store, &format!("{prefix}.head2"), g, (1, width, 1), Conv2dArgs::default(), 1.0, rng),
        ];
        let fuse = Conv::new(store, &format!("{prefix}.fuse"), g, (width, 2 * width + 1, 3), Conv2dArgs::same(3, 1), 2.0, rng);
        Self {
            aspp_branches,
            aspp_fuse,
            head,
            fuse,
        }
    }
}

/// `conv3 -> ReLU -> conv3 -> conv1 -> sigmoid`, one plane out.
pub fn boundary_head(tape: &mut Tape, bound: &Bound, params: &BarParams, f: Var) -> Result<Var> {
    let x = params.head[0].forward(tape, bound, f)?;
    let x = tape.relu(x);
    let x = params.head[1].forward(tape, bound, x)?;
    let x = params.head[2].forward(tape, bound, x)?;
    Ok(tape.sigmoid(x))
}

/// Outputs of the individual ASPP branches, after ReLU.
pub fn aspp_branches(tape: &mut Tape, bound: &Bound, params: &BarParams, z: Var) -> Result<Vec<Var>> {
    params
        .aspp_branches
        .iter()
        .map(|conv| {
            let y = conv.forward(tape, bound, z)?;
            Ok(tape.relu(y))
        })
        .collect()
}

pub fn aspp(tape: &mut Tape, bound: &Bound, params: &BarParams, z: Var) -> Result<Var> {
    let branches = aspp_branches(tape, bound, params, z)?;
    let cat = tape.concat(&branches, 1)?;
    let y = params.aspp_fuse.forward(tape, bound, cat)?;
    Ok(tape.relu(y))
}

/// One BAR block. Returns `(F_{i-1}, M_i^b)`.
pub fn bar_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &BarParams,
    z: Var,
    f: Var,
    factor: usize,
) -> Result<(Var, Var)> {
    let (zs, fs) = (tape.shape(z), tape.shape(f));
    if zs.len() != 4 || fs.len() != 4 || zs[2..] != fs[2..] {
        return Err(Error::shape("bar_forward", format!("Z {zs:?} and F {fs:?} differ spatially")));
    }
    let boundary = boundary_head(tape, bound, params, f)?;
    let context = aspp(tape, bound, params, z)?;
    let cat = tape.concat(&[context, f, boundary], 1)?;
    let fused = params.fuse.forward(tape, bound, cat)?;
    let fused = tape.relu(fused);
    let refined = tape.add(fused, f)?;
    let next = if factor == 1 {
        refined
    } else {
        tape.upsample_bilinear(refined, factor)?
    };
    Ok((next, boundary))
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[1, 1, H, W]` soft mask at input resolution.
    pub mask: Var,
    /// Boundary maps of stages 2..5 (index 0 is `BAR_2`), each `[1, 1, h_i, w_i]`.
    pub boundaries: Vec<Var>,
    /// Finest decoder feature (output of `BAR_2`).
    pub finest: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    bootstrap: Conv,
    bars: Vec<BarParams>,
    mask_head: Conv,
    stage_strides: [usize; 4],
}

impl Decoder {
    /// `stage_channels` are the fused encoder widths `2C_i`.
    pub fn new(
        backbone: &BackboneConfig,
        width: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid("decoder", "width must be positive"));
        }
        let fused = backbone.stage_channels.map(|c| 2 * c);
        let bootstrap = Conv::new(store, "decoder.bootstrap", Group::Decoder, (width, fused[3], 3), Conv2dArgs::same(3, 1), 1.0, rng);
        let bars = (0..4)
            .map(|s| BarParams::new(store, &format!("decoder.bar{}", s + 2), fused[s], width, rng))
            .collect();
        let mask_head = Conv::new(store, "decoder.mask", Group::Decoder, (1, width, 3), Conv2dArgs::same(3, 1), 1.0, rng);
        Ok(Self {
            bootstrap,
            bars,
            mask_head,
            stage_strides: backbone.stage_strides,
        })
    }

    pub fn bar(&self, stage: usize) -> &BarParams {
        &self.bars[stage]
    }

    /// Upsampling factor applied at the end of each BAR (index 0 is `BAR_2`).
    pub fn bar_factors(&self) -> [usize; 4] {
        [1, self.stage_strides[1], self.stage_strides[2], self.stage_strides[3]]
    }

    /// Decodes the bridge outputs `Z_2 .. Z_5`.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, stage_z: &[Var]) -> Result<DecoderOutput> {
        if stage_z.len() != 4 {
            return Err(Error::invalid("decode", format!("expected 4 stage features, got {}", stage_z.len())));
        }
        let factors = self.bar_factors();
        let mut f = self.bootstrap.forward(tape, bound, stage_z[3])?;
        let mut boundaries = vec![None; 4];
        for s in (0..4).rev() {
            let (next, m_b) = bar_forward(tape, bound, &self.bars[s], stage_z[s], f, factors[s])?;
            boundaries[s] = Some(m_b);
            f = next;
        }
        let logits = self.mask_head.forward(tape, bound, f)?;
        let factor = self.stage_strides[0];
        let logits = if factor == 1 {
            logits
        } else {
            tape.upsample_bilinear(logits, factor)?
        };
        Ok(DecoderOutput {
            mask: tape.sigmoid(logits),
            boundaries: boundaries.into_iter().map(|b| b.expect("all stages decoded")).collect(),
            finest: f,
        })
    }
}
