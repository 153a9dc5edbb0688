//! Interleaved two-stream encoder.
//!
//! Appearance (RGB) and motion (flow image) each pass through four
//! convolutional stages. After every stage a deep residual MAT block lets
//! motion attention flow into the appearance stream, and the enhanced
//! features (not the raw ones) feed the next stage of both streams.
//!
//! Feature maps carry a leading batch axis of 1: `[1, C, H, W]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Group, ParamId, ParamStore};
use crate::tensor::{Conv2dArgs, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub convs_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 32],
            stage_strides: [2, 2, 2, 1],
            convs_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::invalid("backbone", "stage channels must be positive"));
        }
        if self.stage_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::invalid(
                "backbone",
                format!("stage strides must be 1 or 2, got {:?}", self.stage_strides),
            ));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::invalid("backbone", "convs_per_stage must be >= 1"));
        }
        Ok(())
    }

    /// Cumulative stride at the output of each stage.
    pub fn cumulative_strides(&self) -> [usize; 4] {
        let mut acc = 1;
        self.stage_strides.map(|s| {
            acc *= s;
            acc
        })
    }

    /// Product of all stage strides; input extents must be divisible by it.
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn stage_resolutions(&self, height: usize, width: usize) -> Result<[(usize, usize); 4]> {
        let total = self.total_stride();
        if !height.is_multiple_of(total) || !width.is_multiple_of(total) {
            return Err(Error::shape(
                "encode",
                format!(
                    "input {height}x{width} must be divisible by the backbone stride product {total}"
                ),
            ));
        }
        Ok(self.cumulative_strides().map(|s| (height / s, width / s)))
    }
}

/// Hyper-parameters of the deep MAT block at every stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatConfig {
    /// Number of stacked MAT layers `L`.
    pub layers: usize,
    /// Low-rank reduction ratio `d`.
    pub reduction: usize,
    /// Use `Ũ_a (S^r)^T` instead of `Ũ_a S^r`, making every output position a
    /// convex combination of appearance columns. Off by default.
    pub transposed_transition: bool,
}

impl Default for MatConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            reduction: 8,
            transposed_transition: false,
        }
    }
}

/// Parameters of one MAT layer at `C` channels.
#[derive(Debug, Clone, Copy)]
pub struct MatParams {
    /// `[1, C, 1, 1]` appearance attention kernel.
    pub w_a: ParamId,
    /// `[1, C, 1, 1]` motion attention kernel.
    pub w_m: ParamId,
    /// `[C, C/d]` motion-side factor.
    pub p: ParamId,
    /// `[C, C/d]` appearance-side factor.
    pub q: ParamId,
    pub channels: usize,
    pub reduction: usize,
}

impl MatParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rank = low_rank(channels, reduction)?;
        let kstd = (1.0 / channels as f64).sqrt();
        let w_a = store.add(format!("{prefix}.w_a"), Group::Encoder, Tensor::randn([1, channels, 1, 1], kstd, rng));
        let w_m = store.add(format!("{prefix}.w_m"), Group::Encoder, Tensor::randn([1, channels, 1, 1], kstd, rng));
        let p = store.add(format!("{prefix}.p"), Group::Encoder, Tensor::randn([channels, rank], kstd, rng));
        let q = store.add(format!("{prefix}.q"), Group::Encoder, Tensor::randn([channels, rank], kstd, rng));
        Ok(Self {
            w_a,
            w_m,
            p,
            q,
            channels,
            reduction,
        })
    }

    /// Scalar count of the factors `P` and `Q`, i.e. `2 C^2 / d`.
    pub fn bilinear_params(&self, store: &ParamStore) -> usize {
        store.get(self.p).len() + store.get(self.q).len()
    }
}

/// Rank `C/d` of the factorized bilinear form.
pub fn low_rank(channels: usize, reduction: usize) -> Result<usize> {
    if reduction <= 1 {
        return Err(Error::invalid("mat", format!("reduction ratio must exceed 1, got {reduction}")));
    }
    if !channels.is_multiple_of(reduction) {
        return Err(Error::invalid(
            "mat",
            format!("channels {channels} not divisible by reduction ratio {reduction}"),
        ));
    }
    Ok(channels / reduction)
}

/// Spatial soft attention: `A = softmax_{HW}(w * V)`, `Ũ^c = A ⊙ V^c`.
///
/// Returns `(A [1,1,H,W], Ũ [1,C,H,W])`.
pub fn soft_attention(tape: &mut Tape, v: Var, w: Var) -> Result<(Var, Var)> {
    let (vs, ws) = (tape.shape(v).to_vec(), tape.shape(w).to_vec());
    if vs.len() != 4 || ws != [1, vs[1], 1, 1] {
        return Err(Error::shape(
            "soft_attention",
            format!("features {vs:?} need a [1, {}, 1, 1] kernel, got {ws:?}", vs.get(1).unwrap_or(&0)),
        ));
    }
    let logits = tape.conv2d(v, w, Conv2dArgs::default())?;
    let attention = tape.softmax(logits, &[2, 3])?;
    let attended = tape.mul(v, attention)?;
    Ok((attention, attended))
}

/// Output of the attention transition.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    /// `[1, C, H, W]` transferred appearance feature.
    pub enhanced: Var,
    /// `[HW, HW]` row-normalized affinity `S^r`.
    pub affinity: Var,
}

/// Motion-conditioned attention transition.
///
/// `S = (P^T Ũ_m)^T (Q^T Ũ_a)`, `S^r = softmax_rows(S)`, result `Ũ_a S^r`.
pub fn attention_transition(
    tape: &mut Tape,
    attended_a: Var,
    attended_m: Var,
    p: Var,
    q: Var,
    transposed: bool,
) -> Result<Transition> {
    let shape = tape.shape(attended_a).to_vec();
    if tape.shape(attended_m) != shape.as_slice() || shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(
            "attention_transition",
            format!("appearance {shape:?} vs motion {:?}", tape.shape(attended_m)),
        ));
    }
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    for (name, f) in [("P", p), ("Q", q)] {
        let fs = tape.shape(f);
        if fs.len() != 2 || fs[0] != c {
            return Err(Error::shape("attention_transition", format!("{name} {fs:?} for {c} channels")));
        }
    }
    let ua = tape.reshape(attended_a, &[c, hw])?;
    let um = tape.reshape(attended_m, &[c, hw])?;
    let pt = tape.transpose(p)?;
    let qt = tape.transpose(q)?;
    let pm = tape.matmul(pt, um)?;
    let qa = tape.matmul(qt, ua)?;
    let pm_t = tape.transpose(pm)?;
    let affinity = tape.matmul(pm_t, qa)?;
    let rows = tape.softmax(affinity, &[1])?;
    let mixing = if transposed { tape.transpose(rows)? } else { rows };
    let out = tape.matmul(ua, mixing)?;
    let enhanced = tape.reshape(out, &shape)?;
    Ok(Transition {
        enhanced,
        affinity: rows,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MatLayerOut {
    pub appearance: Var,
    pub motion: Var,
    pub affinity: Var,
}

/// One residual MAT layer:
/// `U_a' = U_a + (A_a ⊙ U_a) S^r`, `U_m' = U_m + A_m ⊙ U_m`.
pub fn mat_layer(
    tape: &mut Tape,
    bound: &Bound,
    params: &MatParams,
    appearance: Var,
    motion: Var,
    transposed: bool,
) -> Result<MatLayerOut> {
    if tape.shape(appearance) != tape.shape(motion) {
        return Err(Error::shape(
            "mat_layer",
            format!("appearance {:?} vs motion {:?}", tape.shape(appearance), tape.shape(motion)),
        ));
    }
    let (_, ua) = soft_attention(tape, appearance, bound.var(params.w_a))?;
    let (_, um) = soft_attention(tape, motion, bound.var(params.w_m))?;
    let t = attention_transition(tape, ua, um, bound.var(params.p), bound.var(params.q), transposed)?;
    Ok(MatLayerOut {
        appearance: tape.add(appearance, t.enhanced)?,
        motion: tape.add(motion, um)?,
        affinity: t.affinity,
    })
}

#[derive(Debug, Clone)]
pub struct DeepMatOut {
    pub appearance: Var,
    pub motion: Var,
    /// `S^r` of every layer, in depth order.
    pub affinities: Vec<Var>,
}

/// Residual stack of MAT layers; `layers` empty means pass-through.
pub fn deep_mat(
    tape: &mut Tape,
    bound: &Bound,
    layers: &[MatParams],
    appearance: Var,
    motion: Var,
    transposed: bool,
) -> Result<DeepMatOut> {
    let mut out = DeepMatOut {
        appearance,
        motion,
        affinities: Vec::with_capacity(layers.len()),
    };
    for params in layers {
        let l = mat_layer(tape, bound, params, out.appearance, out.motion, transposed)?;
        out.appearance = l.appearance;
        out.motion = l.motion;
        out.affinities.push(l.affinity);
    }
    Ok(out)
}

/// Per-stage encoder features.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub v_a: Var,
    pub v_m: Var,
    pub u_a: Var,
    pub u_m: Var,
    /// `Concat(U_a, U_m)` along channels.
    pub fused: Var,
    pub affinities: Vec<Var>,
}

#[derive(Debug, Clone)]
struct Stage {
    appearance: Vec<Conv>,
    motion: Vec<Conv>,
    mat: Vec<MatParams>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: BackboneConfig,
    transposed: bool,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(
        config: &BackboneConfig,
        mat: &MatConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = [3, 3];
        for (s, (&ch, &stride)) in config.stage_channels.iter().zip(&config.stage_strides).enumerate() {
            let mut streams: [Vec<Conv>; 2] = [vec![], vec![]];
            for (k, stream) in ["appearance", "motion"].iter().enumerate() {
                for c in 0..config.convs_per_stage {
                    let (inp, args) = if c == 0 {
                        (in_ch[k], Conv2dArgs::strided(3, stride))
                    } else {
                        (ch, Conv2dArgs::same(3, 1))
                    };
                    let name = format!("encoder.stage{}.{stream}.conv{c}", s + 2);
                    streams[k].push(Conv::new(store, &name, Group::Encoder, (ch, inp, 3), args, 2.0, rng));
                }
                in_ch[k] = ch;
            }
            let mat_layers = (0..mat.layers)
                .map(|l| MatParams::new(store, &format!("encoder.stage{}.mat{l}", s + 2), ch, mat.reduction, rng))
                .collect::<Result<Vec<_>>>()?;
            let [appearance, motion] = streams;
            stages.push(Stage {
                appearance,
                motion,
                mat: mat_layers,
            });
        }
        Ok(Self {
            config: config.clone(),
            transposed: mat.transposed_transition,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn mat_params(&self, stage: usize) -> &[MatParams] {
        &self.stages[stage].mat
    }

    /// Encodes a `[1,3,H,W]` frame and `[1,3,H,W]` flow image.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, frame: Var, flow: Var) -> Result<Vec<StageFeatures>> {
        let (fs, ms) = (tape.shape(frame).to_vec(), tape.shape(flow).to_vec());
        if fs != ms || fs.len() != 4 || fs[0] != 1 || fs[1] != 3 {
            return Err(Error::shape("encode", format!("frame {fs:?} and flow {ms:?} must both be [1, 3, H, W]")));
        }
        self.config.stage_resolutions(fs[2], fs[3])?;
        let (mut a, mut m) = (frame, flow);
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in &stage.appearance {
                let y = conv.forward(tape, bound, a)?;
                a = tape.relu(y);
            }
            for conv in &stage.motion {
                let y = conv.forward(tape, bound, m)?;
                m = tape.relu(y);
            }
            let (v_a, v_m) = (a, m);
            let deep = deep_mat(tape, bound, &stage.mat, v_a, v_m, self.transposed)?;
            let fused = tape.concat(&[deep.appearance, deep.motion], 1)?;
            a = deep.appearance;
            m = deep.motion;
            out.push(StageFeatures {
                v_a,
                v_m,
                u_a: a,
                u_m: m,
                fused,
                affinities: deep.affinities,
            });
        }
        Ok(out)
    }
}
