//! The assembled network: encoder, per-stage bridge and BAR decoder.

use crate::bridge::{ssa_forward, SsaParams};
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{BackboneConfig, Encoder, MatConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::loss::{stage_targets, total_loss, BoundarySupervision, LossParts};
use crate::params::{Bound, ParamStore};
use crate::rng::{stream, Stream};
use crate::synthdata::Sample;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mat: MatConfig,
    /// Without SSA the bridge is the identity, `Z_i = U_i`.
    pub use_ssa: bool,
    pub decoder_width: usize,
    pub supervision: BoundarySupervision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            mat: MatConfig::default(),
            use_ssa: true,
            decoder_width: 16,
            supervision: BoundarySupervision::default(),
        }
    }
}

impl ModelConfig {
    /// Two channels per stage, one MAT layer with `d = 2`.
    pub fn micro() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: [2, 2, 2, 2],
                stage_strides: [2, 2, 2, 1],
                convs_per_stage: 1,
            },
            mat: MatConfig {
                layers: 1,
                reduction: 2,
                transposed_transition: false,
            },
            use_ssa: true,
            decoder_width: 4,
            supervision: BoundarySupervision::default(),
        }
    }
}

/// Everything a forward pass records, for inspection and losses.
#[derive(Debug, Clone)]
pub struct Forward {
    pub stages: Vec<StageFeatures>,
    /// Bridge outputs `Z_2 .. Z_5`.
    pub bridged: Vec<Var>,
    /// Global gates `g` per stage, when SSA is on.
    pub gates: Vec<Var>,
    pub decoder: DecoderOutput,
}

#[derive(Debug, Clone)]
pub struct MatNet {
    config: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    bridge: Option<Vec<SsaParams>>,
    decoder: Decoder,
}

impl MatNet {
    /// Builds a freshly initialized network from the `Init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config.backbone, &config.mat, &mut store, &mut rng)?;
        let bridge = if config.use_ssa {
            let stages = config
                .backbone
                .stage_channels
                .iter()
                .enumerate()
                .map(|(s, &c)| SsaParams::new(&mut store, &format!("bridge.stage{}", s + 2), 2 * c, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Some(stages)
        } else {
            None
        };
        let decoder = Decoder::new(&config.backbone, config.decoder_width, &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            bridge,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn bridge(&self) -> Option<&[SsaParams]> {
        self.bridge.as_deref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Replaces the parameters with tensors of identical names and shapes.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        let (a, b) = (self.store.entries(), store.entries());
        if a.len() != b.len() {
            return Err(Error::invalid("load", format!("{} tensors, model has {}", b.len(), a.len())));
        }
        for (x, y) in a.iter().zip(b) {
            if x.name != y.name || x.tensor.shape() != y.tensor.shape() || x.group != y.group {
                return Err(Error::invalid(
                    "load",
                    format!("tensor {} {:?} does not match model tensor {} {:?}", y.name, y.tensor.shape(), x.name, x.tensor.shape()),
                ));
            }
        }
        self.store = store;
        Ok(())
    }

    /// Forward pass on `[3, H, W]` frame and flow image.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, frame: &Tensor, flow_image: &Tensor) -> Result<Forward> {
        let lift = |t: &Tensor, what: &str| {
            let s = t.shape();
            if s.len() != 3 || s[0] != 3 {
                return Err(Error::shape("forward", format!("{what} must be [3, H, W], got {s:?}")));
            }
            t.clone().reshape(vec![1, 3, s[1], s[2]])
        };
        let a = tape.constant(lift(frame, "frame")?);
        let m = tape.constant(lift(flow_image, "flow")?);
        self.forward_vars(tape, bound, a, m)
    }

    /// Forward pass on `[1, 3, H, W]` tape variables.
    pub fn forward_vars(&self, tape: &mut Tape, bound: &Bound, frame: Var, flow: Var) -> Result<Forward> {
        let stages = self.encoder.encode(tape, bound, frame, flow)?;
        let mut bridged = Vec::with_capacity(4);
        let mut gates = Vec::new();
        for (s, f) in stages.iter().enumerate() {
            match &self.bridge {
                Some(ssa) => {
                    let out = ssa_forward(tape, bound, &ssa[s], f.fused)?;
                    bridged.push(out.z);
                    gates.push(out.gate);
                }
                None => bridged.push(f.fused),
            }
        }
        let decoder = self.decoder.decode(tape, bound, &bridged)?;
        Ok(Forward {
            stages,
            bridged,
            gates,
            decoder,
        })
    }

    /// Total loss of one sample, given the sample's inputs and targets.
    pub fn sample_loss(&self, tape: &mut Tape, bound: &Bound, sample: &Sample) -> Result<LossParts> {
        let fwd = self.forward(tape, bound, &sample.frame, &sample.flow_image())?;
        self.loss_of(tape, &fwd, sample)
    }

    pub fn loss_of(&self, tape: &mut Tape, fwd: &Forward, sample: &Sample) -> Result<LossParts> {
        let strides = self.config.backbone.cumulative_strides();
        let targets = stage_targets(&sample.boundary, &sample.hem, &strides, self.config.supervision)?;
        let boundaries = match self.config.supervision {
            BoundarySupervision::DownsampleTargets => fwd.decoder.boundaries.clone(),
            BoundarySupervision::UpsamplePredictions => fwd
                .decoder
                .boundaries
                .iter()
                .zip(strides)
                .map(|(&b, s)| if s == 1 { Ok(b) } else { tape.upsample_bilinear(b, s) })
                .collect::<Result<_>>()?,
        };
        total_loss(tape, fwd.decoder.mask, &sample.mask.to_tensor(), &boundaries, &targets)
    }

    /// Soft mask `[H, W]` for one frame.
    pub fn predict(&self, frame: &Tensor, flow_image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let fwd = self.forward(&mut tape, &bound, frame, flow_image)?;
        let mask = tape.value(fwd.decoder.mask);
        let s = mask.shape();
        mask.clone().reshape(vec![s[2], s[3]])
    }

    /// Binds parameters as untracked constants (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound::new(self.store.entries().iter().map(|e| tape.constant(e.tensor.clone())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_sequence, SceneSpec};

    #[test]
    fn micro_forward_shapes() {
        let net = MatNet::new(ModelConfig::micro(), 3).unwrap();
        let spec = SceneSpec {
            height: 16,
            width: 16,
            num_frames: 1,
            object: crate::synthdata::ObjectSpec {
                size: 4.0,
                ..SceneSpec::default().object
            },
            ..SceneSpec::default()
        };
        let s = &gen_sequence(&spec).unwrap()[0];
        let mut tape = Tape::new();
        let bound = net.store.bind(&mut tape);
        let fwd = net.forward(&mut tape, &bound, &s.frame, &s.flow_image()).unwrap();
        assert_eq!(tape.shape(fwd.decoder.mask), &[1, 1, 16, 16]);
        let ext: Vec<_> = fwd.decoder.boundaries.iter().map(|&b| tape.shape(b)[2]).collect();
        assert_eq!(ext, vec![8, 4, 2, 2]);
        let loss = net.loss_of(&mut tape, &fwd, s).unwrap();
        assert!(tape.value(loss.total).data()[0].is_finite());
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let net = MatNet::new(ModelConfig::micro(), 0).unwrap();
        let t = Tensor::zeros([3, 18, 18]);
        let err = net.predict(&t, &t).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn no_ssa_has_fewer_params() {
        let on = MatNet::new(ModelConfig::micro(), 0).unwrap();
        let off = MatNet::new(
            ModelConfig {
                use_ssa: false,
                ..ModelConfig::micro()
            },
            0,
        )
        .unwrap();
        assert!(off.store.numel() < on.store.numel());
        assert!(off.bridge().is_none());
    }
}
