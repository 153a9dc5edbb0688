//! Hard-example-mined boundary loss and the total training objective.

use crate::error::{Error, Result};
use crate::grid::{downsample_max, Mask};
use crate::tensor::{Tape, Tensor, Var};

/// Clip applied to predictions inside the logarithms.
pub const CLIP_EPS: f64 = 1e-7;
/// Edge probability above which a pixel outside the dilated mask is hard.
pub const HEM_EDGE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_HEM_RADIUS: usize = 5;

/// Per-pixel boundary-loss weights: `1 + E_k` on hard negatives, else 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HemWeightMap {
    pub weights: Tensor,
}

impl HemWeightMap {
    pub fn uniform(height: usize, width: usize) -> Self {
        Self {
            weights: Tensor::full([height, width], 1.0),
        }
    }
}

pub fn hem_weights(edge: &Tensor, mask: &Mask, dilation_radius: usize) -> Result<HemWeightMap> {
    let (h, w) = mask.dims();
    if edge.shape() != [h, w] {
        return Err(Error::shape("hem_weights", format!("edge {:?} vs mask {h}x{w}", edge.shape())));
    }
    if let Some(bad) = edge.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("hem_weights", format!("edge value {bad} outside [0, 1]")));
    }
    let region = mask.dilate_disc(dilation_radius);
    let weights = edge
        .data()
        .iter()
        .zip(region.data())
        .map(|(&e, &inside)| if e > HEM_EDGE_THRESHOLD && !inside { 1.0 + e } else { 1.0 })
        .collect();
    Ok(HemWeightMap {
        weights: Tensor::new(vec![h, w], weights)?,
    })
}

fn as_pred_shape(tape: &Tape, pred: Var, t: &Tensor, what: &str) -> Result<Tensor> {
    let shape = tape.shape(pred).to_vec();
    if t.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("loss", format!("{what} {:?} vs prediction {shape:?}", t.shape())));
    }
    t.clone().reshape(shape)
}

/// Weighted binary cross-entropy of a boundary map, averaged over pixels.
pub fn boundary_loss(tape: &mut Tape, pred: Var, target: &Tensor, weights: &HemWeightMap) -> Result<Var> {
    if target.shape() != weights.weights.shape() {
        return Err(Error::shape(
            "boundary_loss",
            format!("target {:?} vs weights {:?}", target.shape(), weights.weights.shape()),
        ));
    }
    let t = as_pred_shape(tape, pred, target, "boundary target")?;
    let w = as_pred_shape(tape, pred, &weights.weights, "weights")?;
    tape.bce(pred, &t, &w, CLIP_EPS)
}

/// Pixel-mean binary cross-entropy of the segmentation mask.
pub fn mask_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = as_pred_shape(tape, pred, target, "mask target")?;
    let w = Tensor::full(t.shape().to_vec(), 1.0);
    tape.bce(pred, &t, &w, CLIP_EPS)
}

/// Boundary target at the resolution of one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTarget {
    pub boundary: Tensor,
    pub weights: HemWeightMap,
}

/// How full-resolution boundary ground truth meets stage-resolution predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundarySupervision {
    /// Max-pool `G^b` and `w` down to each stage.
    #[default]
    DownsampleTargets,
    /// Bilinearly upsample each `M_i^b` to full resolution.
    UpsamplePredictions,
}

impl BoundarySupervision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "downsample" => Some(Self::DownsampleTargets),
            "upsample" => Some(Self::UpsamplePredictions),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::DownsampleTargets => "downsample",
            Self::UpsamplePredictions => "upsample",
        }
    }
}

/// Boundary targets for predictions at the given cumulative strides.
pub fn stage_targets(
    boundary: &Mask,
    weights: &HemWeightMap,
    strides: &[usize],
    mode: BoundarySupervision,
) -> Result<Vec<BoundaryTarget>> {
    strides
        .iter()
        .map(|&s| match mode {
            BoundarySupervision::UpsamplePredictions => Ok(BoundaryTarget {
                boundary: boundary.to_tensor(),
                weights: weights.clone(),
            }),
            BoundarySupervision::DownsampleTargets => Ok(BoundaryTarget {
                boundary: boundary.downsample_any(s)?.to_tensor(),
                weights: HemWeightMap {
                    weights: downsample_max(&weights.weights, s)?,
                },
            }),
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub boundary: Var,
}

/// `L = L_CE(M^s, G^s) + (1/4) Σ_i L_bdry(M_i^b, G^b)`.
pub fn total_loss(
    tape: &mut Tape,
    mask: Var,
    mask_target: &Tensor,
    boundaries: &[Var],
    targets: &[BoundaryTarget],
) -> Result<LossParts> {
    if boundaries.len() != 4 || targets.len() != 4 {
        return Err(Error::invalid(
            "total_loss",
            format!("expected 4 boundary maps and targets, got {} and {}", boundaries.len(), targets.len()),
        ));
    }
    let ce = mask_loss(tape, mask, mask_target)?;
    let mut sum = None;
    for (&pred, target) in boundaries.iter().zip(targets) {
        let l = boundary_loss(tape, pred, &target.boundary, &target.weights)?;
        sum = Some(match sum {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let boundary = tape.scale(sum.expect("four terms"), 0.25);
    let total = tape.add(ce, boundary)?;
    Ok(LossParts { total, ce, boundary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(tape: &mut Tape, m: f64) -> Var {
        tape.param(Tensor::new(vec![1, 1, 1, 1], vec![m]).unwrap())
    }

    #[test]
    fn hem_three_cases() {
        let mut mask = Mask::empty(1, 30);
        mask.set(0, 0, true);
        let edge = Tensor::new(vec![1, 30], {
            let mut e = vec![0.0; 30];
            e[20] = 0.5; // far outside
            e[25] = 0.1; // below threshold
            e[2] = 0.9; // inside the dilated region
            e
        })
        .unwrap();
        let w = hem_weights(&edge, &mask, 5).unwrap();
        assert_eq!(w.weights.data()[20], 1.5);
        assert_eq!(w.weights.data()[25], 1.0);
        assert_eq!(w.weights.data()[2], 1.0);
    }

    #[test]
    fn hem_rejects_out_of_range_edges() {
        let edge = Tensor::new(vec![1, 2], vec![0.5, 1.2]).unwrap();
        assert!(hem_weights(&edge, &Mask::empty(1, 2), 1).is_err());
    }

    #[test]
    fn boundary_loss_single_pixel() {
        let mut tape = Tape::new();
        let m = single(&mut tape, 0.5);
        let g = Tensor::full([1, 1], 1.0);
        let l1 = boundary_loss(&mut tape, m, &g, &HemWeightMap::uniform(1, 1)).unwrap();
        let two = HemWeightMap {
            weights: Tensor::full([1, 1], 2.0),
        };
        let l2 = boundary_loss(&mut tape, m, &g, &two).unwrap();
        let (a, b) = (tape.value(l1).data()[0], tape.value(l2).data()[0]);
        assert!((a - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let g = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = boundary_loss(&mut tape, pred, &g, &HemWeightMap::uniform(2, 2)).unwrap();
        assert!(tape.value(l).data()[0] <= 2.0 * CLIP_EPS * 4.0);
    }

    #[test]
    fn total_loss_requires_four_maps() {
        let mut tape = Tape::new();
        let m = single(&mut tape, 0.5);
        let g = Tensor::full([1, 1], 1.0);
        let t = BoundaryTarget {
            boundary: g.clone(),
            weights: HemWeightMap::uniform(1, 1),
        };
        let err = total_loss(&mut tape, m, &g, &[m, m, m], &[t.clone(), t.clone(), t]);
        assert!(err.is_err());
    }

    #[test]
    fn total_loss_of_constant_half_predictions() {
        let mut tape = Tape::new();
        let pred = tape.param(Tensor::full([1, 1, 2, 2], 0.5));
        let g = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let t = BoundaryTarget {
            boundary: g.clone(),
            weights: HemWeightMap::uniform(2, 2),
        };
        let parts = total_loss(&mut tape, pred, &g, &[pred; 4], &vec![t; 4]).unwrap();
        let total = tape.value(parts.total).data()[0];
        assert!((total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}
