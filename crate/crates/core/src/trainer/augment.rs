//! Horizontal flip and small rotations applied consistently to every plane.

use rand::Rng;

use crate::error::Result;
use crate::grid::Mask;
use crate::synthdata::Sample;
use crate::tensor::Tensor;

/// Flip (about the vertical center line) followed by a rotation about the
/// image center. `apply` maps source coordinates to destination ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialMap {
    pub flip: bool,
    pub angle_deg: f64,
    pub height: usize,
    pub width: usize,
}

impl SpatialMap {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip: false,
            angle_deg: 0.0,
            height,
            width,
        }
    }

    fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Linear part acting on displacement vectors `(dx, dy)`.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let f = if self.flip { -1.0 } else { 1.0 };
        [[c * f, -s], [s * f, c]]
    }

    /// Destination of source point `(x, y)`.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        let x = if self.flip { self.width as f64 - 1.0 - x } else { x };
        if self.angle_deg == 0.0 {
            return (x, y);
        }
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    }

    /// Source point that lands on destination `(x, y)`.
    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        let (x, y) = if self.angle_deg == 0.0 {
            (x, y)
        } else {
            let (s, c) = self.angle_deg.to_radians().sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            (cx + c * dx + s * dy, cy - s * dx + c * dy)
        };
        let x = if self.flip { self.width as f64 - 1.0 - x } else { x };
        (x, y)
    }

    fn is_identity(&self) -> bool {
        !self.flip && self.angle_deg == 0.0
    }

    /// Nearest-neighbour resampling; pixels mapped from outside are background.
    pub fn warp_mask(&self, mask: &Mask) -> Mask {
        if self.is_identity() {
            return mask.clone();
        }
        Mask::from_fn(self.height, self.width, |y, x| {
            let (sx, sy) = self.invert(x as f64, y as f64);
            mask.get_signed(sy.round() as isize, sx.round() as isize)
        })
    }

    /// Bilinear resampling of each `[.., H, W]` plane with edge replication.
    pub fn warp_planes(&self, t: &Tensor) -> Tensor {
        if self.is_identity() {
            return t.clone();
        }
        let (h, w) = (self.height, self.width);
        let planes = t.len() / (h * w);
        let d = t.data();
        let mut out = vec![0.0; t.len()];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.invert(x as f64, y as f64);
                let sx = sx.clamp(0.0, w as f64 - 1.0);
                let sy = sy.clamp(0.0, h as f64 - 1.0);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for p in 0..planes {
                    let plane = &d[p * h * w..(p + 1) * h * w];
                    let v = if fx == 0.0 && fy == 0.0 {
                        plane[y0 * w + x0]
                    } else {
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bot * fy
                    };
                    out[p * h * w + y * w + x] = v;
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out).expect("same extents")
    }

    /// Resamples a `[2, H, W]` flow field and rotates its vectors.
    pub fn warp_flow(&self, flow: &Tensor) -> Tensor {
        if self.is_identity() {
            return flow.clone();
        }
        let moved = self.warp_planes(flow);
        let hw = self.height * self.width;
        let [[a, b], [c, d]] = self.linear();
        let src = moved.data();
        let mut out = vec![0.0; 2 * hw];
        for i in 0..hw {
            let (dx, dy) = (src[i], src[hw + i]);
            out[i] = a * dx + b * dy;
            out[hw + i] = c * dx + d * dy;
        }
        Tensor::new(flow.shape().to_vec(), out).expect("same extents")
    }

    /// Transforms every plane of a sample. Boundary and HEM weights are
    /// rebuilt from the transformed mask and edge map.
    pub fn warp_sample(&self, sample: &Sample, hem_radius: usize) -> Result<Sample> {
        if self.is_identity() {
            return Ok(sample.clone());
        }
        let mut out = Sample {
            frame: self.warp_planes(&sample.frame),
            flow: self.warp_flow(&sample.flow),
            mask: self.warp_mask(&sample.mask),
            boundary: sample.boundary.clone(),
            edge: self.warp_planes(&sample.edge),
            hem: sample.hem.clone(),
        };
        out.refresh_targets(hem_radius)?;
        Ok(out)
    }
}

/// Draws a flip with probability 0.5 (when enabled) and a uniform angle in
/// `[-max_rotation_deg, max_rotation_deg]`.
pub fn random_map(height: usize, width: usize, hflip: bool, max_rotation_deg: f64, rng: &mut impl Rng) -> SpatialMap {
    let flip = hflip && rng.random_bool(0.5);
    let angle_deg = if max_rotation_deg > 0.0 {
        rng.random_range(-max_rotation_deg..=max_rotation_deg)
    } else {
        0.0
    };
    SpatialMap {
        flip,
        angle_deg,
        height,
        width,
    }
}

pub fn augment(sample: &Sample, hflip: bool, max_rotation_deg: f64, hem_radius: usize, rng: &mut impl Rng) -> Result<Sample> {
    let map = random_map(sample.height(), sample.width(), hflip, max_rotation_deg, rng);
    map.warp_sample(sample, hem_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::region_similarity;
    use crate::synthdata::{gen_sequence, SceneSpec};
    use proptest::prelude::*;

    fn sample() -> Sample {
        let spec = SceneSpec {
            num_frames: 1,
            ..SceneSpec::default()
        };
        gen_sequence(&spec).unwrap().remove(0)
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let flip = SpatialMap {
            flip: true,
            ..SpatialMap::identity(64, 64)
        };
        let twice = flip.warp_sample(&flip.warp_sample(&s, 5).unwrap(), 5).unwrap();
        assert_eq!(twice, s);
    }

    #[test]
    fn flip_negates_dx() {
        let s = sample();
        let flip = SpatialMap {
            flip: true,
            ..SpatialMap::identity(64, 64)
        };
        let f = flip.warp_flow(&s.flow);
        let hw = 64 * 64;
        for y in 0..64 {
            for x in 0..64 {
                let src = y * 64 + (63 - x);
                assert_eq!(f.data()[y * 64 + x], -s.flow.data()[src]);
                assert_eq!(f.data()[hw + y * 64 + x], s.flow.data()[hw + src]);
            }
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = sample();
        let m = SpatialMap::identity(64, 64);
        assert_eq!(m.warp_sample(&s, 5).unwrap(), s);
    }

    proptest! {
        #[test]
        fn map_and_inverse_agree(flip: bool, angle in -10.0f64..10.0, x in 0.0f64..63.0, y in 0.0f64..63.0) {
            let m = SpatialMap { flip, angle_deg: angle, height: 64, width: 64 };
            let (dx, dy) = m.apply(x, y);
            let (bx, by) = m.invert(dx, dy);
            prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
        }

        /// The mask warp agrees with an independently transformed coordinate grid.
        #[test]
        fn mask_follows_coordinate_grid(flip: bool, angle in -10.0f64..10.0) {
            let s = sample();
            let m = SpatialMap { flip, angle_deg: angle, height: 64, width: 64 };
            let warped = m.warp_mask(&s.mask);
            let (s_rad, c) = angle.to_radians().sin_cos();
            let grid = Mask::from_fn(64, 64, |y, x| {
                let (dx, dy) = (x as f64 - 31.5, y as f64 - 31.5);
                let sx = 31.5 + c * dx + s_rad * dy;
                let sy = 31.5 - s_rad * dx + c * dy;
                let sx = if flip { 63.0 - sx } else { sx };
                s.mask.get_signed(sy.round() as isize, sx.round() as isize)
            });
            prop_assert_eq!(region_similarity(&warped, &grid).unwrap(), 1.0);
            let again = m.warp_sample(&s, 5).unwrap();
            prop_assert_eq!(region_similarity(&again.mask, &warped).unwrap(), 1.0);
        }

        #[test]
        fn rotation_rotates_uniform_flow(angle in -10.0f64..10.0) {
            let flow = Tensor::new(vec![2, 8, 8], [vec![1.0; 64], vec![0.0; 64]].concat()).unwrap();
            let m = SpatialMap { flip: false, angle_deg: angle, height: 8, width: 8 };
            let r = m.warp_flow(&flow);
            let (s, c) = angle.to_radians().sin_cos();
            prop_assert!((r.data()[0] - c).abs() < 1e-12);
            prop_assert!((r.data()[64] - s).abs() < 1e-12);
        }
    }
}
