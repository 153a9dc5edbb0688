//! Binary masks and the morphology used by ground truth, HEM and metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width} from {} values", data.len())));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Pixels of a single-plane tensor strictly above `threshold`.
    pub fn threshold(plane: &Tensor, height: usize, width: usize, threshold: f64) -> Result<Self> {
        if plane.len() != height * width {
            return Err(Error::shape("mask", format!("{:?} is not {height}x{width}", plane.shape())));
        }
        Ok(Self {
            height,
            width,
            data: plane.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds reads are background.
    pub fn get_signed(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.get(y as usize, x as usize)
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width], data).expect("mask extents are positive")
    }

    fn check_dims(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "and", |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "or", |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "and_not", |a, b| a && !b)
    }

    fn zip(&self, other: &Mask, op: &'static str, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        self.check_dims(other, op)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Dilation by the square `(2r+1)x(2r+1)` structuring element.
    pub fn dilate_square(&self, radius: usize) -> Mask {
        self.morph(radius, |_, _| true, true)
    }

    /// Erosion by the square `(2r+1)x(2r+1)` element; outside the frame is background.
    pub fn erode_square(&self, radius: usize) -> Mask {
        self.morph(radius, |_, _| true, false)
    }

    /// Dilation by the Euclidean disc of the given radius.
    pub fn dilate_disc(&self, radius: usize) -> Mask {
        let r2 = (radius * radius) as isize;
        self.morph(radius, move |dy, dx| dy * dy + dx * dx <= r2, true)
    }

    fn morph(&self, radius: usize, inside: impl Fn(isize, isize) -> bool, dilate: bool) -> Mask {
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| inside(dy, dx))
            .collect();
        Mask::from_fn(self.height, self.width, |y, x| {
            let (y, x) = (y as isize, x as isize);
            if dilate {
                offsets.iter().any(|&(dy, dx)| self.get_signed(y + dy, x + dx))
            } else {
                offsets.iter().all(|&(dy, dx)| self.get_signed(y + dy, x + dx))
            }
        })
    }

    /// Integer translation; pixels shifted in from outside are background.
    pub fn translate(&self, dy: isize, dx: isize) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            self.get_signed(y as isize - dy, x as isize - dx)
        })
    }

    /// Max-pool over non-overlapping `factor x factor` cells.
    pub fn downsample_any(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::invalid(
                "downsample",
                format!("{}x{} not divisible by {factor}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        Ok(Mask::from_fn(h, w, |y, x| {
            (0..factor).any(|i| (0..factor).any(|j| self.get(y * factor + i, x * factor + j)))
        }))
    }
}

/// Max-pool of an `[H, W]` plane over `factor x factor` cells.
pub fn downsample_max(plane: &Tensor, factor: usize) -> Result<Tensor> {
    let &[h, w] = plane.shape() else {
        return Err(Error::shape("downsample", format!("expected [H, W], got {:?}", plane.shape())));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid("downsample", format!("{h}x{w} not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![f64::NEG_INFINITY; oh * ow];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y / factor) * ow + x / factor];
            *o = o.max(plane.data()[y * w + x]);
        }
    }
    Tensor::new(vec![oh, ow], out)
}
