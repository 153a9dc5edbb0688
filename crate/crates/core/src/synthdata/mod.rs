//! Procedural clips of a textured shape moving over a textured background.
//!
//! Every frame comes with exact ground truth: the object mask, its 1-px
//! boundary, the analytic forward flow to the next frame, a gradient-magnitude
//! edge map and the HEM weights derived from it.

mod dataset;

pub use dataset::{
    frame_files, load_clip, load_dataset, mask_path, read_dataset_manifest, read_mask, write_clip, write_dataset, write_mask,
    ClipEntry, Split,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::loss::{hem_weights, HemWeightMap, DEFAULT_HEM_RADIUS};
use crate::rng::{hash64, stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Blob];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Blob => "blob",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Largest distance from the center in units of `size`.
    fn reach(self) -> f64 {
        match self {
            ShapeKind::Disc | ShapeKind::Rectangle => 1.0,
            ShapeKind::Blob => 1.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    ValueNoise,
    Stripes,
    Flat,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [TextureKind::ValueNoise, TextureKind::Stripes, TextureKind::Flat];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::ValueNoise => "value_noise",
            TextureKind::Stripes => "stripes",
            TextureKind::Flat => "flat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    /// Radius of a disc, half-width of a rectangle, mean radius of a blob.
    pub size: f64,
    pub texture_amplitude: f64,
    /// Distance between the object's and the background's mean colors.
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpec {
    /// Translation in px per frame.
    pub dx: f64,
    pub dy: f64,
    /// Relative size change per frame.
    pub scale_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSpec {
    pub texture: TextureKind,
    pub amplitude: f64,
    /// Background translation in px per frame.
    pub drift: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub object: ObjectSpec,
    pub motion: MotionSpec,
    pub background: BackgroundSpec,
    pub hem_radius: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            num_frames: 8,
            object: ObjectSpec {
                kind: ShapeKind::Disc,
                size: 12.0,
                texture_amplitude: 0.3,
                contrast: 0.15,
            },
            motion: MotionSpec {
                dx: 2.0,
                dy: 1.0,
                scale_drift: 0.0,
            },
            background: BackgroundSpec {
                texture: TextureKind::ValueNoise,
                amplitude: 0.3,
                drift: (0.0, 0.0),
            },
            hem_radius: DEFAULT_HEM_RADIUS,
        }
    }
}

/// One frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` RGB in [0, 1].
    pub frame: Tensor,
    /// `[2, H, W]` forward flow (dx, dy) in px.
    pub flow: Tensor,
    pub mask: Mask,
    pub boundary: Mask,
    /// `[H, W]` edge probability in [0, 1].
    pub edge: Tensor,
    pub hem: HemWeightMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Network flow input: `[3, H, W]` (dx, dy, magnitude), each min-max
    /// normalized to [0, 1] over the frame.
    pub fn flow_image(&self) -> Tensor {
        encode_flow(&self.flow).0
    }

    /// Recomputes the boundary and HEM weights from mask and edge.
    pub fn refresh_targets(&mut self, hem_radius: usize) -> Result<()> {
        self.boundary = boundary_gt(&self.mask);
        self.hem = hem_weights(&self.edge, &self.mask, hem_radius)?;
        Ok(())
    }
}

/// Per-channel `(min, max)` used by [`encode_flow`].
pub type FlowRanges = [(f64, f64); 3];

/// Flow `[2, H, W]` to the normalized 3-channel image and its ranges.
/// A constant channel maps to 0.
pub fn encode_flow(flow: &Tensor) -> (Tensor, FlowRanges) {
    let hw = flow.len() / 2;
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let d = flow.data();
    let mag: Vec<f64> = (0..hw).map(|i| d[i].hypot(d[hw + i])).collect();
    let planes = [&d[..hw], &d[hw..], &mag[..]];
    let mut out = Vec::with_capacity(3 * hw);
    let mut ranges = [(0.0, 0.0); 3];
    for (c, plane) in planes.iter().enumerate() {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ranges[c] = (lo, hi);
        let span = hi - lo;
        out.extend(plane.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }));
    }
    (Tensor::new(vec![3, h, w], out).expect("flow extents"), ranges)
}

/// 1-px inner boundary: mask pixels with a background 8-neighbour.
pub fn boundary_gt(mask: &Mask) -> Mask {
    mask.and_not(&mask.erode_square(1)).expect("same dimensions")
}

/// Sobel gradient magnitude, max over color channels, normalized by its
/// maximum. Borders replicate; a constant frame gives an all-zero map.
pub fn edge_oracle(frame: &Tensor) -> Tensor {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    let mut out = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            plane[y * w + x]
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
                let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                    - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
                let o = &mut out[y as usize * w + x as usize];
                *o = o.max(gx.hypot(gy));
            }
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 1e-12 {
        out.iter_mut().for_each(|v| *v /= max);
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new(vec![h, w], out).expect("frame extents")
}

/// Smoothly interpolated lattice noise in [-1, 1].
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let lattice = |i: f64, j: f64| {
        let h = hash64(seed ^ hash64((i as i64 as u64).wrapping_mul(0x9E37) ^ (j as i64 as u64).rotate_left(32)));
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let top = lattice(ix, iy) * (1.0 - sx) + lattice(ix + 1.0, iy) * sx;
    let bot = lattice(ix, iy + 1.0) * (1.0 - sx) + lattice(ix + 1.0, iy + 1.0) * sx;
    top * (1.0 - sy) + bot * sy
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    kind: TextureKind,
    seed: u64,
    angle: f64,
    period: f64,
}

impl Texture {
    fn sample(&self, channel: usize, x: f64, y: f64) -> f64 {
        match self.kind {
            TextureKind::Flat => 0.0,
            TextureKind::ValueNoise => {
                let s = hash64(self.seed.wrapping_add(channel as u64));
                0.65 * value_noise(s, x, y, 8.0) + 0.35 * value_noise(s ^ 0xABCD, x, y, 4.0)
            }
            TextureKind::Stripes => {
                let phase = (x * self.angle.cos() + y * self.angle.sin()) / self.period;
                let offset = channel as f64 * 0.7;
                (std::f64::consts::TAU * phase + offset).sin()
            }
        }
    }

    fn random(kind: TextureKind, rng: &mut impl Rng) -> Self {
        Self {
            kind,
            seed: rng.random(),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            period: rng.random_range(5.0..10.0),
        }
    }
}

struct Shape {
    kind: ShapeKind,
    size: f64,
    phases: [f64; 2],
}

impl Shape {
    /// `local` is relative to the center, already divided by the scale.
    fn contains(&self, lx: f64, ly: f64) -> bool {
        match self.kind {
            ShapeKind::Disc => lx * lx + ly * ly <= self.size * self.size,
            ShapeKind::Rectangle => lx.abs() <= self.size && ly.abs() <= 0.7 * self.size,
            ShapeKind::Blob => {
                let theta = ly.atan2(lx);
                let r = self.size
                    * (1.0 + 0.25 * (3.0 * theta + self.phases[0]).sin() + 0.15 * (5.0 * theta + self.phases[1]).cos());
                lx * lx + ly * ly <= r * r
            }
        }
    }
}

/// Feasible start interval for one axis, or `None` if the object cannot stay inside.
fn start_range(extent: f64, len: usize, velocity: f64, frames: usize) -> Option<(f64, f64)> {
    let travel = velocity * (frames.saturating_sub(1)) as f64;
    let lo = extent + (-travel).max(0.0);
    let hi = (len as f64 - 1.0) - extent - travel.max(0.0);
    (lo <= hi).then_some((lo, hi))
}

fn pick_start(rng: &mut impl Rng, (lo, hi): (f64, f64), integral: bool) -> f64 {
    let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if integral && lo.ceil() <= hi.floor() {
        v.round().clamp(lo.ceil(), hi.floor())
    } else {
        v
    }
}

fn validate(spec: &SceneSpec) -> Result<()> {
    if spec.height == 0 || spec.width == 0 || spec.num_frames == 0 {
        return Err(Error::Scene("resolution and frame count must be positive".into()));
    }
    if spec.object.size.is_nan() || spec.object.size <= 0.0 {
        return Err(Error::Scene(format!("object size {} must be positive", spec.object.size)));
    }
    if spec.motion.scale_drift.is_nan() || spec.motion.scale_drift <= -1.0 {
        return Err(Error::Scene(format!("scale drift {} must exceed -1", spec.motion.scale_drift)));
    }
    let finite = [
        spec.object.texture_amplitude,
        spec.object.contrast,
        spec.motion.dx,
        spec.motion.dy,
        spec.background.amplitude,
        spec.background.drift.0,
        spec.background.drift.1,
    ];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err(Error::Scene("non-finite scene parameter".into()));
    }
    Ok(())
}

/// Generates a deterministic clip from `spec`.
pub fn gen_sequence(spec: &SceneSpec) -> Result<Vec<Sample>> {
    validate(spec)?;
    let mut rng = stream(spec.seed, Stream::Scene);
    let (h, w, frames) = (spec.height, spec.width, spec.num_frames);
    let motion = &spec.motion;

    let bg_color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    let obj_color: [f64; 3] = std::array::from_fn(|c| bg_color[c] + spec.object.contrast * dir[c] / norm);
    let bg_tex = Texture::random(spec.background.texture, &mut rng);
    let obj_tex = Texture::random(TextureKind::ValueNoise, &mut rng);
    let shape = Shape {
        kind: spec.object.kind,
        size: spec.object.size,
        phases: [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)],
    };

    let scale_at = |t: usize| (1.0 + motion.scale_drift).powi(t as i32);
    let max_scale = (0..frames).map(scale_at).fold(0.0, f64::max);
    let extent = spec.object.size * spec.object.kind.reach() * max_scale;
    let rx = start_range(extent, w, motion.dx, frames);
    let ry = start_range(extent, h, motion.dy, frames);
    let (Some(rx), Some(ry)) = (rx, ry) else {
        return Err(Error::Scene(format!(
            "object of reach {extent:.1} px moving ({}, {}) px/frame over {frames} frames cannot stay inside {h}x{w}",
            motion.dx, motion.dy
        )));
    };
    let integral = motion.dx.fract() == 0.0 && motion.dy.fract() == 0.0;
    let cx0 = pick_start(&mut rng, rx, integral);
    let cy0 = pick_start(&mut rng, ry, integral);

    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let (cx, cy) = (cx0 + t as f64 * motion.dx, cy0 + t as f64 * motion.dy);
        let scale = scale_at(t);
        let (bdx, bdy) = spec.background.drift;
        let mut frame = vec![0.0; 3 * h * w];
        let mut flow = vec![0.0; 2 * h * w];
        let mut mask = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let (lx, ly) = ((px - cx) / scale, (py - cy) / scale);
                let i = y * w + x;
                if shape.contains(lx, ly) {
                    mask.set(y, x, true);
                    for c in 0..3 {
                        let v = obj_color[c] + spec.object.texture_amplitude * obj_tex.sample(c, lx, ly);
                        frame[c * h * w + i] = v.clamp(0.0, 1.0);
                    }
                    flow[i] = motion.dx + motion.scale_drift * (px - cx);
                    flow[h * w + i] = motion.dy + motion.scale_drift * (py - cy);
                } else {
                    let (sx, sy) = (px - t as f64 * bdx, py - t as f64 * bdy);
                    for c in 0..3 {
                        let v = bg_color[c] + spec.background.amplitude * bg_tex.sample(c, sx, sy);
                        frame[c * h * w + i] = v.clamp(0.0, 1.0);
                    }
                    flow[i] = bdx;
                    flow[h * w + i] = bdy;
                }
            }
        }
        let frame = Tensor::new(vec![3, h, w], frame)?;
        let edge = edge_oracle(&frame);
        let hem = hem_weights(&edge, &mask, spec.hem_radius)?;
        out.push(Sample {
            frame,
            flow: Tensor::new(vec![2, h, w], flow)?,
            boundary: boundary_gt(&mask),
            mask,
            edge,
            hem,
        });
    }
    Ok(out)
}

/// Scene specs for a dataset split: shapes cycle through [`ShapeKind::ALL`],
/// motion directions and sizes vary with the clip index.
pub fn scene_collection(base: &SceneSpec, seed: u64, count: usize) -> Vec<SceneSpec> {
    let mut rng = crate::rng::stream_with(seed, 0x5CE7E);
    (0..count)
        .map(|i| {
            let mut spec = base.clone();
            spec.seed = rng.random();
            spec.object.kind = ShapeKind::ALL[i % 3];
            let speed = base.motion.dx.hypot(base.motion.dy);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            spec.motion.dx = (speed * angle.cos()).round();
            spec.motion.dy = (speed * angle.sin()).round();
            if spec.motion.dx == 0.0 && spec.motion.dy == 0.0 {
                spec.motion.dx = 1.0;
            }
            spec.object.size = base.object.size * rng.random_range(0.75..1.15);
            spec
        })
        .collect()
}
