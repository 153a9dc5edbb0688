//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt          one `clip <name> <split> <frames>` line per clip
//! <root>/<clip>/manifest.txt   scene spec as key=value, then per-frame
//!                              `frame` file lists and `range` flow ranges
//! <root>/<clip>/frame_000.ppm  RGB frame (P6)
//! <root>/<clip>/flow_000_{dx,dy,mag}.pgm   normalized flow planes (P5)
//! <root>/<clip>/{mask,boundary,edge}_000.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{encode_flow, gen_sequence, Sample, SceneSpec, ShapeKind, TextureKind};
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::loss::hem_weights;
use crate::pnm::{plane_bytes, read_pnm, rgb_bytes, write_pgm, write_ppm};
use crate::tensor::Tensor;

const DATASET_HEADER: &str = "# matnet dataset manifest v1";
const CLIP_HEADER: &str = "# matnet clip manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEntry {
    pub name: String,
    pub split: Split,
    pub frames: usize,
}

pub fn frame_files(t: usize) -> [String; 7] {
    [
        format!("frame_{t:03}.ppm"),
        format!("flow_{t:03}_dx.pgm"),
        format!("flow_{t:03}_dy.pgm"),
        format!("flow_{t:03}_mag.pgm"),
        format!("mask_{t:03}.pgm"),
        format!("boundary_{t:03}.pgm"),
        format!("edge_{t:03}.pgm"),
    ]
}

fn mask_bytes(mask: &Mask) -> Vec<u8> {
    mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect()
}

fn spec_lines(spec: &SceneSpec) -> Vec<String> {
    vec![
        format!("seed={}", spec.seed),
        format!("height={}", spec.height),
        format!("width={}", spec.width),
        format!("frames={}", spec.num_frames),
        format!("object.kind={}", spec.object.kind.name()),
        format!("object.size={:?}", spec.object.size),
        format!("object.texture_amplitude={:?}", spec.object.texture_amplitude),
        format!("object.contrast={:?}", spec.object.contrast),
        format!("motion.dx={:?}", spec.motion.dx),
        format!("motion.dy={:?}", spec.motion.dy),
        format!("motion.scale_drift={:?}", spec.motion.scale_drift),
        format!("background.texture={}", spec.background.texture.name()),
        format!("background.amplitude={:?}", spec.background.amplitude),
        format!("background.drift_x={:?}", spec.background.drift.0),
        format!("background.drift_y={:?}", spec.background.drift.1),
        format!("hem_radius={}", spec.hem_radius),
    ]
}

/// Writes one clip directory; returns the file names written.
pub fn write_clip(dir: &Path, spec: &SceneSpec, samples: &[Sample]) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut manifest = vec![CLIP_HEADER.to_string()];
    manifest.extend(spec_lines(spec));
    let mut written = Vec::new();
    for (t, s) in samples.iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        let files = frame_files(t);
        let (flow_img, ranges) = encode_flow(&s.flow);
        write_ppm(&dir.join(&files[0]), w, h, &rgb_bytes(&s.frame))?;
        for c in 0..3 {
            let plane = Tensor::new(vec![h, w], flow_img.data()[c * h * w..(c + 1) * h * w].to_vec())?;
            write_pgm(&dir.join(&files[1 + c]), w, h, &plane_bytes(&plane))?;
        }
        write_pgm(&dir.join(&files[4]), w, h, &mask_bytes(&s.mask))?;
        write_pgm(&dir.join(&files[5]), w, h, &mask_bytes(&s.boundary))?;
        write_pgm(&dir.join(&files[6]), w, h, &plane_bytes(&s.edge))?;
        manifest.push(format!("frame {t} {}", files.join(" ")));
        let r: Vec<String> = ranges.iter().flat_map(|(lo, hi)| [format!("{lo:?}"), format!("{hi:?}")]).collect();
        manifest.push(format!("range {t} {}", r.join(" ")));
        written.extend(files);
    }
    fs::write(dir.join("manifest.txt"), manifest.join("\n") + "\n")?;
    written.push("manifest.txt".into());
    Ok(written)
}

/// Generates and writes every clip; returns total frames written.
pub fn write_dataset(root: &Path, clips: &[(ClipEntry, SceneSpec)]) -> Result<usize> {
    fs::create_dir_all(root)?;
    let mut manifest = vec![DATASET_HEADER.to_string()];
    let mut total = 0;
    for (entry, spec) in clips {
        let samples = gen_sequence(spec)?;
        write_clip(&root.join(&entry.name), spec, &samples)?;
        manifest.push(format!("clip {} {} {}", entry.name, entry.split.name(), samples.len()));
        total += samples.len();
    }
    fs::write(root.join("manifest.txt"), manifest.join("\n") + "\n")?;
    Ok(total)
}

pub fn read_dataset_manifest(root: &Path) -> Result<Vec<ClipEntry>> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(DATASET_HEADER) {
        return Err(Error::format(&path, "missing dataset manifest header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                ["clip", name, split, frames] => Split::parse(split)
                    .zip(frames.parse().ok())
                    .map(|(split, frames)| ClipEntry {
                        name: name.to_string(),
                        split,
                        frames,
                    }),
                _ => None,
            };
            parsed.ok_or_else(|| Error::format(&path, format!("line {}: malformed clip entry {line:?}", i + 2)))
        })
        .collect()
}

/// Loads every clip of `root` whose split matches (all when `None`).
pub fn load_dataset(root: &Path, split: Option<Split>) -> Result<Vec<(ClipEntry, Vec<Sample>)>> {
    read_dataset_manifest(root)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| {
            let (_, samples) = load_clip(&root.join(&e.name))?;
            if samples.len() != e.frames {
                return Err(Error::format(
                    root.join(&e.name),
                    format!("manifest lists {} frames, clip has {}", e.frames, samples.len()),
                ));
            }
            Ok((e, samples))
        })
        .collect()
}

type FrameEntry = ([String; 7], [(f64, f64); 3]);

struct ClipManifest {
    spec: SceneSpec,
    frames: Vec<FrameEntry>,
}

fn parse_clip_manifest(path: &Path) -> Result<ClipManifest> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(CLIP_HEADER) {
        return Err(Error::format(path, "missing clip manifest header"));
    }
    let mut spec = SceneSpec::default();
    let mut files: Vec<Option<[String; 7]>> = Vec::new();
    let mut ranges: Vec<Option<[(f64, f64); 3]>> = Vec::new();
    let bad = |i: usize, what: &str| Error::format(path, format!("line {}: {what}", i + 1));
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("frame ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let t: usize = parts.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad(i, "frame index"))?;
            let names: [String; 7] = parts[1..]
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .try_into()
                .map_err(|_| bad(i, "expected 7 file names"))?;
            if files.len() <= t {
                files.resize(t + 1, None);
            }
            files[t] = Some(names);
            continue;
        }
        if let Some(rest) = line.strip_prefix("range ") {
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(i, "flow range value")))
                .collect::<Result<_>>()?;
            if vals.len() != 7 {
                return Err(bad(i, "expected index and 6 range values"));
            }
            let t = vals[0] as usize;
            if ranges.len() <= t {
                ranges.resize(t + 1, None);
            }
            ranges[t] = Some([(vals[1], vals[2]), (vals[3], vals[4]), (vals[5], vals[6])]);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| bad(i, "expected key=value"))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(i, "number"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad(i, "integer"));
        match key {
            "seed" => spec.seed = value.parse().map_err(|_| bad(i, "seed"))?,
            "height" => spec.height = int(value)?,
            "width" => spec.width = int(value)?,
            "frames" => spec.num_frames = int(value)?,
            "object.kind" => spec.object.kind = ShapeKind::parse(value).ok_or_else(|| bad(i, "shape kind"))?,
            "object.size" => spec.object.size = num(value)?,
            "object.texture_amplitude" => spec.object.texture_amplitude = num(value)?,
            "object.contrast" => spec.object.contrast = num(value)?,
            "motion.dx" => spec.motion.dx = num(value)?,
            "motion.dy" => spec.motion.dy = num(value)?,
            "motion.scale_drift" => spec.motion.scale_drift = num(value)?,
            "background.texture" => {
                spec.background.texture = TextureKind::parse(value).ok_or_else(|| bad(i, "texture kind"))?
            }
            "background.amplitude" => spec.background.amplitude = num(value)?,
            "background.drift_x" => spec.background.drift.0 = num(value)?,
            "background.drift_y" => spec.background.drift.1 = num(value)?,
            "hem_radius" => spec.hem_radius = int(value)?,
            _ => return Err(bad(i, &format!("unknown key {key:?}"))),
        }
    }
    if files.len() != ranges.len() {
        return Err(Error::format(path, "frame and range entries disagree"));
    }
    let frames = files
        .into_iter()
        .zip(ranges)
        .enumerate()
        .map(|(t, (f, r))| f.zip(r).ok_or_else(|| Error::format(path, format!("frame {t} incomplete"))))
        .collect::<Result<_>>()?;
    Ok(ClipManifest { spec, frames })
}

fn read_plane(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = read_pnm(path)?;
    if img.channels != 1 || img.height != h || img.width != w {
        return Err(Error::format(path, format!("expected {w}x{h} P5, got {}x{} with {} channels", img.width, img.height, img.channels)));
    }
    img.to_planar().reshape(vec![h, w])
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = read_pnm(path)?;
    if img.channels != 1 {
        return Err(Error::format(path, "mask must be single-plane P5"));
    }
    let half = img.maxval / 2;
    Mask::from_vec(img.height, img.width, img.data.iter().map(|&v| u16::from(v) > half).collect())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm(path, mask.width(), mask.height(), &mask_bytes(mask))
}

/// Reads one frame's network inputs: `[3, H, W]` RGB and `[2, H, W]` flow.
fn read_inputs(dir: &Path, files: &[String; 7], ranges: &[(f64, f64); 3], h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let path = dir.join(&files[0]);
    let img = read_pnm(&path)?;
    if img.channels != 3 || img.height != h || img.width != w {
        return Err(Error::format(&path, format!("expected {w}x{h} P6")));
    }
    let frame = img.to_planar();
    let mut flow = Vec::with_capacity(2 * h * w);
    for c in 0..2 {
        let plane = read_plane(&dir.join(&files[1 + c]), h, w)?;
        let (lo, hi) = ranges[c];
        flow.extend(plane.data().iter().map(|&q| lo + q * (hi - lo)));
    }
    Ok((frame, Tensor::new(vec![2, h, w], flow)?))
}

/// Loads a clip written by [`write_clip`]. Flow is reconstructed from the
/// quantized planes and stored ranges; HEM weights are recomputed.
pub fn load_clip(dir: &Path) -> Result<(SceneSpec, Vec<Sample>)> {
    let manifest = parse_clip_manifest(&dir.join("manifest.txt"))?;
    let (h, w) = (manifest.spec.height, manifest.spec.width);
    let mut missing = Vec::new();
    for (files, _) in &manifest.frames {
        for f in files {
            if !dir.join(f).is_file() {
                missing.push(dir.join(f).display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let samples = manifest
        .frames
        .iter()
        .map(|(files, ranges)| {
            let (frame, flow) = read_inputs(dir, files, ranges, h, w)?;
            let mask = read_mask(&dir.join(&files[4]))?;
            let boundary = read_mask(&dir.join(&files[5]))?;
            let edge = read_plane(&dir.join(&files[6]), h, w)?;
            let hem = hem_weights(&edge, &mask, manifest.spec.hem_radius)?;
            Ok(Sample {
                frame,
                flow,
                mask,
                boundary,
                edge,
                hem,
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest.spec, samples))
}

/// Path of the mask file for frame `t` under a clip directory.
pub fn mask_path(clip_dir: &Path, t: usize) -> PathBuf {
    clip_dir.join(format!("mask_{t:03}.pgm"))
}
