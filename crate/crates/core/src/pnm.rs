//! Binary Netpbm images: P5 (grayscale) and P6 (RGB), 8-bit samples.
//! <https://netpbm.sourceforge.net/doc/pgm.html>

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_pnm(path, b"P5", width, height, 1, data)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_pnm(path, b"P6", width, height, 3, data)
}

fn write_pnm(path: &Path, magic: &[u8], width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::format(
            path,
            format!("{} samples for {width}x{height}x{channels}", data.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    write!(w, "\n{width} {height}\n255\n")?;
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_pnm(&bytes).map_err(|detail| Error::format(path, detail))
}

pub fn parse_pnm(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM (expected P5 or P6 magic)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may sit between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("malformed header at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("header value too large at byte {start}"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("truncated raster: need {need} bytes, have {}", bytes.len() - pos))?;
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data: raster.to_vec(),
    })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[H, W]` plane in [0, 1] to 8-bit samples.
pub fn plane_bytes(plane: &Tensor) -> Vec<u8> {
    plane.data().iter().map(|&v| quantize(v)).collect()
}

/// Planar `[3, H, W]` tensor to interleaved RGB bytes.
pub fn rgb_bytes(frame: &Tensor) -> Vec<u8> {
    let hw = frame.len() / 3;
    let d = frame.data();
    (0..hw)
        .flat_map(|i| [quantize(d[i]), quantize(d[hw + i]), quantize(d[2 * hw + i])])
        .collect()
}

impl PnmImage {
    /// Samples scaled to [0, 1], planar `[channels, H, W]`.
    pub fn to_planar(&self) -> Tensor {
        let hw = self.width * self.height;
        let scale = f64::from(self.maxval);
        let mut out = vec![0.0; hw * self.channels];
        for (i, &v) in self.data.iter().enumerate() {
            out[(i % self.channels) * hw + i / self.channels] = f64::from(v) / scale;
        }
        Tensor::new(vec![self.channels, self.height, self.width], out).expect("extents checked at parse")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_header_with_comment() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend([7, 200]);
        let img = parse_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![7, 200]);
    }

    #[test]
    fn rejects_ascii_and_truncated() {
        assert!(parse_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pnm(b"P6\n2 2\n255\n\x00\x01").is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let data: Vec<u8> = (0..18).collect();
        write_ppm(&path, 3, 2, &data).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.data, data);
        let planar = img.to_planar();
        assert_eq!(planar.shape(), &[3, 2, 3]);
        assert_eq!(rgb_bytes(&planar), data);
    }
}
