//! Binary containers for fields and stacks, plus PGM/PPM for inspection.
//!
//! `F2D1`: 4-byte magic, u32 LE height, u32 LE width, then height*width f32 LE
//! values, row-major. `F3D1`: magic, u32 depth, u32 height, u32 width, then
//! depth*height*width f32 values. Masks reuse both containers with every
//! value exactly 0.0 or 1.0. Boundaries are 4-connected and dilation uses the
//! 3x3 square element; see [`super::boundary`] and [`super::dilate`].

use std::fs;
use std::path::Path;

use super::{Field2D, FieldStack, Mask2D, MaskStack};
use crate::error::{Error, Result};

pub const FIELD_MAGIC: &[u8; 4] = b"F2D1";
pub const STACK_MAGIC: &[u8; 4] = b"F3D1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let remaining = self.bytes.len() - self.pos;
        if remaining != n * 4 {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("payload is {remaining} bytes, header implies {}", n * 4),
            });
        }
        let start = self.pos;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in self.bytes[start..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: start + 4 * i,
                    message: "non-finite value".into(),
                });
            }
            out.push(v);
        }
        self.pos = self.bytes.len();
        Ok(out)
    }
}

fn encode_field(f: &Field2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * f.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(f.height() as u32).to_le_bytes());
    out.extend_from_slice(&(f.width() as u32).to_le_bytes());
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_field(bytes: &[u8]) -> Result<Field2D> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(FIELD_MAGIC)?;
    let h = cur.u32("height")?;
    let w = cur.u32("width")?;
    let data = cur.floats(h * w)?;
    Field2D::new(h, w, data)
}

fn field_to_mask(f: &Field2D, base_offset: usize) -> Result<Mask2D> {
    let mut bits = Vec::with_capacity(f.len());
    for (i, &v) in f.data().iter().enumerate() {
        if v == 0.0 {
            bits.push(0);
        } else if v == 1.0 {
            bits.push(1);
        } else {
            return Err(Error::Format {
                offset: base_offset + 4 * i,
                message: format!("mask value {v} is not 0 or 1"),
            });
        }
    }
    Mask2D::new(f.height(), f.width(), bits)
}

pub fn write_field(f: &Field2D, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_field(f))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field2D> {
    decode_field(&read_bytes(path.as_ref())?)
}

pub fn write_mask(m: &Mask2D, path: impl AsRef<Path>) -> Result<()> {
    write_field(&m.to_field(), path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask2D> {
    field_to_mask(&read_field(path)?, 12)
}

fn encode_stack<'a>(slices: impl ExactSizeIterator<Item = &'a Field2D>, h: usize, w: usize) -> Vec<u8> {
    let depth = slices.len();
    let mut out = Vec::with_capacity(16 + 4 * depth * h * w);
    out.extend_from_slice(STACK_MAGIC);
    out.extend_from_slice(&(depth as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for s in slices {
        for v in s.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_stack(bytes: &[u8]) -> Result<Vec<Field2D>> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(STACK_MAGIC)?;
    let d = cur.u32("depth")?;
    let h = cur.u32("height")?;
    let w = cur.u32("width")?;
    if d == 0 {
        return Err(Error::Format {
            offset: 4,
            message: "depth must be >= 1".into(),
        });
    }
    let data = cur.floats(d * h * w)?;
    data.chunks_exact((h * w).max(1))
        .take(d)
        .map(|c| Field2D::new(h, w, c.to_vec()))
        .collect()
}

pub fn write_stack(s: &FieldStack, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = s.shape();
    write_bytes(path.as_ref(), &encode_stack(s.slices().iter(), h, w))
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<FieldStack> {
    FieldStack::new(decode_stack(&read_bytes(path.as_ref())?)?)
}

pub fn write_mask_stack(s: &MaskStack, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = s.shape();
    let fields: Vec<Field2D> = s.slices().iter().map(Mask2D::to_field).collect();
    write_bytes(path.as_ref(), &encode_stack(fields.iter(), h, w))
}

pub fn read_mask_stack(path: impl AsRef<Path>) -> Result<MaskStack> {
    let fields = decode_stack(&read_bytes(path.as_ref())?)?;
    let per = fields[0].len() * 4;
    let masks = fields
        .iter()
        .enumerate()
        .map(|(i, f)| field_to_mask(f, 16 + i * per))
        .collect::<Result<Vec<_>>>()?;
    MaskStack::new(masks)
}

fn pgm_bytes(h: usize, w: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Values clamped to [0, 1] and scaled to 0..=255.
pub fn write_pgm(f: &Field2D, path: impl AsRef<Path>) -> Result<()> {
    let px = f
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    write_bytes(path.as_ref(), &pgm_bytes(f.height(), f.width(), px))
}

/// Min-max normalized to the full 0..=255 range; a constant field maps to 0.
pub fn write_pgm_normalized(f: &Field2D, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&min_max(f), path)
}

fn min_max(f: &Field2D) -> Field2D {
    let lo = f.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = f.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return Field2D::zeros(f.height(), f.width());
    }
    f.map(|v| (v - lo) / span)
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                message: "truncated PGM header".into(),
            });
        }
        tokens.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if tokens[0].1 != "P5" {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad PGM magic {:?}", tokens[0].1),
        });
    }
    let num = |i: usize| -> Result<usize> {
        tokens[i].1.parse().map_err(|_| Error::Format {
            offset: tokens[i].0,
            message: format!("bad PGM header number {:?}", tokens[i].1),
        })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Format {
            offset: tokens[3].0,
            message: format!("unsupported maxval {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(Error::Format {
            offset: pos.min(bytes.len()),
            message: "PGM raster size mismatch".into(),
        });
    }
    Ok((h, w, &bytes[pos..]))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Field2D> {
    let bytes = read_bytes(path.as_ref())?;
    let (h, w, px) = parse_pgm(&bytes)?;
    Field2D::new(h, w, px.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Pixels >= 128 are foreground.
pub fn read_pgm_mask(path: impl AsRef<Path>) -> Result<Mask2D> {
    let bytes = read_bytes(path.as_ref())?;
    let (h, w, px) = parse_pgm(&bytes)?;
    Mask2D::new(h, w, px.iter().map(|&b| (b >= 128) as u8).collect())
}

/// Grayscale image blended with a black-red-yellow-white heat ramp of `heat`
/// (min-max normalized), written as binary PPM.
pub fn write_ppm_heat_overlay(
    image: &Field2D,
    heat: &Field2D,
    path: impl AsRef<Path>,
) -> Result<()> {
    if image.shape() != heat.shape() {
        return Err(Error::shape(image.shape(), heat.shape()));
    }
    let heat = min_max(heat);
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for (&g, &t) in image.data().iter().zip(heat.data()) {
        let g = g.clamp(0.0, 1.0);
        let (r, gg, b) = ramp(t);
        for (base, col) in [(g, r), (g, gg), (g, b)] {
            out.push(((0.5 * base + 0.5 * col) * 255.0).round() as u8);
        }
    }
    write_bytes(path.as_ref(), &out)
}

fn ramp(t: f32) -> (f32, f32, f32) {
    let t = t.clamp(0.0, 1.0) * 3.0;
    if t < 1.0 {
        (t, 0.0, 0.0)
    } else if t < 2.0 {
        (1.0, t - 1.0, 0.0)
    } else {
        (1.0, 1.0, t - 2.0)
    }
}
