//! Binary PGM (P5), PPM (P6) and PFM readers/writers.
//!
//! Images are channel-first tensors: `3×H×W` for RGB and normals, `1×H×W`
//! for scalar maps. PFM rows are stored bottom-to-top with a negative scale
//! (little-endian), as the format prescribes.

use std::fs;
use std::path::Path;

use super::{RegionMask, IGNORE_ID};
use crate::diffcore::Tensor;
use crate::{Error, Result};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the magic and `n` unsigned header fields of a Netpbm file; returns
/// them plus the payload offset (one whitespace byte after the last field).
fn netpbm_header(bytes: &[u8], path: &Path, n: usize) -> Result<(String, Vec<usize>, usize)> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(n + 1);
    while tokens.len() < n + 1 {
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
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() {
        return Err(Error::format(path, "truncated header"));
    }
    let magic = tokens.remove(0);
    let fields = tokens
        .iter()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad header field {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((magic, fields, pos + 1))
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::format(path, format!("truncated payload: need {len} bytes")))
}

pub fn store_region_mask(mask: &RegionMask, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", mask.width(), mask.height()).into_bytes();
    for &id in mask.ids() {
        out.extend_from_slice(&id.to_be_bytes());
    }
    write(path.as_ref(), &out)
}

/// Loads a 16-bit P5 mask (maxval 65535) and canonicalizes its IDs.
pub fn load_region_mask(path: impl AsRef<Path>) -> Result<RegionMask> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (magic, f, off) = netpbm_header(&bytes, path, 3)?;
    if magic != "P5" {
        return Err(Error::format(path, format!("expected P5, found {magic:?}")));
    }
    let (w, h, maxval) = (f[0], f[1], f[2]);
    if maxval != 65535 {
        return Err(Error::format(
            path,
            format!("region masks need maxval 65535, found {maxval}"),
        ));
    }
    let data = payload(&bytes, off, 2 * w * h, path)?;
    let raw: Vec<u16> = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    RegionMask::from_raw(h, w, &raw).map_err(|e| match e {
        Error::Data(msg) => Error::format(path, msg),
        other => other,
    })
}

/// 8-bit P5 class grid; `255` is written for [`IGNORE_ID`].
pub fn store_gray8_pgm(h: usize, w: usize, values: &[u16], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in values {
        let b = match v {
            IGNORE_ID => 255,
            v if v < 255 => v as u8,
            v => {
                return Err(Error::InvalidArgument(format!(
                    "class {v} does not fit an 8-bit PGM"
                )))
            }
        };
        out.push(b);
    }
    write(path, &out)
}

/// Returns `(h, w, values)`, mapping `255` back to [`IGNORE_ID`].
pub fn load_gray8_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (magic, f, off) = netpbm_header(&bytes, path, 3)?;
    if magic != "P5" {
        return Err(Error::format(path, format!("expected P5, found {magic:?}")));
    }
    let (w, h, maxval) = (f[0], f[1], f[2]);
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("expected maxval 255, found {maxval}"),
        ));
    }
    let data = payload(&bytes, off, w * h, path)?;
    Ok((
        h,
        w,
        data.iter()
            .map(|&b| if b == 255 { IGNORE_ID } else { b as u16 })
            .collect(),
    ))
}

/// 8-bit P6; values in `[0, 1]` are rounded to the nearest of 256 levels.
pub fn store_image_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::InvalidArgument(format!(
            "PPM needs 3 channels, got {c}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let v = image.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push((v[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write(path.as_ref(), &out)
}

pub fn load_image_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (magic, f, off) = netpbm_header(&bytes, path, 3)?;
    if magic != "P6" {
        return Err(Error::format(path, format!("expected P6, found {magic:?}")));
    }
    let (w, h, maxval) = (f[0], f[1], f[2]);
    if maxval != 255 {
        return Err(Error::format(
            path,
            format!("expected maxval 255, found {maxval}"),
        ));
    }
    let data = payload(&bytes, off, 3 * w * h, path)?;
    let mut v = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            v[ch * h * w + p] = data[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], v)
}

fn store_pfm(t: &Tensor, channels: usize, path: &Path) -> Result<()> {
    let (c, h, w) = t.chw()?;
    if c != channels {
        return Err(Error::InvalidArgument(format!(
            "PFM writer expected {channels} channels, got {c}"
        )));
    }
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    let v = t.data();
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(v[(ch * h + y) * w + x] as f32).to_le_bytes());
            }
        }
    }
    write(path, &out)
}

fn load_pfm(path: &Path, channels: usize) -> Result<Tensor> {
    let bytes = read(path)?;
    let mut lines = Vec::with_capacity(3);
    let mut pos = 0;
    while lines.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "truncated PFM header"))?;
        lines.push(
            String::from_utf8_lossy(&bytes[pos..pos + end])
                .trim()
                .to_string(),
        );
        pos += end + 1;
    }
    let want = if channels == 3 { "PF" } else { "Pf" };
    if lines[0] != want {
        return Err(Error::format(
            path,
            format!("expected {want}, found {:?}", lines[0]),
        ));
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::format(path, format!("bad PFM dimensions {:?}", lines[1])))
        })
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::format(
            path,
            format!("bad PFM dimensions {:?}", lines[1]),
        ));
    };
    let scale: f64 = lines[2]
        .parse()
        .map_err(|_| Error::format(path, format!("bad PFM scale {:?}", lines[2])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be non-zero"));
    }
    let data = payload(&bytes, pos, 4 * channels * w * h, path)?;
    let mut v = vec![0.0; channels * h * w];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let f = if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (p, ch) = (i / channels, i % channels);
        let (row, x) = (h - 1 - p / w, p % w);
        v[(ch * h + row) * w + x] = f as f64;
    }
    Tensor::new(vec![channels, h, w], v)
}

/// Single-channel PFM (`Pf`), values stored as `f32`.
pub fn store_scalar_pfm(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    store_pfm(map, 1, path.as_ref())
}

pub fn load_scalar_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    load_pfm(path.as_ref(), 1)
}

/// Three-channel PFM (`PF`), values stored as `f32`.
pub fn store_vec3_pfm(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    store_pfm(map, 3, path.as_ref())
}

pub fn load_vec3_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    load_pfm(path.as_ref(), 3)
}
