//! Binary Netpbm images: 8-bit PGM (P5) and PPM (P6).

use std::fs;
use std::path::Path;

use glimpse_core::Canvas;

use crate::error::{Error, Result};

fn parse_header(bytes: &[u8]) -> std::result::Result<(u8, [usize; 3], usize), String> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err("not a binary PGM/PPM file (expected P5 or P6)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing whitespace after maxval".into());
    }
    Ok((bytes[1], fields, pos + 1))
}

/// Decodes an 8-bit P5/P6 image with values scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> std::result::Result<Canvas, String> {
    let (kind, [w, h, maxval], offset) = parse_header(bytes)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (8-bit images only)"));
    }
    if w == 0 || h == 0 {
        return Err("image must be at least 1x1".into());
    }
    let channels = if kind == b'5' { 1 } else { 3 };
    let n = w * h * channels;
    let raster = bytes.get(offset..offset + n).ok_or("truncated raster")?;
    let mut pixels = vec![0.0; n];
    let plane = w * h;
    for (i, &b) in raster.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        pixels[c * plane + p] = b as f64 / maxval as f64;
    }
    Canvas::new(w, h, channels, pixels).map_err(|e| e.to_string())
}

/// Encodes with maxval 255, rounding half up.
pub fn encode(canvas: &Canvas) -> Vec<u8> {
    let (w, h, c) = (canvas.width(), canvas.height(), canvas.channels());
    let mut out = format!("P{}\n{} {}\n255\n", if c == 1 { 5 } else { 6 }, w, h).into_bytes();
    let q = canvas.quantized();
    let plane = w * h;
    out.reserve(plane * c);
    for p in 0..plane {
        for ch in 0..c {
            out.push(q[ch * plane + p]);
        }
    }
    out
}

pub fn read(path: &Path) -> Result<Canvas> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write(path: &Path, canvas: &Canvas) -> Result<()> {
    fs::write(path, encode(canvas)).map_err(|e| Error::io(path, e))
}

/// Tiles equally sized single-channel patches into a `cols`-wide montage.
pub fn montage(
    patches: &[Vec<f64>],
    width: usize,
    height: usize,
    cols: usize,
) -> glimpse_core::Result<Canvas> {
    let rows = patches.len().div_ceil(cols.max(1)).max(1);
    let (mw, mh) = (cols * width, rows * height);
    let mut px = vec![0.0; mw * mh];
    for (k, p) in patches.iter().enumerate() {
        let (ox, oy) = ((k % cols) * width, (k / cols) * height);
        for y in 0..height {
            for x in 0..width {
                px[(oy + y) * mw + ox + x] = p[y * width + x];
            }
        }
    }
    Canvas::new(mw, mh, 1, px)
}
