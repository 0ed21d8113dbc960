//! Flat binary cache of network training pairs.
//!
//! Header: magic `AGPR`, u16 version, u32 window length, u32 canonical
//! length, u64 pair count. Each record holds the window and canonical
//! values as little-endian f32 followed by the four label values as f64.

use std::fs;
use std::path::Path;

use glimpse_core::approxnet::{GazeUpdate, TrainingPair};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGPR";
pub const VERSION: u16 = 1;

pub fn encode(pairs: &[TrainingPair]) -> std::result::Result<Vec<u8>, String> {
    let (wl, cl) = pairs
        .first()
        .map_or((0, 0), |p| (p.window.len(), p.canonical.len()));
    let mut out = Vec::with_capacity(22 + pairs.len() * (4 * (wl + cl) + 32));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(wl as u32).to_le_bytes());
    out.extend_from_slice(&(cl as u32).to_le_bytes());
    out.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    for p in pairs {
        if p.window.len() != wl || p.canonical.len() != cl {
            return Err("training pairs have inconsistent sizes".into());
        }
        p.window
            .iter()
            .chain(&p.canonical)
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        p.target
            .as_array()
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<TrainingPair>, String> {
    if bytes.len() < 22 || &bytes[..4] != MAGIC {
        return Err("not a training pair cache".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format!("unsupported pair cache version {version}"));
    }
    let u32_at =
        |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (wl, cl) = (u32_at(6), u32_at(10));
    let n = u64::from_le_bytes(bytes[14..22].try_into().expect("8 bytes")) as usize;
    let record = 4 * (wl + cl) + 32;
    if Some(bytes.len() - 22) != n.checked_mul(record) {
        return Err("pair cache length does not match its header".into());
    }
    let f32s = |s: &[u8]| -> Vec<f32> {
        s.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    Ok(bytes[22..]
        .chunks_exact(record)
        .map(|r| {
            let labels: Vec<f64> = r[4 * (wl + cl)..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            TrainingPair {
                window: f32s(&r[..4 * wl]),
                canonical: f32s(&r[4 * wl..4 * (wl + cl)]),
                target: GazeUpdate::from_array([labels[0], labels[1], labels[2], labels[3]]),
            }
        })
        .collect())
}

pub fn write(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let bytes = encode(pairs).map_err(|m| Error::format(path, m))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<TrainingPair>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let pairs: Vec<TrainingPair> = (0..3)
            .map(|i| TrainingPair {
                window: vec![i as f32, 0.5, -1.25],
                canonical: vec![2.0, i as f32 * 0.1],
                target: GazeUpdate::from_array([i as f64, -1.0, 0.01, 0.3]),
            })
            .collect();
        let b = encode(&pairs).unwrap();
        assert_eq!(b.len(), 22 + 3 * (4 * 5 + 32));
        assert_eq!(decode(&b).unwrap(), pairs);
        assert!(decode(&b[..b.len() - 3]).is_err());
        assert!(decode(&encode(&[]).unwrap()).unwrap().is_empty());
    }
}
