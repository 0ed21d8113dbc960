//! Scene manifests: CSV rows `path,lx1,ly1,lx2,ly2,lx3,ly3,subject_id`.
//!
//! Landmarks are left eye, right eye and mouth in canvas pixels; leaving all
//! six empty marks the scene as unlabelled. Relative paths are resolved
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use glimpse_core::data::gaze_from_landmarks;
use glimpse_core::{Gaze, PixelCoord};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub canvas_path: PathBuf,
    pub true_gaze: Option<Gaze>,
    pub subject_id: Option<i64>,
}

pub const HEADER: [&str; 8] = [
    "path",
    "lx1",
    "ly1",
    "lx2",
    "ly2",
    "lx3",
    "ly3",
    "subject_id",
];

pub fn load_dataset(manifest: &Path) -> Result<Vec<ManifestRecord>> {
    if !manifest.is_file() {
        return Err(Error::format(manifest, "manifest not found"));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::format(
            manifest,
            format!("manifest header must be '{}'", HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |msg: String| Error::Row {
            path: manifest.to_path_buf(),
            line,
            msg,
        };
        let path = base.join(&row[0]);
        if row[0].is_empty() || !path.is_file() {
            return Err(fail(format!("image '{}' not found", &row[0])));
        }
        let fields: Vec<&str> = (1..7).map(|i| &row[i]).collect();
        let true_gaze = if fields.iter().all(|f| f.is_empty()) {
            None
        } else {
            let v: Vec<f64> = fields
                .iter()
                .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| fail("landmarks must be six finite numbers or all empty".into()))?;
            let lm = [
                PixelCoord::new(v[0], v[1]),
                PixelCoord::new(v[2], v[3]),
                PixelCoord::new(v[4], v[5]),
            ];
            Some(gaze_from_landmarks(&lm).map_err(|e| fail(e.to_string()))?)
        };
        let subject_id = match &row[7] {
            "" => None,
            s => Some(
                s.parse()
                    .map_err(|_| fail(format!("bad subject_id '{s}'")))?,
            ),
        };
        out.push(ManifestRecord {
            canvas_path: path,
            true_gaze,
            subject_id,
        });
    }
    Ok(out)
}

/// Writes a manifest; labelled scenes get the canonical landmarks mapped
/// through their gaze.
pub fn write_manifest(path: &Path, rows: &[(String, Option<Gaze>, Option<i64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for (file, gaze, subject) in rows {
        let mut rec = vec![file.clone()];
        match gaze {
            Some(g) => {
                for p in glimpse_core::data::CANONICAL_LANDMARKS {
                    let q = g.warp(p);
                    rec.push(q.x.to_string());
                    rec.push(q.y.to_string());
                }
            }
            None => rec.extend(std::iter::repeat(String::new()).take(6)),
        }
        rec.push(subject.map_or(String::new(), |s| s.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
