//! CSV outputs.

use std::path::Path;

use glimpse_core::bench::{BenchSummary, CurvePoint};
use glimpse_core::em::EmRound;
use glimpse_core::hmc::HmcTrace;
use glimpse_core::Gaze;

use crate::error::{Error, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// `iter,a,b,dx,dy,U,accepted`. Approximate steps come first with
/// `accepted = approx`.
pub fn write_trace(path: &Path, approx: &[(Gaze, f64)], trace: &HmcTrace) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "a", "b", "dx", "dy", "U", "accepted"])?;
    let mut iter = 0;
    for (g, u) in approx {
        iter += 1;
        let [a, b, dx, dy] = g.as_array();
        w.write_record([
            iter.to_string(),
            a.to_string(),
            b.to_string(),
            dx.to_string(),
            dy.to_string(),
            u.to_string(),
            "approx".into(),
        ])?;
    }
    for ((g, u), acc) in trace
        .samples
        .iter()
        .zip(&trace.potentials)
        .zip(&trace.accept_flags)
    {
        iter += 1;
        let [a, b, dx, dy] = g.as_array();
        w.write_record([
            iter.to_string(),
            a.to_string(),
            b.to_string(),
            dx.to_string(),
            dy.to_string(),
            u.to_string(),
            (*acc as u8).to_string(),
        ])?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scene_id: String,
    pub gaze: Gaze,
    pub iou: Option<f64>,
    pub final_u: Option<f64>,
    pub accept_rate: Option<f64>,
}

/// `scene_id,a,b,dx,dy,iou,final_U,accept_rate`.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "scene_id",
        "a",
        "b",
        "dx",
        "dy",
        "iou",
        "final_U",
        "accept_rate",
    ])?;
    for r in rows {
        let [a, b, dx, dy] = r.gaze.as_array();
        w.write_record([
            r.scene_id.clone(),
            a.to_string(),
            b.to_string(),
            dx.to_string(),
            dy.to_string(),
            opt(r.iou),
            opt(r.final_u),
            opt(r.accept_rate),
        ])?;
    }
    finish(w, path)
}

/// `set,n,mean_nats,stderr`.
pub fn write_bounds(path: &Path, rows: &[(String, usize, f64, f64)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["set", "n", "mean_nats", "stderr"])?;
    for (set, n, mean, se) in rows {
        w.write_record([set.clone(), n.to_string(), mean.to_string(), se.to_string()])?;
    }
    finish(w, path)
}

/// `round,n_samples,mean_iou,heldout_bound_nats,stderr`.
pub fn write_em_report(path: &Path, rounds: &[EmRound]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "round",
        "n_samples",
        "mean_iou",
        "heldout_bound_nats",
        "stderr",
    ])?;
    for r in rounds {
        w.write_record([
            r.round.to_string(),
            r.n_samples.to_string(),
            opt(r.mean_iou),
            opt(r.heldout_bound),
            opt(r.stderr),
        ])?;
    }
    finish(w, path)
}

/// `offset,success_rate,mean_iou,n`.
pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["offset", "success_rate", "mean_iou", "n"])?;
    for p in points {
        w.write_record([
            p.offset.to_string(),
            p.success_rate.to_string(),
            p.mean_iou.to_string(),
            p.n.to_string(),
        ])?;
    }
    finish(w, path)
}

/// Per-scene benchmark rows: `scene_id,offset,init_offset,a,b,dx,dy,iou,success`.
pub fn write_bench_rows(path: &Path, ids: &[String], summary: &BenchSummary) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "scene_id",
        "offset",
        "init_offset",
        "a",
        "b",
        "dx",
        "dy",
        "iou",
        "success",
    ])?;
    for (p, point) in summary.points.iter().enumerate() {
        for (i, (r, g)) in summary.results[p].iter().zip(&summary.gazes[p]).enumerate() {
            let [a, b, dx, dy] = g.as_array();
            w.write_record([
                ids[i].clone(),
                point.offset.to_string(),
                r.init_offset.to_string(),
                a.to_string(),
                b.to_string(),
                dx.to_string(),
                dy.to_string(),
                r.iou.to_string(),
                (r.success as u8).to_string(),
            ])?;
        }
    }
    finish(w, path)
}
