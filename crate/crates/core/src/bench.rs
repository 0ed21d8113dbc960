//! Localization benchmarks: IOU, sliding-window baselines and accuracy curves.

use alloc::string::String;
use alloc::vec::Vec;

use crate::approxnet::ApproxNetParams;
use crate::gdbn::GdbnModel;
use crate::geom::{convex_iou, gaze_quad};
use crate::infer::{infer_from, InferenceSchedule, InferenceState};
use crate::math::{cos, sin, sqrt};
use crate::rng;
use crate::warp::{extract_patch, Gaze, Patch, PatchGrid};
use crate::{Canvas, Error, PixelCoord, Result};

pub const SUCCESS_IOU: f64 = 0.5;

/// IOU of the two warped patch footprints.
pub fn gaze_iou(pred: &Gaze, truth: &Gaze, grid: &PatchGrid) -> f64 {
    if !pred.is_valid() || !truth.is_valid() {
        return 0.0;
    }
    convex_iou(&gaze_quad(pred, grid), &gaze_quad(truth, grid))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouResult {
    pub iou: f64,
    pub success: bool,
    pub init_offset: f64,
}

impl IouResult {
    pub fn new(iou: f64, init_offset: f64) -> Self {
        Self {
            iou,
            success: iou > SUCCESS_IOU,
            init_offset,
        }
    }
}

/// Output of a localizer on one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub gaze: Gaze,
    pub score: f64,
    /// Candidate windows scored (baselines) or network passes (inference).
    pub evaluations: usize,
}

/// The canvas resampled by `1/scale`, so that a template at native size
/// matches objects `scale` times larger.
fn rescaled(canvas: &Canvas, scale: f64) -> Option<(Patch, usize, usize)> {
    let w = (canvas.width() as f64 / scale) as usize;
    let h = (canvas.height() as f64 / scale) as usize;
    if w == 0 || h == 0 {
        return None;
    }
    let grid = PatchGrid::new(w, h);
    Some((
        extract_patch(canvas, &grid, &Gaze::from_pose(0.0, scale, 0.0, 0.0)),
        w,
        h,
    ))
}

fn check_scales(scales: &[f64], stride: usize) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::invalid("at least one search scale is required"));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid("search scales must be positive"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    Ok(())
}

/// Exhaustive search over translations (in steps of `stride` template
/// pixels) and `scales`; `score` is maximised.
fn sliding_search(
    canvas: &Canvas,
    template: &Patch,
    scales: &[f64],
    stride: usize,
    score: impl Fn(&[f64], &Patch, usize, usize, usize) -> f64,
) -> Result<Localization> {
    check_scales(scales, stride)?;
    if template.channels != canvas.channels() {
        return Err(Error::Dimension {
            what: "template channels",
            expected: canvas.channels(),
            got: template.channels,
        });
    }
    let mut best = Localization {
        gaze: Gaze::IDENTITY,
        score: f64::NEG_INFINITY,
        evaluations: 0,
    };
    for &s in scales {
        let Some((image, w, h)) = rescaled(canvas, s) else {
            continue;
        };
        if template.width > w || template.height > h {
            continue;
        }
        for oy in (0..=h - template.height).step_by(stride) {
            for ox in (0..=w - template.width).step_by(stride) {
                let v = score(&image.values, template, w * h, ox + oy * w, w);
                best.evaluations += 1;
                if v > best.score {
                    best.score = v;
                    best.gaze = Gaze::from_pose(0.0, s, s * ox as f64, s * oy as f64);
                }
            }
        }
    }
    if best.evaluations == 0 {
        return Err(Error::invalid(
            "template is larger than the canvas at every scale",
        ));
    }
    Ok(best)
}

fn window_values<'a>(
    image: &'a [f64],
    t: &'a Patch,
    plane: usize,
    origin: usize,
    row: usize,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    let (tw, th) = (t.width, t.height);
    (0..t.channels).flat_map(move |c| {
        (0..th).flat_map(move |r| {
            let w = &image[c * plane + origin + r * row..][..tw];
            w.iter()
                .copied()
                .zip(t.values[(c * th + r) * tw..][..tw].iter().copied())
        })
    })
}

fn ncc_score(image: &[f64], t: &Patch, plane: usize, origin: usize, row: usize) -> f64 {
    let n = t.values.len() as f64;
    let (mut sw, mut st, mut sww, mut stt, mut swt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (w, v) in window_values(image, t, plane, origin, row) {
        sw += w;
        st += v;
        sww += w * w;
        stt += v * v;
        swt += w * v;
    }
    let cov = swt - sw * st / n;
    let vw = sww - sw * sw / n;
    let vt = stt - st * st / n;
    if vw <= 1e-12 || vt <= 1e-12 {
        return -1.0;
    }
    cov / sqrt(vw * vt)
}

fn neg_ssd(image: &[f64], t: &Patch, plane: usize, origin: usize, row: usize) -> f64 {
    -window_values(image, t, plane, origin, row)
        .map(|(w, v)| (w - v) * (w - v))
        .sum::<f64>()
}

/// Normalized cross-correlation search. The returned score is the NCC.
pub fn ncc_localize(
    canvas: &Canvas,
    template: &Patch,
    scales: &[f64],
    stride: usize,
) -> Result<Localization> {
    sliding_search(canvas, template, scales, stride, ncc_score)
}

/// Sum-of-squared-differences search. The returned score is `−SSD`.
pub fn template_localize(
    canvas: &Canvas,
    template: &Patch,
    scales: &[f64],
    stride: usize,
) -> Result<Localization> {
    sliding_search(canvas, template, scales, stride, neg_ssd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub canvas: Canvas,
    pub truth: Gaze,
}

/// Anything that turns a scene and a starting gaze into a gaze estimate.
pub trait Localizer {
    fn name(&self) -> &str;
    fn localize(&self, canvas: &Canvas, init: &Gaze, seed: u64) -> Result<Localization>;
}

pub struct InferLocalizer<'a> {
    pub model: &'a GdbnModel,
    pub net: &'a ApproxNetParams,
    pub schedule: InferenceSchedule,
}

impl Localizer for InferLocalizer<'_> {
    fn name(&self) -> &str {
        "infer"
    }

    fn localize(&self, canvas: &Canvas, init: &Gaze, seed: u64) -> Result<Localization> {
        let state = InferenceState::initial(self.model, *init);
        let (state, trace) = infer_from(canvas, self.model, self.net, &self.schedule, state, seed)?;
        let score = trace.map_sample().map(|(_, u)| -u).unwrap_or(f64::NAN);
        Ok(Localization {
            gaze: state.u,
            score,
            evaluations: state.net_evaluations,
        })
    }
}

pub struct SlidingLocalizer {
    pub method: Method,
    pub template: Patch,
    pub scales: Vec<f64>,
    pub stride: usize,
}

impl Localizer for SlidingLocalizer {
    fn name(&self) -> &str {
        self.method.name()
    }

    fn localize(&self, canvas: &Canvas, _init: &Gaze, _seed: u64) -> Result<Localization> {
        match self.method {
            Method::Template => {
                template_localize(canvas, &self.template, &self.scales, self.stride)
            }
            _ => ncc_localize(canvas, &self.template, &self.scales, self.stride),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Infer,
    Ncc,
    Template,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Infer => "infer",
            Method::Ncc => "ncc",
            Method::Template => "template",
        }
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infer" => Ok(Method::Infer),
            "ncc" => Ok(Method::Ncc),
            "template" => Ok(Method::Template),
            other => Err(Error::Invalid(alloc::format!("unknown method '{other}'"))),
        }
    }
}

/// How starting gazes are drawn around the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchProtocol {
    /// One curve point per entry.
    pub offsets: Vec<f64>,
    /// Offsets exactly at the given radius rather than uniform in the disc.
    pub ring: bool,
    pub scale_range: (f64, f64),
    pub rotation: f64,
    pub seed: u64,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            offsets: alloc::vec![30.0],
            ring: false,
            scale_range: (0.5, 1.5),
            rotation: 0.0,
            seed: 0,
        }
    }
}

impl BenchProtocol {
    /// Starting gaze for scene `scene` at curve point `point`, with the
    /// realised centre offset.
    pub fn init(&self, truth: &Gaze, grid: &PatchGrid, point: usize, scene: usize) -> (Gaze, f64) {
        let mut r = rng::indexed(
            rng::derive_index(rng::derive(self.seed, "bench-init"), point as u64),
            scene as u64,
        );
        let max = self.offsets[point];
        let dist = if self.ring {
            max
        } else {
            max * sqrt(rng::uniform(&mut r))
        };
        let phi = rng::uniform_in(&mut r, 0.0, core::f64::consts::TAU);
        let (lo, hi) = self.scale_range;
        let s = if lo < hi {
            rng::uniform_in(&mut r, lo, hi)
        } else {
            lo
        };
        let th = if self.rotation > 0.0 {
            rng::uniform_in(&mut r, -self.rotation, self.rotation)
        } else {
            0.0
        };
        let c = truth.warp(grid.center());
        let center = PixelCoord::new(c.x + dist * cos(phi), c.y + dist * sin(phi));
        (
            Gaze::centered_at(grid, center, truth.angle() + th, truth.scale() * s),
            dist,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub offset: f64,
    pub success_rate: f64,
    pub mean_iou: f64,
    pub n: usize,
    pub mean_evaluations: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub method: String,
    pub points: Vec<CurvePoint>,
    /// `results[point][scene]`.
    pub results: Vec<Vec<IouResult>>,
    pub gazes: Vec<Vec<Gaze>>,
}

/// Runs `localizer` on every scene at every protocol offset.
pub fn run_benchmark(
    localizer: &dyn Localizer,
    scenes: &[SceneRecord],
    grid: &PatchGrid,
    protocol: &BenchProtocol,
) -> Result<BenchSummary> {
    let mut summary = BenchSummary {
        method: localizer.name().into(),
        points: Vec::new(),
        results: Vec::new(),
        gazes: Vec::new(),
    };
    for (p, &offset) in protocol.offsets.iter().enumerate() {
        let mut results = Vec::with_capacity(scenes.len());
        let mut gazes = Vec::with_capacity(scenes.len());
        let mut evals = 0usize;
        for (i, scene) in scenes.iter().enumerate() {
            let (init, dist) = protocol.init(&scene.truth, grid, p, i);
            let seed = rng::derive_index(
                rng::derive(protocol.seed, "bench-run"),
                (p * scenes.len() + i) as u64,
            );
            let (gaze, e) = match localizer.localize(&scene.canvas, &init, seed) {
                Ok(loc) => (loc.gaze, loc.evaluations),
                Err(_) => (init, 0),
            };
            evals += e;
            results.push(IouResult::new(gaze_iou(&gaze, &scene.truth, grid), dist));
            gazes.push(gaze);
        }
        let n = results.len();
        let denom = n.max(1) as f64;
        summary.points.push(CurvePoint {
            offset,
            success_rate: results.iter().filter(|r| r.success).count() as f64 / denom,
            mean_iou: results.iter().map(|r| r.iou).sum::<f64>() / denom,
            n,
            mean_evaluations: evals as f64 / denom,
        });
        summary.results.push(results);
        summary.gazes.push(gazes);
    }
    Ok(summary)
}
