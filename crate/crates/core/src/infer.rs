//! Alternating inference over gaze, canonical image and hidden units.
//!
//! Each approximate step moves `u` by the network's predicted correction and
//! then performs one Gibbs sweep over `(v, h1, h2)`. HMC refinement starts
//! from the best-scoring gaze visited so far, with one Gibbs sweep per HMC
//! iteration. The reported gaze is the best-scoring one over the whole run.

use alloc::vec::Vec;

use rand::Rng;

use crate::approxnet::{extract_window, standardize, ApproxNetParams, Jitter};
use crate::gdbn::GdbnModel;
use crate::hmc::{self, HmcConfig, HmcTrace};
use crate::math::{sigmoid, sqrt};
use crate::rng::{self, Stream};
use crate::warp::{extract_patch, Gaze, Patch, PatchGrid};
use crate::{Canvas, Error, PixelCoord, Result};

/// The canonical image `v`.
pub type CanonicalImage = Patch;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    pub u: Gaze,
    pub v: CanonicalImage,
    /// `p(h1 = 1 | v)`.
    pub h1: Vec<f64>,
    /// `p(h2 = 1 | h1)`.
    pub h2: Vec<f64>,
    pub step: usize,
    /// Forward passes of the network so far.
    pub net_evaluations: usize,
    /// Gaze after each approximate step.
    pub path: Vec<Gaze>,
}

impl InferenceState {
    /// `v` set to the model's mean patch and the hiddens to their
    /// conditionals given it.
    pub fn initial(model: &GdbnModel, u: Gaze) -> Self {
        let v = Patch {
            width: model.patch_width,
            height: model.patch_height,
            channels: model.channels,
            values: model.mean_patch().to_vec(),
        };
        Self::with_canonical(model, u, v)
    }

    pub fn with_canonical(model: &GdbnModel, u: Gaze, v: CanonicalImage) -> Self {
        let h1: Vec<f64> = model
            .layer1
            .hidden_input(&v.values)
            .into_iter()
            .map(sigmoid)
            .collect();
        let h2 = model.layer2.hidden_probs(&h1);
        Self {
            u,
            v,
            h1,
            h2,
            step: 0,
            net_evaluations: 0,
            path: Vec::new(),
        }
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.v.width, self.v.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSchedule {
    pub approx_steps: usize,
    pub hmc_iterations: usize,
    pub hmc_config: HmcConfig,
    /// Initial centre offset radius about the reference, canvas pixels.
    pub init_translation_range: f64,
    /// Initial scale factor range relative to the reference.
    pub init_scale_range: (f64, f64),
    pub init_rotation_range: f64,
    /// Scale of the reference gaze placed at the canvas centre when no
    /// starting gaze is supplied.
    pub reference_scale: f64,
    /// Use the posterior mean of `v` instead of sampling it.
    pub deterministic_v: bool,
    /// Use variance `σ²` for `v` rather than the exact product variance `σ²/2`.
    pub strict_variance: bool,
    /// Keep `v` (and hence `h`) fixed at its initial value.
    pub clamp_v: bool,
}

impl Default for InferenceSchedule {
    fn default() -> Self {
        Self {
            approx_steps: 4,
            hmc_iterations: 5,
            hmc_config: HmcConfig {
                n_iterations: 1,
                ..HmcConfig::default()
            },
            init_translation_range: 30.0,
            init_scale_range: (0.5, 1.5),
            init_rotation_range: 0.0,
            reference_scale: 1.5,
            deterministic_v: true,
            strict_variance: false,
            clamp_v: false,
        }
    }
}

impl InferenceSchedule {
    pub fn validate(&self) -> Result<()> {
        self.jitter().validate()?;
        self.hmc_config.validate()?;
        if !(self.reference_scale > 0.0 && self.reference_scale.is_finite()) {
            return Err(Error::invalid("reference scale must be positive"));
        }
        Ok(())
    }

    pub fn jitter(&self) -> Jitter {
        Jitter {
            max_offset: self.init_translation_range,
            scale_range: self.init_scale_range,
            rotation: self.init_rotation_range,
        }
    }

    pub fn approx_only(mut self) -> Self {
        self.hmc_iterations = 0;
        self
    }
}

/// `p(v | h1, x(u))`: mean `(μ(h1) + x(u))/2`, variance `σ²/2`, or `σ²` in
/// strict mode.
pub fn sample_v<R: Rng + ?Sized>(
    u: &Gaze,
    h1: &[f64],
    canvas: &Canvas,
    model: &GdbnModel,
    deterministic: bool,
    strict_variance: bool,
    rng: &mut R,
) -> Result<CanonicalImage> {
    Error::check_len("h1", model.hidden1(), h1.len())?;
    if canvas.channels() != model.channels {
        return Err(Error::Dimension {
            what: "canvas channels",
            expected: model.channels,
            got: canvas.channels(),
        });
    }
    let grid = PatchGrid::new(model.patch_width, model.patch_height);
    let mut x = extract_patch(canvas, &grid, u);
    let mu = model.layer1.visible_mean(h1);
    let var_factor = if strict_variance { 1.0 } else { 0.5 };
    for (i, xv) in x.values.iter_mut().enumerate() {
        let mean = 0.5 * (mu[i] + *xv);
        *xv = if deterministic {
            mean
        } else {
            mean + sqrt(var_factor) * model.layer1.sigma(i) * rng::normal(rng)
        };
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSample {
    pub h1: Vec<f64>,
    pub h1_probs: Vec<f64>,
    pub h2: Vec<f64>,
    pub h2_probs: Vec<f64>,
}

/// Bottom-up pass: `h1 ~ p(h1 | v)`, then `h2 ~ p(h2 | h1)`.
pub fn gibbs_h<R: Rng + ?Sized>(
    v: &CanonicalImage,
    model: &GdbnModel,
    rng: &mut R,
) -> Result<HiddenSample> {
    Error::check_len("canonical image", model.visible(), v.values.len())?;
    let (h1, h1_probs) = model.layer1.sample_hidden(&v.values, rng);
    let h2_probs = model.layer2.hidden_probs(&h1);
    let h2 = h2_probs.iter().map(|&p| rng::bernoulli(rng, p)).collect();
    Ok(HiddenSample {
        h1,
        h1_probs,
        h2,
        h2_probs,
    })
}

/// One network-predicted gaze correction; `v` and the hiddens are untouched.
pub fn approximate_step(
    state: &InferenceState,
    canvas: &Canvas,
    net: &ApproxNetParams,
) -> Result<InferenceState> {
    let grid = state.grid();
    let window = standardize(&extract_window(canvas, &grid, &state.u));
    let update = net.forward(&window, &standardize(&state.v))?;
    let mut next = state.clone();
    next.u = state.u.compose(&update, grid.center());
    next.net_evaluations += 1;
    next.path.push(next.u);
    if !next.u.is_valid() {
        return Err(Error::non_finite(
            "approximate step produced an invalid gaze",
        ));
    }
    Ok(next)
}

fn gibbs_sweep(
    state: &mut InferenceState,
    canvas: &Canvas,
    model: &GdbnModel,
    schedule: &InferenceSchedule,
    rng: &mut Stream,
) -> Result<()> {
    if schedule.clamp_v {
        return Ok(());
    }
    state.v = sample_v(
        &state.u,
        &state.h1,
        canvas,
        model,
        schedule.deterministic_v,
        schedule.strict_variance,
        rng,
    )?;
    let h = gibbs_h(&state.v, model, rng)?;
    state.h1 = h.h1_probs;
    state.h2 = h.h2_probs;
    if !state.v.values.iter().all(|x| x.is_finite()) {
        return Err(Error::non_finite("canonical image"));
    }
    Ok(())
}

/// The reference gaze: canonical patch centred on the canvas.
pub fn reference_gaze(canvas: &Canvas, grid: &PatchGrid, scale: f64) -> Gaze {
    let c = PixelCoord::new(
        0.5 * (canvas.width() as f64 - 1.0),
        0.5 * (canvas.height() as f64 - 1.0),
    );
    Gaze::centered_at(grid, c, 0.0, scale)
}

/// Full inference from a random start around the canvas centre.
pub fn infer(
    canvas: &Canvas,
    model: &GdbnModel,
    net: &ApproxNetParams,
    schedule: &InferenceSchedule,
    seed: u64,
) -> Result<(InferenceState, HmcTrace)> {
    schedule.validate()?;
    let grid = PatchGrid::new(model.patch_width, model.patch_height);
    let mut rng = rng::stream(seed, "infer-init");
    let u0 = schedule.jitter().perturb(
        &reference_gaze(canvas, &grid, schedule.reference_scale),
        &grid,
        &mut rng,
    );
    infer_from(
        canvas,
        model,
        net,
        schedule,
        InferenceState::initial(model, u0),
        seed,
    )
}

/// Full inference from a given state.
pub fn infer_from(
    canvas: &Canvas,
    model: &GdbnModel,
    net: &ApproxNetParams,
    schedule: &InferenceSchedule,
    init: InferenceState,
    seed: u64,
) -> Result<(InferenceState, HmcTrace)> {
    schedule.validate()?;
    let mut rng = rng::stream(seed, "infer-gibbs");
    let mut state = init;
    let init_u = state.u;
    let path_start = state.path.len();
    for _ in 0..schedule.approx_steps {
        state = approximate_step(&state, canvas, net)?;
        gibbs_sweep(&mut state, canvas, model, schedule, &mut rng)?;
        state.step += 1;
    }
    let grid = state.grid();
    let mut candidates: Vec<Gaze> = Vec::with_capacity(1 + state.path.len());
    candidates.push(init_u);
    candidates.extend(state.path.iter().skip(path_start).copied());
    let mut trace = HmcTrace::default();
    if schedule.hmc_iterations > 0 {
        state.u = select_gaze(
            &candidates,
            &state.v,
            canvas,
            model,
            &grid,
            schedule.clamp_v,
        )?;
    }
    let sigma = model.sigmas();
    for it in 0..schedule.hmc_iterations {
        let config = HmcConfig {
            seed: rng::derive_index(rng::derive(seed, "infer-hmc"), it as u64),
            ..schedule.hmc_config
        };
        let part = hmc::run(&state.u, &state.v.values, canvas, &grid, &sigma, &config)?;
        if let Some(last) = part.samples.last() {
            state.u = *last;
        }
        trace.samples.extend(part.samples);
        trace.potentials.extend(part.potentials);
        trace.accept_flags.extend(part.accept_flags);
        gibbs_sweep(&mut state, canvas, model, schedule, &mut rng)?;
        state.step += 1;
    }
    candidates.extend(trace.samples.iter().copied());
    state.u = select_gaze(
        &candidates,
        &state.v,
        canvas,
        model,
        &grid,
        schedule.clamp_v,
    )?;
    Ok((state, trace))
}

/// Score used to pick the reported gaze: the potential against `v` when `v`
/// is clamped, otherwise the first-layer free energy of the crop `x(u)`.
pub fn gaze_score(
    u: &Gaze,
    v: &CanonicalImage,
    canvas: &Canvas,
    model: &GdbnModel,
    grid: &PatchGrid,
    clamped: bool,
) -> Result<f64> {
    if clamped {
        return Ok(hmc::potential(u, &v.values, canvas, grid, &model.sigmas()));
    }
    model
        .layer1
        .free_energy(&extract_patch(canvas, grid, u).values)
}

/// The candidate of lowest [`gaze_score`]; earlier candidates win ties.
pub fn select_gaze(
    candidates: &[Gaze],
    v: &CanonicalImage,
    canvas: &Canvas,
    model: &GdbnModel,
    grid: &PatchGrid,
    clamped: bool,
) -> Result<Gaze> {
    let mut best: Option<(Gaze, f64)> = None;
    for g in candidates {
        let s = gaze_score(g, v, canvas, model, grid, clamped)?;
        if s.is_finite() && best.map_or(true, |(_, b)| s < b) {
            best = Some((*g, s));
        }
    }
    best.map(|(g, _)| g)
        .ok_or_else(|| Error::non_finite("no candidate gaze has a finite score"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brbm::BrbmParams;
    use crate::grbm::GrbmParams;
    use crate::math::{exp, ln};
    use alloc::vec;
    use rand::SeedableRng;

    fn tiny_model(d_side: usize, h1: usize, h2: usize) -> GdbnModel {
        let d = d_side * d_side;
        let mut l1 = GrbmParams::zeros(d, h1);
        let mut l2 = BrbmParams::zeros(h1, h2);
        for i in 0..d {
            for j in 0..h1 {
                l1.w.set(i, j, 0.3 * (((i * 7 + j * 3) % 5) as f64 - 2.0));
            }
        }
        l1.c = (0..h1).map(|j| 0.2 * j as f64 - 0.3).collect();
        for i in 0..h1 {
            for j in 0..h2 {
                l2.w.set(i, j, 0.8 * (((i + 2 * j) % 3) as f64 - 1.0));
            }
        }
        l2.c = (0..h2).map(|j| 0.5 - 0.4 * j as f64).collect();
        GdbnModel::new(l1, l2, d_side, d_side, 1).unwrap()
    }

    #[test]
    fn sample_v_mean_is_average() {
        let mut model = tiny_model(2, 3, 2);
        model.layer1.w.fill(0.0);
        model.layer1.b = vec![0.0; 4];
        let canvas = Canvas::from_fn(8, 8, |x, y| (x + 2 * y) as f64 * 0.1).unwrap();
        let u = Gaze::translation(2.0, 3.0);
        let x = extract_patch(&canvas, &PatchGrid::new(2, 2), &u).values;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let v = sample_v(&u, &[0.0; 3], &canvas, &model, true, false, &mut rng).unwrap();
        for (a, b) in v.values.iter().zip(&x) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        model.layer1.b = x.clone();
        let v = sample_v(&u, &[0.0; 3], &canvas, &model, true, false, &mut rng).unwrap();
        for (a, b) in v.values.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn product_of_gaussians_by_quadrature() {
        let (mu, x, s) = (0.3, 1.1, 0.4);
        let pdf = |t: f64, m: f64, sd: f64| {
            exp(-0.5 * ((t - m) / sd).powi(2)) / (sd * sqrt(2.0 * core::f64::consts::PI))
        };
        let (lo, hi, n) = (-4.0, 6.0, 200_000);
        let dt = (hi - lo) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let t = lo + (i as f64 + 0.5) * dt;
            let w = pdf(t, mu, s) * pdf(t, x, s) * dt;
            z += w;
            m1 += w * t;
            m2 += w * t * t;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert!((mean - 0.5 * (mu + x)).abs() < 1e-9);
        assert!((var - 0.5 * s * s).abs() < 1e-9);

        let mut model = tiny_model(1, 2, 2);
        model.layer1.w.fill(0.0);
        model.layer1.b = vec![mu];
        model.layer1.log_sigma = vec![ln(s)];
        let canvas = Canvas::filled(4, 4, 1, x).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 40_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                sample_v(
                    &Gaze::translation(1.0, 1.0),
                    &[0.0; 2],
                    &canvas,
                    &model,
                    false,
                    false,
                    &mut rng,
                )
                .unwrap()
                .values[0]
            })
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - mean).abs() < 4.0 * sqrt(var / n as f64));
        assert!((v / var - 1.0).abs() < 0.05);
    }

    #[test]
    fn gibbs_h_limits() {
        let mut model = tiny_model(2, 3, 2);
        model.layer1.w.fill(0.0);
        model.layer2.w.fill(0.0);
        let v = Patch::new(2, 2, 1, vec![0.4; 4]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let h = gibbs_h(&v, &model, &mut rng).unwrap();
        for (p, c) in h.h1_probs.iter().zip(&model.layer1.c) {
            assert!((p - sigmoid(*c)).abs() < 1e-15);
        }
        for (p, c) in h.h2_probs.iter().zip(&model.layer2.c) {
            assert!((p - sigmoid(*c)).abs() < 1e-15);
        }
        model.layer1.c = vec![60.0, -60.0, 60.0];
        model.layer2.c = vec![-60.0, 60.0];
        for _ in 0..20 {
            let h = gibbs_h(&v, &model, &mut rng).unwrap();
            assert_eq!(h.h1, vec![1.0, 0.0, 1.0]);
            assert_eq!(h.h2, vec![0.0, 1.0]);
        }
    }

    #[test]
    fn gibbs_h_marginals_match_enumeration() {
        let model = tiny_model(2, 3, 2);
        let v = Patch::new(2, 2, 1, vec![0.5, -0.2, 0.9, 0.1]).unwrap();
        let p1: Vec<f64> = model
            .layer1
            .hidden_input(&v.values)
            .into_iter()
            .map(sigmoid)
            .collect();
        let mut joint = [0.0; 32];
        for s1 in 0..8usize {
            let h1: Vec<f64> = (0..3).map(|j| ((s1 >> j) & 1) as f64).collect();
            let q1: f64 = (0..3)
                .map(|j| if h1[j] > 0.5 { p1[j] } else { 1.0 - p1[j] })
                .product();
            let p2 = model.layer2.hidden_probs(&h1);
            for s2 in 0..4usize {
                let q2: f64 = (0..2)
                    .map(|k| {
                        if (s2 >> k) & 1 == 1 {
                            p2[k]
                        } else {
                            1.0 - p2[k]
                        }
                    })
                    .product();
                joint[s1 | (s2 << 3)] = q1 * q2;
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let mut counts = [0usize; 32];
        for _ in 0..n {
            let h = gibbs_h(&v, &model, &mut rng).unwrap();
            let s1: usize = (0..3).map(|j| (h.h1[j] as usize) << j).sum();
            let s2: usize = (0..2).map(|k| (h.h2[k] as usize) << k).sum();
            counts[s1 | (s2 << 3)] += 1;
        }
        for s in 0..32 {
            let p = joint[s];
            let se = sqrt(p * (1.0 - p) / n as f64);
            let f = counts[s] as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * se + 1e-12, "state {s}: {f} vs {p}");
        }
    }

    fn model_24() -> GdbnModel {
        let l1 = GrbmParams::zeros(576, 4);
        let l2 = BrbmParams::zeros(4, 2);
        GdbnModel::new(l1, l2, 24, 24, 1).unwrap()
    }

    #[test]
    fn zero_net_leaves_state() {
        let model = model_24();
        let net = ApproxNetParams::zeros(1, 8);
        let canvas = Canvas::from_fn(96, 96, |x, y| ((x ^ y) % 7) as f64 / 7.0).unwrap();
        let s0 = InferenceState::initial(&model, Gaze::translation(30.0, 20.0));
        let s1 = approximate_step(&s0, &canvas, &net).unwrap();
        assert_eq!(s1.u, s0.u);
        assert_eq!(s1.v, s0.v);
        assert_eq!(s1.net_evaluations, 1);
    }

    #[test]
    fn evaluation_count_is_independent_of_canvas_size() {
        let model = model_24();
        let net = ApproxNetParams::new(1, 8, 1);
        let schedule = InferenceSchedule {
            hmc_iterations: 1,
            ..InferenceSchedule::default()
        };
        let mut counts = Vec::new();
        for side in [96usize, 192] {
            let canvas =
                Canvas::from_fn(side, side, |x, y| ((x * 3 + y) % 13) as f64 / 13.0).unwrap();
            let (state, trace) = infer(&canvas, &model, &net, &schedule, 4).unwrap();
            assert_eq!(trace.len(), 1);
            counts.push(state.net_evaluations);
        }
        assert_eq!(counts, vec![4, 4]);

        let canvas = Canvas::from_fn(96, 96, |x, y| ((x * 3 + y) % 13) as f64 / 13.0).unwrap();
        let (_, trace) = infer(&canvas, &model, &net, &schedule.approx_only(), 4).unwrap();
        assert!(trace.is_empty());
        let a = infer(&canvas, &model, &net, &schedule, 9).unwrap();
        let b = infer(&canvas, &model, &net, &schedule, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_prefers_the_true_pose() {
        let model = tiny_model(24, 4, 2);
        let grid = PatchGrid::new(24, 24);
        let mut pixels = vec![0.0; 96 * 96];
        let proto: Vec<f64> = model.layer1.visible_mean(&[1.0, 0.0, 1.0, 0.0]);
        for y in 0..24 {
            for x in 0..24 {
                pixels[(30 + y) * 96 + 40 + x] = proto[y * 24 + x];
            }
        }
        let canvas = Canvas::new(96, 96, 1, pixels).unwrap();
        let truth = Gaze::new(0.0, 0.0, 40.0, 30.0);
        let others = [
            Gaze::new(0.0, 0.0, 10.0, 10.0),
            Gaze::new(0.1, 0.0, 37.0, 31.0),
            Gaze::new(0.0, 0.0, 46.0, 30.0),
        ];
        let v = Patch::new(24, 24, 1, proto.clone()).unwrap();
        for clamped in [false, true] {
            let mut cands = others.to_vec();
            cands.insert(1, truth);
            assert_eq!(
                select_gaze(&cands, &v, &canvas, &model, &grid, clamped).unwrap(),
                truth
            );
        }
        assert_eq!(
            gaze_score(&truth, &v, &canvas, &model, &grid, true).unwrap(),
            0.0
        );
        assert!(select_gaze(&[], &v, &canvas, &model, &grid, false).is_err());
    }
}
