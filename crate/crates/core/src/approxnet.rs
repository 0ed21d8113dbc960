//! Two-stream convolutional regressor for gaze corrections.
//!
//! Stream A sees a 72×72 window around the current gaze: 7×7 valid
//! convolution to 16×66×66, ReLU, 3×3 max-pool with stride 3 to 16×22×22.
//! Stream B sees the 24×24 canonical image: 5×5 convolution with one pixel
//! of zero padding to 16×22×22, ReLU. The streams are multiplied
//! element-wise, then a 1024-unit ReLU layer and a linear 4-unit output
//! `(dx, dy, dθ, log ds)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{axpy, dot, sqrt};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::warp::{extract_patch, Gaze, Patch, PatchGrid};
use crate::{Canvas, Error, Result, TrainHyper};

pub use crate::warp::GazeUpdate;

pub const MAPS: usize = 16;
pub const WINDOW: usize = 72;
pub const CANONICAL: usize = 24;
pub const KERNEL_X: usize = 7;
pub const KERNEL_V: usize = 5;
pub const CONV_X_OUT: usize = WINDOW - KERNEL_X + 1;
pub const POOL: usize = 3;
pub const POOLED: usize = CONV_X_OUT / POOL;
pub const PAD_V: usize = 1;
pub const CONV_V_OUT: usize = CANONICAL + 2 * PAD_V - KERNEL_V + 1;
pub const FLAT: usize = MAPS * POOLED * POOLED;
pub const HIDDEN: usize = 1024;
pub const OUTPUTS: usize = 4;

const _: () = assert!(CONV_V_OUT == POOLED);

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxNetParams {
    pub channels: usize,
    pub hidden: usize,
    /// `[map][channel][ky][kx]`
    pub conv_x_w: Vec<f64>,
    pub conv_x_b: Vec<f64>,
    pub conv_v_w: Vec<f64>,
    pub conv_v_b: Vec<f64>,
    /// Input-major: row `i` holds the weights leaving combined unit `i`.
    pub fc1_w: Matrix,
    pub fc1_b: Vec<f64>,
    /// Output-major, `4 × hidden`.
    pub fc2_w: Matrix,
    pub fc2_b: Vec<f64>,
    /// Raw outputs are multiplied by this to give the update.
    pub output_scale: [f64; 4],
}

impl ApproxNetParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden,
            conv_x_w: vec![0.0; MAPS * channels * KERNEL_X * KERNEL_X],
            conv_x_b: vec![0.0; MAPS],
            conv_v_w: vec![0.0; MAPS * channels * KERNEL_V * KERNEL_V],
            conv_v_b: vec![0.0; MAPS],
            fc1_w: Matrix::zeros(FLAT, hidden),
            fc1_b: vec![0.0; hidden],
            fc2_w: Matrix::zeros(OUTPUTS, hidden),
            fc2_b: vec![0.0; OUTPUTS],
            output_scale: [1.0; 4],
        }
    }

    /// He-style random initialisation.
    pub fn new(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(channels, hidden);
        let mut rng = rng::stream(seed, "approxnet-init");
        let sx = sqrt(2.0 / (channels * KERNEL_X * KERNEL_X) as f64);
        p.conv_x_w
            .iter_mut()
            .for_each(|w| *w = sx * rng::normal(&mut rng));
        let sv = sqrt(2.0 / (channels * KERNEL_V * KERNEL_V) as f64);
        p.conv_v_w
            .iter_mut()
            .for_each(|w| *w = sv * rng::normal(&mut rng));
        p.conv_x_b.iter_mut().for_each(|b| *b = 0.05);
        p.conv_v_b.iter_mut().for_each(|b| *b = 0.05);
        let s1 = sqrt(2.0 / FLAT as f64);
        p.fc1_w
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = s1 * rng::normal(&mut rng));
        let s2 = sqrt(1.0 / hidden as f64);
        p.fc2_w
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = s2 * rng::normal(&mut rng));
        p
    }

    /// Weight counts `(conv_x, conv_v, fc1, fc2)`, biases excluded.
    pub fn weight_counts(&self) -> (usize, usize, usize, usize) {
        (
            self.conv_x_w.len(),
            self.conv_v_w.len(),
            self.fc1_w.as_slice().len(),
            self.fc2_w.as_slice().len(),
        )
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Every parameter tensor, in a fixed order.
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            &self.conv_x_w,
            &self.conv_x_b,
            &self.conv_v_w,
            &self.conv_v_b,
            self.fc1_w.as_slice(),
            &self.fc1_b,
            self.fc2_w.as_slice(),
            &self.fc2_b,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.conv_x_w,
            &mut self.conv_x_b,
            &mut self.conv_v_w,
            &mut self.conv_v_b,
            self.fc1_w.as_mut_slice(),
            &mut self.fc1_b,
            self.fc2_w.as_mut_slice(),
            &mut self.fc2_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn check_inputs(&self, window: &Patch, canonical: &Patch) -> Result<()> {
        if window.width != WINDOW || window.height != WINDOW || window.channels != self.channels {
            return Err(Error::Dimension {
                what: "approxnet window",
                expected: WINDOW * WINDOW * self.channels,
                got: window.len(),
            });
        }
        if canonical.width != CANONICAL
            || canonical.height != CANONICAL
            || canonical.channels != self.channels
        {
            return Err(Error::Dimension {
                what: "approxnet canonical image",
                expected: CANONICAL * CANONICAL * self.channels,
                got: canonical.len(),
            });
        }
        Error::check_len(
            "approxnet window values",
            WINDOW * WINDOW * self.channels,
            window.values.len(),
        )?;
        Error::check_len(
            "approxnet canonical values",
            CANONICAL * CANONICAL * self.channels,
            canonical.values.len(),
        )
    }

    pub fn forward(&self, window: &Patch, canonical: &Patch) -> Result<GazeUpdate> {
        Ok(self.forward_trace(window, canonical)?.update(self))
    }

    /// Forward pass keeping every intermediate map.
    pub fn forward_trace(&self, window: &Patch, canonical: &Patch) -> Result<Activations> {
        self.check_inputs(window, canonical)?;
        let mut act = Activations::new(self.hidden);
        self.streams(&window.values, &canonical.values, &mut act);
        let mut hidden = [core::mem::take(&mut act.hidden)];
        fc1_forward(self, &[&act.combined], &mut hidden);
        act.hidden = core::mem::take(&mut hidden[0]);
        act.output = fc2_forward(self, &act.hidden);
        Ok(act)
    }

    fn streams(&self, window: &[f64], canonical: &[f64], act: &mut Activations) {
        let c = self.channels;
        conv_valid(
            window,
            c,
            WINDOW,
            WINDOW,
            &self.conv_x_w,
            &self.conv_x_b,
            KERNEL_X,
            &mut act.conv_x,
        );
        act.conv_x.iter_mut().for_each(|x| *x = x.max(0.0));
        max_pool(&act.conv_x, &mut act.pooled_x, &mut act.pool_index);

        let padded_side = CANONICAL + 2 * PAD_V;
        let mut padded = vec![0.0; c * padded_side * padded_side];
        for ch in 0..c {
            for r in 0..CANONICAL {
                let src = &canonical[(ch * CANONICAL + r) * CANONICAL..][..CANONICAL];
                let dst = &mut padded[(ch * padded_side + r + PAD_V) * padded_side + PAD_V..]
                    [..CANONICAL];
                dst.copy_from_slice(src);
            }
        }
        conv_valid(
            &padded,
            c,
            padded_side,
            padded_side,
            &self.conv_v_w,
            &self.conv_v_b,
            KERNEL_V,
            &mut act.stream_v,
        );
        act.stream_v.iter_mut().for_each(|x| *x = x.max(0.0));
        act.padded_v = padded;
        for ((m, a), b) in act
            .combined
            .iter_mut()
            .zip(&act.pooled_x)
            .zip(&act.stream_v)
        {
            *m = a * b;
        }
    }

    /// Loss `mean_k (raw_k − target_k/scale_k)²` and its gradient.
    pub fn backward(
        &self,
        window: &Patch,
        canonical: &Patch,
        target: &GazeUpdate,
    ) -> Result<(f64, ApproxNetParams)> {
        self.check_inputs(window, canonical)?;
        let mut grad = ApproxNetParams::zeros(self.channels, self.hidden);
        let sample = Sample {
            window: &window.values,
            canonical: &canonical.values,
            target: self.normalized_target(target),
        };
        let loss = batch_gradient(self, &[sample], &mut grad);
        Ok((loss, grad))
    }

    fn normalized_target(&self, t: &GazeUpdate) -> [f64; 4] {
        let a = t.as_array();
        core::array::from_fn(|k| a[k] / self.output_scale[k])
    }
}

/// Intermediate maps of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// 16×66×66 after ReLU.
    pub conv_x: Vec<f64>,
    /// 16×22×22.
    pub pooled_x: Vec<f64>,
    pool_index: Vec<u32>,
    padded_v: Vec<f64>,
    /// 16×22×22 after ReLU.
    pub stream_v: Vec<f64>,
    /// Element-wise product of the two streams.
    pub combined: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Un-scaled outputs.
    pub output: [f64; 4],
}

impl Activations {
    fn new(hidden: usize) -> Self {
        Self {
            conv_x: vec![0.0; MAPS * CONV_X_OUT * CONV_X_OUT],
            pooled_x: vec![0.0; FLAT],
            pool_index: vec![0; FLAT],
            padded_v: Vec::new(),
            stream_v: vec![0.0; FLAT],
            combined: vec![0.0; FLAT],
            hidden: vec![0.0; hidden],
            output: [0.0; 4],
        }
    }

    pub fn update(&self, params: &ApproxNetParams) -> GazeUpdate {
        GazeUpdate::from_array(core::array::from_fn(|k| {
            self.output[k] * params.output_scale[k]
        }))
    }
}

/// `out[f] = bias[f] + Σ_c Σ_k w[f,c,k] · in[c, shifted by k]`, valid region.
fn conv_valid(
    input: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    weights: &[f64],
    bias: &[f64],
    k: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (height - k + 1, width - k + 1);
    for f in 0..MAPS {
        let plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
        plane.iter_mut().for_each(|x| *x = bias[f]);
        for c in 0..channels {
            let src = &input[c * height * width..(c + 1) * height * width];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weights[((f * channels + c) * k + ky) * k + kx];
                    for y in 0..oh {
                        let row_in = &src[(y + ky) * width + kx..][..ow];
                        let row_out = &mut plane[y * ow..(y + 1) * ow];
                        for (o, i) in row_out.iter_mut().zip(row_in) {
                            *o += w * i;
                        }
                    }
                }
            }
        }
    }
}

fn max_pool(input: &[f64], out: &mut [f64], index: &mut [u32]) {
    for f in 0..MAPS {
        let plane = &input[f * CONV_X_OUT * CONV_X_OUT..];
        for py in 0..POOLED {
            for px in 0..POOLED {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let i = (py * POOL + dy) * CONV_X_OUT + px * POOL + dx;
                        if plane[i] > best {
                            best = plane[i];
                            at = i;
                        }
                    }
                }
                let o = (f * POOLED + py) * POOLED + px;
                out[o] = best;
                index[o] = (f * CONV_X_OUT * CONV_X_OUT + at) as u32;
            }
        }
    }
}

fn fc1_forward(p: &ApproxNetParams, combined: &[&Vec<f64>], hidden: &mut [Vec<f64>]) {
    for h in hidden.iter_mut() {
        h.clear();
        h.extend_from_slice(&p.fc1_b);
    }
    for i in 0..FLAT {
        let row = p.fc1_w.row(i);
        for (m, h) in combined.iter().zip(hidden.iter_mut()) {
            let x = m[i];
            if x != 0.0 {
                axpy(x, row, h);
            }
        }
    }
    for h in hidden.iter_mut() {
        h.iter_mut().for_each(|x| *x = x.max(0.0));
    }
}

fn fc2_forward(p: &ApproxNetParams, hidden: &[f64]) -> [f64; 4] {
    core::array::from_fn(|k| p.fc2_b[k] + dot(p.fc2_w.row(k), hidden))
}

struct Sample<'a> {
    window: &'a [f64],
    canonical: &'a [f64],
    target: [f64; 4],
}

/// Accumulates `∂(mean loss)/∂θ` over `batch` into `grad` (which must be
/// zeroed) and returns the mean loss.
fn batch_gradient(p: &ApproxNetParams, batch: &[Sample<'_>], grad: &mut ApproxNetParams) -> f64 {
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let mut acts: Vec<Activations> = batch
        .iter()
        .map(|s| {
            let mut a = Activations::new(p.hidden);
            p.streams(s.window, s.canonical, &mut a);
            a
        })
        .collect();
    let combined: Vec<&Vec<f64>> = acts.iter().map(|a| &a.combined).collect();
    let mut hidden: Vec<Vec<f64>> = vec![Vec::new(); n];
    fc1_forward(p, &combined, &mut hidden);

    let mut loss = 0.0;
    let mut d_hidden: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (s, h) in batch.iter().zip(&hidden) {
        let y = fc2_forward(p, h);
        let mut dy = [0.0; 4];
        for k in 0..OUTPUTS {
            let e = y[k] - s.target[k];
            loss += e * e / OUTPUTS as f64;
            dy[k] = scale * 2.0 * e / OUTPUTS as f64;
            grad.fc2_b[k] += dy[k];
            axpy(dy[k], h, grad.fc2_w.row_mut(k));
        }
        let mut dh = vec![0.0; p.hidden];
        for k in 0..OUTPUTS {
            axpy(dy[k], p.fc2_w.row(k), &mut dh);
        }
        for (d, x) in dh.iter_mut().zip(h) {
            if *x <= 0.0 {
                *d = 0.0;
            }
        }
        axpy(1.0, &dh, &mut grad.fc1_b);
        d_hidden.push(dh);
    }

    // Only units with a non-zero product carry gradient to either stream.
    let mut d_combined = vec![vec![0.0; FLAT]; n];
    for i in 0..FLAT {
        let row = p.fc1_w.row(i);
        let g = grad.fc1_w.row_mut(i);
        for b in 0..n {
            let m = acts[b].combined[i];
            if m != 0.0 {
                d_combined[b][i] = dot(row, &d_hidden[b]);
                axpy(m, &d_hidden[b], g);
            }
        }
    }

    let c = p.channels;
    let padded_side = CANONICAL + 2 * PAD_V;
    for (b, s) in batch.iter().enumerate() {
        let act = &mut acts[b];
        for i in 0..FLAT {
            let dm = d_combined[b][i];
            if dm == 0.0 {
                continue;
            }
            // Stream A: through the pooled argmax and its ReLU.
            let da = dm * act.stream_v[i];
            if act.pooled_x[i] > 0.0 && da != 0.0 {
                let at = act.pool_index[i] as usize;
                let f = at / (CONV_X_OUT * CONV_X_OUT);
                let rem = at % (CONV_X_OUT * CONV_X_OUT);
                let (y, x) = (rem / CONV_X_OUT, rem % CONV_X_OUT);
                grad.conv_x_b[f] += da;
                for ch in 0..c {
                    let src = &s.window[ch * WINDOW * WINDOW..];
                    let wbase = (f * c + ch) * KERNEL_X * KERNEL_X;
                    for ky in 0..KERNEL_X {
                        let row_in = &src[(y + ky) * WINDOW + x..][..KERNEL_X];
                        let wrow = &mut grad.conv_x_w[wbase + ky * KERNEL_X..][..KERNEL_X];
                        axpy(da, row_in, wrow);
                    }
                }
            }
            // Stream B: through its ReLU.
            let db = dm * act.pooled_x[i];
            if act.stream_v[i] > 0.0 && db != 0.0 {
                let f = i / (POOLED * POOLED);
                let rem = i % (POOLED * POOLED);
                let (y, x) = (rem / POOLED, rem % POOLED);
                grad.conv_v_b[f] += db;
                for ch in 0..c {
                    let src = &act.padded_v[ch * padded_side * padded_side..];
                    let wbase = (f * c + ch) * KERNEL_V * KERNEL_V;
                    for ky in 0..KERNEL_V {
                        let row_in = &src[(y + ky) * padded_side + x..][..KERNEL_V];
                        let wrow = &mut grad.conv_v_w[wbase + ky * KERNEL_V..][..KERNEL_V];
                        axpy(db, row_in, wrow);
                    }
                }
            }
        }
    }
    loss * scale
}

/// Subtract the per-channel mean; applied to both network inputs.
pub fn standardize(patch: &Patch) -> Patch {
    let n = patch.width * patch.height;
    let mut out = patch.clone();
    for ch in 0..patch.channels {
        let plane = &mut out.values[ch * n..(ch + 1) * n];
        let m = plane.iter().sum::<f64>() / n as f64;
        plane.iter_mut().for_each(|x| *x -= m);
    }
    out
}

/// The 72×72 window around `u`: the canonical lattice widened threefold.
pub fn extract_window(canvas: &Canvas, canonical_grid: &PatchGrid, u: &Gaze) -> Patch {
    extract_patch(canvas, &canonical_grid.window(WINDOW / CANONICAL), u)
}

/// A stored training example. Inputs are kept standardized and in single
/// precision to halve memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub window: Vec<f32>,
    pub canonical: Vec<f32>,
    pub target: GazeUpdate,
}

impl TrainingPair {
    pub fn new(window: &Patch, canonical: &Patch, target: GazeUpdate) -> Self {
        let w = standardize(window);
        let c = standardize(canonical);
        Self {
            window: w.values.iter().map(|&x| x as f32).collect(),
            canonical: c.values.iter().map(|&x| x as f32).collect(),
            target,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Minibatch SGD with momentum. The output scale is set from the label
/// root-mean-square so that every output contributes comparably to the loss.
pub fn sgd_train(
    init: &ApproxNetParams,
    dataset: &[TrainingPair],
    hyper: &TrainHyper,
) -> Result<(ApproxNetParams, TrainReport)> {
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid(
            "approxnet training needs a non-empty dataset",
        ));
    }
    let c = init.channels;
    for pair in dataset {
        Error::check_len("training window", WINDOW * WINDOW * c, pair.window.len())?;
        Error::check_len(
            "training canonical image",
            CANONICAL * CANONICAL * c,
            pair.canonical.len(),
        )?;
        if !pair.target.is_finite() {
            return Err(Error::non_finite("training label"));
        }
    }
    let mut p = init.clone();
    let mut report = TrainReport::default();
    if hyper.epochs == 0 {
        return Ok((p, report));
    }
    p.output_scale = label_scale(dataset);
    let mut velocity = ApproxNetParams::zeros(c, p.hidden);
    let mut grad = ApproxNetParams::zeros(c, p.hidden);
    let mut rng: Stream = rng::stream(hyper.seed, "approxnet-sgd");
    let mut buffers: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();

    for _epoch in 0..hyper.epochs {
        let order = rng::permutation(&mut rng, dataset.len());
        let mut total = 0.0;
        for batch in order.chunks(hyper.minibatch) {
            buffers.resize_with(batch.len(), Default::default);
            for (buf, &i) in buffers.iter_mut().zip(batch) {
                buf.0.clear();
                buf.0.extend(dataset[i].window.iter().map(|&x| x as f64));
                buf.1.clear();
                buf.1.extend(dataset[i].canonical.iter().map(|&x| x as f64));
            }
            let samples: Vec<Sample<'_>> = batch
                .iter()
                .zip(&buffers)
                .map(|(&i, buf)| Sample {
                    window: &buf.0,
                    canonical: &buf.1,
                    target: p.normalized_target(&dataset[i].target),
                })
                .collect();
            for s in grad.slices_mut() {
                s.iter_mut().for_each(|x| *x = 0.0);
            }
            let loss = batch_gradient(&p, &samples, &mut grad);
            if !loss.is_finite() {
                return Err(Error::non_finite("approxnet loss diverged"));
            }
            total += loss * batch.len() as f64;
            let norm = sqrt(grad.slices().iter().map(|s| dot(s, s)).sum::<f64>());
            let clip = if norm > GRAD_CLIP {
                GRAD_CLIP / norm
            } else {
                1.0
            };
            let (lr, mom, wd) = (hyper.learning_rate, hyper.momentum, hyper.weight_decay);
            for ((w, v), g) in p
                .slices_mut()
                .into_iter()
                .zip(velocity.slices_mut())
                .zip(grad.slices())
            {
                for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mom * *v - lr * (clip * g + wd * *w);
                    *w += *v;
                }
            }
        }
        report.epoch_loss.push(total / dataset.len() as f64);
        if !p.is_finite() {
            return Err(Error::non_finite("approxnet parameters diverged"));
        }
    }
    Ok((p, report))
}

const GRAD_CLIP: f64 = 5.0;

fn label_scale(dataset: &[TrainingPair]) -> [f64; 4] {
    let n = dataset.len() as f64;
    let mut sq = [0.0; 4];
    for pair in dataset {
        let t = pair.target.as_array();
        for k in 0..4 {
            sq[k] += t[k] * t[k] / n;
        }
    }
    core::array::from_fn(|k| {
        let rms = sqrt(sq[k]);
        if rms > 1e-9 {
            rms
        } else {
            1.0
        }
    })
}

/// Perturbation ranges for synthesising training pairs and initial gazes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Centre offsets are uniform in a disc of this radius, canvas pixels.
    pub max_offset: f64,
    /// Scale is multiplied by a factor uniform in this range.
    pub scale_range: (f64, f64),
    /// Rotation offsets are uniform in `±rotation`, radians.
    pub rotation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            max_offset: 30.0,
            scale_range: (0.5, 1.5),
            rotation: 0.15,
        }
    }
}

impl Jitter {
    pub fn none() -> Self {
        Self {
            max_offset: 0.0,
            scale_range: (1.0, 1.0),
            rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.max_offset >= 0.0
            && self.max_offset.is_finite()
            && self.rotation >= 0.0
            && self.rotation.is_finite())
        {
            return Err(Error::invalid(
                "jitter ranges must be finite and non-negative",
            ));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(
                "jitter scale range must be positive and ordered",
            ));
        }
        Ok(())
    }

    /// `reference` moved by a random offset, rotation and scale factor about
    /// the centre of `grid`.
    pub fn perturb<R: Rng + ?Sized>(
        &self,
        reference: &Gaze,
        grid: &PatchGrid,
        rng: &mut R,
    ) -> Gaze {
        let r = self.max_offset * sqrt(rng::uniform(rng));
        let phi = rng::uniform_in(rng, 0.0, core::f64::consts::TAU);
        let s = if self.scale_range.0 < self.scale_range.1 {
            rng::uniform_in(rng, self.scale_range.0, self.scale_range.1)
        } else {
            self.scale_range.0
        };
        let th = if self.rotation > 0.0 {
            rng::uniform_in(rng, -self.rotation, self.rotation)
        } else {
            0.0
        };
        let center = reference.warp(grid.center());
        let moved = crate::PixelCoord::new(
            center.x + r * crate::math::cos(phi),
            center.y + r * crate::math::sin(phi),
        );
        Gaze::centered_at(grid, moved, reference.angle() + th, reference.scale() * s)
    }
}

/// A scene with its true gaze and the canonical image fed to the network.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub canvas: Canvas,
    pub gaze: Gaze,
    pub canonical: Patch,
}

/// `n` pairs: a scene is chosen, its gaze perturbed, the window extracted at
/// the perturbed gaze and labelled with the correction back to the truth.
///
/// With `blend = Some((mean, p))`, a fraction `p` of pairs feeds a random
/// mixture of the scene's canonical image and `mean` instead, mimicking the
/// canonical image during inference.
pub fn make_training_pairs(
    scenes: &[LabeledScene],
    grid: &PatchGrid,
    jitter: &Jitter,
    blend: Option<(&Patch, f64)>,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    jitter.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    if scenes.is_empty() {
        return Err(Error::invalid("training pairs need at least one scene"));
    }
    let base = rng::derive(seed, "training-pairs");
    let center = grid.center();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::indexed(base, i as u64);
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let start = jitter.perturb(&scene.gaze, grid, &mut rng);
        let window = extract_window(&scene.canvas, grid, &start);
        let label = start.correction_to(&scene.gaze, center);
        let canonical = match blend {
            Some((mean, p)) if rng::uniform(&mut rng) < p => {
                let t = rng::uniform(&mut rng);
                let values = scene
                    .canonical
                    .values
                    .iter()
                    .zip(&mean.values)
                    .map(|(a, b)| t * a + (1.0 - t) * b)
                    .collect();
                Patch::new(
                    scene.canonical.width,
                    scene.canonical.height,
                    scene.canonical.channels,
                    values,
                )?
            }
            _ => scene.canonical.clone(),
        };
        out.push(TrainingPair::new(&window, &canonical, label));
    }
    Ok(out)
}

/// Forward pass on a stored pair.
pub fn predict_pair(params: &ApproxNetParams, pair: &TrainingPair) -> Result<GazeUpdate> {
    let c = params.channels;
    let w = Patch::new(
        WINDOW,
        WINDOW,
        c,
        pair.window.iter().map(|&x| x as f64).collect(),
    )?;
    let v = Patch::new(
        CANONICAL,
        CANONICAL,
        c,
        pair.canonical.iter().map(|&x| x as f64).collect(),
    )?;
    params.forward(&w, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_patch(side: usize, c: usize, rng: &mut impl Rng) -> Patch {
        Patch::new(
            side,
            side,
            c,
            (0..side * side * c)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn naive_forward(p: &ApproxNetParams, w: &Patch, v: &Patch) -> [f64; 4] {
        let c = p.channels;
        let mut conv = vec![0.0; MAPS * CONV_X_OUT * CONV_X_OUT];
        for f in 0..MAPS {
            for y in 0..CONV_X_OUT {
                for x in 0..CONV_X_OUT {
                    let mut acc = p.conv_x_b[f];
                    for ch in 0..c {
                        for ky in 0..KERNEL_X {
                            for kx in 0..KERNEL_X {
                                acc += p.conv_x_w[((f * c + ch) * KERNEL_X + ky) * KERNEL_X + kx]
                                    * w.values[(ch * WINDOW + y + ky) * WINDOW + x + kx];
                            }
                        }
                    }
                    conv[(f * CONV_X_OUT + y) * CONV_X_OUT + x] = acc.max(0.0);
                }
            }
        }
        let mut combined = vec![0.0; FLAT];
        for f in 0..MAPS {
            for y in 0..POOLED {
                for x in 0..POOLED {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            m = m
                                .max(conv[(f * CONV_X_OUT + 3 * y + dy) * CONV_X_OUT + 3 * x + dx]);
                        }
                    }
                    let mut acc = p.conv_v_b[f];
                    for ch in 0..c {
                        for ky in 0..KERNEL_V {
                            for kx in 0..KERNEL_V {
                                let (sy, sx) =
                                    (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy >= 0
                                    && sx >= 0
                                    && (sy as usize) < CANONICAL
                                    && (sx as usize) < CANONICAL
                                {
                                    acc += p.conv_v_w
                                        [((f * c + ch) * KERNEL_V + ky) * KERNEL_V + kx]
                                        * v.values[(ch * CANONICAL + sy as usize) * CANONICAL
                                            + sx as usize];
                                }
                            }
                        }
                    }
                    combined[(f * POOLED + y) * POOLED + x] = m * acc.max(0.0);
                }
            }
        }
        let hidden: Vec<f64> = (0..p.hidden)
            .map(|j| {
                let mut acc = p.fc1_b[j];
                for i in 0..FLAT {
                    acc += p.fc1_w.get(i, j) * combined[i];
                }
                acc.max(0.0)
            })
            .collect();
        core::array::from_fn(|k| {
            let mut acc = p.fc2_b[k];
            for j in 0..p.hidden {
                acc += p.fc2_w.get(k, j) * hidden[j];
            }
            acc * p.output_scale[k]
        })
    }

    #[test]
    fn parameter_counts_match_the_architecture() {
        let p = ApproxNetParams::zeros(3, HIDDEN);
        assert_eq!(p.weight_counts(), (2352, 1200, 7_929_856, 4096));
        assert_eq!(p.fc1_b.len(), 1024);
        assert_eq!(p.fc2_b.len(), 4);
    }

    #[test]
    fn zero_inputs_give_output_bias() {
        let mut p = ApproxNetParams::new(1, 32, 1);
        p.conv_x_b.iter_mut().for_each(|b| *b = 0.0);
        p.conv_v_b.iter_mut().for_each(|b| *b = 0.0);
        p.fc1_b.iter_mut().for_each(|b| *b = 0.0);
        p.fc2_b = vec![0.1, -0.2, 0.3, -0.4];
        let w = Patch::new(72, 72, 1, vec![0.0; 5184]).unwrap();
        let v = Patch::new(24, 24, 1, vec![0.0; 576]).unwrap();
        assert_eq!(
            p.forward(&w, &v).unwrap().as_array(),
            [0.1, -0.2, 0.3, -0.4]
        );
    }

    #[test]
    fn shapes_are_exact() {
        let p = ApproxNetParams::new(1, 16, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = p
            .forward_trace(
                &random_patch(72, 1, &mut rng),
                &random_patch(24, 1, &mut rng),
            )
            .unwrap();
        assert_eq!(a.conv_x.len(), 16 * 66 * 66);
        assert_eq!(a.pooled_x.len(), 16 * 22 * 22);
        assert_eq!(a.stream_v.len(), 16 * 22 * 22);
        let bad = random_patch(70, 1, &mut rng);
        assert!(p.forward(&bad, &random_patch(24, 1, &mut rng)).is_err());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        for c in [1usize, 2] {
            let mut p = ApproxNetParams::new(c, 24, 3 + c as u64);
            p.output_scale = [2.0, 3.0, 0.5, 0.25];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
            let (w, v) = (random_patch(72, c, &mut rng), random_patch(24, c, &mut rng));
            let got = p.forward(&w, &v).unwrap().as_array();
            let want = naive_forward(&p, &w, &v);
            for k in 0..4 {
                assert!(
                    (got[k] - want[k]).abs() < 1e-10,
                    "{} vs {}",
                    got[k],
                    want[k]
                );
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let p = ApproxNetParams::new(1, 16, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let (w, v) = (random_patch(72, 1, &mut rng), random_patch(24, 1, &mut rng));
        let target = p.forward(&w, &v).unwrap();
        let (loss, g) = p.backward(&w, &v, &target).unwrap();
        assert!(loss < 1e-28);
        assert!(g.slices().iter().all(|s| s.iter().all(|x| x.abs() < 1e-12)));
    }

    #[test]
    fn product_rule_on_combined_layer() {
        // With a single hidden unit and identity-like head, ∂loss/∂fc1_w[i]
        // must equal dL/dh · A_i · B_i.
        let mut p = ApproxNetParams::new(1, 1, 7);
        p.fc1_b = vec![5.0];
        p.fc2_w = Matrix::from_vec(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (w, v) = (random_patch(72, 1, &mut rng), random_patch(24, 1, &mut rng));
        let act = p.forward_trace(&w, &v).unwrap();
        assert!(act.hidden[0] > 0.0);
        let target = GazeUpdate::ZERO;
        let (_, g) = p.backward(&w, &v, &target).unwrap();
        let dl_dh = 2.0 * act.output[0] / 4.0;
        for i in (0..FLAT).step_by(97) {
            let want = dl_dh * act.pooled_x[i] * act.stream_v[i];
            assert!((g.fc1_w.get(i, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = ApproxNetParams::new(1, 12, 9);
        p.output_scale = [3.0, 3.0, 0.2, 0.3];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let (w, v) = (random_patch(72, 1, &mut rng), random_patch(24, 1, &mut rng));
        let target = GazeUpdate::from_array([1.0, -2.0, 0.1, 0.05]);
        let (_, g) = p.backward(&w, &v, &target).unwrap();
        let loss = |q: &ApproxNetParams| {
            let y = q.forward_trace(&w, &v).unwrap().output;
            let t = q.normalized_target(&target);
            (0..4).map(|k| (y[k] - t[k]).powi(2)).sum::<f64>() / 4.0
        };
        let mut checked = 0;
        let mut tensor = 0;
        while checked < 100 {
            let len = p.slices()[tensor % 8].len();
            let idx = rng.random_range(0..len);
            let analytic = g.slices()[tensor % 8][idx];
            let h = 1e-5;
            let mut up = p.clone();
            up.slices_mut()[tensor % 8][idx] += h;
            let mut dn = p.clone();
            dn.slices_mut()[tensor % 8][idx] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs());
            if scale > 1e-6 {
                assert!(
                    (fd - analytic).abs() <= 1e-4 * scale,
                    "tensor {} idx {idx}: {fd} vs {analytic}",
                    tensor % 8
                );
                checked += 1;
            }
            tensor += 1;
        }
    }

    #[test]
    fn training_pair_labels_invert() {
        let canvas = Canvas::from_fn(96, 96, |x, y| ((x * 7 + y * 3) % 11) as f64 / 11.0).unwrap();
        let grid = PatchGrid::new(24, 24);
        let truth = Gaze::centered_at(&grid, crate::PixelCoord::new(48.0, 50.0), 0.1, 1.4);
        let canonical = extract_patch(&canvas, &grid, &truth);
        let scenes = [LabeledScene {
            canvas,
            gaze: truth,
            canonical,
        }];
        let pairs = make_training_pairs(&scenes, &grid, &Jitter::none(), None, 3, 1).unwrap();
        for pair in &pairs {
            assert!(pair.target.as_array().iter().all(|x| x.abs() < 1e-9));
        }
        assert!(
            make_training_pairs(&scenes, &grid, &Jitter::default(), None, 0, 1)
                .unwrap()
                .is_empty()
        );

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let start = Jitter::default().perturb(&truth, &grid, &mut rng);
            let label = start.correction_to(&truth, grid.center());
            let back = start.compose(&label, grid.center());
            for (a, b) in back.as_array().iter().zip(truth.as_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn learns_a_constant_target() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let target = GazeUpdate::from_array([2.0, -1.0, 0.1, 0.2]);
        let data: Vec<TrainingPair> = (0..24)
            .map(|_| {
                TrainingPair::new(
                    &random_patch(72, 1, &mut rng),
                    &random_patch(24, 1, &mut rng),
                    target,
                )
            })
            .collect();
        let hyper = TrainHyper {
            learning_rate: 0.01,
            epochs: 30,
            minibatch: 8,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 1,
        };
        let (p, report) = sgd_train(&ApproxNetParams::new(1, 32, 12), &data, &hyper).unwrap();
        assert!(
            report.epoch_loss.last().unwrap() < &1e-3,
            "{:?}",
            report.epoch_loss
        );
        let got = predict_pair(&p, &data[0]).unwrap().as_array();
        for (g, t) in got.iter().zip(target.as_array()) {
            assert!((g - t).abs() < 0.05 * t.abs().max(0.1));
        }
    }
}
