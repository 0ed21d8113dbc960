//! Gaussian-Bernoulli restricted Boltzmann machine with learned per-pixel
//! standard deviations.
//!
//! Energy: `½ Σᵢ (vᵢ − bᵢ)²/σᵢ² − Σⱼ cⱼhⱼ − Σᵢⱼ Wᵢⱼ vᵢ hⱼ`, giving
//! `p(hⱼ=1|v) = sigmoid(Σᵢ Wᵢⱼ vᵢ + cⱼ)` and
//! `p(vᵢ|h) = N(bᵢ + σᵢ² Σⱼ Wᵢⱼ hⱼ, σᵢ²)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{dot, exp, ln, sigmoid, softplus};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::{Error, Result, TrainHyper};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GrbmParams {
    /// Visible × hidden weights.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GrbmParams {
    pub fn zeros(visible: usize, hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(visible, hidden),
            b: vec![0.0; visible],
            c: vec![0.0; hidden],
            log_sigma: vec![0.0; visible],
        }
    }

    /// `W ~ N(0, 0.01²)`, `b` = data mean, `c = 0`, `σ` = per-pixel data std.
    pub fn init_from_data(data: &Matrix, hidden: usize, seed: u64) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::invalid(
                "GRBM initialisation needs at least one sample",
            ));
        }
        let d = data.cols();
        let n = data.rows() as f64;
        let mut mean = vec![0.0; d];
        for r in 0..data.rows() {
            crate::math::axpy(1.0, data.row(r), &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..data.rows() {
            for (i, &x) in data.row(r).iter().enumerate() {
                var[i] += (x - mean[i]) * (x - mean[i]);
            }
        }
        let log_sigma = var
            .iter()
            .map(|&v| ln(crate::math::sqrt(v / n).clamp(SIGMA_MIN, SIGMA_MAX)))
            .collect();
        let mut rng = rng::stream(seed, "grbm-init");
        let w = Matrix::from_fn(d, hidden, |_, _| 0.01 * rng::normal(&mut rng));
        Ok(Self {
            w,
            b: mean,
            c: vec![0.0; hidden],
            log_sigma,
        })
    }

    #[inline]
    pub fn visible(&self) -> usize {
        self.b.len()
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.c.len()
    }

    #[inline]
    pub fn sigma(&self, i: usize) -> f64 {
        exp(self.log_sigma[i])
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|&l| exp(l)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self
                .b
                .iter()
                .chain(&self.c)
                .chain(&self.log_sigma)
                .all(|v| v.is_finite())
    }

    fn check_visible(&self, v: &[f64]) -> Result<()> {
        Error::check_len("GRBM visible vector", self.visible(), v.len())
    }

    fn check_hidden(&self, h: &[f64]) -> Result<()> {
        Error::check_len("GRBM hidden vector", self.hidden(), h.len())
    }

    pub fn energy(&self, v: &[f64], h: &[f64]) -> Result<f64> {
        self.check_visible(v)?;
        self.check_hidden(h)?;
        let mut quad = 0.0;
        for i in 0..self.visible() {
            let s = self.sigma(i);
            quad += (v[i] - self.b[i]) * (v[i] - self.b[i]) / (s * s);
        }
        let wh = self.w.mul_vec(h);
        Ok(0.5 * quad - dot(&self.c, h) - dot(v, &wh))
    }

    /// `Wᵀv + c`
    pub fn hidden_input(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.w.tr_mul_vec(v);
        out.iter_mut().zip(&self.c).for_each(|(o, c)| *o += c);
        out
    }

    pub fn hidden_conditional(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_visible(v)?;
        Ok(self.hidden_input(v).into_iter().map(sigmoid).collect())
    }

    /// Mean and standard deviation of `p(v | h)`.
    pub fn visible_conditional(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_hidden(h)?;
        Ok((self.visible_mean(h), self.sigmas()))
    }

    /// `μ = b + σ² W h`; also accepts hidden probabilities (mean-field readout).
    pub fn visible_mean(&self, h: &[f64]) -> Vec<f64> {
        let mut mu = self.w.mul_vec(h);
        for (i, m) in mu.iter_mut().enumerate() {
            let s2 = exp(2.0 * self.log_sigma[i]);
            *m = self.b[i] + s2 * *m;
        }
        mu
    }

    pub fn sample_hidden<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let probs: Vec<f64> = self.hidden_input(v).into_iter().map(sigmoid).collect();
        let states = probs.iter().map(|&p| rng::bernoulli(rng, p)).collect();
        (states, probs)
    }

    pub fn sample_visible<R: Rng + ?Sized>(&self, h: &[f64], rng: &mut R) -> Vec<f64> {
        let mut v = self.visible_mean(h);
        for (i, x) in v.iter_mut().enumerate() {
            *x += self.sigma(i) * rng::normal(rng);
        }
        v
    }

    /// `F(v) = −log Σ_h exp(−E(v, h))`.
    pub fn free_energy(&self, v: &[f64]) -> Result<f64> {
        self.check_visible(v)?;
        let mut quad = 0.0;
        for (i, x) in v.iter().enumerate() {
            let s = self.sigma(i);
            quad += (x - self.b[i]) * (x - self.b[i]) / (s * s);
        }
        Ok(0.5 * quad - self.hidden_input(v).into_iter().map(softplus).sum::<f64>())
    }

    /// Mean over rows of `‖v − μ(p(h|v))‖² / D`.
    pub fn reconstruction_error(&self, data: &Matrix) -> f64 {
        let mut total = 0.0;
        for r in 0..data.rows() {
            let v = data.row(r);
            let p: Vec<f64> = self.hidden_input(v).into_iter().map(sigmoid).collect();
            let mu = self.visible_mean(&p);
            total += v
                .iter()
                .zip(&mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total / (data.rows() * data.cols()).max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdOptions {
    /// Gibbs alternations in the negative phase.
    pub k: usize,
    pub hyper: TrainHyper,
    /// Multiplier on the learning rate for `log σ`.
    pub sigma_rate: f64,
}

impl Default for CdOptions {
    fn default() -> Self {
        Self {
            k: 1,
            hyper: TrainHyper {
                learning_rate: 0.005,
                epochs: 30,
                minibatch: 20,
                momentum: 0.5,
                weight_decay: 1e-4,
                seed: 0,
            },
            sigma_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CdReport {
    /// Mean reconstruction error per visible unit, averaged over each epoch.
    pub epoch_reconstruction: Vec<f64>,
}

/// Minibatch CD-k starting from `init`.
///
/// Updates are taken in the standardized chart `W̃ᵢⱼ = σᵢWᵢⱼ`,
/// `c̃ⱼ = cⱼ + Σᵢ Wᵢⱼbᵢ`, `ṽ = (v − b)/σ`, in which the energy reads
/// `½‖ṽ‖² − c̃ᵀh − ṽᵀW̃h`. It is the same model; the chart only decouples the
/// bias and scale updates from the weights.
pub fn cd_train(
    init: &GrbmParams,
    data: &Matrix,
    opts: &CdOptions,
) -> Result<(GrbmParams, CdReport)> {
    opts.hyper.validate()?;
    if opts.k == 0 {
        return Err(Error::invalid("CD needs k >= 1"));
    }
    Error::check_len("GRBM training data width", init.visible(), data.cols())?;
    if data.rows() == 0 {
        return Err(Error::invalid("GRBM training needs at least one sample"));
    }
    let mut report = CdReport::default();
    if opts.hyper.epochs == 0 {
        return Ok((init.clone(), report));
    }

    let d = init.visible();
    let nh = init.hidden();
    let mut chart = Standardized::from_params(init);
    let mut vel = Standardized::zeros(d, nh);
    let mut rng: Stream = rng::stream(opts.hyper.seed, "grbm-cd");
    let lr = opts.hyper.learning_rate;
    let mom = opts.hyper.momentum;

    let mut grad = Standardized::zeros(d, nh);
    let mut vt = vec![0.0; d];
    let mut pos_p = vec![0.0; nh];
    let mut neg_p = vec![0.0; nh];
    let mut h = vec![0.0; nh];
    let mut wh = vec![0.0; d];
    let mut sigma = vec![0.0; d];

    for _epoch in 0..opts.hyper.epochs {
        let order = rng::permutation(&mut rng, data.rows());
        let mut recon = 0.0;
        for batch in order.chunks(opts.hyper.minibatch) {
            grad.clear();
            for (i, s) in sigma.iter_mut().enumerate() {
                *s = exp(chart.log_sigma[i]);
            }
            for &row in batch {
                let v = data.row(row);
                for i in 0..d {
                    vt[i] = (v[i] - chart.b[i]) / sigma[i];
                }
                // Positive phase.
                chart.hidden_probs(&vt, &mut pos_p);
                chart.w.mul_vec_into(&pos_p, &mut wh);
                recon += (0..d)
                    .map(|i| {
                        let e = sigma[i] * (vt[i] - wh[i]);
                        e * e
                    })
                    .sum::<f64>();
                grad.accumulate(&vt, &pos_p, &wh, 1.0);

                // Negative phase.
                for (hj, &p) in h.iter_mut().zip(&pos_p) {
                    *hj = rng::bernoulli(&mut rng, p);
                }
                for step in 0..opts.k {
                    chart.w.mul_vec_into(&h, &mut wh);
                    for i in 0..d {
                        vt[i] = wh[i] + rng::normal(&mut rng);
                    }
                    chart.hidden_probs(&vt, &mut neg_p);
                    if step + 1 < opts.k {
                        for (hj, &p) in h.iter_mut().zip(&neg_p) {
                            *hj = rng::bernoulli(&mut rng, p);
                        }
                    }
                }
                chart.w.mul_vec_into(&neg_p, &mut wh);
                grad.accumulate(&vt, &neg_p, &wh, -1.0);
            }

            let scale = 1.0 / batch.len() as f64;
            let wd = opts.hyper.weight_decay;
            for (g, (v, w)) in vel
                .w
                .as_mut_slice()
                .iter_mut()
                .zip(grad.w.as_slice().iter().zip(chart.w.as_slice()))
            {
                *g = mom * *g + lr * (scale * v - wd * w);
            }
            for j in 0..nh {
                vel.c[j] = mom * vel.c[j] + lr * scale * grad.c[j];
            }
            for i in 0..d {
                // Preconditioned by σ² so the step is in intensity units.
                vel.b[i] = mom * vel.b[i] + lr * sigma[i] * scale * grad.b[i];
                vel.log_sigma[i] =
                    mom * vel.log_sigma[i] + lr * opts.sigma_rate * scale * grad.log_sigma[i];
            }
            chart.apply(&vel);
            if !chart.is_finite() {
                return Err(Error::non_finite("GRBM contrastive divergence update"));
            }
        }
        report
            .epoch_reconstruction
            .push(recon / (data.rows() * d) as f64);
    }
    Ok((chart.to_params(), report))
}

/// Parameters (and gradient accumulators) in the standardized chart.
#[derive(Clone)]
struct Standardized {
    w: Matrix,
    b: Vec<f64>,
    c: Vec<f64>,
    log_sigma: Vec<f64>,
}

impl Standardized {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            w: Matrix::zeros(d, h),
            b: vec![0.0; d],
            c: vec![0.0; h],
            log_sigma: vec![0.0; d],
        }
    }

    fn from_params(p: &GrbmParams) -> Self {
        let mut w = p.w.clone();
        for i in 0..p.visible() {
            let s = p.sigma(i);
            w.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let wb = p.w.tr_mul_vec(&p.b);
        let c = p.c.iter().zip(&wb).map(|(c, x)| c + x).collect();
        Self {
            w,
            b: p.b.clone(),
            c,
            log_sigma: p.log_sigma.clone(),
        }
    }

    fn to_params(&self) -> GrbmParams {
        let mut w = self.w.clone();
        for i in 0..self.b.len() {
            let s = exp(self.log_sigma[i]);
            w.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        let wb = w.tr_mul_vec(&self.b);
        let c = self.c.iter().zip(&wb).map(|(c, x)| c - x).collect();
        GrbmParams {
            w,
            b: self.b.clone(),
            c,
            log_sigma: self.log_sigma.clone(),
        }
    }

    fn hidden_probs(&self, vt: &[f64], out: &mut [f64]) {
        self.w.tr_mul_vec_into(vt, out);
        for (o, c) in out.iter_mut().zip(&self.c) {
            *o = sigmoid(*o + c);
        }
    }

    fn clear(&mut self) {
        self.w.fill(0.0);
        self.b.iter_mut().for_each(|x| *x = 0.0);
        self.c.iter_mut().for_each(|x| *x = 0.0);
        self.log_sigma.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Add `sign` times the sufficient statistics `∂(−E)/∂θ` at `(ṽ, p)`;
    /// `wp` is `W̃p`. The `b` entry is scaled by `σ` later.
    fn accumulate(&mut self, vt: &[f64], p: &[f64], wp: &[f64], sign: f64) {
        self.w.add_outer(sign, vt, p);
        for (c, &pj) in self.c.iter_mut().zip(p) {
            *c += sign * pj;
        }
        for i in 0..vt.len() {
            self.b[i] += sign * (vt[i] - wp[i]);
            self.log_sigma[i] += sign * (vt[i] * vt[i] - vt[i] * wp[i]);
        }
    }

    fn apply(&mut self, step: &Standardized) {
        for (w, s) in self.w.as_mut_slice().iter_mut().zip(step.w.as_slice()) {
            *w += s;
        }
        for (c, s) in self.c.iter_mut().zip(&step.c) {
            *c += s;
        }
        for (b, s) in self.b.iter_mut().zip(&step.b) {
            *b += s;
        }
        let (lo, hi) = (ln(SIGMA_MIN), ln(SIGMA_MAX));
        for (l, s) in self.log_sigma.iter_mut().zip(&step.log_sigma) {
            *l = (*l + s).clamp(lo, hi);
        }
    }

    fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self
                .b
                .iter()
                .chain(&self.c)
                .chain(&self.log_sigma)
                .all(|v| v.is_finite())
    }
}
