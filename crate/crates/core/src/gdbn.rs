//! Two-layer Gaussian deep belief network: a GRBM over the canonical patch
//! with a binary RBM stacked on its hidden layer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::brbm::{self, BrbmParams, FpcdOptions};
use crate::grbm::{self, CdOptions, CdReport, GrbmParams};
use crate::math::{bernoulli_entropy, exp, ln, log_sum_exp, sigmoid, softplus, sqrt, LN_2PI};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GdbnModel {
    pub layer1: GrbmParams,
    pub layer2: BrbmParams,
    pub patch_width: usize,
    pub patch_height: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdbnConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub layer1: CdOptions,
    pub layer2: FpcdOptions,
}

impl Default for GdbnConfig {
    fn default() -> Self {
        Self {
            hidden1: 256,
            hidden2: 64,
            layer1: CdOptions::default(),
            layer2: FpcdOptions::default(),
        }
    }
}

impl GdbnConfig {
    /// Scales both learning rates, e.g. for warm-started refinement.
    pub fn with_rate_scale(mut self, scale: f64) -> Self {
        self.layer1.hyper.learning_rate *= scale;
        self.layer2.hyper.learning_rate *= scale;
        self.layer2.fast_learning_rate *= scale;
        self
    }

    pub fn with_epochs(mut self, layer1: usize, layer2: usize) -> Self {
        self.layer1.hyper.epochs = layer1;
        self.layer2.hyper.epochs = layer2;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.layer1.hyper.seed = rng::derive(seed, "gdbn-layer1");
        self.layer2.hyper.seed = rng::derive(seed, "gdbn-layer2");
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GdbnReport {
    pub layer1: CdReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AisEstimate {
    pub log_z: f64,
    pub log_z_ci_low: f64,
    pub log_z_ci_high: f64,
    pub n_chains: usize,
    pub n_distributions: usize,
}

/// Monte Carlo lower bound on `log p(v)` in nats, with the standard error of
/// the sampled part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub nats: f64,
    pub stderr: f64,
}

impl GdbnModel {
    pub fn new(
        layer1: GrbmParams,
        layer2: BrbmParams,
        width: usize,
        height: usize,
        channels: usize,
    ) -> Result<Self> {
        Error::check_len(
            "GDBN patch size",
            width * height * channels,
            layer1.visible(),
        )?;
        Error::check_len("GDBN layer chaining", layer1.hidden(), layer2.visible())?;
        Ok(Self {
            layer1,
            layer2,
            patch_width: width,
            patch_height: height,
            channels,
        })
    }

    pub fn visible(&self) -> usize {
        self.layer1.visible()
    }

    pub fn hidden1(&self) -> usize {
        self.layer1.hidden()
    }

    pub fn hidden2(&self) -> usize {
        self.layer2.hidden()
    }

    /// The layer-1 visible biases, used as the "average object".
    pub fn mean_patch(&self) -> &[f64] {
        &self.layer1.b
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.layer1.sigmas()
    }

    /// `p(h1 = 1 | v)` for every row.
    pub fn hidden1_probs(&self, data: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(data.rows(), self.hidden1());
        for r in 0..data.rows() {
            let p = self.layer1.hidden_input(data.row(r));
            for (o, x) in out.row_mut(r).iter_mut().zip(p) {
                *o = sigmoid(x);
            }
        }
        out
    }

    /// `log p(v | h1)` under the layer-1 Gaussian.
    pub fn log_p_v_given_h1(&self, v: &[f64], h1: &[f64]) -> f64 {
        let mu = self.layer1.visible_mean(h1);
        let mut acc = -0.5 * self.visible() as f64 * LN_2PI;
        for i in 0..v.len() {
            let ls = self.layer1.log_sigma[i];
            let z = (v[i] - mu[i]) * exp(-ls);
            acc -= ls + 0.5 * z * z;
        }
        acc
    }

    /// Jensen bound `E_q[log p(v|h1) + log p*(h1)] + H(q) − log Z` with the
    /// factorial `q(h1|v)` and `n_mc` samples from it.
    pub fn variational_bound(
        &self,
        v: &[f64],
        n_mc: usize,
        log_z: f64,
        seed: u64,
    ) -> Result<BoundEstimate> {
        Error::check_len("GDBN bound input", self.visible(), v.len())?;
        if n_mc == 0 {
            return Err(Error::invalid(
                "variational bound needs at least one sample",
            ));
        }
        let q = self.layer1.hidden_conditional(v)?;
        let entropy: f64 = q.iter().map(|&p| bernoulli_entropy(p)).sum();
        let mut rng = rng::stream(seed, "gdbn-bound");
        let mut h = vec![0.0; q.len()];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n_mc {
            for (hj, &p) in h.iter_mut().zip(&q) {
                *hj = rng::bernoulli(&mut rng, p);
            }
            let t = self.log_p_v_given_h1(v, &h) - self.layer2.free_energy_unchecked(&h);
            sum += t;
            sum_sq += t * t;
        }
        let n = n_mc as f64;
        let mean = sum / n;
        let var = if n_mc > 1 {
            ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Ok(BoundEstimate {
            nats: mean + entropy - log_z,
            stderr: sqrt(var / n),
        })
    }

    /// Mean bound over rows and the standard error across rows.
    pub fn mean_bound(
        &self,
        data: &Matrix,
        n_mc: usize,
        log_z: f64,
        seed: u64,
    ) -> Result<BoundEstimate> {
        let mut values = Vec::with_capacity(data.rows());
        for r in 0..data.rows() {
            let s = rng::derive_index(seed, r as u64);
            values.push(self.variational_bound(data.row(r), n_mc, log_z, s)?.nats);
        }
        let (nats, stderr) = crate::math::mean_stderr(&values);
        Ok(BoundEstimate { nats, stderr })
    }

    /// Exact `log p(v)` by enumerating h1; for tiny models only.
    pub fn exact_log_likelihood(&self, v: &[f64]) -> Result<f64> {
        Error::check_len("GDBN likelihood input", self.visible(), v.len())?;
        if self.hidden1() > 20 {
            return Err(Error::invalid(
                "exact likelihood needs at most 20 first-layer units",
            ));
        }
        let log_z = self.layer2.exact_log_z()?;
        let n = self.hidden1();
        let mut h = vec![0.0; n];
        let terms: Vec<f64> = (0..1usize << n)
            .map(|bits| {
                for (j, x) in h.iter_mut().enumerate() {
                    *x = ((bits >> j) & 1) as f64;
                }
                self.log_p_v_given_h1(v, &h) - self.layer2.free_energy_unchecked(&h)
            })
            .collect();
        Ok(log_sum_exp(&terms) - log_z)
    }

    /// Ancestral samples: `gibbs_steps` alternations in the top RBM from a
    /// random start, then `h1 ~ p(h1|h2)` and the mean readout `v = μ(h1)`.
    pub fn sample(&self, n: usize, gibbs_steps: usize, seed: u64) -> Result<Matrix> {
        if gibbs_steps == 0 {
            return Err(Error::invalid("sampling needs at least one Gibbs step"));
        }
        let base = rng::derive(seed, "gdbn-sample");
        let mut out = Matrix::zeros(n, self.visible());
        for i in 0..n {
            let mut rng = rng::indexed(base, i as u64);
            let mut h1: Vec<f64> = (0..self.hidden1())
                .map(|_| rng::bernoulli(&mut rng, 0.5))
                .collect();
            for _ in 0..gibbs_steps {
                h1 = self.layer2.gibbs_step(&h1, false, &mut rng).0;
            }
            out.row_mut(i)
                .copy_from_slice(&self.layer1.visible_mean(&h1));
        }
        Ok(out)
    }
}

/// Layer-wise training from scratch.
pub fn greedy_train(
    patches: &Matrix,
    width: usize,
    height: usize,
    channels: usize,
    config: &GdbnConfig,
) -> Result<(GdbnModel, GdbnReport)> {
    Error::check_len("GDBN patch size", width * height * channels, patches.cols())?;
    let init1 = GrbmParams::init_from_data(
        patches,
        config.hidden1,
        rng::derive(config.layer1.hyper.seed, "init"),
    )?;
    let (layer1, report1) = grbm::cd_train(&init1, patches, &config.layer1)?;
    let probs = hidden_probs_with(&layer1, patches);
    let init2 = BrbmParams::init_from_data(
        &probs,
        config.hidden2,
        rng::derive(config.layer2.hyper.seed, "init"),
    )?;
    let layer2 = brbm::fpcd_train(&init2, &probs, &config.layer2)?;
    let model = GdbnModel::new(layer1, layer2, width, height, channels)?;
    Ok((model, GdbnReport { layer1: report1 }))
}

/// Warm-started layer-wise training from an existing model.
pub fn continue_training(
    model: &GdbnModel,
    patches: &Matrix,
    config: &GdbnConfig,
) -> Result<(GdbnModel, GdbnReport)> {
    Error::check_len("GDBN patch size", model.visible(), patches.cols())?;
    let (layer1, report1) = grbm::cd_train(&model.layer1, patches, &config.layer1)?;
    let probs = hidden_probs_with(&layer1, patches);
    let layer2 = brbm::fpcd_train(&model.layer2, &probs, &config.layer2)?;
    let updated = GdbnModel {
        layer1,
        layer2,
        ..model.clone()
    };
    Ok((updated, GdbnReport { layer1: report1 }))
}

fn hidden_probs_with(layer1: &GrbmParams, data: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(data.rows(), layer1.hidden());
    for r in 0..data.rows() {
        for (o, x) in out
            .row_mut(r)
            .iter_mut()
            .zip(layer1.hidden_input(data.row(r)))
        {
            *o = sigmoid(x);
        }
    }
    out
}

/// AIS estimate of the top RBM's `log Z`.
///
/// The base model keeps the biases and drops the weights; intermediate
/// distributions follow the geometric path `βW` with uniform `β`, one Gibbs
/// sweep each, with `h2` summed out analytically.
pub fn ais_log_z(
    layer2: &BrbmParams,
    n_chains: usize,
    n_dists: usize,
    seed: u64,
) -> Result<AisEstimate> {
    if n_chains < 2 || n_dists < 2 {
        return Err(Error::invalid(
            "AIS needs at least two chains and two distributions",
        ));
    }
    let base_log_z: f64 = layer2.b.iter().map(|&b| softplus(b)).sum::<f64>()
        + layer2.c.iter().map(|&c| softplus(c)).sum::<f64>();
    let root = rng::derive(seed, "ais");
    let nh = layer2.hidden();
    let log_w: Vec<f64> = (0..n_chains)
        .map(|chain| {
            let mut rng: Stream = rng::indexed(root, chain as u64);
            let mut h1: Vec<f64> = layer2
                .b
                .iter()
                .map(|&b| rng::bernoulli(&mut rng, sigmoid(b)))
                .collect();
            let mut act = vec![0.0; nh];
            let mut h2 = vec![0.0; nh];
            let mut lw = 0.0;
            let mut beta_prev = 0.0;
            for k in 1..n_dists {
                let beta = k as f64 / (n_dists - 1) as f64;
                layer2.w.tr_mul_vec_into(&h1, &mut act);
                for j in 0..nh {
                    let cj = layer2.c[j];
                    lw += softplus(beta * act[j] + cj) - softplus(beta_prev * act[j] + cj);
                }
                if k + 1 < n_dists {
                    transition(layer2, beta, &act, &mut h1, &mut h2, &mut rng);
                }
                beta_prev = beta;
            }
            lw
        })
        .collect();
    if log_w.iter().all(|w| !w.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    let lme = log_sum_exp(&log_w) - ln(n_chains as f64);
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ratios: Vec<f64> = log_w.iter().map(|w| exp(w - m)).collect();
    let (mean_r, se_r) = crate::math::mean_stderr(&ratios);
    let rel = 3.0 * se_r / mean_r;
    let log_z = base_log_z + lme;
    Ok(AisEstimate {
        log_z,
        log_z_ci_low: log_z - rel,
        log_z_ci_high: log_z + rel,
        n_chains,
        n_distributions: n_dists,
    })
}

fn transition<R: Rng + ?Sized>(
    layer2: &BrbmParams,
    beta: f64,
    act: &[f64],
    h1: &mut [f64],
    h2: &mut [f64],
    rng: &mut R,
) {
    for j in 0..h2.len() {
        h2[j] = rng::bernoulli(rng, sigmoid(beta * act[j] + layer2.c[j]));
    }
    for i in 0..h1.len() {
        let row = layer2.w.row(i);
        let mut x = 0.0;
        for (w, h) in row.iter().zip(h2.iter()) {
            if *h != 0.0 {
                x += w;
            }
        }
        h1[i] = rng::bernoulli(rng, sigmoid(beta * x + layer2.b[i]));
    }
}
