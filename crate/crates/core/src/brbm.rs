//! Binary-binary RBM used as the top layer of the deep belief network,
//! trained with fast persistent contrastive divergence.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{log_sum_exp, sigmoid, softplus};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::{Error, Result, TrainHyper};

#[derive(Debug, Clone, PartialEq)]
pub struct BrbmParams {
    /// Visible (H1) × hidden (H2) weights.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// Training-time fast weights; not part of the generative model.
    pub fast_w: Matrix,
    pub fast_decay: f64,
}

impl BrbmParams {
    pub fn zeros(visible: usize, hidden: usize) -> Self {
        Self {
            w: Matrix::zeros(visible, hidden),
            b: vec![0.0; visible],
            c: vec![0.0; hidden],
            fast_w: Matrix::zeros(visible, hidden),
            fast_decay: 0.95,
        }
    }

    /// Small random weights, visible biases at the log-odds of the data means.
    pub fn init_from_data(data: &Matrix, hidden: usize, seed: u64) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::invalid(
                "binary RBM initialisation needs at least one sample",
            ));
        }
        let mut p = Self::zeros(data.cols(), hidden);
        let n = data.rows() as f64;
        for r in 0..data.rows() {
            crate::math::axpy(1.0 / n, data.row(r), &mut p.b);
        }
        for b in p.b.iter_mut() {
            let m = b.clamp(1e-3, 1.0 - 1e-3);
            *b = crate::math::ln(m / (1.0 - m));
        }
        let mut rng = rng::stream(seed, "brbm-init");
        p.w = Matrix::from_fn(data.cols(), hidden, |_, _| 0.01 * rng::normal(&mut rng));
        Ok(p)
    }

    #[inline]
    pub fn visible(&self) -> usize {
        self.b.len()
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.c.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().chain(&self.c).all(|v| v.is_finite())
    }

    /// `F(h1) = −b·h1 − Σⱼ softplus((h1ᵀW)ⱼ + cⱼ)`, so `log p*(h1) = −F(h1)`.
    pub fn free_energy(&self, h1: &[f64]) -> Result<f64> {
        Error::check_len("binary RBM visible vector", self.visible(), h1.len())?;
        Ok(self.free_energy_unchecked(h1))
    }

    pub(crate) fn free_energy_unchecked(&self, h1: &[f64]) -> f64 {
        let act = self.w.tr_mul_vec(h1);
        let hidden: f64 = act.iter().zip(&self.c).map(|(a, c)| softplus(a + c)).sum();
        -crate::math::dot(&self.b, h1) - hidden
    }

    pub fn hidden_probs(&self, h1: &[f64]) -> Vec<f64> {
        let mut out = self.w.tr_mul_vec(h1);
        for (o, c) in out.iter_mut().zip(&self.c) {
            *o = sigmoid(*o + c);
        }
        out
    }

    pub fn visible_probs(&self, h2: &[f64]) -> Vec<f64> {
        let mut out = self.w.mul_vec(h2);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o = sigmoid(*o + b);
        }
        out
    }

    /// One alternation `h2′ ~ p(h2|h1)`, `h1′ ~ p(h1|h2′)`.
    pub fn gibbs_step<R: Rng + ?Sized>(
        &self,
        h1: &[f64],
        use_fast: bool,
        rng: &mut R,
    ) -> (Vec<f64>, Vec<f64>) {
        if use_fast {
            let combined = self.combined_weights();
            gibbs_with(&combined, &self.b, &self.c, h1, rng)
        } else {
            gibbs_with(&self.w, &self.b, &self.c, h1, rng)
        }
    }

    fn combined_weights(&self) -> Matrix {
        let mut m = self.w.clone();
        for (x, f) in m.as_mut_slice().iter_mut().zip(self.fast_w.as_slice()) {
            *x += f;
        }
        m
    }

    /// Exact `log Z` by enumerating the smaller layer. Feasible up to roughly
    /// 24 units on that side.
    pub fn exact_log_z(&self) -> Result<f64> {
        let small = self.hidden().min(self.visible());
        if small > 26 {
            return Err(Error::invalid(
                "exact partition function needs a layer of at most 26 units",
            ));
        }
        let mut terms = Vec::with_capacity(1 << small);
        let mut state = vec![0.0; small];
        for bits in 0..1usize << small {
            for (j, s) in state.iter_mut().enumerate() {
                *s = ((bits >> j) & 1) as f64;
            }
            if self.hidden() <= self.visible() {
                let act = self.w.mul_vec(&state);
                let lin = crate::math::dot(&self.c, &state);
                terms.push(
                    lin + act
                        .iter()
                        .zip(&self.b)
                        .map(|(a, b)| softplus(a + b))
                        .sum::<f64>(),
                );
            } else {
                terms.push(-self.free_energy_unchecked(&state));
            }
        }
        Ok(log_sum_exp(&terms))
    }
}

fn gibbs_with<R: Rng + ?Sized>(
    w: &Matrix,
    b: &[f64],
    c: &[f64],
    h1: &[f64],
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut h2 = w.tr_mul_vec(h1);
    for (x, c) in h2.iter_mut().zip(c) {
        *x = rng::bernoulli(rng, sigmoid(*x + c));
    }
    let mut v = w.mul_vec(&h2);
    for (x, b) in v.iter_mut().zip(b) {
        *x = rng::bernoulli(rng, sigmoid(*x + b));
    }
    (v, h2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpcdOptions {
    pub hyper: TrainHyper,
    pub n_fantasy: usize,
    pub fast_learning_rate: f64,
    pub fast_decay: f64,
}

impl Default for FpcdOptions {
    fn default() -> Self {
        let hyper = TrainHyper {
            learning_rate: 0.01,
            epochs: 30,
            minibatch: 20,
            momentum: 0.5,
            weight_decay: 1e-4,
            seed: 0,
        };
        Self {
            hyper,
            n_fantasy: 100,
            fast_learning_rate: hyper.learning_rate,
            fast_decay: 0.95,
        }
    }
}

/// Minibatch FPCD starting from `init`. Data rows may be probabilities.
///
/// Setting `fast_learning_rate = 0` turns this into plain persistent CD.
pub fn fpcd_train(init: &BrbmParams, data: &Matrix, opts: &FpcdOptions) -> Result<BrbmParams> {
    opts.hyper.validate()?;
    Error::check_len(
        "binary RBM training data width",
        init.visible(),
        data.cols(),
    )?;
    if data.rows() == 0 {
        return Err(Error::invalid(
            "binary RBM training needs at least one sample",
        ));
    }
    if opts.n_fantasy == 0 {
        return Err(Error::invalid("FPCD needs at least one fantasy particle"));
    }
    if !(0.0..1.0).contains(&opts.fast_decay) || !(opts.fast_learning_rate >= 0.0) {
        return Err(Error::invalid(
            "fast_decay must lie in [0, 1) and fast_learning_rate be non-negative",
        ));
    }
    if data.as_slice().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::invalid("binary RBM data must lie in [0, 1]"));
    }
    let mut p = init.clone();
    p.fast_decay = opts.fast_decay;
    if opts.hyper.epochs == 0 {
        return Ok(p);
    }
    let (nv, nh) = (p.visible(), p.hidden());
    let mut rng: Stream = rng::stream(opts.hyper.seed, "brbm-fpcd");
    let mut fantasy: Vec<Vec<f64>> = (0..opts.n_fantasy)
        .map(|_| {
            let row = data.row(rng.random_range(0..data.rows()));
            row.iter().map(|&x| rng::bernoulli(&mut rng, x)).collect()
        })
        .collect();

    let mut grad_w = Matrix::zeros(nv, nh);
    let mut grad_b = vec![0.0; nv];
    let mut grad_c = vec![0.0; nh];
    let mut vel_w = Matrix::zeros(nv, nh);
    let mut vel_b = vec![0.0; nv];
    let mut vel_c = vec![0.0; nh];
    let lr = opts.hyper.learning_rate;
    let mom = opts.hyper.momentum;
    let wd = opts.hyper.weight_decay;

    for _epoch in 0..opts.hyper.epochs {
        let order = rng::permutation(&mut rng, data.rows());
        for batch in order.chunks(opts.hyper.minibatch) {
            grad_w.fill(0.0);
            grad_b.iter_mut().for_each(|x| *x = 0.0);
            grad_c.iter_mut().for_each(|x| *x = 0.0);
            let pos = 1.0 / batch.len() as f64;
            for &row in batch {
                let v = data.row(row);
                let ph = p.hidden_probs(v);
                grad_w.add_outer(pos, v, &ph);
                crate::math::axpy(pos, v, &mut grad_b);
                crate::math::axpy(pos, &ph, &mut grad_c);
            }

            let combined = p.combined_weights();
            let neg = -1.0 / fantasy.len() as f64;
            for particle in fantasy.iter_mut() {
                let (v, _) = gibbs_with(&combined, &p.b, &p.c, particle, &mut rng);
                *particle = v;
                let mut ph = combined.tr_mul_vec(particle);
                for (x, c) in ph.iter_mut().zip(&p.c) {
                    *x = sigmoid(*x + c);
                }
                grad_w.add_outer(neg, particle, &ph);
                crate::math::axpy(neg, particle, &mut grad_b);
                crate::math::axpy(neg, &ph, &mut grad_c);
            }

            for ((vw, w), (g, f)) in vel_w
                .as_mut_slice()
                .iter_mut()
                .zip(p.w.as_mut_slice())
                .zip(grad_w.as_slice().iter().zip(p.fast_w.as_mut_slice()))
            {
                *vw = mom * *vw + lr * (g - wd * *w);
                *w += *vw;
                *f = opts.fast_decay * *f + opts.fast_learning_rate * g;
            }
            for ((v, b), g) in vel_b.iter_mut().zip(p.b.iter_mut()).zip(&grad_b) {
                *v = mom * *v + lr * g;
                *b += *v;
            }
            for ((v, c), g) in vel_c.iter_mut().zip(p.c.iter_mut()).zip(&grad_c) {
                *v = mom * *v + lr * g;
                *c += *v;
            }
            if !p.is_finite() || !p.fast_w.is_finite() {
                return Err(Error::non_finite("binary RBM FPCD update"));
            }
        }
    }
    p.fast_w.fill(0.0);
    Ok(p)
}
