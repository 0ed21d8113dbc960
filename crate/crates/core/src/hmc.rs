//! Hamiltonian Monte Carlo over the four gaze parameters.
//!
//! The chain runs in the centred chart `q = (a, b, cx, cy)` of
//! [`Gaze::to_centered`], where rotation/scale and translation are nearly
//! decoupled. The chart is a linear reparameterisation, so a flat prior on
//! `u` stays flat on `q`.

use alloc::vec::Vec;

use crate::image::{Canvas, PixelCoord};
use crate::math::sqrt;
use crate::rng::{self, Stream};
use crate::warp::{extract_patch, patch_gradient, Gaze, PatchGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    /// Per-coordinate masses for `(a, b, cx, cy)`.
    pub mass: [f64; 4],
    pub n_iterations: usize,
    pub seed: u64,
    /// Multiply `mass` by the Gauss-Newton curvature of the potential at the
    /// starting point, making `step_size` dimensionless.
    pub adapt_mass: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.08,
            n_leapfrog: 20,
            mass: [1.0; 4],
            n_iterations: 5,
            seed: 0,
            adapt_mass: true,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("HMC step_size must be positive and finite"));
        }
        if self.mass.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::invalid("HMC masses must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HmcTrace {
    pub samples: Vec<Gaze>,
    /// Potential of each recorded sample, in nats.
    pub potentials: Vec<f64>,
    pub accept_flags: Vec<bool>,
}

impl HmcTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.accept_flags.is_empty() {
            return 0.0;
        }
        self.accept_flags.iter().filter(|&&a| a).count() as f64 / self.accept_flags.len() as f64
    }

    /// The recorded sample of lowest potential.
    pub fn map_sample(&self) -> Option<(Gaze, f64)> {
        self.samples
            .iter()
            .zip(&self.potentials)
            .filter(|(_, u)| u.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(g, u)| (*g, *u))
    }
}

/// A differentiable potential over four coordinates.
pub trait Potential {
    fn value(&self, q: &[f64; 4]) -> f64;
    fn value_and_grad(&self, q: &[f64; 4]) -> (f64, [f64; 4]);
}

/// `U(u) = ½ Σᵢ (xᵢ(u) − vᵢ)² / σᵢ²`.
pub fn potential(u: &Gaze, v: &[f64], canvas: &Canvas, grid: &PatchGrid, sigma: &[f64]) -> f64 {
    let x = extract_patch(canvas, grid, u);
    x.values
        .iter()
        .zip(v)
        .zip(sigma)
        .map(|((x, v), s)| {
            let r = (x - v) / s;
            0.5 * r * r
        })
        .sum()
}

/// `∂U/∂u = Σᵢ (xᵢ(u) − vᵢ)/σᵢ² · ∂xᵢ/∂u`.
pub fn potential_grad(
    u: &Gaze,
    v: &[f64],
    canvas: &Canvas,
    grid: &PatchGrid,
    sigma: &[f64],
) -> [f64; 4] {
    value_and_grad_u(u, v, canvas, grid, sigma).1
}

fn value_and_grad_u(
    u: &Gaze,
    v: &[f64],
    canvas: &Canvas,
    grid: &PatchGrid,
    sigma: &[f64],
) -> (f64, [f64; 4]) {
    let x = extract_patch(canvas, grid, u);
    let jac = patch_gradient(canvas, grid, u);
    let mut value = 0.0;
    let mut g = [0.0; 4];
    for (i, row) in jac.iter().enumerate() {
        let inv = 1.0 / (sigma[i] * sigma[i]);
        let r = x.values[i] - v[i];
        value += 0.5 * r * r * inv;
        for k in 0..4 {
            g[k] += r * inv * row[k];
        }
    }
    (value, g)
}

/// `∂U/∂q` from `∂U/∂u` for the centred chart about `c`.
fn grad_to_centered(g: [f64; 4], c: PixelCoord) -> [f64; 4] {
    [
        g[0] - c.x * g[2] - c.y * g[3],
        g[1] + c.y * g[2] - c.x * g[3],
        g[2],
        g[3],
    ]
}

/// The gaze potential expressed in the centred chart.
pub struct GazePotential<'a> {
    pub v: &'a [f64],
    pub canvas: &'a Canvas,
    pub grid: &'a PatchGrid,
    pub sigma: &'a [f64],
}

impl GazePotential<'_> {
    fn gaze(&self, q: &[f64; 4]) -> Gaze {
        Gaze::from_centered(*q, self.grid.center())
    }

    /// Diagonal of `JᵀΣ⁻²J` in the centred chart.
    pub fn gauss_newton_diagonal(&self, q: &[f64; 4]) -> [f64; 4] {
        let c = self.grid.center();
        let jac = patch_gradient(self.canvas, self.grid, &self.gaze(q));
        let mut d = [0.0; 4];
        for (row, s) in jac.iter().zip(self.sigma) {
            let r = grad_to_centered(*row, c);
            let inv = 1.0 / (s * s);
            for k in 0..4 {
                d[k] += r[k] * r[k] * inv;
            }
        }
        d
    }
}

impl Potential for GazePotential<'_> {
    fn value(&self, q: &[f64; 4]) -> f64 {
        potential(&self.gaze(q), self.v, self.canvas, self.grid, self.sigma)
    }

    fn value_and_grad(&self, q: &[f64; 4]) -> (f64, [f64; 4]) {
        let (u, g) = value_and_grad_u(&self.gaze(q), self.v, self.canvas, self.grid, self.sigma);
        (u, grad_to_centered(g, self.grid.center()))
    }
}

/// `n` leap-frog steps with `du/dt = M⁻¹r`, `dr/dt = −∇U`. Returns the final
/// position and momentum, or `None` if the potential became non-finite.
pub fn leapfrog<P: Potential + ?Sized>(
    q: [f64; 4],
    r: [f64; 4],
    potential: &P,
    step: f64,
    n: usize,
    mass: &[f64; 4],
) -> Option<([f64; 4], [f64; 4])> {
    let (mut q, mut r) = (q, r);
    let (_, mut g) = potential.value_and_grad(&q);
    for _ in 0..n {
        for k in 0..4 {
            r[k] -= 0.5 * step * g[k];
            q[k] += step * r[k] / mass[k];
        }
        let (u, ng) = potential.value_and_grad(&q);
        if !u.is_finite() || ng.iter().any(|x| !x.is_finite()) {
            return None;
        }
        g = ng;
        for k in 0..4 {
            r[k] -= 0.5 * step * g[k];
        }
    }
    Some((q, r))
}

fn kinetic(r: &[f64; 4], mass: &[f64; 4]) -> f64 {
    (0..4).map(|k| 0.5 * r[k] * r[k] / mass[k]).sum()
}

/// Generic HMC chain from `q0` with explicit masses. Samples are returned as
/// raw coordinates packed into [`Gaze`] values.
pub fn run_chain<P: Potential + ?Sized>(
    q0: [f64; 4],
    potential: &P,
    config: &HmcConfig,
    mass: [f64; 4],
) -> Result<HmcTrace> {
    config.validate()?;
    if mass.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::invalid("HMC masses must be positive and finite"));
    }
    let mut rng: Stream = rng::stream(config.seed, "hmc");
    let mut q = q0;
    let mut u = potential.value(&q);
    let mut trace = HmcTrace::default();
    for _ in 0..config.n_iterations {
        let mut r = [0.0; 4];
        for k in 0..4 {
            r[k] = sqrt(mass[k]) * rng::normal(&mut rng);
        }
        let h0 = u + kinetic(&r, &mass);
        let proposal = leapfrog(q, r, potential, config.step_size, config.n_leapfrog, &mass);
        let threshold = rng::uniform(&mut rng);
        let mut accepted = false;
        if let Some((nq, nr)) = proposal {
            let nu = potential.value(&nq);
            let h1 = nu + kinetic(&nr, &mass);
            if h1.is_finite() && (h1 <= h0 || threshold < crate::math::exp(h0 - h1)) {
                q = nq;
                u = nu;
                accepted = true;
            }
        }
        trace.samples.push(Gaze::from_array(q));
        trace.potentials.push(u);
        trace.accept_flags.push(accepted);
    }
    Ok(trace)
}

/// HMC over the gaze posterior `p(u | x, v)` starting at `u0`.
pub fn run(
    u0: &Gaze,
    v: &[f64],
    canvas: &Canvas,
    grid: &PatchGrid,
    sigma: &[f64],
    config: &HmcConfig,
) -> Result<HmcTrace> {
    let d = grid.len() * canvas.channels();
    Error::check_len("HMC canonical image", d, v.len())?;
    Error::check_len("HMC noise scales", d, sigma.len())?;
    let pot = GazePotential {
        v,
        canvas,
        grid,
        sigma,
    };
    let c = grid.center();
    let q0 = u0.to_centered(c);
    let mut mass = config.mass;
    if config.adapt_mass {
        let gn = pot.gauss_newton_diagonal(&q0);
        for k in 0..4 {
            mass[k] *= gn[k].max(MASS_FLOOR);
        }
    }
    let mut trace = run_chain(q0, &pot, config, mass)?;
    for s in trace.samples.iter_mut() {
        *s = Gaze::from_centered(s.as_array(), c);
    }
    Ok(trace)
}

const MASS_FLOOR: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{cos, sin};
    use alloc::vec;

    struct Quadratic;

    impl Potential for Quadratic {
        fn value(&self, q: &[f64; 4]) -> f64 {
            0.5 * q.iter().map(|x| x * x).sum::<f64>()
        }

        fn value_and_grad(&self, q: &[f64; 4]) -> (f64, [f64; 4]) {
            (self.value(q), *q)
        }
    }

    fn smooth_canvas() -> Canvas {
        Canvas::from_fn(64, 64, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.3 * sin(x / 5.0) * cos(y / 7.0) + 0.1 * cos((x + y) / 9.0)
        })
        .unwrap()
    }

    #[test]
    fn potential_examples() {
        let canvas = smooth_canvas();
        let grid = PatchGrid::new(8, 8);
        let u = Gaze::new(0.05, -0.02, 20.3, 17.6);
        let v = extract_patch(&canvas, &grid, &u).values;
        let sigma = vec![0.1; 64];
        assert!(potential(&u, &v, &canvas, &grid, &sigma).abs() < 1e-24);
        assert!(potential_grad(&u, &v, &canvas, &grid, &sigma)
            .iter()
            .all(|g| g.abs() < 1e-20));

        let ones = Canvas::filled(40, 40, 1, 1.0).unwrap();
        let grid24 = PatchGrid::new(24, 24);
        let u = potential(
            &Gaze::translation(5.0, 5.0),
            &vec![0.0; 576],
            &ones,
            &grid24,
            &vec![1.0; 576],
        );
        assert!((u - 288.0).abs() < 1e-12);
        let g = potential_grad(
            &Gaze::translation(5.0, 5.0),
            &vec![0.3; 576],
            &ones,
            &grid24,
            &vec![1.0; 576],
        );
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn potential_matches_composed_oracle() {
        let canvas = smooth_canvas();
        let grid = PatchGrid::new(6, 5);
        let v: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let sigma: Vec<f64> = (0..30).map(|i| 0.2 + 0.01 * i as f64).collect();
        let u = Gaze::new(-0.1, 0.07, 12.2, 30.9);
        let mut oracle = 0.0;
        for r in 0..5 {
            for c in 0..6 {
                let (px, py) = (c as f64, r as f64);
                let qx = (1.0 + u.a) * px - u.b * py + u.dx;
                let qy = u.b * px + (1.0 + u.a) * py + u.dy;
                let x = canvas.bilinear_sample(PixelCoord::new(qx, qy), 0);
                let i = r * 6 + c;
                oracle += 0.5 * (x - v[i]).powi(2) / sigma[i].powi(2);
            }
        }
        assert!((potential(&u, &v, &canvas, &grid, &sigma) - oracle).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences_on_smooth_canvas() {
        let canvas = smooth_canvas();
        let grid = PatchGrid::new(10, 10);
        let v: Vec<f64> = (0..100)
            .map(|i| 0.5 + 0.2 * (i as f64 * 0.11).cos())
            .collect();
        let sigma = vec![0.2; 100];
        for u in [
            Gaze::new(0.03, 0.01, 20.37, 21.81),
            Gaze::new(-0.12, 0.05, 31.13, 12.42),
        ] {
            let g = potential_grad(&u, &v, &canvas, &grid, &sigma);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..4 {
                let h = 1e-4;
                let mut up = u.as_array();
                let mut dn = u.as_array();
                up[k] += h;
                dn[k] -= h;
                let fd = (potential(&Gaze::from_array(up), &v, &canvas, &grid, &sigma)
                    - potential(&Gaze::from_array(dn), &v, &canvas, &grid, &sigma))
                    / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-2 * norm,
                    "coord {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn centered_gradient_is_chain_rule() {
        let canvas = smooth_canvas();
        let grid = PatchGrid::new(10, 10);
        let v = vec![0.4; 100];
        let sigma = vec![0.3; 100];
        let pot = GazePotential {
            v: &v,
            canvas: &canvas,
            grid: &grid,
            sigma: &sigma,
        };
        let q = Gaze::new(0.02, -0.03, 22.11, 19.37).to_centered(grid.center());
        let (_, g) = pot.value_and_grad(&q);
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..4 {
            let h = 1e-5;
            let (mut up, mut dn) = (q, q);
            up[k] += h;
            dn[k] -= h;
            let fd = (pot.value(&up) - pot.value(&dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-2 * norm, "{fd} vs {}", g[k]);
        }
    }

    #[test]
    fn tiny_steps_are_always_accepted() {
        let canvas = smooth_canvas().with_gradients(1.0);
        let grid = PatchGrid::new(12, 12);
        let truth = Gaze::translation(20.0, 20.0);
        let v = extract_patch(&canvas, &grid, &truth).values;
        let sigma = vec![0.1; 144];
        let cfg = HmcConfig {
            step_size: 1e-8,
            n_iterations: 100,
            ..HmcConfig::default()
        };
        let trace = run(
            &Gaze::translation(21.0, 19.5),
            &v,
            &canvas,
            &grid,
            &sigma,
            &cfg,
        )
        .unwrap();
        assert_eq!(trace.acceptance_rate(), 1.0);
    }

    #[test]
    fn leapfrog_is_reversible() {
        let canvas = smooth_canvas();
        let grid = PatchGrid::new(10, 10);
        let v = vec![0.5; 100];
        let sigma = vec![0.5; 100];
        let pot = GazePotential {
            v: &v,
            canvas: &canvas,
            grid: &grid,
            sigma: &sigma,
        };
        let q0 = Gaze::new(0.01, 0.02, 25.3, 24.1).to_centered(grid.center());
        let r0 = [0.3, -0.2, 1.1, 0.4];
        let mass = [50.0, 50.0, 1.0, 1.0];
        let (q1, r1) = leapfrog(q0, r0, &pot, 0.05, 20, &mass).unwrap();
        let back = [-r1[0], -r1[1], -r1[2], -r1[3]];
        let (q2, _) = leapfrog(q1, back, &pot, 0.05, 20, &mass).unwrap();
        for k in 0..4 {
            assert!((q2[k] - q0[k]).abs() < 1e-8);
        }
    }

    /// Smooth, anharmonic and coupled.
    struct Anharmonic;

    impl Potential for Anharmonic {
        fn value(&self, q: &[f64; 4]) -> f64 {
            q.iter()
                .map(|x| 0.25 * x.powi(4) + 0.5 * x * x)
                .sum::<f64>()
                + cos(q[0] + q[1]) * sin(q[2] - q[3])
        }

        fn value_and_grad(&self, q: &[f64; 4]) -> (f64, [f64; 4]) {
            let mut g = [0.0; 4];
            for k in 0..4 {
                g[k] = q[k].powi(3) + q[k];
            }
            let (s01, c01) = (sin(q[0] + q[1]), cos(q[0] + q[1]));
            let (s23, c23) = (sin(q[2] - q[3]), cos(q[2] - q[3]));
            g[0] -= s01 * s23;
            g[1] -= s01 * s23;
            g[2] += c01 * c23;
            g[3] -= c01 * c23;
            (self.value(q), g)
        }
    }

    #[test]
    fn energy_error_is_second_order() {
        // Bilinear interpolation has derivative jumps on lattice lines, so the
        // order check uses a smooth potential.
        let mass = [1.0, 2.0, 0.5, 1.5];
        let q0 = [0.3, -0.4, 0.8, 0.1];
        let r0 = [0.5, 0.2, -0.7, 0.9];
        let h0 = Anharmonic.value(&q0) + kinetic(&r0, &mass);
        let drift = |eps: f64, n: usize| {
            let (q, r) = leapfrog(q0, r0, &Anharmonic, eps, n, &mass).unwrap();
            (Anharmonic.value(&q) + kinetic(&r, &mass) - h0).abs()
        };
        let ratio = drift(0.04, 25) / drift(0.02, 50);
        assert!((2.5..=6.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn quadratic_potential_gives_unit_covariance() {
        let cfg = HmcConfig {
            step_size: 0.3,
            n_leapfrog: 5,
            n_iterations: 20_000,
            seed: 3,
            ..HmcConfig::default()
        };
        let trace = run_chain([0.0; 4], &Quadratic, &cfg, [1.0; 4]).unwrap();
        let n = trace.len() as f64;
        let xs: Vec<[f64; 4]> = trace.samples.iter().map(|g| g.as_array()).collect();
        let mut mean = [0.0; 4];
        for x in &xs {
            for k in 0..4 {
                mean[k] += x[k] / n;
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let cov = xs
                    .iter()
                    .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov - target).abs() <= 0.1, "cov[{i}][{j}] = {cov}");
            }
        }
    }

    #[test]
    fn trace_bookkeeping_and_validation() {
        let cfg = HmcConfig {
            n_iterations: 7,
            ..HmcConfig::default()
        };
        let t = run_chain([1.0; 4], &Quadratic, &cfg, [1.0; 4]).unwrap();
        assert_eq!(t.samples.len(), 7);
        assert_eq!(t.potentials.len(), 7);
        assert_eq!(t.accept_flags.len(), 7);
        assert!(t.map_sample().is_some());
        let bad = HmcConfig {
            step_size: 0.0,
            ..HmcConfig::default()
        };
        assert!(run_chain([0.0; 4], &Quadratic, &bad, [1.0; 4]).is_err());
        assert!(run_chain([0.0; 4], &Quadratic, &cfg, [1.0, 0.0, 1.0, 1.0]).is_err());
    }
}
