//! The 2D similarity transform that couples the canonical patch to the scene.
//!
//! A gaze `u = (a, b, dx, dy)` maps a canonical lattice point `p` to
//! `[[1+a, -b], [b, 1+a]] p + [dx, dy]`. The map is linear in `u`, which gives
//! a constant 2×4 Jacobian per lattice point.

use alloc::vec::Vec;

use crate::image::{Canvas, PixelCoord};
use crate::math::{atan2, cos, exp, hypot, ln, sin};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gaze {
    pub a: f64,
    pub b: f64,
    pub dx: f64,
    pub dy: f64,
}

/// `(a, b)` such that `[[1+a, -b], [b, 1+a]] = dscale * R(dtheta)`.
pub fn to_ab(dtheta: f64, dscale: f64) -> (f64, f64) {
    debug_assert!(dscale > 0.0);
    (dscale * cos(dtheta) - 1.0, dscale * sin(dtheta))
}

#[inline]
pub fn warp_point(p: PixelCoord, u: &Gaze) -> PixelCoord {
    PixelCoord::new(
        (1.0 + u.a) * p.x - u.b * p.y + u.dx,
        u.b * p.x + (1.0 + u.a) * p.y + u.dy,
    )
}

/// `∂w(p, u)/∂u` for `u = (a, b, dx, dy)`; independent of `u`.
#[inline]
pub fn warp_jacobian(p: PixelCoord) -> [[f64; 4]; 2] {
    [[p.x, -p.y, 1.0, 0.0], [p.y, p.x, 0.0, 1.0]]
}

impl Gaze {
    pub const IDENTITY: Gaze = Gaze {
        a: 0.0,
        b: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub const fn new(a: f64, b: f64, dx: f64, dy: f64) -> Self {
        Self { a, b, dx, dy }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::new(0.0, 0.0, dx, dy)
    }

    pub fn from_pose(dtheta: f64, dscale: f64, dx: f64, dy: f64) -> Self {
        let (a, b) = to_ab(dtheta, dscale);
        Self::new(a, b, dx, dy)
    }

    /// Gaze that places the centre of `grid` at `center` with the given
    /// rotation and scale.
    pub fn centered_at(grid: &PatchGrid, center: PixelCoord, dtheta: f64, dscale: f64) -> Self {
        let (a, b) = to_ab(dtheta, dscale);
        let c = grid.center();
        let mut g = Gaze::new(a, b, 0.0, 0.0);
        let moved = warp_point(c, &g);
        g.dx = center.x - moved.x;
        g.dy = center.y - moved.y;
        g
    }

    pub fn scale(&self) -> f64 {
        hypot(1.0 + self.a, self.b)
    }

    pub fn angle(&self) -> f64 {
        atan2(self.b, 1.0 + self.a)
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite()) && self.scale() > 0.0
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.a, self.b, self.dx, self.dy]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    #[inline]
    pub fn warp(&self, p: PixelCoord) -> PixelCoord {
        warp_point(p, self)
    }

    /// Coordinates `(a, b, cx, cy)` where `(cx, cy)` is the image of `center`.
    /// Rotation/scale and translation are decoupled in this chart.
    pub fn to_centered(&self, center: PixelCoord) -> [f64; 4] {
        let c = self.warp(center);
        [self.a, self.b, c.x, c.y]
    }

    pub fn from_centered(q: [f64; 4], center: PixelCoord) -> Self {
        let mut g = Gaze::new(q[0], q[1], 0.0, 0.0);
        let moved = g.warp(center);
        g.dx = q[2] - moved.x;
        g.dy = q[3] - moved.y;
        g
    }

    /// Apply a correction expressed in this gaze's own canonical frame,
    /// rotating and scaling about `center`.
    pub fn compose(&self, update: &GazeUpdate, center: PixelCoord) -> Gaze {
        let z = Cx::new(1.0 + self.a, self.b);
        let d = Cx::new(self.dx, self.dy);
        let s = Cx::polar(exp(update.dscale), update.dtheta);
        let c = Cx::new(center.x, center.y);
        let t = Cx::new(update.dx, update.dy);
        let nz = z.mul(s);
        let nd = z.mul(c.sub(s.mul(c)).add(t)).add(d);
        Gaze::new(nz.re - 1.0, nz.im, nd.re, nd.im)
    }

    /// The correction that [`Gaze::compose`] needs to turn `self` into `target`.
    pub fn correction_to(&self, target: &Gaze, center: PixelCoord) -> GazeUpdate {
        let z = Cx::new(1.0 + self.a, self.b);
        let zt = Cx::new(1.0 + target.a, target.b);
        let d = Cx::new(self.dx, self.dy);
        let dt = Cx::new(target.dx, target.dy);
        let c = Cx::new(center.x, center.y);
        let s = zt.div(z);
        let t = dt.sub(d).div(z).sub(c).add(s.mul(c));
        GazeUpdate {
            dx: t.re,
            dy: t.im,
            dtheta: atan2(s.im, s.re),
            dscale: ln(s.abs()),
        }
    }

    pub fn to_le_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (k, v) in self.as_array().iter().enumerate() {
            out[k * 8..k * 8 + 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        Error::check_len("gaze bytes", 32, bytes.len())?;
        let mut v = [0.0; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[k * 8..k * 8 + 8]);
            *slot = f64::from_le_bytes(b);
        }
        Ok(Gaze::from_array(v))
    }
}

/// A pose correction in the current gaze's canonical frame: translation in
/// canonical pixels, rotation in radians and `dscale` as a log scale ratio.
/// The all-zero update leaves a gaze unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GazeUpdate {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub dscale: f64,
}

impl GazeUpdate {
    pub const ZERO: GazeUpdate = GazeUpdate {
        dx: 0.0,
        dy: 0.0,
        dtheta: 0.0,
        dscale: 0.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dtheta, self.dscale]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dtheta: v[2],
            dscale: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy)]
struct Cx {
    re: f64,
    im: f64,
}

impl Cx {
    fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }
    fn polar(r: f64, theta: f64) -> Self {
        Self::new(r * cos(theta), r * sin(theta))
    }
    fn add(self, o: Cx) -> Cx {
        Cx::new(self.re + o.re, self.im + o.im)
    }
    fn sub(self, o: Cx) -> Cx {
        Cx::new(self.re - o.re, self.im - o.im)
    }
    fn mul(self, o: Cx) -> Cx {
        Cx::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
    fn div(self, o: Cx) -> Cx {
        let den = o.re * o.re + o.im * o.im;
        Cx::new(
            (self.re * o.re + self.im * o.im) / den,
            (self.im * o.re - self.re * o.im) / den,
        )
    }
    fn abs(self) -> f64 {
        hypot(self.re, self.im)
    }
}

/// A rectangular lattice of canonical coordinates, row-major.
///
/// The canonical patch lattice runs `[0, W-1] × [0, H-1]`; windows extend it
/// symmetrically with a negative origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    width: usize,
    height: usize,
    origin: PixelCoord,
    coords: Vec<PixelCoord>,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self::with_origin(width, height, PixelCoord::new(0.0, 0.0))
    }

    pub fn with_origin(width: usize, height: usize, origin: PixelCoord) -> Self {
        let mut coords = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                coords.push(PixelCoord::new(origin.x + c as f64, origin.y + r as f64));
            }
        }
        Self {
            width,
            height,
            origin,
            coords,
        }
    }

    /// A unit-spaced lattice `factor` times wider than `self`, sharing its centre.
    pub fn window(&self, factor: usize) -> PatchGrid {
        let w = self.width * factor;
        let h = self.height * factor;
        let ox = self.origin.x - ((factor - 1) * self.width / 2) as f64;
        let oy = self.origin.y - ((factor - 1) * self.height / 2) as f64;
        PatchGrid::with_origin(w, h, PixelCoord::new(ox, oy))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[PixelCoord] {
        &self.coords
    }

    pub fn center(&self) -> PixelCoord {
        PixelCoord::new(
            self.origin.x + (self.width as f64 - 1.0) / 2.0,
            self.origin.y + (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Corners of the pixel footprint `[-0.5, W-0.5] × [-0.5, H-0.5]`,
    /// counter-clockwise in image coordinates.
    pub fn footprint(&self) -> [PixelCoord; 4] {
        let x0 = self.origin.x - 0.5;
        let y0 = self.origin.y - 0.5;
        let x1 = self.origin.x + self.width as f64 - 0.5;
        let y1 = self.origin.y + self.height as f64 - 0.5;
        [
            PixelCoord::new(x0, y0),
            PixelCoord::new(x1, y0),
            PixelCoord::new(x1, y1),
            PixelCoord::new(x0, y1),
        ]
    }
}

/// Values extracted on a lattice, one plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Patch {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        Error::check_len("patch values", width * height * channels, values.len())?;
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

// Anti-aliasing filter applied in canonical units: σ = 0.5 canonical pixels
// becomes 0.5·s canvas pixels after warping. Taps every half pixel out to 3σ.
/// Sub-sample offsets of the antialiasing filter, in patch pixels.
pub const AA_OFFSETS: [f64; 7] = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];

fn aa_weights() -> [f64; 7] {
    let mut w = [0.0; 7];
    for (k, o) in AA_OFFSETS.iter().enumerate() {
        w[k] = exp(-o * o / (2.0 * 0.25));
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Whether `extract_patch` low-pass filters at this gaze (minification only).
#[inline]
pub fn antialiased(u: &Gaze) -> bool {
    u.scale() > 1.0
}

/// `x(u)`: bilinear samples of `canvas` at the warped lattice.
pub fn extract_patch(canvas: &Canvas, grid: &PatchGrid, u: &Gaze) -> Patch {
    let channels = canvas.channels();
    let mut values = Vec::with_capacity(grid.len() * channels);
    if antialiased(u) {
        let w = aa_weights();
        for ch in 0..channels {
            for &p in grid.coords() {
                let mut acc = 0.0;
                for (ky, oy) in AA_OFFSETS.iter().enumerate() {
                    for (kx, ox) in AA_OFFSETS.iter().enumerate() {
                        let q = warp_point(PixelCoord::new(p.x + ox, p.y + oy), u);
                        acc += w[ky] * w[kx] * canvas.bilinear_sample(q, ch);
                    }
                }
                values.push(acc);
            }
        }
    } else {
        for ch in 0..channels {
            for &p in grid.coords() {
                values.push(canvas.bilinear_sample(warp_point(p, u), ch));
            }
        }
    }
    Patch {
        width: grid.width(),
        height: grid.height(),
        channels,
        values,
    }
}

#[inline]
fn image_gradient(canvas: &Canvas, q: PixelCoord, ch: usize) -> [f64; 2] {
    match canvas.sample_gradient(q, ch) {
        Some(g) => g,
        None => canvas.bilinear_derivative(q, ch),
    }
}

#[inline]
fn chain(g: [f64; 2], p: PixelCoord) -> [f64; 4] {
    let j = warp_jacobian(p);
    [
        g[0] * j[0][0] + g[1] * j[1][0],
        g[0] * j[0][1] + g[1] * j[1][1],
        g[0] * j[0][2] + g[1] * j[1][2],
        g[0] * j[0][3] + g[1] * j[1][3],
    ]
}

/// `∂x(u)/∂u`, one row per extracted value.
///
/// When the canvas carries gradient images they are sampled at the warped
/// points. Without them the derivative of the bilinear surface itself is
/// used, which is the exact Jacobian of [`extract_patch`] away from lattice
/// lines.
pub fn patch_gradient(canvas: &Canvas, grid: &PatchGrid, u: &Gaze) -> Vec<[f64; 4]> {
    let channels = canvas.channels();
    let mut rows = Vec::with_capacity(grid.len() * channels);
    if antialiased(u) {
        let w = aa_weights();
        for ch in 0..channels {
            for &p in grid.coords() {
                let mut acc = [0.0; 4];
                for (ky, oy) in AA_OFFSETS.iter().enumerate() {
                    for (kx, ox) in AA_OFFSETS.iter().enumerate() {
                        let pt = PixelCoord::new(p.x + ox, p.y + oy);
                        let g = image_gradient(canvas, warp_point(pt, u), ch);
                        let r = chain(g, pt);
                        let wt = w[ky] * w[kx];
                        for k in 0..4 {
                            acc[k] += wt * r[k];
                        }
                    }
                }
                rows.push(acc);
            }
        }
    } else {
        for ch in 0..channels {
            for &p in grid.coords() {
                let g = image_gradient(canvas, warp_point(p, u), ch);
                rows.push(chain(g, p));
            }
        }
    }
    rows
}
