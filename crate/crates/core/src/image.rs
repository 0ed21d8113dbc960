//! Scene rasters: bilinear sampling with clamp-to-edge borders, Gaussian
//! smoothing, anti-aliased downsampling and gradient images.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{ceil, exp, floor, round};
use crate::{Error, Result};

/// A real-valued position on a raster, `x` along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Central-difference gradients of a Gaussian-smoothed copy of a canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientImages {
    sigma_blur: f64,
    grad_x: Vec<f64>,
    grad_y: Vec<f64>,
}

impl GradientImages {
    pub fn sigma_blur(&self) -> f64 {
        self.sigma_blur
    }

    pub fn grad_x(&self) -> &[f64] {
        &self.grad_x
    }

    pub fn grad_y(&self) -> &[f64] {
        &self.grad_y
    }
}

/// A scene image with values in `[0, 1]`, stored as one row-major plane per
/// channel. Immutable once built; gradient images are attached by
/// [`Canvas::with_gradients`], which returns a new canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
    gradients: Option<GradientImages>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("canvas must be at least 1x1"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("canvas channels must be 1 or 3"));
        }
        Error::check_len("canvas pixels", width * height * channels, pixels.len())?;
        Ok(Self {
            width,
            height,
            channels,
            pixels,
            gradients: None,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(c, r));
            }
        }
        Self::new(width, height, 1, pixels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.pixels[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, channel: usize) -> f64 {
        self.pixels[(channel * self.height + y) * self.width + x]
    }

    pub fn gradients(&self) -> Option<&GradientImages> {
        self.gradients.as_ref()
    }

    /// Bilinear interpolation at `coord`, clamped to the border first.
    #[inline]
    pub fn bilinear_sample(&self, coord: PixelCoord, channel: usize) -> f64 {
        debug_assert!(channel < self.channels);
        sample_plane(self.plane(channel), self.width, self.height, coord)
    }

    /// Spatial derivative `(∂/∂x, ∂/∂y)` of the bilinear surface at `coord`.
    ///
    /// Zero along an axis where the coordinate is clamped. On a lattice line
    /// the cell to the right / below is used.
    #[inline]
    pub fn bilinear_derivative(&self, coord: PixelCoord, channel: usize) -> [f64; 2] {
        derivative_plane(self.plane(channel), self.width, self.height, coord)
    }

    /// Bilinear sample of the attached gradient images.
    #[inline]
    pub fn sample_gradient(&self, coord: PixelCoord, channel: usize) -> Option<[f64; 2]> {
        let g = self.gradients.as_ref()?;
        let n = self.width * self.height;
        let range = channel * n..(channel + 1) * n;
        Some([
            sample_plane(&g.grad_x[range.clone()], self.width, self.height, coord),
            sample_plane(&g.grad_y[range], self.width, self.height, coord),
        ])
    }

    /// Separable Gaussian smoothing truncated at 3σ with clamp-to-edge borders.
    /// `sigma <= 0` returns a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Canvas {
        let mut out = self.clone();
        out.gradients = None;
        if sigma <= 0.0 {
            return out;
        }
        let kernel = gaussian_kernel(sigma);
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        for ch in 0..self.channels {
            let src = self.plane(ch);
            blur_rows(src, &mut tmp, w, h, &kernel);
            let n = w * h;
            blur_cols(&tmp, &mut out.pixels[ch * n..(ch + 1) * n], w, h, &kernel);
        }
        out
    }

    /// Attach central-difference gradient images of a Gaussian-smoothed copy.
    pub fn with_gradients(&self, sigma_blur: f64) -> Canvas {
        let blurred = self.gaussian_blur(sigma_blur);
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let mut grad_x = vec![0.0; n * self.channels];
        let mut grad_y = vec![0.0; n * self.channels];
        for ch in 0..self.channels {
            let src = blurred.plane(ch);
            let gx = &mut grad_x[ch * n..(ch + 1) * n];
            let gy = &mut grad_y[ch * n..(ch + 1) * n];
            for r in 0..h {
                let up = r.saturating_sub(1);
                let down = (r + 1).min(h - 1);
                for c in 0..w {
                    let left = c.saturating_sub(1);
                    let right = (c + 1).min(w - 1);
                    gx[r * w + c] = (src[r * w + right] - src[r * w + left]) / 2.0;
                    gy[r * w + c] = (src[down * w + c] - src[up * w + c]) / 2.0;
                }
            }
        }
        let mut out = self.clone();
        out.gradients = Some(GradientImages {
            sigma_blur,
            grad_x,
            grad_y,
        });
        out
    }

    /// Minify by `factor` with a `0.5 * factor` Gaussian pre-blur followed by
    /// bilinear resampling at pixel centres. `factor == 1` copies.
    pub fn downsample_antialias(&self, factor: f64) -> Result<Canvas> {
        if !factor.is_finite() || factor < 1.0 {
            return Err(Error::invalid("downsample factor must be finite and >= 1"));
        }
        if factor == 1.0 {
            let mut out = self.clone();
            out.gradients = None;
            return Ok(out);
        }
        let blurred = self.gaussian_blur(0.5 * factor);
        let out_w = (floor(self.width as f64 / factor) as usize).max(1);
        let out_h = (floor(self.height as f64 / factor) as usize).max(1);
        let mut pixels = Vec::with_capacity(out_w * out_h * self.channels);
        for ch in 0..self.channels {
            for r in 0..out_h {
                for c in 0..out_w {
                    let src = PixelCoord::new(
                        (c as f64 + 0.5) * factor - 0.5,
                        (r as f64 + 0.5) * factor - 0.5,
                    );
                    pixels.push(blurred.bilinear_sample(src, ch));
                }
            }
        }
        Canvas::new(out_w, out_h, self.channels, pixels)
    }

    /// Average the channels into a single grayscale plane.
    pub fn to_grayscale(&self) -> Canvas {
        if self.channels == 1 {
            let mut out = self.clone();
            out.gradients = None;
            return out;
        }
        let n = self.width * self.height;
        let pixels = (0..n)
            .map(|i| {
                (0..self.channels)
                    .map(|c| self.pixels[c * n + i])
                    .sum::<f64>()
                    / self.channels as f64
            })
            .collect();
        Canvas {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
            gradients: None,
        }
    }

    /// Quantize to 8 bits (`round(v * 255)`, half away from zero) as the
    /// file writers do.
    pub fn quantized(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }
}

#[inline]
fn sample_plane(plane: &[f64], w: usize, h: usize, coord: PixelCoord) -> f64 {
    let x = coord.x.clamp(0.0, (w - 1) as f64);
    let y = coord.y.clamp(0.0, (h - 1) as f64);
    let x0 = (floor(x) as usize).min(w - 1);
    let y0 = (floor(y) as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let top = plane[y0 * w + x0] + tx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
    let bottom = plane[y1 * w + x0] + tx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
    top + ty * (bottom - top)
}

#[inline]
fn derivative_plane(plane: &[f64], w: usize, h: usize, coord: PixelCoord) -> [f64; 2] {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let x = coord.x.clamp(0.0, max_x);
    let y = coord.y.clamp(0.0, max_y);
    // Right/bottom cell on lattice lines, except at the far border.
    let x0 = if w == 1 {
        0
    } else {
        (floor(x) as usize).min(w - 2)
    };
    let y0 = if h == 1 {
        0
    } else {
        (floor(y) as usize).min(h - 2)
    };
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let p00 = plane[y0 * w + x0];
    let p01 = plane[y0 * w + x1];
    let p10 = plane[y1 * w + x0];
    let p11 = plane[y1 * w + x1];
    let inside_x = coord.x > 0.0 && coord.x < max_x;
    let inside_y = coord.y > 0.0 && coord.y < max_y;
    let dx = if inside_x {
        (1.0 - ty) * (p01 - p00) + ty * (p11 - p10)
    } else {
        0.0
    };
    let dy = if inside_y {
        (1.0 - tx) * (p10 - p00) + tx * (p11 - p01)
    } else {
        0.0
    };
    [dx, dy]
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn blur_rows(src: &[f64], dst: &mut [f64], w: usize, h: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as isize;
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let cc = (c as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += wk * row[cc];
            }
            dst[r * w + c] = acc;
        }
    }
}

fn blur_cols(src: &[f64], dst: &mut [f64], w: usize, h: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as isize;
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                let rr = (r as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += wk * src[rr * w + c];
            }
            dst[r * w + c] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn square() -> Canvas {
        Canvas::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    fn random_canvas(w: usize, h: usize, seed: u64) -> Canvas {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Canvas::from_fn(w, h, |_, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Canvas::new(0, 2, 1, vec![]).is_err());
        assert!(Canvas::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Canvas::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn bilinear_lattice_centre_and_clamp() {
        let c = square();
        assert_eq!(c.bilinear_sample(PixelCoord::new(0.0, 0.0), 0), 0.0);
        assert_eq!(c.bilinear_sample(PixelCoord::new(0.5, 0.5), 0), 1.5);
        assert_eq!(c.bilinear_sample(PixelCoord::new(-5.0, -5.0), 0), 0.0);
        assert_eq!(c.bilinear_sample(PixelCoord::new(9.0, 9.0), 0), 3.0);
    }

    #[test]
    fn constant_canvas_has_zero_gradients() {
        let c = Canvas::filled(9, 7, 1, 0.7).unwrap().with_gradients(1.0);
        let g = c.gradients().unwrap();
        assert!(g.grad_x().iter().all(|&v| v == 0.0));
        assert!(g.grad_y().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_gradient_without_blur() {
        let w = 10;
        let c = Canvas::from_fn(w, 6, |x, _| x as f64 / w as f64)
            .unwrap()
            .with_gradients(0.0);
        let g = c.gradients().unwrap();
        for r in 0..6 {
            for x in 1..w - 1 {
                assert!((g.grad_x()[r * w + x] - 1.0 / w as f64).abs() < 1e-15);
            }
        }
        assert!(g.grad_y().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_brute_force_central_differences() {
        let c = random_canvas(8, 8, 3);
        let g = c.with_gradients(0.0);
        let g = g.gradients().unwrap();
        let at = |x: isize, y: isize| {
            let x = x.clamp(0, 7) as usize;
            let y = y.clamp(0, 7) as usize;
            c.pixel(x, y, 0)
        };
        for y in 0..8isize {
            for x in 0..8isize {
                let gx = (at(x + 1, y) - at(x - 1, y)) / 2.0;
                let gy = (at(x, y + 1) - at(x, y - 1)) / 2.0;
                assert_eq!(g.grad_x()[(y * 8 + x) as usize], gx);
                assert_eq!(g.grad_y()[(y * 8 + x) as usize], gy);
            }
        }
    }

    #[test]
    fn downsample_identity_and_constant() {
        let c = random_canvas(6, 5, 1);
        assert_eq!(c.downsample_antialias(1.0).unwrap().pixels(), c.pixels());
        let k = Canvas::filled(12, 12, 1, 0.3).unwrap();
        let d = k.downsample_antialias(2.5).unwrap();
        assert!(d.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn downsample_checkerboard_matches_direct_convolution() {
        let board = Canvas::from_fn(4, 4, |x, y| ((x + y) % 2) as f64).unwrap();
        let d = board.downsample_antialias(2.0).unwrap();
        assert_eq!((d.width(), d.height()), (2, 2));

        // Direct 2-D Gaussian (σ = 1, radius 3) with clamped indices, then
        // bilinear at the source position of each output centre.
        let sigma: f64 = 1.0;
        let blurred = |x: isize, y: isize| {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for dy in -3..=3isize {
                for dx in -3..=3isize {
                    let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                    let xx = (x + dx).clamp(0, 3) as usize;
                    let yy = (y + dy).clamp(0, 3) as usize;
                    acc += wgt * board.pixel(xx, yy, 0);
                    norm += wgt;
                }
            }
            acc / norm
        };
        for r in 0..2 {
            for c in 0..2 {
                let sx = 2 * c as isize;
                let sy = 2 * r as isize;
                let expect = 0.25
                    * (blurred(sx, sy)
                        + blurred(sx + 1, sy)
                        + blurred(sx, sy + 1)
                        + blurred(sx + 1, sy + 1));
                let got = d.pixel(c, r, 0);
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                assert!((got - 0.5).abs() <= 0.15);
            }
        }
    }

    #[test]
    fn derivative_of_surface_matches_finite_differences_inside_cells() {
        let c = random_canvas(9, 9, 11);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = PixelCoord::new(rng.random_range(0.1..7.9), rng.random_range(0.1..7.9));
            let h = 1e-6;
            if floor(p.x - h) != floor(p.x + h) || floor(p.y - h) != floor(p.y + h) {
                continue;
            }
            let d = c.bilinear_derivative(p, 0);
            let fx = (c.bilinear_sample(PixelCoord::new(p.x + h, p.y), 0)
                - c.bilinear_sample(PixelCoord::new(p.x - h, p.y), 0))
                / (2.0 * h);
            let fy = (c.bilinear_sample(PixelCoord::new(p.x, p.y + h), 0)
                - c.bilinear_sample(PixelCoord::new(p.x, p.y - h), 0))
                / (2.0 * h);
            assert!((d[0] - fx).abs() < 1e-8 && (d[1] - fy).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn bilinear_is_linear_along_integer_rows(seed in 0u64..1000, x in 0.0f64..6.999, row in 0usize..7) {
            let c = random_canvas(7, 7, seed);
            let x0 = floor(x) as usize;
            let t = x - x0 as f64;
            let expect = (1.0 - t) * c.pixel(x0, row, 0) + t * c.pixel((x0 + 1).min(6), row, 0);
            let got = c.bilinear_sample(PixelCoord::new(x, row as f64), 0);
            prop_assert!((got - expect).abs() < 1e-12);
        }

        #[test]
        fn bilinear_is_lipschitz(seed in 0u64..1000, x in -1.0f64..8.0, y in -1.0f64..8.0,
                                 dx in -0.5f64..0.5, dy in -0.5f64..0.5) {
            let c = random_canvas(7, 7, seed);
            let mut max_step: f64 = 0.0;
            for r in 0..7 {
                for k in 0..6 {
                    max_step = max_step.max((c.pixel(k + 1, r, 0) - c.pixel(k, r, 0)).abs());
                    max_step = max_step.max((c.pixel(r, k + 1, 0) - c.pixel(r, k, 0)).abs());
                }
            }
            let a = c.bilinear_sample(PixelCoord::new(x, y), 0);
            let b = c.bilinear_sample(PixelCoord::new(x + dx, y + dy), 0);
            let dist = (dx * dx + dy * dy).sqrt();
            prop_assert!((a - b).abs() <= 2.0 * max_step * dist + 1e-12);
        }
    }
}
