//! Synthetic sprites and scenes with exact ground-truth gazes, and the
//! landmark-to-gaze fit used when ingesting labelled images.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::geom::{self, gaze_quad};
use crate::image::{Canvas, PixelCoord};
use crate::math::{ceil, cos, floor, sin};
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::warp::{Gaze, Patch, PatchGrid};
use crate::{Error, Result};

/// Canonical eye, eye and mouth positions in the 24×24 frame.
pub const CANONICAL_LANDMARKS: [PixelCoord; 3] = [
    PixelCoord::new(6.0, 9.0),
    PixelCoord::new(17.0, 9.0),
    PixelCoord::new(11.5, 18.0),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = (sin(self.angle), cos(self.angle));
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteClass {
    pub background: f64,
    /// Painted in order; later parts cover earlier ones.
    pub parts: Vec<Ellipse>,
}

/// Visual family of a procedural sprite set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteStyle {
    /// Bright oval with dark eyes and mouth on a dark background.
    Light,
    /// Dark oval with bright features on a bright background.
    Dark,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<SpriteClass>,
    /// Standard deviation of per-sample part displacement, pixels.
    pub position_jitter: f64,
    pub intensity_jitter: f64,
    /// Gaussian blur applied to the rendered layout before noise, pixels.
    pub blur: f64,
    pub noise_std: f64,
}

impl SpriteSpec {
    /// Face-like 24×24 classes drawn from `style`, varied by `style_seed`.
    pub fn procedural(class_count: usize, style: SpriteStyle, style_seed: u64) -> Self {
        let mut rng = rng::stream(style_seed, "sprite-classes");
        let classes = (0..class_count)
            .map(|_| procedural_class(style, &mut rng))
            .collect();
        Self {
            width: 24,
            height: 24,
            classes,
            position_jitter: 0.4,
            intensity_jitter: 0.03,
            blur: 0.8,
            noise_std: 0.02,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(
                "sprite spec needs at least one class and a non-empty patch",
            ));
        }
        for class in &self.classes {
            let ok = (0.0..=1.0).contains(&class.background)
                && class
                    .parts
                    .iter()
                    .all(|p| (0.0..=1.0).contains(&p.intensity) && p.rx > 0.0 && p.ry > 0.0);
            if !ok {
                return Err(Error::invalid(
                    "sprite intensities must lie in [0, 1] and radii be positive",
                ));
            }
        }
        if !(self.noise_std >= 0.0
            && self.position_jitter >= 0.0
            && self.intensity_jitter >= 0.0
            && self.blur >= 0.0)
        {
            return Err(Error::invalid(
                "sprite jitter and noise must be non-negative",
            ));
        }
        Ok(())
    }

    /// Noise-free rendering of a class at its nominal layout.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let c = &self.classes[class];
        self.smooth(render_parts(
            &c.parts,
            c.background,
            self.width,
            self.height,
        ))
    }

    fn smooth(&self, pixels: Vec<f64>) -> Vec<f64> {
        if self.blur <= 0.0 {
            return pixels;
        }
        Canvas::new(self.width, self.height, 1, pixels)
            .expect("sprite size matches spec")
            .gaussian_blur(self.blur)
            .into_pixels()
    }
}

fn procedural_class(style: SpriteStyle, rng: &mut Stream) -> SpriteClass {
    let mut u = |lo: f64, hi: f64| rng::uniform_in(rng, lo, hi);
    let (bg, face, feature, nose) = match style {
        SpriteStyle::Light => (u(0.15, 0.3), u(0.6, 0.8), u(0.05, 0.2), u(0.4, 0.55)),
        SpriteStyle::Dark => (u(0.7, 0.85), u(0.25, 0.4), u(0.8, 0.95), u(0.5, 0.6)),
    };
    let eye_dx = u(4.5, 6.5);
    let eye_y = u(8.0, 10.0);
    let eye_rx = u(1.6, 2.6);
    let eye_ry = u(1.2, 2.0);
    let mouth_y = u(16.5, 19.0);
    let oval = Ellipse {
        cx: 11.5,
        cy: u(11.5, 12.5),
        rx: u(8.5, 10.5),
        ry: u(10.0, 11.5),
        angle: 0.0,
        intensity: face,
    };
    let brow = u(0.0, 1.0) < 0.5;
    let mut parts = vec![oval];
    for side in [-1.0, 1.0] {
        parts.push(Ellipse {
            cx: 11.5 + side * eye_dx,
            cy: eye_y,
            rx: eye_rx,
            ry: eye_ry,
            angle: 0.0,
            intensity: feature,
        });
        if brow {
            parts.push(Ellipse {
                cx: 11.5 + side * eye_dx,
                cy: eye_y - 3.0,
                rx: eye_rx + 0.8,
                ry: 0.7,
                angle: side * 0.15,
                intensity: feature,
            });
        }
    }
    parts.push(Ellipse {
        cx: 11.5,
        cy: (eye_y + mouth_y) / 2.0,
        rx: u(0.9, 1.6),
        ry: u(1.5, 2.5),
        angle: 0.0,
        intensity: nose,
    });
    parts.push(Ellipse {
        cx: 11.5,
        cy: mouth_y,
        rx: u(2.5, 4.5),
        ry: u(0.8, 1.6),
        angle: 0.0,
        intensity: feature,
    });
    SpriteClass {
        background: bg,
        parts,
    }
}

const SUPERSAMPLE: usize = 4;

fn paint(parts: &[Ellipse], background: f64, x: f64, y: f64) -> f64 {
    let mut value = background;
    for p in parts {
        if p.contains(x, y) {
            value = p.intensity;
        }
    }
    value
}

fn render_parts(parts: &[Ellipse], background: f64, width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * height);
    let step = 1.0 / SUPERSAMPLE as f64;
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = c as f64 - 0.5 + (sx as f64 + 0.5) * step;
                    let y = r as f64 - 0.5 + (sy as f64 + 0.5) * step;
                    acc += paint(parts, background, x, y);
                }
            }
            out.push(acc / (SUPERSAMPLE * SUPERSAMPLE) as f64);
        }
    }
    out
}

/// One jittered, noisy sample of `class`.
pub fn render_sprite<R: Rng + ?Sized>(spec: &SpriteSpec, class: usize, rng: &mut R) -> Vec<f64> {
    let base = &spec.classes[class];
    let parts: Vec<Ellipse> = base
        .parts
        .iter()
        .map(|p| Ellipse {
            cx: p.cx + spec.position_jitter * rng::normal(rng),
            cy: p.cy + spec.position_jitter * rng::normal(rng),
            intensity: (p.intensity + spec.intensity_jitter * rng::normal(rng)).clamp(0.0, 1.0),
            ..*p
        })
        .collect();
    let mut pixels = spec.smooth(render_parts(
        &parts,
        base.background,
        spec.width,
        spec.height,
    ));
    if spec.noise_std > 0.0 {
        for x in pixels.iter_mut() {
            *x = (*x + spec.noise_std * rng::normal(rng)).clamp(0.0, 1.0);
        }
    }
    pixels
}

/// `n` sprites, cycling through the classes; row `i` has class `i % classes`.
pub fn generate_sprites(spec: &SpriteSpec, n: usize, seed: u64) -> Result<Matrix> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate_sprites needs n >= 1"));
    }
    let base = rng::derive(seed, "sprites");
    let mut out = Matrix::zeros(n, spec.len());
    for i in 0..n {
        let mut rng = rng::indexed(base, i as u64);
        let class = i % spec.classes.len();
        out.row_mut(i)
            .copy_from_slice(&render_sprite(spec, class, &mut rng));
    }
    Ok(out)
}

/// Mean of the rows, as a single-channel patch.
pub fn mean_sprite(spec: &SpriteSpec, sprites: &Matrix) -> Patch {
    let mut mean = vec![0.0; sprites.cols()];
    for r in 0..sprites.rows() {
        crate::math::axpy(1.0 / sprites.rows() as f64, sprites.row(r), &mut mean);
    }
    Patch {
        width: spec.width,
        height: spec.height,
        channels: 1,
        values: mean,
    }
}

pub fn sprite_patch(spec: &SpriteSpec, values: &[f64]) -> Patch {
    Patch {
        width: spec.width,
        height: spec.height,
        channels: 1,
        values: values.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutterSpec {
    /// Expected clutter ellipses per 1000 canvas pixels.
    pub density: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Mean level of the base texture.
    pub base_level: f64,
    /// Magnitude of the base texture's linear ramp across the canvas.
    pub base_ramp: f64,
}

impl Default for ClutterSpec {
    fn default() -> Self {
        Self {
            density: 1.0,
            min_radius: 2.0,
            max_radius: 9.0,
            base_level: 0.45,
            base_ramp: 0.2,
        }
    }
}

impl ClutterSpec {
    pub fn empty() -> Self {
        Self {
            density: 0.0,
            ..Self::default()
        }
    }
}

/// Smooth linear ramp in a seed-dependent direction.
pub fn base_texture(
    width: usize,
    height: usize,
    clutter: &ClutterSpec,
    seed: u64,
) -> Result<Canvas> {
    let mut rng = rng::stream(seed, "scene-base");
    let angle = rng::uniform_in(&mut rng, 0.0, core::f64::consts::TAU);
    let (dx, dy) = (cos(angle), sin(angle));
    let span = (width + height) as f64 / 2.0;
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    Canvas::from_fn(width, height, |x, y| {
        let t = ((x as f64 - cx) * dx + (y as f64 - cy) * dy) / span;
        (clutter.base_level + clutter.base_ramp * t).clamp(0.0, 1.0)
    })
}

fn add_clutter(
    pixels: &mut [f64],
    width: usize,
    height: usize,
    clutter: &ClutterSpec,
    rng: &mut Stream,
) {
    let expected = clutter.density * (width * height) as f64 / 1000.0;
    let count =
        floor(expected) as usize + usize::from(rng::uniform(rng) < expected - floor(expected));
    let step = 1.0 / SUPERSAMPLE as f64;
    for _ in 0..count {
        let e = Ellipse {
            cx: rng::uniform_in(rng, 0.0, width as f64),
            cy: rng::uniform_in(rng, 0.0, height as f64),
            rx: rng::uniform_in(rng, clutter.min_radius, clutter.max_radius),
            ry: rng::uniform_in(rng, clutter.min_radius, clutter.max_radius),
            angle: rng::uniform_in(rng, 0.0, core::f64::consts::PI),
            intensity: rng::uniform(rng),
        };
        let reach = e.rx.max(e.ry) + 1.0;
        let x0 = (e.cx - reach).max(0.0) as usize;
        let y0 = (e.cy - reach).max(0.0) as usize;
        let x1 = ((e.cx + reach) as usize).min(width - 1);
        let y1 = ((e.cy + reach) as usize).min(height - 1);
        for r in y0..=y1 {
            for c in x0..=x1 {
                let mut cover = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = c as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        let y = r as f64 - 0.5 + (sy as f64 + 0.5) * step;
                        if e.contains(x, y) {
                            cover += 1.0;
                        }
                    }
                }
                cover /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let px = &mut pixels[r * width + c];
                *px = (1.0 - cover) * *px + cover * e.intensity;
            }
        }
    }
}

fn inverse_warp(u: &Gaze, q: PixelCoord) -> PixelCoord {
    let (alpha, beta) = (1.0 + u.a, u.b);
    let det = alpha * alpha + beta * beta;
    let (x, y) = (q.x - u.dx, q.y - u.dy);
    PixelCoord::new((alpha * x + beta * y) / det, (-beta * x + alpha * y) / det)
}

fn paint_sprite(pixels: &mut [f64], width: usize, height: usize, sprite: &Patch, u: &Gaze) {
    let grid = PatchGrid::new(sprite.width, sprite.height);
    let quad = gaze_quad(u, &grid);
    let xs = quad.iter().map(|p| p.x);
    let ys = quad.iter().map(|p| p.y);
    let x0 = floor(xs.clone().fold(f64::INFINITY, f64::min)).max(0.0) as usize;
    let x1 = (ceil(xs.fold(f64::NEG_INFINITY, f64::max)).max(0.0) as usize).min(width - 1);
    let y0 = floor(ys.clone().fold(f64::INFINITY, f64::min)).max(0.0) as usize;
    let y1 = (ceil(ys.fold(f64::NEG_INFINITY, f64::max)).max(0.0) as usize).min(height - 1);
    let src = Canvas::new(
        sprite.width,
        sprite.height,
        1,
        sprite.values[..sprite.width * sprite.height].to_vec(),
    )
    .expect("patch shape checked on construction");
    let (w, h) = (sprite.width as f64, sprite.height as f64);
    // Minified sprites are box-filtered over enough sub-samples to cover the
    // canonical footprint of one canvas pixel.
    let n_value = if u.scale() < 1.0 {
        ceil(1.0 / u.scale()) as usize + 1
    } else {
        1
    };
    let step = 1.0 / SUPERSAMPLE as f64;
    for r in y0..=y1 {
        for c in x0..=x1 {
            let mut cover = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let q = PixelCoord::new(
                        c as f64 - 0.5 + (sx as f64 + 0.5) * step,
                        r as f64 - 0.5 + (sy as f64 + 0.5) * step,
                    );
                    let p = inverse_warp(u, q);
                    if p.x >= -0.5 && p.x <= w - 0.5 && p.y >= -0.5 && p.y <= h - 0.5 {
                        cover += 1.0;
                    }
                }
            }
            if cover == 0.0 {
                continue;
            }
            cover /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let mut value = 0.0;
            let vstep = 1.0 / n_value as f64;
            for sy in 0..n_value {
                for sx in 0..n_value {
                    let q = if n_value == 1 {
                        PixelCoord::new(c as f64, r as f64)
                    } else {
                        PixelCoord::new(
                            c as f64 - 0.5 + (sx as f64 + 0.5) * vstep,
                            r as f64 - 0.5 + (sy as f64 + 0.5) * vstep,
                        )
                    };
                    value += src.bilinear_sample(inverse_warp(u, q), 0);
                }
            }
            value /= (n_value * n_value) as f64;
            let px = &mut pixels[r * width + c];
            *px = (1.0 - cover) * *px + cover * value;
        }
    }
}

/// Paints each sprite at its gaze over a cluttered background.
///
/// Every footprint must be at least half inside the canvas and footprints
/// must not overlap.
pub fn compose_scene_multi(
    sprites: &[(&Patch, Gaze)],
    width: usize,
    height: usize,
    clutter: &ClutterSpec,
    seed: u64,
) -> Result<Canvas> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("scene canvas must be non-empty"));
    }
    let mut quads = Vec::with_capacity(sprites.len());
    for (sprite, u) in sprites {
        if sprite.channels != 1 {
            return Err(Error::invalid(
                "scene composition supports single-channel sprites",
            ));
        }
        if !u.is_valid() {
            return Err(Error::invalid(
                "sprite gaze must be finite with positive scale",
            ));
        }
        let quad = gaze_quad(u, &PatchGrid::new(sprite.width, sprite.height));
        let inside =
            geom::fraction_inside(&quad, -0.5, -0.5, width as f64 - 0.5, height as f64 - 0.5);
        if inside < 0.5 {
            return Err(Error::Footprint { inside });
        }
        quads.push(quad);
    }
    for i in 0..quads.len() {
        for j in i + 1..quads.len() {
            if geom::area(&geom::clip_convex(&quads[i], &quads[j])) > 0.0 {
                return Err(Error::invalid("sprite footprints overlap"));
            }
        }
    }
    let mut pixels = base_texture(width, height, clutter, seed)?.into_pixels();
    let mut rng = rng::stream(seed, "scene-clutter");
    add_clutter(&mut pixels, width, height, clutter, &mut rng);
    for (sprite, u) in sprites {
        paint_sprite(&mut pixels, width, height, sprite, u);
    }
    Canvas::new(width, height, 1, pixels)
}

/// Single-sprite scene; returns the canvas and the exact gaze of the sprite.
pub fn compose_scene(
    sprite: &Patch,
    width: usize,
    height: usize,
    gaze: &Gaze,
    clutter: &ClutterSpec,
    seed: u64,
) -> Result<(Canvas, Gaze)> {
    let canvas = compose_scene_multi(&[(sprite, *gaze)], width, height, clutter, seed)?;
    Ok((canvas, *gaze))
}

/// Distribution of sprite poses within a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePlan {
    pub width: usize,
    pub height: usize,
    pub scale_range: (f64, f64),
    /// Rotations are uniform in `±rotation`, radians.
    pub rotation: f64,
    /// Minimum distance between the footprint and the canvas border.
    pub margin: f64,
    pub clutter: ClutterSpec,
}

impl Default for ScenePlan {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            scale_range: (1.25, 1.75),
            rotation: 0.15,
            margin: 1.0,
            clutter: ClutterSpec::default(),
        }
    }
}

impl ScenePlan {
    /// A random pose whose footprint lies inside the canvas, away from
    /// `avoid` when given.
    pub fn random_gaze<R: Rng + ?Sized>(
        &self,
        grid: &PatchGrid,
        avoid: Option<&Gaze>,
        rng: &mut R,
    ) -> Result<Gaze> {
        let avoid_quad = avoid.map(|g| gaze_quad(g, grid));
        for _ in 0..1000 {
            let s = rng::uniform_in(rng, self.scale_range.0, self.scale_range.1);
            let theta = rng::uniform_in(rng, -self.rotation, self.rotation);
            let center = PixelCoord::new(
                rng::uniform_in(rng, 0.0, self.width as f64),
                rng::uniform_in(rng, 0.0, self.height as f64),
            );
            let g = Gaze::centered_at(grid, center, theta, s);
            let quad = gaze_quad(&g, grid);
            let m = self.margin;
            let inside = quad.iter().all(|p| {
                p.x >= m - 0.5
                    && p.y >= m - 0.5
                    && p.x <= self.width as f64 - 0.5 - m
                    && p.y <= self.height as f64 - 0.5 - m
            });
            let clear = match &avoid_quad {
                Some(other) => geom::area(&geom::clip_convex(&quad, other)) == 0.0,
                None => true,
            };
            if inside && clear {
                return Ok(g);
            }
        }
        Err(Error::invalid("scene plan leaves no room for the sprite"))
    }

    pub fn random_scene(&self, sprite: &Patch, seed: u64) -> Result<(Canvas, Gaze)> {
        let grid = PatchGrid::new(sprite.width, sprite.height);
        let mut rng = rng::stream(seed, "scene-pose");
        let g = self.random_gaze(&grid, None, &mut rng)?;
        compose_scene(sprite, self.width, self.height, &g, &self.clutter, seed)
    }

    /// Two sprites with disjoint footprints.
    pub fn random_pair_scene(
        &self,
        a: &Patch,
        b: &Patch,
        seed: u64,
    ) -> Result<(Canvas, Gaze, Gaze)> {
        let grid = PatchGrid::new(a.width, a.height);
        let mut rng = rng::stream(seed, "scene-pair");
        // A central first sprite can leave no room for the second; redraw both.
        let mut placed = None;
        for _ in 0..100 {
            let ga = self.random_gaze(&grid, None, &mut rng)?;
            if let Ok(gb) = self.random_gaze(&grid, Some(&ga), &mut rng) {
                placed = Some((ga, gb));
                break;
            }
        }
        let (ga, gb) =
            placed.ok_or_else(|| Error::invalid("scene plan leaves no room for two sprites"))?;
        let canvas = compose_scene_multi(
            &[(a, ga), (b, gb)],
            self.width,
            self.height,
            &self.clutter,
            seed,
        )?;
        Ok((canvas, ga, gb))
    }
}

/// Least-squares similarity transform taking `src` points to `dst` points.
pub fn fit_similarity(src: &[PixelCoord], dst: &[PixelCoord]) -> Result<Gaze> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(Error::invalid(
            "similarity fit needs at least two corresponding points",
        ));
    }
    let n = src.len() as f64;
    let mean = |pts: &[PixelCoord]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
        PixelCoord::new(sx / n, sy / n)
    };
    let (ms, md) = (mean(src), mean(dst));
    let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (px, py) = (p.x - ms.x, p.y - ms.y);
        let (qx, qy) = (q.x - md.x, q.y - md.y);
        num_a += px * qx + py * qy;
        num_b += px * qy - py * qx;
        den += px * px + py * py;
    }
    if den <= 0.0 {
        return Err(Error::invalid(
            "similarity fit needs distinct source points",
        ));
    }
    let (alpha, beta) = (num_a / den, num_b / den);
    let dx = md.x - (alpha * ms.x - beta * ms.y);
    let dy = md.y - (beta * ms.x + alpha * ms.y);
    let g = Gaze::new(alpha - 1.0, beta, dx, dy);
    if !g.is_valid() {
        return Err(Error::invalid(
            "landmarks give a degenerate similarity transform",
        ));
    }
    Ok(g)
}

/// Gaze from eye, eye, mouth landmarks in scene coordinates.
pub fn gaze_from_landmarks(landmarks: &[PixelCoord; 3]) -> Result<Gaze> {
    fit_similarity(&CANONICAL_LANDMARKS, landmarks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::extract_patch;
    use rand::SeedableRng;

    fn still(spec: &mut SpriteSpec) {
        spec.noise_std = 0.0;
        spec.position_jitter = 0.0;
        spec.intensity_jitter = 0.0;
    }

    #[test]
    fn sprites_are_in_range_and_deterministic() {
        let spec = SpriteSpec::procedural(3, SpriteStyle::Light, 1);
        let a = generate_sprites(&spec, 9, 5).unwrap();
        let b = generate_sprites(&spec, 9, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_ne!(a, generate_sprites(&spec, 9, 6).unwrap());
    }

    #[test]
    fn still_single_class_is_constant() {
        let mut spec = SpriteSpec::procedural(1, SpriteStyle::Dark, 2);
        still(&mut spec);
        let s = generate_sprites(&spec, 5, 0).unwrap();
        for r in 1..5 {
            assert_eq!(s.row(r), s.row(0));
        }
        assert_eq!(s.row(0), &spec.prototype(0)[..]);
    }

    #[test]
    fn classes_are_separated() {
        let spec = SpriteSpec::procedural(2, SpriteStyle::Light, 3);
        let s = generate_sprites(&spec, 40, 1).unwrap();
        let dist = |i: usize, j: usize| -> f64 {
            s.row(i)
                .iter()
                .zip(s.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..40 {
            for j in i + 1..40 {
                if i % 2 == j % 2 {
                    intra += dist(i, j);
                    ni += 1;
                } else {
                    inter += dist(i, j);
                    nx += 1;
                }
            }
        }
        assert!(intra / (ni as f64) < inter / (nx as f64));
    }

    #[test]
    fn empty_clutter_leaves_base_texture() {
        let spec = SpriteSpec::procedural(1, SpriteStyle::Light, 4);
        let sprite = sprite_patch(&spec, &spec.prototype(0));
        let g = Gaze::translation(40.0, 40.0);
        let (canvas, _) = compose_scene(&sprite, 96, 96, &g, &ClutterSpec::empty(), 9).unwrap();
        let base = base_texture(96, 96, &ClutterSpec::empty(), 9).unwrap();
        for y in 0..96 {
            for x in 0..96 {
                let covered = (39..=64).contains(&x) && (39..=64).contains(&y);
                if !covered {
                    assert_eq!(canvas.pixel(x, y, 0), base.pixel(x, y, 0));
                }
            }
        }
    }

    #[test]
    fn render_then_extract_round_trips() {
        let spec = SpriteSpec::procedural(2, SpriteStyle::Light, 5);
        let sprites = generate_sprites(&spec, 2, 3).unwrap();
        let grid = PatchGrid::new(24, 24);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut poses = vec![Gaze::translation(30.0, 35.0)];
        for _ in 0..20 {
            let s = rng.random_range(0.8..1.25);
            let th = rng.random_range(-0.5..0.5);
            let c = PixelCoord::new(rng.random_range(35.0..60.0), rng.random_range(35.0..60.0));
            poses.push(Gaze::centered_at(&grid, c, th, s));
        }
        for (k, g) in poses.iter().enumerate() {
            let sprite = sprite_patch(&spec, sprites.row(k % 2));
            let (canvas, truth) =
                compose_scene(&sprite, 96, 96, g, &ClutterSpec::default(), k as u64).unwrap();
            let x = extract_patch(&canvas, &grid, &truth);
            // Border pixels blend with clutter through the footprint edge.
            let mut err = 0.0;
            let mut n = 0.0;
            for r in 1..23 {
                for c in 1..23 {
                    let i = r * 24 + c;
                    err += (x.values[i] - sprite.values[i]).powi(2);
                    n += 1.0;
                }
            }
            assert!(
                err / n <= 1e-3,
                "pose {k} (scale {}): mse {}",
                g.scale(),
                err / n
            );
        }
    }

    #[test]
    fn footprint_rules() {
        let spec = SpriteSpec::procedural(1, SpriteStyle::Light, 6);
        let sprite = sprite_patch(&spec, &spec.prototype(0));
        let far = Gaze::translation(90.0, 90.0);
        assert!(matches!(
            compose_scene(&sprite, 96, 96, &far, &ClutterSpec::empty(), 0),
            Err(Error::Footprint { .. })
        ));
        let a = Gaze::translation(10.0, 10.0);
        let b = Gaze::translation(20.0, 20.0);
        assert!(compose_scene_multi(
            &[(&sprite, a), (&sprite, b)],
            96,
            96,
            &ClutterSpec::empty(),
            0
        )
        .is_err());

        let plan = ScenePlan {
            width: 128,
            scale_range: (0.9, 1.1),
            ..ScenePlan::default()
        };
        let grid = PatchGrid::new(24, 24);
        for seed in 0..10 {
            let (_, ga, gb) = plan.random_pair_scene(&sprite, &sprite, seed).unwrap();
            let (qa, qb) = (gaze_quad(&ga, &grid), gaze_quad(&gb, &grid));
            assert_eq!(geom::area(&geom::clip_convex(&qa, &qb)), 0.0);
        }
    }

    #[test]
    fn landmark_fits() {
        assert!(gaze_from_landmarks(&CANONICAL_LANDMARKS)
            .unwrap()
            .as_array()
            .iter()
            .all(|x| x.abs() < 1e-9));
        let moved = CANONICAL_LANDMARKS.map(|p| PixelCoord::new(p.x + 5.0, p.y + 7.0));
        let g = gaze_from_landmarks(&moved).unwrap();
        for (x, t) in g.as_array().iter().zip([0.0, 0.0, 5.0, 7.0]) {
            assert!((x - t).abs() < 1e-9);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let truth = Gaze::from_pose(
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..2.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            );
            let g = gaze_from_landmarks(&CANONICAL_LANDMARKS.map(|p| truth.warp(p))).unwrap();
            for (x, t) in g.as_array().iter().zip(truth.as_array()) {
                assert!((x - t).abs() < 1e-6);
            }
        }
    }
}
