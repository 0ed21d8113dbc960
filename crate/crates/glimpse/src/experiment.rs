//! Synthetic experiment builders shared by the CLI and the test suites.

use glimpse_core::data::{self, ScenePlan, SpriteSpec, SpriteStyle};
use glimpse_core::gdbn::{self, GdbnConfig, GdbnModel};
use glimpse_core::matrix::Matrix;
use glimpse_core::rng;
use glimpse_core::{Canvas, Gaze, Patch, Result};

/// Number of sprite classes in each synthetic domain.
pub const CLASSES: usize = 8;

/// Sprite classes of a domain. Both domains share the layout seed; they
/// differ in style.
pub fn domain_spec(style: SpriteStyle) -> SpriteSpec {
    SpriteSpec::procedural(CLASSES, style, 17)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub canvas: Canvas,
    pub truth: Gaze,
    pub sprite: Patch,
    pub class: usize,
}

/// `n` single-sprite scenes; scene `i` shows class `i % classes`.
pub fn scenes(
    spec: &SpriteSpec,
    plan: &ScenePlan,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticScene>> {
    let root = rng::derive(seed, "synthetic-scenes");
    (0..n)
        .map(|i| {
            let s = rng::derive_index(root, i as u64);
            let class = i % spec.classes.len();
            let mut r = rng::stream(s, "sprite");
            let sprite = data::sprite_patch(spec, &data::render_sprite(spec, class, &mut r));
            let (canvas, truth) = plan.random_scene(&sprite, s)?;
            Ok(SyntheticScene {
                canvas,
                truth,
                sprite,
                class,
            })
        })
        .collect()
}

/// `(canvas, gaze_a, gaze_b, a, b)`.
pub type PairScene = (Canvas, Gaze, Gaze, Patch, Patch);

/// Two-sprite scenes of different classes.
pub fn pair_scenes(
    spec: &SpriteSpec,
    plan: &ScenePlan,
    n: usize,
    seed: u64,
) -> Result<Vec<PairScene>> {
    let root = rng::derive(seed, "pair-scenes");
    let k = spec.classes.len();
    (0..n)
        .map(|i| {
            let s = rng::derive_index(root, i as u64);
            let mut r = rng::stream(s, "sprites");
            let ca = i % k;
            let cb = (ca + 1 + (i / k) % (k - 1).max(1)) % k;
            let a = data::sprite_patch(spec, &data::render_sprite(spec, ca, &mut r));
            let b = data::sprite_patch(spec, &data::render_sprite(spec, cb, &mut r));
            let (canvas, ga, gb) = plan.random_pair_scene(&a, &b, s)?;
            Ok((canvas, ga, gb, a, b))
        })
        .collect()
}

pub fn train_gdbn(
    spec: &SpriteSpec,
    n: usize,
    config: &GdbnConfig,
    seed: u64,
) -> Result<GdbnModel> {
    let patches = data::generate_sprites(spec, n, rng::derive(seed, "gdbn-sprites"))?;
    Ok(gdbn::greedy_train(
        &patches,
        spec.width,
        spec.height,
        1,
        &config.with_seed(seed),
    )?
    .0)
}

/// Sprite crops as matrix rows.
pub fn crops(scenes: &[SyntheticScene]) -> Matrix {
    let d = scenes.first().map_or(0, |s| s.sprite.values.len());
    let mut m = Matrix::zeros(scenes.len(), d);
    for (r, s) in scenes.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&s.sprite.values);
    }
    m
}
