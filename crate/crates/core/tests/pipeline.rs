use glimpse_core::approxnet::{self, ApproxNetParams, Jitter, LabeledScene};
use glimpse_core::bench::{gaze_iou, BenchProtocol};
use glimpse_core::data::{self, ClutterSpec, ScenePlan, SpriteSpec, SpriteStyle};
use glimpse_core::gdbn::{self, GdbnConfig};
use glimpse_core::geom;
use glimpse_core::hmc::{self, HmcConfig};
use glimpse_core::infer::{self, InferenceSchedule, InferenceState};
use glimpse_core::rng;
use glimpse_core::warp::{self, GazeUpdate};
use glimpse_core::{Canvas, Gaze, PatchGrid, PixelCoord, TrainHyper};
use proptest::prelude::*;

fn spec() -> SpriteSpec {
    SpriteSpec::procedural(4, SpriteStyle::Light, 17)
}

fn small_model(
    hidden1: usize,
    hidden2: usize,
    n: usize,
    seed: u64,
) -> glimpse_core::gdbn::GdbnModel {
    let s = spec();
    let sprites = data::generate_sprites(&s, n, seed).unwrap();
    let cfg = GdbnConfig {
        hidden1,
        hidden2,
        ..GdbnConfig::default()
    }
    .with_epochs(3, 3)
    .with_seed(seed);
    gdbn::greedy_train(&sprites, s.width, s.height, 1, &cfg)
        .unwrap()
        .0
}

#[test]
fn trained_model_bound_sits_below_exact_likelihood() {
    let model = small_model(8, 4, 200, 3);
    let test = data::generate_sprites(&spec(), 5, 99).unwrap();
    let log_z = model.layer2.exact_log_z().unwrap();
    for r in 0..test.rows() {
        let v = test.row(r);
        let exact = model.exact_log_likelihood(v).unwrap();
        let q = model.layer1.hidden_conditional(v).unwrap();
        let n = q.len();
        let mut expected = -log_z;
        for bits in 0..1usize << n {
            let h: Vec<f64> = (0..n).map(|j| ((bits >> j) & 1) as f64).collect();
            let logq: f64 = h
                .iter()
                .zip(&q)
                .map(|(&hj, &p)| if hj == 1.0 { p.ln() } else { (1.0 - p).ln() })
                .sum();
            let t = model.log_p_v_given_h1(v, &h) - model.layer2.free_energy(&h).unwrap();
            let w = logq.exp();
            if w > 0.0 {
                expected += w * (t - logq);
            }
        }
        assert!(
            expected <= exact + 1e-9 * exact.abs(),
            "{expected} > {exact}"
        );
        let mc = model.variational_bound(v, 200, log_z, r as u64).unwrap();
        assert!(
            (mc.nats - expected).abs() < 0.5 + 4.0 * mc.stderr,
            "{} vs {expected}",
            mc.nats
        );
    }
    let ais = gdbn::ais_log_z(&model.layer2, 100, 1000, 5).unwrap();
    assert!((ais.log_z - log_z).abs() < 0.2, "{} vs {log_z}", ais.log_z);
}

#[test]
fn training_then_sampling_is_seed_deterministic() {
    let a = small_model(12, 6, 60, 8);
    let b = small_model(12, 6, 60, 8);
    assert_eq!(a, b);
    let sa = a.sample(3, 10, 1).unwrap();
    assert_eq!(sa, b.sample(3, 10, 1).unwrap());
    assert_ne!(sa, a.sample(3, 10, 2).unwrap());
}

#[test]
fn hmc_from_a_perturbed_start_lowers_the_potential() {
    let s = spec();
    let sprite = data::sprite_patch(&s, &s.prototype(0));
    let grid = PatchGrid::new(s.width, s.height);
    let plan = ScenePlan {
        clutter: ClutterSpec::empty(),
        ..ScenePlan::default()
    };
    let (canvas, truth) = plan.random_scene(&sprite, 4).unwrap();
    let canvas = canvas.with_gradients(1.0);
    let sigma = vec![0.2; grid.len()];
    let start = truth.compose(
        &GazeUpdate {
            dx: 2.0,
            dy: -2.0,
            dtheta: 0.05,
            dscale: 0.05,
        },
        grid.center(),
    );
    let u0 = hmc::potential(&start, &sprite.values, &canvas, &grid, &sigma);
    let trace = hmc::run(
        &start,
        &sprite.values,
        &canvas,
        &grid,
        &sigma,
        &HmcConfig {
            n_iterations: 20,
            ..HmcConfig::default()
        },
    )
    .unwrap();
    let (best, u_best) = trace.map_sample().unwrap();
    assert!(u_best < u0);
    assert!(gaze_iou(&best, &truth, &grid) > gaze_iou(&start, &truth, &grid));
}

#[test]
fn inference_runs_from_a_known_start_and_records_its_path() {
    let model = small_model(16, 8, 80, 2);
    let s = spec();
    let sprite = data::sprite_patch(&s, &s.prototype(1));
    let (canvas, truth) = ScenePlan::default().random_scene(&sprite, 11).unwrap();
    let net = ApproxNetParams::new(1, 8, 0);
    let sched = InferenceSchedule {
        approx_steps: 2,
        hmc_iterations: 3,
        ..InferenceSchedule::default()
    };
    let (state, trace) = infer::infer_from(
        &canvas,
        &model,
        &net,
        &sched,
        InferenceState::initial(&model, truth),
        1,
    )
    .unwrap();
    assert_eq!(state.net_evaluations, 2);
    assert_eq!(state.path.len(), 2);
    assert_eq!(trace.len(), 3);
    assert!(state.u.is_valid());
    let again = infer::infer_from(
        &canvas,
        &model,
        &net,
        &sched,
        InferenceState::initial(&model, truth),
        1,
    )
    .unwrap();
    assert_eq!(again.0.u, state.u);
    assert_eq!(again.1, trace);
}

#[test]
fn net_training_reduces_loss_on_real_pairs() {
    let s = spec();
    let grid = PatchGrid::new(s.width, s.height);
    let plan = ScenePlan::default();
    let labeled: Vec<LabeledScene> = (0..4)
        .map(|i| {
            let sprite = data::sprite_patch(&s, &s.prototype(i));
            let (canvas, gaze) = plan.random_scene(&sprite, 40 + i as u64).unwrap();
            LabeledScene {
                canonical: warp::extract_patch(&canvas, &grid, &gaze),
                canvas,
                gaze,
            }
        })
        .collect();
    let pairs =
        approxnet::make_training_pairs(&labeled, &grid, &Jitter::default(), None, 32, 3).unwrap();
    let hyper = TrainHyper {
        learning_rate: 0.01,
        epochs: 6,
        minibatch: 8,
        momentum: 0.9,
        weight_decay: 0.0,
        seed: 1,
    };
    let (_, rep) = approxnet::sgd_train(&ApproxNetParams::new(1, 16, 2), &pairs, &hyper).unwrap();
    assert!(
        rep.epoch_loss.last().unwrap() < rep.epoch_loss.first().unwrap(),
        "{:?}",
        rep.epoch_loss
    );
}

#[test]
fn benchmark_starts_honour_the_offset() {
    let grid = PatchGrid::new(24, 24);
    let truth = Gaze::centered_at(&grid, PixelCoord::new(48.0, 48.0), 0.0, 1.5);
    let proto = BenchProtocol {
        offsets: vec![10.0],
        ring: true,
        ..BenchProtocol::default()
    };
    for scene in 0..20 {
        let (g, d) = proto.init(&truth, &grid, 0, scene);
        assert!((d - 10.0).abs() < 1e-9);
        let c0 = truth.warp(grid.center());
        let c1 = g.warp(grid.center());
        assert!(((c1.x - c0.x).hypot(c1.y - c0.y) - 10.0).abs() < 1e-9);
    }
}

fn gaze_strategy() -> impl Strategy<Value = Gaze> {
    (-0.5f64..0.5, 0.5f64..2.0, 0.0f64..80.0, 0.0f64..80.0).prop_map(|(t, s, x, y)| {
        Gaze::centered_at(&PatchGrid::new(24, 24), PixelCoord::new(x, y), t, s)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correction_then_compose_reaches_the_target(a in gaze_strategy(), b in gaze_strategy()) {
        let c = PatchGrid::new(24, 24).center();
        let g = a.compose(&a.correction_to(&b, c), c);
        for (x, y) in g.as_array().iter().zip(b.as_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in gaze_strategy(), b in gaze_strategy()) {
        let grid = PatchGrid::new(24, 24);
        let ab = gaze_iou(&a, &b, &grid);
        prop_assert!((ab - gaze_iou(&b, &a, &grid)).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((gaze_iou(&a, &a, &grid) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_crop_reads_canvas_pixels(x0 in 0usize..40, y0 in 0usize..40, seed in 0u64..1000) {
        let mut r = rng::stream(seed, "canvas");
        let px: Vec<f64> = (0..64 * 64).map(|_| rng::uniform(&mut r)).collect();
        let canvas = Canvas::new(64, 64, 1, px).unwrap();
        let grid = PatchGrid::new(24, 24);
        let p = warp::extract_patch(&canvas, &grid, &Gaze::new(0.0, 0.0, x0 as f64, y0 as f64));
        for y in 0..24 {
            for x in 0..24 {
                prop_assert!((p.values[y * 24 + x] - canvas.pixel(x0 + x, y0 + y, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn footprint_area_scales_quadratically(g in gaze_strategy()) {
        let grid = PatchGrid::new(24, 24);
        let area = geom::area(&geom::gaze_quad(&g, &grid));
        prop_assert!((area - 576.0 * g.scale() * g.scale()).abs() < 1e-6 * area);
    }
}
