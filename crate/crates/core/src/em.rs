//! Monte Carlo EM: learn the GDBN from scenes without pose labels.
//!
//! The E-step runs full inference on each scene and keeps posterior samples
//! of the gaze together with the patches they extract; the M-step continues
//! training the GDBN on those patches.

use alloc::vec::Vec;

use log::warn;

use crate::approxnet::{self, ApproxNetParams, Jitter, LabeledScene};
use crate::bench::gaze_iou;
use crate::brbm::FpcdOptions;
use crate::gdbn::{self, GdbnConfig, GdbnModel};
use crate::grbm::CdOptions;
use crate::infer::{infer, InferenceSchedule};
use crate::math::median;
use crate::matrix::Matrix;
use crate::rng;
use crate::warp::{extract_patch, Gaze, Patch, PatchGrid};
use crate::{Canvas, Error, Result, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub rounds: usize,
    pub e_samples_per_image: usize,
    pub m_hyper1: TrainHyper,
    pub m_hyper2: TrainHyper,
    /// Learning rates of the warm-started M-step relative to `m_hyper*`.
    pub m_rate_scale: f64,
    pub refresh_net: bool,
    /// Fraction of labelled scenes used to bootstrap the network.
    pub bootstrap_fraction: f64,
    pub schedule: InferenceSchedule,
    pub net_hyper: TrainHyper,
    pub net_hidden: usize,
    pub pairs_per_scene: usize,
    pub jitter: Jitter,
    pub bound_samples: usize,
    pub ais_chains: usize,
    pub ais_distributions: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            e_samples_per_image: 1,
            m_hyper1: CdOptions::default().hyper,
            m_hyper2: FpcdOptions::default().hyper,
            m_rate_scale: 0.1,
            refresh_net: false,
            bootstrap_fraction: 0.1,
            schedule: InferenceSchedule::default(),
            net_hyper: TrainHyper {
                learning_rate: 0.01,
                epochs: 8,
                minibatch: 32,
                momentum: 0.9,
                weight_decay: 1e-5,
                seed: 0,
            },
            net_hidden: approxnet::HIDDEN,
            pairs_per_scene: 40,
            jitter: Jitter::default(),
            bound_samples: 10,
            ais_chains: 100,
            ais_distributions: 1000,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("EM needs at least one round"));
        }
        if self.e_samples_per_image == 0 {
            return Err(Error::invalid("EM needs at least one sample per image"));
        }
        if !(0.0..=1.0).contains(&self.bootstrap_fraction) {
            return Err(Error::invalid("bootstrap fraction must lie in [0, 1]"));
        }
        if !(self.m_rate_scale > 0.0 && self.m_rate_scale.is_finite()) {
            return Err(Error::invalid("M-step rate scale must be positive"));
        }
        self.m_hyper1.validate()?;
        self.m_hyper2.validate()?;
        self.net_hyper.validate()?;
        self.schedule.validate()?;
        self.jitter.validate()
    }

    /// Training configuration of the warm-started M-step.
    pub fn m_config(&self, model: &GdbnModel, seed: u64) -> GdbnConfig {
        let mut cfg = GdbnConfig {
            hidden1: model.hidden1(),
            hidden2: model.hidden2(),
            ..GdbnConfig::default()
        };
        cfg.layer1.hyper = self.m_hyper1;
        cfg.layer2.hyper = self.m_hyper2;
        cfg.layer2.fast_learning_rate = self.m_hyper2.learning_rate;
        cfg.with_rate_scale(self.m_rate_scale).with_seed(seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepSample {
    pub scene: usize,
    pub patch: Patch,
    pub gaze: Gaze,
    /// Potential of the chain's best state.
    pub potential: f64,
}

/// Posterior gaze samples for every scene. Scenes whose inference fails are
/// skipped.
pub fn e_step(
    scenes: &[Canvas],
    model: &GdbnModel,
    net: &ApproxNetParams,
    schedule: &InferenceSchedule,
    samples_per_image: usize,
    seed: u64,
) -> Result<Vec<EStepSample>> {
    if samples_per_image == 0 {
        return Err(Error::invalid("E-step needs at least one sample per image"));
    }
    let grid = PatchGrid::new(model.patch_width, model.patch_height);
    let root = rng::derive(seed, "e-step");
    let mut out = Vec::with_capacity(scenes.len() * samples_per_image);
    for (i, canvas) in scenes.iter().enumerate() {
        let (state, trace) = match infer(
            canvas,
            model,
            net,
            schedule,
            rng::derive_index(root, i as u64),
        ) {
            Ok(r) => r,
            Err(e) => {
                warn!("E-step skipped scene {i}: {e}");
                continue;
            }
        };
        let potential = trace.map_sample().map(|(_, u)| u).unwrap_or(f64::NAN);
        let mut gazes: Vec<Gaze> = trace
            .samples
            .iter()
            .zip(&trace.accept_flags)
            .rev()
            .filter(|(_, &a)| a)
            .map(|(g, _)| *g)
            .take(samples_per_image)
            .collect();
        while gazes.len() < samples_per_image {
            gazes.push(state.u);
        }
        for gaze in gazes {
            out.push(EStepSample {
                scene: i,
                patch: extract_patch(canvas, &grid, &gaze),
                gaze,
                potential,
            });
        }
    }
    Ok(out)
}

/// Warm-started GDBN training on the E-step patches.
pub fn m_step(samples: &Matrix, model: &GdbnModel, config: &GdbnConfig) -> Result<GdbnModel> {
    if samples.rows() == 0 {
        return Err(Error::invalid("M-step needs at least one sample"));
    }
    Ok(gdbn::continue_training(model, samples, config)?.0)
}

pub fn patches_to_matrix(patches: &[&Patch], dim: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(patches.len(), dim);
    for (r, p) in patches.iter().enumerate() {
        Error::check_len("patch", dim, p.values.len())?;
        m.row_mut(r).copy_from_slice(&p.values);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmRound {
    /// Round 0 describes the starting model.
    pub round: usize,
    pub n_samples: usize,
    pub mean_iou: Option<f64>,
    pub heldout_bound: Option<f64>,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmReport {
    pub rounds: Vec<EmRound>,
    pub e_steps: usize,
    pub m_steps: usize,
    pub net_loss: Vec<f64>,
    /// The model after each M-step.
    pub checkpoints: Vec<GdbnModel>,
}

/// Everything EM learns from.
#[derive(Debug, Clone, Copy)]
pub struct EmData<'a> {
    /// Scenes with known gazes for bootstrapping the network.
    pub labeled: &'a [(Canvas, Gaze)],
    pub unlabeled: &'a [Canvas],
    /// Truth for `unlabeled`, used only for reporting.
    pub unlabeled_truth: Option<&'a [Gaze]>,
    /// Aligned patches for the per-round bound.
    pub heldout: Option<&'a Matrix>,
}

/// Network trained on jittered crops of labelled scenes. The canonical input
/// is the true crop, blended with the model's mean patch for half the pairs.
pub fn bootstrap_net(
    labeled: &[(Canvas, Gaze)],
    model: &GdbnModel,
    init: Option<&ApproxNetParams>,
    config: &EmConfig,
    seed: u64,
) -> Result<(ApproxNetParams, Vec<f64>)> {
    let grid = PatchGrid::new(model.patch_width, model.patch_height);
    let scenes: Vec<LabeledScene> = labeled
        .iter()
        .map(|(canvas, gaze)| LabeledScene {
            canonical: extract_patch(canvas, &grid, gaze),
            canvas: canvas.clone(),
            gaze: *gaze,
        })
        .collect();
    train_net_on(&scenes, model, init, config, seed)
}

fn train_net_on(
    scenes: &[LabeledScene],
    model: &GdbnModel,
    init: Option<&ApproxNetParams>,
    config: &EmConfig,
    seed: u64,
) -> Result<(ApproxNetParams, Vec<f64>)> {
    let grid = PatchGrid::new(model.patch_width, model.patch_height);
    let mean = Patch::new(
        model.patch_width,
        model.patch_height,
        model.channels,
        model.mean_patch().to_vec(),
    )?;
    let n = scenes.len() * config.pairs_per_scene;
    let pairs = approxnet::make_training_pairs(
        scenes,
        &grid,
        &config.jitter,
        Some((&mean, 0.5)),
        n,
        rng::derive(seed, "pairs"),
    )?;
    let start = match init {
        Some(p) => p.clone(),
        None => ApproxNetParams::new(
            model.channels,
            config.net_hidden,
            rng::derive(seed, "net-init"),
        ),
    };
    let hyper = TrainHyper {
        seed: rng::derive(seed, "net-sgd"),
        ..config.net_hyper
    };
    let (net, report) = approxnet::sgd_train(&start, &pairs, &hyper)?;
    Ok((net, report.epoch_loss))
}

/// Bound of `heldout` under `model`, with `log Z` from AIS.
pub fn heldout_bound(
    model: &GdbnModel,
    heldout: &Matrix,
    config: &EmConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let ais = gdbn::ais_log_z(
        &model.layer2,
        config.ais_chains,
        config.ais_distributions,
        rng::derive(seed, "ais"),
    )?;
    let b = model.mean_bound(
        heldout,
        config.bound_samples,
        ais.log_z,
        rng::derive(seed, "bound"),
    )?;
    Ok((b.nats, b.stderr))
}

/// Bootstraps the network if none is given, then alternates E- and M-steps.
pub fn run_em(
    model: &GdbnModel,
    net: Option<&ApproxNetParams>,
    data: EmData<'_>,
    config: &EmConfig,
    seed: u64,
) -> Result<(GdbnModel, ApproxNetParams, EmReport)> {
    config.validate()?;
    if let Some(t) = data.unlabeled_truth {
        Error::check_len("unlabeled truth", data.unlabeled.len(), t.len())?;
    }
    let mut report = EmReport::default();
    let mut net = match net {
        Some(n) => n.clone(),
        None => {
            if data.labeled.is_empty() {
                return Err(Error::invalid(
                    "an untrained network needs labelled bootstrap scenes",
                ));
            }
            let (n, loss) = bootstrap_net(
                data.labeled,
                model,
                None,
                config,
                rng::derive(seed, "bootstrap"),
            )?;
            report.net_loss = loss;
            n
        }
    };
    let mut model = model.clone();
    let grid = PatchGrid::new(model.patch_width, model.patch_height);
    let bound = |m: &GdbnModel, round: usize| -> Result<(Option<f64>, Option<f64>)> {
        match data.heldout {
            Some(h) => {
                let (b, se) = heldout_bound(
                    m,
                    h,
                    config,
                    rng::derive_index(rng::derive(seed, "heldout"), round as u64),
                )?;
                Ok((Some(b), Some(se)))
            }
            None => Ok((None, None)),
        }
    };
    let (b0, se0) = bound(&model, 0)?;
    report.rounds.push(EmRound {
        round: 0,
        n_samples: 0,
        mean_iou: None,
        heldout_bound: b0,
        stderr: se0,
    });

    for round in 1..=config.rounds {
        let round_seed = rng::derive_index(rng::derive(seed, "em-round"), round as u64);
        let samples = e_step(
            data.unlabeled,
            &model,
            &net,
            &config.schedule,
            config.e_samples_per_image,
            round_seed,
        )?;
        report.e_steps += 1;
        if samples.is_empty() {
            return Err(Error::invalid("E-step produced no samples"));
        }
        let mean_iou = data.unlabeled_truth.map(|truth| {
            samples
                .iter()
                .map(|s| gaze_iou(&s.gaze, &truth[s.scene], &grid))
                .sum::<f64>()
                / samples.len() as f64
        });
        let patches: Vec<&Patch> = samples.iter().map(|s| &s.patch).collect();
        let matrix = patches_to_matrix(&patches, model.visible())?;
        model = m_step(
            &matrix,
            &model,
            &config.m_config(&model, rng::derive(round_seed, "m-step")),
        )?;
        report.m_steps += 1;
        report.checkpoints.push(model.clone());

        if config.refresh_net {
            let cut = median(
                &samples
                    .iter()
                    .map(|s| s.potential)
                    .filter(|u| u.is_finite())
                    .collect::<Vec<_>>(),
            );
            let confident: Vec<LabeledScene> = samples
                .iter()
                .filter(|s| s.potential <= cut)
                .map(|s| LabeledScene {
                    canvas: data.unlabeled[s.scene].clone(),
                    gaze: s.gaze,
                    canonical: s.patch.clone(),
                })
                .collect();
            if !confident.is_empty() {
                let (n, loss) = train_net_on(
                    &confident,
                    &model,
                    Some(&net),
                    config,
                    rng::derive(round_seed, "refresh"),
                )?;
                net = n;
                report.net_loss.extend(loss);
            }
        }
        let (b, se) = bound(&model, round)?;
        report.rounds.push(EmRound {
            round,
            n_samples: samples.len(),
            mean_iou,
            heldout_bound: b,
            stderr: se,
        });
    }
    Ok((model, net, report))
}
