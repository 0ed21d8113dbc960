//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad configuration or input, 3 runtime failure.
//! Settings resolve as flag, then `--config` file entry, then default.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;

use glimpse_core::approxnet::{self, ApproxNetParams, Jitter, LabeledScene};
use glimpse_core::bench::{
    self, BenchProtocol, InferLocalizer, Localizer, Method, SceneRecord, SlidingLocalizer,
};
use glimpse_core::data::{self, ScenePlan, SpriteStyle};
use glimpse_core::em::{self, EmConfig, EmData};
use glimpse_core::gdbn::{self, GdbnConfig, GdbnModel};
use glimpse_core::hmc;
use glimpse_core::infer::{self, InferenceSchedule, InferenceState};
use glimpse_core::matrix::Matrix;
use glimpse_core::rng;
use glimpse_core::{Canvas, Gaze, Patch, PatchGrid, TrainHyper};

use crate::{agen, experiment, manifest, pairs, pnm, report};

#[derive(Debug, Parser)]
#[command(
    name = "glimpse",
    version,
    about = "Attention-coupled generative models of objects in large images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Root seed; every random stream derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Maximum number of worker threads
    #[arg(long)]
    threads: Option<usize>,
    /// Flat `key = value` settings file using the long flag names
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Scene manifest CSV
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Synthetic sprite style instead of a manifest: light or dark
    #[arg(long)]
    sprite_spec: Option<String>,
    /// Number of synthetic scenes
    #[arg(long)]
    scenes: Option<usize>,
    /// Seed of the synthetic scenes (defaults to --seed)
    #[arg(long)]
    scene_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    approx_steps: Option<usize>,
    #[arg(long)]
    hmc_iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    leapfrog: Option<usize>,
    /// Initial centre offset radius, pixels
    #[arg(long)]
    init_translation: Option<f64>,
    #[arg(long)]
    init_scale_low: Option<f64>,
    #[arg(long)]
    init_scale_high: Option<f64>,
    /// Scale of the centred reference gaze used for blind starts
    #[arg(long)]
    reference_scale: Option<f64>,
    /// Use variance σ² for the canonical image instead of σ²/2
    #[arg(long)]
    strict_variance: bool,
    /// Sample the canonical image instead of using its mean
    #[arg(long)]
    sample_v: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a two-layer model on aligned patches
    TrainGdbn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Synthetic sprites to train on
        #[arg(long)]
        n_sprites: Option<usize>,
        #[arg(long)]
        hidden1: Option<usize>,
        #[arg(long)]
        hidden2: Option<usize>,
        /// Epochs for both layers
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        epochs1: Option<usize>,
        #[arg(long)]
        epochs2: Option<usize>,
        #[arg(long)]
        lr1: Option<f64>,
        #[arg(long)]
        lr2: Option<f64>,
        #[arg(long)]
        minibatch: Option<usize>,
    },
    /// Train the gaze-correction network on jittered labelled scenes
    TrainNet {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pairs_per_scene: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        minibatch: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Training pair cache, read if present and written otherwise
        #[arg(long)]
        pairs_cache: Option<PathBuf>,
    },
    /// Localize the object in one image
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        net: Option<PathBuf>,
        /// PGM or PPM image
        #[arg(long)]
        image: Option<PathBuf>,
        /// Manifest to take the image (and truth) from
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        scene_index: Option<usize>,
        /// True gaze "a,b,dx,dy" for reporting IOU
        #[arg(long)]
        truth: Option<String>,
        /// Starting gaze "a,b,dx,dy" instead of a random start
        #[arg(long)]
        init: Option<String>,
        /// Also write the final crop x(u) as crop.pgm
        #[arg(long)]
        crop: bool,
    },
    /// Learn the model from unlabelled scenes by Monte Carlo EM
    Em {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pretrained network; bootstrapped from labelled scenes otherwise
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        e_samples: Option<usize>,
        #[arg(long)]
        m_epochs: Option<usize>,
        #[arg(long)]
        refresh_net: bool,
        #[arg(long)]
        bootstrap_fraction: Option<f64>,
        #[arg(long)]
        pairs_per_scene: Option<usize>,
        #[arg(long)]
        net_epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        ais_chains: Option<usize>,
        #[arg(long)]
        ais_distributions: Option<usize>,
    },
    /// Localization benchmark over a scene set
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// infer, ncc or template
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        net: Option<PathBuf>,
        /// Comma-separated initial offsets, pixels
        #[arg(long)]
        offsets: Option<String>,
        /// Place starts exactly at each offset instead of within it
        #[arg(long)]
        ring: bool,
        /// Comma-separated search scales for the baselines
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Draw samples from the model as a tiled PGM
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        gibbs_steps: Option<usize>,
    },
    /// Estimate the top-layer partition function by annealed importance sampling
    Ais {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        distributions: Option<usize>,
        /// Also enumerate log Z exactly (small models only)
        #[arg(long)]
        exact: bool,
        /// Labelled scenes whose true-pose crops get a bound estimate
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        bound_samples: Option<usize>,
    },
    /// Write synthetic scenes as PGM files plus a manifest
    MakeScenes {
        #[command(flatten)]
        common: Common,
        /// light or dark
        #[arg(long)]
        sprite_spec: Option<String>,
        #[arg(long)]
        scenes: Option<usize>,
        /// Leave the landmark columns empty
        #[arg(long)]
        unlabeled: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected 'key = value'", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.insert(k.replace('_', "-"), v.to_string()).is_some() {
            return Err(format!("line {}: duplicate key '{k}'", i + 1));
        }
    }
    Ok(out)
}

struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn load(common: &Common, subcommand: &str) -> CliResult<Self> {
        let Some(path) = &common.config else {
            return Ok(Self {
                file: BTreeMap::new(),
            });
        };
        let text =
            fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let file =
            parse_config(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let cmd = Cli::command();
        let sub = cmd.find_subcommand(subcommand).expect("subcommand exists");
        let known: Vec<String> = sub
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .collect();
        for k in file.keys() {
            if k == "config" || !known.contains(k) {
                return Err(config_err(format!("{}: unknown key '{k}'", path.display())));
            }
        }
        Ok(Self { file })
    }

    fn opt<T: FromStr>(&self, cli: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if cli.is_some() {
            return Ok(cli);
        }
        match self.file.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| config_err(format!("config key '{key}': {e}"))),
            None => Ok(None),
        }
    }

    fn get<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(cli, key)?.unwrap_or(default))
    }

    fn flag(&self, cli: bool, key: &str) -> CliResult<bool> {
        if cli {
            return Ok(true);
        }
        self.get(None, key, false)
    }

    fn required<T: FromStr>(&self, cli: Option<T>, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(cli, key)?
            .ok_or_else(|| config_err(format!("--{key} is required")))
    }
}

struct Env {
    seed: u64,
    out_dir: PathBuf,
}

fn env(common: &Common, s: &Settings) -> CliResult<Env> {
    let seed = s.get(common.seed, "seed", 0)?;
    let out_dir = s.get(common.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    let threads = s.get(common.threads, "threads", 1usize)?;
    if threads == 0 {
        return Err(config_err("--threads must be at least 1"));
    }
    fs::create_dir_all(&out_dir).map_err(|e| config_err(format!("{}: {e}", out_dir.display())))?;
    Ok(Env { seed, out_dir })
}

fn parse_style(s: &str) -> CliResult<SpriteStyle> {
    match s {
        "light" => Ok(SpriteStyle::Light),
        "dark" => Ok(SpriteStyle::Dark),
        other => Err(config_err(format!(
            "unknown sprite spec '{other}' (expected light or dark)"
        ))),
    }
}

fn parse_list(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<_>>>()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| {
            config_err(format!(
                "--{what} must be a comma-separated list of numbers"
            ))
        })
}

fn parse_gaze(s: &str, what: &str) -> CliResult<Gaze> {
    let v = parse_list(s, what)?;
    let g = <[f64; 4]>::try_from(v.as_slice())
        .map(Gaze::from_array)
        .map_err(|_| config_err(format!("--{what} needs four values a,b,dx,dy")))?;
    if !g.is_valid() {
        return Err(config_err(format!("--{what} is not a valid gaze")));
    }
    Ok(g)
}

#[derive(Debug, Clone)]
struct Scene {
    id: String,
    canvas: Canvas,
    truth: Option<Gaze>,
}

fn load_scenes(
    source: &Source,
    s: &Settings,
    seed: u64,
) -> CliResult<(Vec<Scene>, Option<SpriteStyle>)> {
    let manifest_path = s.opt(source.manifest.clone(), "manifest")?;
    let spec = s.opt(source.sprite_spec.clone(), "sprite-spec")?;
    match (manifest_path, spec) {
        (Some(_), Some(_)) => Err(config_err(
            "give either --manifest or --sprite-spec, not both",
        )),
        (Some(path), None) => {
            let recs = manifest::load_dataset(&path).map_err(config_err)?;
            let scenes = recs
                .into_iter()
                .map(|r| {
                    let canvas = pnm::read(&r.canvas_path)
                        .map_err(config_err)?
                        .to_grayscale();
                    Ok(Scene {
                        id: r
                            .canvas_path
                            .file_name()
                            .map_or(String::new(), |f| f.to_string_lossy().into_owned()),
                        canvas,
                        truth: r.true_gaze,
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok((scenes, None))
        }
        (None, Some(spec)) => {
            let style = parse_style(&spec)?;
            let n = s.get(source.scenes, "scenes", 100)?;
            let scene_seed = s.get(source.scene_seed, "scene-seed", seed)?;
            let sprites = experiment::domain_spec(style);
            let scenes = experiment::scenes(&sprites, &ScenePlan::default(), n, scene_seed)
                .map_err(runtime_err)?;
            Ok((
                scenes
                    .into_iter()
                    .enumerate()
                    .map(|(i, sc)| Scene {
                        id: format!("scene_{i:04}"),
                        canvas: sc.canvas,
                        truth: Some(sc.truth),
                    })
                    .collect(),
                Some(style),
            ))
        }
        (None, None) => Err(config_err("one of --manifest or --sprite-spec is required")),
    }
}

fn load_model(s: &Settings, cli: Option<PathBuf>) -> CliResult<GdbnModel> {
    let path: PathBuf = s.required(cli, "model")?;
    agen::load_model(&path).map_err(config_err)
}

fn load_net(path: &Path) -> CliResult<ApproxNetParams> {
    agen::load_net(path).map_err(config_err)
}

fn schedule(a: &ScheduleArgs, s: &Settings) -> CliResult<InferenceSchedule> {
    let d = InferenceSchedule::default();
    let mut sch = InferenceSchedule {
        approx_steps: s.get(a.approx_steps, "approx-steps", d.approx_steps)?,
        hmc_iterations: s.get(a.hmc_iterations, "hmc-iterations", d.hmc_iterations)?,
        init_translation_range: s.get(
            a.init_translation,
            "init-translation",
            d.init_translation_range,
        )?,
        init_scale_range: (
            s.get(a.init_scale_low, "init-scale-low", d.init_scale_range.0)?,
            s.get(a.init_scale_high, "init-scale-high", d.init_scale_range.1)?,
        ),
        reference_scale: s.get(a.reference_scale, "reference-scale", d.reference_scale)?,
        strict_variance: s.flag(a.strict_variance, "strict-variance")?,
        deterministic_v: !s.flag(a.sample_v, "sample-v")?,
        ..d
    };
    sch.hmc_config.step_size = s.get(a.step_size, "step-size", d.hmc_config.step_size)?;
    sch.hmc_config.n_leapfrog = s.get(a.leapfrog, "leapfrog", d.hmc_config.n_leapfrog)?;
    sch.validate().map_err(config_err)?;
    Ok(sch)
}

fn patch_dims(model: &GdbnModel) -> PatchGrid {
    PatchGrid::new(model.patch_width, model.patch_height)
}

fn crops_of(scenes: &[&Scene], grid: &PatchGrid) -> Matrix {
    let d = grid.len();
    let mut m = Matrix::zeros(scenes.len(), d);
    for (r, sc) in scenes.iter().enumerate() {
        let p =
            glimpse_core::warp::extract_patch(&sc.canvas, grid, &sc.truth.expect("labelled scene"));
        m.row_mut(r).copy_from_slice(&p.values);
    }
    m
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::TrainGdbn {
            common,
            source,
            n_sprites,
            hidden1,
            hidden2,
            epochs,
            epochs1,
            epochs2,
            lr1,
            lr2,
            minibatch,
        } => {
            let s = Settings::load(&common, "train-gdbn")?;
            let e = env(&common, &s)?;
            let d = GdbnConfig::default();
            let both = s.opt(epochs, "epochs")?;
            let mut cfg = GdbnConfig {
                hidden1: s.get(hidden1, "hidden1", d.hidden1)?,
                hidden2: s.get(hidden2, "hidden2", d.hidden2)?,
                ..d
            };
            cfg.layer1.hyper.epochs =
                s.get(epochs1, "epochs1", both.unwrap_or(d.layer1.hyper.epochs))?;
            cfg.layer2.hyper.epochs =
                s.get(epochs2, "epochs2", both.unwrap_or(d.layer2.hyper.epochs))?;
            cfg.layer1.hyper.learning_rate = s.get(lr1, "lr1", d.layer1.hyper.learning_rate)?;
            cfg.layer2.hyper.learning_rate = s.get(lr2, "lr2", d.layer2.hyper.learning_rate)?;
            cfg.layer2.fast_learning_rate = cfg.layer2.hyper.learning_rate;
            let mb = s.get(minibatch, "minibatch", d.layer1.hyper.minibatch)?;
            cfg.layer1.hyper.minibatch = mb;
            cfg.layer2.hyper.minibatch = mb;
            cfg.layer1.hyper.validate().map_err(config_err)?;
            cfg.layer2.hyper.validate().map_err(config_err)?;
            let cfg = cfg.with_seed(e.seed);

            let manifest_path = s.opt(source.manifest.clone(), "manifest")?;
            let spec = s.opt(source.sprite_spec.clone(), "sprite-spec")?;
            let (patches, w, h) = match (manifest_path, spec) {
                (Some(_), Some(_)) => {
                    return Err(config_err(
                        "give either --manifest or --sprite-spec, not both",
                    ))
                }
                (None, Some(spec)) => {
                    let sprites = experiment::domain_spec(parse_style(&spec)?);
                    let n = s.get(n_sprites, "n-sprites", 2000)?;
                    if n == 0 {
                        return Err(config_err("--n-sprites must be positive"));
                    }
                    let m =
                        data::generate_sprites(&sprites, n, rng::derive(e.seed, "gdbn-sprites"))
                            .map_err(runtime_err)?;
                    (m, sprites.width, sprites.height)
                }
                (Some(_), None) => {
                    let (scenes, _) = load_scenes(&source, &s, e.seed)?;
                    let labelled: Vec<&Scene> =
                        scenes.iter().filter(|sc| sc.truth.is_some()).collect();
                    if labelled.is_empty() {
                        return Err(config_err("manifest has no labelled scenes"));
                    }
                    let grid = PatchGrid::new(24, 24);
                    (crops_of(&labelled, &grid), 24, 24)
                }
                (None, None) => {
                    return Err(config_err("one of --manifest or --sprite-spec is required"))
                }
            };
            let (model, rep) = gdbn::greedy_train(&patches, w, h, 1, &cfg).map_err(runtime_err)?;
            for (i, r) in rep.layer1.epoch_reconstruction.iter().enumerate() {
                println!("epoch = {}, reconstruction = {r}", i + 1);
            }
            let path = e.out_dir.join("model.agen");
            agen::save_model(&path, &model).map_err(runtime_err)?;
            println!("model = {}", path.display());
            Ok(())
        }
        Command::TrainNet {
            common,
            source,
            model,
            pairs_per_scene,
            epochs,
            lr,
            momentum,
            minibatch,
            hidden,
            pairs_cache,
        } => {
            let s = Settings::load(&common, "train-net")?;
            let e = env(&common, &s)?;
            let model = load_model(&s, model)?;
            let d = EmConfig::default();
            let hyper = TrainHyper {
                learning_rate: s.get(lr, "lr", d.net_hyper.learning_rate)?,
                epochs: s.get(epochs, "epochs", d.net_hyper.epochs)?,
                minibatch: s.get(minibatch, "minibatch", d.net_hyper.minibatch)?,
                momentum: s.get(momentum, "momentum", d.net_hyper.momentum)?,
                weight_decay: d.net_hyper.weight_decay,
                seed: rng::derive(e.seed, "net-sgd"),
            };
            hyper.validate().map_err(config_err)?;
            let hidden = s.get(hidden, "hidden", d.net_hidden)?;
            if hidden == 0 {
                return Err(config_err("--hidden must be positive"));
            }
            let per = s.get(pairs_per_scene, "pairs-per-scene", d.pairs_per_scene)?;
            let cache = s.opt(pairs_cache, "pairs-cache")?;
            let grid = patch_dims(&model);
            let training = match cache.as_deref().filter(|p| p.exists()) {
                Some(p) => pairs::read(p).map_err(config_err)?,
                None => {
                    let (scenes, _) = load_scenes(&source, &s, e.seed)?;
                    let labelled: Vec<LabeledScene> = scenes
                        .iter()
                        .filter_map(|sc| {
                            sc.truth.map(|g| LabeledScene {
                                canonical: glimpse_core::warp::extract_patch(&sc.canvas, &grid, &g),
                                canvas: sc.canvas.clone(),
                                gaze: g,
                            })
                        })
                        .collect();
                    if labelled.is_empty() {
                        return Err(config_err("network training needs labelled scenes"));
                    }
                    let mean =
                        Patch::new(grid.width(), grid.height(), 1, model.mean_patch().to_vec())
                            .map_err(runtime_err)?;
                    let t = approxnet::make_training_pairs(
                        &labelled,
                        &grid,
                        &Jitter::default(),
                        Some((&mean, 0.5)),
                        labelled.len() * per,
                        rng::derive(e.seed, "pairs"),
                    )
                    .map_err(runtime_err)?;
                    if let Some(p) = &cache {
                        pairs::write(p, &t).map_err(runtime_err)?;
                    }
                    t
                }
            };
            let init =
                ApproxNetParams::new(model.channels, hidden, rng::derive(e.seed, "net-init"));
            let (net, rep) = approxnet::sgd_train(&init, &training, &hyper).map_err(runtime_err)?;
            for (i, l) in rep.epoch_loss.iter().enumerate() {
                println!("epoch = {}, loss = {l}", i + 1);
            }
            let path = e.out_dir.join("net.agen");
            agen::save_net(&path, &net).map_err(runtime_err)?;
            println!("net = {}", path.display());
            Ok(())
        }
        Command::Infer {
            common,
            schedule: sa,
            model,
            net,
            image,
            manifest: man,
            scene_index,
            truth,
            init,
            crop,
        } => {
            let s = Settings::load(&common, "infer")?;
            let e = env(&common, &s)?;
            let model = load_model(&s, model)?;
            let net = load_net(&s.required(net, "net")?)?;
            let sch = schedule(&sa, &s)?;
            let image = s.opt(image, "image")?;
            let man = s.opt(man, "manifest")?;
            let (id, canvas, mut true_gaze) = match (image, man) {
                (Some(p), None) => {
                    let c = pnm::read(&p).map_err(config_err)?.to_grayscale();
                    (
                        p.file_name()
                            .map_or(String::new(), |f| f.to_string_lossy().into_owned()),
                        c,
                        None,
                    )
                }
                (None, Some(m)) => {
                    let recs = manifest::load_dataset(&m).map_err(config_err)?;
                    let k = s.get(scene_index, "scene-index", 0)?;
                    let r = recs
                        .get(k)
                        .ok_or_else(|| config_err(format!("--scene-index {k} out of range")))?;
                    let c = pnm::read(&r.canvas_path)
                        .map_err(config_err)?
                        .to_grayscale();
                    (
                        r.canvas_path
                            .file_name()
                            .map_or(String::new(), |f| f.to_string_lossy().into_owned()),
                        c,
                        r.true_gaze,
                    )
                }
                _ => {
                    return Err(config_err(
                        "exactly one of --image or --manifest is required",
                    ))
                }
            };
            if let Some(t) = s.opt(truth, "truth")? {
                true_gaze = Some(parse_gaze(&t, "truth")?);
            }
            let grid = patch_dims(&model);
            let (state, trace) = match s.opt(init, "init")? {
                Some(g) => infer::infer_from(
                    &canvas,
                    &model,
                    &net,
                    &sch,
                    InferenceState::initial(&model, parse_gaze(&g, "init")?),
                    e.seed,
                ),
                None => infer::infer(&canvas, &model, &net, &sch, e.seed),
            }
            .map_err(runtime_err)?;
            let sigma = model.sigmas();
            let v = &state.v.values;
            let approx: Vec<(Gaze, f64)> = state
                .path
                .iter()
                .map(|g| (*g, hmc::potential(g, v, &canvas, &grid, &sigma)))
                .collect();
            report::write_trace(&e.out_dir.join("trace.csv"), &approx, &trace)
                .map_err(runtime_err)?;
            let final_u = hmc::potential(&state.u, v, &canvas, &grid, &sigma);
            let iou = true_gaze.map(|t| bench::gaze_iou(&state.u, &t, &grid));
            let row = report::ResultRow {
                scene_id: id,
                gaze: state.u,
                iou,
                final_u: Some(final_u),
                accept_rate: (!trace.is_empty()).then(|| trace.acceptance_rate()),
            };
            report::write_results(&e.out_dir.join("result.csv"), &[row]).map_err(runtime_err)?;
            if crop {
                let p = glimpse_core::warp::extract_patch(&canvas, &grid, &state.u);
                let c =
                    Canvas::new(p.width, p.height, p.channels, p.values).map_err(runtime_err)?;
                pnm::write(&e.out_dir.join("crop.pgm"), &c).map_err(runtime_err)?;
            }
            let [a, b, dx, dy] = state.u.as_array();
            println!("gaze = {a},{b},{dx},{dy}");
            if let Some(i) = iou {
                println!("iou = {i}");
            }
            Ok(())
        }
        Command::Em {
            common,
            source,
            schedule: sa,
            model,
            net,
            rounds,
            e_samples,
            m_epochs,
            refresh_net,
            bootstrap_fraction,
            pairs_per_scene,
            net_epochs,
            hidden,
            ais_chains,
            ais_distributions,
        } => {
            let s = Settings::load(&common, "em")?;
            let e = env(&common, &s)?;
            let model = load_model(&s, model)?;
            let net = match s.opt(net, "net")? {
                Some(p) => Some(load_net(&p)?),
                None => None,
            };
            let d = EmConfig::default();
            let mut cfg = EmConfig {
                rounds: s.get(rounds, "rounds", d.rounds)?,
                e_samples_per_image: s.get(e_samples, "e-samples", d.e_samples_per_image)?,
                refresh_net: s.flag(refresh_net, "refresh-net")?,
                bootstrap_fraction: s.get(
                    bootstrap_fraction,
                    "bootstrap-fraction",
                    d.bootstrap_fraction,
                )?,
                schedule: schedule(&sa, &s)?,
                pairs_per_scene: s.get(pairs_per_scene, "pairs-per-scene", d.pairs_per_scene)?,
                net_hidden: s.get(hidden, "hidden", d.net_hidden)?,
                ais_chains: s.get(ais_chains, "ais-chains", d.ais_chains)?,
                ais_distributions: s.get(
                    ais_distributions,
                    "ais-distributions",
                    d.ais_distributions,
                )?,
                ..d
            };
            cfg.net_hyper.epochs = s.get(net_epochs, "net-epochs", d.net_hyper.epochs)?;
            if let Some(m) = s.opt(m_epochs, "m-epochs")? {
                cfg.m_hyper1.epochs = m;
                cfg.m_hyper2.epochs = m;
            }
            cfg.validate().map_err(config_err)?;
            let (scenes, _) = load_scenes(&source, &s, e.seed)?;
            if scenes.is_empty() {
                return Err(config_err("EM needs at least one scene"));
            }
            let labelled: Vec<&Scene> = scenes.iter().filter(|sc| sc.truth.is_some()).collect();
            let n_boot = (cfg.bootstrap_fraction * labelled.len() as f64).ceil() as usize;
            let bootstrap: Vec<(Canvas, Gaze)> = labelled[..n_boot.min(labelled.len())]
                .iter()
                .map(|sc| (sc.canvas.clone(), sc.truth.expect("labelled")))
                .collect();
            let unlabeled: Vec<Canvas> = scenes.iter().map(|sc| sc.canvas.clone()).collect();
            let truth: Option<Vec<Gaze>> = scenes.iter().map(|sc| sc.truth).collect();
            let grid = patch_dims(&model);
            let heldout = (!labelled.is_empty()).then(|| crops_of(&labelled, &grid));
            let data = EmData {
                labeled: &bootstrap,
                unlabeled: &unlabeled,
                unlabeled_truth: truth.as_deref(),
                heldout: heldout.as_ref(),
            };
            if net.is_none() && bootstrap.is_empty() {
                return Err(config_err(
                    "without --net, EM needs labelled scenes to bootstrap the network",
                ));
            }
            let (model, net, rep) =
                em::run_em(&model, net.as_ref(), data, &cfg, e.seed).map_err(runtime_err)?;
            report::write_em_report(&e.out_dir.join("em_report.csv"), &rep.rounds)
                .map_err(runtime_err)?;
            for (k, m) in rep.checkpoints.iter().enumerate() {
                agen::save_model(&e.out_dir.join(format!("model_round{}.agen", k + 1)), m)
                    .map_err(runtime_err)?;
            }
            agen::save_model(&e.out_dir.join("model.agen"), &model).map_err(runtime_err)?;
            agen::save_net(&e.out_dir.join("net.agen"), &net).map_err(runtime_err)?;
            for r in &rep.rounds {
                println!(
                    "round = {}, samples = {}, bound = {}",
                    r.round,
                    r.n_samples,
                    r.heldout_bound.map_or("n/a".into(), |b| b.to_string())
                );
            }
            Ok(())
        }
        Command::Eval {
            common,
            source,
            schedule: sa,
            method,
            model,
            net,
            offsets,
            ring,
            scales,
            stride,
        } => {
            let s = Settings::load(&common, "eval")?;
            let e = env(&common, &s)?;
            let method: Method = s
                .required::<String>(method, "method")?
                .parse()
                .map_err(config_err)?;
            let model = load_model(&s, model)?;
            let offsets = parse_list(&s.get(offsets, "offsets", "30".to_string())?, "offsets")?;
            if offsets.iter().any(|&o| o < 0.0) {
                return Err(config_err("--offsets must be non-negative"));
            }
            let sch = schedule(&sa, &s)?;
            let protocol = BenchProtocol {
                offsets,
                ring: s.flag(ring, "ring")?,
                scale_range: sch.init_scale_range,
                rotation: sch.init_rotation_range,
                seed: e.seed,
            };
            let (scenes, _) = load_scenes(&source, &s, e.seed)?;
            if scenes.iter().any(|sc| sc.truth.is_none()) {
                return Err(config_err("evaluation needs a true gaze for every scene"));
            }
            let records: Vec<SceneRecord> = scenes
                .iter()
                .map(|sc| SceneRecord {
                    canvas: sc.canvas.clone(),
                    truth: sc.truth.expect("checked"),
                })
                .collect();
            let ids: Vec<String> = scenes.iter().map(|sc| sc.id.clone()).collect();
            let grid = patch_dims(&model);
            let net_holder;
            let localizer: Box<dyn Localizer + '_> = match method {
                Method::Infer => {
                    net_holder = load_net(&s.required(net, "net")?)?;
                    Box::new(InferLocalizer {
                        model: &model,
                        net: &net_holder,
                        schedule: sch,
                    })
                }
                m => {
                    let scales = parse_list(
                        &s.get(scales, "scales", "1.25,1.5,1.75".to_string())?,
                        "scales",
                    )?;
                    let stride = s.get(stride, "stride", 1)?;
                    let template = Patch::new(
                        grid.width(),
                        grid.height(),
                        model.channels,
                        model.mean_patch().to_vec(),
                    )
                    .map_err(runtime_err)?;
                    Box::new(SlidingLocalizer {
                        method: m,
                        template,
                        scales,
                        stride,
                    })
                }
            };
            let summary = bench::run_benchmark(localizer.as_ref(), &records, &grid, &protocol)
                .map_err(runtime_err)?;
            let name = method.name();
            report::write_curve(
                &e.out_dir.join(format!("curve_{name}.csv")),
                &summary.points,
            )
            .map_err(runtime_err)?;
            report::write_bench_rows(
                &e.out_dir.join(format!("results_{name}.csv")),
                &ids,
                &summary,
            )
            .map_err(runtime_err)?;
            for p in &summary.points {
                println!(
                    "method = {name}, offset = {}, success = {}, mean_iou = {}, evaluations = {}",
                    p.offset, p.success_rate, p.mean_iou, p.mean_evaluations
                );
            }
            Ok(())
        }
        Command::Sample {
            common,
            model,
            n,
            gibbs_steps,
        } => {
            let s = Settings::load(&common, "sample")?;
            let e = env(&common, &s)?;
            let model = load_model(&s, model)?;
            let n = s.get(n, "n", 64)?;
            if n == 0 {
                return Err(config_err("--n must be positive"));
            }
            if model.channels != 1 {
                return Err(config_err("sample montages need a single-channel model"));
            }
            let steps = s.get(gibbs_steps, "gibbs-steps", 200)?;
            let m = model.sample(n, steps, e.seed).map_err(runtime_err)?;
            let rows: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).to_vec()).collect();
            let cols = (n as f64).sqrt().ceil() as usize;
            let canvas = pnm::montage(&rows, model.patch_width, model.patch_height, cols)
                .map_err(runtime_err)?;
            let path = e.out_dir.join("samples.pgm");
            pnm::write(&path, &canvas).map_err(runtime_err)?;
            println!("samples = {}", path.display());
            Ok(())
        }
        Command::Ais {
            common,
            model,
            chains,
            distributions,
            exact,
            manifest: man,
            bound_samples,
        } => {
            let s = Settings::load(&common, "ais")?;
            let e = env(&common, &s)?;
            let model = load_model(&s, model)?;
            let chains = s.get(chains, "chains", 100)?;
            let dists = s.get(distributions, "distributions", 1000)?;
            let est =
                gdbn::ais_log_z(&model.layer2, chains, dists, e.seed).map_err(|err| match err {
                    glimpse_core::Error::Invalid(_) => config_err(err),
                    other => runtime_err(other),
                })?;
            let se = (est.log_z_ci_high - est.log_z_ci_low) / 6.0;
            println!(
                "log_z = {}, ci = [{}, {}]",
                est.log_z, est.log_z_ci_low, est.log_z_ci_high
            );
            let mut rows = vec![("ais_log_z".to_string(), chains, est.log_z, se)];
            if s.flag(exact, "exact")? {
                let z = model.layer2.exact_log_z().map_err(config_err)?;
                println!("exact_log_z = {z}");
                rows.push(("exact_log_z".into(), 1, z, 0.0));
            }
            if let Some(m) = s.opt(man, "manifest")? {
                let src = Source {
                    manifest: Some(m),
                    sprite_spec: None,
                    scenes: None,
                    scene_seed: None,
                };
                let (scenes, _) = load_scenes(&src, &s, e.seed)?;
                let labelled: Vec<&Scene> = scenes.iter().filter(|sc| sc.truth.is_some()).collect();
                if labelled.is_empty() {
                    return Err(config_err("manifest has no labelled scenes"));
                }
                let crops = crops_of(&labelled, &patch_dims(&model));
                let b = model
                    .mean_bound(
                        &crops,
                        s.get(bound_samples, "bound-samples", 10)?,
                        est.log_z,
                        rng::derive(e.seed, "bound"),
                    )
                    .map_err(runtime_err)?;
                println!("bound = {}, stderr = {}", b.nats, b.stderr);
                rows.push(("bound".into(), labelled.len(), b.nats, b.stderr));
            }
            report::write_bounds(&e.out_dir.join("ais.csv"), &rows).map_err(runtime_err)?;
            Ok(())
        }
        Command::MakeScenes {
            common,
            sprite_spec,
            scenes,
            unlabeled,
        } => {
            let s = Settings::load(&common, "make-scenes")?;
            let e = env(&common, &s)?;
            let style = parse_style(&s.required(sprite_spec, "sprite-spec")?)?;
            let n = s.get(scenes, "scenes", 20)?;
            let unlabeled = s.flag(unlabeled, "unlabeled")?;
            let list = experiment::scenes(
                &experiment::domain_spec(style),
                &ScenePlan::default(),
                n,
                e.seed,
            )
            .map_err(runtime_err)?;
            let mut rows = Vec::with_capacity(n);
            for (i, sc) in list.iter().enumerate() {
                let file = format!("scene_{i:04}.pgm");
                pnm::write(&e.out_dir.join(&file), &sc.canvas).map_err(runtime_err)?;
                rows.push((
                    file,
                    (!unlabeled).then_some(sc.truth),
                    Some(sc.class as i64),
                ));
            }
            let path = e.out_dir.join("manifest.csv");
            manifest::write_manifest(&path, &rows).map_err(runtime_err)?;
            info!("wrote {n} scenes");
            println!("manifest = {}", path.display());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let c = parse_config("# c\nepochs = 3\n out_dir=/tmp/x # tail\n\n").unwrap();
        assert_eq!(c.get("epochs").unwrap(), "3");
        assert_eq!(c.get("out-dir").unwrap(), "/tmp/x");
        assert!(parse_config("novalue").is_err());
        assert!(parse_config("a = 1\na = 2").is_err());
    }

    #[test]
    fn every_subcommand_has_help() {
        let cmd = Cli::command();
        for sub in cmd.get_subcommands() {
            assert!(sub.get_about().is_some(), "{}", sub.get_name());
            assert!(sub.get_arguments().any(|a| a.get_long() == Some("seed")));
        }
        cmd.debug_assert();
    }
}
