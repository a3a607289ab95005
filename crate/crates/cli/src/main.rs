//! `imle`: data generation, training, closed-loop planning and latency
//! benchmarks from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use imle_core::costs::CostContext;
use imle_core::diffusion::{
    self, init_denoiser, train_ddpm, DdpmTrainConfig, DenoiserDims, Guidance, NoiseSchedule,
};
use imle_core::generator::{self, init_params, ContextEncoding, GeneratorDims};
use imle_core::imle::{self, Optimizer, TrainConfig, Weighting};
use imle_core::metrics::{self, sampling_frequency, GuidanceTimer, LatencyReport};
use imle_core::planners::{
    receding_horizon_run, sample_candidates, EpisodeLog, PlanMode, PlanShape, PlannerConfig, ProposalSource,
};
use imle_core::sim::{self, AugmentationSpec, BimodalConfig, CrossingConfig, RawLoadOptions, Scene};
use imle_core::{Context, Dataset, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "imle", version, about = "Trajectory generation and sampling-based planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a trajectory dataset.
    Datagen(DatagenArgs),
    /// Train an IMLE generator or a DDPM baseline.
    Train(TrainArgs),
    /// Run closed-loop episodes and write logs plus a metrics CSV.
    Plan(PlanArgs),
    /// Time IMLE and DDPM planning calls.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Bimodal,
    Raw,
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    out: PathBuf,
    /// Raw `frame agent x y` file, required for `--kind raw`.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Number of samples (bimodal only).
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    #[arg(long, default_value_t = 0.4)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `translate=X:Y,..;rotate=DEG,..;smooth=W`; every part optional.
    #[arg(long)]
    augment: Option<String>,
    /// Draw each bimodal goal distance uniformly from `LO:HI`.
    #[arg(long)]
    goal_range: Option<String>,
    /// Per-point noise of bimodal demonstrations, meters.
    #[arg(long)]
    noise: Option<f64>,
    /// Leave the central obstacle out of bimodal contexts.
    #[arg(long)]
    no_obstacle: bool,
    /// Start each bimodal window at a random step of the full detour.
    #[arg(long)]
    random_phase: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Imle,
    Ddpm,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "score_rank")]
    ScoreRank,
    Mppi,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProposalArg {
    Imle,
    Line,
    Gauss,
}

#[derive(Args)]
struct PlanArgs {
    /// Generator checkpoint, required for `--proposal imle`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// A scene count for synthetic crossings, or a JSON file of scenes.
    #[arg(long)]
    scenes: String,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, value_enum)]
    proposal: ProposalArg,
    /// Safety radius for the costs and the collision metric, meters.
    #[arg(long, default_value_t = 0.5)]
    radius: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes evaluated in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON planner configuration; defaults apply to omitted keys.
    #[arg(long)]
    planner_config: Option<PathBuf>,
    /// Planning horizon; defaults to the checkpoint's.
    #[arg(long)]
    horizon: Option<usize>,
    /// Straight-line and fallback speed, m/s.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Random-walk step of the Gaussian proposal, meters.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Feed the generator the raw context instead of the goal-aligned one.
    #[arg(long)]
    no_canonicalize: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt_imle: PathBuf,
    #[arg(long)]
    ckpt_ddpm: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Step size of the cost gradient in the DDPM reverse chain.
    #[arg(long, default_value_t = 1.0)]
    guidance_scale: f64,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse { .. } | Error::Version(_) => 1,
            Error::Config(_) | Error::Empty(_) | Error::Timer(_) => 2,
            Error::Divergence(_) | Error::Numeric(_) => 3,
            Error::Dimension(_) => 4,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen(a) => cmd_datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn parse_pair(s: &str) -> Result<(f64, f64), Failure> {
    let bad = || Failure::usage(format!("expected X:Y, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_augment(spec: &str) -> Result<AugmentationSpec, Failure> {
    let mut out = AugmentationSpec::identity();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("augment part `{part}` lacks `=`")))?;
        let items = value.split(',').map(str::trim).filter(|v| !v.is_empty());
        match key.trim() {
            "translate" => {
                out.translations = items
                    .map(|v| parse_pair(v).map(|(x, y)| [x, y]))
                    .collect::<Result<_, _>>()?;
            }
            "rotate" => {
                out.rotations = items
                    .map(|v| {
                        v.parse::<f64>()
                            .map(f64::to_radians)
                            .map_err(|_| Failure::usage(format!("bad rotation `{v}`")))
                    })
                    .collect::<Result<_, _>>()?;
            }
            "smooth" => {
                out.smoothing_window = value
                    .trim()
                    .parse()
                    .map_err(|_| Failure::usage(format!("bad smoothing window `{value}`")))?;
            }
            other => return Err(Failure::usage(format!("unknown augment key `{other}`"))),
        }
    }
    out.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(out)
}

fn cmd_datagen(a: DatagenArgs) -> CmdResult {
    let augment = a.augment.as_deref().map(parse_augment).transpose()?;
    let ds = match a.kind {
        DataKind::Bimodal => {
            let mut cfg = BimodalConfig {
                include_obstacle: !a.no_obstacle,
                random_phase: a.random_phase,
                ..BimodalConfig::default()
            };
            if let Some(r) = &a.goal_range {
                cfg.goal_range = Some(parse_pair(r)?);
            }
            if let Some(noise) = a.noise {
                cfg.noise_sigma = noise;
            }
            sim::generate_bimodal_with(&cfg, a.n, a.horizon, a.dt, a.seed)?
        }
        DataKind::Raw => {
            let input = a
                .input
                .as_ref()
                .ok_or_else(|| Failure::usage("--kind raw needs --in <file>"))?;
            let opts = RawLoadOptions {
                horizon: a.horizon,
                dt: a.dt,
                frame_period: None,
            };
            sim::load_raw_trajectories(input, &opts)?
        }
    };
    let ds = match &augment {
        Some(spec) => sim::augment(&ds, spec, None)?,
        None => ds,
    };
    ds.save(&a.out)?;
    println!("{}", ds.len());
    Ok(())
}

fn default_scale() -> f64 {
    4.0
}
fn default_film() -> usize {
    16
}
fn default_history() -> usize {
    1
}
fn default_diffusion_steps() -> usize {
    50
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    2e-2
}
fn default_time_embedding() -> usize {
    16
}
fn default_optimizer() -> Optimizer {
    Optimizer::Sgd
}

/// Flat training configuration. The first eleven keys are required.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    latent_dim: usize,
    hidden: Vec<usize>,
    m: usize,
    #[serde(rename = "K")]
    epochs: usize,
    #[serde(rename = "L")]
    inner_steps: usize,
    eta: f64,
    batch: usize,
    minibatch: usize,
    weighting: Weighting,
    beta_w: f64,
    seed: u64,
    #[serde(default = "default_optimizer")]
    optimizer: Optimizer,
    #[serde(default)]
    cosine_decay: bool,
    #[serde(default = "default_scale")]
    context_scale: f64,
    #[serde(default)]
    obstacle_slots: usize,
    #[serde(default = "default_history")]
    history_len: usize,
    #[serde(default = "default_film")]
    film_hidden: usize,
    #[serde(default = "default_diffusion_steps")]
    diffusion_steps: usize,
    #[serde(default = "default_beta_start")]
    beta_start: f64,
    #[serde(default = "default_beta_end")]
    beta_end: f64,
    #[serde(default = "default_time_embedding")]
    time_embedding: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg: TrainFile = read_json(&a.config)?;
    let mut ds = Dataset::load(&a.data)?;
    let state_dim = ds.samples.first().map_or(2, |s| s.trajectory.state_dim());
    let action_dim = ds.samples.first().map_or(0, |s| s.trajectory.action_dim());
    let encoding = ContextEncoding {
        goal_dim: ds.samples.first().map_or(2, |s| s.context.goal.len()),
        obstacle_slots: cfg.obstacle_slots,
        history_len: cfg.history_len,
        scale: cfg.context_scale,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match a.model {
        ModelKind::Imle => {
            let dims = GeneratorDims {
                latent_dim: cfg.latent_dim,
                encoding,
                hidden: cfg.hidden.clone(),
                film_hidden: cfg.film_hidden,
                horizon: ds.horizon,
                state_dim,
                action_dim,
            };
            let params = init_params::<f32, _>(dims, &mut rng)?;
            imle::assign_weights(&mut ds, cfg.weighting, cfg.beta_w)?;
            let tc = TrainConfig {
                sample_factor: cfg.m,
                epochs: cfg.epochs,
                inner_steps: cfg.inner_steps,
                step_size: cfg.eta,
                batch_size: cfg.batch,
                minibatch_size: cfg.minibatch,
                beta_w: cfg.beta_w,
                weighting: cfg.weighting,
                optimizer: cfg.optimizer,
                cosine_decay: cfg.cosine_decay,
                seed: cfg.seed,
            };
            let trained = imle::train(&ds, params, &tc, &mut |r| eprintln!("{}", r.log_line()))?;
            generator::save_checkpoint(&trained, &a.out)?;
        }
        ModelKind::Ddpm => {
            let dims = DenoiserDims {
                encoding,
                hidden: cfg.hidden.clone(),
                film_hidden: cfg.film_hidden,
                time_embedding: cfg.time_embedding,
                horizon: ds.horizon,
                state_dim,
                action_dim,
            };
            let sched = NoiseSchedule::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
            let params = init_denoiser::<f32, _>(dims, &mut rng)?;
            let dc = DdpmTrainConfig {
                steps: cfg.epochs * cfg.inner_steps,
                step_size: cfg.eta,
                batch_size: cfg.minibatch,
                optimizer: cfg.optimizer,
                seed: cfg.seed,
            };
            let trained = train_ddpm(&ds, &sched, params, &dc, &mut |r| eprintln!("{}", r.log_line()))?;
            diffusion::save_ddpm(&trained, &sched, &a.out)?;
        }
    }
    Ok(())
}

fn load_scenes(spec: &str, seed: u64) -> Result<Vec<Scene>, Failure> {
    if let Ok(count) = spec.parse::<usize>() {
        if count == 0 {
            return Err(Failure::usage("--scenes count must be at least 1"));
        }
        return Ok(sim::generate_crossing_scenes(count, seed, &CrossingConfig::default()));
    }
    let scenes: Vec<Scene> = read_json(Path::new(spec))?;
    if scenes.is_empty() {
        return Err(Failure::usage(format!("{spec} holds no scenes")));
    }
    Ok(scenes)
}

/// Final metrics of one episode, written as the last line of its log.
#[derive(Serialize)]
struct EpisodeSummary<'a> {
    scene_id: usize,
    steps: usize,
    reached: bool,
    collision: bool,
    goal_error: f64,
    smoothness: f64,
    jerk: Option<f64>,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct PlanSummary {
    episodes: usize,
    radius: f64,
    collision_rate: f64,
    mean_goal_error: f64,
    mean_smoothness: f64,
    mean_jerk: Option<f64>,
    failed_episodes: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

fn episode_rng(seed: u64, scene_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id as u64);
    rng
}

fn cmd_plan(a: PlanArgs) -> CmdResult {
    if a.jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    if !(a.radius > 0.0) {
        return Err(Failure::usage("--radius must be positive"));
    }
    let mut cfg: PlannerConfig = match &a.planner_config {
        Some(p) => read_json(p)?,
        None => PlannerConfig::default(),
    };
    cfg.cost.safety_radius = a.radius;
    let src = match a.proposal {
        ProposalArg::Imle => {
            let path = a
                .ckpt
                .as_ref()
                .ok_or_else(|| Failure::usage("--proposal imle needs --ckpt"))?;
            let params = generator::load_checkpoint(path)?;
            if params.dims.state_dim != 2 || params.dims.action_dim != 0 {
                return Err(Error::dim(format!(
                    "checkpoint produces {} state and {} action channels; planning needs 2-D positions",
                    params.dims.state_dim, params.dims.action_dim
                ))
                .into());
            }
            match a.horizon {
                Some(h) if h != params.dims.horizon => {
                    return Err(Error::dim(format!(
                        "checkpoint horizon {} differs from --horizon {h}",
                        params.dims.horizon
                    ))
                    .into())
                }
                _ => cfg.horizon = params.dims.horizon,
            }
            ProposalSource::Imle {
                params,
                canonicalize: !a.no_canonicalize,
            }
        }
        ProposalArg::Line => ProposalSource::StraightLine { speed: a.speed },
        ProposalArg::Gauss => ProposalSource::GaussianAroundPrevious {
            sigma: a.sigma,
            speed: a.speed,
        },
    };
    if let (Some(h), false) = (a.horizon, matches!(a.proposal, ProposalArg::Imle)) {
        cfg.horizon = h;
    }
    cfg.validate()?;
    let mode = match a.mode {
        ModeArg::ScoreRank => PlanMode::ScoreRank,
        ModeArg::Mppi => PlanMode::Mppi,
    };
    let scenes = load_scenes(&a.scenes, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let logs: Vec<EpisodeLog> = pool.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| receding_horizon_run(s, &src, mode, &cfg, &mut episode_rng(a.seed, i)))
            .collect::<imle_core::Result<_>>()
    })?;

    let mut csv = String::from(metrics::METRICS_HEADER);
    csv.push('\n');
    let mut rows = Vec::with_capacity(logs.len());
    for (i, (log, scene)) in logs.iter().zip(&scenes).enumerate() {
        let m = metrics::episode_metrics(log, scene, a.radius)?;
        csv.push_str(&metrics::metrics_row(i, &m));
        csv.push('\n');
        let summary = EpisodeSummary {
            scene_id: i,
            steps: log.steps.len(),
            reached: log.reached,
            collision: m.collision,
            goal_error: m.goal_error,
            smoothness: m.smoothness,
            jerk: m.jerk.is_finite().then_some(m.jerk),
            error: log.error.as_deref(),
        };
        let json = serde_json::to_string(&summary).expect("summary serializes");
        write_file(&a.out.join(format!("episode_{i:04}.log")), &format!("{}{json}\n", log.log_text()))?;
        if let Some(e) = &log.error {
            eprintln!("scene {i}: episode aborted: {e}");
        }
        rows.push(m);
    }
    write_file(&a.out.join("metrics.csv"), &csv)?;

    let jerks: Vec<f64> = rows.iter().map(|m| m.jerk).filter(|j| j.is_finite()).collect();
    let summary = PlanSummary {
        episodes: rows.len(),
        radius: a.radius,
        collision_rate: metrics::collision_rate(&logs, &scenes, a.radius)?,
        mean_goal_error: mean(rows.iter().map(|m| m.goal_error)),
        mean_smoothness: mean(rows.iter().map(|m| m.smoothness)),
        mean_jerk: (!jerks.is_empty()).then(|| mean(jerks.iter().copied())),
        failed_episodes: logs.iter().filter(|l| l.error.is_some()).count(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&a.out.join("summary.json"), &(json.clone() + "\n"))?;
    eprintln!("{json}");
    Ok(())
}

/// Fixed crossing scene used for timing, with the robot at its start.
fn bench_scene(seed: u64) -> Scene {
    let cfg = CrossingConfig {
        min_pedestrians: 3,
        max_pedestrians: 3,
        ..CrossingConfig::default()
    };
    sim::generate_crossing_scenes(1, seed, &cfg).remove(0)
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    if a.trials < metrics::MIN_TRIALS {
        return Err(Failure::usage(format!("--trials must be at least {}", metrics::MIN_TRIALS)));
    }
    if a.batch == 0 {
        return Err(Failure::usage("--batch must be at least 1"));
    }
    let imle_params = generator::load_checkpoint(&a.ckpt_imle)?;
    let (ddpm_params, sched) = diffusion::load_ddpm(&a.ckpt_ddpm)?;
    if imle_params.dims.horizon != ddpm_params.dims.horizon {
        return Err(Error::dim(format!(
            "IMLE horizon {} differs from DDPM horizon {}",
            imle_params.dims.horizon, ddpm_params.dims.horizon
        ))
        .into());
    }
    let horizon = imle_params.dims.horizon;
    let scene = bench_scene(a.seed);
    let ctx = Context::new(scene.robot_start.to_vec(), scene.goal.to_vec(), Vec::new())?;
    let planner = PlannerConfig::default();
    let costs = CostContext::from_scene(&scene, horizon, None, &planner.cost);
    let shape = PlanShape { horizon, dt: scene.dt };
    let src = ProposalSource::Imle {
        params: imle_params,
        canonicalize: true,
    };

    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let (imle_report, ddpm_report) = single.install(|| -> Result<(LatencyReport, LatencyReport), Failure> {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let imle_report = sampling_frequency(
            |timer| {
                let cands = sample_candidates(&src, &ctx, None, a.batch, shape, &mut rng)?;
                score_with(&cands, &costs, timer)
            },
            a.batch,
            a.trials,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let ddpm_report = sampling_frequency(
            |timer| {
                let grad = |t: &imle_core::Trajectory| timer.time(|| costs.gradient(t));
                let guidance = Guidance {
                    scale: a.guidance_scale,
                    gradient: &grad,
                };
                let cands = diffusion::reverse_sample_batch(
                    &ddpm_params,
                    &ddpm_params.dims,
                    &ctx,
                    &sched,
                    scene.dt,
                    a.batch,
                    &mut rng,
                    Some(&guidance),
                )?;
                score_with(&cands, &costs, timer)
            },
            a.batch,
            a.trials,
        )?;
        Ok((imle_report, ddpm_report))
    })?;

    let ratio = imle_report.hz / ddpm_report.hz;
    let mut csv = format!("{},ratio\n", metrics::BENCH_HEADER);
    for (name, r) in [("imle", &imle_report), ("ddpm", &ddpm_report)] {
        csv.push_str(&format!("{},{ratio:.3}\n", r.csv_row(name)));
    }
    write_file(&a.out, &csv)?;
    eprint!("{csv}");
    Ok(())
}

/// Scores every candidate, counting the time as guidance, and keeps the best.
fn score_with(
    cands: &[imle_core::Trajectory],
    costs: &CostContext,
    timer: &GuidanceTimer,
) -> imle_core::Result<()> {
    let totals = timer.time(|| {
        cands
            .iter()
            .map(|c| costs.evaluate(c).map(|b| b.total))
            .collect::<imle_core::Result<Vec<f64>>>()
    })?;
    let best = imle_core::planners::score_rank_select(cands, |c| {
        let i = cands.iter().position(|x| std::ptr::eq(x, c)).unwrap_or(0);
        -totals[i]
    })?;
    std::hint::black_box(best);
    Ok(())
}
