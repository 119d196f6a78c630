//! Operator entry point: depth conversion, episode running, synthetic
//! generation, evaluation, and report rendering.
//!
//! Exit codes: 0 on success; 1 when a run or evaluation completed but one
//! or more episodes recorded an infrastructure failure (parse-failure
//! terminal); 2 on configuration or I/O errors.
//!
//! Configuration precedence, highest first: command-line flags, the
//! MDE_VLM_ENDPOINT / MDE_VLM_API_KEY / MDE_DEPTH_ENDPOINT environment
//! variables, an optional TOML config file, built-in defaults.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use depthnav_core::clients::{
    fixed_agent, parse_action, random_agent, Agent, DepthEstimator, EstimatorBackend,
    EstimatorConfig, HttpDepthEstimator, HttpVlmAgent, ReplayDepthEstimator, ReplayVlmAgent,
    ScriptedAgent, VlmConfig, DEFAULT_TEMPERATURE, ENV_DEPTH_ENDPOINT, ENV_VLM_API_KEY,
    ENV_VLM_ENDPOINT,
};
use depthnav_core::controller::{
    run_episode, save_transcript, DeviationPolicy, RepresentationMode, RunParams, TerminalReason,
    World, DEFAULT_SYSTEM_PROMPT,
};
use depthnav_core::depth::{
    downsample, normalize, percentile_clip, preprocess_rgb, render_map, serialize_matrix,
    DepthField, DepthUnit, PipelineConfig, RenderConfig,
};
use depthnav_core::episode::{load_episodes, Episode};
use depthnav_core::metrics::{aggregate, report, MetricsSummary, ReportFormat};
use depthnav_core::npy::{read_npy, read_npz_entry, write_npz, ArrayRecord};
use depthnav_core::sim::{
    generate_corridor_suite, Camera, OracleAgent, SyntheticDepthEstimator, SyntheticWorld,
};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Parser)]
#[command(name = "depthnav", version, about = "Depth-assisted navigation evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Convert a frame (or stored field) into depth artifacts: NPZ field,
    /// matrix text, pseudo-color map PNG.
    Depth(DepthArgs),
    /// Run episodes with an agent and write one transcript JSON per episode.
    Run(RunArgs),
    /// Generate synthetic corridor scenes and episodes; optionally run the
    /// oracle agent closed-loop over them.
    Simulate(SimulateArgs),
    /// Aggregate transcripts into SR/NE/TU metrics and render reports.
    Eval(EvalArgs),
    /// Re-render a saved summary.
    Report(ReportArgs),
}

#[derive(Args)]
struct PipelineFlags {
    /// Target frame height in pixels (default 360)
    #[arg(long)]
    height: Option<u32>,
    /// Target frame width in pixels (default 640)
    #[arg(long)]
    width: Option<u32>,
    /// Matrix downsampling ratio r (default 40)
    #[arg(long)]
    ratio: Option<usize>,
    /// Lower clipping percentile l (default 1)
    #[arg(long)]
    lower: Option<f64>,
    /// Upper clipping percentile u (default 99)
    #[arg(long)]
    upper: Option<f64>,
}

#[derive(Args)]
struct BackendFlags {
    /// Chat-completions endpoint (overrides MDE_VLM_ENDPOINT)
    #[arg(long)]
    vlm_endpoint: Option<String>,
    /// Bearer key for the VLM endpoint (overrides MDE_VLM_API_KEY)
    #[arg(long)]
    api_key: Option<String>,
    /// Model name sent in chat-completions requests (default "default")
    #[arg(long)]
    model: Option<String>,
    /// Depth service endpoint (overrides MDE_DEPTH_ENDPOINT)
    #[arg(long)]
    depth_endpoint: Option<String>,
}

#[derive(Args)]
struct DepthArgs {
    /// Input image (png/jpeg) or stored field (npz/npy)
    #[arg(long)]
    input: PathBuf,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Depth backend: http | replay:<dir> | synthetic
    #[arg(long, default_value = "synthetic")]
    estimator: String,
    /// Declared unit of the estimator output: meters | relative
    #[arg(long, default_value = "meters")]
    unit: String,
    /// Synthetic world JSON for the synthetic backend
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Camera pose for the synthetic backend as x,y,heading
    #[arg(long, default_value = "0,0,0")]
    pose: String,
    /// Replay key; defaults to the input file stem
    #[arg(long)]
    frame_key: Option<String>,
    /// Optional TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[command(flatten)]
    backends: BackendFlags,
}

#[derive(Args)]
struct RunArgs {
    /// Episode JSON-lines file
    #[arg(long)]
    episodes: PathBuf,
    /// Transcript output directory
    #[arg(long)]
    out: PathBuf,
    /// Agent: http | gt | oracle | random | fixed:<ACTION> |
    /// scripted:<A,B,...> | replay:<dir>
    #[arg(long)]
    agent: String,
    /// Depth backend: http | replay:<dir> | synthetic
    #[arg(long, default_value = "synthetic")]
    estimator: String,
    /// Declared unit of the estimator output: meters | relative
    #[arg(long, default_value = "meters")]
    unit: String,
    /// Directory of per-episode synthetic world JSON files
    #[arg(long)]
    scenes_dir: Option<PathBuf>,
    /// Integrate robot motion from predicted actions instead of replaying
    /// recorded poses (requires the synthetic estimator and scene files)
    #[arg(long)]
    closed_loop: bool,
    /// Depth representation: matrix | map | hybrid (default matrix)
    #[arg(long)]
    mode: Option<String>,
    /// Deviation time threshold tau in seconds (default 4)
    #[arg(long)]
    tau: Option<f64>,
    /// VLM sampling temperature (default 1e-4)
    #[arg(long)]
    temperature: Option<f64>,
    /// Worker thread count (default 1)
    #[arg(long)]
    workers: Option<usize>,
    /// Base seed for seeded agents (default 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Oracle agent stop distance in meters (default 1.5)
    #[arg(long)]
    stop_distance: Option<f64>,
    /// File overriding the built-in system prompt
    #[arg(long)]
    system_prompt: Option<PathBuf>,
    /// Optional TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[command(flatten)]
    backends: BackendFlags,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory (episodes.jsonl, scenes/, optionally transcripts/)
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes to generate (default 10)
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Generator seed (default 7)
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Oracle stop distance in meters (default 1.5)
    #[arg(long, default_value_t = 1.5)]
    stop_distance: f64,
    /// Also run the oracle agent closed-loop and write transcripts
    #[arg(long)]
    run_oracle: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Episode JSON-lines file
    #[arg(long)]
    episodes: PathBuf,
    /// Directory of transcript JSON files
    #[arg(long)]
    transcripts: PathBuf,
    /// Output directory for summary.json and reports
    #[arg(long)]
    out: PathBuf,
    /// Also write an SVG bar chart of per-scene success rate
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// summary.json produced by eval
    #[arg(long)]
    summary: PathBuf,
    /// Output format: text | csv | svg
    #[arg(long, default_value = "text")]
    format: String,
    /// Write to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Optional TOML configuration file; every key mirrors a flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    pipeline: FilePipeline,
    #[serde(default)]
    run: FileRun,
    #[serde(default)]
    backends: FileBackends,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePipeline {
    height: Option<u32>,
    width: Option<u32>,
    ratio: Option<usize>,
    lower: Option<f64>,
    upper: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRun {
    mode: Option<String>,
    tau: Option<f64>,
    temperature: Option<f64>,
    workers: Option<usize>,
    seed: Option<u64>,
    stop_distance: Option<f64>,
    system_prompt: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBackends {
    vlm_endpoint: Option<String>,
    vlm_api_key: Option<String>,
    vlm_model: Option<String>,
    depth_endpoint: Option<String>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

fn resolve_pipeline(flags: &PipelineFlags, file: &FilePipeline) -> (PipelineConfig, RenderConfig) {
    let defaults = PipelineConfig::default();
    let pipeline = PipelineConfig {
        target_height: flags.height.or(file.height).unwrap_or(defaults.target_height),
        target_width: flags.width.or(file.width).unwrap_or(defaults.target_width),
        downsample_ratio: flags
            .ratio
            .or(file.ratio)
            .unwrap_or(defaults.downsample_ratio),
    };
    let render_defaults = RenderConfig::default();
    let render = RenderConfig {
        lower_percentile: flags
            .lower
            .or(file.lower)
            .unwrap_or(render_defaults.lower_percentile),
        upper_percentile: flags
            .upper
            .or(file.upper)
            .unwrap_or(render_defaults.upper_percentile),
        ..render_defaults
    };
    (pipeline, render)
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn resolve_vlm_config(flags: &BackendFlags, file: &FileBackends) -> Result<VlmConfig> {
    let endpoint = flags
        .vlm_endpoint
        .clone()
        .or_else(|| env_var(ENV_VLM_ENDPOINT))
        .or_else(|| file.vlm_endpoint.clone())
        .ok_or_else(|| anyhow!("no VLM endpoint: pass --vlm-endpoint or set {ENV_VLM_ENDPOINT}"))?;
    Ok(VlmConfig {
        endpoint,
        api_key: flags
            .api_key
            .clone()
            .or_else(|| env_var(ENV_VLM_API_KEY))
            .or_else(|| file.vlm_api_key.clone()),
        model: flags
            .model
            .clone()
            .or_else(|| file.vlm_model.clone())
            .unwrap_or_else(|| "default".to_string()),
    })
}

fn parse_unit(text: &str) -> Result<DepthUnit> {
    match text {
        "meters" => Ok(DepthUnit::Meters),
        "relative" => Ok(DepthUnit::Relative),
        other => bail!("unknown unit {other:?}; expected meters or relative"),
    }
}

fn parse_mode(text: &str) -> Result<RepresentationMode> {
    match text {
        "matrix" => Ok(RepresentationMode::MatrixOnly),
        "map" => Ok(RepresentationMode::MapOnly),
        "hybrid" => Ok(RepresentationMode::Hybrid),
        other => bail!("unknown mode {other:?}; expected matrix, map or hybrid"),
    }
}

/// Parses an estimator spec into its declarative config.
fn parse_estimator_spec(
    spec: &str,
    unit: DepthUnit,
    flags: &BackendFlags,
    file: &FileBackends,
) -> Result<EstimatorConfig> {
    let backend = if spec == "synthetic" {
        EstimatorBackend::Synthetic
    } else if spec == "http" {
        let endpoint = flags
            .depth_endpoint
            .clone()
            .or_else(|| env_var(ENV_DEPTH_ENDPOINT))
            .or_else(|| file.depth_endpoint.clone())
            .ok_or_else(|| {
                anyhow!("no depth endpoint: pass --depth-endpoint or set {ENV_DEPTH_ENDPOINT}")
            })?;
        EstimatorBackend::Http { endpoint }
    } else if let Some(dir) = spec.strip_prefix("replay:") {
        EstimatorBackend::FileReplay {
            dir: PathBuf::from(dir),
        }
    } else {
        bail!("unknown estimator {spec:?}; expected http, replay:<dir> or synthetic");
    };
    Ok(EstimatorConfig {
        backend,
        hyper_params: Default::default(),
        output_unit: unit,
    })
}

/// Loads `<scenes_dir>/<episode id>.json`, or the default empty world.
fn world_for_episode(
    scenes_dir: &Option<PathBuf>,
    episode_id: &str,
    pipeline: &PipelineConfig,
) -> Result<SyntheticWorld> {
    if let Some(dir) = scenes_dir {
        let path = dir.join(format!("{episode_id}.json"));
        if path.is_file() {
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading scene {}", path.display()))?;
            return serde_json::from_str(&text)
                .with_context(|| format!("parsing scene {}", path.display()));
        }
    }
    Ok(SyntheticWorld {
        scene: Default::default(),
        camera: Camera::with_grid(pipeline),
        kinematics: Default::default(),
        stop_distance: 1.5,
    })
}

fn build_estimator(
    config: &EstimatorConfig,
    world: &SyntheticWorld,
) -> Result<Box<dyn DepthEstimator>> {
    Ok(match &config.backend {
        EstimatorBackend::Http { endpoint } => Box::new(HttpDepthEstimator::new(
            endpoint.clone(),
            config.hyper_params.clone(),
            config.output_unit,
        )),
        EstimatorBackend::FileReplay { dir } => Box::new(
            ReplayDepthEstimator::new(dir.clone(), config.output_unit)
                .map_err(|e| anyhow!("{e}"))?,
        ),
        EstimatorBackend::Synthetic => Box::new(SyntheticDepthEstimator::new(
            world.scene.clone(),
            &world.camera,
        )),
    })
}

/// Agent specification, parsed once and instantiated per episode.
enum AgentSpec {
    Http(VlmConfig),
    Gt,
    Oracle { stop_distance: f64 },
    Random { seed: u64 },
    Fixed(depthnav_core::Action),
    Scripted(Vec<String>),
    Replay { dir: PathBuf },
}

impl AgentSpec {
    fn parse(
        spec: &str,
        seed: u64,
        stop_distance: f64,
        flags: &BackendFlags,
        file: &FileBackends,
    ) -> Result<Self> {
        if spec == "http" {
            return Ok(AgentSpec::Http(resolve_vlm_config(flags, file)?));
        }
        if spec == "gt" {
            return Ok(AgentSpec::Gt);
        }
        if spec == "oracle" {
            return Ok(AgentSpec::Oracle { stop_distance });
        }
        if spec == "random" {
            return Ok(AgentSpec::Random { seed });
        }
        if let Some(action) = spec.strip_prefix("fixed:") {
            return Ok(AgentSpec::Fixed(
                parse_action(action).map_err(|e| anyhow!("bad fixed action: {e}"))?,
            ));
        }
        if spec == "fixed" {
            return Ok(AgentSpec::Fixed(depthnav_core::Action::Stop));
        }
        if let Some(list) = spec.strip_prefix("scripted:") {
            let replies: Vec<String> = list.split(',').map(str::to_string).collect();
            if replies.is_empty() {
                bail!("scripted agent needs at least one reply");
            }
            return Ok(AgentSpec::Scripted(replies));
        }
        if let Some(dir) = spec.strip_prefix("replay:") {
            return Ok(AgentSpec::Replay {
                dir: PathBuf::from(dir),
            });
        }
        bail!(
            "unknown agent {spec:?}; expected http, gt, oracle, random, fixed:<ACTION>, scripted:<A,B,...> or replay:<dir>"
        );
    }

    fn instantiate(&self, episode: &Episode) -> Result<Box<dyn Agent>> {
        Ok(match self {
            AgentSpec::Http(config) => Box::new(HttpVlmAgent::new(config.clone())),
            AgentSpec::Gt => Box::new(ScriptedAgent::from_actions(
                &episode.steps.iter().map(|s| s.gt_action).collect::<Vec<_>>(),
            )),
            AgentSpec::Oracle { stop_distance } => Box::new(OracleAgent::new(*stop_distance)),
            AgentSpec::Random { seed } => Box::new(random_agent(
                depthnav_core::clients::derive_seed(*seed, &episode.id),
            )),
            AgentSpec::Fixed(action) => Box::new(fixed_agent(*action)),
            AgentSpec::Scripted(replies) => Box::new(ScriptedAgent::new(replies.clone())),
            AgentSpec::Replay { dir } => Box::new(
                ReplayVlmAgent::from_file(&dir.join(format!("{}.json", episode.id)))
                    .map_err(|e| anyhow!("{e}"))?,
            ),
        })
    }
}

fn cmd_depth(args: &DepthArgs) -> Result<()> {
    let file_config = load_file_config(&args.config)?;
    let (pipeline, render) = resolve_pipeline(&args.pipeline, &file_config.pipeline);
    pipeline.validate().map_err(|e| anyhow!("{e}"))?;
    render.validate().map_err(|e| anyhow!("{e}"))?;
    let unit = parse_unit(&args.unit)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let stem = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "field".to_string());

    let extension = args
        .input
        .extension()
        .map(|e| e.to_ascii_lowercase().to_string_lossy().to_string())
        .unwrap_or_default();
    let field: DepthField = if extension == "npz" || extension == "npy" {
        let bytes = std::fs::read(&args.input)
            .with_context(|| format!("reading {}", args.input.display()))?;
        let record = if bytes.starts_with(b"\x93NUMPY") {
            read_npy(&bytes).map_err(|e| anyhow!("{e}"))?
        } else {
            read_npz_entry(&bytes, "depth").map_err(|e| anyhow!("{e}"))?
        };
        if record.shape.len() != 2 {
            bail!("stored field must be rank 2, got shape {:?}", record.shape);
        }
        DepthField::new(
            record.shape[0],
            record.shape[1],
            record.to_f64_values(),
            unit,
        )
        .map_err(|e| anyhow!("{e}"))?
    } else {
        let image = image::open(&args.input)
            .with_context(|| format!("opening image {}", args.input.display()))?
            .to_rgb8();
        let frame = preprocess_rgb(&image, &pipeline).map_err(|e| anyhow!("{e}"))?;
        let estimator_config =
            parse_estimator_spec(&args.estimator, unit, &args.backends, &file_config.backends)?;
        let world = match &args.scene {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading scene {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing scene {}", path.display()))?
            }
            None => world_for_episode(&None, "", &pipeline)?,
        };
        let estimator = build_estimator(&estimator_config, &world)?;
        let pose = parse_pose(&args.pose)?;
        let key = args.frame_key.clone().unwrap_or_else(|| stem.clone());
        estimator
            .estimate(&frame, &key, &pose)
            .map_err(|e| anyhow!("{e}"))?
    };

    // Matrix from the raw field; clipped + normalized map alongside.
    let matrix = downsample(&field, pipeline.downsample_ratio).map_err(|e| anyhow!("{e}"))?;
    let (clipped, _) = percentile_clip(&field, render.lower_percentile, render.upper_percentile)
        .map_err(|e| anyhow!("{e}"))?;
    let normed = normalize(&clipped).map_err(|e| anyhow!("{e}"))?;
    let map = render_map(&normed, &render).map_err(|e| anyhow!("{e}"))?;

    let record = ArrayRecord::from_f64_grid("depth", field.height(), field.width(), field.values())
        .map_err(|e| anyhow!("{e}"))?;
    let npz_path = args.out.join(format!("{stem}.npz"));
    std::fs::write(&npz_path, write_npz(&[record]).map_err(|e| anyhow!("{e}"))?)?;
    let matrix_path = args.out.join(format!("{stem}_matrix.txt"));
    std::fs::write(&matrix_path, serialize_matrix(&matrix))?;
    let map_path = args.out.join(format!("{stem}_map.png"));
    map.to_image()
        .save_with_format(&map_path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", map_path.display()))?;

    println!(
        "wrote {} ({}x{}), {} ({}x{}), {}",
        npz_path.display(),
        field.height(),
        field.width(),
        matrix_path.display(),
        matrix.rows,
        matrix.cols,
        map_path.display()
    );
    Ok(())
}

fn parse_pose(text: &str) -> Result<depthnav_core::Pose> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        bail!("pose must be x,y,heading");
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow!("bad pose {text:?}: {e}"))?;
    Ok(depthnav_core::Pose::new(nums[0], nums[1], nums[2]))
}

/// Runs all episodes across a bounded worker pool. Returns the number of
/// episodes whose transcript records an infrastructure failure.
fn run_all(
    episodes: &[Episode],
    base_dir: &Path,
    out_dir: &Path,
    agent_spec: &AgentSpec,
    estimator_config: &EstimatorConfig,
    scenes_dir: &Option<PathBuf>,
    closed_loop: bool,
    params: &RunParams,
    workers: usize,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    if closed_loop && !matches!(estimator_config.backend, EstimatorBackend::Synthetic) {
        bail!("--closed-loop requires --estimator synthetic");
    }

    let next = AtomicUsize::new(0);
    let failures = AtomicUsize::new(0);
    let errors: Mutex<Vec<String>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                let Some(episode) = episodes.get(index) else {
                    break;
                };
                let result = (|| -> Result<TerminalReason> {
                    let world_spec = world_for_episode(scenes_dir, &episode.id, &params.pipeline)?;
                    let mut world = if closed_loop {
                        World::closed_loop(world_spec.clone(), episode.steps[0].pose)
                    } else {
                        World::replay(base_dir)
                    };
                    let estimator = build_estimator(estimator_config, &world_spec)?;
                    let mut agent = agent_spec.instantiate(episode)?;
                    let transcript =
                        run_episode(episode, &mut world, agent.as_mut(), estimator.as_ref(), params);
                    let reason = transcript.terminal_reason;
                    save_transcript(out_dir, &transcript)
                        .with_context(|| format!("writing transcript for {}", episode.id))?;
                    Ok(reason)
                })();
                match result {
                    Ok(TerminalReason::ParseFailure) => {
                        failures.fetch_add(1, Ordering::SeqCst);
                    }
                    Ok(_) => {}
                    Err(e) => {
                        errors
                            .lock()
                            .expect("error list lock")
                            .push(format!("episode {}: {e}", episode.id));
                    }
                }
            });
        }
    });

    let errors = errors.into_inner().expect("error list lock");
    if !errors.is_empty() {
        bail!("{}", errors.join("; "));
    }
    Ok(failures.load(Ordering::SeqCst))
}

fn cmd_run(args: &RunArgs) -> Result<usize> {
    let file_config = load_file_config(&args.config)?;
    let (pipeline, render) = resolve_pipeline(&args.pipeline, &file_config.pipeline);
    pipeline.validate().map_err(|e| anyhow!("{e}"))?;
    render.validate().map_err(|e| anyhow!("{e}"))?;

    let mode = parse_mode(
        args.mode
            .as_deref()
            .or(file_config.run.mode.as_deref())
            .unwrap_or("matrix"),
    )?;
    let tau = args.tau.or(file_config.run.tau).unwrap_or(4.0);
    if tau <= 0.0 {
        bail!("tau must be positive");
    }
    let temperature = args
        .temperature
        .or(file_config.run.temperature)
        .unwrap_or(DEFAULT_TEMPERATURE);
    let workers = args.workers.or(file_config.run.workers).unwrap_or(1);
    if workers < 1 {
        bail!("worker count must be at least 1");
    }
    let seed = args.seed.or(file_config.run.seed).unwrap_or(0);
    let stop_distance = args
        .stop_distance
        .or(file_config.run.stop_distance)
        .unwrap_or(1.5);
    let system_prompt = match args
        .system_prompt
        .clone()
        .or(file_config.run.system_prompt.clone())
    {
        Some(path) => std::fs::read_to_string(&path)
            .with_context(|| format!("reading system prompt {}", path.display()))?,
        None => DEFAULT_SYSTEM_PROMPT.to_string(),
    };

    let unit = parse_unit(&args.unit)?;
    let estimator_config =
        parse_estimator_spec(&args.estimator, unit, &args.backends, &file_config.backends)?;
    let agent_spec = AgentSpec::parse(
        &args.agent,
        seed,
        stop_distance,
        &args.backends,
        &file_config.backends,
    )?;

    let loaded = load_episodes(&args.episodes).map_err(|e| anyhow!("{e}"))?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }

    let params = RunParams {
        pipeline,
        render,
        mode,
        policy: DeviationPolicy { tau },
        temperature,
        system_prompt,
    };
    let failures = run_all(
        &loaded.episodes,
        &loaded.base_dir,
        &args.out,
        &agent_spec,
        &estimator_config,
        &args.scenes_dir,
        args.closed_loop,
        &params,
        workers,
    )?;
    println!(
        "ran {} episodes -> {} ({} infrastructure failures)",
        loaded.episodes.len(),
        args.out.display(),
        failures
    );
    Ok(failures)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<usize> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let scenes_dir = args.out.join("scenes");
    std::fs::create_dir_all(&scenes_dir)?;

    let scenarios = generate_corridor_suite(args.count, args.seed, args.stop_distance);
    let episodes: Vec<Episode> = scenarios.iter().map(|s| s.episode.clone()).collect();
    let episodes_path = args.out.join("episodes.jsonl");
    depthnav_core::episode::save_episodes(&episodes_path, &episodes)
        .map_err(|e| anyhow!("{e}"))?;
    for scenario in &scenarios {
        let path = scenes_dir.join(format!("{}.json", scenario.episode.id));
        let mut text = depthnav_core::canonical_json(&scenario.world);
        text.push('\n');
        std::fs::write(&path, text)?;
    }
    println!(
        "generated {} episodes -> {}",
        scenarios.len(),
        episodes_path.display()
    );

    let mut failures = 0;
    if args.run_oracle {
        let transcripts_dir = args.out.join("transcripts");
        let params = RunParams {
            pipeline: depthnav_core::sim::corridor_pipeline_config(),
            ..RunParams::default()
        };
        let agent_spec = AgentSpec::Oracle {
            stop_distance: args.stop_distance,
        };
        let estimator_config = EstimatorConfig {
            backend: EstimatorBackend::Synthetic,
            hyper_params: Default::default(),
            output_unit: DepthUnit::Meters,
        };
        failures = run_all(
            &episodes,
            &args.out,
            &transcripts_dir,
            &agent_spec,
            &estimator_config,
            &Some(scenes_dir),
            true,
            &params,
            1,
        )?;
        println!("oracle transcripts -> {}", transcripts_dir.display());
    }
    Ok(failures)
}

fn cmd_eval(args: &EvalArgs) -> Result<usize> {
    let loaded = load_episodes(&args.episodes).map_err(|e| anyhow!("{e}"))?;
    let transcripts = depthnav_core::controller::load_transcript_dir(&args.transcripts)
        .with_context(|| format!("reading transcripts from {}", args.transcripts.display()))?;
    if transcripts.is_empty() {
        bail!(
            "no transcripts found in {} (empty pool)",
            args.transcripts.display()
        );
    }
    let summary = aggregate(&loaded.episodes, &transcripts).map_err(|e| anyhow!("{e}"))?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut summary_json = depthnav_core::canonical_json(&summary);
    summary_json.push('\n');
    std::fs::write(args.out.join("summary.json"), summary_json)?;
    let text = report(&summary, ReportFormat::Text);
    std::fs::write(args.out.join("report.txt"), &text)?;
    std::fs::write(args.out.join("report.csv"), report(&summary, ReportFormat::Csv))?;
    if args.svg {
        std::fs::write(args.out.join("report.svg"), report(&summary, ReportFormat::Svg))?;
    }
    print!("{text}");

    let failures = transcripts
        .iter()
        .filter(|t| t.terminal_reason == TerminalReason::ParseFailure)
        .count();
    Ok(failures)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.summary)
        .with_context(|| format!("reading {}", args.summary.display()))?;
    let summary: MetricsSummary = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.summary.display()))?;
    let format = match args.format.as_str() {
        "text" => ReportFormat::Text,
        "csv" => ReportFormat::Csv,
        "svg" => ReportFormat::Svg,
        other => bail!("unknown format {other:?}; expected text, csv or svg"),
    };
    let rendered = report(&summary, format);
    match &args.out {
        Some(path) => std::fs::write(path, rendered)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<usize> = match &cli.command {
        Commands::Depth(args) => cmd_depth(args).map(|_| 0),
        Commands::Run(args) => cmd_run(args),
        Commands::Simulate(args) => cmd_simulate(args),
        Commands::Eval(args) => cmd_eval(args),
        Commands::Report(args) => cmd_report(args).map(|_| 0),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
