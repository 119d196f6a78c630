//! The per-episode navigation loop: builds the step prompts, queries the
//! agent, applies the three termination conditions, and emits a transcript.
//!
//! Termination conditions, checked in priority order at every step:
//! 1. the agent predicted STOP;
//! 2. the last `K = ceil(tau / dt)` predictions all mismatched the
//!    ground-truth actions (any match resets the streak);
//! 3. the step budget is exhausted.

use crate::clients::{parse_action, Action, Agent, DepthEstimator, ModelError, StepContext, VlmRequest, VlmResponse};
use crate::depth::{
    downsample, normalize, percentile_clip, preprocess_rgb, render_map, serialize_matrix,
    DepthMap, DepthMatrix, PipelineConfig, RenderConfig,
};
use crate::episode::{resolve_frame, Episode};
use crate::geometry::Pose;
use crate::sim::{advance, placeholder_frame, SyntheticDepthEstimator, SyntheticWorld};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// The default system prompt shipped with the harness; override it with
/// [`RunParams::system_prompt`] to experiment.
pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../assets/system_prompt.txt");

/// Sentence appended to the user prompt when re-asking after an
/// uninterpretable reply.
const CORRECTIVE_SENTENCE: &str = "Your previous reply could not be interpreted. Answer with exactly one of: FORWARD, LEFT ROTATE, RIGHT ROTATE, STOP.";

/// Maximum attempts per step before the episode fails.
const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("representation mode {mode:?} requires the {missing} artifact")]
    MissingArtifactForMode {
        mode: RepresentationMode,
        missing: &'static str,
    },
}

/// Which depth representations accompany the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    MatrixOnly,
    MapOnly,
    Hybrid,
}

impl RepresentationMode {
    pub fn wants_matrix(&self) -> bool {
        matches!(self, RepresentationMode::MatrixOnly | RepresentationMode::Hybrid)
    }

    pub fn wants_map(&self) -> bool {
        matches!(self, RepresentationMode::MapOnly | RepresentationMode::Hybrid)
    }
}

/// Deviation termination parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationPolicy {
    /// Continuous-mismatch duration that ends an episode, seconds.
    pub tau: f64,
}

impl Default for DeviationPolicy {
    fn default() -> Self {
        Self { tau: 4.0 }
    }
}

impl DeviationPolicy {
    /// Mismatch streak length that triggers the deviation terminal:
    /// `ceil(tau / dt)`. A small epsilon guards against binary float noise
    /// pushing an exact quotient just above an integer.
    pub fn window_len(&self, dt: f64) -> usize {
        ((self.tau / dt - 1e-9).ceil().max(1.0)) as usize
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    PredictedStop,
    Deviated,
    MaxSteps,
    ParseFailure,
}

/// Per-step record in a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// The action the agent chose; `None` when the step failed outright.
    pub predicted: Option<Action>,
    pub gt: Action,
    pub thought: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub matched: bool,
    /// SHA-256 over the system prompt and the final user prompt sent.
    pub prompt_sha256: String,
}

/// Full account of one episode run; sufficient to recompute every metric
/// offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub episode_id: String,
    pub agent: String,
    pub mode: RepresentationMode,
    pub records: Vec<StepRecord>,
    pub terminal_reason: TerminalReason,
    /// The stopping time step; always `records.len() - 1`.
    pub stop_index: usize,
    pub stop_pose: Pose,
    /// Filled in by the metrics stage.
    pub nav_error: Option<f64>,
    /// Backend error that forced a parse-failure terminal, if any.
    pub error: Option<String>,
}

/// Rolling termination state: the current mismatch streak and the latest
/// prediction.
#[derive(Debug, Clone, Default)]
pub struct LoopState {
    steps: usize,
    streak: usize,
    last_action: Option<Action>,
}

impl LoopState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, predicted: Action, matched: bool) {
        self.steps += 1;
        self.last_action = Some(predicted);
        if matched {
            self.streak = 0;
        } else {
            self.streak += 1;
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Applies the three termination conditions in priority order.
pub fn check_termination(
    state: &LoopState,
    policy: &DeviationPolicy,
    dt: f64,
    max_steps: usize,
) -> Option<TerminalReason> {
    if state.last_action == Some(Action::Stop) {
        return Some(TerminalReason::PredictedStop);
    }
    if state.streak >= policy.window_len(dt) {
        return Some(TerminalReason::Deviated);
    }
    if state.steps >= max_steps {
        return Some(TerminalReason::MaxSteps);
    }
    None
}

/// Composes the step prompts. The user prompt is the instruction, a blank
/// line, then the serialized matrix when the mode carries one; the image
/// list is the RGB frame followed by the depth map when the mode carries
/// one.
pub fn build_prompts(
    episode: &Episode,
    frame: &RgbImage,
    matrix: Option<&DepthMatrix>,
    map: Option<&DepthMap>,
    mode: RepresentationMode,
    system_prompt: &str,
) -> Result<(String, String, Vec<RgbImage>), ControllerError> {
    let mut user_prompt = episode.instruction.clone();
    if mode.wants_matrix() {
        let matrix = matrix.ok_or(ControllerError::MissingArtifactForMode {
            mode,
            missing: "depth matrix",
        })?;
        user_prompt.push_str("\n\n");
        user_prompt.push_str(&serialize_matrix(matrix));
    }
    let mut images = vec![frame.clone()];
    if mode.wants_map() {
        let map = map.ok_or(ControllerError::MissingArtifactForMode {
            mode,
            missing: "depth map",
        })?;
        images.push(map.to_image());
    }
    Ok((system_prompt.to_string(), user_prompt, images))
}

/// Frame/pose/ground-truth source for a run. Replay walks the recorded
/// steps; closed-loop integrates the robot pose from the agent's actions
/// inside a synthetic world.
pub enum World {
    Replay { base_dir: PathBuf },
    ClosedLoop { world: SyntheticWorld, pose: Pose },
}

impl World {
    pub fn replay(base_dir: &Path) -> Self {
        World::Replay {
            base_dir: base_dir.to_path_buf(),
        }
    }

    pub fn closed_loop(world: SyntheticWorld, start: Pose) -> Self {
        World::ClosedLoop { world, pose: start }
    }

    fn effective_max_steps(&self, episode: &Episode) -> usize {
        match self {
            // Replay cannot outlive the recorded material.
            World::Replay { .. } => episode.max_steps.min(episode.steps.len()),
            World::ClosedLoop { .. } => episode.max_steps,
        }
    }

    fn pose(&self, episode: &Episode, t: usize) -> Pose {
        match self {
            World::Replay { .. } => episode.steps[t].pose,
            World::ClosedLoop { pose, .. } => *pose,
        }
    }

    /// Ground truth for step `t`. Past the recorded plan (possible only
    /// closed-loop) the correct action is Stop: the plan has ended.
    fn gt_action(&self, episode: &Episode, t: usize) -> Action {
        episode
            .steps
            .get(t)
            .map(|s| s.gt_action)
            .unwrap_or(Action::Stop)
    }

    fn frame(&self, episode: &Episode, t: usize, pipeline: &PipelineConfig) -> Result<RgbImage, String> {
        match self {
            World::Replay { base_dir } => match &episode.steps[t].frame {
                Some(rel) => {
                    let path = resolve_frame(base_dir, rel);
                    image::open(&path)
                        .map(|img| img.to_rgb8())
                        .map_err(|e| format!("failed to load frame {}: {e}", path.display()))
                }
                None => Ok(placeholder_frame(pipeline)),
            },
            World::ClosedLoop { .. } => Ok(placeholder_frame(pipeline)),
        }
    }

    fn apply(&mut self, action: Action, dt: f64) {
        if let World::ClosedLoop { world, pose } = self {
            *pose = advance(pose, action, dt, &world.kinematics);
        }
    }

    /// Builds the matching depth backend for a closed-loop world.
    pub fn synthetic_estimator(&self) -> Option<SyntheticDepthEstimator> {
        match self {
            World::ClosedLoop { world, .. } => Some(SyntheticDepthEstimator::new(
                world.scene.clone(),
                &world.camera,
            )),
            World::Replay { .. } => None,
        }
    }
}

/// Tunables for a run, shared across episodes.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub pipeline: PipelineConfig,
    pub render: RenderConfig,
    pub mode: RepresentationMode,
    pub policy: DeviationPolicy,
    pub temperature: f64,
    pub system_prompt: String,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            render: RenderConfig::default(),
            mode: RepresentationMode::MatrixOnly,
            policy: DeviationPolicy::default(),
            temperature: crate::clients::DEFAULT_TEMPERATURE,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
        }
    }
}

/// Replay-file key for a step: `<episode id>_<zero-padded step>`.
pub fn frame_key(episode_id: &str, t: usize) -> String {
    format!("{episode_id}_{t:04}")
}

fn prompt_hash(system_prompt: &str, user_prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(system_prompt.as_bytes());
    hasher.update([0u8]);
    hasher.update(user_prompt.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct StepOutcome {
    response: VlmResponse,
    action: Action,
    thought: String,
    hash: String,
}

/// Runs one episode to termination. Backend failures are retried up to
/// three attempts per step; a step that exhausts its attempts ends the
/// episode with a parse-failure terminal and the error recorded, rather
/// than aborting the run.
pub fn run_episode(
    episode: &Episode,
    world: &mut World,
    agent: &mut dyn Agent,
    estimator: &dyn DepthEstimator,
    params: &RunParams,
) -> Transcript {
    let max_steps = world.effective_max_steps(episode);
    let mut state = LoopState::new();
    let mut records: Vec<StepRecord> = Vec::new();

    for t in 0..max_steps {
        let pose = world.pose(episode, t);
        let gt = world.gt_action(episode, t);
        let key = frame_key(&episode.id, t);

        let mut depth_cache = None;
        let mut last_error: Option<ModelError> = None;
        let mut last_response: Option<VlmResponse> = None;
        let mut last_hash = String::new();
        let mut outcome: Option<StepOutcome> = None;

        for attempt in 0..MAX_ATTEMPTS {
            match run_step_attempt(
                episode,
                world,
                agent,
                estimator,
                params,
                t,
                &pose,
                &key,
                &mut depth_cache,
                attempt > 0 && last_error.as_ref().is_some_and(|e| e.wants_corrective()),
            ) {
                Ok(step) => {
                    outcome = Some(step);
                    break;
                }
                Err(StepFailure {
                    error,
                    response,
                    hash,
                }) => {
                    if let Some(resp) = response {
                        last_response = Some(resp);
                    }
                    if !hash.is_empty() {
                        last_hash = hash;
                    }
                    last_error = Some(error);
                }
            }
        }

        match outcome {
            Some(step) => {
                let matched = step.action == gt;
                records.push(StepRecord {
                    t,
                    predicted: Some(step.action),
                    gt,
                    thought: step.thought,
                    prompt_tokens: step.response.prompt_tokens,
                    completion_tokens: step.response.completion_tokens,
                    matched,
                    prompt_sha256: step.hash,
                });
                state.push(step.action, matched);
                if let Some(reason) = check_termination(&state, &params.policy, episode.dt, max_steps) {
                    return finish(episode, world, agent, params, records, reason, t, pose, None);
                }
                world.apply(step.action, episode.dt);
            }
            None => {
                let error = last_error.expect("a failed step records its error");
                let (prompt_tokens, completion_tokens) = last_response
                    .as_ref()
                    .map(|r| (r.prompt_tokens, r.completion_tokens))
                    .unwrap_or((0, 0));
                records.push(StepRecord {
                    t,
                    predicted: None,
                    gt,
                    thought: last_response.map(|r| r.thought).unwrap_or_default(),
                    prompt_tokens,
                    completion_tokens,
                    matched: false,
                    prompt_sha256: last_hash,
                });
                return finish(
                    episode,
                    world,
                    agent,
                    params,
                    records,
                    TerminalReason::ParseFailure,
                    t,
                    pose,
                    Some(error.to_string()),
                );
            }
        }
    }

    // The loop always terminates from inside: the max-steps condition fires
    // at t == max_steps - 1 at the latest. Guard anyway for max_steps == 0.
    let stop_index = records.len().saturating_sub(1);
    let stop_pose = world.pose(episode, stop_index.min(episode.steps.len() - 1));
    finish(
        episode,
        world,
        agent,
        params,
        records,
        TerminalReason::MaxSteps,
        stop_index,
        stop_pose,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    episode: &Episode,
    _world: &mut World,
    agent: &mut dyn Agent,
    params: &RunParams,
    records: Vec<StepRecord>,
    terminal_reason: TerminalReason,
    stop_index: usize,
    stop_pose: Pose,
    error: Option<String>,
) -> Transcript {
    Transcript {
        episode_id: episode.id.clone(),
        agent: agent.name().to_string(),
        mode: params.mode,
        records,
        terminal_reason,
        stop_index,
        stop_pose,
        nav_error: None,
        error,
    }
}

struct StepFailure {
    error: ModelError,
    response: Option<VlmResponse>,
    hash: String,
}

#[allow(clippy::too_many_arguments)]
fn run_step_attempt(
    episode: &Episode,
    world: &World,
    agent: &mut dyn Agent,
    estimator: &dyn DepthEstimator,
    params: &RunParams,
    t: usize,
    pose: &Pose,
    key: &str,
    depth_cache: &mut Option<crate::depth::DepthField>,
    corrective: bool,
) -> Result<StepOutcome, StepFailure> {
    let fail = |error: ModelError| StepFailure {
        error,
        response: None,
        hash: String::new(),
    };

    let raw_frame = world
        .frame(episode, t, &params.pipeline)
        .map_err(|e| fail(ModelError::Internal(e)))?;
    let frame = preprocess_rgb(&raw_frame, &params.pipeline)
        .map_err(|e| fail(ModelError::Internal(e.to_string())))?;

    if depth_cache.is_none() {
        *depth_cache = Some(
            estimator
                .estimate(&frame, key, pose)
                .map_err(|e| fail(e))?,
        );
    }
    let field = depth_cache.as_ref().expect("cached above");

    let matrix = if params.mode.wants_matrix() {
        Some(
            downsample(field, params.pipeline.downsample_ratio)
                .map_err(|e| fail(ModelError::Internal(e.to_string())))?,
        )
    } else {
        None
    };
    let map = if params.mode.wants_map() {
        let build = || -> Result<DepthMap, crate::depth::PipelineError> {
            let (clipped, _) = percentile_clip(
                field,
                params.render.lower_percentile,
                params.render.upper_percentile,
            )?;
            let norm = normalize(&clipped)?;
            render_map(&norm, &params.render)
        };
        Some(build().map_err(|e| fail(ModelError::Internal(e.to_string())))?)
    } else {
        None
    };

    let (system_prompt, mut user_prompt, images) = build_prompts(
        episode,
        &frame,
        matrix.as_ref(),
        map.as_ref(),
        params.mode,
        &params.system_prompt,
    )
    .map_err(|e| fail(ModelError::Internal(e.to_string())))?;
    if corrective {
        user_prompt.push_str("\n\n");
        user_prompt.push_str(CORRECTIVE_SENTENCE);
    }
    let hash = prompt_hash(&system_prompt, &user_prompt);

    let request = VlmRequest {
        system_prompt,
        user_prompt,
        images,
        temperature: params.temperature,
    };
    let ctx = StepContext {
        step: t,
        pose: *pose,
        target: episode.target,
        matrix: matrix.as_ref(),
    };
    let response = agent.decide(&request, &ctx).map_err(|error| StepFailure {
        error,
        response: None,
        hash: hash.clone(),
    })?;
    let action = parse_action(&response.action_text).map_err(|error| StepFailure {
        error,
        response: Some(response.clone()),
        hash: hash.clone(),
    })?;
    let thought = response.thought.clone();
    Ok(StepOutcome {
        response,
        action,
        thought,
        hash,
    })
}

/// Canonical transcript JSON (sorted keys, trailing newline).
pub fn transcript_to_json(transcript: &Transcript) -> String {
    let mut text = crate::canonical_json(transcript);
    text.push('\n');
    text
}

/// Writes `<dir>/<episode id>.json`.
pub fn save_transcript(dir: &Path, transcript: &Transcript) -> std::io::Result<PathBuf> {
    let path = dir.join(format!("{}.json", transcript.episode_id));
    std::fs::write(&path, transcript_to_json(transcript))?;
    Ok(path)
}

/// Reads every `*.json` transcript in a directory, sorted by file name.
pub fn load_transcript_dir(dir: &Path) -> std::io::Result<Vec<Transcript>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut transcripts = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path)?;
        let transcript: Transcript = serde_json::from_str(&text).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: {e}", path.display()),
            )
        })?;
        transcripts.push(transcript);
    }
    Ok(transcripts)
}
