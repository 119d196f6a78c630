//! Backends for the two external models: the monocular depth estimator and
//! the decision-making VLM.
//!
//! Each side has a live HTTP implementation, a file-replay implementation,
//! and a deterministic in-memory mock, all interchangeable behind one
//! interface so the whole control loop can be exercised without network
//! access. The synthetic depth backend lives in the simulator module and
//! implements the same [`DepthEstimator`] trait.

use crate::depth::{DepthField, DepthMatrix, DepthUnit};
use crate::geometry::{Point2, Pose};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable naming the VLM endpoint.
pub const ENV_VLM_ENDPOINT: &str = "MDE_VLM_ENDPOINT";
/// Environment variable carrying the VLM bearer key.
pub const ENV_VLM_API_KEY: &str = "MDE_VLM_API_KEY";
/// Environment variable naming the depth service endpoint.
pub const ENV_DEPTH_ENDPOINT: &str = "MDE_DEPTH_ENDPOINT";

/// Default sampling temperature for the VLM.
pub const DEFAULT_TEMPERATURE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("replay file not found: {0}")]
    MissingReplayFile(PathBuf),
    #[error("depth shape mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unrecognized action text: {0:?}")]
    UnrecognizedAction(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ModelError {
    /// Whether the retry should append a corrective sentence to the user
    /// prompt (the model answered but not in the expected vocabulary).
    pub fn wants_corrective(&self) -> bool {
        matches!(
            self,
            ModelError::MalformedResponse(_) | ModelError::UnrecognizedAction(_)
        )
    }
}

/// The closed action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    LeftRotate,
    RightRotate,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::Forward,
        Action::LeftRotate,
        Action::RightRotate,
        Action::Stop,
    ];

    /// The name the VLM is asked to answer with.
    pub fn canonical_name(&self) -> &'static str {
        match self {
            Action::Forward => "FORWARD",
            Action::LeftRotate => "LEFT ROTATE",
            Action::RightRotate => "RIGHT ROTATE",
            Action::Stop => "STOP",
        }
    }
}

/// One request to the decision-maker: prompts plus ordered image
/// attachments (the RGB frame first, then the depth map when present).
#[derive(Debug, Clone)]
pub struct VlmRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub images: Vec<RgbImage>,
    pub temperature: f64,
}

impl VlmRequest {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.images.is_empty() {
            return Err(ModelError::Internal(
                "a request must carry at least the RGB frame image".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(ModelError::Internal(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One decision-maker reply with its token accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub thought: String,
    pub action_text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Extra per-step facts available to non-VLM agents (the scripted oracle
/// needs the depth matrix and the goal geometry; HTTP agents ignore this).
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub step: usize,
    pub pose: Pose,
    pub target: Point2,
    pub matrix: Option<&'a DepthMatrix>,
}

/// A decision-making agent. One instance serves one episode; construction
/// is cheap so parallel episode workers each build their own.
pub trait Agent {
    fn decide(&mut self, request: &VlmRequest, ctx: &StepContext<'_>)
        -> Result<VlmResponse, ModelError>;

    /// Short backend label recorded in transcripts.
    fn name(&self) -> &'static str;
}

/// A depth estimation backend. Implementations must return a field whose
/// dimensions equal the input image's.
pub trait DepthEstimator {
    fn estimate(
        &self,
        image: &RgbImage,
        frame_key: &str,
        pose: &Pose,
    ) -> Result<DepthField, ModelError>;

    fn output_unit(&self) -> DepthUnit;
}

/// Which depth backend to construct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorBackend {
    Http { endpoint: String },
    FileReplay { dir: PathBuf },
    Synthetic,
}

/// Declarative estimator configuration. `hyper_params` are forwarded to an
/// HTTP service as query parameters; `output_unit` declares (not detects)
/// whether the backend produces metric or relative depth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub backend: EstimatorBackend,
    #[serde(default)]
    pub hyper_params: BTreeMap<String, String>,
    pub output_unit: DepthUnit,
}

fn strip_code_fences(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        if let Some(end) = rest.rfind("```") {
            let inner = &rest[..end];
            // Drop an optional language tag on the opening fence line.
            return match inner.split_once('\n') {
                Some((first, body)) if !first.trim().is_empty() && !first.contains(' ') => {
                    body.trim()
                }
                _ => inner.trim(),
            };
        }
    }
    t
}

fn normalize_action_text(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_uppercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses free-form action text into the closed action vocabulary.
/// Case-insensitive, tolerant of punctuation, code fences, underscores, and
/// a JSON object body carrying an `"action"` field.
pub fn parse_action(text: &str) -> Result<Action, ModelError> {
    let stripped = strip_code_fences(text);
    let candidate = if stripped.starts_with('{') {
        match serde_json::from_str::<serde_json::Value>(stripped) {
            Ok(value) => value
                .get("action")
                .and_then(|a| a.as_str())
                .map(str::to_string)
                .ok_or_else(|| ModelError::UnrecognizedAction(text.to_string()))?,
            Err(_) => stripped.to_string(),
        }
    } else {
        stripped.to_string()
    };
    match normalize_action_text(&candidate).as_str() {
        "FORWARD" => Ok(Action::Forward),
        "LEFT ROTATE" => Ok(Action::LeftRotate),
        "RIGHT ROTATE" => Ok(Action::RightRotate),
        "STOP" => Ok(Action::Stop),
        _ => Err(ModelError::UnrecognizedAction(text.to_string())),
    }
}

/// Splits a raw completion into (thought, action text). JSON bodies with
/// `thought`/`action` fields are unpacked; anything else is an action text
/// with an empty thought.
pub fn split_reply(raw: &str) -> (String, String) {
    let stripped = strip_code_fences(raw);
    if stripped.starts_with('{') {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(stripped) {
            let thought = value
                .get("thought")
                .or_else(|| value.get("reasoning"))
                .and_then(|t| t.as_str())
                .unwrap_or_default()
                .to_string();
            if let Some(action) = value.get("action").and_then(|a| a.as_str()) {
                return (thought, action.to_string());
            }
            return (thought, stripped.to_string());
        }
    }
    (String::new(), stripped.to_string())
}

/// Deterministic token synthesis used by the in-process mocks: byte length
/// divided by four, rounded down.
pub fn mock_token_count(text_bytes: usize) -> u64 {
    (text_bytes / 4) as u64
}

fn mock_prompt_tokens(request: &VlmRequest) -> u64 {
    mock_token_count(request.system_prompt.len() + request.user_prompt.len())
}

/// Mock agent replaying a fixed sequence of raw completions.
pub struct ScriptedAgent {
    replies: Vec<String>,
    cursor: usize,
}

impl ScriptedAgent {
    pub fn new(replies: Vec<String>) -> Self {
        Self { replies, cursor: 0 }
    }

    /// Convenience constructor from action names.
    pub fn from_actions(actions: &[Action]) -> Self {
        Self::new(actions.iter().map(|a| a.canonical_name().to_string()).collect())
    }
}

impl Agent for ScriptedAgent {
    fn decide(
        &mut self,
        request: &VlmRequest,
        _ctx: &StepContext<'_>,
    ) -> Result<VlmResponse, ModelError> {
        request.validate()?;
        let raw = self
            .replies
            .get(self.cursor)
            .ok_or_else(|| {
                ModelError::MalformedResponse(format!(
                    "scripted reply sequence exhausted after {} replies",
                    self.replies.len()
                ))
            })?
            .clone();
        self.cursor += 1;
        if raw.is_empty() {
            return Err(ModelError::MalformedResponse("empty completion body".into()));
        }
        let (thought, action_text) = split_reply(&raw);
        Ok(VlmResponse {
            thought,
            action_text,
            prompt_tokens: mock_prompt_tokens(request),
            completion_tokens: mock_token_count(raw.len()),
        })
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

/// Derives a stable per-label seed from a base seed, so parallel episode
/// workers draw identical sequences regardless of scheduling. Uses SHA-256
/// (not the std hasher, whose output is not stable across releases).
pub fn derive_seed(base: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes")) ^ base
}

/// Baseline agent drawing uniformly over the four actions from a seeded
/// generator.
pub struct RandomAgent {
    rng: ChaCha8Rng,
}

pub fn random_agent(seed: u64) -> RandomAgent {
    RandomAgent {
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl Agent for RandomAgent {
    fn decide(
        &mut self,
        _request: &VlmRequest,
        _ctx: &StepContext<'_>,
    ) -> Result<VlmResponse, ModelError> {
        let action = Action::ALL[self.rng.gen_range(0..Action::ALL.len())];
        Ok(VlmResponse {
            thought: String::new(),
            action_text: action.canonical_name().to_string(),
            prompt_tokens: 0,
            completion_tokens: 0,
        })
    }

    fn name(&self) -> &'static str {
        "random"
    }
}

/// Baseline agent always answering one configured action.
pub struct FixedAgent {
    action: Action,
}

pub fn fixed_agent(action: Action) -> FixedAgent {
    FixedAgent { action }
}

impl Agent for FixedAgent {
    fn decide(
        &mut self,
        _request: &VlmRequest,
        _ctx: &StepContext<'_>,
    ) -> Result<VlmResponse, ModelError> {
        Ok(VlmResponse {
            thought: String::new(),
            action_text: self.action.canonical_name().to_string(),
            prompt_tokens: 0,
            completion_tokens: 0,
        })
    }

    fn name(&self) -> &'static str {
        "fixed"
    }
}

/// One recorded reply in a VLM replay file: either a bare completion string
/// or an object with explicit fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordedReply {
    Raw(String),
    Full {
        #[serde(default)]
        thought: String,
        action: String,
        #[serde(default)]
        prompt_tokens: u64,
        #[serde(default)]
        completion_tokens: u64,
    },
}

/// Agent replaying recorded VLM responses from a JSON file (an array of
/// [`RecordedReply`] values, consumed in order).
pub struct ReplayVlmAgent {
    replies: Vec<RecordedReply>,
    cursor: usize,
}

impl ReplayVlmAgent {
    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)
            .map_err(|_| ModelError::MissingReplayFile(path.to_path_buf()))?;
        let replies: Vec<RecordedReply> = serde_json::from_slice(&bytes)
            .map_err(|e| ModelError::MalformedResponse(format!("replay file {path:?}: {e}")))?;
        Ok(Self { replies, cursor: 0 })
    }
}

impl Agent for ReplayVlmAgent {
    fn decide(
        &mut self,
        request: &VlmRequest,
        _ctx: &StepContext<'_>,
    ) -> Result<VlmResponse, ModelError> {
        let reply = self
            .replies
            .get(self.cursor)
            .ok_or_else(|| {
                ModelError::MalformedResponse(format!(
                    "replay sequence exhausted after {} replies",
                    self.replies.len()
                ))
            })?
            .clone();
        self.cursor += 1;
        Ok(match reply {
            RecordedReply::Raw(raw) => {
                let (thought, action_text) = split_reply(&raw);
                VlmResponse {
                    thought,
                    action_text,
                    prompt_tokens: mock_prompt_tokens(request),
                    completion_tokens: mock_token_count(raw.len()),
                }
            }
            RecordedReply::Full {
                thought,
                action,
                prompt_tokens,
                completion_tokens,
            } => VlmResponse {
                thought,
                action_text: action,
                prompt_tokens,
                completion_tokens,
            },
        })
    }

    fn name(&self) -> &'static str {
        "replay"
    }
}

/// Connection settings for the live chat-completions backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub endpoint: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_model_name")]
    pub model: String,
}

fn default_model_name() -> String {
    "default".to_string()
}

impl VlmConfig {
    /// Builds a config from `MDE_VLM_ENDPOINT` / `MDE_VLM_API_KEY`.
    pub fn from_env() -> Result<Self, ModelError> {
        let endpoint = std::env::var(ENV_VLM_ENDPOINT).map_err(|_| {
            ModelError::BackendUnreachable(format!("{ENV_VLM_ENDPOINT} is not set"))
        })?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(ENV_VLM_API_KEY).ok(),
            model: default_model_name(),
        })
    }
}

/// Encodes an image as PNG bytes (8-bit RGB, no alpha).
pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, ModelError> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| ModelError::Internal(format!("PNG encoding failed: {e}")))?;
    Ok(bytes.into_inner())
}

/// Live chat-completions client. Sends the system prompt, then a user
/// message with one text part followed by base64 PNG image parts, and reads
/// the first choice plus usage counters from the reply.
pub struct HttpVlmAgent {
    config: VlmConfig,
    client: reqwest::blocking::Client,
}

impl HttpVlmAgent {
    pub fn new(config: VlmConfig) -> Self {
        Self {
            config,
            client: reqwest::blocking::Client::new(),
        }
    }

    fn build_body(&self, request: &VlmRequest) -> Result<serde_json::Value, ModelError> {
        let mut content = vec![json!({"type": "text", "text": request.user_prompt})];
        for image in &request.images {
            let encoded = base64_encode(&encode_png(image)?);
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{encoded}")}
            }));
        }
        Ok(json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": content}
            ],
            "temperature": request.temperature,
        }))
    }
}

fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

impl Agent for HttpVlmAgent {
    fn decide(
        &mut self,
        request: &VlmRequest,
        _ctx: &StepContext<'_>,
    ) -> Result<VlmResponse, ModelError> {
        request.validate()?;
        let url = format!(
            "{}/chat/completions",
            self.config.endpoint.trim_end_matches('/')
        );
        let mut builder = self.client.post(url).json(&self.build_body(request)?);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| ModelError::BackendUnreachable(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| ModelError::BackendUnreachable(e.to_string()))?;
        if !status.is_success() {
            return Err(ModelError::BackendUnreachable(format!(
                "status {status}: {}",
                excerpt(&text)
            )));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ModelError::MalformedResponse(format!("bad JSON: {e}")))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| ModelError::MalformedResponse("missing message content".into()))?;
        if content.trim().is_empty() {
            return Err(ModelError::MalformedResponse("empty completion body".into()));
        }
        let prompt_tokens = value
            .pointer("/usage/prompt_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let completion_tokens = value
            .pointer("/usage/completion_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let (thought, action_text) = split_reply(content);
        Ok(VlmResponse {
            thought,
            action_text,
            prompt_tokens,
            completion_tokens,
        })
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

fn excerpt(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.len() <= LIMIT {
        text.to_string()
    } else {
        let mut cut = LIMIT;
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        format!("{}...", &text[..cut])
    }
}

/// Live depth-service client: POSTs the frame as PNG and reads back an NPZ
/// body with a `depth` entry.
pub struct HttpDepthEstimator {
    endpoint: String,
    hyper_params: BTreeMap<String, String>,
    unit: DepthUnit,
    client: reqwest::blocking::Client,
}

impl HttpDepthEstimator {
    pub fn new(endpoint: String, hyper_params: BTreeMap<String, String>, unit: DepthUnit) -> Self {
        Self {
            endpoint,
            hyper_params,
            unit,
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl DepthEstimator for HttpDepthEstimator {
    fn estimate(
        &self,
        image: &RgbImage,
        _frame_key: &str,
        _pose: &Pose,
    ) -> Result<DepthField, ModelError> {
        let url = format!("{}/depth", self.endpoint.trim_end_matches('/'));
        let query: Vec<(&str, &str)> = self
            .hyper_params
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        let response = self
            .client
            .post(url)
            .query(&query)
            .header(reqwest::header::CONTENT_TYPE, "image/png")
            .body(encode_png(image)?)
            .send()
            .map_err(|e| ModelError::BackendUnreachable(e.to_string()))?;
        let status = response.status();
        let bytes = response
            .bytes()
            .map_err(|e| ModelError::BackendUnreachable(e.to_string()))?;
        if !status.is_success() {
            return Err(ModelError::BackendUnreachable(format!(
                "status {status}: {}",
                excerpt(&String::from_utf8_lossy(&bytes))
            )));
        }
        record_to_field(&bytes, image, self.unit)
    }

    fn output_unit(&self) -> DepthUnit {
        self.unit
    }
}

fn record_to_field(
    npz_bytes: &[u8],
    image: &RgbImage,
    unit: DepthUnit,
) -> Result<DepthField, ModelError> {
    let record = crate::npy::read_npz_entry(npz_bytes, "depth")
        .map_err(|e| ModelError::MalformedResponse(e.to_string()))?;
    if record.shape.len() != 2 {
        return Err(ModelError::MalformedResponse(format!(
            "depth entry must be rank 2, got shape {:?}",
            record.shape
        )));
    }
    let (got_h, got_w) = (record.shape[0], record.shape[1]);
    let (expected_w, expected_h) = image.dimensions();
    if got_h != expected_h as usize || got_w != expected_w as usize {
        return Err(ModelError::ShapeMismatch {
            expected_h: expected_h as usize,
            expected_w: expected_w as usize,
            got_h,
            got_w,
        });
    }
    DepthField::new(got_h, got_w, record.to_f64_values(), unit)
        .map_err(|e| ModelError::MalformedResponse(e.to_string()))
}

/// File-replay depth backend: resolves a frame key to `<dir>/<key>.npz` and
/// reads its `depth` entry. Never writes to its directory.
pub struct ReplayDepthEstimator {
    dir: PathBuf,
    unit: DepthUnit,
}

impl ReplayDepthEstimator {
    pub fn new(dir: PathBuf, unit: DepthUnit) -> Result<Self, ModelError> {
        if !dir.is_dir() {
            return Err(ModelError::MissingReplayFile(dir));
        }
        Ok(Self { dir, unit })
    }
}

impl DepthEstimator for ReplayDepthEstimator {
    fn estimate(
        &self,
        image: &RgbImage,
        frame_key: &str,
        _pose: &Pose,
    ) -> Result<DepthField, ModelError> {
        let path = self.dir.join(format!("{frame_key}.npz"));
        let bytes =
            std::fs::read(&path).map_err(|_| ModelError::MissingReplayFile(path.clone()))?;
        record_to_field(&bytes, image, self.unit)
    }

    fn output_unit(&self) -> DepthUnit {
        self.unit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> VlmRequest {
        VlmRequest {
            system_prompt: "sys".into(),
            user_prompt: "user".into(),
            images: vec![RgbImage::new(2, 2)],
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    fn ctx() -> StepContext<'static> {
        StepContext {
            step: 0,
            pose: Pose::new(0.0, 0.0, 0.0),
            target: Point2::new(1.0, 0.0),
            matrix: None,
        }
    }

    #[test]
    fn parse_action_case_folding() {
        assert_eq!(parse_action("Stop").unwrap(), Action::Stop);
        assert_eq!(parse_action("forward").unwrap(), Action::Forward);
        assert_eq!(parse_action(" LEFT ROTATE ").unwrap(), Action::LeftRotate);
        assert_eq!(parse_action("RIGHT_ROTATE").unwrap(), Action::RightRotate);
        assert_eq!(parse_action("\"STOP.\"").unwrap(), Action::Stop);
    }

    #[test]
    fn parse_action_json_body() {
        let raw = r#"{"thought":"nearly there","action":"left rotate"}"#;
        assert_eq!(parse_action(raw).unwrap(), Action::LeftRotate);
    }

    #[test]
    fn parse_action_code_fence() {
        let raw = "```json\n{\"action\": \"STOP\"}\n```";
        assert_eq!(parse_action(raw).unwrap(), Action::Stop);
    }

    #[test]
    fn parse_action_rejects_open_vocabulary() {
        assert!(matches!(
            parse_action("go forth"),
            Err(ModelError::UnrecognizedAction(_))
        ));
        assert!(matches!(
            parse_action(r#"{"thought":"hm"}"#),
            Err(ModelError::UnrecognizedAction(_))
        ));
    }

    #[test]
    fn canonical_names_parse_back() {
        for action in Action::ALL {
            assert_eq!(parse_action(action.canonical_name()).unwrap(), action);
        }
    }

    #[test]
    fn scripted_replays_in_order_and_exhausts() {
        let mut agent =
            ScriptedAgent::new(vec!["FORWARD".into(), "FORWARD".into(), "STOP".into()]);
        let (req, c) = (request(), ctx());
        for expected in ["FORWARD", "FORWARD", "STOP"] {
            let resp = agent.decide(&req, &c).unwrap();
            assert_eq!(resp.action_text, expected);
        }
        assert!(matches!(
            agent.decide(&req, &c),
            Err(ModelError::MalformedResponse(_))
        ));
    }

    #[test]
    fn scripted_token_accounting_is_bytes_over_four() {
        let mut agent = ScriptedAgent::new(vec!["FORWARD".into()]);
        let resp = agent.decide(&request(), &ctx()).unwrap();
        // "sys" + "user" = 7 bytes -> 1 token; "FORWARD" = 7 bytes -> 1.
        assert_eq!(resp.prompt_tokens, 1);
        assert_eq!(resp.completion_tokens, 1);
    }

    #[test]
    fn scripted_json_reply_extracts_thought() {
        let mut agent =
            ScriptedAgent::new(vec![r#"{"thought":"close now","action":"STOP"}"#.into()]);
        let resp = agent.decide(&request(), &ctx()).unwrap();
        assert_eq!(resp.thought, "close now");
        assert_eq!(resp.action_text, "STOP");
    }

    #[test]
    fn empty_scripted_reply_is_malformed() {
        let mut agent = ScriptedAgent::new(vec!["".into()]);
        assert!(matches!(
            agent.decide(&request(), &ctx()),
            Err(ModelError::MalformedResponse(_))
        ));
    }

    #[test]
    fn fixed_agent_is_constant() {
        let mut agent = fixed_agent(Action::Stop);
        for _ in 0..5 {
            let resp = agent.decide(&request(), &ctx()).unwrap();
            assert_eq!(resp.action_text, "STOP");
        }
    }

    #[test]
    fn random_agent_is_seed_deterministic() {
        let draw = |seed| -> Vec<String> {
            let mut agent = random_agent(seed);
            (0..32)
                .map(|_| agent.decide(&request(), &ctx()).unwrap().action_text)
                .collect()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn random_agent_is_roughly_uniform() {
        let mut agent = random_agent(42);
        let mut counts = std::collections::HashMap::new();
        let (req, c) = (request(), ctx());
        for _ in 0..10_000 {
            let action = parse_action(&agent.decide(&req, &c).unwrap().action_text).unwrap();
            *counts.entry(action).or_insert(0usize) += 1;
        }
        for action in Action::ALL {
            let freq = counts[&action] as f64 / 10_000.0;
            assert!((0.22..=0.28).contains(&freq), "{action:?} drawn {freq}");
        }
    }

    #[test]
    fn replay_agent_reads_both_file_forms() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.json");
        std::fs::write(
            &path,
            r#"["FORWARD", {"thought":"t","action":"STOP","prompt_tokens":11,"completion_tokens":3}]"#,
        )
        .unwrap();
        let mut agent = ReplayVlmAgent::from_file(&path).unwrap();
        let first = agent.decide(&request(), &ctx()).unwrap();
        assert_eq!(first.action_text, "FORWARD");
        let second = agent.decide(&request(), &ctx()).unwrap();
        assert_eq!(
            second,
            VlmResponse {
                thought: "t".into(),
                action_text: "STOP".into(),
                prompt_tokens: 11,
                completion_tokens: 3,
            }
        );
    }

    #[test]
    fn replay_estimator_requires_directory() {
        assert!(matches!(
            ReplayDepthEstimator::new(PathBuf::from("/no/such/dir"), DepthUnit::Meters),
            Err(ModelError::MissingReplayFile(_))
        ));
    }

    #[test]
    fn replay_estimator_round_trip_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..12).map(f64::from).collect();
        let record = crate::npy::ArrayRecord::from_f64_grid("depth", 3, 4, &values).unwrap();
        let bytes = crate::npy::write_npz(&[record]).unwrap();
        std::fs::write(dir.path().join("k.npz"), bytes).unwrap();

        let est = ReplayDepthEstimator::new(dir.path().to_path_buf(), DepthUnit::Meters).unwrap();
        let image = RgbImage::new(4, 3);
        let field = est
            .estimate(&image, "k", &Pose::new(0.0, 0.0, 0.0))
            .unwrap();
        assert_eq!((field.height(), field.width()), (3, 4));
        assert_eq!(field.values(), values.as_slice());

        assert!(matches!(
            est.estimate(&image, "missing", &Pose::new(0.0, 0.0, 0.0)),
            Err(ModelError::MissingReplayFile(_))
        ));

        // Shape contract violation.
        let small = RgbImage::new(2, 2);
        assert!(matches!(
            est.estimate(&small, "k", &Pose::new(0.0, 0.0, 0.0)),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }
}
