//! Benchmark episode schema and JSON-lines loader.
//!
//! One episode per line. Frame references are paths relative to the episode
//! file's directory, or `null` for synthetic frames rendered on demand.
//! Re-emission is canonical (sorted keys), so `load` then `save` reproduces
//! a canonical file byte-for-byte.

use crate::clients::Action;
use crate::geometry::{Point2, Pose};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("unresolvable frame references: {0:?}")]
    MissingFrame(Vec<String>),
}

/// Scene classification, the six benchmark categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Farm,
    Greenhouse,
    Forest,
    Mountain,
    Garden,
    Village,
}

impl SceneKind {
    /// All scene kinds in reporting order.
    pub const ALL: [SceneKind; 6] = [
        SceneKind::Farm,
        SceneKind::Greenhouse,
        SceneKind::Forest,
        SceneKind::Mountain,
        SceneKind::Garden,
        SceneKind::Village,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SceneKind::Farm => "farm",
            SceneKind::Greenhouse => "greenhouse",
            SceneKind::Forest => "forest",
            SceneKind::Mountain => "mountain",
            SceneKind::Garden => "garden",
            SceneKind::Village => "village",
        }
    }
}

/// One time step of an episode: the camera frame, the annotated action, and
/// the recorded robot pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Relative image path, or `None` for a synthetic frame.
    pub frame: Option<String>,
    pub gt_action: Action,
    pub pose: Pose,
}

/// One instruction-following trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub scene: SceneKind,
    pub subtask_count: u32,
    pub instruction: String,
    /// Seconds per step.
    pub dt: f64,
    pub steps: Vec<Step>,
    /// Target position in the ground plane, meters.
    pub target: Point2,
    pub max_steps: usize,
}

impl Episode {
    pub fn default_dt() -> f64 {
        0.2
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id: must be non-empty".into());
        }
        if self.subtask_count < 1 {
            return Err("subtask_count: must be at least 1".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(format!("dt: {} is not a positive number", self.dt));
        }
        if self.steps.is_empty() {
            return Err("steps: must be non-empty".into());
        }
        if self.max_steps < 1 {
            return Err("max_steps: must be at least 1".into());
        }
        if self.steps.last().map(|s| s.gt_action) != Some(Action::Stop) {
            return Err("steps: last gt_action must be \"stop\"".into());
        }
        if !(self.target.x.is_finite() && self.target.y.is_finite()) {
            return Err("target: coordinates must be finite".into());
        }
        for (i, step) in self.steps.iter().enumerate() {
            let p = &step.pose;
            if !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite()) {
                return Err(format!("steps[{i}].pose: coordinates must be finite"));
            }
            if !(0.0..360.0).contains(&p.heading) {
                return Err(format!(
                    "steps[{i}].pose.heading: {} outside [0, 360)",
                    p.heading
                ));
            }
        }
        Ok(())
    }
}

/// Loader output: validated episodes plus non-fatal warnings.
#[derive(Debug)]
pub struct LoadedEpisodes {
    pub episodes: Vec<Episode>,
    pub warnings: Vec<String>,
    /// Directory frame references are resolved against.
    pub base_dir: PathBuf,
}

/// Resolves a step's frame reference against the episode file directory.
pub fn resolve_frame(base_dir: &Path, frame: &str) -> PathBuf {
    base_dir.join(frame)
}

/// Loads and validates a JSON-lines episode file, preserving order.
pub fn load_episodes(path: &Path) -> Result<LoadedEpisodes, EpisodeError> {
    let text = std::fs::read_to_string(path).map_err(|source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_episodes(&text, &base_dir)
}

/// Parses episode lines; `base_dir` anchors frame references.
pub fn parse_episodes(text: &str, base_dir: &Path) -> Result<LoadedEpisodes, EpisodeError> {
    let mut episodes = Vec::new();
    let mut warnings = Vec::new();
    let mut missing = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let episode: Episode =
            serde_json::from_str(line).map_err(|e| EpisodeError::SchemaError {
                line: line_no,
                message: e.to_string(),
            })?;
        episode.validate().map_err(|message| EpisodeError::SchemaError {
            line: line_no,
            message,
        })?;
        if episode.subtask_count < 2 {
            warnings.push(format!(
                "line {line_no}: episode {:?} has subtask_count {} < 2; assigned to the low-complexity split",
                episode.id, episode.subtask_count
            ));
        }
        for (i, step) in episode.steps.iter().enumerate() {
            if let Some(frame) = &step.frame {
                let resolved = resolve_frame(base_dir, frame);
                if !resolved.is_file() {
                    missing.push(format!("{} (episode {}, step {i})", frame, episode.id));
                }
            }
        }
        episodes.push(episode);
    }
    if !missing.is_empty() {
        return Err(EpisodeError::MissingFrame(missing));
    }
    Ok(LoadedEpisodes {
        episodes,
        warnings,
        base_dir: base_dir.to_path_buf(),
    })
}

/// Renders episodes as canonical JSON lines (sorted keys, one per line,
/// trailing newline).
pub fn episodes_to_jsonl(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for episode in episodes {
        out.push_str(&crate::canonical_json(episode));
        out.push('\n');
    }
    out
}

/// Writes episodes in canonical JSON-lines form.
pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<(), EpisodeError> {
    std::fs::write(path, episodes_to_jsonl(episodes)).map_err(|source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Splits episodes into the low-complexity (subtask count <= 2) and
/// high-complexity (>= 3) portions. Episodes with fewer than 2 subtasks are
/// assigned to the low split.
pub fn split_by_complexity(episodes: &[Episode]) -> (Vec<&Episode>, Vec<&Episode>) {
    episodes.iter().partition(|e| e.subtask_count <= 2)
}

/// Groups episodes by scene kind, preserving input order inside groups.
pub fn group_by_scene(episodes: &[Episode]) -> BTreeMap<SceneKind, Vec<&Episode>> {
    let mut groups: BTreeMap<SceneKind, Vec<&Episode>> = BTreeMap::new();
    for e in episodes {
        groups.entry(e.scene).or_default().push(e);
    }
    groups
}
