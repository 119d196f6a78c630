//! Desk-scale evaluation harness for monocular-depth-assisted
//! vision-and-language navigation.
//!
//! The crate is organized around the data flow of one episode step: a
//! camera frame is shrunk ([`depth::preprocess_rgb`]), turned into a dense
//! depth field by a pluggable estimator backend ([`clients`]), reduced to a
//! textual depth matrix and/or a pseudo-color depth map ([`depth`]),
//! composed into prompts and sent to a decision-making agent
//! ([`controller`]), whose transcripts feed the metric suite
//! ([`metrics`]). A synthetic ray-cast world ([`sim`]) closes the loop
//! without any external model, and [`npy`] carries depth fields on disk.

pub mod clients;
pub mod controller;
pub mod depth;
pub mod episode;
pub mod geometry;
pub mod metrics;
pub mod npy;
pub mod sim;
pub mod stub;
pub mod turbo;

pub use clients::{Action, ModelError};
pub use controller::{RepresentationMode, TerminalReason, Transcript};
pub use depth::{DepthField, DepthMap, DepthMatrix, DepthUnit, PipelineConfig, RenderConfig};
pub use episode::{Episode, SceneKind};
pub use geometry::{Point2, Pose};
pub use metrics::{MetricsSummary, SplitMetrics};

/// Serializes any value as canonical JSON: object keys sorted, no trailing
/// newline. Used everywhere bytes must be reproducible.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&v).expect("JSON value renders")
}
