//! Success rate, navigation error, and token usage computed from
//! transcripts, with per-complexity and per-scene breakdowns and table
//! rendering.
//!
//! Success requires the agent's own STOP prediction within the 2 m radius;
//! an episode force-terminated on deviation or step budget is never a
//! success, whatever its final distance. Token usage is a trimmed mean:
//! pools of at least 20 samples drop everything strictly outside the
//! [P5, P95] band (linear-interpolation percentiles) before averaging.

use crate::controller::{TerminalReason, Transcript};
use crate::episode::{Episode, SceneKind};
use crate::geometry::Point2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Success radius in meters.
pub const SUCCESS_RADIUS_M: f64 = 2.0;

/// Minimum pool size before outlier trimming is applied.
const TRIM_MIN_POOL: usize = 20;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("token pool is empty")]
    EmptyPool,
    #[error("episodes and transcripts do not correspond: {0}")]
    CardinalityMismatch(String),
}

/// Navigation error: straight-line ground-plane distance between the
/// stopping position and the target position.
pub fn nav_error(stop: &Point2, target: &Point2) -> f64 {
    stop.distance(target)
}

/// Whether an episode counts as a success: the agent predicted STOP and
/// stopped within [`SUCCESS_RADIUS_M`] of the target.
pub fn success(terminal_reason: TerminalReason, nav_error: f64) -> bool {
    terminal_reason == TerminalReason::PredictedStop && nav_error <= SUCCESS_RADIUS_M
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = p / 100.0 * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let frac = idx - lo as f64;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
}

/// Mean of the pool after dropping samples strictly outside the [P5, P95]
/// band; pools smaller than [`TRIM_MIN_POOL`] are averaged untrimmed.
pub fn trimmed_mean(pool: &[u64]) -> Result<f64, MetricsError> {
    if pool.is_empty() {
        return Err(MetricsError::EmptyPool);
    }
    let mut sorted: Vec<f64> = pool.iter().map(|v| *v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("token counts are finite"));
    let kept: Vec<f64> = if sorted.len() >= TRIM_MIN_POOL {
        let p5 = percentile_sorted(&sorted, 5.0);
        let p95 = percentile_sorted(&sorted, 95.0);
        sorted.iter().copied().filter(|v| *v >= p5 && *v <= p95).collect()
    } else {
        sorted
    };
    // The band always contains the median, so the kept set is non-empty.
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Pools per-step prompt/completion token counts across transcripts and
/// returns the rounded trimmed means `(TU_p, TU_c)`.
pub fn token_usage(transcripts: &[&Transcript]) -> Result<(u64, u64), MetricsError> {
    let prompt_pool: Vec<u64> = transcripts
        .iter()
        .flat_map(|t| t.records.iter().map(|r| r.prompt_tokens))
        .collect();
    let completion_pool: Vec<u64> = transcripts
        .iter()
        .flat_map(|t| t.records.iter().map(|r| r.completion_tokens))
        .collect();
    Ok((
        trimmed_mean(&prompt_pool)?.round() as u64,
        trimmed_mean(&completion_pool)?.round() as u64,
    ))
}

/// Metrics over one group of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub episodes: usize,
    pub sr: f64,
    pub mean_ne: f64,
    pub tu_p: u64,
    pub tu_c: u64,
}

/// Outcome of a single episode, kept in the summary for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub id: String,
    pub scene: SceneKind,
    pub subtask_count: u32,
    pub terminal_reason: TerminalReason,
    pub nav_error: f64,
    pub success: bool,
}

/// Full evaluation summary: overall, per-complexity, and per-scene splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub overall: SplitMetrics,
    pub low: Option<SplitMetrics>,
    pub high: Option<SplitMetrics>,
    pub scenes: BTreeMap<SceneKind, SplitMetrics>,
    pub per_episode: Vec<EpisodeOutcome>,
}

struct ScoredEpisode<'a> {
    episode: &'a Episode,
    transcript: &'a Transcript,
    nav_error: f64,
    success: bool,
}

fn split_metrics(group: &[&ScoredEpisode<'_>]) -> Result<SplitMetrics, MetricsError> {
    let n = group.len();
    let successes = group.iter().filter(|s| s.success).count();
    let ne_sum: f64 = group.iter().map(|s| s.nav_error).sum();
    let transcripts: Vec<&Transcript> = group.iter().map(|s| s.transcript).collect();
    let (tu_p, tu_c) = token_usage(&transcripts)?;
    Ok(SplitMetrics {
        episodes: n,
        sr: successes as f64 / n as f64,
        mean_ne: ne_sum / n as f64,
        tu_p,
        tu_c,
    })
}

/// Scores every episode against its transcript and aggregates all splits.
/// Episodes and transcripts are matched by episode id.
pub fn aggregate(
    episodes: &[Episode],
    transcripts: &[Transcript],
) -> Result<MetricsSummary, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::CardinalityMismatch(
            "no episodes to aggregate".into(),
        ));
    }
    if episodes.len() != transcripts.len() {
        return Err(MetricsError::CardinalityMismatch(format!(
            "{} episodes but {} transcripts",
            episodes.len(),
            transcripts.len()
        )));
    }
    let by_id: BTreeMap<&str, &Transcript> = transcripts
        .iter()
        .map(|t| (t.episode_id.as_str(), t))
        .collect();
    if by_id.len() != transcripts.len() {
        return Err(MetricsError::CardinalityMismatch(
            "duplicate transcript episode ids".into(),
        ));
    }

    let mut scored = Vec::with_capacity(episodes.len());
    for episode in episodes {
        let transcript = by_id.get(episode.id.as_str()).ok_or_else(|| {
            MetricsError::CardinalityMismatch(format!("no transcript for episode {:?}", episode.id))
        })?;
        let ne = nav_error(&transcript.stop_pose.position(), &episode.target);
        scored.push(ScoredEpisode {
            episode,
            transcript,
            nav_error: ne,
            success: success(transcript.terminal_reason, ne),
        });
    }

    let all: Vec<&ScoredEpisode<'_>> = scored.iter().collect();
    let overall = split_metrics(&all)?;

    let low_group: Vec<&ScoredEpisode<'_>> = scored
        .iter()
        .filter(|s| s.episode.subtask_count <= 2)
        .collect();
    let high_group: Vec<&ScoredEpisode<'_>> = scored
        .iter()
        .filter(|s| s.episode.subtask_count >= 3)
        .collect();
    let low = (!low_group.is_empty())
        .then(|| split_metrics(&low_group))
        .transpose()?;
    let high = (!high_group.is_empty())
        .then(|| split_metrics(&high_group))
        .transpose()?;

    let mut scenes = BTreeMap::new();
    for kind in SceneKind::ALL {
        let group: Vec<&ScoredEpisode<'_>> = scored
            .iter()
            .filter(|s| s.episode.scene == kind)
            .collect();
        if !group.is_empty() {
            scenes.insert(kind, split_metrics(&group)?);
        }
    }

    let per_episode = scored
        .iter()
        .map(|s| EpisodeOutcome {
            id: s.episode.id.clone(),
            scene: s.episode.scene,
            subtask_count: s.episode.subtask_count,
            terminal_reason: s.transcript.terminal_reason,
            nav_error: s.nav_error,
            success: s.success,
        })
        .collect();

    Ok(MetricsSummary {
        overall,
        low,
        high,
        scenes,
        per_episode,
    })
}

/// Output form for [`report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Svg,
}

fn rows(summary: &MetricsSummary) -> Vec<(&'static str, Option<&SplitMetrics>)> {
    let mut out: Vec<(&'static str, Option<&SplitMetrics>)> = vec![
        ("overall", Some(&summary.overall)),
        ("low", summary.low.as_ref()),
        ("high", summary.high.as_ref()),
    ];
    for kind in SceneKind::ALL {
        out.push((kind.label(), summary.scenes.get(&kind)));
    }
    out
}

/// Renders the summary as an aligned table, a CSV, or an SVG bar chart of
/// per-scene success rates. Output is deterministic for equal summaries.
pub fn report(summary: &MetricsSummary, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:<12} {:>8} {:>6} {:>7} {:>7} {:>7}\n",
                "split", "episodes", "SR", "NE", "TU_p", "TU_c"
            ));
            for (label, metrics) in rows(summary) {
                match metrics {
                    Some(m) => out.push_str(&format!(
                        "{:<12} {:>8} {:>6.2} {:>7.2} {:>7} {:>7}\n",
                        label, m.episodes, m.sr, m.mean_ne, m.tu_p, m.tu_c
                    )),
                    None => out.push_str(&format!(
                        "{:<12} {:>8} {:>6} {:>7} {:>7} {:>7}\n",
                        label, 0, "-", "-", "-", "-"
                    )),
                }
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("split,episodes,sr,ne,tu_p,tu_c\n");
            for (label, metrics) in rows(summary) {
                match metrics {
                    Some(m) => out.push_str(&format!(
                        "{},{},{:.4},{:.4},{},{}\n",
                        label, m.episodes, m.sr, m.mean_ne, m.tu_p, m.tu_c
                    )),
                    None => out.push_str(&format!("{label},0,-,-,-,-\n")),
                }
            }
            out
        }
        ReportFormat::Svg => svg_scene_chart(summary),
    }
}

/// Bar chart of success rate per scene.
fn svg_scene_chart(summary: &MetricsSummary) -> String {
    const WIDTH: usize = 640;
    const HEIGHT: usize = 320;
    const MARGIN: usize = 40;
    let plot_h = HEIGHT - 2 * MARGIN;
    let slot = (WIDTH - 2 * MARGIN) / SceneKind::ALL.len();
    let bar_w = slot * 3 / 5;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<style>text{font-family:monospace;font-size:12px}</style>\n");
    out.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{}\">success rate per scene</text>\n",
        MARGIN - 16
    ));
    for (i, kind) in SceneKind::ALL.iter().enumerate() {
        let x = MARGIN + i * slot + (slot - bar_w) / 2;
        let label_x = MARGIN + i * slot + slot / 2;
        match summary.scenes.get(kind) {
            Some(m) => {
                let h = (m.sr * plot_h as f64).round() as usize;
                let y = HEIGHT - MARGIN - h;
                out.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{h}\" fill=\"#4477aa\"/>\n"
                ));
                out.push_str(&format!(
                    "<text x=\"{label_x}\" y=\"{}\" text-anchor=\"middle\">{:.2}</text>\n",
                    y.saturating_sub(6).max(12),
                    m.sr
                ));
            }
            None => {
                out.push_str(&format!(
                    "<text x=\"{label_x}\" y=\"{}\" text-anchor=\"middle\">-</text>\n",
                    HEIGHT - MARGIN - 6
                ));
            }
        }
        out.push_str(&format!(
            "<text x=\"{label_x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN + 16,
            kind.label()
        ));
    }
    out.push_str("</svg>\n");
    out
}
