//! Termination-rule properties checked against a brute-force window scan,
//! plus whole-run determinism with mock backends.

use depthnav_core::clients::{Action, ScriptedAgent};
use depthnav_core::controller::{
    check_termination, run_episode, transcript_to_json, DeviationPolicy, LoopState,
    RepresentationMode, RunParams, TerminalReason, World,
};
use depthnav_core::depth::PipelineConfig;
use depthnav_core::episode::{Episode, SceneKind, Step};
use depthnav_core::geometry::{Point2, Pose};
use depthnav_core::sim::generate_corridor_suite;
use proptest::prelude::*;
use std::path::Path;

const K: usize = 20; // ceil(4.0 / 0.2)

/// Brute-force oracle: the first step index at which the last K entries of
/// the match history are all false.
fn first_deviation_step(history: &[bool], k: usize) -> Option<usize> {
    (0..history.len()).find(|&t| t + 1 >= k && history[t + 1 - k..=t].iter().all(|m| !m))
}

/// Feed a history through the incremental state, with stop and max-step
/// terminals disabled, and report when Deviated first fires.
fn incremental_deviation_step(history: &[bool]) -> Option<usize> {
    let policy = DeviationPolicy::default();
    let mut state = LoopState::new();
    for (t, matched) in history.iter().enumerate() {
        state.push(Action::Forward, *matched);
        match check_termination(&state, &policy, 0.2, usize::MAX) {
            Some(TerminalReason::Deviated) => return Some(t),
            Some(other) => panic!("unexpected terminal {other:?}"),
            None => {}
        }
    }
    None
}

proptest! {
    #[test]
    fn deviation_matches_window_scan(history in proptest::collection::vec(any::<bool>(), 0..200)) {
        prop_assert_eq!(incremental_deviation_step(&history), first_deviation_step(&history, K));
    }

    #[test]
    fn stop_dominates_simultaneous_deviation(prefix in proptest::collection::vec(any::<bool>(), 0..40)) {
        // Build a state whose streak is already >= K, then predict Stop.
        let policy = DeviationPolicy::default();
        let mut state = LoopState::new();
        for matched in prefix {
            state.push(Action::Forward, matched);
        }
        for _ in 0..K {
            state.push(Action::Forward, false);
        }
        state.push(Action::Stop, false);
        prop_assert_eq!(
            check_termination(&state, &policy, 0.2, 1),
            Some(TerminalReason::PredictedStop)
        );
    }
}

fn straight_episode(n_forward: usize, max_steps: usize) -> Episode {
    let mut steps: Vec<Step> = (0..n_forward)
        .map(|i| Step {
            frame: None,
            gt_action: Action::Forward,
            pose: Pose::new(0.1 * i as f64, 0.0, 0.0),
        })
        .collect();
    steps.push(Step {
        frame: None,
        gt_action: Action::Stop,
        pose: Pose::new(0.1 * n_forward as f64, 0.0, 0.0),
    });
    Episode {
        id: "straight".into(),
        scene: SceneKind::Farm,
        subtask_count: 2,
        instruction: "go to the end".into(),
        dt: 0.2,
        steps,
        target: Point2::new(1.0, 0.0),
        max_steps,
    }
}

fn tiny_params() -> RunParams {
    RunParams {
        pipeline: PipelineConfig {
            target_height: 10,
            target_width: 16,
            downsample_ratio: 2,
        },
        ..RunParams::default()
    }
}

#[test]
fn terminal_reason_reproduces_from_match_history() {
    // Oracle re-check: replay each transcript's matched flags through
    // check_termination and confirm the same terminal fires at stop_index.
    let scenarios = generate_corridor_suite(3, 5, 1.5);
    for scenario in &scenarios {
        let mut agent = depthnav_core::sim::OracleAgent::new(1.5);
        let start = scenario.episode.steps[0].pose;
        let mut world = World::closed_loop(scenario.world.clone(), start);
        let estimator = world.synthetic_estimator().unwrap();
        let params = RunParams {
            pipeline: depthnav_core::sim::corridor_pipeline_config(),
            ..RunParams::default()
        };
        let transcript = run_episode(&scenario.episode, &mut world, &mut agent, &estimator, &params);

        let policy = DeviationPolicy::default();
        let mut state = LoopState::new();
        let mut reproduced = None;
        for record in &transcript.records {
            state.push(record.predicted.unwrap(), record.matched);
            if let Some(reason) =
                check_termination(&state, &policy, scenario.episode.dt, scenario.episode.max_steps)
            {
                reproduced = Some((record.t, reason));
                break;
            }
        }
        assert_eq!(
            reproduced,
            Some((transcript.stop_index, transcript.terminal_reason))
        );
    }
}

#[test]
fn deviated_transcript_has_all_false_tail() {
    let episode = straight_episode(30, 60);
    // Mismatch every recorded step: predict LeftRotate against Forward gt.
    let mut agent = ScriptedAgent::from_actions(&[Action::LeftRotate; 31]);
    let mut world = World::replay(Path::new("."));
    let transcript = run_episode(
        &episode,
        &mut world,
        &mut agent,
        &FlatEstimator,
        &tiny_params(),
    );
    assert_eq!(transcript.terminal_reason, TerminalReason::Deviated);
    assert_eq!(transcript.stop_index, K - 1);
    let tail = &transcript.records[transcript.records.len() - K..];
    assert!(tail.iter().all(|r| !r.matched));
}

#[test]
fn nineteen_mismatches_then_match_resets() {
    let episode = straight_episode(40, 41);
    // 19 rotates (mismatch), one forward (match), then stop.
    let mut script = vec![Action::LeftRotate; 19];
    script.push(Action::Forward);
    script.push(Action::Stop);
    let mut agent = ScriptedAgent::from_actions(&script);
    let mut world = World::replay(Path::new("."));
    let transcript = run_episode(
        &episode,
        &mut world,
        &mut agent,
        &FlatEstimator,
        &tiny_params(),
    );
    assert_eq!(transcript.terminal_reason, TerminalReason::PredictedStop);
    assert_eq!(transcript.stop_index, 20);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let episode = straight_episode(5, 40);
    let run = || {
        let mut agent = ScriptedAgent::from_actions(&[
            Action::Forward,
            Action::Forward,
            Action::LeftRotate,
            Action::Forward,
            Action::Forward,
            Action::Stop,
        ]);
        let mut world = World::replay(Path::new("."));
        transcript_to_json(&run_episode(
            &episode,
            &mut world,
            &mut agent,
            &FlatEstimator,
            &tiny_params(),
        ))
    };
    assert_eq!(run(), run());
}

#[test]
fn map_mode_runs_through_the_full_render_path() {
    let episode = straight_episode(2, 10);
    let mut agent = ScriptedAgent::from_actions(&[Action::Forward, Action::Forward, Action::Stop]);
    let mut world = World::replay(Path::new("."));
    let params = RunParams {
        mode: RepresentationMode::Hybrid,
        ..tiny_params()
    };
    let transcript = run_episode(&episode, &mut world, &mut agent, &FlatEstimator, &params);
    assert_eq!(transcript.terminal_reason, TerminalReason::PredictedStop);
}

struct FlatEstimator;

impl depthnav_core::clients::DepthEstimator for FlatEstimator {
    fn estimate(
        &self,
        image: &image::RgbImage,
        _frame_key: &str,
        _pose: &Pose,
    ) -> Result<depthnav_core::DepthField, depthnav_core::ModelError> {
        depthnav_core::DepthField::constant(
            image.height() as usize,
            image.width() as usize,
            4.0,
            depthnav_core::DepthUnit::Meters,
        )
        .map_err(|e| depthnav_core::ModelError::Internal(e.to_string()))
    }

    fn output_unit(&self) -> depthnav_core::DepthUnit {
        depthnav_core::DepthUnit::Meters
    }
}
