//! Synthetic 2.5-D scenes with an analytic ray-cast depth renderer and a
//! kinematic robot, so the whole stack can run closed-loop without any
//! external model.
//!
//! Depth is z-depth: the projection of the hit point onto the camera's
//! optical axis, not the Euclidean ray length. A fronto-parallel surface
//! therefore renders at a constant value across the whole frame. The ground
//! plane at elevation 0 is where obstacles stand; it is not itself a hit
//! surface, so an empty scene renders at `far_limit` everywhere.

use crate::clients::{
    Action, Agent, DepthEstimator, ModelError, StepContext, VlmRequest, VlmResponse,
};
use crate::depth::{downsample, DepthField, DepthMatrix, DepthUnit, PipelineConfig};
use crate::episode::{Episode, SceneKind, Step};
use crate::geometry::{normalize_heading, Point2, Pose};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const HIT_EPS: f64 = 1e-9;

/// A vertical obstacle standing on the ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    /// Axis-aligned box footprint, extruded from the ground to `height`.
    Box {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        height: f64,
    },
    /// Vertical cylinder standing on the ground.
    Cylinder {
        x: f64,
        y: f64,
        radius: f64,
        height: f64,
    },
}

/// Scene geometry for the synthetic renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScene {
    pub obstacles: Vec<Obstacle>,
    /// Depth reported for rays that hit nothing, meters.
    pub far_limit: f64,
}

impl Default for SimScene {
    fn default() -> Self {
        Self {
            obstacles: Vec::new(),
            far_limit: 100.0,
        }
    }
}

/// Pinhole camera with pitch fixed at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Height above the ground plane, meters.
    pub height: f64,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Camera {
    pub fn with_grid(pipeline: &PipelineConfig) -> Self {
        Self {
            height: 0.5,
            hfov_deg: 90.0,
            rows: pipeline.target_height as usize,
            cols: pipeline.target_width as usize,
        }
    }

    fn focal_px(&self) -> f64 {
        (self.cols as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan()
    }
}

/// Robot motion parameters for the discrete action space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    /// Meters per second while driving forward.
    pub forward_speed: f64,
    /// Degrees per second while rotating in place.
    pub rotate_speed: f64,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self {
            forward_speed: 0.5,
            rotate_speed: 30.0,
        }
    }
}

/// Applies one action for `dt` seconds. Forward translates along the
/// heading; left/right rotate counterclockwise/clockwise; stop is identity.
pub fn advance(pose: &Pose, action: Action, dt: f64, kin: &Kinematics) -> Pose {
    match action {
        Action::Forward => {
            let (fx, fy) = pose.forward();
            let step = kin.forward_speed * dt;
            Pose::new(pose.x + fx * step, pose.y + fy * step, pose.heading)
        }
        Action::LeftRotate => Pose::new(
            pose.x,
            pose.y,
            normalize_heading(pose.heading - kin.rotate_speed * dt),
        ),
        Action::RightRotate => Pose::new(
            pose.x,
            pose.y,
            normalize_heading(pose.heading + kin.rotate_speed * dt),
        ),
        Action::Stop => *pose,
    }
}

/// Ray/obstacle intersection in scene coordinates. The ray direction is
/// scaled so its projection onto the optical axis is exactly 1, making the
/// ray parameter equal to z-depth.
fn hit_box(
    origin: (f64, f64, f64),
    dir: (f64, f64, f64),
    bounds: [(f64, f64); 3],
) -> Option<f64> {
    let o = [origin.0, origin.1, origin.2];
    let d = [dir.0, dir.1, dir.2];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let (lo, hi) = bounds[axis];
        if d[axis].abs() < 1e-15 {
            if o[axis] < lo || o[axis] > hi {
                return None;
            }
            continue;
        }
        let mut t1 = (lo - o[axis]) / d[axis];
        let mut t2 = (hi - o[axis]) / d[axis];
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        t_near = t_near.max(t1);
        t_far = t_far.min(t2);
        if t_near > t_far {
            return None;
        }
    }
    (t_near > HIT_EPS && t_near <= t_far).then_some(t_near)
}

fn hit_cylinder(
    origin: (f64, f64, f64),
    dir: (f64, f64, f64),
    center: (f64, f64),
    radius: f64,
    height: f64,
) -> Option<f64> {
    let (ox, oy, oz) = origin;
    let (dx, dy, dz) = dir;
    let (cx, cy) = center;
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > HIT_EPS && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };

    // Curved side.
    let (ex, ey) = (ox - cx, oy - cy);
    let a = dx * dx + dy * dy;
    if a > 1e-15 {
        let b = 2.0 * (ex * dx + ey * dy);
        let c = ex * ex + ey * ey - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sqrt_disc = disc.sqrt();
            for t in [(-b - sqrt_disc) / (2.0 * a), (-b + sqrt_disc) / (2.0 * a)] {
                if t > HIT_EPS {
                    let z = oz + t * dz;
                    if (0.0..=height).contains(&z) {
                        consider(t);
                    }
                }
            }
        }
    }

    // End caps.
    if dz.abs() > 1e-15 {
        for plane in [0.0, height] {
            let t = (plane - oz) / dz;
            if t > HIT_EPS {
                let px = ox + t * dx - cx;
                let py = oy + t * dy - cy;
                if px * px + py * py <= radius * radius {
                    consider(t);
                }
            }
        }
    }
    best
}

/// Renders the per-pixel z-depth field seen from `pose`. Pixels whose rays
/// miss every obstacle get `far_limit`.
pub fn raycast_depth(scene: &SimScene, pose: &Pose, camera: &Camera) -> DepthField {
    let f = camera.focal_px();
    let h = pose.heading.to_radians();
    // Forward, right, and up unit vectors in the clockwise-heading frame.
    let fwd = (h.cos(), -h.sin(), 0.0);
    let right = (-h.sin(), -h.cos(), 0.0);
    let up = (0.0, 0.0, 1.0);
    let origin = (pose.x, pose.y, camera.height);

    let mut values = Vec::with_capacity(camera.rows * camera.cols);
    for i in 0..camera.rows {
        let v = (i as f64 + 0.5) - camera.rows as f64 / 2.0;
        for j in 0..camera.cols {
            let u = (j as f64 + 0.5) - camera.cols as f64 / 2.0;
            // Scaled so dir . fwd == 1; the ray parameter is then z-depth.
            let dir = (
                fwd.0 + (u / f) * right.0 + (-v / f) * up.0,
                fwd.1 + (u / f) * right.1 + (-v / f) * up.1,
                fwd.2 + (u / f) * right.2 + (-v / f) * up.2,
            );
            let mut depth = scene.far_limit;
            for obstacle in &scene.obstacles {
                let t = match obstacle {
                    Obstacle::Box {
                        x_min,
                        x_max,
                        y_min,
                        y_max,
                        height,
                    } => hit_box(
                        origin,
                        dir,
                        [(*x_min, *x_max), (*y_min, *y_max), (0.0, *height)],
                    ),
                    Obstacle::Cylinder {
                        x,
                        y,
                        radius,
                        height,
                    } => hit_cylinder(origin, dir, (*x, *y), *radius, *height),
                };
                if let Some(t) = t {
                    if t < depth {
                        depth = t;
                    }
                }
            }
            values.push(depth);
        }
    }
    DepthField::new(camera.rows, camera.cols, values, DepthUnit::Meters)
        .expect("raycast produces a well-formed field")
}

/// Bearing deadband for the scripted oracle driver, degrees.
pub const ORACLE_BEARING_DEADBAND: f64 = 10.0;

/// Scripted navigation rule used for closed-loop tests: rotate toward the
/// goal while the bearing is outside the deadband, otherwise drive forward
/// until the central matrix column reads at or below `stop_distance`.
pub fn oracle_decision(matrix: &DepthMatrix, bearing_deg: f64, stop_distance: f64) -> Action {
    if bearing_deg > ORACLE_BEARING_DEADBAND {
        Action::RightRotate
    } else if bearing_deg < -ORACLE_BEARING_DEADBAND {
        Action::LeftRotate
    } else if matrix.column_min(matrix.cols / 2) > stop_distance {
        Action::Forward
    } else {
        Action::Stop
    }
}

/// [`Agent`] wrapper around [`oracle_decision`]; requires the depth matrix
/// in the step context, which closed-loop runs provide.
pub struct OracleAgent {
    pub stop_distance: f64,
}

impl OracleAgent {
    pub fn new(stop_distance: f64) -> Self {
        Self { stop_distance }
    }
}

impl Agent for OracleAgent {
    fn decide(
        &mut self,
        _request: &VlmRequest,
        ctx: &StepContext<'_>,
    ) -> Result<VlmResponse, ModelError> {
        let matrix = ctx.matrix.ok_or_else(|| {
            ModelError::Internal("oracle agent requires a depth matrix in the step context".into())
        })?;
        let bearing = ctx.pose.bearing_to(&ctx.target);
        let action = oracle_decision(matrix, bearing, self.stop_distance);
        Ok(VlmResponse {
            thought: format!(
                "bearing {:.1} deg, center depth {:.2}",
                bearing,
                matrix.column_min(matrix.cols / 2)
            ),
            action_text: action.canonical_name().to_string(),
            prompt_tokens: 0,
            completion_tokens: 0,
        })
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

/// Depth backend that ray-casts the scene at the current pose instead of
/// calling a model. Always metric.
pub struct SyntheticDepthEstimator {
    scene: SimScene,
    camera_height: f64,
    hfov_deg: f64,
}

impl SyntheticDepthEstimator {
    pub fn new(scene: SimScene, camera: &Camera) -> Self {
        Self {
            scene,
            camera_height: camera.height,
            hfov_deg: camera.hfov_deg,
        }
    }
}

impl DepthEstimator for SyntheticDepthEstimator {
    fn estimate(
        &self,
        image: &RgbImage,
        _frame_key: &str,
        pose: &Pose,
    ) -> Result<DepthField, ModelError> {
        let camera = Camera {
            height: self.camera_height,
            hfov_deg: self.hfov_deg,
            rows: image.height() as usize,
            cols: image.width() as usize,
        };
        Ok(raycast_depth(&self.scene, pose, &camera))
    }

    fn output_unit(&self) -> DepthUnit {
        DepthUnit::Meters
    }
}

/// Flat placeholder frame used where a synthetic episode step has no
/// recorded image.
pub fn placeholder_frame(pipeline: &PipelineConfig) -> RgbImage {
    RgbImage::from_pixel(
        pipeline.target_width,
        pipeline.target_height,
        image::Rgb([128, 128, 128]),
    )
}

/// Everything needed to re-run one synthetic episode closed-loop; persisted
/// as JSON next to the generated episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub scene: SimScene,
    pub camera: Camera,
    pub kinematics: Kinematics,
    pub stop_distance: f64,
}

/// Rolls the oracle policy forward through the scene, producing the pose
/// and action at every step. Returns `None` if the policy fails to stop
/// within `max_plan_steps`.
pub fn plan_with_oracle(
    world: &SyntheticWorld,
    start: &Pose,
    target: &Point2,
    pipeline: &PipelineConfig,
    dt: f64,
    max_plan_steps: usize,
) -> Option<Vec<(Pose, Action)>> {
    let mut pose = *start;
    let mut plan = Vec::new();
    for _ in 0..max_plan_steps {
        let field = raycast_depth(&world.scene, &pose, &world.camera);
        let matrix = downsample(&field, pipeline.downsample_ratio).ok()?;
        let bearing = pose.bearing_to(target);
        let action = oracle_decision(&matrix, bearing, world.stop_distance);
        plan.push((pose, action));
        if action == Action::Stop {
            return Some(plan);
        }
        pose = advance(&pose, action, dt, &world.kinematics);
    }
    None
}

/// One generated scenario: the world, its episode, and the id both share.
#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub world: SyntheticWorld,
    pub episode: Episode,
}

/// Pipeline geometry used for the generated corridor suite: small frames
/// keep ray casting cheap while preserving the default 9x16 matrix shape.
pub fn corridor_pipeline_config() -> PipelineConfig {
    PipelineConfig {
        target_height: 90,
        target_width: 160,
        downsample_ratio: 10,
    }
}

fn corridor_scene(length: f64, with_side_walls: bool, obstacle: Option<Obstacle>) -> SimScene {
    let mut obstacles = vec![Obstacle::Box {
        x_min: length,
        x_max: length + 0.5,
        y_min: -25.0,
        y_max: 25.0,
        height: 4.0,
    }];
    if with_side_walls {
        for y in [-2.5, 2.5] {
            obstacles.push(Obstacle::Box {
                x_min: 0.0,
                x_max: length,
                y_min: y - 0.3,
                y_max: y + 0.3,
                height: 2.0,
            });
        }
    }
    if let Some(extra) = obstacle {
        obstacles.push(extra);
    }
    SimScene {
        obstacles,
        far_limit: 100.0,
    }
}

/// Generates a deterministic suite of corridor/obstacle scenes with oracle
/// ground-truth plans. Scene kinds rotate through all six classes and
/// subtask counts alternate between 2 and 3 so both complexity splits are
/// populated.
pub fn generate_corridor_suite(
    count: usize,
    seed: u64,
    stop_distance: f64,
) -> Vec<GeneratedScenario> {
    let pipeline = corridor_pipeline_config();
    let camera = Camera::with_grid(&pipeline);
    let kinematics = Kinematics::default();
    let dt = Episode::default_dt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);

    for index in 0..count {
        let length = 6.0 + rng.gen_range(0..60) as f64 * 0.1; // 6.0 .. 12.0 m
        let start_heading = match index % 3 {
            0 => 0.0,
            1 => normalize_heading(18.0 + rng.gen_range(0..12) as f64),
            _ => normalize_heading(-(18.0 + rng.gen_range(0..12) as f64)),
        };
        let with_side_walls = index % 2 == 0;
        let obstacle = (index % 4 == 3).then_some(Obstacle::Cylinder {
            x: length / 2.0,
            y: 1.8,
            radius: 0.4,
            height: 1.5,
        });
        let world = SyntheticWorld {
            scene: corridor_scene(length, with_side_walls, obstacle),
            camera,
            kinematics,
            stop_distance,
        };
        let start = Pose::new(0.0, 0.0, start_heading);
        let target = Point2::new(length, 0.0);
        let plan = plan_with_oracle(&world, &start, &target, &pipeline, dt, 600)
            .expect("oracle stops inside the corridor");
        let steps: Vec<Step> = plan
            .iter()
            .map(|(pose, action)| Step {
                frame: None,
                gt_action: *action,
                pose: *pose,
            })
            .collect();
        // A couple of tight budgets so a never-stopping agent exercises the
        // max-step terminal instead of the deviation terminal.
        let margin = if index % 5 == 4 { 10 } else { 30 };
        let episode = Episode {
            id: format!("corridor_{index:02}"),
            scene: SceneKind::ALL[index % SceneKind::ALL.len()],
            subtask_count: 2 + (index % 2) as u32,
            instruction: "Drive down the corridor to the wall at its end and stop just before touching it.".into(),
            dt,
            steps,
            target,
            max_steps: plan.len() + margin,
        };
        out.push(GeneratedScenario { world, episode });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall_scene(distance: f64) -> SimScene {
        SimScene {
            obstacles: vec![Obstacle::Box {
                x_min: distance,
                x_max: distance + 0.5,
                y_min: -50.0,
                y_max: 50.0,
                height: 10.0,
            }],
            far_limit: 100.0,
        }
    }

    fn small_camera() -> Camera {
        Camera {
            height: 0.5,
            hfov_deg: 90.0,
            rows: 45,
            cols: 80,
        }
    }

    #[test]
    fn fronto_parallel_wall_is_constant_z_depth() {
        // A camera whose frustum stays inside the wall face at 2 m: every
        // ray hits it, and z-depth makes every pixel read exactly 2.0.
        let camera = Camera {
            height: 0.5,
            hfov_deg: 90.0,
            rows: 18,
            cols: 80,
        };
        let field = raycast_depth(&wall_scene(2.0), &Pose::new(0.0, 0.0, 0.0), &camera);
        for v in field.values() {
            assert!((v - 2.0).abs() < 1e-6 * 2.0, "depth {v}");
        }
    }

    #[test]
    fn empty_scene_is_far_limit() {
        let field = raycast_depth(
            &SimScene::default(),
            &Pose::new(0.0, 0.0, 0.0),
            &small_camera(),
        );
        assert!(field.values().iter().all(|v| *v == 100.0));
    }

    #[test]
    fn approach_decreases_center_depth_by_step_length() {
        let scene = wall_scene(5.0);
        let camera = small_camera();
        let kin = Kinematics::default();
        let mut pose = Pose::new(0.0, 0.0, 0.0);
        let center = |field: &DepthField| field.get(camera.rows / 2, camera.cols / 2);
        let mut last = center(&raycast_depth(&scene, &pose, &camera));
        for _ in 0..10 {
            pose = advance(&pose, Action::Forward, 0.2, &kin);
            let next = center(&raycast_depth(&scene, &pose, &camera));
            assert!((last - next - 0.1).abs() < 1e-9, "step delta {}", last - next);
            last = next;
        }
    }

    #[test]
    fn half_occluding_box_splits_frame_at_projected_column() {
        // Box 3 m ahead covering the left half of the view (y >= 0 is the
        // camera's left), wall at 10 m behind it.
        let scene = SimScene {
            obstacles: vec![
                Obstacle::Box {
                    x_min: 3.0,
                    x_max: 3.4,
                    y_min: 0.0,
                    y_max: 50.0,
                    height: 10.0,
                },
                Obstacle::Box {
                    x_min: 10.0,
                    x_max: 10.5,
                    y_min: -50.0,
                    y_max: 50.0,
                    height: 10.0,
                },
            ],
            far_limit: 100.0,
        };
        let camera = small_camera();
        let field = raycast_depth(&scene, &Pose::new(0.0, 0.0, 0.0), &camera);
        let mid_row = camera.rows / 2;
        // The box edge at y=0 projects exactly onto the optical axis, i.e.
        // column u=0, which sits between cols/2-1 and cols/2.
        for j in 0..camera.cols {
            let v = field.get(mid_row, j);
            let expected = if j < camera.cols / 2 { 3.0 } else { 10.0 };
            assert!(
                (v - expected).abs() < 1e-6,
                "column {j}: got {v}, expected {expected}"
            );
        }
    }

    #[test]
    fn cylinder_is_hit_front_on() {
        let scene = SimScene {
            obstacles: vec![Obstacle::Cylinder {
                x: 4.0,
                y: 0.0,
                radius: 1.0,
                height: 2.0,
            }],
            far_limit: 100.0,
        };
        let camera = small_camera();
        let field = raycast_depth(&scene, &Pose::new(0.0, 0.0, 0.0), &camera);
        let center = field.get(camera.rows / 2, camera.cols / 2);
        // Nearest point of the cylinder surface is 3 m ahead; the center
        // pixel is marginally off-axis.
        assert!((center - 3.0).abs() < 0.01, "center depth {center}");
        // Corner pixels look past the cylinder.
        assert_eq!(field.get(0, 0), 100.0);
    }

    #[test]
    fn advance_forward_along_plus_x() {
        let pose = advance(
            &Pose::new(0.0, 0.0, 0.0),
            Action::Forward,
            0.2,
            &Kinematics::default(),
        );
        assert!((pose.x - 0.1).abs() < 1e-12);
        assert!(pose.y.abs() < 1e-12);
        assert_eq!(pose.heading, 0.0);
    }

    #[test]
    fn advance_rotations_invert() {
        let kin = Kinematics::default();
        let start = Pose::new(1.0, 2.0, 33.0);
        let left = advance(&start, Action::LeftRotate, 0.2, &kin);
        assert!((left.heading - 27.0).abs() < 1e-12);
        let back = advance(&left, Action::RightRotate, 0.2, &kin);
        assert!((back.heading - 33.0).abs() < 1e-12);
    }

    #[test]
    fn advance_stop_is_identity() {
        let pose = Pose::new(1.0, -2.0, 123.0);
        assert_eq!(advance(&pose, Action::Stop, 0.2, &Kinematics::default()), pose);
    }

    #[test]
    fn oracle_rotates_toward_positive_bearing() {
        let matrix = DepthMatrix {
            rows: 1,
            cols: 1,
            values: vec![5.0],
            unit: DepthUnit::Meters,
            source_ratio: 1,
        };
        assert_eq!(oracle_decision(&matrix, 45.0, 1.5), Action::RightRotate);
        assert_eq!(oracle_decision(&matrix, -45.0, 1.5), Action::LeftRotate);
        assert_eq!(oracle_decision(&matrix, 0.0, 1.5), Action::Forward);
    }

    #[test]
    fn oracle_stops_when_center_is_close() {
        let matrix = DepthMatrix {
            rows: 1,
            cols: 1,
            values: vec![1.2],
            unit: DepthUnit::Meters,
            source_ratio: 1,
        };
        assert_eq!(oracle_decision(&matrix, 0.0, 1.5), Action::Stop);
    }

    #[test]
    fn generated_suite_is_deterministic_and_valid() {
        let a = generate_corridor_suite(4, 9, 1.5);
        let b = generate_corridor_suite(4, 9, 1.5);
        assert_eq!(a.len(), 4);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.episode, sb.episode);
            assert_eq!(sa.world, sb.world);
            assert_eq!(sa.episode.steps.last().unwrap().gt_action, Action::Stop);
        }
    }

    #[test]
    fn generated_plan_ends_near_stop_distance() {
        let scenarios = generate_corridor_suite(3, 11, 1.5);
        for scenario in scenarios {
            let stop_pose = scenario.episode.steps.last().unwrap().pose;
            let ne = stop_pose.position().distance(&scenario.episode.target);
            assert!(ne <= 2.0, "episode {} stops {ne} m away", scenario.episode.id);
        }
    }
}
