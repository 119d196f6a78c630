//! Ground-plane geometry shared by episodes, the simulator and the metrics.
//!
//! Heading convention (used everywhere in this crate): heading is measured in
//! degrees **clockwise** from the +x axis and normalized to `[0, 360)`. A left
//! rotation is counterclockwise and therefore decreases the heading; a right
//! rotation increases it. The forward unit vector for heading `h` is
//! `(cos h, -sin h)`.

use serde::{Deserialize, Serialize};

/// A point in the ground plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Euclidean distance to another point.
    pub fn distance(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Robot pose: position in meters plus heading in degrees clockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Degrees clockwise from +x, in `[0, 360)`.
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_heading(heading),
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Forward unit vector for the clockwise heading convention.
    pub fn forward(&self) -> (f64, f64) {
        let rad = self.heading.to_radians();
        (rad.cos(), -rad.sin())
    }

    /// Bearing from this pose to `target`, in degrees, clockwise-positive,
    /// normalized to `(-180, 180]`. A positive bearing means the target lies
    /// to the robot's right.
    pub fn bearing_to(&self, target: &Point2) -> f64 {
        let dx = target.x - self.x;
        let dy = target.y - self.y;
        // Clockwise angle of the target direction from +x, minus our heading.
        let target_cw = -dy.atan2(dx).to_degrees();
        normalize_relative(target_cw - self.heading)
    }
}

/// Wrap a heading into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs.
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Wrap a relative angle into `(-180, 180]`.
pub fn normalize_relative(deg: f64) -> f64 {
    let mut a = deg.rem_euclid(360.0);
    if a > 180.0 {
        a -= 360.0;
    }
    a
}
