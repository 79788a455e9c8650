//! 4-DoF state and the stochastic kinematic prediction.
//!
//! Map frame: `x` grows with the raster column, `y` grows with the raster
//! row (image convention, y down), both in meters. `theta` is the yaw in
//! degrees, counter-clockwise as displayed; an observation taken at yaw
//! `theta` is the map window rotated by `-theta`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::sin_cos_deg;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose4 {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub theta: f64,
}

impl Pose4 {
    pub fn new(x: f64, y: f64, h: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            h,
            theta: normalize_deg(theta),
        }
    }

    pub fn horizontal_distance(&self, other: &Pose4) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_3d(&self, other: &Pose4) -> f64 {
        (self.x - other.x).hypot(self.y - other.y).hypot(self.h - other.h)
    }
}

/// Maps any angle to `[0, 360)`.
pub fn normalize_deg(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Signed smallest difference `a - b` in `[-180, 180)`.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    (a - b + 180.0).rem_euclid(360.0) - 180.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryInput {
    /// (vx, vy, vh) in m/s.
    pub v: [f64; 3],
    /// Yaw rate in deg/s.
    pub omega: f64,
    /// Seconds since the previous frame.
    pub dt: f64,
}

impl OdometryInput {
    pub fn stationary(dt: f64) -> Self {
        Self {
            v: [0.0; 3],
            omega: 0.0,
            dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    pub sigma_xy: f64,
    pub sigma_h: f64,
    pub sigma_theta: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_xy: 15.0,
            sigma_h: 15.0,
            sigma_theta: 5.0,
        }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self {
            sigma_xy: 0.0,
            sigma_h: 0.0,
            sigma_theta: 0.0,
        }
    }
}

/// Frame in which odometry velocity is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityFrame {
    #[default]
    Map,
    /// Rotated into the map frame by the particle's yaw.
    Body,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionModel {
    pub noise: NoiseParams,
    pub h_min: f64,
    pub h_max: f64,
    pub velocity_frame: VelocityFrame,
}

impl Default for MotionModel {
    fn default() -> Self {
        Self {
            noise: NoiseParams::default(),
            h_min: 100.0,
            h_max: 500.0,
            velocity_frame: VelocityFrame::Map,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

/// Propagates one pose by the odometry plus additive Gaussian noise.
/// Velocity moves (x, y, h); yaw rate moves theta only.
pub fn predict<R: Rng + ?Sized>(pose: &Pose4, u: &OdometryInput, model: &MotionModel, rng: &mut R) -> Pose4 {
    let (vx, vy) = match model.velocity_frame {
        VelocityFrame::Map => (u.v[0], u.v[1]),
        VelocityFrame::Body => {
            let (s, c) = sin_cos_deg(pose.theta);
            (u.v[0] * c + u.v[1] * s, -u.v[0] * s + u.v[1] * c)
        }
    };
    // fixed draw order: x, y, h, theta
    let nx = gaussian(rng, model.noise.sigma_xy);
    let ny = gaussian(rng, model.noise.sigma_xy);
    let nh = gaussian(rng, model.noise.sigma_h);
    let nt = gaussian(rng, model.noise.sigma_theta);
    Pose4 {
        x: pose.x + vx * u.dt + nx,
        y: pose.y + vy * u.dt + ny,
        h: (pose.h + u.v[2] * u.dt + nh).clamp(model.h_min, model.h_max),
        theta: normalize_deg(pose.theta + u.omega * u.dt + nt),
    }
}
