//! Synthetic worlds and observation simulation.
//!
//! Worlds use the five classes in [`crate::raster::classes`]. Observations
//! are rendered from the same map they are later matched against, so the
//! only realism gap modelled is label noise (per-pixel flips and
//! mislabelled patches) and odometry noise.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::measurement::{footprint_side, CameraModel};
use crate::motion::{angle_diff_deg, normalize_deg, OdometryInput, Pose4};
use crate::raster::{classes, load_raster, save_raster, sin_cos_deg, SemanticRaster};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldGenerator {
    /// Irregular road grid with building lots in every block.
    Blocks,
    /// Warped Voronoi patches of ground, vegetation and water.
    Blobs,
    /// Patches underneath, road grid on top, buildings in about half the blocks.
    #[default]
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub width_m: f64,
    pub height_m: f64,
    pub meters_per_pixel: f64,
    pub seed: u64,
    #[serde(default)]
    pub generator: WorldGenerator,
    /// Mean size of ground/vegetation/water patches, meters.
    #[serde(default = "default_patch_size")]
    pub patch_size_m: f64,
    /// Share of composite blocks that are built up.
    #[serde(default = "default_urban_fraction")]
    pub urban_fraction: f64,
}

fn default_patch_size() -> f64 {
    60.0
}

fn default_urban_fraction() -> f64 {
    0.5
}

impl WorldSpec {
    pub fn composite(size_m: f64, meters_per_pixel: f64, seed: u64) -> Self {
        Self {
            width_m: size_m,
            height_m: size_m,
            meters_per_pixel,
            seed,
            generator: WorldGenerator::Composite,
            patch_size_m: default_patch_size(),
            urban_fraction: default_urban_fraction(),
        }
    }
}

struct Roads {
    /// (start, end) meter intervals of vertical roads along x.
    vertical: Vec<(f64, f64)>,
    horizontal: Vec<(f64, f64)>,
}

fn road_lines(rng: &mut ChaCha8Rng, extent: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut pos = rng.random_range(20.0..120.0);
    while pos < extent {
        let width = rng.random_range(8.0..16.0);
        out.push((pos, pos + width));
        pos += width + rng.random_range(90.0..230.0);
    }
    out
}

fn in_any(v: f64, intervals: &[(f64, f64)]) -> bool {
    intervals.iter().any(|&(a, b)| v >= a && v < b)
}

/// Interval index containing or preceding `v` (block index between roads).
fn block_of(v: f64, intervals: &[(f64, f64)]) -> usize {
    intervals.iter().take_while(|&&(a, _)| a <= v).count()
}

struct Patches {
    cell: f64,
    cols: usize,
    seeds: Vec<(f64, f64, u8)>,
    warp: [(f64, f64, f64); 4],
}

impl Patches {
    fn new(rng: &mut ChaCha8Rng, w: f64, h: f64, cell: f64) -> Self {
        let cols = (w / cell).ceil() as usize + 1;
        let rows = (h / cell).ceil() as usize + 1;
        let seeds = (0..rows * cols)
            .map(|k| {
                let (cx, cy) = ((k % cols) as f64, (k / cols) as f64);
                let class = match rng.random_range(0..100) {
                    0..=39 => classes::GROUND,
                    40..=74 => classes::VEGETATION,
                    _ => classes::WATER,
                };
                (
                    (cx + rng.random_range(0.1..0.9)) * cell,
                    (cy + rng.random_range(0.1..0.9)) * cell,
                    class,
                )
            })
            .collect();
        let mut warp = [(0.0, 0.0, 0.0); 4];
        for w in &mut warp {
            *w = (
                rng.random_range(10.0..25.0),
                rng.random_range(40.0..120.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
        Self { cell, cols, seeds, warp }
    }

    fn class_at(&self, x: f64, y: f64) -> u8 {
        let [a, b, c, d] = self.warp;
        let wx = x + a.0 * (y / a.1 + a.2).sin() + b.0 * (x / b.1 + b.2).sin();
        let wy = y + c.0 * (x / c.1 + c.2).sin() + d.0 * (y / d.1 + d.2).sin();
        let rows = self.seeds.len() / self.cols;
        let (ci, cj) = ((wx / self.cell).floor() as i64, (wy / self.cell).floor() as i64);
        let mut best = (f64::INFINITY, classes::GROUND);
        for dj in -1..=1 {
            for di in -1..=1 {
                let (i, j) = (ci + di, cj + dj);
                if i < 0 || j < 0 || i >= self.cols as i64 || j >= rows as i64 {
                    continue;
                }
                let (sx, sy, class) = self.seeds[j as usize * self.cols + i as usize];
                let d = (sx - wx).powi(2) + (sy - wy).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
        }
        best.1
    }
}

/// Building footprints inside one block, as meter rectangles.
fn block_buildings(rng: &mut ChaCha8Rng, x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<[f64; 4]> {
    let mut out = Vec::new();
    let mut y = y0 + rng.random_range(4.0..10.0);
    while y < y1 - 10.0 {
        let depth = rng.random_range(12.0f64..40.0).min(y1 - 4.0 - y);
        let mut x = x0 + rng.random_range(4.0..10.0);
        while x < x1 - 10.0 {
            let width = rng.random_range(12.0f64..45.0).min(x1 - 4.0 - x);
            if width >= 6.0 && depth >= 6.0 && rng.random_bool(0.8) {
                out.push([x, x + width, y, y + depth]);
            }
            x += width + rng.random_range(5.0..14.0);
        }
        y += depth + rng.random_range(5.0..14.0);
    }
    out
}

/// Generates a deterministic world raster from its spec.
pub fn generate_world(spec: &WorldSpec) -> Result<SemanticRaster> {
    if !(spec.width_m > 0.0 && spec.height_m > 0.0 && spec.meters_per_pixel > 0.0 && spec.patch_size_m > 0.0) {
        return Err(Error::InvalidInput("world size, resolution and patch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.urban_fraction) {
        return Err(Error::InvalidInput(format!("urban_fraction {}", spec.urban_fraction)));
    }
    let mpp = spec.meters_per_pixel;
    let (wp, hp) = (
        ((spec.width_m / mpp).round() as usize).max(1),
        ((spec.height_m / mpp).round() as usize).max(1),
    );
    let mut rng = stream_rng(spec.seed, Stream::World, 0, 0);
    let patches = Patches::new(&mut rng, spec.width_m, spec.height_m, spec.patch_size_m);
    let roads = Roads {
        vertical: road_lines(&mut rng, spec.width_m),
        horizontal: road_lines(&mut rng, spec.height_m),
    };

    // block edges in meters; blocks are the gaps between roads
    let edges = |lines: &[(f64, f64)], extent: f64| {
        let mut e = vec![(f64::NEG_INFINITY, 0.0)];
        e.extend_from_slice(lines);
        e.push((extent, f64::INFINITY));
        e
    };
    let vx = edges(&roads.vertical, spec.width_m);
    let hy = edges(&roads.horizontal, spec.height_m);
    let blocks_x = vx.len() - 1;
    let blocks_y = hy.len() - 1;
    let mut urban = vec![false; blocks_x * blocks_y];
    let mut buildings: Vec<Vec<[f64; 4]>> = vec![Vec::new(); blocks_x * blocks_y];
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let k = by * blocks_x + bx;
            urban[k] = match spec.generator {
                WorldGenerator::Blocks => true,
                WorldGenerator::Blobs => false,
                WorldGenerator::Composite => rng.random_bool(spec.urban_fraction),
            };
            if urban[k] {
                buildings[k] = block_buildings(&mut rng, vx[bx].1, vx[bx + 1].0, hy[by].1, hy[by + 1].0);
            }
        }
    }

    let with_roads = spec.generator != WorldGenerator::Blobs;
    let mut labels = vec![classes::GROUND; wp * hp];
    for py in 0..hp {
        let y = (py as f64 + 0.5) * mpp;
        let by = block_of(y, &roads.horizontal);
        let on_h_road = in_any(y, &roads.horizontal);
        for px in 0..wp {
            let x = (px as f64 + 0.5) * mpp;
            let label = if with_roads && (on_h_road || in_any(x, &roads.vertical)) {
                classes::ROAD
            } else {
                let k = by * blocks_x + block_of(x, &roads.vertical);
                if with_roads && urban[k] {
                    if buildings[k].iter().any(|b| x >= b[0] && x < b[1] && y >= b[2] && y < b[3]) {
                        classes::BUILDING
                    } else {
                        classes::GROUND
                    }
                } else {
                    patches.class_at(x, y)
                }
            };
            labels[py * wp + px] = label;
        }
    }
    SemanticRaster::new(wp, hp, classes::COUNT, mpp, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub theta: f64,
}

impl Waypoint {
    pub fn pose(&self) -> Pose4 {
        Pose4::new(self.x, self.y, self.h, self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltitudeProfile {
    #[default]
    FixedAltitude,
    VariableAltitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub profile: AltitudeProfile,
    /// Frames per second.
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_frame_rate() -> f64 {
    1.0
}

/// Yaw (deg) that points the camera's +x axis along a map-frame direction.
pub fn heading_to_yaw(dx: f64, dy: f64) -> f64 {
    normalize_deg((-dy).atan2(dx).to_degrees())
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::InvalidInput("trajectory has no waypoints".into()));
        }
        if self.waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidInput("waypoint timestamps must increase strictly".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::InvalidInput(format!("frame_rate {}", self.frame_rate)));
        }
        Ok(())
    }

    /// Polyline through `points` at constant ground speed and altitudes
    /// interpolated linearly from `h_start` to `h_end`, yaw along the path.
    pub fn polyline(points: &[(f64, f64)], speed: f64, h_start: f64, h_end: f64, frame_rate: f64) -> Self {
        let mut t = 0.0;
        let mut dist = vec![0.0];
        for w in points.windows(2) {
            t += (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            dist.push(t);
        }
        let total = t.max(f64::MIN_POSITIVE);
        let waypoints = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let seg = if i + 1 < points.len() { i } else { i - 1 };
                let (dx, dy) = (points[seg + 1].0 - points[seg].0, points[seg + 1].1 - points[seg].1);
                Waypoint {
                    t: dist[i] / speed,
                    x,
                    y,
                    h: h_start + (h_end - h_start) * dist[i] / total,
                    theta: heading_to_yaw(dx, dy),
                }
            })
            .collect();
        let profile = if h_start == h_end {
            AltitudeProfile::FixedAltitude
        } else {
            AltitudeProfile::VariableAltitude
        };
        Self {
            waypoints,
            profile,
            frame_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().unwrap().t - self.waypoints[0].t
    }

    /// Linear interpolation; yaw follows the shorter arc.
    pub fn sample(&self, t: f64) -> Pose4 {
        let w = &self.waypoints;
        if t <= w[0].t {
            return w[0].pose();
        }
        for pair in w.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if t <= b.t {
                let s = (t - a.t) / (b.t - a.t);
                return Pose4::new(
                    a.x + s * (b.x - a.x),
                    a.y + s * (b.y - a.y),
                    a.h + s * (b.h - a.h),
                    a.theta + s * angle_diff_deg(b.theta, a.theta),
                );
            }
        }
        w.last().unwrap().pose()
    }

    /// Frame timestamps at `frame_rate`, inclusive of both ends.
    pub fn frame_times(&self) -> Vec<f64> {
        let t0 = self.waypoints[0].t;
        let n = (self.duration() * self.frame_rate + 1e-9).floor() as usize;
        (0..=n).map(|k| t0 + k as f64 / self.frame_rate).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoiseSpec {
    /// Probability that a pixel is relabelled as another class.
    pub label_flip_rate: f64,
    pub patch_count: usize,
    /// Patch side in observation pixels.
    pub patch_size: usize,
    pub odo_sigma_v: f64,
    pub odo_sigma_omega: f64,
}

impl SensorNoiseSpec {
    pub fn none() -> Self {
        Self {
            label_flip_rate: 0.0,
            patch_count: 0,
            patch_size: 0,
            odo_sigma_v: 0.0,
            odo_sigma_omega: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_flip_rate) {
            return Err(Error::InvalidInput(format!("label_flip_rate {}", self.label_flip_rate)));
        }
        if !(self.odo_sigma_v >= 0.0 && self.odo_sigma_omega >= 0.0) {
            return Err(Error::InvalidInput("odometry sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for SensorNoiseSpec {
    fn default() -> Self {
        Self {
            label_flip_rate: 0.05,
            patch_count: 0,
            patch_size: 0,
            odo_sigma_v: 0.5,
            odo_sigma_omega: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    pub t: f64,
    pub obs: SemanticRaster,
    pub odo: OdometryInput,
    /// Ground truth; evaluation only.
    pub gt: Pose4,
}

impl ObservationFrame {
    /// The filter-facing part of the frame.
    pub fn observation(&self) -> crate::filter::Observation<'_> {
        crate::filter::Observation {
            image: &self.obs,
            odometry: self.odo,
        }
    }
}

/// Noise-free nadir view of `world` from `gt`, `view_side`² pixels.
pub fn render_view(world: &SemanticRaster, gt: &Pose4, cam: &CameraModel) -> SemanticRaster {
    let mpp = world.meters_per_pixel();
    let v = cam.view_side;
    let c = ((footprint_side(gt.h, cam) / mpp).round() as i64).max(1);
    let (cx, cy) = ((gt.x / mpp).floor() as i64, (gt.y / mpp).floor() as i64);
    let (ox, oy) = (cx - c / 2, cy - c / 2);
    let (sin, cos) = sin_cos_deg(gt.theta);
    let mut labels = Vec::with_capacity(v * v);
    if sin == 0.0 && cos == 1.0 {
        for j in 0..v as i64 {
            let my = oy + ((2 * j + 1) * c) / (2 * v as i64);
            for i in 0..v as i64 {
                let mx = ox + ((2 * i + 1) * c) / (2 * v as i64);
                labels.push(world.get_or_oom(mx, my));
            }
        }
    } else {
        let half = c as f64 / 2.0;
        let (fx, fy) = (ox as f64 + half, oy as f64 + half);
        let scale = c as f64 / (2 * v) as f64;
        for j in 0..v {
            let vv = (2 * j + 1) as f64 * scale - half;
            for i in 0..v {
                let u = (2 * i + 1) as f64 * scale - half;
                let mx = (fx + u * cos + vv * sin).floor() as i64;
                let my = (fy - u * sin + vv * cos).floor() as i64;
                labels.push(world.get_or_oom(mx, my));
            }
        }
    }
    SemanticRaster::new(v, v, world.class_count(), 0.0, labels).expect("labels within range")
}

/// Applies per-pixel label flips and random mislabelled patches in place.
/// Out-of-map pixels are left alone.
pub fn corrupt_labels<R: Rng>(obs: &mut SemanticRaster, noise: &SensorNoiseSpec, rng: &mut R) {
    let classes = obs.class_count() as u8;
    let oom = obs.out_of_map();
    if classes > 1 && noise.label_flip_rate > 0.0 {
        for l in obs.labels_mut() {
            if *l != oom && rng.random_bool(noise.label_flip_rate) {
                // uniform over the other classes
                let r = rng.random_range(0..classes - 1);
                *l = if r >= *l { r + 1 } else { r };
            }
        }
    }
    let (w, h) = (obs.width(), obs.height());
    if noise.patch_size > 0 {
        for _ in 0..noise.patch_count {
            let side = noise.patch_size.min(w).min(h);
            let x0 = rng.random_range(0..=w - side);
            let y0 = rng.random_range(0..=h - side);
            let label = rng.random_range(0..classes);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    if obs.get(x, y) != oom {
                        obs.set(x, y, label);
                    }
                }
            }
        }
    }
}

/// Nadir observation at `gt` with sensor noise.
pub fn render_observation(
    world: &SemanticRaster,
    gt: &Pose4,
    cam: &CameraModel,
    noise: &SensorNoiseSpec,
    seed: u64,
) -> SemanticRaster {
    let mut obs = render_view(world, gt, cam);
    let mut rng = stream_rng(seed, Stream::Render, 0, 0);
    corrupt_labels(&mut obs, noise, &mut rng);
    obs
}

/// Renders every frame of a trajectory with noisy odometry attached.
pub fn run_scenario(
    world: &SemanticRaster,
    trajectory: &TrajectorySpec,
    noise: &SensorNoiseSpec,
    cam: &CameraModel,
    seed: u64,
) -> Result<Vec<ObservationFrame>> {
    trajectory.validate()?;
    noise.validate()?;
    let (w, h) = world.extent_m();
    let times = trajectory.frame_times();
    let poses: Vec<Pose4> = times.iter().map(|&t| trajectory.sample(t)).collect();
    for (&t, p) in times.iter().zip(&poses) {
        if !(0.0..=w).contains(&p.x) || !(0.0..=h).contains(&p.y) {
            return Err(Error::TrajectoryOutOfBounds { t, x: p.x, y: p.y });
        }
    }
    let gauss = |sigma: f64, rng: &mut ChaCha8Rng| {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        } else {
            0.0
        }
    };
    let nominal_dt = 1.0 / trajectory.frame_rate;
    let mut frames = Vec::with_capacity(times.len());
    for (k, (&t, gt)) in times.iter().zip(&poses).enumerate() {
        let mut rng = stream_rng(seed, Stream::Odometry, k as u64, 0);
        let odo = if k == 0 {
            OdometryInput::stationary(nominal_dt)
        } else {
            let prev = &poses[k - 1];
            let dt = t - times[k - 1];
            OdometryInput {
                v: [
                    (gt.x - prev.x) / dt + gauss(noise.odo_sigma_v, &mut rng),
                    (gt.y - prev.y) / dt + gauss(noise.odo_sigma_v, &mut rng),
                    (gt.h - prev.h) / dt + gauss(noise.odo_sigma_v, &mut rng),
                ],
                omega: angle_diff_deg(gt.theta, prev.theta) / dt + gauss(noise.odo_sigma_omega, &mut rng),
                dt,
            }
        };
        let obs = render_observation(world, gt, cam, noise, crate::rng::stream_seed(seed, Stream::Render, k as u64, 0));
        frames.push(ObservationFrame { t, obs, odo, gt: *gt });
    }
    Ok(frames)
}

/// Writes `frame_NNNNN.smr` rasters plus `frames.csv`
/// (`t, vx, vy, vh, omega, gt_x, gt_y, gt_h, gt_theta`).
pub fn save_frames(dir: impl AsRef<Path>, frames: &[ObservationFrame]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("frames.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Csv {
        path: csv_path.clone(),
        source: e,
    })?;
    let csv_err = |e| Error::Csv {
        path: csv_path.clone(),
        source: e,
    };
    w.write_record(["t", "vx", "vy", "vh", "omega", "gt_x", "gt_y", "gt_h", "gt_theta"])
        .map_err(csv_err)?;
    for (k, f) in frames.iter().enumerate() {
        save_raster(dir.join(format!("frame_{k:05}.smr")), &f.obs)?;
        let row = [
            f.t, f.odo.v[0], f.odo.v[1], f.odo.v[2], f.odo.omega, f.gt.x, f.gt.y, f.gt.h, f.gt.theta,
        ];
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

#[derive(Debug, Deserialize)]
struct FrameRow {
    t: f64,
    vx: f64,
    vy: f64,
    vh: f64,
    omega: f64,
    gt_x: f64,
    gt_y: f64,
    gt_h: f64,
    gt_theta: f64,
}

/// Reads a directory written by [`save_frames`]. `dt` is recovered from
/// consecutive timestamps; the first frame reuses the second interval.
pub fn load_frames(dir: impl AsRef<Path>) -> Result<Vec<ObservationFrame>> {
    let dir = dir.as_ref();
    let csv_path = dir.join("frames.csv");
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::Csv {
        path: csv_path.clone(),
        source: e,
    })?;
    let rows: Vec<FrameRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Csv {
            path: csv_path.clone(),
            source: e,
        })?;
    let mut frames = Vec::with_capacity(rows.len());
    for (k, r) in rows.iter().enumerate() {
        let dt = if k > 0 {
            r.t - rows[k - 1].t
        } else if rows.len() > 1 {
            rows[1].t - r.t
        } else {
            1.0
        };
        frames.push(ObservationFrame {
            t: r.t,
            obs: load_raster(dir.join(format!("frame_{k:05}.smr")))?,
            odo: OdometryInput {
                v: [r.vx, r.vy, r.vh],
                omega: r.omega,
                dt,
            },
            gt: Pose4::new(r.gt_x, r.gt_y, r.gt_h, r.gt_theta),
        });
    }
    Ok(frames)
}
