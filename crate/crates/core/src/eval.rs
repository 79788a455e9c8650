//! Scenario runner, metrics and report export.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{build_cdf, build_swdm, CdfProfile, CenterDistanceField, DistanceFieldStack};
use crate::estimate::{extract_estimate_gated, DbscanParams, DEFAULT_MIN_INLIER_WEIGHT};
use crate::filter::{
    center_class, initialize, step, InitStrategy, MapModel, ParticleSet, StateBounds, StepConfig, StepInfo,
};
use crate::measurement::{CameraModel, SemanticWeights};
use crate::motion::{angle_diff_deg, MotionModel, Pose4};
use crate::raster::{load_raster, SemanticRaster};
use crate::sim::{generate_world, load_frames, run_scenario, ObservationFrame, SensorNoiseSpec, TrajectorySpec, WorldSpec};
use crate::{Error, Result};

/// Initialisation as written in a config file. `center_semantic` without a
/// class takes it from the first observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitConfig {
    #[default]
    FullSpace,
    Layered {
        #[serde(default = "InitStrategy::default_layers")]
        layer_heights: Vec<f64>,
    },
    CenterSemantic {
        #[serde(default)]
        center_class: Option<u8>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub particles: usize,
    pub bin_count: usize,
    pub init: InitConfig,
    /// Initialisation region; the whole map at the motion altitude range when absent.
    pub init_bounds: Option<StateBounds>,
    pub motion: MotionModel,
    /// Per-class weights; ground 0 and others 1 when absent.
    pub alpha: Option<Vec<f64>>,
    pub gamma: f64,
    pub d0: f64,
    pub cdf_profile: CdfProfile,
    pub dbscan: DbscanParams,
    /// Positional covariance trace (m²) below which an estimate counts as converged.
    pub cov_threshold: f64,
    /// Share of weight that must lie in DBSCAN clusters for convergence.
    pub min_inlier_weight: f64,
    pub ess_threshold_fraction: f64,
    /// Integer factor by which the reference map is downsampled before use.
    pub map_downsample: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particles: 5000,
            bin_count: 100,
            init: InitConfig::FullSpace,
            init_bounds: None,
            motion: MotionModel::default(),
            alpha: None,
            gamma: 10.0,
            d0: 1.0,
            cdf_profile: CdfProfile::Linear,
            dbscan: DbscanParams::default(),
            cov_threshold: 100.0,
            min_inlier_weight: DEFAULT_MIN_INLIER_WEIGHT,
            ess_threshold_fraction: 0.5,
            map_downsample: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "one")]
    pub trials: usize,
    /// Reference map file; alternative to `world`.
    #[serde(default)]
    pub map: Option<PathBuf>,
    #[serde(default)]
    pub world: Option<WorldSpec>,
    /// Recorded frame directory; alternative to `trajectory`.
    #[serde(default)]
    pub frames_dir: Option<PathBuf>,
    #[serde(default)]
    pub trajectory: Option<TrajectorySpec>,
    #[serde(default)]
    pub noise: SensorNoiseSpec,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.map, &mut cfg.frames_dir, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.map, &self.world) {
            (Some(_), Some(_)) => return bad("give either `map` or `world`, not both".into()),
            (None, None) => return bad("one of `map` or `world` is required".into()),
            (Some(p), None) if !p.is_file() => return bad(format!("map file {} not found", p.display())),
            _ => {}
        }
        match (&self.frames_dir, &self.trajectory) {
            (Some(_), Some(_)) => return bad("give either `frames_dir` or `trajectory`, not both".into()),
            (None, None) => return bad("one of `frames_dir` or `trajectory` is required".into()),
            (Some(d), None) if !d.join("frames.csv").is_file() => {
                return bad(format!("{} has no frames.csv", d.display()))
            }
            (None, Some(t)) => t.validate().map_err(|e| Error::Config(e.to_string()))?,
            _ => {}
        }
        let f = &self.filter;
        if self.trials == 0 || f.particles == 0 || f.bin_count == 0 || f.map_downsample == 0 {
            return bad("trials, particles, bin_count and map_downsample must be positive".into());
        }
        if !(0.0..=1.0).contains(&f.min_inlier_weight) {
            return bad(format!("min_inlier_weight {}", f.min_inlier_weight));
        }
        if !(f.ess_threshold_fraction >= 0.0 && f.ess_threshold_fraction <= 1.0) {
            return bad(format!("ess_threshold_fraction {}", f.ess_threshold_fraction));
        }
        if !(f.cov_threshold > 0.0 && f.dbscan.eps > 0.0 && f.dbscan.min_pts > 0) {
            return bad("cov_threshold, dbscan.eps and dbscan.min_pts must be positive".into());
        }
        if !(f.motion.h_min > 0.0 && f.motion.h_max >= f.motion.h_min) {
            return bad("motion altitude range must satisfy 0 < h_min <= h_max".into());
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.camera.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Shared, seed-independent inputs of a run.
pub struct Prepared {
    /// Map observations are rendered from.
    pub world: SemanticRaster,
    /// Map the filter matches against.
    pub map: SemanticRaster,
    pub swdm: DistanceFieldStack,
    pub cdf: CenterDistanceField,
    pub weights: SemanticWeights,
    pub recorded: Option<Vec<ObservationFrame>>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let world = match (&cfg.map, &cfg.world) {
        (Some(p), _) => load_raster(p)?,
        (None, Some(spec)) => generate_world(spec)?,
        _ => unreachable!("validated"),
    };
    let k = cfg.filter.map_downsample;
    let map = if k > 1 {
        world.resize_nearest_to((world.width() / k).max(1), (world.height() / k).max(1))
    } else {
        world.clone()
    };
    let weights = match &cfg.filter.alpha {
        Some(alpha) => SemanticWeights {
            alpha: alpha.clone(),
            gamma: cfg.filter.gamma,
            d0: cfg.filter.d0,
        },
        None => SemanticWeights {
            d0: cfg.filter.d0,
            ..SemanticWeights::uniform(map.class_count(), cfg.filter.gamma)
        },
    };
    weights.validate().map_err(|e| Error::Config(e.to_string()))?;
    let recorded = match &cfg.frames_dir {
        Some(d) => Some(load_frames(d)?),
        None => None,
    };
    Ok(Prepared {
        swdm: build_swdm(&map),
        cdf: build_cdf(cfg.camera.view_side, cfg.filter.cdf_profile),
        world,
        map,
        weights,
        recorded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub t: f64,
    pub estimate: Pose4,
    pub gt: Pose4,
    /// Horizontal error.
    pub error_m: f64,
    pub error_3d_m: f64,
    pub error_px: f64,
    pub alt_error_m: f64,
    pub yaw_error_deg: f64,
    pub converged: bool,
    /// Frame lies at or after the first converged estimate.
    pub post_fit: bool,
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub n_outliers: usize,
    pub inlier_spread_m2: f64,
    /// Variance of x, y, h and yaw within the selected cluster.
    pub cluster_var: [f64; 4],
    pub ess: f64,
    pub resampled: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub rmse_m: f64,
    pub median_m: f64,
    pub mean_m: f64,
    pub recall10_pct: f64,
    pub emr_permille: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub frames: usize,
    pub map_dim_m: f64,
    pub fitting_frame: Option<usize>,
    pub fitting_time_s: Option<f64>,
    pub finish_time_s: f64,
    /// Frames from the first converged estimate onward.
    pub post: Option<Metrics>,
    pub pre: Option<Metrics>,
    pub all: Metrics,
    pub post_median_alt_error_m: Option<f64>,
    pub post_mean_spread_m2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub summary: RunSummary,
    pub frames: Vec<FrameRecord>,
}

impl RunReport {
    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.summary.finish_time_s = 0.0;
        r.summary.fitting_time_s = r.summary.fitting_time_s.map(|_| 0.0);
        for f in &mut r.frames {
            f.wall_ms = 0.0;
        }
        r
    }
}

/// Lower-interpolated median of a non-empty slice.
pub fn median_lower(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[(v.len() - 1) / 2]
}

/// RMSE, median, mean, Recall@10 and error-to-map ratio; `None` when empty.
pub fn compute_metrics(errors: &[f64], map_dim_m: f64) -> Option<Metrics> {
    if errors.is_empty() {
        return None;
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    Some(Metrics {
        n: errors.len(),
        rmse_m: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        median_m: median_lower(errors),
        mean_m: mean,
        recall10_pct: 100.0 * errors.iter().filter(|&&e| e < 10.0).count() as f64 / n,
        emr_permille: 1000.0 * mean / map_dim_m,
    })
}

/// One filter run with observation and filter randomness keyed by `seed`.
pub fn run_trial(cfg: &RunConfig, prep: &Prepared, seed: u64) -> Result<RunReport> {
    run_trial_observed(cfg, prep, seed, &mut |_, _, _| {})
}

/// [`run_trial`] that hands the particle set and step diagnostics to
/// `observe` after every frame.
pub fn run_trial_observed(
    cfg: &RunConfig,
    prep: &Prepared,
    seed: u64,
    observe: &mut dyn FnMut(usize, &ParticleSet, &StepInfo),
) -> Result<RunReport> {
    let start = Instant::now();
    let simulated;
    let frames = match &prep.recorded {
        Some(f) => f,
        None => {
            let traj = cfg.trajectory.as_ref().expect("validated");
            simulated = run_scenario(&prep.world, traj, &cfg.noise, &cfg.camera, seed)?;
            &simulated
        }
    };
    if frames.is_empty() {
        return Err(Error::InvalidInput("scenario produced no frames".into()));
    }
    let f = &cfg.filter;
    let bounds = f.init_bounds.unwrap_or_else(|| StateBounds {
        h: (f.motion.h_min, f.motion.h_max),
        ..StateBounds::for_map(&prep.map)
    });
    let strategy = match &f.init {
        InitConfig::FullSpace => InitStrategy::FullSpace,
        InitConfig::Layered { layer_heights } => InitStrategy::Layered {
            layer_heights: layer_heights.clone(),
        },
        InitConfig::CenterSemantic { center_class: c } => InitStrategy::CenterSemantic {
            center_class: c.unwrap_or_else(|| center_class(&frames[0].obs)),
        },
    };
    let model = MapModel {
        map: &prep.map,
        swdm: &prep.swdm,
        cdf: &prep.cdf,
        weights: &prep.weights,
        camera: &cfg.camera,
        bin_count: f.bin_count,
    };
    let step_cfg = StepConfig {
        ess_threshold_fraction: f.ess_threshold_fraction,
    };
    let mut ps = initialize(f.particles, &bounds, &strategy, Some(&prep.map), seed)?;
    let mpp = prep.map.meters_per_pixel();
    let (w_m, h_m) = prep.map.extent_m();
    let map_dim = w_m.max(h_m);

    let mut records = Vec::with_capacity(frames.len());
    let mut fitting: Option<(usize, f64)> = None;
    for (k, frame) in frames.iter().enumerate() {
        let t0 = Instant::now();
        let info = step(&mut ps, &frame.observation(), &model, &f.motion, &step_cfg)?;
        observe(k, &ps, &info);
        let est = extract_estimate_gated(&ps, &f.dbscan, f.cov_threshold, f.min_inlier_weight);
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        if est.converged && fitting.is_none() {
            fitting = Some((k, start.elapsed().as_secs_f64()));
        }
        let error_m = est.mean.horizontal_distance(&frame.gt);
        records.push(FrameRecord {
            frame: k,
            t: frame.t,
            estimate: est.mean,
            gt: frame.gt,
            error_m,
            error_3d_m: est.mean.distance_3d(&frame.gt),
            error_px: error_m / mpp,
            alt_error_m: (est.mean.h - frame.gt.h).abs(),
            yaw_error_deg: angle_diff_deg(est.mean.theta, frame.gt.theta).abs(),
            converged: est.converged,
            post_fit: fitting.is_some(),
            n_clusters: est.n_clusters,
            cluster_size: est.cluster_size,
            n_outliers: est.n_outliers,
            inlier_spread_m2: est.inlier_spread,
            cluster_var: [0, 1, 2, 3].map(|i| est.covariance[i][i]),
            ess: info.ess_before_resample,
            resampled: info.resampled,
            wall_ms,
        });
    }

    let errors = |post: bool| -> Vec<f64> {
        records.iter().filter(|r| r.post_fit == post).map(|r| r.error_m).collect()
    };
    let post_recs: Vec<&FrameRecord> = records.iter().filter(|r| r.post_fit).collect();
    let alt: Vec<f64> = post_recs.iter().map(|r| r.alt_error_m).collect();
    let all: Vec<f64> = records.iter().map(|r| r.error_m).collect();
    let summary = RunSummary {
        seed,
        frames: records.len(),
        map_dim_m: map_dim,
        fitting_frame: fitting.map(|f| f.0),
        fitting_time_s: fitting.map(|f| f.1),
        finish_time_s: start.elapsed().as_secs_f64(),
        post: compute_metrics(&errors(true), map_dim),
        pre: compute_metrics(&errors(false), map_dim),
        all: compute_metrics(&all, map_dim).expect("non-empty"),
        post_median_alt_error_m: (!alt.is_empty()).then(|| median_lower(&alt)),
        post_mean_spread_m2: (!post_recs.is_empty())
            .then(|| post_recs.iter().map(|r| r.inlier_spread_m2).sum::<f64>() / post_recs.len() as f64),
    };
    Ok(RunReport {
        summary,
        frames: records,
    })
}

/// Single run at the configured seed.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let prep = prepare(cfg)?;
    run_trial(cfg, &prep, cfg.seed)
}

/// `cfg.trials` independent runs with seeds `seed + i`, in parallel.
pub fn run_batch(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    let prep = prepare(cfg)?;
    (0..cfg.trials as u64)
        .into_par_iter()
        .map(|i| run_trial(cfg, &prep, cfg.seed.wrapping_add(i)))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const FRAME_COLUMNS: [&str; 23] = [
    "frame", "t", "error_m", "error_3d_m", "error_px", "alt_error_m", "yaw_error_deg", "converged", "window",
    "n_clusters", "cluster_size", "n_outliers", "inlier_spread_m2", "var_x", "var_y", "var_h", "var_theta", "ess",
    "resampled", "wall_ms", "est_x", "est_y", "est_h",
];

/// Writes `summary.json`, `frames.csv` and `trajectory.csv` into `dir`.
pub fn export_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&report.summary).expect("summary serialises");
    fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))?;

    write_rows(
        &dir.join("frames.csv"),
        &FRAME_COLUMNS,
        report.frames.iter().map(|r| {
            vec![
                r.frame.to_string(),
                r.t.to_string(),
                r.error_m.to_string(),
                r.error_3d_m.to_string(),
                r.error_px.to_string(),
                r.alt_error_m.to_string(),
                r.yaw_error_deg.to_string(),
                r.converged.to_string(),
                if r.post_fit { "post" } else { "pre" }.to_string(),
                r.n_clusters.to_string(),
                r.cluster_size.to_string(),
                r.n_outliers.to_string(),
                r.inlier_spread_m2.to_string(),
                r.cluster_var[0].to_string(),
                r.cluster_var[1].to_string(),
                r.cluster_var[2].to_string(),
                r.cluster_var[3].to_string(),
                r.ess.to_string(),
                r.resampled.to_string(),
                r.wall_ms.to_string(),
                r.estimate.x.to_string(),
                r.estimate.y.to_string(),
                r.estimate.h.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join("trajectory.csv"),
        &["t", "gt_x", "gt_y", "gt_h", "gt_theta", "est_x", "est_y", "est_h", "est_theta"],
        report.frames.iter().map(|r| {
            [r.t, r.gt.x, r.gt.y, r.gt.h, r.gt.theta, r.estimate.x, r.estimate.y, r.estimate.h, r.estimate.theta]
                .iter()
                .map(f64::to_string)
                .collect()
        }),
    )
}

const TRIAL_COLUMNS: [&str; 10] = [
    "trial", "seed", "fitting_frame", "fitting_time_s", "finish_time_s", "post_rmse_m", "post_median_m",
    "post_recall10_pct", "post_emr_permille", "all_rmse_m",
];

fn trial_values(r: &RunSummary) -> [Option<f64>; 8] {
    [
        r.fitting_frame.map(|f| f as f64),
        r.fitting_time_s,
        Some(r.finish_time_s),
        r.post.map(|m| m.rmse_m),
        r.post.map(|m| m.median_m),
        r.post.map(|m| m.recall10_pct),
        r.post.map(|m| m.emr_permille),
        Some(r.all.rmse_m),
    ]
}

/// Per-trial reports in `trial_NNN/` plus `trials.csv` with one row per
/// trial and aggregate `mean` and `best` rows. `best` is the lowest
/// post-fit RMSE; means skip trials where a value is not applicable.
pub fn export_batch(reports: &[RunReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, r) in reports.iter().enumerate() {
        export_report(r, dir.join(format!("trial_{i:03}")))?;
    }
    let mut rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![i.to_string(), r.summary.seed.to_string()];
            row.extend(trial_values(&r.summary).into_iter().map(opt));
            row
        })
        .collect();
    let columns: Vec<[Option<f64>; 8]> = reports.iter().map(|r| trial_values(&r.summary)).collect();
    let mut mean_row = vec!["mean".to_string(), "NA".to_string()];
    for c in 0..8 {
        let vals: Vec<f64> = columns.iter().filter_map(|v| v[c]).collect();
        mean_row.push(opt((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)));
    }
    rows.push(mean_row);
    let best = reports
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.summary.post.map(|m| (i, m.rmse_m)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let mut best_row = vec!["best".to_string()];
    match best {
        Some((i, _)) => {
            best_row.push(reports[i].summary.seed.to_string());
            best_row.extend(columns[i].into_iter().map(opt));
        }
        None => best_row.extend(std::iter::repeat_n("NA".to_string(), 9)),
    }
    rows.push(best_row);
    write_rows(&dir.join("trials.csv"), &TRIAL_COLUMNS, rows)
}

/// Which rows of a `frames.csv` to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Pre,
    Post,
    All,
}

/// Reads `error_m` from a `frames.csv`, filtered by the `window` column
/// when present.
pub fn read_errors(path: impl AsRef<Path>, window: Window) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let err_col = col("error_m").ok_or_else(|| Error::MalformedFile(format!("{}: no error_m column", path.display())))?;
    let win_col = col("window");
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let keep = match (window, win_col) {
            (Window::All, _) | (_, None) => true,
            (Window::Pre, Some(c)) => &rec[c] == "pre",
            (Window::Post, Some(c)) => &rec[c] == "post",
        };
        if keep {
            let v: f64 = rec[err_col]
                .trim()
                .parse()
                .map_err(|_| Error::MalformedFile(format!("{}: bad error_m {:?}", path.display(), &rec[err_col])))?;
            out.push(v);
        }
    }
    Ok(out)
}
