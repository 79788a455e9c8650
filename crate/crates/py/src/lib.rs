//! Python bindings: rasters, distance maps, world and observation
//! simulation, the particle filter and the scenario runner.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use swapf::distance::{build_cdf, build_swdm, CenterDistanceField, DistanceFieldStack};
use swapf::estimate::extract_estimate_gated;
use swapf::eval::{self, FilterConfig, InitConfig, RunConfig};
use swapf::filter::{center_class, initialize, step, InitStrategy, MapModel, Observation, ParticleSet, StateBounds, StepConfig};
use swapf::measurement::{CameraModel, SemanticWeights};
use swapf::motion::{OdometryInput, Pose4};
use swapf::raster::{load_raster, save_raster, SemanticRaster};
use swapf::sim::{self, SensorNoiseSpec, WorldGenerator, WorldSpec};
use swapf::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Serialisable value to a Python object via JSON.
fn to_object<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "Raster", module = "swapf")]
struct PyRaster {
    inner: SemanticRaster,
}

#[pymethods]
impl PyRaster {
    #[new]
    #[pyo3(signature = (width, height, class_count, labels, meters_per_pixel = 1.0))]
    fn new(width: usize, height: usize, class_count: u16, labels: Vec<u8>, meters_per_pixel: f64) -> PyResult<Self> {
        let inner = SemanticRaster::new(width, height, class_count, meters_per_pixel, labels).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_raster(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_raster(path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn class_count(&self) -> u16 {
        self.inner.class_count()
    }

    #[getter]
    fn meters_per_pixel(&self) -> f64 {
        self.inner.meters_per_pixel()
    }

    /// Row-major labels as bytes.
    fn labels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.labels())
    }

    fn get(&self, x: usize, y: usize) -> PyResult<u8> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside the raster")));
        }
        Ok(self.inner.get(x, y))
    }

    fn histogram(&self) -> Vec<usize> {
        self.inner.histogram()
    }

    fn __repr__(&self) -> String {
        format!(
            "Raster({}x{}, classes={}, mpp={})",
            self.inner.width(),
            self.inner.height(),
            self.inner.class_count(),
            self.inner.meters_per_pixel()
        )
    }
}

#[pyclass(name = "DistanceFields", module = "swapf")]
struct PyDistanceFields {
    inner: DistanceFieldStack,
}

#[pymethods]
impl PyDistanceFields {
    #[staticmethod]
    fn build(map: &PyRaster) -> Self {
        Self {
            inner: build_swdm(&map.inner),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DistanceFieldStack::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn d_max(&self) -> f32 {
        self.inner.d_max()
    }

    /// Distance in pixels from `(x, y)` to the nearest pixel of `class`.
    fn distance(&self, class: u8, x: i64, y: i64) -> PyResult<f32> {
        if class as u16 >= self.inner.class_count() {
            return Err(PyValueError::new_err(format!("class {class} out of range")));
        }
        Ok(self.inner.sample_distance(class, x, y))
    }

    fn layer(&self, class: u8) -> PyResult<Vec<f32>> {
        if class as u16 >= self.inner.class_count() {
            return Err(PyValueError::new_err(format!("class {class} out of range")));
        }
        Ok(self.inner.layer(class).to_vec())
    }
}

#[pyfunction]
#[pyo3(signature = (width_m, height_m, meters_per_pixel = 1.0, seed = 0, generator = "composite"))]
fn generate_world(width_m: f64, height_m: f64, meters_per_pixel: f64, seed: u64, generator: &str) -> PyResult<PyRaster> {
    let generator = match generator {
        "composite" => WorldGenerator::Composite,
        "blocks" => WorldGenerator::Blocks,
        "blobs" => WorldGenerator::Blobs,
        other => return Err(PyValueError::new_err(format!("unknown generator {other:?}"))),
    };
    let spec = WorldSpec {
        width_m,
        height_m,
        generator,
        ..WorldSpec::composite(width_m, meters_per_pixel, seed)
    };
    Ok(PyRaster {
        inner: sim::generate_world(&spec).map_err(to_py)?,
    })
}

/// Nadir observation of `world` at pose `(x, y, h, theta)`.
#[pyfunction]
#[pyo3(signature = (world, x, y, h, theta, fov_deg = 60.0, view_side = 64, label_flip_rate = 0.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn render_observation(
    world: &PyRaster,
    x: f64,
    y: f64,
    h: f64,
    theta: f64,
    fov_deg: f64,
    view_side: usize,
    label_flip_rate: f64,
    seed: u64,
) -> PyResult<PyRaster> {
    let cam = CameraModel { fov_deg, view_side };
    cam.validate().map_err(to_py)?;
    let noise = SensorNoiseSpec {
        label_flip_rate,
        ..SensorNoiseSpec::none()
    };
    noise.validate().map_err(to_py)?;
    Ok(PyRaster {
        inner: sim::render_observation(&world.inner, &Pose4::new(x, y, h, theta), &cam, &noise, seed),
    })
}

/// Particle filter over a fixed map. `config` is the TOML `[filter]` table
/// of a run config.
#[pyclass(name = "ParticleFilter", module = "swapf")]
struct PyParticleFilter {
    map: SemanticRaster,
    swdm: DistanceFieldStack,
    cdf: CenterDistanceField,
    weights: SemanticWeights,
    camera: CameraModel,
    cfg: FilterConfig,
    seed: u64,
    /// Created on the first step when centre-semantic init has to read it
    /// from the observation.
    ps: Option<ParticleSet>,
}

impl PyParticleFilter {
    fn init(&self, first: Option<&SemanticRaster>) -> PyResult<ParticleSet> {
        let f = &self.cfg;
        let bounds = f.init_bounds.unwrap_or(StateBounds {
            h: (f.motion.h_min, f.motion.h_max),
            ..StateBounds::for_map(&self.map)
        });
        let strategy = match &f.init {
            InitConfig::FullSpace => InitStrategy::FullSpace,
            InitConfig::Layered { layer_heights } => InitStrategy::Layered {
                layer_heights: layer_heights.clone(),
            },
            InitConfig::CenterSemantic { center_class: c } => InitStrategy::CenterSemantic {
                center_class: c.or(first.map(center_class)).expect("checked by caller"),
            },
        };
        initialize(f.particles, &bounds, &strategy, Some(&self.map), self.seed).map_err(to_py)
    }
}

#[pymethods]
impl PyParticleFilter {
    #[new]
    #[pyo3(signature = (map, seed = 0, config = "", fov_deg = 60.0, view_side = 64))]
    fn new(map: &PyRaster, seed: u64, config: &str, fov_deg: f64, view_side: usize) -> PyResult<Self> {
        let cfg: FilterConfig = toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let camera = CameraModel { fov_deg, view_side };
        camera.validate().map_err(to_py)?;
        let k = cfg.map_downsample.max(1);
        let map = if k > 1 {
            let m = &map.inner;
            m.resize_nearest_to((m.width() / k).max(1), (m.height() / k).max(1))
        } else {
            map.inner.clone()
        };
        let weights = SemanticWeights {
            alpha: cfg.alpha.clone().unwrap_or_else(|| SemanticWeights::uniform(map.class_count(), 0.0).alpha),
            gamma: cfg.gamma,
            d0: cfg.d0,
        };
        weights.validate().map_err(to_py)?;
        let mut pf = Self {
            swdm: build_swdm(&map),
            cdf: build_cdf(view_side, cfg.cdf_profile),
            map,
            weights,
            camera,
            cfg,
            seed,
            ps: None,
        };
        if !matches!(pf.cfg.init, InitConfig::CenterSemantic { center_class: None }) {
            pf.ps = Some(pf.init(None)?);
        }
        Ok(pf)
    }

    /// One predict/weigh/resample step. `odometry` is `(vx, vy, vh, omega, dt)`
    /// in m/s, deg/s and seconds.
    fn step(&mut self, py: Python<'_>, observation: &PyRaster, odometry: (f64, f64, f64, f64, f64)) -> PyResult<Py<PyAny>> {
        if self.ps.is_none() {
            self.ps = Some(self.init(Some(&observation.inner))?);
        }
        let (vx, vy, vh, omega, dt) = odometry;
        let obs = Observation {
            image: &observation.inner,
            odometry: OdometryInput {
                v: [vx, vy, vh],
                omega,
                dt,
            },
        };
        let model = MapModel {
            map: &self.map,
            swdm: &self.swdm,
            cdf: &self.cdf,
            weights: &self.weights,
            camera: &self.camera,
            bin_count: self.cfg.bin_count,
        };
        let step_cfg = StepConfig {
            ess_threshold_fraction: self.cfg.ess_threshold_fraction,
        };
        let ps = self.ps.as_mut().expect("initialised above");
        let info = step(ps, &obs, &model, &self.cfg.motion, &step_cfg).map_err(to_py)?;
        to_object(
            py,
            &serde_json::json!({ "ess": info.ess_before_resample, "resampled": info.resampled }),
        )
    }

    /// Clustered pose estimate as a dict.
    fn estimate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let ps = self.particle_set()?;
        let f = &self.cfg;
        let e = extract_estimate_gated(ps, &f.dbscan, f.cov_threshold, f.min_inlier_weight);
        to_object(
            py,
            &serde_json::json!({
                "x": e.mean.x,
                "y": e.mean.y,
                "h": e.mean.h,
                "theta": e.mean.theta,
                "converged": e.converged,
                "n_clusters": e.n_clusters,
                "cluster_size": e.cluster_size,
                "n_outliers": e.n_outliers,
                "inlier_spread": e.inlier_spread,
            }),
        )
    }

    /// Particles as `(x, y, h, theta)` tuples.
    fn particles(&self) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        Ok(self.particle_set()?.poses.iter().map(|p| (p.x, p.y, p.h, p.theta)).collect())
    }

    fn weights(&self) -> PyResult<Vec<f64>> {
        Ok(self.particle_set()?.weights.clone())
    }

    fn effective_sample_size(&self) -> PyResult<f64> {
        Ok(self.particle_set()?.effective_sample_size())
    }
}

impl PyParticleFilter {
    fn particle_set(&self) -> PyResult<&ParticleSet> {
        self.ps
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("centre-semantic filter is initialised by the first step"))
    }
}

/// Runs a TOML scenario config file. Returns the list of run summaries,
/// one per trial, and writes reports to `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (path, seed = None, out_dir = None))]
fn run_config(py: Python<'_>, path: &str, seed: Option<u64>, out_dir: Option<&str>) -> PyResult<Py<PyAny>> {
    let mut cfg = RunConfig::load(path).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let reports = eval::run_batch(&cfg).map_err(to_py)?;
    if let Some(dir) = out_dir {
        if reports.len() == 1 {
            eval::export_report(&reports[0], dir).map_err(to_py)?;
        } else {
            eval::export_batch(&reports, dir).map_err(to_py)?;
        }
    }
    let summaries: Vec<_> = reports.iter().map(|r| &r.summary).collect();
    to_object(py, &summaries)
}

/// RMSE, median, mean, Recall@10 and error-to-map ratio of horizontal errors.
#[pyfunction]
fn compute_metrics(py: Python<'_>, errors: Vec<f64>, map_dim_m: f64) -> PyResult<Py<PyAny>> {
    to_object(py, &eval::compute_metrics(&errors, map_dim_m))
}

#[pymodule]
#[pyo3(name = "swapf")]
fn swapf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRaster>()?;
    m.add_class::<PyDistanceFields>()?;
    m.add_class::<PyParticleFilter>()?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_function(wrap_pyfunction!(render_observation, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    Ok(())
}
