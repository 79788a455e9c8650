//! Particle population lifecycle: initialisation, the predict / weigh /
//! resample recursion, and ESS-triggered systematic resampling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{CenterDistanceField, DistanceFieldStack};
use crate::measurement::{build_rotation_cache, normalize_weights, CameraModel, FrameContext, SemanticWeights};
use crate::motion::{predict, MotionModel, OdometryInput, Pose4};
use crate::raster::SemanticRaster;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Axis-aligned box of admissible states. Yaw always spans `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub h: (f64, f64),
}

impl StateBounds {
    /// Covers the whole map at the default altitude range.
    pub fn for_map(map: &SemanticRaster) -> Self {
        let (w, h) = map.extent_m();
        Self {
            x: (0.0, w),
            y: (0.0, h),
            h: (100.0, 500.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("x", self.x), ("y", self.y), ("h", self.h)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!("empty {name} bounds [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Pose4) -> bool {
        (self.x.0..=self.x.1).contains(&p.x)
            && (self.y.0..=self.y.1).contains(&p.y)
            && (self.h.0..=self.h.1).contains(&p.h)
            && (0.0..360.0).contains(&p.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    FullSpace,
    /// Uniform (x, y, theta), replicated at each listed altitude.
    Layered { layer_heights: Vec<f64> },
    /// (x, y) uniform over map pixels of `center_class`.
    CenterSemantic { center_class: u8 },
}

impl InitStrategy {
    pub fn default_layers() -> Vec<f64> {
        vec![150.0, 250.0, 350.0, 450.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub poses: Vec<Pose4>,
    pub weights: Vec<f64>,
    pub master_seed: u64,
    pub generation: u64,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws `n` particles with uniform weights.
pub fn initialize(
    n: usize,
    bounds: &StateBounds,
    strategy: &InitStrategy,
    map: Option<&SemanticRaster>,
    seed: u64,
) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::InvalidInput("particle count must be positive".into()));
    }
    bounds.validate()?;
    let mut rng = stream_rng(seed, Stream::Init, 0, 0);
    let poses = match strategy {
        InitStrategy::FullSpace => (0..n)
            .map(|_| {
                let x = uniform(&mut rng, bounds.x);
                let y = uniform(&mut rng, bounds.y);
                let h = uniform(&mut rng, bounds.h);
                let theta = uniform(&mut rng, (0.0, 360.0));
                Pose4 { x, y, h, theta }
            })
            .collect(),
        InitStrategy::Layered { layer_heights } => {
            if layer_heights.is_empty() {
                return Err(Error::InvalidInput("layered init needs at least one layer".into()));
            }
            let layers = layer_heights.len();
            let per_layer = n.div_ceil(layers);
            let base: Vec<(f64, f64, f64)> = (0..per_layer)
                .map(|_| {
                    (
                        uniform(&mut rng, bounds.x),
                        uniform(&mut rng, bounds.y),
                        uniform(&mut rng, (0.0, 360.0)),
                    )
                })
                .collect();
            // layer-major replication; the last layers lose the surplus when n % layers != 0
            (0..n)
                .map(|i| {
                    let (x, y, theta) = base[i % per_layer];
                    let h = layer_heights[i / per_layer].clamp(bounds.h.0, bounds.h.1);
                    Pose4 { x, y, h, theta }
                })
                .collect()
        }
        InitStrategy::CenterSemantic { center_class } => {
            let map = map.ok_or_else(|| Error::InvalidInput("center-semantic init needs a map".into()))?;
            let mpp = map.meters_per_pixel();
            // pixels of the class whose cell lies inside the bounds
            let support: Vec<(usize, usize)> = (0..map.height())
                .flat_map(|y| (0..map.width()).map(move |x| (x, y)))
                .filter(|&(x, y)| {
                    map.get(x, y) == *center_class
                        && x as f64 * mpp >= bounds.x.0
                        && (x + 1) as f64 * mpp <= bounds.x.1
                        && y as f64 * mpp >= bounds.y.0
                        && (y + 1) as f64 * mpp <= bounds.y.1
                })
                .collect();
            if support.is_empty() {
                return Err(Error::EmptySupport(*center_class));
            }
            (0..n)
                .map(|_| {
                    let (px, py) = support[rng.random_range(0..support.len())];
                    let x = (px as f64 + rng.random::<f64>()) * mpp;
                    let y = (py as f64 + rng.random::<f64>()) * mpp;
                    let h = uniform(&mut rng, bounds.h);
                    let theta = uniform(&mut rng, (0.0, 360.0));
                    Pose4 { x, y, h, theta }
                })
                .collect()
        }
    };
    Ok(ParticleSet {
        poses,
        weights: vec![1.0 / n as f64; n],
        master_seed: seed,
        generation: 0,
    })
}

/// Label at the centre of an observation.
pub fn center_class(obs: &SemanticRaster) -> u8 {
    obs.get(obs.width() / 2, obs.height() / 2)
}

/// Static inputs of the measurement step.
pub struct MapModel<'a> {
    pub map: &'a SemanticRaster,
    pub swdm: &'a DistanceFieldStack,
    pub cdf: &'a CenterDistanceField,
    pub weights: &'a SemanticWeights,
    pub camera: &'a CameraModel,
    pub bin_count: usize,
}

/// What the filter sees of a frame: no ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    /// Observation at any square size; resized to `view_side` internally.
    pub image: &'a SemanticRaster,
    pub odometry: OdometryInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub ess_threshold_fraction: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            ess_threshold_fraction: 0.5,
        }
    }
}

/// Diagnostics of one recursion step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Unnormalised measurement weights `W_i`, in particle order.
    pub raw_weights: Vec<f64>,
    /// Effective sample size of the posterior, before resampling.
    pub ess_before_resample: f64,
    pub resampled: bool,
}

/// One filter recursion: predict every particle, weigh against the
/// observation, multiply into the prior weights and renormalise, then
/// resample if the effective sample size fell below the threshold.
pub fn step(
    ps: &mut ParticleSet,
    obs: &Observation<'_>,
    model: &MapModel<'_>,
    motion: &MotionModel,
    cfg: &StepConfig,
) -> Result<StepInfo> {
    let generation = ps.generation;
    let seed = ps.master_seed;
    ps.poses.par_iter_mut().enumerate().for_each(|(i, p)| {
        let mut rng = stream_rng(seed, Stream::Predict, generation, i as u64);
        *p = predict(p, &obs.odometry, motion, &mut rng);
    });

    let view_side = model.camera.view_side;
    let resized;
    let image = if obs.image.width() == view_side && obs.image.height() == view_side {
        obs.image
    } else {
        resized = obs.image.resize_nearest(view_side);
        &resized
    };
    let cache = build_rotation_cache(image, model.bin_count)?;
    let ctx = FrameContext {
        cache: &cache,
        swdm: model.swdm,
        meters_per_pixel: model.map.meters_per_pixel(),
        cdf: model.cdf,
        weights: model.weights,
        camera: model.camera,
    };
    let raw = ctx.raw_weights(&ps.poses);
    let likelihood = normalize_weights(&raw)?;
    let product: Vec<f64> = ps.weights.iter().zip(&likelihood).map(|(w, l)| w * l).collect();
    ps.weights = normalize_weights(&product)?;
    let ess = ps.effective_sample_size();
    let mut rng = stream_rng(seed, Stream::Resample, generation, 0);
    let resampled = resample_if_needed(ps, cfg.ess_threshold_fraction, &mut rng);
    ps.generation += 1;
    Ok(StepInfo {
        raw_weights: raw,
        ess_before_resample: ess,
        resampled,
    })
}

/// Systematic resampling when `ESS < threshold * N`. Returns whether it ran.
pub fn resample_if_needed<R: Rng>(ps: &mut ParticleSet, threshold_fraction: f64, rng: &mut R) -> bool {
    let n = ps.len();
    if ps.effective_sample_size() >= threshold_fraction * n as f64 {
        return false;
    }
    let picks = systematic_indices(&ps.weights, rng.random::<f64>());
    ps.poses = picks.iter().map(|&i| ps.poses[i]).collect();
    ps.weights = vec![1.0 / n as f64; n];
    true
}

/// Low-variance resampling: `N` evenly spaced pointers offset by `u / N`,
/// `u` in `[0, 1)`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..n {
        let target = (u + k as f64) * step;
        while target >= cumulative && i + 1 < n {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::classes;

    fn bounds() -> StateBounds {
        StateBounds {
            x: (0.0, 2000.0),
            y: (0.0, 1500.0),
            h: (100.0, 500.0),
        }
    }

    #[test]
    fn full_space_inside_bounds() {
        let ps = initialize(5000, &bounds(), &InitStrategy::FullSpace, None, 3).unwrap();
        assert_eq!(ps.len(), 5000);
        assert!(ps.poses.iter().all(|p| bounds().contains(p)));
        assert!(ps.weights.iter().all(|&w| w == 1.0 / 5000.0));
    }

    #[test]
    fn layered_replicates_per_layer() {
        let strategy = InitStrategy::Layered {
            layer_heights: vec![150.0, 300.0, 450.0],
        };
        let ps = initialize(300, &bounds(), &strategy, None, 4).unwrap();
        for h in [150.0, 300.0, 450.0] {
            assert_eq!(ps.poses.iter().filter(|p| p.h == h).count(), 100);
        }
        // same (x, y, theta) appear in every layer
        for i in 0..100 {
            let (a, b) = (ps.poses[i], ps.poses[i + 200]);
            assert_eq!((a.x, a.y, a.theta), (b.x, b.y, b.theta));
        }
    }

    #[test]
    fn center_semantic_lands_on_class() {
        let mut map = SemanticRaster::filled(100, 100, classes::COUNT, 2.0, classes::GROUND).unwrap();
        for y in 0..50 {
            for x in 50..100 {
                map.set(x, y, classes::BUILDING);
            }
        }
        let b = StateBounds {
            x: (0.0, 200.0),
            y: (0.0, 200.0),
            h: (100.0, 500.0),
        };
        let strategy = InitStrategy::CenterSemantic {
            center_class: classes::BUILDING,
        };
        let ps = initialize(2000, &b, &strategy, Some(&map), 5).unwrap();
        assert!(ps.poses.iter().all(|p| {
            let (x, y) = ((p.x / 2.0).floor() as usize, (p.y / 2.0).floor() as usize);
            map.get(x, y) == classes::BUILDING
        }));
        let missing = InitStrategy::CenterSemantic {
            center_class: classes::WATER,
        };
        assert!(matches!(
            initialize(10, &b, &missing, Some(&map), 5),
            Err(Error::EmptySupport(4))
        ));
    }

    fn set_with(weights: Vec<f64>) -> ParticleSet {
        let n = weights.len();
        ParticleSet {
            poses: (0..n).map(|i| Pose4::new(i as f64, 0.0, 200.0, 0.0)).collect(),
            weights,
            master_seed: 0,
            generation: 0,
        }
    }

    #[test]
    fn uniform_weights_never_resample() {
        let mut ps = set_with(vec![0.25; 4]);
        let before = ps.clone();
        let mut rng = stream_rng(0, Stream::Resample, 0, 0);
        assert!(!resample_if_needed(&mut ps, 0.99, &mut rng));
        assert_eq!(ps, before);
    }

    #[test]
    fn degenerate_weight_collapses() {
        let mut ps = set_with(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let mut rng = stream_rng(0, Stream::Resample, 0, 0);
        assert!(resample_if_needed(&mut ps, 0.5, &mut rng));
        assert!(ps.poses.iter().all(|p| p.x == 2.0));
        assert!(ps.weights.iter().all(|&w| w == 0.2));
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil() {
        let w = [0.05, 0.4, 0.15, 0.3, 0.1];
        for k in 0..50 {
            let idx = systematic_indices(&w, k as f64 / 50.0);
            assert_eq!(idx.len(), 5);
            for (i, wi) in w.iter().enumerate() {
                let c = idx.iter().filter(|&&j| j == i).count() as f64;
                let e = wi * 5.0;
                assert!(c >= e.floor() - 1e-9 && c <= e.ceil() + 1e-9, "{i}: {c} vs {e}");
            }
        }
    }
}
