//! Particle weighting against a semantic observation.
//!
//! The observation (a nadir label image resized to `view_side`²) is
//! pre-rotated into `bin_count` yaw bins once per frame. A particle picks
//! the bin nearest its yaw, and every retained observation pixel `q` of
//! class `l` is mapped through the particle's footprint onto the map, where
//! it contributes `alpha[l] * cdf(q) / (d_l(m(q)) + d0)`; `d_l` is the
//! distance to the nearest map pixel of class `l`. The weight is that sum
//! plus `gamma`.
//!
//! The footprint mapping is the index arithmetic of "crop the map window
//! under the particle, then nearest-neighbour resize it to the bin side",
//! evaluated per pixel instead of materialising the window.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{CenterDistanceField, DistanceFieldStack};
use crate::motion::Pose4;
use crate::raster::SemanticRaster;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    /// Full angle of the square nadir footprint, degrees.
    pub fov_deg: f64,
    /// Side of the normalised observation, pixels.
    pub view_side: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov_deg: 60.0,
            view_side: 400,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidInput(format!("fov {} outside (0, 180)", self.fov_deg)));
        }
        if self.view_side == 0 {
            return Err(Error::InvalidInput("view_side must be positive".into()));
        }
        Ok(())
    }
}

/// Ground side length (meters) seen from altitude `h` by a nadir camera.
pub fn footprint_side(h: f64, cam: &CameraModel) -> f64 {
    2.0 * h * (cam.fov_deg.to_radians() / 2.0).tan()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticWeights {
    /// Per-class weight, indexed by class id. Missing classes weigh 0.
    pub alpha: Vec<f64>,
    pub gamma: f64,
    /// Division guard, pixels.
    pub d0: f64,
}

impl SemanticWeights {
    /// Ground 0, every other class 1.
    pub fn uniform(class_count: u16, gamma: f64) -> Self {
        let mut alpha = vec![1.0; class_count as usize];
        if let Some(g) = alpha.first_mut() {
            *g = 0.0;
        }
        Self { alpha, gamma, d0: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(*a >= 0.0)) || !self.alpha.iter().any(|a| *a > 0.0) {
            return Err(Error::InvalidInput("alpha must be non-negative with one positive entry".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidInput(format!("gamma {}", self.gamma)));
        }
        if !(self.d0 > 0.0) {
            return Err(Error::InvalidInput(format!("d0 {}", self.d0)));
        }
        Ok(())
    }

    #[inline]
    fn alpha(&self, class: u8) -> f64 {
        self.alpha.get(class as usize).copied().unwrap_or(0.0)
    }
}

/// The observation rotated into evenly spaced yaw bins.
#[derive(Debug, Clone)]
pub struct RotationCache {
    bins: Vec<SemanticRaster>,
    bin_width: f64,
    view_side: usize,
}

/// Rotates a square observation into `bin_count` bins; bin `k` holds the
/// observation rotated by `k * 360 / bin_count` degrees.
pub fn build_rotation_cache(obs: &SemanticRaster, bin_count: usize) -> Result<RotationCache> {
    if bin_count == 0 {
        return Err(Error::InvalidInput("bin_count must be positive".into()));
    }
    let bins = (0..bin_count)
        .into_par_iter()
        .map(|k| obs.rotate_discard(bin_angle(k, bin_count)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RotationCache {
        bins,
        bin_width: 360.0 / bin_count as f64,
        view_side: obs.width(),
    })
}

fn bin_angle(k: usize, bin_count: usize) -> f64 {
    k as f64 * 360.0 / bin_count as f64
}

/// `round(theta / bin_width) mod bin_count`, halves rounding up.
pub fn nearest_bin(theta: f64, bin_count: usize) -> usize {
    let bw = 360.0 / bin_count as f64;
    let k = (theta.rem_euclid(360.0) / bw + 0.5).floor() as usize;
    k % bin_count
}

impl RotationCache {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn view_side(&self) -> usize {
        self.view_side
    }

    pub fn bin(&self, k: usize) -> &SemanticRaster {
        &self.bins[k]
    }

    pub fn bin_angle(&self, k: usize) -> f64 {
        bin_angle(k, self.bins.len())
    }

    pub fn nearest_bin(&self, theta: f64) -> usize {
        nearest_bin(theta, self.bins.len())
    }
}

struct Term {
    coef: f64,
    /// Offset of the class layer in the distance stack, `usize::MAX` if absent.
    layer: usize,
    i: u32,
    j: u32,
}

/// Everything needed to score particles against one observation.
pub struct FrameContext<'a> {
    pub cache: &'a RotationCache,
    pub swdm: &'a DistanceFieldStack,
    pub meters_per_pixel: f64,
    pub cdf: &'a CenterDistanceField,
    pub weights: &'a SemanticWeights,
    pub camera: &'a CameraModel,
}

impl FrameContext<'_> {
    /// Unnormalised weight of one particle, using the cached yaw bin.
    pub fn particle_weight(&self, pose: &Pose4) -> f64 {
        let k = self.cache.nearest_bin(pose.theta);
        self.score_view(pose, self.cache.bin(k)) + self.weights.gamma
    }

    /// Same as [`particle_weight`](Self::particle_weight) but rotating the
    /// normalised observation by exactly `pose.theta`.
    pub fn particle_weight_exact(&self, pose: &Pose4, obs: &SemanticRaster) -> Result<f64> {
        let view = obs.rotate_discard(pose.theta)?;
        Ok(self.score_view(pose, &view) + self.weights.gamma)
    }

    /// Side in map pixels of the window matched against a view of side `view`.
    pub fn window_side(&self, h: f64, view: usize) -> usize {
        let side_px = footprint_side(h, self.camera) / self.meters_per_pixel;
        let c = (side_px * view as f64 / self.camera.view_side as f64).round();
        if c >= 1.0 {
            c as usize
        } else {
            1
        }
    }

    /// Integer map pixel under the particle.
    pub fn center_pixel(&self, pose: &Pose4) -> (i64, i64) {
        (
            (pose.x / self.meters_per_pixel).floor() as i64,
            (pose.y / self.meters_per_pixel).floor() as i64,
        )
    }

    fn score_view(&self, pose: &Pose4, view: &SemanticRaster) -> f64 {
        self.score_terms(pose, view.width(), &self.view_terms(view))
    }

    /// Non-zero contributions of a view in row-major order.
    fn view_terms(&self, view: &SemanticRaster) -> Vec<Term> {
        let sv = view.width();
        let layer_len = self.swdm.width() * self.swdm.height();
        let classes = self.swdm.class_count();
        let oom = view.out_of_map();
        let off = (self.camera.view_side.saturating_sub(sv)) / 2;
        let labels = view.labels();
        let mut terms = Vec::with_capacity(labels.len());
        for j in 0..sv {
            let cdf_row = &self.cdf.values()[(j + off) * self.cdf.side() + off..];
            for i in 0..sv {
                let label = labels[j * sv + i];
                if label == oom {
                    continue;
                }
                let coef = self.weights.alpha(label) * cdf_row[i] as f64;
                if coef == 0.0 {
                    continue;
                }
                let layer = if (label as u16) < classes { label as usize * layer_len } else { usize::MAX };
                terms.push(Term { coef, layer, i: i as u32, j: j as u32 });
            }
        }
        terms
    }

    fn score_terms(&self, pose: &Pose4, sv: usize, terms: &[Term]) -> f64 {
        let c = self.window_side(pose.h, sv) as i64;
        let (cx, cy) = self.center_pixel(pose);
        let (ox, oy) = (cx - c / 2, cy - c / 2);
        let (w, h) = (self.swdm.width() as i64, self.swdm.height() as i64);
        let map_index = |o: i64, i: usize, limit: i64, stride: i64| -> i64 {
            let m = o + ((2 * i as i64 + 1) * c) / (2 * sv as i64);
            if (0..limit).contains(&m) {
                m * stride
            } else {
                -1
            }
        };
        let cols: Vec<i64> = (0..sv).map(|i| map_index(ox, i, w, 1)).collect();
        let rows: Vec<i64> = (0..sv).map(|j| map_index(oy, j, h, w)).collect();

        let data = self.swdm.raw();
        let d_max = self.swdm.d_max() as f64;
        let d0 = self.weights.d0;
        let mut sum = 0.0f64;
        for t in terms {
            let (row, col) = (rows[t.j as usize], cols[t.i as usize]);
            let d = if row < 0 || col < 0 || t.layer == usize::MAX {
                d_max
            } else {
                data[t.layer + (row + col) as usize] as f64
            };
            sum += t.coef / (d + d0);
        }
        sum
    }

    pub fn raw_weights(&self, poses: &[Pose4]) -> Vec<f64> {
        // Visit particles in spatial order so neighbouring windows share cache.
        let tile = 64.0 * self.meters_per_pixel;
        let mut order: Vec<(i64, i64, usize)> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| ((p.y / tile).floor() as i64, (p.x / tile).floor() as i64, i))
            .collect();
        order.sort_unstable();
        let terms: Vec<OnceLock<Vec<Term>>> = (0..self.cache.bin_count()).map(|_| OnceLock::new()).collect();
        let sorted: Vec<f64> = order
            .par_iter()
            .map(|&(_, _, i)| {
                let k = self.cache.nearest_bin(poses[i].theta);
                let bin = self.cache.bin(k);
                let t = terms[k].get_or_init(|| self.view_terms(bin));
                self.score_terms(&poses[i], bin.width(), t) + self.weights.gamma
            })
            .collect();
        let mut out = vec![0.0; poses.len()];
        for (&(_, _, i), w) in order.iter().zip(sorted) {
            out[i] = w;
        }
        out
    }

    /// Normalised weights `W_i / sum(W)`.
    pub fn weigh_all(&self, poses: &[Pose4]) -> Result<Vec<f64>> {
        if poses.is_empty() {
            return Err(Error::InvalidInput("no particles to weigh".into()));
        }
        normalize_weights(&self.raw_weights(poses))
    }
}

/// Normalises to unit sum with a reduction order fixed by index.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::DegenerateWeights(max));
    }
    let scaled: Vec<f64> = raw.iter().map(|w| w / max).collect();
    let total = pairwise_sum(&scaled);
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights(total));
    }
    Ok(scaled.into_iter().map(|w| w / total).collect())
}

/// Pairwise summation; the split points depend only on the length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::{build_cdf, build_swdm, CdfProfile};
    use crate::raster::SemanticRaster;

    fn cam(view_side: usize) -> CameraModel {
        CameraModel {
            fov_deg: 90.0,
            view_side,
        }
    }

    #[test]
    fn footprint_examples() {
        let c = cam(400);
        assert!((footprint_side(100.0, &c) - 200.0).abs() < 1e-12);
        let c60 = CameraModel {
            fov_deg: 60.0,
            view_side: 400,
        };
        assert!((footprint_side(200.0, &c60) - 230.940_107_675_850_3).abs() < 1e-9);
        assert_eq!(footprint_side(400.0, &c60), 2.0 * footprint_side(200.0, &c60));
    }

    #[test]
    fn nearest_bin_rounding() {
        assert_eq!(nearest_bin(0.0, 100), 0);
        assert_eq!(nearest_bin(3.6, 100), 1);
        assert_eq!(nearest_bin(1.81, 100), 1);
        assert_eq!(nearest_bin(1.79, 100), 0);
        assert_eq!(nearest_bin(1.8, 100), 1);
        assert_eq!(nearest_bin(359.0, 100), 0);
        assert_eq!(nearest_bin(90.0, 100), 25);
    }

    #[test]
    fn cache_bins_are_rotations() {
        let labels: Vec<u8> = (0..40 * 40).map(|i| ((i * 7 + i / 40) % 4) as u8).collect();
        let obs = SemanticRaster::new(40, 40, 4, 0.0, labels).unwrap();
        let cache = build_rotation_cache(&obs, 100).unwrap();
        assert_eq!(cache.bin(0), &obs);
        assert_eq!(cache.bin(25), &obs.rotate_discard(90.0).unwrap());
        let half = cache.bin(50);
        assert_eq!(half.width(), 40);
        for y in 0..40 {
            for x in 0..40 {
                assert_eq!(half.get(x, y), obs.get(39 - x, 39 - y));
            }
        }
        assert!((cache.bin_width() * cache.bin_count() as f64 - 360.0).abs() < 1e-12);
    }

    fn setup(map: &SemanticRaster, obs: &SemanticRaster, view: usize) -> (RotationCache, DistanceFieldStack, CenterDistanceField) {
        (
            build_rotation_cache(obs, 100).unwrap(),
            build_swdm(map),
            build_cdf(view, CdfProfile::Linear),
        )
    }

    #[test]
    fn perfect_match_reaches_formula_value() {
        // single-class map and observation: every sampled distance is zero
        let map = SemanticRaster::filled(64, 64, 2, 1.0, 1).unwrap();
        let obs = SemanticRaster::filled(16, 16, 2, 0.0, 1).unwrap();
        let (cache, swdm, cdf) = setup(&map, &obs, 16);
        let weights = SemanticWeights {
            alpha: vec![0.0, 2.0],
            gamma: 10.0,
            d0: 1.0,
        };
        let camera = cam(16);
        let ctx = FrameContext {
            cache: &cache,
            swdm: &swdm,
            meters_per_pixel: 1.0,
            cdf: &cdf,
            weights: &weights,
            camera: &camera,
        };
        let cdf_sum: f64 = cdf.values().iter().map(|&v| v as f64).sum();
        let w = ctx.particle_weight(&Pose4::new(32.0, 32.0, 8.0, 0.0));
        assert!((w - (2.0 * cdf_sum + 10.0)).abs() < 1e-9);
    }

    #[test]
    fn absent_class_hits_the_floor() {
        let map = SemanticRaster::filled(64, 64, 3, 1.0, 1).unwrap();
        let obs = SemanticRaster::filled(16, 16, 3, 0.0, 2).unwrap();
        let (cache, swdm, cdf) = setup(&map, &obs, 16);
        let weights = SemanticWeights {
            alpha: vec![0.0, 1.0, 1.0],
            gamma: 10.0,
            d0: 1.0,
        };
        let camera = cam(16);
        let ctx = FrameContext {
            cache: &cache,
            swdm: &swdm,
            meters_per_pixel: 1.0,
            cdf: &cdf,
            weights: &weights,
            camera: &camera,
        };
        let cdf_sum: f64 = cdf.values().iter().map(|&v| v as f64).sum();
        let floor = cdf_sum / (swdm.d_max() as f64 + 1.0) + 10.0;
        assert!((ctx.particle_weight(&Pose4::new(32.0, 32.0, 8.0, 0.0)) - floor).abs() < 1e-9);
        // rotated bins keep fewer pixels, so the bound is an upper one
        assert!(ctx.particle_weight(&Pose4::new(-500.0, 900.0, 8.0, 17.0)) <= floor + 1e-9);
    }

    #[test]
    fn normalisation() {
        assert_eq!(normalize_weights(&[3.5]).unwrap(), vec![1.0]);
        let w = normalize_weights(&[0.1; 7]).unwrap();
        assert!(w.iter().all(|&x| x == 1.0 / 7.0));
        let w = normalize_weights(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(normalize_weights(&[0.0, 0.0]), Err(Error::DegenerateWeights(_))));
    }

    #[test]
    fn validation() {
        assert!(SemanticWeights::uniform(5, 10.0).validate().is_ok());
        let w = SemanticWeights {
            alpha: vec![0.0, 0.0],
            gamma: 1.0,
            d0: 1.0,
        };
        assert!(w.validate().is_err());
        assert!(CameraModel { fov_deg: 180.0, view_side: 4 }.validate().is_err());
    }
}
