//! Pose extraction from the particle posterior.
//!
//! DBSCAN over (x, y, h) rejects outliers and splits the remaining
//! particles into clusters; the heaviest cluster (by total weight) gives
//! the estimate. Yaw never enters the clustering metric and is averaged
//! circularly inside the winning cluster.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::filter::ParticleSet;
use crate::motion::{angle_diff_deg, normalize_deg, Pose4};
use crate::raster::sin_cos_deg;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Neighbourhood radius in meters.
    pub eps: f64,
    /// Neighbour count (the point itself included) that makes a core point.
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self { eps: 30.0, min_pts: 50 }
    }
}

/// Cluster id per point, `None` for noise. Cluster ids follow the smallest
/// original index of each cluster's members.
pub type Labels = Vec<Option<usize>>;

type Cell = (i64, i64, i64);

/// Points bucketed into cubes of side `eps / sqrt(3)`, so any two points
/// sharing a cube are within eps and neighbours lie at most two cubes away.
struct Grid {
    /// Member point indices per occupied cube, in ascending cube order.
    members: Vec<Vec<usize>>,
    /// Occupied cubes within reach of each cube, itself included.
    near: Vec<Vec<usize>>,
    keys: Vec<Cell>,
    cell_of: Vec<usize>,
}

impl Grid {
    fn new(points: &[[f64; 3]], eps: f64) -> Self {
        let side = eps / 3f64.sqrt() * (1.0 - 1e-9);
        let key = |p: &[f64; 3]| {
            (
                (p[0] / side).floor() as i64,
                (p[1] / side).floor() as i64,
                (p[2] / side).floor() as i64,
            )
        };
        let mut by_key: FxHashMap<Cell, Vec<usize>> = FxHashMap::default();
        for (i, p) in points.iter().enumerate() {
            by_key.entry(key(p)).or_default().push(i);
        }
        let mut cells: Vec<(Cell, Vec<usize>)> = by_key.into_iter().collect();
        cells.sort_unstable_by_key(|(k, _)| *k);
        let index: FxHashMap<Cell, usize> = cells.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect();
        let near = cells
            .iter()
            .map(|(c, _)| {
                let mut out = Vec::new();
                for dx in -2..=2 {
                    for dy in -2..=2 {
                        for dz in -2..=2 {
                            if let Some(&j) = index.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                                out.push((dx * dx + dy * dy + dz * dz, j));
                            }
                        }
                    }
                }
                // nearest first, so neighbour counts saturate early
                out.sort_unstable();
                out.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        let mut cell_of = vec![0; points.len()];
        for (c, (_, m)) in cells.iter().enumerate() {
            m.iter().for_each(|&i| cell_of[i] = c);
        }
        let keys = cells.iter().map(|(k, _)| *k).collect();
        Self {
            members: cells.into_iter().map(|(_, m)| m).collect(),
            near,
            keys,
            cell_of,
        }
    }
}

#[inline]
fn within(a: &[f64; 3], b: &[f64; 3], eps2: f64) -> bool {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz <= eps2
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Density-based clustering with the classic sequential semantics: a
/// border point reachable from several clusters joins the one whose
/// lowest-index core point comes first.
pub fn dbscan(points: &[[f64; 3]], params: &DbscanParams) -> Labels {
    let n = points.len();
    let eps2 = params.eps * params.eps;
    let grid = Grid::new(points, params.eps);

    let mut core = vec![false; n];
    for (c, members) in grid.members.iter().enumerate() {
        if members.len() >= params.min_pts {
            members.iter().for_each(|&i| core[i] = true);
            continue;
        }
        for &i in members {
            let p = &points[i];
            let mut count = 0;
            'cells: for &o in &grid.near[c] {
                for &j in &grid.members[o] {
                    if within(p, &points[j], eps2) {
                        count += 1;
                        if count >= params.min_pts {
                            core[i] = true;
                            break 'cells;
                        }
                    }
                }
            }
        }
    }

    // Connect core points: all cores in one cell are linked; across cells
    // one linking pair is enough.
    let cores: Vec<Vec<usize>> = grid
        .members
        .iter()
        .map(|m| m.iter().copied().filter(|&i| core[i]).collect())
        .collect();
    let mut uf = UnionFind((0..n).collect());
    for ca in &cores {
        for w in ca.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    // Touching cells first; most far pairs are then already connected.
    let touching = |a: usize, b: usize| {
        let (ka, kb) = (grid.keys[a], grid.keys[b]);
        (ka.0 - kb.0).abs() <= 1 && (ka.1 - kb.1).abs() <= 1 && (ka.2 - kb.2).abs() <= 1
    };
    for pass_touching in [true, false] {
        for (a, ca) in cores.iter().enumerate() {
            let Some(&first) = ca.first() else { continue };
            for &b in &grid.near[a] {
                let cb = &cores[b];
                if b <= a || cb.is_empty() || touching(a, b) != pass_touching || uf.find(first) == uf.find(cb[0]) {
                    continue;
                }
                if ca.iter().any(|&i| cb.iter().any(|&j| within(&points[i], &points[j], eps2))) {
                    uf.union(first, cb[0]);
                }
            }
        }
    }

    // Union-find roots are the smallest core index of each component, which
    // is also the order in which a sequential scan would open the clusters.
    let mut labels: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            labels[i] = Some(uf.find(i));
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let p = &points[i];
        let mut best: Option<usize> = None;
        for &o in &grid.near[grid.cell_of[i]] {
            for &j in &cores[o] {
                if within(p, &points[j], eps2) {
                    let root = labels[j].unwrap();
                    best = Some(best.map_or(root, |b: usize| b.min(root)));
                }
            }
        }
        labels[i] = best;
    }
    canonical_relabel(&labels)
}

/// Renumbers clusters by the smallest original index among their members.
pub fn canonical_relabel(labels: &[Option<usize>]) -> Labels {
    let mut map: FxHashMap<usize, usize> = FxHashMap::default();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

/// Weighted circular mean in `[0, 360)`.
pub fn circular_mean(angles: &[f64], weights: &[f64]) -> Result<f64> {
    let (mut s, mut c) = (0.0, 0.0);
    for (&a, &w) in angles.iter().zip(weights) {
        let (sa, ca) = sin_cos_deg(a);
        s += w * sa;
        c += w * ca;
    }
    if s.hypot(c) < 1e-12 {
        return Err(Error::ZeroResultant);
    }
    Ok(normalize_deg(s.atan2(c).to_degrees()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub mean: Pose4,
    /// Weighted covariance of (x, y, h, theta) over the selected cluster;
    /// theta deviations are wrapped to `[-180, 180)`.
    pub covariance: [[f64; 4]; 4],
    pub converged: bool,
    /// False when the yaw resultant vanished and `mean.theta` is meaningless.
    pub yaw_valid: bool,
    pub cluster_id: Option<usize>,
    pub cluster_size: usize,
    pub cluster_weight: f64,
    pub n_clusters: usize,
    pub n_outliers: usize,
    /// Trace of the positional covariance over all clustered particles.
    pub inlier_spread: f64,
}

struct Moments {
    mean: Pose4,
    cov: [[f64; 4]; 4],
    yaw_valid: bool,
}

fn weighted_moments(poses: &[Pose4], weights: &[f64], members: &[usize]) -> Moments {
    let total: f64 = members.iter().map(|&i| weights[i]).sum();
    // equal weights if the members carry no mass at all
    let w = |i: usize| {
        if total > 0.0 {
            weights[i] / total
        } else {
            1.0 / members.len() as f64
        }
    };
    let mut m = [0.0; 3];
    for &i in members {
        let p = &poses[i];
        m[0] += w(i) * p.x;
        m[1] += w(i) * p.y;
        m[2] += w(i) * p.h;
    }
    let angles: Vec<f64> = members.iter().map(|&i| poses[i].theta).collect();
    let ws: Vec<f64> = members.iter().map(|&i| w(i)).collect();
    let (theta, yaw_valid) = match circular_mean(&angles, &ws) {
        Ok(t) => (t, true),
        Err(_) => (0.0, false),
    };
    let mut cov = [[0.0; 4]; 4];
    for &i in members {
        let p = &poses[i];
        let d = [p.x - m[0], p.y - m[1], p.h - m[2], angle_diff_deg(p.theta, theta)];
        for r in 0..4 {
            for c in 0..4 {
                cov[r][c] += w(i) * d[r] * d[c];
            }
        }
    }
    Moments {
        mean: Pose4 {
            x: m[0],
            y: m[1],
            h: m[2],
            theta,
        },
        cov,
        yaw_valid,
    }
}

/// Default share of total weight that clustered particles must hold before
/// an estimate may count as converged.
pub const DEFAULT_MIN_INLIER_WEIGHT: f64 = 0.5;

/// Extracts the pose estimate from the current particle set. `min_pts` is
/// capped at the particle count so that tiny sets can still form a cluster.
pub fn extract_estimate(ps: &ParticleSet, params: &DbscanParams, cov_threshold: f64) -> PoseEstimate {
    extract_estimate_gated(ps, params, cov_threshold, DEFAULT_MIN_INLIER_WEIGHT)
}

/// As [`extract_estimate`], with an explicit floor on the clustered weight
/// share. A compact cluster holding little of the weight (typically copies
/// of one lucky particle) does not pass the convergence gate.
pub fn extract_estimate_gated(
    ps: &ParticleSet,
    params: &DbscanParams,
    cov_threshold: f64,
    min_inlier_weight: f64,
) -> PoseEstimate {
    let n = ps.len();
    let points: Vec<[f64; 3]> = ps.poses.iter().map(|p| [p.x, p.y, p.h]).collect();
    let effective = DbscanParams {
        eps: params.eps,
        min_pts: params.min_pts.clamp(1, n.max(1)),
    };
    let labels = dbscan(&points, &effective);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let n_outliers = labels.iter().filter(|l| l.is_none()).count();

    if n_clusters == 0 {
        let all: Vec<usize> = (0..n).collect();
        let m = weighted_moments(&ps.poses, &ps.weights, &all);
        return PoseEstimate {
            mean: m.mean,
            covariance: m.cov,
            converged: false,
            yaw_valid: m.yaw_valid,
            cluster_id: None,
            cluster_size: 0,
            cluster_weight: 0.0,
            n_clusters: 0,
            n_outliers,
            inlier_spread: m.cov[0][0] + m.cov[1][1] + m.cov[2][2],
        };
    }

    let total_weight: f64 = ps.weights.iter().sum();
    let inlier_weight: f64 = labels.iter().zip(&ps.weights).filter(|(l, _)| l.is_some()).map(|(_, w)| w).sum();
    let mut cluster_weight = vec![0.0; n_clusters];
    for (l, w) in labels.iter().zip(&ps.weights) {
        if let Some(c) = l {
            cluster_weight[*c] += w;
        }
    }
    let mut best = 0;
    for c in 1..n_clusters {
        if cluster_weight[c] > cluster_weight[best] {
            best = c;
        }
    }
    let members: Vec<usize> = (0..n).filter(|&i| labels[i] == Some(best)).collect();
    let inliers: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
    let m = weighted_moments(&ps.poses, &ps.weights, &members);
    let spread = if n_clusters == 1 {
        m.cov[0][0] + m.cov[1][1] + m.cov[2][2]
    } else {
        let all = weighted_moments(&ps.poses, &ps.weights, &inliers);
        all.cov[0][0] + all.cov[1][1] + all.cov[2][2]
    };
    PoseEstimate {
        mean: m.mean,
        covariance: m.cov,
        converged: spread < cov_threshold && inlier_weight >= min_inlier_weight * total_weight,
        yaw_valid: m.yaw_valid,
        cluster_id: Some(best),
        cluster_size: members.len(),
        cluster_weight: cluster_weight[best],
        n_clusters,
        n_outliers,
        inlier_spread: spread,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(points: &[[f64; 3]], weights: Option<Vec<f64>>) -> ParticleSet {
        let n = points.len();
        ParticleSet {
            poses: points.iter().map(|p| Pose4::new(p[0], p[1], p[2], 0.0)).collect(),
            weights: weights.unwrap_or_else(|| vec![1.0 / n as f64; n]),
            master_seed: 0,
            generation: 0,
        }
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![[5.0, 5.0, 200.0]; 20];
        let labels = dbscan(&pts, &DbscanParams { eps: 1.0, min_pts: 20 });
        assert!(labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn two_blobs_and_a_singleton() {
        let eps = 2.0;
        let mut pts = Vec::new();
        for k in 0..10 {
            let o = k as f64 * 0.1;
            pts.push([o, o, 200.0]);
            pts.push([100.0 * eps + o, o, 200.0]);
        }
        pts.push([-500.0, 300.0, 200.0]);
        let labels = dbscan(&pts, &DbscanParams { eps, min_pts: 4 });
        assert_eq!(labels[0], Some(0));
        assert_eq!(labels[1], Some(1));
        assert_eq!(labels[20], None);
        assert_eq!(labels.iter().filter(|l| **l == Some(0)).count(), 10);
        assert_eq!(labels.iter().filter(|l| **l == Some(1)).count(), 10);
    }

    #[test]
    fn circular_mean_cases() {
        let m = circular_mean(&[350.0, 10.0], &[0.5, 0.5]).unwrap();
        assert!(angle_diff_deg(m, 0.0).abs() < 1e-9);
        assert!((circular_mean(&[42.0; 3], &[1.0 / 3.0; 3]).unwrap() - 42.0).abs() < 1e-9);
        assert!(matches!(circular_mean(&[0.0, 180.0], &[0.5, 0.5]), Err(Error::ZeroResultant)));
    }

    #[test]
    fn single_particle_estimate() {
        let ps = set_of(&[[10.0, 20.0, 300.0]], None);
        let e = extract_estimate(&ps, &DbscanParams::default(), 1.0);
        assert_eq!((e.mean.x, e.mean.y, e.mean.h), (10.0, 20.0, 300.0));
        assert!(e.converged);
        assert!(!extract_estimate(&ps, &DbscanParams::default(), 0.0).converged);
    }

    #[test]
    fn symmetric_clusters_tie_to_lower_id() {
        let mut pts = Vec::new();
        for k in 0..60 {
            let o = (k % 6) as f64;
            pts.push([o, 0.0, 200.0]);
            pts.push([1000.0 + o, 0.0, 200.0]);
        }
        let ps = set_of(&pts, None);
        let e = extract_estimate(&ps, &DbscanParams { eps: 5.0, min_pts: 10 }, 1e4);
        assert_eq!(e.cluster_id, Some(0));
        assert!(e.mean.x < 10.0);
        assert!(!e.converged);
        assert_eq!(e.n_clusters, 2);
    }

    #[test]
    fn weight_decides_not_count() {
        let mut pts = Vec::new();
        let mut w = Vec::new();
        for k in 0..30 {
            pts.push([k as f64 * 0.1, 0.0, 200.0]);
            w.push(0.1 / 30.0);
        }
        for k in 0..10 {
            pts.push([500.0 + k as f64 * 0.1, 0.0, 200.0]);
            w.push(0.9 / 10.0);
        }
        let ps = set_of(&pts, Some(w));
        let e = extract_estimate(&ps, &DbscanParams { eps: 2.0, min_pts: 5 }, 1e9);
        assert_eq!(e.cluster_id, Some(1));
        assert!(e.mean.x > 500.0);
    }

    #[test]
    fn all_noise_falls_back_to_global_mean() {
        let pts = [[0.0, 0.0, 100.0], [100.0, 0.0, 100.0], [0.0, 100.0, 100.0]];
        let ps = set_of(&pts, None);
        let e = extract_estimate(&ps, &DbscanParams { eps: 1.0, min_pts: 2 }, 1e9);
        assert_eq!(e.cluster_id, None);
        assert!(!e.converged);
        assert!((e.mean.x - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(e.n_outliers, 3);
    }
}
