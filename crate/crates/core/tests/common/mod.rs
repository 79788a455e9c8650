//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swapf::distance::{CenterDistanceField, DistanceFieldStack};
use swapf::measurement::{footprint_side, CameraModel, SemanticWeights};
use swapf::motion::Pose4;
use swapf::raster::SemanticRaster;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random label map; labels drawn from `0..classes`, mostly in blocky runs.
pub fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, classes: u16, mpp: f64) -> SemanticRaster {
    let mut labels = vec![0u8; w * h];
    let sparse = rng.random_bool(0.3);
    for l in labels.iter_mut() {
        *l = if sparse {
            // mostly class 0, so other classes are rare or absent
            if rng.random_bool(0.02) {
                rng.random_range(1..classes as u8)
            } else {
                0
            }
        } else {
            rng.random_range(0..classes as u8)
        };
    }
    // smear into patches
    for _ in 0..rng.random_range(0..6) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (pw, ph) = (rng.random_range(1..=w - x0), rng.random_range(1..=h - y0));
        let class = rng.random_range(0..classes as u8);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                labels[y * w + x] = class;
            }
        }
    }
    SemanticRaster::new(w, h, classes, mpp, labels).unwrap()
}

/// Squared distance from each pixel to the nearest pixel labelled `class`,
/// `None` when the class is absent.
pub fn brute_force_sq_edt(map: &SemanticRaster, class: u8) -> Vec<Option<u64>> {
    let (w, h) = (map.width(), map.height());
    let sites: Vec<(i64, i64)> = (0..w * h)
        .filter(|&i| map.labels()[i] == class)
        .map(|i| ((i % w) as i64, (i / w) as i64))
        .collect();
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            sites.iter().map(|&(sx, sy)| ((sx - x).pow(2) + (sy - y).pow(2)) as u64).min()
        })
        .collect()
}

/// Measurement weight computed by materialising every intermediate: the
/// exactly rotated observation, the cropped distance layers and their
/// nearest-neighbour resize to the rotated view.
#[allow(clippy::too_many_arguments)]
pub fn materialized_weight(
    obs: &SemanticRaster,
    theta: f64,
    pose: &Pose4,
    swdm: &DistanceFieldStack,
    mpp: f64,
    cdf: &CenterDistanceField,
    weights: &SemanticWeights,
    cam: &CameraModel,
) -> f64 {
    let view = obs.rotate_discard(theta).unwrap();
    let sv = view.width();
    let full = footprint_side(pose.h, cam) / mpp;
    let c = ((full * sv as f64 / cam.view_side as f64).round() as usize).max(1);
    let (cx, cy) = ((pose.x / mpp).floor() as i64, (pose.y / mpp).floor() as i64);
    let (ox, oy) = (cx - (c / 2) as i64, cy - (c / 2) as i64);
    let (w, h) = (swdm.width() as i64, swdm.height() as i64);

    let mut total = 0.0;
    for class in 0..swdm.class_count() as u8 {
        // crop c x c of this distance layer, out-of-map cells at d_max
        let layer = swdm.layer(class);
        let mut crop = vec![swdm.d_max(); c * c];
        for y in 0..c {
            for x in 0..c {
                let (mx, my) = (ox + x as i64, oy + y as i64);
                if mx >= 0 && my >= 0 && mx < w && my < h {
                    crop[y * c + x] = layer[(my * w + mx) as usize];
                }
            }
        }
        // nearest resize c -> sv
        let src = |i: usize| ((i as f64 + 0.5) * c as f64 / sv as f64).floor() as usize;
        let resized: Vec<f32> = (0..sv * sv).map(|k| crop[src(k / sv) * c + src(k % sv)]).collect();
        let off = (cam.view_side - sv) / 2;
        for j in 0..sv {
            for i in 0..sv {
                if view.get(i, j) != class {
                    continue;
                }
                let alpha = weights.alpha.get(class as usize).copied().unwrap_or(0.0);
                let m = cdf.value(i + off, j + off) as f64;
                total += alpha * m / (resized[j * sv + i] as f64 + weights.d0);
            }
        }
    }
    total + weights.gamma
}

/// Textbook sequential DBSCAN visiting points in index order; border points
/// go to the first cluster that reaches them. Cluster ids are then renumbered
/// by the smallest member index.
pub fn reference_dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    const UNSEEN: i64 = -2;
    const NOISE: i64 = -1;
    let n = points.len();
    let near = |a: usize, b: usize| {
        let d: f64 = (0..3).map(|k| (points[a][k] - points[b][k]).powi(2)).sum();
        d <= eps * eps
    };
    let neighbours = |p: usize| (0..n).filter(|&q| near(p, q)).collect::<Vec<_>>();
    let mut labels = vec![UNSEEN; n];
    let mut cluster = 0i64;
    for p in 0..n {
        if labels[p] != UNSEEN {
            continue;
        }
        let nb = neighbours(p);
        if nb.len() < min_pts {
            labels[p] = NOISE;
            continue;
        }
        labels[p] = cluster;
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().filter(|&q| q != p).collect();
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster;
            }
            if labels[q] != UNSEEN {
                continue;
            }
            labels[q] = cluster;
            let nq = neighbours(q);
            if nq.len() >= min_pts {
                queue.extend(nq);
            }
        }
        cluster += 1;
    }
    let mut remap = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                None
            } else {
                let next = remap.len();
                Some(*remap.entry(l).or_insert(next))
            }
        })
        .collect()
}

/// Random point set with a few dense blobs plus scattered noise.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let blobs: Vec<[f64; 3]> = (0..rng.random_range(1..5))
        .map(|_| [rng.random_range(0.0..300.0), rng.random_range(0.0..300.0), rng.random_range(100.0..500.0)])
        .collect();
    (0..n)
        .map(|_| {
            if rng.random_bool(0.8) {
                let b = blobs[rng.random_range(0..blobs.len())];
                let s = rng.random_range(5.0..25.0);
                [
                    b[0] + rng.random_range(-s..s),
                    b[1] + rng.random_range(-s..s),
                    b[2] + rng.random_range(-s..s),
                ]
            } else {
                [rng.random_range(0.0..300.0), rng.random_range(0.0..300.0), rng.random_range(100.0..500.0)]
            }
        })
        .collect()
}
