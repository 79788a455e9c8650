//! Per-class Euclidean distance maps (the semantic-weighted distance map,
//! SWDM) and the centre weighting field applied over an observation.
//!
//! Distances are exact. Each class layer is computed from integer squared
//! distances with a separable two-pass transform (column scan, then the
//! lower envelope of parabolas along rows) and only converted to `f32`
//! when stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::raster::SemanticRaster;
use crate::{Error, Result};

/// Squared distance marker for "no feature anywhere".
pub const NO_FEATURE: u64 = u64::MAX;

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// where `mask` is true. Returns [`NO_FEATURE`] everywhere when the mask is
/// empty.
pub fn squared_edt(mask: &[bool], width: usize, height: usize) -> Vec<u64> {
    assert_eq!(mask.len(), width * height);
    // Column pass: vertical squared distance, NO_FEATURE when a column is empty.
    let mut col = vec![NO_FEATURE; width * height];
    for x in 0..width {
        let mut last: Option<usize> = None;
        for y in 0..height {
            if mask[y * width + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                let d = (y - l) as u64;
                col[y * width + x] = d * d;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..height).rev() {
            if mask[y * width + x] {
                next = Some(y);
            }
            if let Some(n) = next {
                let d = (n - y) as u64;
                let idx = y * width + x;
                col[idx] = col[idx].min(d * d);
            }
        }
    }

    let mut out = vec![NO_FEATURE; width * height];
    let mut sites = Vec::with_capacity(width);
    let mut bounds = Vec::with_capacity(width + 1);
    for y in 0..height {
        let row = &col[y * width..(y + 1) * width];
        lower_envelope(row, &mut out[y * width..(y + 1) * width], &mut sites, &mut bounds);
    }
    out
}

/// 1-D squared distance transform of a sampled function, restricted to
/// its finite samples.
fn lower_envelope(f: &[u64], out: &mut [u64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    let value = |q: usize| f[q] as f64 + (q * q) as f64;
    for q in 0..f.len() {
        if f[q] == NO_FEATURE {
            continue;
        }
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&v) => {
                    let s = (value(q) - value(v)) / (2.0 * (q - v) as f64);
                    if s <= *bounds.last().unwrap() {
                        sites.pop();
                        bounds.pop();
                    } else {
                        sites.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if sites.is_empty() {
        out.fill(NO_FEATURE);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < p as f64 {
            k += 1;
        }
        let v = sites[k];
        let d = p.abs_diff(v) as u64;
        *o = d * d + f[v];
    }
}

/// Per-class distance layers of a reference map, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceFieldStack {
    width: usize,
    height: usize,
    class_count: u16,
    d_max: f32,
    data: Vec<f32>,
}

/// Distance assigned to absent classes and out-of-map lookups: the map
/// diagonal plus one pixel.
pub fn d_max_for(width: usize, height: usize) -> f32 {
    ((width as f64).hypot(height as f64) + 1.0) as f32
}

/// Builds the distance layer of every class of `map`.
pub fn build_swdm(map: &SemanticRaster) -> DistanceFieldStack {
    let (w, h) = (map.width(), map.height());
    let d_max = d_max_for(w, h);
    let layers: Vec<Vec<f32>> = (0..map.class_count())
        .into_par_iter()
        .map(|class| {
            let mask: Vec<bool> = map.labels().iter().map(|&l| l as u16 == class).collect();
            squared_edt(&mask, w, h)
                .into_iter()
                .map(|sq| if sq == NO_FEATURE { d_max } else { (sq as f64).sqrt() as f32 })
                .collect()
        })
        .collect();
    DistanceFieldStack {
        width: w,
        height: h,
        class_count: map.class_count(),
        d_max,
        data: layers.concat(),
    }
}

impl DistanceFieldStack {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }

    pub fn d_max(&self) -> f32 {
        self.d_max
    }

    pub fn layer(&self, class: u8) -> &[f32] {
        let n = self.width * self.height;
        let c = class as usize;
        &self.data[c * n..(c + 1) * n]
    }

    /// Stored distance, or `d_max` for out-of-bounds pixels and for the
    /// out-of-map class.
    #[inline]
    pub fn sample_distance(&self, class: u8, x: i64, y: i64) -> f32 {
        if class as u16 >= self.class_count
            || x < 0
            || y < 0
            || x >= self.width as i64
            || y >= self.height as i64
        {
            return self.d_max;
        }
        let n = self.width * self.height;
        self.data[class as usize * n + y as usize * self.width + x as usize]
    }

    pub(crate) fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"SWD1")?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&self.class_count.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 14];
        r.read_exact(&mut header)
            .map_err(|_| Error::MalformedFile("truncated SWDM header".into()))?;
        if &header[0..4] != b"SWD1" {
            return Err(Error::MalformedFile("bad SWDM magic".into()));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let class_count = u16::from_le_bytes(header[12..14].try_into().unwrap());
        if width == 0 || height == 0 || class_count == 0 {
            return Err(Error::MalformedFile(format!(
                "SWDM dimensions {width}x{height}x{class_count}"
            )));
        }
        let n = class_count as usize * width * height;
        let mut bytes = Vec::new();
        r.take(n as u64 * 4)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::MalformedFile(e.to_string()))?;
        if bytes.len() != n * 4 {
            return Err(Error::MalformedFile(format!(
                "SWDM payload has {} bytes, expected {}",
                bytes.len(),
                n * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            class_count,
            d_max: d_max_for(width, height),
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Radial fall-off of the centre field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfProfile {
    /// `max(0, 1 - r / (side/2))`
    #[default]
    Linear,
    /// `max(0, cos(pi r / side))^2`
    Cosine,
    /// Constant 1 everywhere: disables centre weighting.
    Uniform,
}

/// Square grid of centre weights in `[0, 1]`, peaking at pixel `(side/2, side/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterDistanceField {
    side: usize,
    values: Vec<f32>,
}

pub fn build_cdf(side: usize, profile: CdfProfile) -> CenterDistanceField {
    assert!(side >= 1, "centre field side must be positive");
    let c = (side / 2) as f64;
    let half = side as f64 / 2.0;
    let mut values = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            let r = (i as f64 - c).hypot(j as f64 - c);
            let w = match profile {
                CdfProfile::Linear => (1.0 - r / half).max(0.0),
                CdfProfile::Cosine => {
                    let t = r / side as f64;
                    if t >= 0.5 {
                        0.0
                    } else {
                        (std::f64::consts::PI * t).cos().max(0.0).powi(2)
                    }
                }
                CdfProfile::Uniform => 1.0,
            };
            values.push(w as f32);
        }
    }
    CenterDistanceField { side, values }
}

impl CenterDistanceField {
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.side + x]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(map: &SemanticRaster, class: u8) -> Vec<u64> {
        let (w, h) = (map.width(), map.height());
        let mut out = vec![NO_FEATURE; w * h];
        for y in 0..h {
            for x in 0..w {
                for qy in 0..h {
                    for qx in 0..w {
                        if map.get(qx, qy) == class {
                            let d = (x.abs_diff(qx) as u64).pow(2) + (y.abs_diff(qy) as u64).pow(2);
                            out[y * w + x] = out[y * w + x].min(d);
                        }
                    }
                }
            }
        }
        out
    }

    fn random_map(w: usize, h: usize, seed: u64) -> SemanticRaster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // sparse classes make long distances more likely
        let labels = (0..w * h)
            .map(|_| match rng.random_range(0..100) {
                0..=2 => 1,
                3 => 2,
                4..=60 => 0,
                _ => 3,
            })
            .collect();
        SemanticRaster::new(w, h, 4, 1.0, labels).unwrap()
    }

    #[test]
    fn single_class_map() {
        let map = SemanticRaster::filled(7, 5, 3, 1.0, 1).unwrap();
        let s = build_swdm(&map);
        assert!(s.layer(1).iter().all(|&d| d == 0.0));
        assert!(s.layer(0).iter().all(|&d| d == s.d_max()));
        assert!(s.layer(2).iter().all(|&d| d == s.d_max()));
        assert_eq!(s.d_max(), ((49.0f64 + 25.0).sqrt() + 1.0) as f32);
    }

    #[test]
    fn three_four_five() {
        let mut map = SemanticRaster::filled(10, 10, 2, 1.0, 0).unwrap();
        map.set(0, 0, 1);
        let s = build_swdm(&map);
        assert_eq!(s.sample_distance(1, 3, 4), 5.0);
        assert_eq!(s.sample_distance(1, 0, 0), 0.0);
        assert_eq!(s.sample_distance(0, 0, 0), 1.0);
    }

    #[test]
    fn squared_distances_match_brute_force() {
        for seed in 0..10 {
            let map = random_map(13 + seed as usize, 17, seed);
            for class in 0..4u8 {
                let mask: Vec<bool> = map.labels().iter().map(|&l| l == class).collect();
                assert_eq!(squared_edt(&mask, map.width(), map.height()), brute_force(&map, class));
            }
        }
    }

    #[test]
    fn sample_distance_edges() {
        let map = random_map(20, 20, 3);
        let s = build_swdm(&map);
        let (x, y) = (4, 7);
        assert_eq!(s.sample_distance(map.get(x, y), x as i64, y as i64), 0.0);
        assert_eq!(s.sample_distance(0, -1, 3), s.d_max());
        assert_eq!(s.sample_distance(0, 3, 20), s.d_max());
        assert_eq!(s.sample_distance(4, 3, 3), s.d_max());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (x, y, c) = (rng.random_range(0..20), rng.random_range(0..20), rng.random_range(0..4u8));
            let bf = brute_force(&map, c)[y * 20 + x];
            let expect = if bf == NO_FEATURE { s.d_max() } else { (bf as f64).sqrt() as f32 };
            assert_eq!(s.sample_distance(c, x as i64, y as i64), expect);
        }
    }

    #[test]
    fn cache_file_round_trip() {
        let map = random_map(9, 6, 1);
        let s = build_swdm(&map);
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 14 + 4 * 9 * 6 * 4);
        assert_eq!(DistanceFieldStack::read_from(&bytes[..]).unwrap(), s);
        assert!(DistanceFieldStack::read_from(&bytes[..20]).is_err());
    }

    #[test]
    fn cdf_values() {
        assert_eq!(build_cdf(1, CdfProfile::Linear).values(), &[1.0]);
        assert_eq!(build_cdf(1, CdfProfile::Cosine).values(), &[1.0]);
        let lin = build_cdf(400, CdfProfile::Linear);
        assert_eq!(lin.value(200, 200), 1.0);
        assert_eq!(lin.value(200, 0), 0.0);
        assert_eq!(lin.value(0, 200), 0.0);
        assert_eq!(lin.value(300, 200), 0.5);
        assert_eq!(lin.value(200, 100), 0.5);
        let cos = build_cdf(400, CdfProfile::Cosine);
        assert_eq!(cos.value(200, 200), 1.0);
        assert!(cos.value(200, 0) < 1e-6);
        assert!((cos.value(300, 200) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cdf_is_radially_monotone_and_bounded() {
        for profile in [CdfProfile::Linear, CdfProfile::Cosine] {
            let f = build_cdf(41, profile);
            let c = 20;
            for y in 0..41 {
                for x in 0..41 {
                    let v = f.value(x, y);
                    assert!((0.0..=1.0).contains(&v));
                    // walking one step towards the centre never decreases the weight
                    if x > c {
                        assert!(f.value(x - 1, y) >= v);
                    }
                    if y > c {
                        assert!(f.value(x, y - 1) >= v);
                    }
                }
            }
        }
    }

    #[test]
    fn cdf_quarter_turn_symmetry() {
        for side in [1usize, 2, 7, 40, 41, 400] {
            for profile in [CdfProfile::Linear, CdfProfile::Cosine] {
                let f = build_cdf(side, profile);
                let c = (side / 2) as i64;
                // quarter turn about the peak pixel: (x, y) -> (c + (y - c), c - (x - c))
                for y in 0..side as i64 {
                    for x in 0..side as i64 {
                        let (rx, ry) = (y, 2 * c - x);
                        if (0..side as i64).contains(&rx) && (0..side as i64).contains(&ry) {
                            assert_eq!(
                                f.value(x as usize, y as usize),
                                f.value(rx as usize, ry as usize)
                            );
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn layers_are_one_lipschitz(seed in any::<u64>(), w in 2usize..30, h in 2usize..30) {
            let map = random_map(w, h, seed);
            let s = build_swdm(&map);
            for class in 0..4u8 {
                let layer = s.layer(class);
                if layer[0] == s.d_max() { continue; }
                for y in 0..h {
                    for x in 0..w {
                        let d = layer[y * w + x];
                        prop_assert!(d >= 0.0);
                        prop_assert_eq!(d == 0.0, map.get(x, y) == class);
                        if x + 1 < w { prop_assert!((d - layer[y * w + x + 1]).abs() <= 1.0 + 1e-5); }
                        if y + 1 < h { prop_assert!((d - layer[(y + 1) * w + x]).abs() <= 1.0 + 1e-5); }
                    }
                }
            }
        }

        #[test]
        fn swdm_is_deterministic(seed in any::<u64>()) {
            let map = random_map(24, 19, seed);
            let a = build_swdm(&map);
            let b = build_swdm(&map);
            prop_assert!(a.raw().iter().zip(b.raw()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
