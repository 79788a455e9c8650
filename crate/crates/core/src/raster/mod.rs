//! Semantic label rasters.
//!
//! A raster is a row-major grid of small class ids. Every geometric
//! operation samples with nearest neighbour; class ids are never
//! interpolated. Pixels that fall outside the source are filled with the
//! reserved [`SemanticRaster::out_of_map`] label, which is one past the
//! last real class.

mod io;

pub use io::{
    default_palette, import_indexed_png, load_palette, load_raster, read_raster, save_palette, save_raster,
    write_raster, Palette,
};

use crate::{Error, Result};

/// Classes used by the synthetic worlds and the default palette.
pub mod classes {
    pub const GROUND: u8 = 0;
    pub const BUILDING: u8 = 1;
    pub const ROAD: u8 = 2;
    pub const VEGETATION: u8 = 3;
    pub const WATER: u8 = 4;
    pub const COUNT: u16 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticRaster {
    width: usize,
    height: usize,
    class_count: u16,
    meters_per_pixel: f64,
    labels: Vec<u8>,
}

impl SemanticRaster {
    /// Builds a raster, checking dimensions and label range.
    ///
    /// Labels equal to `class_count` are accepted as out-of-map padding.
    pub fn new(
        width: usize,
        height: usize,
        class_count: u16,
        meters_per_pixel: f64,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("raster dimensions {width}x{height}")));
        }
        if class_count == 0 || class_count > u8::MAX as u16 {
            return Err(Error::InvalidInput(format!("class_count {class_count} outside 1..=255")));
        }
        if labels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} labels for a {width}x{height} raster",
                labels.len()
            )));
        }
        if !(meters_per_pixel >= 0.0) || !meters_per_pixel.is_finite() {
            return Err(Error::InvalidInput(format!("meters_per_pixel {meters_per_pixel}")));
        }
        if let Some(index) = labels.iter().position(|&l| l as u16 > class_count) {
            return Err(Error::LabelOutOfRange {
                label: labels[index],
                index,
                class_count,
            });
        }
        Ok(Self {
            width,
            height,
            class_count,
            meters_per_pixel,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, class_count: u16, meters_per_pixel: f64, label: u8) -> Result<Self> {
        Self::new(width, height, class_count, meters_per_pixel, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }

    pub fn meters_per_pixel(&self) -> f64 {
        self.meters_per_pixel
    }

    pub fn set_meters_per_pixel(&mut self, mpp: f64) {
        self.meters_per_pixel = mpp;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// The reserved label for pixels outside map coverage.
    pub fn out_of_map(&self) -> u8 {
        self.class_count as u8
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Label at signed coordinates, `out_of_map` outside the raster.
    #[inline]
    pub fn get_or_oom(&self, x: i64, y: i64) -> u8 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            self.out_of_map()
        } else {
            self.labels[y as usize * self.width + x as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Pixel count per label, including the out-of-map bucket at index `class_count`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count as usize + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Map extent in meters (width, height).
    pub fn extent_m(&self) -> (f64, f64) {
        (
            self.width as f64 * self.meters_per_pixel,
            self.height as f64 * self.meters_per_pixel,
        )
    }

    /// `side`×`side` window whose pixel `(side/2, side/2)` sits on `center`.
    pub fn crop_window(&self, center: (i64, i64), side: usize) -> SemanticRaster {
        assert!(side >= 1, "crop side must be positive");
        let half = (side / 2) as i64;
        let (x0, y0) = (center.0 - half, center.1 - half);
        let mut labels = Vec::with_capacity(side * side);
        for j in 0..side as i64 {
            for i in 0..side as i64 {
                labels.push(self.get_or_oom(x0 + i, y0 + j));
            }
        }
        SemanticRaster {
            width: side,
            height: side,
            class_count: self.class_count,
            meters_per_pixel: 0.0,
            labels,
        }
    }

    /// Nearest-neighbour resample to `target`×`target`.
    pub fn resize_nearest(&self, target: usize) -> SemanticRaster {
        self.resize_nearest_to(target, target)
    }

    /// Nearest-neighbour resample to an arbitrary size. Output pixel `i`
    /// samples source pixel `floor((i + 0.5) * src / dst)`.
    pub fn resize_nearest_to(&self, width: usize, height: usize) -> SemanticRaster {
        assert!(width >= 1 && height >= 1, "resize target must be positive");
        let cols = nearest_index_map(self.width, width);
        let rows = nearest_index_map(self.height, height);
        let mut labels = Vec::with_capacity(width * height);
        for &r in &rows {
            let row = &self.labels[r * self.width..(r + 1) * self.width];
            labels.extend(cols.iter().map(|&c| row[c]));
        }
        let mpp = if self.meters_per_pixel > 0.0 {
            self.meters_per_pixel * self.width as f64 / width as f64
        } else {
            0.0
        };
        SemanticRaster {
            width,
            height,
            class_count: self.class_count,
            meters_per_pixel: mpp,
            labels,
        }
    }

    /// Rotates counter-clockwise (as displayed, y down) by `angle_deg` about
    /// the centre and keeps the largest centred axis-aligned square that the
    /// rotated image fully covers.
    pub fn rotate_discard(&self, angle_deg: f64) -> Result<SemanticRaster> {
        if !self.is_square() {
            return Err(Error::InvalidInput(format!(
                "rotate_discard needs a square raster, got {}x{}",
                self.width, self.height
            )));
        }
        let n = self.width;
        let (sin, cos) = sin_cos_deg(angle_deg);
        let side = discard_side(n, sin, cos);
        let half_in = n as f64 / 2.0;
        let half_out = side as f64 / 2.0;
        let max = n as i64 - 1;
        let mut labels = Vec::with_capacity(side * side);
        for j in 0..side {
            let v = j as f64 + 0.5 - half_out;
            for i in 0..side {
                let u = i as f64 + 0.5 - half_out;
                let sx = (cos * u - sin * v + half_in).floor() as i64;
                let sy = (sin * u + cos * v + half_in).floor() as i64;
                labels.push(self.get(sx.clamp(0, max) as usize, sy.clamp(0, max) as usize));
            }
        }
        Ok(SemanticRaster {
            width: side,
            height: side,
            class_count: self.class_count,
            meters_per_pixel: self.meters_per_pixel,
            labels,
        })
    }
}

/// Side of the inscribed square retained by [`SemanticRaster::rotate_discard`].
pub fn rotated_side(n: usize, angle_deg: f64) -> usize {
    let (sin, cos) = sin_cos_deg(angle_deg);
    discard_side(n, sin, cos)
}

fn discard_side(n: usize, sin: f64, cos: f64) -> usize {
    let s = ((n as f64 / (sin.abs() + cos.abs())) + 1e-9).floor() as usize;
    s.clamp(1, n)
}

pub(crate) fn nearest_index_map(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| ((2 * i + 1) * src) / (2 * dst)).collect()
}

/// Sine and cosine of an angle in degrees, exact on multiples of 90°.
pub fn sin_cos_deg(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.rem_euclid(360.0);
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == 90.0 {
        (1.0, 0.0)
    } else if a == 180.0 {
        (0.0, -1.0)
    } else if a == 270.0 {
        (-1.0, 0.0)
    } else {
        a.to_radians().sin_cos()
    }
}
