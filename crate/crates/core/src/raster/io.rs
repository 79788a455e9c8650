//! `SMR1` raster files, palette text files and indexed PNG import.
//!
//! Layout (little endian): `b"SMR1"`, `u32` width, `u32` height,
//! `u16` class_count, `f64` meters_per_pixel, then width×height label bytes
//! in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SemanticRaster;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SMR1";
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 8;

pub fn read_raster<R: Read>(mut reader: R) -> Result<SemanticRaster> {
    let mut header = [0u8; HEADER_LEN];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::MalformedFile("truncated header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::MalformedFile(format!("bad magic {:?}", &header[0..4])));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let class_count = u16::from_le_bytes(header[12..14].try_into().unwrap());
    let mpp = f64::from_le_bytes(header[14..22].try_into().unwrap());
    if width == 0 || height == 0 {
        return Err(Error::MalformedFile(format!("dimensions {width}x{height}")));
    }
    if class_count == 0 || class_count > 255 {
        return Err(Error::MalformedFile(format!("class_count {class_count}")));
    }
    if !mpp.is_finite() || mpp < 0.0 {
        return Err(Error::MalformedFile(format!("meters_per_pixel {mpp}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::MalformedFile("dimension overflow".into()))?;
    let mut labels = Vec::new();
    reader
        .take(n as u64)
        .read_to_end(&mut labels)
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    if labels.len() != n {
        return Err(Error::MalformedFile(format!(
            "expected {n} label bytes, found {}",
            labels.len()
        )));
    }
    SemanticRaster::new(width, height, class_count, mpp, labels)
}

pub fn write_raster<W: Write>(mut writer: W, raster: &SemanticRaster) -> std::io::Result<()> {
    writer.write_all(MAGIC)?;
    writer.write_all(&(raster.width() as u32).to_le_bytes())?;
    writer.write_all(&(raster.height() as u32).to_le_bytes())?;
    writer.write_all(&raster.class_count().to_le_bytes())?;
    writer.write_all(&raster.meters_per_pixel().to_le_bytes())?;
    writer.write_all(raster.labels())?;
    writer.flush()
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<SemanticRaster> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_raster(BufReader::new(file))
}

pub fn save_raster(path: impl AsRef<Path>, raster: &SemanticRaster) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_raster(BufWriter::new(file), raster).map_err(|e| Error::io(path, e))
}

/// One entry per class: name and display colour.
pub type Palette = Vec<(String, [u8; 3])>;

/// Reads `id name r g b` lines. Ids must be dense from zero.
pub fn load_palette(path: impl AsRef<Path>) -> Result<Palette> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<(usize, String, [u8; 3])> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::MalformedFile(format!("{}:{}: expected `id name r g b`", path.display(), lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        let id: usize = fields[0].parse().map_err(|_| bad())?;
        let mut rgb = [0u8; 3];
        for (c, f) in rgb.iter_mut().zip(&fields[2..]) {
            *c = f.parse().map_err(|_| bad())?;
        }
        entries.push((id, fields[1].to_string(), rgb));
    }
    entries.sort_by_key(|e| e.0);
    for (expect, e) in entries.iter().enumerate() {
        if e.0 != expect {
            return Err(Error::MalformedFile(format!(
                "{}: palette ids are not dense (missing {expect})",
                path.display()
            )));
        }
    }
    Ok(entries.into_iter().map(|(_, name, rgb)| (name, rgb)).collect())
}

pub fn save_palette(path: impl AsRef<Path>, palette: &Palette) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (id, (name, [r, g, b])) in palette.iter().enumerate() {
        text.push_str(&format!("{id} {name} {r} {g} {b}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Default palette for the five synthetic-world classes.
pub fn default_palette() -> Palette {
    vec![
        ("ground".into(), [160, 140, 110]),
        ("building".into(), [200, 60, 60]),
        ("road".into(), [90, 90, 90]),
        ("vegetation".into(), [60, 160, 60]),
        ("water".into(), [50, 90, 200]),
    ]
}

/// Imports an 8-bit indexed (or 8-bit greyscale) PNG, palette index = class id.
pub fn import_indexed_png(
    path: impl AsRef<Path>,
    class_count: u16,
    meters_per_pixel: f64,
) -> Result<SemanticRaster> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        (ct, bd) => {
            return Err(Error::MalformedFile(format!(
                "{}: expected 8-bit indexed image, got {ct:?}/{bd:?}",
                path.display()
            )))
        }
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?;
    let stride = frame.line_size;
    let mut labels = Vec::with_capacity(w * h);
    for row in 0..h {
        labels.extend_from_slice(&buf[row * stride..row * stride + w]);
    }
    // an image index is always a real class, never padding
    if let Some(index) = labels.iter().position(|&l| l as u16 >= class_count) {
        return Err(Error::LabelOutOfRange {
            label: labels[index],
            index,
            class_count,
        });
    }
    SemanticRaster::new(w, h, class_count, meters_per_pixel, labels)
}
