//! Slice montages and label overlays written as binary PPM (P6).

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Tensor;

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("bad PPM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only P6 with maxval 255 is supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let pixels = bytes.get(pos..).ok_or_else(|| bad("missing data"))?.to_vec();
        if pixels.len() != width * height * 3 {
            return Err(bad("pixel data length"));
        }
        Ok(RgbImage { width, height, pixels })
    }
}

fn check_3d(t: &Tensor, axis: usize, every: usize) -> Result<()> {
    if t.spatial_rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "montage needs 3 spatial dims, got {}",
            t.spatial_rank()
        )));
    }
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
    }
    if every == 0 {
        return Err(Error::InvalidArgument("every must be >= 1".into()));
    }
    Ok(())
}

/// Grid layout for `n` tiles: `ceil(sqrt(n))` columns.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let mut cols = (n as f64).sqrt().ceil() as usize;
    while cols * cols < n {
        cols += 1;
    }
    let cols = cols.max(1);
    (cols, n.div_ceil(cols).max(1))
}

/// Tiles every `every`-th slice along `axis` of channel 0 into a near-square
/// grid. `pixel(value, voxel)` colours one voxel; slice rows follow the
/// lower remaining axis.
fn tile(
    t: &Tensor,
    axis: usize,
    every: usize,
    mut pixel: impl FnMut(f32, &[usize; 3]) -> [u8; 3],
) -> Result<RgbImage> {
    check_3d(t, axis, every)?;
    let dims = t.spatial_dims();
    let slices: Vec<usize> = (0..dims[axis]).step_by(every).collect();
    let rest: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (h, w) = (dims[rest[0]], dims[rest[1]]);
    let (cols, rows) = grid_shape(slices.len());
    let mut img = RgbImage::new(cols * w, rows * h);
    for (k, &s) in slices.iter().enumerate() {
        let (tx, ty) = ((k % cols) * w, (k / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let mut idx = [0usize; 3];
                idx[axis] = s;
                idx[rest[0]] = y;
                idx[rest[1]] = x;
                let rgb = pixel(t.get(0, &idx), &idx);
                img.set(tx + x, ty + y, rgb);
            }
        }
    }
    Ok(img)
}

fn gray_mapper(t: &Tensor) -> impl Fn(f32) -> u8 {
    let ch = t.channel(0);
    let lo = ch.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    move |v| {
        if hi > lo {
            ((v as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }
}

/// Min-max scaled grayscale montage of channel 0.
pub fn montage(t: &Tensor, axis: usize, every: usize) -> Result<RgbImage> {
    let g = gray_mapper(t);
    tile(t, axis, every, |v, _| {
        let x = g(v);
        [x, x, x]
    })
}

/// Grayscale montage with voxels where `label > 0.5` tinted towards pure red
/// by `alpha`.
pub fn blend(image: &Tensor, label: &Tensor, alpha: f64, axis: usize, every: usize) -> Result<RgbImage> {
    if image.spatial_dims() != label.spatial_dims() {
        return Err(Error::Shape(format!(
            "image dims {:?} differ from label dims {:?}",
            image.spatial_dims(),
            label.spatial_dims()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let g = gray_mapper(image);
    tile(image, axis, every, |v, idx| {
        let x = g(v);
        if label.get(0, idx) > 0.5 {
            let mix = |target: f64| ((1.0 - alpha) * x as f64 + alpha * target).round() as u8;
            [mix(255.0), mix(0.0), mix(0.0)]
        } else {
            [x, x, x]
        }
    })
}
