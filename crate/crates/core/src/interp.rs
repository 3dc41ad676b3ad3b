//! Sampling of channel-first arrays at continuous voxel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Affine;
use crate::volume::{increment, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Nearest,
    #[default]
    #[serde(alias = "linear", alias = "bilinear")]
    Trilinear,
    #[serde(alias = "bicubic", alias = "cubic")]
    Tricubic,
}

/// How samples outside the array are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    #[serde(alias = "constant")]
    Zeros,
    #[default]
    #[serde(alias = "edge")]
    Border,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Interpolation {
    #[serde(default)]
    pub mode: InterpMode,
    #[serde(default)]
    pub padding: PaddingMode,
}

impl Interpolation {
    pub fn new(mode: InterpMode, padding: PaddingMode) -> Self {
        Interpolation { mode, padding }
    }

    pub fn nearest() -> Self {
        Interpolation::new(InterpMode::Nearest, PaddingMode::Border)
    }

    pub fn trilinear() -> Self {
        Interpolation::new(InterpMode::Trilinear, PaddingMode::Border)
    }

    pub fn validate(&self, spatial_rank: usize) -> Result<()> {
        if self.mode == InterpMode::Tricubic && spatial_rank != 3 {
            return Err(Error::InvalidArgument(format!(
                "tricubic interpolation needs 3 spatial dims, got {spatial_rank}"
            )));
        }
        Ok(())
    }
}

/// Maps an integer index onto the array per the padding rule; `None` means
/// the tap reads zero.
pub fn resolve_index(i: i64, d: usize, padding: PaddingMode) -> Option<usize> {
    let d = d as i64;
    if (0..d).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        PaddingMode::Zeros => None,
        PaddingMode::Border => Some(i.clamp(0, d - 1) as usize),
        PaddingMode::Reflect => {
            if d == 1 {
                return Some(0);
            }
            let period = 2 * (d - 1);
            let m = i.rem_euclid(period);
            Some(if m < d { m } else { period - m } as usize)
        }
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

#[derive(Clone, Copy)]
struct Taps {
    off: [usize; 4],
    w: [f64; 4],
    n: usize,
}

impl Taps {
    fn unit() -> Self {
        Taps {
            off: [0; 4],
            w: [1.0, 0.0, 0.0, 0.0],
            n: 1,
        }
    }

    fn push(&mut self, idx: Option<usize>, stride: usize, w: f64) {
        if let Some(i) = idx {
            self.off[self.n] = i * stride;
            self.w[self.n] = w;
            self.n += 1;
        }
    }
}

/// Precomputed per-array sampling state.
pub struct Sampler<'a> {
    tensor: &'a Tensor,
    dims: [usize; 3],
    strides: [usize; 3],
    rank: usize,
    interp: Interpolation,
}

impl<'a> Sampler<'a> {
    pub fn new(tensor: &'a Tensor, interp: Interpolation) -> Result<Self> {
        let rank = tensor.spatial_rank();
        interp.validate(rank)?;
        let mut dims = [1usize; 3];
        dims[..rank].copy_from_slice(tensor.spatial_dims());
        let strides = [dims[1] * dims[2], dims[2], 1];
        Ok(Sampler {
            tensor,
            dims,
            strides,
            rank,
            interp,
        })
    }

    fn taps(&self, axis: usize, p: f64) -> Taps {
        let d = self.dims[axis];
        let s = self.strides[axis];
        let pad = self.interp.padding;
        let mut t = Taps {
            off: [0; 4],
            w: [0.0; 4],
            n: 0,
        };
        match self.interp.mode {
            InterpMode::Nearest => t.push(resolve_index(p.round() as i64, d, pad), s, 1.0),
            InterpMode::Trilinear => {
                let f = p.floor();
                let frac = p - f;
                let i0 = f as i64;
                t.push(resolve_index(i0, d, pad), s, 1.0 - frac);
                if frac != 0.0 {
                    t.push(resolve_index(i0 + 1, d, pad), s, frac);
                }
            }
            InterpMode::Tricubic => {
                let f = p.floor();
                let frac = p - f;
                let i0 = f as i64;
                if frac == 0.0 {
                    t.push(resolve_index(i0, d, pad), s, 1.0);
                } else {
                    for k in -1..=2i64 {
                        t.push(resolve_index(i0 + k, d, pad), s, cubic_weight(frac - k as f64));
                    }
                }
            }
        }
        t
    }

    /// Samples channel `c` at continuous voxel position `p` (unused trailing
    /// coordinates are ignored).
    pub fn sample(&self, c: usize, p: [f64; 3]) -> f32 {
        let data = self.tensor.channel(c);
        let mut taps = [Taps::unit(); 3];
        for (a, t) in taps.iter_mut().enumerate().take(self.rank) {
            *t = self.taps(a, p[a]);
            if t.n == 0 {
                return 0.0;
            }
        }
        let mut acc = 0.0f64;
        for a in 0..taps[0].n {
            for b in 0..taps[1].n {
                let wab = taps[0].w[a] * taps[1].w[b];
                let oab = taps[0].off[a] + taps[1].off[b];
                for c in 0..taps[2].n {
                    acc += wab * taps[2].w[c] * data[oab + taps[2].off[c]] as f64;
                }
            }
        }
        acc as f32
    }
}

/// Resamples `src` onto an output grid of `out_dims`, with `source(idx)`
/// giving the continuous input position of output voxel `idx`.
pub fn resample_with(
    src: &Tensor,
    out_dims: &[usize],
    interp: Interpolation,
    mut source: impl FnMut(&[usize]) -> [f64; 3],
) -> Result<Tensor> {
    if out_dims.len() != src.spatial_rank() {
        return Err(Error::Shape(format!(
            "output grid rank {} differs from input rank {}",
            out_dims.len(),
            src.spatial_rank()
        )));
    }
    let sampler = Sampler::new(src, interp)?;
    let mut shape = vec![src.channels()];
    shape.extend_from_slice(out_dims);
    let n: usize = out_dims.iter().product();
    let channels = src.channels();
    let mut data = vec![0f32; n * channels];
    let mut idx = vec![0usize; out_dims.len()];
    for o in 0..n {
        let p = source(&idx);
        for c in 0..channels {
            data[c * n + o] = sampler.sample(c, p);
        }
        increment(&mut idx, out_dims);
    }
    Tensor::new(shape, data)
}

/// Resamples through a homogeneous voxel map (output index → input index).
pub fn resample_affine(src: &Tensor, out_dims: &[usize], map: &Affine, interp: Interpolation) -> Result<Tensor> {
    resample_with(src, out_dims, interp, |idx| {
        let mut p = [0.0; 3];
        for (o, &i) in p.iter_mut().zip(idx) {
            *o = i as f64;
        }
        map.apply(p)
    })
}
