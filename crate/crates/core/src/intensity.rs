//! Intensity transforms and k-space spike simulation.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{MetaVolume, Tensor, TraceRecord};

pub const NORMALIZE_INTENSITY: &str = "normalize_intensity";
pub const SCALE_INTENSITY_RANGE: &str = "scale_intensity_range";
pub const RAND_GAUSSIAN_NOISE: &str = "rand_gaussian_noise";
pub const RAND_KSPACE_SPIKE: &str = "rand_kspace_spike";

/// Per-channel z-score normalisation using the population standard
/// deviation. With `nonzero_only`, statistics come from (and are applied to)
/// nonzero voxels only.
pub fn normalize_intensity(v: &MetaVolume, nonzero_only: bool) -> Result<MetaVolume> {
    let mut array = v.array.clone();
    let mut means = Vec::with_capacity(v.channels());
    let mut stds = Vec::with_capacity(v.channels());
    for c in 0..v.channels() {
        let ch = array.channel_mut(c);
        let (n, sum) = ch
            .iter()
            .filter(|&&x| !nonzero_only || x != 0.0)
            .fold((0usize, 0.0f64), |(n, s), &x| (n + 1, s + x as f64));
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel {c} has no nonzero voxels to normalise"
            )));
        }
        let mean = sum / n as f64;
        let var = ch
            .iter()
            .filter(|&&x| !nonzero_only || x != 0.0)
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        for x in ch.iter_mut() {
            if nonzero_only && *x == 0.0 {
                continue;
            }
            *x = if std > 0.0 { ((*x as f64 - mean) / std) as f32 } else { 0.0 };
        }
        means.push(mean);
        stds.push(std);
    }
    let mut out = v.with_array(array);
    out.push_trace(
        TraceRecord::new(NORMALIZE_INTENSITY, true, v)
            .with("nonzero", nonzero_only)
            .with("mean", json!(means))
            .with("std", json!(stds)),
    );
    Ok(out)
}

/// Linear map of `[in_min, in_max]` onto `[out_min, out_max]`, optionally
/// clipped to the output range.
pub fn scale_intensity_range(
    v: &MetaVolume,
    in_min: f64,
    in_max: f64,
    out_min: f64,
    out_max: f64,
    clip: bool,
) -> Result<MetaVolume> {
    if !(in_max > in_min) {
        return Err(Error::InvalidArgument(format!(
            "degenerate input range [{in_min}, {in_max}]"
        )));
    }
    let scale = (out_max - out_min) / (in_max - in_min);
    let (lo, hi) = if out_min <= out_max { (out_min, out_max) } else { (out_max, out_min) };
    let array = v.array.map(|x| {
        let y = (x as f64 - in_min) * scale + out_min;
        (if clip { y.clamp(lo, hi) } else { y }) as f32
    });
    let mut out = v.with_array(array);
    out.push_trace(
        TraceRecord::new(SCALE_INTENSITY_RANGE, true, v)
            .with("in", json!([in_min, in_max]))
            .with("out", json!([out_min, out_max]))
            .with("clip", clip),
    );
    Ok(out)
}

pub(crate) fn noise_apply(v: &MetaVolume, do_transform: bool, mean: f64, sigma: f64, seed: u64) -> MetaVolume {
    let rec = TraceRecord::new(RAND_GAUSSIAN_NOISE, do_transform, v)
        .with("invertible", false)
        .with("mean", mean)
        .with("sigma", sigma)
        .with("noise_seed", seed);
    let mut out = if do_transform {
        let mut rng = Rng::new(seed);
        let mut array = v.array.clone();
        for x in array.data_mut() {
            *x = (*x as f64 + mean + sigma * rng.gaussian()) as f32;
        }
        v.with_array(array)
    } else {
        v.clone()
    };
    out.push_trace(rec);
    out
}

/// With probability `prob`, adds i.i.d. Gaussian noise. Consumes two draws
/// from `rng`: the gate and the seed of the noise stream.
pub fn rand_gaussian_noise(v: &MetaVolume, rng: &mut Rng, mean: f64, sigma: f64, prob: f64) -> Result<MetaVolume> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let gate = rng.uniform();
    let seed = rng.next_u64();
    Ok(noise_apply(v, gate < prob, mean, sigma, seed))
}

/// Complex array with the spatial shape of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume {
    pub dims: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexVolume {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn abs(&self, k: usize) -> f64 {
        self.re[k].hypot(self.im[k])
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.len()).map(|k| self.abs(k)).fold(0.0, f64::max)
    }
}

/// One unitary DFT pass along `axis` of a row-major complex array.
fn dft_axis(dims: &[usize], axis: usize, re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let sign = if inverse { 1.0 } else { -1.0 };
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|m| {
            let t = sign * 2.0 * std::f64::consts::PI * m as f64 / n as f64;
            (t.cos(), t.sin())
        })
        .unzip();
    let norm = 1.0 / (n as f64).sqrt();
    let mut lr = vec![0.0; n];
    let mut li = vec![0.0; n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (j, (r, i)) in lr.iter_mut().zip(li.iter_mut()).enumerate() {
                *r = re[base + j * stride];
                *i = im[base + j * stride];
            }
            for k in 0..n {
                let (mut ar, mut ai) = (0.0, 0.0);
                for j in 0..n {
                    let m = (k * j) % n;
                    ar += lr[j] * cos[m] - li[j] * sin[m];
                    ai += lr[j] * sin[m] + li[j] * cos[m];
                }
                re[base + k * stride] = ar * norm;
                im[base + k * stride] = ai * norm;
            }
        }
    }
}

/// Unitary forward DFT over all axes of a real array.
pub fn dft3(data: &[f64], dims: &[usize]) -> Result<ComplexVolume> {
    let n: usize = dims.iter().product();
    if n != data.len() || dims.is_empty() {
        return Err(Error::Shape(format!("dims {dims:?} do not match {} values", data.len())));
    }
    let mut re = data.to_vec();
    let mut im = vec![0.0; n];
    for a in 0..dims.len() {
        dft_axis(dims, a, &mut re, &mut im, false);
    }
    Ok(ComplexVolume {
        dims: dims.to_vec(),
        re,
        im,
    })
}

/// Full complex inverse DFT.
pub fn idft3_complex(k: &ComplexVolume) -> ComplexVolume {
    let mut re = k.re.clone();
    let mut im = k.im.clone();
    for a in 0..k.dims.len() {
        dft_axis(&k.dims, a, &mut re, &mut im, true);
    }
    ComplexVolume {
        dims: k.dims.clone(),
        re,
        im,
    }
}

/// Unitary inverse DFT, returning the real part.
pub fn idft3(k: &ComplexVolume) -> Vec<f64> {
    idft3_complex(k).re
}

/// Flat index of the frequency `-k` (mod dims).
pub fn mirror_index(dims: &[usize], flat: usize) -> usize {
    let mut rem = flat;
    let mut coords = vec![0usize; dims.len()];
    for a in (0..dims.len()).rev() {
        coords[a] = rem % dims[a];
        rem /= dims[a];
    }
    coords
        .iter()
        .zip(dims)
        .fold(0, |acc, (&c, &d)| acc * d + (d - c) % d)
}

/// Replaces bin `loc` by `gain · max|K|` with the bin's phase and sets the
/// conjugate-symmetric partner so the image stays real.
pub fn apply_spike(k: &mut ComplexVolume, loc: usize, gain: f64, max_abs: f64) {
    let mirror = mirror_index(&k.dims, loc);
    let mag = gain * max_abs;
    if mirror == loc {
        let s = if k.re[loc] < 0.0 { -1.0 } else { 1.0 };
        k.re[loc] = s * mag;
        k.im[loc] = 0.0;
        return;
    }
    let phase = if k.re[loc] == 0.0 && k.im[loc] == 0.0 {
        0.0
    } else {
        k.im[loc].atan2(k.re[loc])
    };
    let (s, c) = phase.sin_cos();
    k.re[loc] = mag * c;
    k.im[loc] = mag * s;
    k.re[mirror] = mag * c;
    k.im[mirror] = -mag * s;
}

/// Parameters of one spike call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeDraw {
    pub do_transform: bool,
    pub gain: f64,
    /// Flat k-space indices, never the zero-frequency bin.
    pub locations: Vec<usize>,
}

impl SpikeDraw {
    /// Gate, gain, then `count` locations: always `2 + count` draws.
    pub fn draw(rng: &mut Rng, dims: &[usize], gain_range: (f64, f64), prob: f64, count: usize) -> Self {
        let gate = rng.uniform();
        let gain = rng.uniform_range(gain_range.0, gain_range.1);
        let n: usize = dims.iter().product();
        let locations = (0..count)
            .map(|_| if n > 1 { 1 + rng.below(n as u64 - 1) as usize } else { 0 })
            .collect();
        SpikeDraw {
            do_transform: gate < prob && n > 1,
            gain,
            locations,
        }
    }
}

pub(crate) fn spike_apply(v: &MetaVolume, d: &SpikeDraw) -> Result<MetaVolume> {
    let rec = TraceRecord::new(RAND_KSPACE_SPIKE, d.do_transform, v)
        .with("invertible", false)
        .with("gain", d.gain)
        .with("locations", json!(d.locations));
    let mut out = if d.do_transform {
        let dims = v.spatial_dims().to_vec();
        let n = v.array.spatial_len();
        if let Some(&bad) = d.locations.iter().find(|&&l| l == 0 || l >= n) {
            return Err(Error::InvalidArgument(format!("k-space location {bad} invalid for {n} bins")));
        }
        let mut array = v.array.clone();
        for c in 0..v.channels() {
            let ch: Vec<f64> = array.channel(c).iter().map(|&x| x as f64).collect();
            let mut k = dft3(&ch, &dims)?;
            let max_abs = k.max_abs();
            for &loc in &d.locations {
                apply_spike(&mut k, loc, d.gain, max_abs);
            }
            for (dst, x) in array.channel_mut(c).iter_mut().zip(idft3(&k)) {
                *dst = x as f32;
            }
        }
        v.with_array(array)
    } else {
        v.clone()
    };
    out.push_trace(rec);
    Ok(out)
}

/// With probability `prob`, per channel sets `count` random non-DC k-space
/// bins to `g · max|K|` (phase preserved, Hermitian partner mirrored).
pub fn rand_kspace_spike(
    v: &MetaVolume,
    rng: &mut Rng,
    gain_range: (f64, f64),
    prob: f64,
    count: usize,
) -> Result<MetaVolume> {
    if !(gain_range.0 > 0.0) || gain_range.1 < gain_range.0 {
        return Err(Error::InvalidArgument(format!("spike gain range {gain_range:?} must be positive")));
    }
    let d = SpikeDraw::draw(rng, v.spatial_dims(), gain_range, prob, count);
    spike_apply(v, &d)
}

/// Inverse for invertible intensity records; `None` for other ids.
pub(crate) fn invert_intensity(v: &MetaVolume, rec: &TraceRecord) -> Result<Option<MetaVolume>> {
    let array: Tensor = match rec.transform_id.as_str() {
        NORMALIZE_INTENSITY => {
            let nonzero: bool = rec.get("nonzero")?;
            let mean: Vec<f64> = rec.get("mean")?;
            let std: Vec<f64> = rec.get("std")?;
            let mut a = v.array.clone();
            if mean.len() != a.channels() || std.len() != a.channels() {
                return Err(Error::Shape(format!(
                    "normalisation record has {} channels, volume has {}",
                    mean.len(),
                    a.channels()
                )));
            }
            for c in 0..a.channels() {
                for x in a.channel_mut(c) {
                    if nonzero && *x == 0.0 {
                        continue;
                    }
                    *x = (*x as f64 * std[c] + mean[c]) as f32;
                }
            }
            a
        }
        SCALE_INTENSITY_RANGE => {
            let inr: [f64; 2] = rec.get("in")?;
            let outr: [f64; 2] = rec.get("out")?;
            if outr[1] == outr[0] {
                return Err(Error::NotInvertible(rec.transform_id.clone()));
            }
            let scale = (inr[1] - inr[0]) / (outr[1] - outr[0]);
            v.array.map(|y| ((y as f64 - outr[0]) * scale + inr[0]) as f32)
        }
        _ => return Ok(None),
    };
    Ok(Some(v.with_array(array)))
}
