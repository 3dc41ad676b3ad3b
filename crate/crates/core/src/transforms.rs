//! Configurable transform catalogue.
//!
//! A [`Transform`] is executed in two phases: [`Transform::draw`] consumes
//! randomness once and resolves every random parameter, then
//! [`Resolved::apply`] runs the operation. Splitting the phases lets a
//! dictionary step apply one random instantiation to every bound key.
//!
//! Draw counts per call are fixed (the gate is always drawn first, then all
//! parameters, whether or not the gate fires):
//!
//! | transform           | uniform draws                         |
//! |---------------------|---------------------------------------|
//! | `rand_flip`         | 1                                     |
//! | `rand_rotate`       | 1 + number of angles                  |
//! | `rand_zoom`         | 2                                     |
//! | `rand_spatial_crop` | 3                                     |
//! | `rand_affine`       | 10                                    |
//! | `rand_elastic_3d`   | 10                                    |
//! | `rand_gaussian_noise` | 2                                   |
//! | `rand_kspace_spike` | 2 + count                             |
//! | `one_of`            | 1 + draws of the chosen transform     |

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::interp::{InterpMode, Interpolation, PaddingMode};
use crate::intensity::{self, SpikeDraw};
use crate::rng::Rng;
use crate::spatial::{self, AffineParams, ElasticDraw, ElasticParams};
use crate::volume::{MetaVolume, TraceRecord};

pub const ONE_OF: &str = "one_of";

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn one_usize() -> usize {
    1
}

/// One pipeline step as written in the JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub name: String,
    #[serde(default = "empty_args")]
    pub args: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_keys: Vec<String>,
}

fn empty_args() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    Orientation {
        axcodes: String,
    },
    Spacing {
        pixdim: Vec<f64>,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    Flip {
        axes: Vec<usize>,
    },
    RandFlip {
        axes: Vec<usize>,
        #[serde(default = "half")]
        prob: f64,
    },
    Rotate {
        angles: Vec<f64>,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    /// Angles drawn uniformly from `[-range, range]` per rotation plane.
    RandRotate {
        range: Vec<f64>,
        #[serde(default = "half")]
        prob: f64,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    Zoom {
        factors: Vec<f64>,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    /// Isotropic zoom drawn from `[min_zoom, max_zoom]`.
    RandZoom {
        min_zoom: f64,
        max_zoom: f64,
        #[serde(default = "half")]
        prob: f64,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    CropPad {
        start: Vec<i64>,
        size: Vec<usize>,
        #[serde(default = "zeros_padding")]
        mode: PaddingMode,
    },
    CenterCrop {
        size: Vec<usize>,
    },
    /// Pads symmetrically up to `size` (axes already large enough are kept).
    SpatialPad {
        size: Vec<usize>,
        #[serde(default = "zeros_padding")]
        mode: PaddingMode,
    },
    RandSpatialCrop {
        size: Vec<usize>,
    },
    Affine {
        #[serde(flatten)]
        params: AffineParams,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    RandAffine {
        #[serde(default = "half")]
        prob: f64,
        #[serde(default)]
        rotate_range: f64,
        #[serde(default)]
        scale_range: f64,
        #[serde(default)]
        translate_range: f64,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    RandElastic3d {
        sigma_range: (f64, f64),
        magnitude_range: (f64, f64),
        #[serde(default = "half")]
        prob: f64,
        #[serde(default)]
        rotate_range: f64,
        #[serde(default)]
        scale_range: f64,
        #[serde(default)]
        mode: InterpMode,
        #[serde(default)]
        padding: PaddingMode,
    },
    NormalizeIntensity {
        #[serde(default)]
        nonzero: bool,
    },
    ScaleIntensityRange {
        a_min: f64,
        a_max: f64,
        b_min: f64,
        b_max: f64,
        #[serde(default)]
        clip: bool,
    },
    RandGaussianNoise {
        #[serde(default = "half")]
        prob: f64,
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
    },
    RandKspaceSpike {
        #[serde(default = "half")]
        prob: f64,
        intensity_range: (f64, f64),
        #[serde(default = "one_usize")]
        count: usize,
    },
    OneOf {
        transforms: Vec<StepConfig>,
        #[serde(default)]
        weights: Vec<f64>,
    },
}

fn zeros_padding() -> PaddingMode {
    PaddingMode::Zeros
}

impl Transform {
    pub fn from_step(step: &StepConfig) -> Result<Self> {
        let v = serde_json::json!({ "name": step.name, "args": step.args });
        serde_json::from_value(v).map_err(|e| {
            if e.to_string().contains("unknown variant") {
                Error::UnknownTransform(step.name.clone())
            } else {
                Error::InvalidArgument(format!("bad arguments for '{}': {e}", step.name))
            }
        })
    }

    pub fn name(&self) -> String {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m
                .get("name")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            _ => String::new(),
        }
    }

    /// Consumes randomness when executed.
    pub fn is_random(&self) -> bool {
        matches!(
            self,
            Transform::RandFlip { .. }
                | Transform::RandRotate { .. }
                | Transform::RandZoom { .. }
                | Transform::RandSpatialCrop { .. }
                | Transform::RandAffine { .. }
                | Transform::RandElastic3d { .. }
                | Transform::RandGaussianNoise { .. }
                | Transform::RandKspaceSpike { .. }
                | Transform::OneOf { .. }
        )
    }

    /// Every record this transform can push has an inverse.
    pub fn is_invertible(&self) -> Result<bool> {
        Ok(match self {
            Transform::RandElastic3d { .. }
            | Transform::RandGaussianNoise { .. }
            | Transform::RandKspaceSpike { .. } => false,
            Transform::OneOf { transforms, .. } => {
                for t in transforms {
                    if !Transform::from_step(t)?.is_invertible()? {
                        return Ok(false);
                    }
                }
                true
            }
            _ => true,
        })
    }

    /// Resolves all random parameters against `reference` (the first bound
    /// volume).
    pub fn draw(&self, rng: &mut Rng, reference: &MetaVolume) -> Result<Resolved> {
        let interp = |mode: &InterpMode, padding: &PaddingMode| Interpolation::new(*mode, *padding);
        Ok(match self {
            Transform::RandFlip { axes, prob } => {
                let gate = rng.uniform();
                Resolved::Flip {
                    axes: axes.clone(),
                    do_transform: gate < *prob,
                    id: "rand_flip",
                }
            }
            Transform::RandRotate { range, prob, mode, padding } => {
                let gate = rng.uniform();
                let angles = range.iter().map(|&r| rng.uniform_range(-r, r)).collect();
                Resolved::Rotate {
                    angles,
                    interp: interp(mode, padding),
                    do_transform: gate < *prob,
                }
            }
            Transform::RandZoom { min_zoom, max_zoom, prob, mode, padding } => {
                let gate = rng.uniform();
                let z = rng.uniform_range(*min_zoom, *max_zoom);
                Resolved::Zoom {
                    factors: vec![z; reference.spatial_rank()],
                    interp: interp(mode, padding),
                    do_transform: gate < *prob,
                }
            }
            Transform::RandSpatialCrop { size } => {
                let dims = reference.spatial_dims();
                if size.len() != dims.len() {
                    return Err(Error::InvalidArgument(format!(
                        "crop size {size:?} does not match {} spatial dims",
                        dims.len()
                    )));
                }
                let mut start = Vec::with_capacity(dims.len());
                for a in 0..3 {
                    let u = rng.uniform();
                    if a < dims.len() {
                        let room = dims[a].saturating_sub(size[a]) + 1;
                        start.push(((u * room as f64) as i64).min(room as i64 - 1));
                    }
                }
                Resolved::Crop {
                    start,
                    size: size.clone(),
                    pad: PaddingMode::Zeros,
                    id: "rand_spatial_crop",
                }
            }
            Transform::RandAffine {
                prob,
                rotate_range,
                scale_range,
                translate_range,
                mode,
                padding,
            } => {
                let gate = rng.uniform();
                let rank = reference.spatial_rank();
                let mut draws = [0.0; 9];
                for (k, d) in draws.iter_mut().enumerate() {
                    let r = [*rotate_range, *scale_range, *translate_range][k / 3];
                    *d = rng.uniform_range(-r, r);
                }
                let rotation = match rank {
                    2 => vec![draws[0]],
                    3 => draws[..3].to_vec(),
                    _ => vec![],
                };
                let params = AffineParams {
                    rotation,
                    scale: draws[3..3 + rank].iter().map(|s| 1.0 + s).collect(),
                    shear: vec![],
                    translation: draws[6..6 + rank].to_vec(),
                };
                Resolved::Affine {
                    params,
                    interp: interp(mode, padding),
                    do_transform: gate < *prob,
                    id: "rand_affine",
                }
            }
            Transform::RandElastic3d {
                sigma_range,
                magnitude_range,
                prob,
                rotate_range,
                scale_range,
                mode,
                padding,
            } => {
                let p = ElasticParams {
                    sigma_range: *sigma_range,
                    magnitude_range: *magnitude_range,
                    prob: *prob,
                    rotate_range: *rotate_range,
                    scale_range: *scale_range,
                    interp: interp(mode, padding),
                };
                Resolved::Elastic {
                    draw: ElasticDraw::draw(rng, &p),
                    interp: p.interp,
                }
            }
            Transform::RandGaussianNoise { prob, mean, std } => {
                if !(*std >= 0.0) {
                    return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {std}")));
                }
                let gate = rng.uniform();
                let seed = rng.next_u64();
                Resolved::Noise {
                    do_transform: gate < *prob,
                    mean: *mean,
                    sigma: *std,
                    seed,
                }
            }
            Transform::RandKspaceSpike {
                prob,
                intensity_range,
                count,
            } => {
                if !(intensity_range.0 > 0.0) || intensity_range.1 < intensity_range.0 {
                    return Err(Error::InvalidArgument(format!(
                        "spike gain range {intensity_range:?} must be positive"
                    )));
                }
                Resolved::Spike(SpikeDraw::draw(
                    rng,
                    reference.spatial_dims(),
                    *intensity_range,
                    *prob,
                    *count,
                ))
            }
            Transform::OneOf { transforms, weights } => {
                let index = pick_weighted(rng, transforms.len(), weights)?;
                let child = Transform::from_step(&transforms[index])?;
                Resolved::OneOf {
                    index,
                    child: Box::new(child.draw(rng, reference)?),
                }
            }
            fixed => Resolved::Fixed(fixed.clone()),
        })
    }
}

/// Picks an index with probability proportional to `weights` (all equal
/// when empty) from one uniform draw.
pub fn pick_weighted(rng: &mut Rng, n: usize, weights: &[f64]) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidArgument("one_of needs at least one transform".into()));
    }
    let w: Vec<f64> = if weights.is_empty() { vec![1.0; n] } else { weights.to_vec() };
    if w.len() != n {
        return Err(Error::InvalidArgument(format!(
            "one_of has {n} transforms but {} weights",
            w.len()
        )));
    }
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("one_of weights must be finite and >= 0".into()));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("one_of weights are all zero".into()));
    }
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if target < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// A transform with every random choice fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    Fixed(Transform),
    Flip {
        axes: Vec<usize>,
        do_transform: bool,
        id: &'static str,
    },
    Rotate {
        angles: Vec<f64>,
        interp: Interpolation,
        do_transform: bool,
    },
    Zoom {
        factors: Vec<f64>,
        interp: Interpolation,
        do_transform: bool,
    },
    Crop {
        start: Vec<i64>,
        size: Vec<usize>,
        pad: PaddingMode,
        id: &'static str,
    },
    Affine {
        params: AffineParams,
        interp: Interpolation,
        do_transform: bool,
        id: &'static str,
    },
    Elastic {
        draw: ElasticDraw,
        interp: Interpolation,
    },
    Noise {
        do_transform: bool,
        mean: f64,
        sigma: f64,
        seed: u64,
    },
    Spike(SpikeDraw),
    OneOf {
        index: usize,
        child: Box<Resolved>,
    },
}

fn for_key(interp: Interpolation, is_label: bool) -> Interpolation {
    if is_label {
        Interpolation::new(InterpMode::Nearest, interp.padding)
    } else {
        interp
    }
}

impl Resolved {
    /// Runs the resolved transform. Label volumes use nearest-neighbour
    /// sampling for every resampling step.
    pub fn apply(&self, v: &MetaVolume, is_label: bool) -> Result<MetaVolume> {
        match self {
            Resolved::Fixed(t) => apply_fixed(t, v, is_label),
            Resolved::Flip { axes, do_transform, id } => spatial::flip_as(v, axes, id, *do_transform),
            Resolved::Rotate {
                angles,
                interp,
                do_transform,
            } => spatial::rotate_as(v, angles, for_key(*interp, is_label), "rand_rotate", *do_transform),
            Resolved::Zoom {
                factors,
                interp,
                do_transform,
            } => spatial::zoom_as(v, factors, for_key(*interp, is_label), "rand_zoom", *do_transform),
            Resolved::Crop { start, size, pad, id } => spatial::crop_pad_as(v, start, size, *pad, id),
            Resolved::Affine {
                params,
                interp,
                do_transform,
                id,
            } => spatial::affine_as(v, params, for_key(*interp, is_label), id, *do_transform),
            Resolved::Elastic { draw, interp } => {
                spatial::elastic_apply(v, draw, for_key(*interp, is_label), spatial::RAND_ELASTIC_3D)
            }
            Resolved::Noise {
                do_transform,
                mean,
                sigma,
                seed,
            } => Ok(intensity::noise_apply(v, *do_transform, *mean, *sigma, *seed)),
            Resolved::Spike(d) => intensity::spike_apply(v, d),
            Resolved::OneOf { index, child } => {
                let mut out = child.apply(v, is_label)?;
                let rec = TraceRecord::new(ONE_OF, true, v).with("index", *index);
                out.push_trace(rec);
                Ok(out)
            }
        }
    }

    /// Parameters shared across keys, for trace comparisons.
    pub fn do_transform(&self) -> bool {
        match self {
            Resolved::Fixed(_) | Resolved::Crop { .. } | Resolved::OneOf { .. } => true,
            Resolved::Flip { do_transform, .. }
            | Resolved::Rotate { do_transform, .. }
            | Resolved::Zoom { do_transform, .. }
            | Resolved::Affine { do_transform, .. }
            | Resolved::Noise { do_transform, .. } => *do_transform,
            Resolved::Elastic { draw, .. } => draw.do_transform,
            Resolved::Spike(d) => d.do_transform,
        }
    }
}

fn apply_fixed(t: &Transform, v: &MetaVolume, is_label: bool) -> Result<MetaVolume> {
    let interp = |mode: &InterpMode, padding: &PaddingMode| for_key(Interpolation::new(*mode, *padding), is_label);
    match t {
        Transform::Orientation { axcodes } => spatial::orientation_to(v, axcodes),
        Transform::Spacing { pixdim, mode, padding } => spatial::spacing_to(v, pixdim, interp(mode, padding)),
        Transform::Flip { axes } => spatial::flip(v, axes),
        Transform::Rotate { angles, mode, padding } => spatial::rotate(v, angles, interp(mode, padding)),
        Transform::Zoom { factors, mode, padding } => spatial::zoom(v, factors, interp(mode, padding)),
        Transform::CropPad { start, size, mode } => spatial::crop_pad(v, start, size, *mode),
        Transform::CenterCrop { size } => {
            check_len(size.len(), v)?;
            let start = spatial::center_start(v.spatial_dims(), size);
            spatial::crop_pad_as(v, &start, size, PaddingMode::Zeros, "center_crop")
        }
        Transform::SpatialPad { size, mode } => {
            check_len(size.len(), v)?;
            let target: Vec<usize> = v.spatial_dims().iter().zip(size).map(|(&d, &s)| d.max(s)).collect();
            let start = spatial::center_start(v.spatial_dims(), &target);
            spatial::crop_pad_as(v, &start, &target, *mode, "spatial_pad")
        }
        Transform::Affine { params, mode, padding } => spatial::affine_resample(v, params, interp(mode, padding)),
        Transform::NormalizeIntensity { nonzero } => intensity::normalize_intensity(v, *nonzero),
        Transform::ScaleIntensityRange {
            a_min,
            a_max,
            b_min,
            b_max,
            clip,
        } => intensity::scale_intensity_range(v, *a_min, *a_max, *b_min, *b_max, *clip),
        random => Err(Error::InvalidArgument(format!(
            "random transform '{}' applied without a draw",
            random.name()
        ))),
    }
}

fn check_len(n: usize, v: &MetaVolume) -> Result<()> {
    if n != v.spatial_rank() {
        return Err(Error::InvalidArgument(format!(
            "size has {n} entries, volume has {} spatial dims",
            v.spatial_rank()
        )));
    }
    Ok(())
}

const NON_INVERTIBLE: &[&str] = &[
    spatial::WARP,
    spatial::RAND_ELASTIC_3D,
    intensity::RAND_GAUSSIAN_NOISE,
    intensity::RAND_KSPACE_SPIKE,
];

/// Pops the top record of `v` and undoes it.
pub fn invert_last(mut v: MetaVolume) -> Result<MetaVolume> {
    let rec = v.applied.pop().ok_or(Error::EmptyTrace)?;
    let id = rec.transform_id.as_str();
    let known = id == ONE_OF
        || NON_INVERTIBLE.contains(&id)
        || spatial::spatial_inverse_kind(id).is_some()
        || matches!(id, intensity::NORMALIZE_INTENSITY | intensity::SCALE_INTENSITY_RANGE);
    if !known {
        return Err(Error::UnknownTransform(rec.transform_id));
    }
    if !rec.do_transform || id == ONE_OF {
        return Ok(v);
    }
    if NON_INVERTIBLE.contains(&id) {
        return Err(Error::NotInvertible(rec.transform_id));
    }
    if let Some(out) = spatial::invert_spatial(&v, &rec)? {
        return Ok(out);
    }
    if let Some(out) = intensity::invert_intensity(&v, &rec)? {
        return Ok(out);
    }
    Err(Error::NotInvertible(rec.transform_id))
}
