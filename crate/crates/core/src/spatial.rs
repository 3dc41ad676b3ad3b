//! Geometry-aware transforms. Every operation keeps the affine consistent
//! with the data and pushes a [`TraceRecord`]; the invertible ones are undone
//! by [`invert_record`].

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{mat3_mul, parse_axis_codes, rotation_about, Affine};
use crate::interp::{resample_affine, resample_with, resolve_index, Interpolation, PaddingMode};
use crate::rng::Rng;
use crate::volume::{increment, MetaVolume, Tensor, TraceRecord};

pub const ORIENTATION: &str = "orientation";
pub const SPACING: &str = "spacing";
pub const FLIP: &str = "flip";
pub const ROTATE: &str = "rotate";
pub const ZOOM: &str = "zoom";
pub const CROP_PAD: &str = "crop_pad";
pub const AFFINE: &str = "affine";
pub const RAND_ELASTIC_3D: &str = "rand_elastic_3d";
pub const WARP: &str = "warp";

/// Permutes and reverses axes: output axis `k` reads input axis `perm[k]`,
/// reversed when `flips[k]`.
pub fn permute_flip(t: &Tensor, perm: &[usize], flips: &[bool]) -> Result<Tensor> {
    let rank = t.spatial_rank();
    let in_dims = t.spatial_dims().to_vec();
    let mut seen = vec![false; rank];
    if perm.len() != rank || flips.len() != rank {
        return Err(Error::InvalidArgument("permutation length differs from rank".into()));
    }
    for &p in perm {
        if p >= rank || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
    let mut shape = vec![t.channels()];
    shape.extend_from_slice(&out_dims);
    let n = t.spatial_len();
    let mut data = vec![0f32; t.data().len()];
    let mut j = vec![0usize; rank];
    let mut i = vec![0usize; rank];
    for o in 0..n {
        for k in 0..rank {
            let a = perm[k];
            i[a] = if flips[k] { in_dims[a] - 1 - j[k] } else { j[k] };
        }
        let src = t.offset(&i);
        for c in 0..t.channels() {
            data[c * n + o] = t.data()[c * n + src];
        }
        increment(&mut j, &out_dims);
    }
    Tensor::new(shape, data)
}

fn permute_flip_affine(a: &Affine, in_dims: &[usize], perm: &[usize], flips: &[bool]) -> Affine {
    let mut out = *a;
    let mut t = a.translation_part();
    for k in 0..perm.len() {
        let col = a.column(perm[k]);
        if flips[k] {
            let d = (in_dims[perm[k]] - 1) as f64;
            for r in 0..3 {
                t[r] += col[r] * d;
            }
            out.set_column(k, [-col[0], -col[1], -col[2]]);
        } else {
            out.set_column(k, col);
        }
    }
    for (r, v) in t.iter().enumerate() {
        out.0[r][3] = *v;
    }
    out
}

/// Reorients the data so its axis codes read `codes` (e.g. "RAS"). Lossless;
/// world coordinates of every voxel are preserved.
pub fn orientation_to(v: &MetaVolume, codes: &str) -> Result<MetaVolume> {
    if v.spatial_rank() != 3 {
        return Err(Error::InvalidArgument("orientation needs 3 spatial dims".into()));
    }
    let target = parse_axis_codes(codes)?;
    let current = v.affine.axis_codes()?;
    let mut perm = [0usize; 3];
    let mut flips = [false; 3];
    for k in 0..3 {
        let a = (0..3)
            .find(|&a| current[a].world_axis() == target[k].world_axis())
            .expect("axis codes cover every world axis");
        perm[k] = a;
        flips[k] = current[a].positive() != target[k].positive();
    }
    let mut out = v.with_array(permute_flip(&v.array, &perm, &flips)?);
    out.affine = permute_flip_affine(&v.affine, v.spatial_dims(), &perm, &flips);
    out.push_trace(
        TraceRecord::new(ORIENTATION, true, v)
            .with("codes", codes.to_ascii_uppercase())
            .with("perm", json!(perm))
            .with("flips", json!(flips)),
    );
    Ok(out)
}

fn check_axes(v: &MetaVolume, axes: &[usize]) -> Result<Vec<bool>> {
    let mut flips = vec![false; v.spatial_rank()];
    for &a in axes {
        if a >= v.spatial_rank() {
            return Err(Error::InvalidArgument(format!(
                "axis {a} out of range for {} spatial dims",
                v.spatial_rank()
            )));
        }
        flips[a] = true;
    }
    Ok(flips)
}

pub(crate) fn flip_as(v: &MetaVolume, axes: &[usize], id: &str, do_transform: bool) -> Result<MetaVolume> {
    let flips = check_axes(v, axes)?;
    let mut sorted: Vec<usize> = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let rec = TraceRecord::new(id, do_transform, v).with("axes", json!(sorted));
    let mut out = if do_transform && flips.iter().any(|&f| f) {
        let perm: Vec<usize> = (0..v.spatial_rank()).collect();
        let mut o = v.with_array(permute_flip(&v.array, &perm, &flips)?);
        o.affine = permute_flip_affine(&v.affine, v.spatial_dims(), &perm, &flips);
        o
    } else {
        v.clone()
    };
    out.push_trace(rec);
    Ok(out)
}

/// Reverses the data along `axes`, adjusting the affine so world positions
/// are unchanged.
pub fn flip(v: &MetaVolume, axes: &[usize]) -> Result<MetaVolume> {
    flip_as(v, axes, FLIP, true)
}

fn round_half_away(x: f64) -> f64 {
    // f64::round rounds half away from zero.
    x.round()
}

/// Output grid size for a spacing change.
pub fn spacing_dims(dims: &[usize], old: &[f64], new: &[f64]) -> Vec<usize> {
    dims.iter()
        .zip(old.iter().zip(new))
        .map(|(&d, (&o, &n))| (round_half_away(d as f64 * o / n) as i64).max(1) as usize)
        .collect()
}

fn interp_record(rec: TraceRecord, map: &Affine, interp: Interpolation) -> TraceRecord {
    rec.with("voxel_map", json!(map.to_rows()))
        .with("interp", serde_json::to_value(interp).expect("interp serialises"))
}

fn resample_traced(
    v: &MetaVolume,
    out_dims: &[usize],
    map: &Affine,
    affine: Affine,
    interp: Interpolation,
    rec: TraceRecord,
) -> Result<MetaVolume> {
    let mut out = v.with_array(resample_affine(&v.array, out_dims, map, interp)?);
    out.affine = affine;
    out.push_trace(interp_record(rec, map, interp));
    Ok(out)
}

/// Resamples to `new_spacing` mm per spatial axis. The world position of
/// voxel (0,0,0) is kept.
pub fn spacing_to(v: &MetaVolume, new_spacing: &[f64], interp: Interpolation) -> Result<MetaVolume> {
    let rank = v.spatial_rank();
    if new_spacing.len() != rank {
        return Err(Error::InvalidArgument(format!(
            "need {rank} spacing values, got {}",
            new_spacing.len()
        )));
    }
    if new_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {new_spacing:?}")));
    }
    let old = v.affine.spacing();
    let out_dims = spacing_dims(v.spatial_dims(), &old[..rank], new_spacing);
    let mut ratio = [1.0; 3];
    for a in 0..rank {
        ratio[a] = new_spacing[a] / old[a];
    }
    let map = Affine::diag(ratio);
    let affine = v.affine.mul(&map);
    let rec = TraceRecord::new(SPACING, true, v).with("pixdim", json!(new_spacing));
    resample_traced(v, &out_dims, &map, affine, interp, rec)
}

fn center(dims: &[usize]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (o, &d) in c.iter_mut().zip(dims) {
        *o = (d as f64 - 1.0) / 2.0;
    }
    c
}

/// Output→input voxel map for a forward content transform `x ↦ c + t + L(x − c)`.
pub fn centered_map(dims: &[usize], linear: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Affine> {
    let c = center(dims);
    let forward = Affine::translation([c[0] + translation[0], c[1] + translation[1], c[2] + translation[2]])
        .mul(&Affine::from_parts(linear, [0.0; 3]))
        .mul(&Affine::translation([-c[0], -c[1], -c[2]]));
    forward
        .inverse()
        .map_err(|_| Error::InvalidArgument("composed transform matrix is singular".into()))
}

/// Rotation matrix for 2 (one angle) or 3 (angles about axes 0, 1, 2,
/// applied in that order) spatial dims.
pub fn rotation_matrix(rank: usize, angles: &[f64]) -> Result<[[f64; 3]; 3]> {
    match (rank, angles.len()) {
        (2, 1) => Ok(rotation_about(2, angles[0])),
        (3, 3) => Ok(mat3_mul(
            &rotation_about(2, angles[2]),
            &mat3_mul(&rotation_about(1, angles[1]), &rotation_about(0, angles[0])),
        )),
        (2 | 3, n) => Err(Error::InvalidArgument(format!(
            "{rank} spatial dims need {} rotation angles, got {n}",
            if rank == 2 { 1 } else { 3 }
        ))),
        _ => Err(Error::InvalidArgument(format!("rotate needs 2 or 3 spatial dims, got {rank}"))),
    }
}

pub(crate) fn rotate_as(
    v: &MetaVolume,
    angles: &[f64],
    interp: Interpolation,
    id: &str,
    do_transform: bool,
) -> Result<MetaVolume> {
    let r = rotation_matrix(v.spatial_rank(), angles)?;
    let rec = TraceRecord::new(id, do_transform, v).with("angles", json!(angles));
    if !do_transform {
        let mut out = v.clone();
        out.push_trace(rec);
        return Ok(out);
    }
    let map = centered_map(v.spatial_dims(), r, [0.0; 3])?;
    let affine = v.affine.mul(&map);
    resample_traced(v, v.spatial_dims(), &map, affine, interp, rec)
}

/// Rotates the content about the spatial center; output dims are unchanged.
pub fn rotate(v: &MetaVolume, angles: &[f64], interp: Interpolation) -> Result<MetaVolume> {
    rotate_as(v, angles, interp, ROTATE, true)
}

pub(crate) fn zoom_as(
    v: &MetaVolume,
    factors: &[f64],
    interp: Interpolation,
    id: &str,
    do_transform: bool,
) -> Result<MetaVolume> {
    let rank = v.spatial_rank();
    if factors.len() != rank || factors.iter().any(|&z| !(z > 0.0) || !z.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "zoom needs {rank} positive factors, got {factors:?}"
        )));
    }
    let rec = TraceRecord::new(id, do_transform, v).with("factors", json!(factors));
    if !do_transform {
        let mut out = v.clone();
        out.push_trace(rec);
        return Ok(out);
    }
    let mut lin = [[0.0; 3]; 3];
    for a in 0..3 {
        lin[a][a] = if a < rank { factors[a] } else { 1.0 };
    }
    let map = centered_map(v.spatial_dims(), lin, [0.0; 3])?;
    let affine = v.affine.mul(&map);
    resample_traced(v, v.spatial_dims(), &map, affine, interp, rec)
}

/// Magnifies the content by `factors` about the center, keeping dims.
pub fn zoom(v: &MetaVolume, factors: &[f64], interp: Interpolation) -> Result<MetaVolume> {
    zoom_as(v, factors, interp, ZOOM, true)
}

/// Extracts `[start, start + size)` per axis; regions outside the input are
/// filled per `pad`.
pub fn crop_pad_as(
    v: &MetaVolume,
    start: &[i64],
    size: &[usize],
    pad: PaddingMode,
    id: &str,
) -> Result<MetaVolume> {
    let rank = v.spatial_rank();
    if start.len() != rank || size.len() != rank {
        return Err(Error::InvalidArgument(format!(
            "crop/pad needs {rank} start and size values"
        )));
    }
    if size.contains(&0) {
        return Err(Error::InvalidArgument("crop/pad size must be >= 1".into()));
    }
    let dims = v.spatial_dims().to_vec();
    let n: usize = size.iter().product();
    let n_in = v.array.spatial_len();
    let mut shape = vec![v.channels()];
    shape.extend_from_slice(size);
    let mut data = vec![0f32; n * v.channels()];
    let mut j = vec![0usize; rank];
    let mut i = vec![0usize; rank];
    for o in 0..n {
        let mut inside = true;
        for a in 0..rank {
            match resolve_index(j[a] as i64 + start[a], dims[a], pad) {
                Some(x) => i[a] = x,
                None => inside = false,
            }
        }
        if inside {
            let src = v.array.offset(&i);
            for c in 0..v.channels() {
                data[c * n + o] = v.array.data()[c * n_in + src];
            }
        }
        increment(&mut j, size);
    }
    let mut out = v.with_array(Tensor::new(shape, data)?);
    let mut s3 = [0.0; 3];
    for a in 0..rank {
        s3[a] = start[a] as f64;
    }
    let t = v.affine.apply(s3);
    for (r, x) in t.iter().enumerate() {
        out.affine.0[r][3] = *x;
    }
    let lossy = (0..rank).any(|a| start[a] > 0 || start[a] + (size[a] as i64) < dims[a] as i64);
    out.push_trace(
        TraceRecord::new(id, true, v)
            .with("start", json!(start))
            .with("size", json!(size))
            .with("pad", serde_json::to_value(pad).expect("padding serialises"))
            .with("lossy_inverse", lossy),
    );
    Ok(out)
}

pub fn crop_pad(v: &MetaVolume, start: &[i64], size: &[usize], pad: PaddingMode) -> Result<MetaVolume> {
    crop_pad_as(v, start, size, pad, CROP_PAD)
}

/// Start offsets that center a window of `size` in `dims` (negative when
/// padding).
pub fn center_start(dims: &[usize], size: &[usize]) -> Vec<i64> {
    dims.iter()
        .zip(size)
        .map(|(&d, &s)| (d as i64 - s as i64).div_euclid(2))
        .collect()
}

/// Parameters of [`affine_resample`]. Rotation angles follow
/// [`rotation_matrix`]; shear holds the upper-triangular terms (01, 02, 12).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineParams {
    pub rotation: Vec<f64>,
    pub scale: Vec<f64>,
    pub shear: Vec<f64>,
    pub translation: Vec<f64>,
}

impl AffineParams {
    /// Forward content matrix parts (linear, translation) for `rank` dims.
    pub fn forward(&self, rank: usize) -> Result<([[f64; 3]; 3], [f64; 3])> {
        if !(1..=3).contains(&rank) {
            return Err(Error::InvalidArgument(format!("bad spatial rank {rank}")));
        }
        let rot = if self.rotation.is_empty() || rank == 1 {
            rotation_about(0, 0.0)
        } else {
            rotation_matrix(rank, &self.rotation)?
        };
        let mut scale = [[0.0; 3]; 3];
        for a in 0..3 {
            scale[a][a] = if a < rank { self.scale.get(a).copied().unwrap_or(1.0) } else { 1.0 };
        }
        if (0..rank).any(|a| scale[a][a] == 0.0) {
            return Err(Error::InvalidArgument("affine scale must be nonzero".into()));
        }
        let mut shear = rotation_about(0, 0.0);
        let slots = [(0, 1), (0, 2), (1, 2)];
        for (k, &s) in self.shear.iter().enumerate() {
            let (r, c) = *slots.get(k).ok_or_else(|| Error::InvalidArgument("at most 3 shear terms".into()))?;
            if c >= rank {
                return Err(Error::InvalidArgument(format!("shear term {k} needs more spatial dims")));
            }
            shear[r][c] = s;
        }
        let mut t = [0.0; 3];
        for (a, &x) in self.translation.iter().enumerate().take(rank) {
            t[a] = x;
        }
        let lin = mat3_mul(&rot, &mat3_mul(&shear, &scale));
        Ok((lin, t))
    }
}

pub(crate) fn affine_as(
    v: &MetaVolume,
    params: &AffineParams,
    interp: Interpolation,
    id: &str,
    do_transform: bool,
) -> Result<MetaVolume> {
    let (lin, t) = params.forward(v.spatial_rank())?;
    let map = centered_map(v.spatial_dims(), lin, t)?;
    let rec = TraceRecord::new(id, do_transform, v).with(
        "params",
        serde_json::to_value(params).expect("affine params serialise"),
    );
    if !do_transform {
        let mut out = v.clone();
        out.push_trace(rec);
        return Ok(out);
    }
    let affine = v.affine.mul(&map);
    resample_traced(v, v.spatial_dims(), &map, affine, interp, rec)
}

/// Resamples through a centered affine built from rotation, scale, shear and
/// translation.
pub fn affine_resample(v: &MetaVolume, params: &AffineParams, interp: Interpolation) -> Result<MetaVolume> {
    affine_as(v, params, interp, AFFINE, true)
}

/// Resamples so that `out(x) = in(x + field(x))`. `field` has one channel
/// per spatial axis, in voxel units.
pub fn warp(v: &MetaVolume, field: &Tensor, interp: Interpolation) -> Result<MetaVolume> {
    let rank = v.spatial_rank();
    if field.channels() != rank || field.spatial_dims() != v.spatial_dims() {
        return Err(Error::Shape(format!(
            "displacement field shape {:?} does not match volume spatial dims {:?}",
            field.shape(),
            v.spatial_dims()
        )));
    }
    let mut out = v.with_array(resample_with(&v.array, v.spatial_dims(), interp, |idx| {
        let mut p = [0.0; 3];
        for a in 0..rank {
            p[a] = idx[a] as f64 + field.get(a, idx) as f64;
        }
        p
    })?);
    out.affine = v.affine;
    out.push_trace(
        TraceRecord::new(WARP, true, v)
            .with("invertible", false)
            .with("interp", serde_json::to_value(interp).expect("interp serialises")),
    );
    Ok(out)
}

/// Ranges for [`rand_elastic_3d`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    /// Control-grid spacing in voxels.
    pub sigma_range: (f64, f64),
    pub magnitude_range: (f64, f64),
    pub prob: f64,
    /// Maximum absolute rotation (radians) about each axis.
    #[serde(default)]
    pub rotate_range: f64,
    /// Maximum absolute scale deviation from 1 per axis.
    #[serde(default)]
    pub scale_range: f64,
    #[serde(default)]
    pub interp: Interpolation,
}

/// Everything an elastic deformation is built from. Drawn with exactly 10
/// uniform draws: gate, sigma, magnitude, three angles, three scales and the
/// control-grid seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticDraw {
    pub do_transform: bool,
    pub sigma: f64,
    pub magnitude: f64,
    pub angles: [f64; 3],
    pub scales: [f64; 3],
    pub grid_seed: u64,
}

impl ElasticDraw {
    pub fn draw(rng: &mut Rng, p: &ElasticParams) -> Self {
        let gate = rng.uniform();
        let sigma = rng.uniform_range(p.sigma_range.0, p.sigma_range.1);
        let magnitude = rng.uniform_range(p.magnitude_range.0, p.magnitude_range.1);
        let mut angles = [0.0; 3];
        for a in angles.iter_mut() {
            *a = rng.uniform_range(-p.rotate_range, p.rotate_range);
        }
        let mut scales = [1.0; 3];
        for s in scales.iter_mut() {
            *s = 1.0 + rng.uniform_range(-p.scale_range, p.scale_range);
        }
        let grid_seed = rng.next_u64();
        ElasticDraw {
            do_transform: gate < p.prob,
            sigma,
            magnitude,
            angles,
            scales,
            grid_seed,
        }
    }

    pub fn affine_params(&self) -> AffineParams {
        AffineParams {
            rotation: self.angles.to_vec(),
            scale: self.scales.to_vec(),
            ..Default::default()
        }
    }

    /// Dense displacement field: Gaussian offsets on a control grid of
    /// spacing `sigma` voxels, scaled by `magnitude`, trilinearly upsampled.
    pub fn field(&self, dims: &[usize]) -> Result<Tensor> {
        let spacing = self.sigma.max(1.0);
        let grid: Vec<usize> = dims
            .iter()
            .map(|&d| ((d as f64 - 1.0) / spacing).ceil() as usize + 1)
            .collect();
        let mut shape = vec![dims.len()];
        shape.extend_from_slice(&grid);
        let mut g = Rng::new(self.grid_seed);
        let coarse = Tensor::from_fn(shape, |_, _| (g.gaussian() * self.magnitude) as f32)?;
        let mut out_shape = vec![dims.len()];
        out_shape.extend_from_slice(dims);
        let up = resample_with(&coarse, dims, Interpolation::trilinear(), |idx| {
            let mut p = [0.0; 3];
            for (o, &i) in p.iter_mut().zip(idx) {
                *o = i as f64 / spacing;
            }
            p
        })?;
        debug_assert_eq!(up.shape(), &out_shape[..]);
        Ok(up)
    }
}

pub(crate) fn elastic_apply(v: &MetaVolume, d: &ElasticDraw, interp: Interpolation, id: &str) -> Result<MetaVolume> {
    if v.spatial_rank() != 3 {
        return Err(Error::InvalidArgument("rand_elastic_3d needs 3 spatial dims".into()));
    }
    let rec = TraceRecord::new(id, d.do_transform, v)
        .with("invertible", false)
        .with("draw", serde_json::to_value(d).expect("draw serialises"));
    if !d.do_transform {
        let mut out = v.clone();
        out.push_trace(rec);
        return Ok(out);
    }
    let (lin, t) = d.affine_params().forward(3)?;
    let map = centered_map(v.spatial_dims(), lin, t)?;
    let field = if d.magnitude != 0.0 {
        Some(d.field(v.spatial_dims())?)
    } else {
        None
    };
    let mut out = v.with_array(resample_with(&v.array, v.spatial_dims(), interp, |idx| {
        let mut p = map.apply([idx[0] as f64, idx[1] as f64, idx[2] as f64]);
        if let Some(f) = &field {
            for (a, x) in p.iter_mut().enumerate() {
                *x += f.get(a, idx) as f64;
            }
        }
        p
    })?);
    out.affine = v.affine;
    out.push_trace(rec);
    Ok(out)
}

/// With probability `prob`, deforms by a smooth random field composed with a
/// small random affine.
pub fn rand_elastic_3d(v: &MetaVolume, rng: &mut Rng, params: &ElasticParams) -> Result<MetaVolume> {
    let d = ElasticDraw::draw(rng, params);
    elastic_apply(v, &d, params.interp, RAND_ELASTIC_3D)
}

/// Kind of inverse a spatial transform id supports.
pub(crate) enum SpatialInverse {
    Flip,
    Orientation,
    CropPad,
    Resample,
}

pub(crate) fn spatial_inverse_kind(id: &str) -> Option<SpatialInverse> {
    Some(match id {
        FLIP | "rand_flip" => SpatialInverse::Flip,
        ORIENTATION => SpatialInverse::Orientation,
        CROP_PAD | "center_crop" | "spatial_pad" | "rand_spatial_crop" => SpatialInverse::CropPad,
        SPACING | ROTATE | "rand_rotate" | ZOOM | "rand_zoom" | AFFINE | "rand_affine" => SpatialInverse::Resample,
        _ => return None,
    })
}

/// Undoes one spatial record (already popped from `v.applied`). Returns
/// `None` when `rec` is not a spatial invertible transform.
pub(crate) fn invert_spatial(v: &MetaVolume, rec: &TraceRecord) -> Result<Option<MetaVolume>> {
    let Some(kind) = spatial_inverse_kind(&rec.transform_id) else {
        return Ok(None);
    };
    if !rec.do_transform {
        return Ok(Some(v.clone()));
    }
    let array = match kind {
        SpatialInverse::Flip => {
            let axes: Vec<usize> = rec.get("axes")?;
            let flips = check_axes(v, &axes)?;
            let perm: Vec<usize> = (0..v.spatial_rank()).collect();
            permute_flip(&v.array, &perm, &flips)?
        }
        SpatialInverse::Orientation => {
            let perm: Vec<usize> = rec.get("perm")?;
            let flips: Vec<bool> = rec.get("flips")?;
            let mut inv_perm = vec![0; perm.len()];
            let mut inv_flips = vec![false; perm.len()];
            for (k, &a) in perm.iter().enumerate() {
                inv_perm[a] = k;
                inv_flips[a] = flips[k];
            }
            permute_flip(&v.array, &inv_perm, &inv_flips)?
        }
        SpatialInverse::CropPad => {
            let start: Vec<i64> = rec.get("start")?;
            let neg: Vec<i64> = start.iter().map(|s| -s).collect();
            let tmp = crop_pad_as(v, &neg, &rec.orig_size, PaddingMode::Zeros, CROP_PAD)?;
            tmp.array
        }
        SpatialInverse::Resample => {
            let rows: Vec<f64> = rec.get("voxel_map")?;
            let rows: [f64; 16] = rows
                .try_into()
                .map_err(|_| Error::Format("voxel_map must hold 16 numbers".into()))?;
            let interp: Interpolation = rec.get("interp")?;
            let inv = Affine::from_rows(rows).inverse()?;
            resample_affine(&v.array, &rec.orig_size, &inv, interp)?
        }
    };
    if array.spatial_dims() != &rec.orig_size[..] {
        return Err(Error::Shape(format!(
            "inverse of '{}' produced dims {:?}, expected {:?}",
            rec.transform_id,
            array.spatial_dims(),
            rec.orig_size
        )));
    }
    let mut out = v.with_array(array);
    out.affine = rec.orig_affine;
    Ok(Some(out))
}
