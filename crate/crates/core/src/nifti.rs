//! NIfTI-1 single-file (`.nii`) reader and writer, plus a synthetic volume
//! generator.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Affine;
use crate::rng::Rng;
use crate::volume::{increment, MetaValue, MetaVolume, Tensor};

pub const HEADER_SIZE: usize = 348;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// The header fields this engine reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            dim: [0; 8],
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim: [1.0; 8],
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
            magic: *MAGIC_SINGLE,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl Cursor<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if self.swap {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

impl NiftiHeader {
    /// Parses the first 348 bytes. Byte order is detected from `sizeof_hdr`.
    pub fn parse(bytes: &[u8]) -> Result<(Self, bool)> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Truncated(format!(
                "NIfTI header needs {HEADER_SIZE} bytes, file has {}",
                bytes.len()
            )));
        }
        let le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let swap = match le {
            348 => false,
            _ if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == 348 => true,
            other => return Err(Error::Format(format!("sizeof_hdr is {other}, expected 348"))),
        };
        let c = Cursor { bytes, swap };
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[344..348]);
        if &magic != MAGIC_SINGLE {
            return Err(Error::BadMagic {
                expected: "n+1\\0".into(),
                found: magic.to_vec(),
            });
        }
        let mut h = NiftiHeader {
            magic,
            ..Default::default()
        };
        for i in 0..8 {
            h.dim[i] = c.i16(40 + 2 * i);
            h.pixdim[i] = c.f32(76 + 4 * i);
        }
        h.datatype = c.i16(70);
        h.bitpix = c.i16(72);
        h.vox_offset = c.f32(108);
        h.scl_slope = c.f32(112);
        h.scl_inter = c.f32(116);
        h.qform_code = c.i16(252);
        h.sform_code = c.i16(254);
        for i in 0..3 {
            h.quatern[i] = c.f32(256 + 4 * i);
            h.qoffset[i] = c.f32(268 + 4 * i);
            for j in 0..4 {
                h.srow[i][j] = c.f32(280 + 16 * i + 4 * j);
            }
        }
        Ok((h, swap))
    }

    /// Little-endian 348-byte encoding.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        let mut put = |at: usize, src: &[u8]| b[at..at + src.len()].copy_from_slice(src);
        put(0, &348i32.to_le_bytes());
        // regular = 'r'
        put(38, b"r");
        for i in 0..8 {
            put(40 + 2 * i, &self.dim[i].to_le_bytes());
            put(76 + 4 * i, &self.pixdim[i].to_le_bytes());
        }
        put(70, &self.datatype.to_le_bytes());
        put(72, &self.bitpix.to_le_bytes());
        put(108, &self.vox_offset.to_le_bytes());
        put(112, &self.scl_slope.to_le_bytes());
        put(116, &self.scl_inter.to_le_bytes());
        // xyzt_units: mm
        put(123, &[2u8]);
        put(252, &self.qform_code.to_le_bytes());
        put(254, &self.sform_code.to_le_bytes());
        for i in 0..3 {
            put(256 + 4 * i, &self.quatern[i].to_le_bytes());
            put(268 + 4 * i, &self.qoffset[i].to_le_bytes());
            for j in 0..4 {
                put(280 + 16 * i + 4 * j, &self.srow[i][j].to_le_bytes());
            }
        }
        put(344, &self.magic);
        b
    }

    /// Voxel→world affine: sform rows when `sform_code > 0`, else the qform
    /// quaternion when `qform_code > 0`, else `diag(pixdim)`.
    pub fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut m = Affine::identity();
            for i in 0..3 {
                for j in 0..4 {
                    m.0[i][j] = self.srow[i][j] as f64;
                }
            }
            return m;
        }
        let px = [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        ];
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = [px[0], px[1], px[2] * qfac];
            let mut lin = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    lin[i][j] = r[i][j] * scale[j];
                }
            }
            return Affine::from_parts(lin, self.qoffset.map(|v| v as f64));
        }
        let fix = |p: f64| if p > 0.0 { p } else { 1.0 };
        Affine::diag([fix(px[0]), fix(px[1]), fix(px[2])])
    }
}

fn check_gzip(path: &Path, bytes: &[u8]) -> Result<()> {
    if bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B {
        return Err(Error::CompressedNifti(path.to_path_buf()));
    }
    Ok(())
}

/// Loads an uncompressed single-file NIfTI-1 volume.
pub fn load(path: impl AsRef<Path>) -> Result<MetaVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_gzip(path, &bytes)?;
    let mut v = decode(&bytes)?;
    v.meta.insert(
        "filename".into(),
        MetaValue::Str(path.to_string_lossy().into_owned()),
    );
    Ok(v)
}

/// Decodes an in-memory `.nii` image.
pub fn decode(bytes: &[u8]) -> Result<MetaVolume> {
    let (h, swap) = NiftiHeader::parse(bytes)?;
    let ndim = h.dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim} out of range")));
    }
    let ndim = ndim as usize;
    let dims: Vec<usize> = (1..=ndim)
        .map(|i| h.dim[i].max(1) as usize)
        .collect();
    let spatial: Vec<usize> = dims[..ndim.min(3)].to_vec();
    let channels: usize = dims[ndim.min(3)..].iter().product();
    let nvox = spatial.iter().product::<usize>() * channels;

    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDtype(other as i32)),
    };
    let start = h.vox_offset.max(0.0) as usize;
    let needed = start + nvox * width;
    if bytes.len() < needed {
        return Err(Error::Truncated(format!(
            "NIfTI data section needs {needed} bytes, file has {}",
            bytes.len()
        )));
    }
    let body = &bytes[start..needed];
    let fetch = |k: usize| -> f64 {
        let s = &body[k * width..(k + 1) * width];
        let mut b = [0u8; 8];
        b[..width].copy_from_slice(s);
        if swap {
            b[..width].reverse();
        }
        match h.datatype {
            DT_UINT8 => b[0] as f64,
            DT_INT16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            DT_FLOAT32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            _ => f64::from_le_bytes(b),
        }
    };
    let scale = h.scl_slope != 0.0 && h.scl_slope.is_finite() && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);

    let nsp: usize = spatial.iter().product();
    let mut data = vec![0f32; nvox];
    let mut idx = vec![0usize; spatial.len()];
    // Our layout is row-major (last axis fastest); NIfTI stores the first
    // axis fastest.
    for ours in 0..nsp {
        let mut theirs = 0;
        for a in (0..spatial.len()).rev() {
            theirs = theirs * spatial[a] + idx[a];
        }
        for c in 0..channels {
            let raw = fetch(c * nsp + theirs);
            let v = if scale { raw * slope + inter } else { raw };
            data[c * nsp + ours] = v as f32;
        }
        increment(&mut idx, &spatial);
    }

    let mut shape = vec![channels];
    shape.extend_from_slice(&spatial);
    let affine = h.affine();
    let mut v = MetaVolume::new(Tensor::new(shape, data)?, affine)?;
    v.meta.insert("datatype".into(), MetaValue::Num(h.datatype as f64));
    v.meta.insert(
        "pixdim".into(),
        MetaValue::List(h.pixdim[1..=spatial.len()].iter().map(|&p| p as f64).collect()),
    );
    Ok(v)
}

/// Encodes a volume with three spatial axes as an f32 NIfTI-1 image. More
/// than one channel is stored along the fourth axis (`dim[0] = 4`).
pub fn encode(v: &MetaVolume) -> Result<Vec<u8>> {
    let sp = v.spatial_dims();
    if sp.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "NIfTI output needs 3 spatial dims, volume has {}",
            sp.len()
        )));
    }
    let c = v.channels();
    let mut h = NiftiHeader::default();
    let too_big = |d: usize| i16::try_from(d).map_err(|_| Error::InvalidArgument(format!("dim {d} exceeds NIfTI-1 limit")));
    h.dim = [if c > 1 { 4 } else { 3 }, too_big(sp[0])?, too_big(sp[1])?, too_big(sp[2])?, too_big(c)?, 1, 1, 1];
    let spacing = v.affine.spacing();
    h.pixdim = [
        if v.affine.det3() < 0.0 { -1.0 } else { 1.0 },
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    h.sform_code = 1;
    for i in 0..3 {
        for j in 0..4 {
            h.srow[i][j] = v.affine.0[i][j] as f32;
        }
    }

    let nsp: usize = sp.iter().product();
    let mut out = Vec::with_capacity(DATA_OFFSET + 4 * nsp * c);
    out.extend_from_slice(&h.to_bytes());
    out.extend_from_slice(&[0u8; DATA_OFFSET - HEADER_SIZE]);
    let mut body = vec![0f32; nsp * c];
    let mut idx = [0usize; 3];
    for ours in 0..nsp {
        let theirs = idx[0] + sp[0] * (idx[1] + sp[1] * idx[2]);
        for ch in 0..c {
            body[ch * nsp + theirs] = v.array.data()[ch * nsp + ours];
        }
        increment(&mut idx, sp);
    }
    for x in body {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn save(v: &MetaVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic ellipsoid generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub dims: Vec<usize>,
    pub num_objects: usize,
    pub noise_sigma: f64,
    /// Label objects 1..=n instead of a binary mask.
    pub per_object_labels: bool,
}

/// Random ellipsoids of intensity 1 on a zero background plus Gaussian noise,
/// with the noise-free label mask.
pub fn synth_volume(
    rng: &mut Rng,
    dims: &[usize],
    num_objects: usize,
    noise_sigma: f64,
) -> Result<(MetaVolume, MetaVolume)> {
    synth_with(
        rng,
        &SynthParams {
            dims: dims.to_vec(),
            num_objects,
            noise_sigma,
            per_object_labels: false,
        },
    )
}

/// Axis-aligned ellipsoid used by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
}

impl Ellipsoid {
    pub fn contains(&self, idx: &[usize]) -> bool {
        let s: f64 = idx
            .iter()
            .zip(&self.center)
            .zip(&self.radii)
            .map(|((&i, c), r)| ((i as f64 - c) / r).powi(2))
            .sum();
        s <= 1.0
    }
}

/// Draws the ellipsoids for `params`: per object, one center draw and one
/// radius draw per axis.
pub fn draw_ellipsoids(rng: &mut Rng, params: &SynthParams) -> Result<Vec<Ellipsoid>> {
    let dims = &params.dims;
    if dims.is_empty() || dims.len() > 3 {
        return Err(Error::InvalidArgument(format!("synthetic dims must have 1-3 axes, got {dims:?}")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d < 8) {
        return Err(Error::InvalidArgument(format!(
            "dims too small to place an object: axis of size {d} (need >= 8)"
        )));
    }
    if params.num_objects == 0 {
        return Err(Error::InvalidArgument("num_objects must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(params.num_objects);
    for _ in 0..params.num_objects {
        let mut center = Vec::with_capacity(dims.len());
        let mut radii = Vec::with_capacity(dims.len());
        for &d in dims {
            let r = rng.uniform_range(2.0, d as f64 / 4.0);
            let c = rng.uniform_range(r, d as f64 - 1.0 - r);
            center.push(c);
            radii.push(r);
        }
        out.push(Ellipsoid { center, radii });
    }
    Ok(out)
}

pub fn synth_with(rng: &mut Rng, params: &SynthParams) -> Result<(MetaVolume, MetaVolume)> {
    let objects = draw_ellipsoids(rng, params)?;
    let mut shape = vec![1];
    shape.extend_from_slice(&params.dims);
    let label = Tensor::from_fn(shape, |_, idx| {
        objects
            .iter()
            .enumerate()
            .filter(|(_, e)| e.contains(idx))
            .map(|(k, _)| if params.per_object_labels { (k + 1) as f32 } else { 1.0 })
            .next_back()
            .unwrap_or(0.0)
    })?;
    let mut image = label.map(|l| if l > 0.0 { 1.0 } else { 0.0 });
    if params.noise_sigma > 0.0 {
        for x in image.data_mut() {
            *x = (*x as f64 + params.noise_sigma * rng.gaussian()) as f32;
        }
    }
    Ok((MetaVolume::with_identity(image), MetaVolume::with_identity(label)))
}
