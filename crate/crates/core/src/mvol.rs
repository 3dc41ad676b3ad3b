//! MVOL binary container.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes        | field                                        |
//! |--------------|----------------------------------------------|
//! | 4            | magic `MVOL`                                 |
//! | 1            | version (1)                                  |
//! | 1            | dtype (1 = f32)                              |
//! | 1            | ndim, including the channel axis             |
//! | 1            | reserved (0)                                 |
//! | 8 × ndim     | dims as u64                                  |
//! | 8 × 16       | affine as f64, row-major                     |
//! | 4            | u32 length of the JSON blob                  |
//! | n            | UTF-8 JSON `{"meta": [[k, v], ...], "applied": [...]}` |
//! | 4 × ∏dims    | f32 voxel data                               |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Affine;
use crate::volume::{Meta, MetaValue, MetaVolume, Tensor, TraceRecord};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    meta: Vec<(String, MetaValue)>,
    applied: Vec<TraceRecord>,
}

fn sidecar_json(v: &MetaVolume) -> Result<Vec<u8>> {
    let side = Sidecar {
        meta: v.meta.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        applied: v.applied.clone(),
    };
    Ok(serde_json::to_vec(&side)?)
}

/// Serialises `v`; returns the number of bytes written.
pub fn write<W: Write>(v: &MetaVolume, sink: &mut W) -> Result<usize> {
    let shape = v.array.shape();
    let json = sidecar_json(v)?;
    let json_len = u32::try_from(json.len())
        .map_err(|_| Error::Format("metadata blob exceeds 4 GiB".into()))?;

    let mut buf = Vec::with_capacity(8 + 8 * shape.len() + 128 + 4 + json.len() + 4 * v.array.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, DTYPE_F32, shape.len() as u8, 0]);
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in v.affine.to_rows() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&json_len.to_le_bytes());
    buf.extend_from_slice(&json);
    for x in v.array.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

pub fn to_bytes(v: &MetaVolume) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write(v, &mut out)?;
    Ok(out)
}

fn read_exact<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("MVOL stream ended inside {what}")),
        _ => Error::Stream(e),
    })
}

/// Exact inverse of [`write`].
pub fn read<R: Read>(src: &mut R) -> Result<MetaVolume> {
    let mut head = [0u8; 8];
    read_exact(src, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: "MVOL".into(),
            found: head[..4].to_vec(),
        });
    }
    if head[4] != VERSION {
        return Err(Error::UnsupportedVersion(head[4]));
    }
    if head[5] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(head[5] as i32));
    }
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(src, &mut b, "dims")?;
        let d = u64::from_le_bytes(b);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?);
    }
    let mut rows = [0.0f64; 16];
    for r in rows.iter_mut() {
        let mut b = [0u8; 8];
        read_exact(src, &mut b, "affine")?;
        *r = f64::from_le_bytes(b);
    }
    let mut lb = [0u8; 4];
    read_exact(src, &mut lb, "metadata length")?;
    let mut json = vec![0u8; u32::from_le_bytes(lb) as usize];
    read_exact(src, &mut json, "metadata")?;
    let side: Sidecar = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("bad MVOL metadata: {e}")))?;

    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("MVOL dims overflow".into()))?;
    let mut raw = vec![0u8; n * 4];
    read_exact(src, &mut raw, "voxel data")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    Ok(MetaVolume {
        array: Tensor::new(shape, data)?,
        affine: Affine::from_rows(rows),
        meta: side.meta.into_iter().collect::<Meta>(),
        applied: side.applied,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<MetaVolume> {
    let mut cur = bytes;
    read(&mut cur)
}

pub const DICT_MAGIC: &[u8; 4] = b"MVLD";

/// Serialises named volumes as an `MVLD` container: magic, u16 count, then
/// per entry a u32 key length, the UTF-8 key, a u64 blob length and the
/// MVOL blob.
pub fn dict_to_bytes<'a>(entries: impl IntoIterator<Item = (&'a str, &'a MetaVolume)>) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let count = u16::try_from(entries.len())
        .map_err(|_| Error::InvalidArgument(format!("{} entries exceed the container limit", entries.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(DICT_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for (key, v) in entries {
        let blob = to_bytes(v)?;
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

/// Parses an `MVLD` container; entries keep their stored order.
pub fn dict_from_bytes(bytes: &[u8]) -> Result<Vec<(String, MetaVolume)>> {
    fn take<'b>(cur: &mut &'b [u8], n: usize, what: &str) -> Result<&'b [u8]> {
        if cur.len() < n {
            return Err(Error::Truncated(format!("{what}: need {n} bytes, have {}", cur.len())));
        }
        let (head, tail) = cur.split_at(n);
        *cur = tail;
        Ok(head)
    }
    let mut cur = bytes;
    let magic = take(&mut cur, 4, "dict magic")?;
    if magic != DICT_MAGIC {
        return Err(Error::BadMagic {
            expected: "MVLD".into(),
            found: magic.to_vec(),
        });
    }
    let count = u16::from_le_bytes(take(&mut cur, 2, "dict count")?.try_into().expect("2 bytes"));
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let klen = u32::from_le_bytes(take(&mut cur, 4, "key length")?.try_into().expect("4 bytes")) as usize;
        let key = std::str::from_utf8(take(&mut cur, klen, "key")?)
            .map_err(|e| Error::Format(format!("dict key is not UTF-8: {e}")))?
            .to_string();
        let blen = u64::from_le_bytes(take(&mut cur, 8, "blob length")?.try_into().expect("8 bytes"));
        let blob = take(&mut cur, usize::try_from(blen).unwrap_or(usize::MAX), "volume blob")?;
        out.push((key, from_bytes(blob)?));
    }
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after dict container", cur.len())));
    }
    Ok(out)
}
