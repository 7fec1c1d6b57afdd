//! Manifest + blob dataset files.
//!
//! The manifest is JSON. Dense features live in a sidecar blob made of
//! records, each laid out as
//!
//! ```text
//! "TDSG" | version: u32 | dtype: u32 | rank: u32 | dims: u64 x rank | data
//! ```
//!
//! with every integer and the `f32` data little-endian. Manifest entries refer
//! to records by byte offset.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{ordered_pairs, Dataset, DatasetMeta, FrameSample, ObjectAnnotation, VideoSample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 4] = b"TDSG";
pub const DTYPE_F32: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    blob: String,
    meta: DatasetMeta,
    videos: Vec<ManifestVideo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVideo {
    id: String,
    frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFrame {
    objects: Vec<ObjectAnnotation>,
    appearance: TensorRef,
    union: Option<TensorRef>,
    relations: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRef {
    offset: u64,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn write_record(blob: &mut Vec<u8>, dims: &[usize], data: &[f32]) -> u64 {
    let offset = blob.len() as u64;
    blob.extend_from_slice(BLOB_MAGIC);
    blob.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    blob.write_u32::<LittleEndian>(DTYPE_F32).unwrap();
    blob.write_u32::<LittleEndian>(dims.len() as u32).unwrap();
    for &d in dims {
        blob.write_u64::<LittleEndian>(d as u64).unwrap();
    }
    for &v in data {
        blob.write_f32::<LittleEndian>(v).unwrap();
    }
    offset
}

/// Writes `dataset` to `path` (manifest) and `path` with a `.bin` extension (blob).
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let blob_path = path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::contract(format!("cannot derive a blob name from {}", path.display())))?
        .to_string();

    let mut blob = Vec::new();
    let d = dataset.meta.feature_dim;
    let videos = dataset
        .videos
        .iter()
        .map(|v| ManifestVideo {
            id: v.id.clone(),
            frames: v
                .frames
                .iter()
                .map(|f| {
                    let n = f.objects.len();
                    let appearance = TensorRef {
                        offset: write_record(&mut blob, &[n, d], &f.appearance),
                    };
                    let union = f.union.as_ref().map(|u| {
                        let rows = n * n.saturating_sub(1);
                        TensorRef {
                            offset: write_record(&mut blob, &[rows, u.len() / rows.max(1)], u),
                        }
                    });
                    ManifestFrame {
                        objects: f.objects.clone(),
                        appearance,
                        union,
                        relations: f.relations.iter().map(|&(s, p, o)| [s, p, o]).collect(),
                    }
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        blob: blob_name,
        meta: dataset.meta.clone(),
        videos,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::contract(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let mut offset = 0usize;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1).min(l.len())) as u64;
        }
        offset += l.len();
    }
    text.len() as u64
}

/// Reads a dataset written by [`write_dataset`] or authored by hand to the
/// same layout.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        field: "format_version".into(),
        message: e.to_string(),
    })?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }

    let mut de = serde_json::Deserializer::from_str(&text);
    let manifest: Manifest = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            offset: byte_offset(&text, inner.line(), inner.column()),
            field,
            message: inner.to_string(),
        }
    })?;

    let blob_path = path.parent().unwrap_or(Path::new("")).join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let d = manifest.meta.feature_dim;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for (vi, v) in manifest.videos.into_iter().enumerate() {
        let mut frames = Vec::with_capacity(v.frames.len());
        for (fi, f) in v.frames.into_iter().enumerate() {
            let n = f.objects.len();
            let field = format!("videos[{vi}].frames[{fi}].appearance");
            let appearance = read_record(&blob, f.appearance.offset, &field, &[n, d])?;
            let union = match (f.union, manifest.meta.union_dim) {
                (Some(r), Some(u)) => {
                    let field = format!("videos[{vi}].frames[{fi}].union");
                    Some(read_record(&blob, r.offset, &field, &[ordered_pairs(n).len(), u])?)
                }
                (Some(r), None) => {
                    return Err(Error::Parse {
                        offset: r.offset,
                        field: format!("videos[{vi}].frames[{fi}].union"),
                        message: "union features present but meta.union_dim is null".into(),
                    })
                }
                (None, _) => None,
            };
            frames.push(FrameSample {
                objects: f.objects,
                appearance,
                union,
                relations: f.relations.into_iter().map(|[s, p, o]| (s, p, o)).collect(),
            });
        }
        videos.push(VideoSample { id: v.id, frames });
    }
    let dataset = Dataset {
        meta: manifest.meta,
        videos,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn read_record(blob: &[u8], offset: u64, field: &str, expected: &[usize]) -> Result<Vec<f32>> {
    let fail = |at: u64, message: String| Error::Parse {
        offset: at,
        field: field.to_string(),
        message,
    };
    let mut cur = Cursor::new(blob);
    cur.set_position(offset);
    let eof = |cur: &Cursor<&[u8]>| fail(cur.position(), "blob ends inside a record".into());

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| eof(&cur))?;
    if &magic != BLOB_MAGIC {
        return Err(fail(offset, format!("bad record magic {magic:?}")));
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| eof(&cur))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dtype = cur.read_u32::<LittleEndian>().map_err(|_| eof(&cur))?;
    if dtype != DTYPE_F32 {
        return Err(fail(offset + 8, format!("unsupported dtype tag {dtype}")));
    }
    let rank = cur.read_u32::<LittleEndian>().map_err(|_| eof(&cur))? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cur.read_u64::<LittleEndian>().map_err(|_| eof(&cur))? as usize);
    }
    if dims != expected {
        return Err(fail(offset + 16, format!("record has dims {dims:?}, expected {expected:?}")));
    }
    let count: usize = dims.iter().product();
    let mut data = vec![0f32; count];
    cur.read_f32_into::<LittleEndian>(&mut data).map_err(|_| eof(&cur))?;
    Ok(data)
}
