//! Binary bundle file.
//!
//! Little-endian layout:
//!
//! ```text
//! "CAFB" | version u32 = 1 | record_count u32 | D_in u32 | grid H u32 | grid W u32
//! per record:
//!   patient_id u32 | image_id u32 | label i32 | n_real u32
//!   global feature: D_in × f32
//!   per concept: D_in × f32 feature | 4 × f32 bbox | rle_len u32 | rle_len × u32 runs
//! CRC32 (IEEE) of every preceding byte
//! ```
//!
//! `D_in = 0` marks raw-crop storage: pixels live in a sidecar directory
//! `<file>.crops/` holding `g_<image_id>.f32` (full image) and
//! `c_<image_id>_<j>.f32` (concept crops) as raw little-endian f32.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::extract::{ConceptBundle, ConceptRecord, FeatureKind, CONCEPT_TAG};
use crate::data::rle::Rle;
use crate::data::BundleSet;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"CAFB";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;
pub const RECORD_FIXED_BYTES: usize = 16;

pub fn sidecar_dir(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".crops");
    PathBuf::from(s)
}

/// Serialises a bundle set to bytes (without the raw-crop sidecar).
pub fn encode_bundles(set: &BundleSet) -> Result<Vec<u8>> {
    set.check_consistent()?;
    let d_in = set.kind.dim();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        set.bundles.len() as u32,
        d_in as u32,
        set.grid_height as u32,
        set.grid_width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for b in &set.bundles {
        out.extend_from_slice(&b.patient_id.to_le_bytes());
        out.extend_from_slice(&b.image_id.to_le_bytes());
        out.extend_from_slice(&b.label.to_le_bytes());
        out.extend_from_slice(&(b.concepts.len() as u32).to_le_bytes());
        if d_in > 0 {
            put_f32s(&mut out, &b.global_source);
        }
        for c in &b.concepts {
            if d_in > 0 {
                put_f32s(&mut out, &c.feature);
            }
            put_f32s(&mut out, &c.bbox);
            out.extend_from_slice(&(c.mask.runs.len() as u32).to_le_bytes());
            for r in &c.mask.runs {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked little-endian reader over `bytes[..end]`.
pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) end: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.end {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.end.saturating_sub(self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn i32(&mut self) -> Result<i32, FormatError> {
        Ok(self.u32()? as i32)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Malformed("length overflow".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Parses bundle bytes. Raw-crop files come back with empty features; use
/// [`read_bundle_file`] to attach the sidecar pixels.
pub fn decode_bundles(bytes: &[u8]) -> Result<BundleSet, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let body_end = bytes.len().saturating_sub(4).max(4);
    let mut cur = Cursor {
        bytes,
        pos: 4,
        end: body_end,
    };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let d_in = cur.u32()? as usize;
    let grid_height = cur.u32()? as usize;
    let grid_width = cur.u32()? as usize;
    let cells = grid_height * grid_width;
    let mut bundles = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let patient_id = cur.u32()?;
        let image_id = cur.u32()?;
        let label = cur.i32()?;
        let n_real = cur.u32()? as usize;
        let global_source = cur.f32s(d_in)?;
        let mut concepts = Vec::with_capacity(n_real.min(1 << 16));
        for _ in 0..n_real {
            let feature = cur.f32s(d_in)?;
            let bb = cur.f32s(4)?;
            let rle_len = cur.u32()? as usize;
            let raw = cur.take(rle_len.checked_mul(4).ok_or_else(|| FormatError::Malformed("rle length overflow".into()))?)?;
            let runs: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let mask = Rle { runs };
            if mask.len() != cells {
                return Err(FormatError::Malformed(format!(
                    "image {image_id}: mask covers {} cells, grid has {cells}",
                    mask.len()
                )));
            }
            concepts.push(ConceptRecord {
                feature,
                bbox: [bb[0], bb[1], bb[2], bb[3]],
                mask,
                prompt_tag: CONCEPT_TAG.to_string(),
            });
        }
        bundles.push(ConceptBundle {
            patient_id,
            image_id,
            label,
            global_source,
            concepts,
        });
    }
    if bytes.len() < cur.pos + 4 {
        return Err(FormatError::Truncated {
            offset: cur.pos,
            needed: 4,
            available: bytes.len() - cur.pos,
        });
    }
    if bytes.len() != cur.pos + 4 {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes after the last record",
            bytes.len() - cur.pos - 4
        )));
    }
    let tail = &bytes[cur.pos..];
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(&bytes[..cur.pos]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let kind = if d_in == 0 {
        FeatureKind::RawCrop { crop: 0 }
    } else {
        FeatureKind::Descriptor {
            grid: grid_from_dim(d_in).ok_or_else(|| FormatError::Malformed(format!("D_in {d_in} is not a descriptor width")))?,
        }
    };
    Ok(BundleSet {
        kind,
        grid_height,
        grid_width,
        bundles,
    })
}

fn grid_from_dim(d_in: usize) -> Option<usize> {
    let cells = d_in.checked_sub(crate::data::extract::DESCRIPTOR_STATS)?;
    if cells % 3 != 0 {
        return None;
    }
    let g = ((cells / 3) as f64).sqrt().round() as usize;
    (g * g * 3 == cells).then_some(g)
}

fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    put_f32s(&mut bytes, values);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            source: FormatError::Malformed("length is not a multiple of 4".into()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_bundle_file(set: &BundleSet, path: &Path) -> Result<()> {
    let bytes = encode_bundles(set)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    if let FeatureKind::RawCrop { .. } = set.kind {
        let dir = sidecar_dir(path);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for b in &set.bundles {
            write_f32_file(&dir.join(format!("g_{}.f32", b.image_id)), &b.global_source)?;
            for (j, c) in b.concepts.iter().enumerate() {
                write_f32_file(&dir.join(format!("c_{}_{}.f32", b.image_id, j)), &c.feature)?;
            }
        }
    }
    Ok(())
}

pub fn read_bundle_file(path: &Path) -> Result<BundleSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut set = decode_bundles(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    if let FeatureKind::RawCrop { .. } = set.kind {
        let dir = sidecar_dir(path);
        let mut crop = 0;
        for b in &mut set.bundles {
            b.global_source = read_f32_file(&dir.join(format!("g_{}.f32", b.image_id)))?;
            for (j, c) in b.concepts.iter_mut().enumerate() {
                c.feature = read_f32_file(&dir.join(format!("c_{}_{}.f32", b.image_id, j)))?;
                crop = ((c.feature.len() / 3) as f64).sqrt().round() as usize;
            }
        }
        set.kind = FeatureKind::RawCrop { crop: crop.max(1) };
        set.check_consistent()?;
    }
    Ok(set)
}
