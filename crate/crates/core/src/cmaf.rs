//! CMAF, the binary feature-store container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CMAF" | version u32 (=1) | dimension u32 | record count u64
//! per record:
//!   id length u32 | id (UTF-8) | label u8 | L_t u32 | L_m u32
//!   L_t*d f32 (text tokens, row-major) | L_m*d f32 (image tokens, row-major)
//! ```
//!
//! Values are stored as f32 and widened to f64 on read. The source name is
//! not part of the container: it comes from the optional JSON sidecar, or
//! from the file stem when there is none.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::datastore::{FeatureRecord, FeatureStore, StoreManifest};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"CMAF";
pub const VERSION: u32 = 1;

pub fn encode_store(store: &FeatureStore) -> Result<Vec<u8>> {
    let d = store.dimension();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(d, "dimension")?.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for r in store.records() {
        r.validate(d)?;
        out.extend_from_slice(&u32_field(r.id.len(), "id length")?.to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.push(r.label);
        out.extend_from_slice(&u32_field(r.text_tokens.rows(), "L_t")?.to_le_bytes());
        out.extend_from_slice(&u32_field(r.image_tokens.rows(), "L_m")?.to_le_bytes());
        for m in [&r.text_tokens, &r.image_tokens] {
            for &v in m.data() {
                let narrowed = v as f32;
                if !narrowed.is_finite() {
                    return Err(Error::Numeric(format!(
                        "record `{}` has a value that overflows f32",
                        r.id
                    )));
                }
                out.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| {
        Error::Format(FormatError::DimensionInconsistency(format!(
            "{what} {v} does not fit in u32"
        )))
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos as u64,
                context: context.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, context)?[0])
    }

    fn u32(&mut self, context: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes and validates a CMAF byte buffer.
pub fn decode_store(bytes: &[u8], source_name: &str) -> Result<FeatureStore> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = rd.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic,
            expected: MAGIC,
        }
        .into());
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let d = rd.u32("dimension")? as usize;
    if d == 0 {
        return Err(FormatError::DimensionInconsistency("header dimension is 0".into()).into());
    }
    let count = rd.u64("record count")?;

    // Every record takes at least 13 header bytes plus two rows of floats,
    // which bounds any honest count by the buffer size.
    let min_record = 13 + 8 * d as u64;
    let plausible = (rd.remaining() as u64 / min_record).min(count) as usize;
    let mut records = Vec::with_capacity(plausible);
    let mut seen = HashSet::with_capacity(plausible);
    for index in 0..count {
        let ctx = |what: &str| format!("record {index} {what}");
        let id_len = rd.u32(&ctx("id length"))? as usize;
        let id_bytes = rd.take(id_len, &ctx("id"))?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| FormatError::InvalidId { record: index })?
            .to_string();
        let label = rd.u8(&ctx("label"))?;
        if label > 1 {
            return Err(FormatError::InvalidLabel {
                value: label,
                record: index,
            }
            .into());
        }
        let lt = rd.u32(&ctx("L_t"))? as usize;
        let lm = rd.u32(&ctx("L_m"))? as usize;
        if lt == 0 {
            return Err(FormatError::EmptySequence {
                record: index,
                which: "text",
            }
            .into());
        }
        if lm == 0 {
            return Err(FormatError::EmptySequence {
                record: index,
                which: "image",
            }
            .into());
        }
        let text = read_tokens(&mut rd, lt, d, index, "text tokens")?;
        let image = read_tokens(&mut rd, lm, d, index, "image tokens")?;
        if !seen.insert(id.clone()) {
            return Err(FormatError::DuplicateId { id, record: index }.into());
        }
        records.push(FeatureRecord::new(id, label, text, image));
    }
    if rd.remaining() > 0 {
        return Err(FormatError::TrailingBytes {
            offset: rd.pos as u64,
            count: rd.remaining() as u64,
        }
        .into());
    }
    FeatureStore::new(d, source_name, records)
}

fn read_tokens(
    rd: &mut Reader<'_>,
    rows: usize,
    d: usize,
    record: u64,
    what: &str,
) -> Result<Matrix> {
    let n = rows.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| {
        FormatError::DimensionInconsistency(format!(
            "record {record}: {rows} rows of width {d} overflow"
        ))
    })?;
    let start = rd.pos as u64;
    let raw = rd.take(n, &format!("record {record} {what}"))?;
    let mut data = Vec::with_capacity(rows * d);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFiniteValue {
                record,
                offset: start + 4 * i as u64,
            }
            .into());
        }
        data.push(f64::from(v));
    }
    Matrix::from_vec(rows, d, data)
}

/// Path of the JSON sidecar that accompanies `store_path`.
pub fn manifest_path(store_path: &Path) -> PathBuf {
    store_path.with_extension("manifest.json")
}

pub fn write_store(store: &FeatureStore, path: &Path) -> Result<()> {
    let bytes = encode_store(store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a store. The source name comes from the sidecar when present,
/// else from the file stem.
pub fn read_store(path: &Path) -> Result<FeatureStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = match read_manifest(&manifest_path(path))? {
        Some(m) => m.source_name,
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    decode_store(&bytes, &name)
}

pub fn write_manifest(manifest: &StoreManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// `Ok(None)` when the file does not exist.
pub fn read_manifest(path: &Path) -> Result<Option<StoreManifest>> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}
