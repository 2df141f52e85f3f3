//! Model checkpoints.
//!
//! ```text
//! "CMAM" | version u32 (=1) | variant tag length u32 | variant tag (UTF-8)
//! dimension u32 | hidden units u32 (0 = linear probes)
//! meta input u8 (0 = probabilities, 1 = features) | aux branch loss u8
//! block count u32
//! per block: name length u32 | name | rows u32 | cols u32 | rows*cols f32
//! ```
//!
//! Integers and floats are little-endian, the same tensor encoding as CMAF
//! feature stores. Parameters are narrowed to f32 on write.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::{CmaModel, MetaInput, ModelConfig, Variant};

pub const MAGIC: [u8; 4] = *b"CMAM";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| {
        FormatError::DimensionInconsistency(format!("{what} {v} does not fit in u32"))
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len(), "string length")?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_model(model: &CmaModel) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, model.variant().tag())?;
    put_u32(&mut out, model.dim(), "dimension")?;
    put_u32(&mut out, cfg.hidden_units.unwrap_or(0), "hidden units")?;
    out.push(match cfg.meta_input {
        MetaInput::Probabilities => 0,
        MetaInput::Features => 1,
    });
    out.push(u8::from(cfg.aux_branch_loss));
    let blocks = model.blocks();
    put_u32(&mut out, blocks.len(), "block count")?;
    for b in blocks {
        put_str(&mut out, &b.name)?;
        put_u32(&mut out, b.rows, "rows")?;
        put_u32(&mut out, b.cols, "cols")?;
        for &v in b.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
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

    fn string(&mut self, context: &str) -> Result<String, FormatError> {
        let n = self.u32(context)? as usize;
        let bytes = self.take(n, context)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| FormatError::Malformed(format!("{context} is not UTF-8")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<CmaModel> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic,
            expected: MAGIC,
        }
        .into());
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let variant: Variant = c.string("variant tag")?.parse()?;
    let dim = c.u32("dimension")? as usize;
    let hidden = c.u32("hidden units")? as usize;
    let meta_input = match c.u8("meta input")? {
        0 => MetaInput::Probabilities,
        1 => MetaInput::Features,
        other => {
            return Err(FormatError::Malformed(format!("unknown meta input code {other}")).into())
        }
    };
    let aux_branch_loss = match c.u8("aux flag")? {
        0 => false,
        1 => true,
        other => return Err(FormatError::Malformed(format!("bad aux flag {other}")).into()),
    };
    let config = ModelConfig {
        hidden_units: (hidden > 0).then_some(hidden),
        meta_input,
        aux_branch_loss,
    };
    let mut model = CmaModel::zeros(dim, variant, config).map_err(|e| match e {
        Error::Dimension(msg) | Error::Config(msg) => {
            Error::Format(FormatError::DimensionInconsistency(msg))
        }
        other => other,
    })?;
    let count = c.u32("block count")? as usize;
    let mut blocks = model.blocks_mut();
    if count != blocks.len() {
        return Err(FormatError::DimensionInconsistency(format!(
            "{count} parameter blocks stored, {variant} model has {}",
            blocks.len()
        ))
        .into());
    }
    for block in blocks.iter_mut() {
        let name = c.string("block name")?;
        let rows = c.u32("block rows")? as usize;
        let cols = c.u32("block cols")? as usize;
        if name != block.name || rows != block.rows || cols != block.cols {
            return Err(FormatError::DimensionInconsistency(format!(
                "stored block {name} ({rows}x{cols}) does not match expected {} ({}x{})",
                block.name, block.rows, block.cols
            ))
            .into());
        }
        let raw = c.take(rows * cols * 4, &format!("block {name} values"))?;
        for (dst, chunk) in block.data.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::Malformed(format!("non-finite value in block {name}")).into());
            }
            *dst = f64::from(v);
        }
    }
    drop(blocks);
    if c.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            offset: c.pos as u64,
            count: (bytes.len() - c.pos) as u64,
        }
        .into());
    }
    Ok(model)
}

pub fn save_model(model: &CmaModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<CmaModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::init_model;

    #[test]
    fn round_trip_at_f32_precision() {
        for (variant, config) in [
            (Variant::Full, ModelConfig::default()),
            (
                Variant::NoCross,
                ModelConfig {
                    hidden_units: Some(4),
                    meta_input: MetaInput::Features,
                    aux_branch_loss: true,
                },
            ),
            (Variant::NoMeta, ModelConfig::default()),
        ] {
            let model = init_model(5, variant, config, 3).unwrap();
            let decoded = decode_model(&encode_model(&model).unwrap()).unwrap();
            assert_eq!(decoded.variant(), variant);
            assert_eq!(decoded.config(), config);
            for (a, b) in model.to_flat().iter().zip(decoded.to_flat()) {
                assert_eq!(*a as f32 as f64, b);
            }
            // Already-narrowed parameters survive exactly.
            assert_eq!(decode_model(&encode_model(&decoded).unwrap()).unwrap(), decoded);
        }
    }

    #[test]
    fn corrupted_checkpoints() {
        let model = init_model(3, Variant::NoImage, ModelConfig::default(), 0).unwrap();
        let bytes = encode_model(&model).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_model(&long),
            Err(Error::Format(FormatError::TrailingBytes { .. }))
        ));
    }
}
