//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "XYSN" (4 bytes)
//!   version u32
//!   config blob: length u32 + UTF-8 key=value text
//!   tensor count u32
//!   per tensor: name length u16 + UTF-8 name, dtype code u8 (0 = f32,
//!   1 = f64), rank u8, dims as u32 each, raw little-endian data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvconfig;
use crate::network::{build_model, ModelConfig, ModelWeights};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"XYSN";
pub const VERSION: u32 = 1;

pub fn checkpoint_save<T: Scalar>(
    path: &Path,
    weights: &ModelWeights<T>,
    cfg: &ModelConfig,
) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    out.write_all(&MAGIC).map_err(io_err)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let config = kvconfig::serialize(&kvconfig::model_config_to_map(cfg));
    out.write_all(&(config.len() as u32).to_le_bytes()).map_err(io_err)?;
    out.write_all(config.as_bytes()).map_err(io_err)?;
    out.write_all(&(weights.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in weights.iter() {
        out.write_all(&(name.len() as u16).to_le_bytes()).map_err(io_err)?;
        out.write_all(name.as_bytes()).map_err(io_err)?;
        out.write_all(&[T::DTYPE_CODE, tensor.rank() as u8]).map_err(io_err)?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes_vec()).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

struct CursorReader<R: Read> {
    inner: R,
}

impl<R: Read> CursorReader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::Truncated(what.to_string()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<(ModelWeights<T>, ModelConfig)> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = CursorReader {
        inner: BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.exact(&mut config_bytes, "config blob")?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::Truncated("config blob is not UTF-8".into()))?;
    let mut reader = kvconfig::Reader::from_text(&config_text)?;
    let cfg = kvconfig::model_config_from(&mut reader, &ModelConfig::default())?;
    reader.finish()?;

    let count = r.u32("tensor count")? as usize;
    let mut weights = ModelWeights::default();
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.exact(&mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Truncated(format!("tensor {i} name is not UTF-8")))?;
        let dtype = r.u8("dtype code")?;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Truncated(format!(
                "tensor `{name}` has dtype code {dtype}, expected {}",
                T::DTYPE_CODE
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * T::BYTE_WIDTH];
        r.exact(&mut raw, &format!("tensor `{name}` data"))?;
        let data: Vec<T> = raw
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::from_le_slice)
            .collect();
        weights.insert(name, Tensor::new(data, &shape)?);
    }
    Ok((weights, cfg))
}

/// Check that loaded weights carry exactly the key set the config builds.
pub fn validate_weights<T: Scalar>(weights: &ModelWeights<T>, cfg: &ModelConfig) -> Result<()> {
    let expected = build_model::<T>(cfg)?;
    let missing: Vec<String> = expected
        .keys()
        .filter(|k| weights.get(k).is_err())
        .cloned()
        .collect();
    let extra: Vec<String> = weights
        .keys()
        .filter(|k| expected.get(k).is_err())
        .cloned()
        .collect();
    if missing.is_empty() && extra.is_empty() {
        Ok(())
    } else {
        Err(Error::KeyMismatch { missing, extra })
    }
}
