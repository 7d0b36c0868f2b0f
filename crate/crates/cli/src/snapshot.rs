//! Binary model snapshots.
//!
//! Layout, all little-endian: magic `MIST`, `u16` format version, `u8`
//! float width (4 or 8), `u32` layer count, `u32` per layer dim, then the
//! parameter payload.

use std::path::Path;

use mistlab::nn::ModelParams;

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 4] = b"MIST";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FloatWidth {
    #[default]
    F32,
    F64,
}

impl FloatWidth {
    fn bytes(self) -> usize {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }
}

/// Round every parameter to what `width` can store. Models are quantized
/// before use so the saved file reproduces them exactly.
pub fn quantize(model: &ModelParams, width: FloatWidth) -> ModelParams {
    match width {
        FloatWidth::F64 => model.clone(),
        FloatWidth::F32 => {
            let values = model.values().iter().map(|&v| v as f32 as f64).collect();
            ModelParams::new(model.layer_dims().to_vec(), values).expect("same shape")
        }
    }
}

pub fn encode(model: &ModelParams, width: FloatWidth) -> Vec<u8> {
    let dims = model.layer_dims();
    let mut out = Vec::with_capacity(11 + 4 * dims.len() + width.bytes() * model.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width.bytes() as u8);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in model.values() {
        match width {
            FloatWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            FloatWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CliError::Data("snapshot truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> CliResult<(ModelParams, FloatWidth)> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(CliError::Data("not a snapshot (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CliError::Data(format!("unsupported snapshot version {version}")));
    }
    let width = match r.take(1)?[0] {
        4 => FloatWidth::F32,
        8 => FloatWidth::F64,
        w => return Err(CliError::Data(format!("bad float width {w}"))),
    };
    let layers = r.u32()? as usize;
    if layers > 1024 {
        return Err(CliError::Data(format!("implausible layer count {layers}")));
    }
    let dims = (0..layers)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<CliResult<Vec<_>>>()?;
    let n = mistlab::nn::param_count(&dims);
    if r.buf.len() != n * width.bytes() {
        return Err(CliError::Data(format!(
            "snapshot payload has {} bytes, dims {dims:?} need {}",
            r.buf.len(),
            n * width.bytes()
        )));
    }
    let values = match width {
        FloatWidth::F32 => r
            .buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        FloatWidth::F64 => r
            .buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((ModelParams::new(dims, values)?, width))
}

pub fn save(path: &Path, model: &ModelParams, width: FloatWidth) -> CliResult<()> {
    std::fs::write(path, encode(model, width)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map(|(m, _)| m).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mistlab::train::init_model;

    #[test]
    fn roundtrip_both_widths() {
        let m = init_model(&[5, 7, 3], 9).unwrap();
        let (back, w) = decode(&encode(&m, FloatWidth::F64)).unwrap();
        assert_eq!((back, w), (m.clone(), FloatWidth::F64));
        let q = quantize(&m, FloatWidth::F32);
        let (back, w) = decode(&encode(&m, FloatWidth::F32)).unwrap();
        assert_eq!((back, w), (q.clone(), FloatWidth::F32));
        assert_eq!(quantize(&q, FloatWidth::F32), q);
    }

    #[test]
    fn header_layout() {
        let m = init_model(&[2, 3], 1).unwrap();
        let b = encode(&m, FloatWidth::F32);
        assert_eq!(&b[..4], b"MIST");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(b[6], 4);
        assert_eq!(b.len(), 4 + 2 + 1 + 4 + 8 + 4 * 9);
    }

    #[test]
    fn rejects_corruption() {
        let m = init_model(&[2, 3], 1).unwrap();
        let b = encode(&m, FloatWidth::F64);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = b;
        bad[6] = 3;
        assert!(decode(&bad).is_err());
    }
}
