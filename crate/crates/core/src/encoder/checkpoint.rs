//! Binary parameter snapshots.
//!
//! Layout (all little-endian): magic `TCLP`, u32 total layer count, u32
//! number of those layers that form the projection head, then `d_in, d_out`
//! as u32 pairs per layer, then every weight matrix (row-major) followed by
//! its bias as f64, layer by layer.

use std::io::{Read, Write};
use std::path::Path;

use super::network::{EncoderParams, Linear};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"TCLP";

pub fn write_checkpoint(params: &EncoderParams, mut w: impl Write) -> std::io::Result<()> {
    let layers: Vec<&Linear> = params.layers().collect();
    w.write_all(MAGIC)?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    w.write_all(&(params.head.len() as u32).to_le_bytes())?;
    for l in &layers {
        w.write_all(&(l.d_in() as u32).to_le_bytes())?;
        w.write_all(&(l.d_out() as u32).to_le_bytes())?;
    }
    for t in params.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(params: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(params, &mut out).expect("writing to a Vec cannot fail");
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("checkpoint truncated: wanted {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<EncoderParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let n_layers = c.u32()?;
    let n_head = c.u32()?;
    if n_head == 0 || n_head > n_layers {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("{n_head} head layers out of {n_layers}"),
        });
    }
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        dims.push((c.u32()?, c.u32()?));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (d_in, d_out) in dims {
        let weight = Matrix::from_vec(d_in, d_out, c.f64s(d_in * d_out)?)?;
        let bias = c.f64s(d_out)?;
        layers.push(Linear { weight, bias });
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse {
            offset: c.pos,
            msg: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    let head = layers.split_off(n_layers - n_head);
    let params = EncoderParams::new(layers, head)?;
    if !params.is_finite() {
        return Err(Error::InvalidInput("checkpoint contains non-finite values".into()));
    }
    Ok(params)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<EncoderParams> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Parse { offset: 0, msg: e.to_string() })?;
    parse_checkpoint(&bytes)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
