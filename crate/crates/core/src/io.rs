//! Binary tensor container used by dataset directories and checkpoints.
//!
//! Layout: magic bytes `ZIST`, version `u16`, rank `u8`, dims as `u32` each,
//! dtype code `u8`, then the little-endian row-major payload. Dataset files
//! use dtype codes 0 (float32) and 1 (int32); checkpoints additionally use
//! code 2 (float64). Round trips are bit-exact.

use crate::error::{format_err, Error, Result};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ZIST";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I32),
            2 => Ok(Dtype::F64),
            c => format_err!("unknown dtype code {c}"),
        }
    }

    pub fn size(self) -> usize {
        4usize * if self == Dtype::F64 { 2 } else { 1 }
    }
}

/// A tensor together with its on-disk dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    I32(ArrayD<i32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::F32(_) => Dtype::F32,
            Tensor::I32(_) => Dtype::I32,
            Tensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::I32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }
}

fn write_header<W: Write>(w: &mut W, shape: &[usize], dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[dtype.code()])?;
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_header(w, t.shape(), t.dtype())?;
    match t {
        Tensor::F32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::I32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::F64(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        format_err!("header magic mismatch: expected ZIST, got {magic:?}");
    }
    let mut buf2 = [0u8; 2];
    read_exact(r, &mut buf2, "version")?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        format_err!("unsupported container version {version}");
    }
    let mut rank = [0u8; 1];
    read_exact(r, &mut rank, "rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut buf4 = [0u8; 4];
        read_exact(r, &mut buf4, "dims")?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let mut code = [0u8; 1];
    read_exact(r, &mut code, "dtype")?;
    let dtype = Dtype::from_code(code[0])?;
    let count: usize = shape.iter().product();

    let mut payload = vec![0u8; count * dtype.size()];
    if let Err(e) = r.read_exact(&mut payload) {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err!("payload size mismatch: expected {} bytes", payload.len());
        }
        return Err(Error::Io(e));
    }

    let dims = IxDyn(&shape);
    Ok(match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F32(ArrayD::from_shape_vec(dims, data).map_err(shape_err)?)
        }
        Dtype::I32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::I32(ArrayD::from_shape_vec(dims, data).map_err(shape_err)?)
        }
        Dtype::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F64(ArrayD::from_shape_vec(dims, data).map_err(shape_err)?)
        }
    })
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::Format(format!("payload shape error: {e}"))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated header while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let t = read_tensor(&mut f)?;
    // a standalone tensor file ends exactly at the payload boundary
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        format_err!("payload size mismatch: trailing bytes after payload");
    }
    Ok(t)
}

/// Hex-encoded SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a list of named f64 tensors; used for parameter-freeze checks.
pub fn params_hash(named: &[(String, ArrayD<f64>)]) -> String {
    let mut hasher = Sha256::new();
    for (name, arr) in named {
        hasher.update(name.as_bytes());
        for v in arr.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
