//! Tensor container file format (`.fstn`).
//!
//! Layout: 8-byte magic `FSTN0001`, a little-endian u32 byte length, a UTF-8
//! JSON header `{"shape":[...],"dtype":"f64","name":"..."}` of that length,
//! then the raw little-endian row-major f64 payload. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSTN0001";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    name: String,
}

pub fn write_tensor(path: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, name, tensor).map_err(|e| Error::io(path.display().to_string(), e))?;
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn write_tensor_to<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> std::io::Result<()> {
    let header = Header {
        shape: tensor.shape.clone(),
        dtype: "f64".to_string(),
        name: name.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &tensor.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a container file back into `(name, tensor)`.
pub fn read_tensor(path: &Path) -> Result<(String, Tensor)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}, expected FSTN0001",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    if header.dtype != "f64" {
        return Err(Error::Data(format!(
            "{}: unsupported dtype {:?}",
            path.display(),
            header.dtype
        )));
    }
    let numel: usize = header.shape.iter().product();
    let mut payload = vec![0u8; numel * 8];
    r.read_exact(&mut payload)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Data(format!(
                "{}: trailing bytes after payload",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("{}: payload", path.display())));
    }
    Ok((header.name, Tensor::from_vec(header.shape, data)?))
}
