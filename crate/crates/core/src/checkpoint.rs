//! Model checkpoints.
//!
//! Layout: an 8-byte magic `NGCKPT01`, a little-endian `u64` header length,
//! a JSON header (layer specs, seed, creation metadata), then for each layer
//! the weight matrix (row-major) followed by the bias vector, all as
//! little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, NetworkModel};

pub const MAGIC: &[u8; 8] = b"NGCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    seed: u64,
    layers: Vec<LayerSpec>,
    created_unix: u64,
}

/// Write a checkpoint. The roundtrip preserves every parameter bit.
pub fn save_checkpoint(model: &NetworkModel, path: &Path) -> Result<()> {
    let header = Header {
        version: 1,
        seed: model.seed(),
        layers: model.layers().to_vec(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (weights, biases) in model.weights().iter().zip(model.biases()) {
        for v in weights.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in biases.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back; malformed input reports the failing byte offset.
pub fn load_checkpoint(path: &Path) -> Result<NetworkModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(Error::CheckpointParse {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }

    let mut len_bytes = [0u8; 8];
    read_exact_at(&mut r, &mut len_bytes, &mut offset, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > 16 * 1024 * 1024 {
        return Err(Error::CheckpointParse {
            offset: 8,
            message: format!("implausible header length {header_len}"),
        });
    }

    let header_start = offset;
    let mut header_bytes = vec![0u8; header_len as usize];
    read_exact_at(&mut r, &mut header_bytes, &mut offset, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::CheckpointParse {
        offset: header_start,
        message: format!("invalid header json: {e}"),
    })?;
    if header.version != 1 {
        return Err(Error::CheckpointStructure(format!(
            "unsupported version {}",
            header.version
        )));
    }

    let mut weights = Vec::with_capacity(header.layers.len());
    let mut biases = Vec::with_capacity(header.layers.len());
    for (idx, spec) in header.layers.iter().enumerate() {
        let w = read_f64_block(
            &mut r,
            spec.out_width * spec.in_width,
            &mut offset,
            &format!("weights for layer {}", idx + 1),
        )?;
        let b = read_f64_block(
            &mut r,
            spec.out_width,
            &mut offset,
            &format!("biases for layer {}", idx + 1),
        )?;
        weights.push(
            Array2::from_shape_vec((spec.out_width, spec.in_width), w)
                .map_err(|e| Error::CheckpointStructure(e.to_string()))?,
        );
        biases.push(Array1::from_vec(b));
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CheckpointParse {
            offset,
            message: "trailing bytes after the last parameter block".into(),
        });
    }

    NetworkModel::from_parts(header.layers, weights, biases, header.seed)
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::CheckpointParse {
                offset: *offset + filled as u64,
                message: format!("unexpected end of file while reading {what}"),
            });
        }
        filled += n;
    }
    *offset += buf.len() as u64;
    Ok(())
}

fn read_f64_block<R: Read>(
    r: &mut R,
    count: usize,
    offset: &mut u64,
    what: &str,
) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    read_exact_at(r, &mut bytes, offset, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
