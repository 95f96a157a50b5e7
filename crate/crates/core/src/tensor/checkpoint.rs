//! Checkpoint file: versioned header, free-form metadata string, then a
//! named tensor table (name, shape, raw little-endian f32). Byte-exact
//! round-trip.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{Params, Tensor};

const MAGIC: &[u8; 4] = b"GPCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, metadata: &str, params: &Params) -> io::Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = metadata.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)
}

pub fn load_checkpoint(path: &Path) -> io::Result<(String, Params)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());

    let mut take = |n: usize| -> io::Result<&[u8]> {
        if cursor + n > bytes.len() {
            return Err(bad("truncated checkpoint"));
        }
        let slice = &bytes[cursor..cursor + n];
        cursor += n;
        Ok(slice)
    };

    if take(4)? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let meta_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let metadata = String::from_utf8(take(meta_len)?.to_vec())
        .map_err(|_| bad("metadata is not valid UTF-8"))?;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;

    let mut params = Params::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not valid UTF-8"))?;
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let volume: usize = shape.iter().product();
        let raw = take(volume * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&name, Tensor::param(&shape, data));
    }
    Ok((metadata, params))
}
