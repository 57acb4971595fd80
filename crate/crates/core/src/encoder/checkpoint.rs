//! `ENC1` encoder checkpoints.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "ENC1"
//! layer_count  u32      body layers + 2 heads; 0 encodes the identity encoder
//! shapes       layer_count x (u32 input_dim, u32 output_dim)
//! tensors      per layer: output_dim*input_dim f32 weights (row-major,
//!              one row per output unit) then output_dim f32 biases
//! ```
//!
//! The last two layers are the class head and the rotation head, in that order.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::encoder::mlp::{Dense, EncoderParams};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const ENC_MAGIC: &[u8; 4] = b"ENC1";

pub fn encode_encoder(encoder: &Encoder) -> Vec<u8> {
    let mut out = ENC_MAGIC.to_vec();
    let Encoder::Mlp(params) = encoder else {
        out.write_u32::<LittleEndian>(0).expect("vec write");
        return out;
    };
    let layers: Vec<&Dense<f32>> = params.layers().collect();
    out.write_u32::<LittleEndian>(layers.len() as u32).expect("vec write");
    for l in &layers {
        out.write_u32::<LittleEndian>(l.input_dim() as u32).expect("vec write");
        out.write_u32::<LittleEndian>(l.output_dim() as u32).expect("vec write");
    }
    for l in &layers {
        for &v in l.weights.as_slice().iter().chain(&l.bias) {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    out
}

pub fn decode_encoder(bytes: &[u8]) -> std::result::Result<Encoder, String> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| "missing magic")?;
    if &magic != ENC_MAGIC {
        return Err(format!("bad magic {magic:?}, expected ENC1"));
    }
    let count = cur.read_u32::<LittleEndian>().map_err(|_| "truncated header")? as usize;
    if count == 0 {
        if cur.position() as usize != bytes.len() {
            return Err("trailing bytes after identity checkpoint".into());
        }
        return Ok(Encoder::Identity);
    }
    if count < 3 {
        return Err(format!("{count} layers; need at least one body layer and two heads"));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let input = cur.read_u32::<LittleEndian>().map_err(|_| "truncated shapes")? as usize;
        let output = cur.read_u32::<LittleEndian>().map_err(|_| "truncated shapes")? as usize;
        shapes.push((input, output));
    }
    let mut layers = Vec::with_capacity(count);
    for (input, output) in shapes {
        let mut w = vec![0f32; input * output];
        cur.read_f32_into::<LittleEndian>(&mut w)
            .map_err(|_| "truncated weights")?;
        let mut b = vec![0f32; output];
        cur.read_f32_into::<LittleEndian>(&mut b)
            .map_err(|_| "truncated biases")?;
        layers.push(Dense {
            weights: Matrix::from_vec(output, input, w).map_err(|e| e.to_string())?,
            bias: b,
        });
    }
    if cur.position() as usize != bytes.len() {
        return Err("trailing bytes after tensors".into());
    }
    let rotation_head = layers.pop().expect("count >= 3");
    let class_head = layers.pop().expect("count >= 3");
    let params = EncoderParams {
        body: layers,
        class_head,
        rotation_head,
    };
    params.check_shapes().map_err(|e| e.to_string())?;
    if !params.all_finite() {
        return Err("non-finite parameter".into());
    }
    Ok(Encoder::Mlp(params))
}

pub fn save_encoder(encoder: &Encoder, path: &Path) -> Result<()> {
    std::fs::write(path, encode_encoder(encoder)).map_err(|e| Error::io(path, e))
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_encoder(&bytes).map_err(|m| Error::format(path, m))
}
