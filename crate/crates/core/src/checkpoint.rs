//! Binary model checkpoints.
//!
//! Layout: magic `VRBED1`, then `vocab`, `dim`, `window` as little-endian
//! u32, then little-endian f32 tensors in row-major order: mention table,
//! W_self, W_ctx, bias, followed by the same four for the label encoder.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{EncoderParams, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"VRBED1";

pub fn write_model(model: &Model, w: &mut impl Write) -> std::io::Result<()> {
    let m = &model.mention;
    w.write_all(MAGIC)?;
    for v in [m.vocab, m.dim, m.window] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for p in [&model.mention, &model.label] {
        for tensor in [&p.table, &p.w_self, &p.w_ctx, &p.bias] {
            for x in tensor.iter() {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    let bad = |what: &str| Error::Format(format!("checkpoint: {what}"));
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut header = [0usize; 3];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *h = u32::from_le_bytes(b) as usize;
    }
    let [vocab, dim, window] = header;
    let mut read_encoder = || -> Result<EncoderParams> {
        let mut p = EncoderParams::zeros(vocab, dim, window);
        for tensor in [&mut p.table, &mut p.w_self, &mut p.w_ctx, &mut p.bias] {
            let mut bytes = vec![0u8; tensor.len() * 4];
            r.read_exact(&mut bytes).map_err(|_| bad("truncated tensor"))?;
            for (x, b) in tensor.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
        }
        Ok(p)
    };
    let mention = read_encoder()?;
    let label = read_encoder()?;
    Ok(Model { mention, label })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut BufReader::new(file))
}

/// Rounds every parameter to f32, matching what a save/load cycle yields.
pub fn round_to_f32(model: &mut Model) {
    for p in [&mut model.mention, &mut model.label] {
        for x in p
            .table
            .iter_mut()
            .chain(p.w_self.iter_mut())
            .chain(p.w_ctx.iter_mut())
            .chain(p.bias.iter_mut())
        {
            *x = *x as f32 as f64;
        }
    }
}
