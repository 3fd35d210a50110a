//! Binary model files: magic, version, architecture, output scale, then every
//! parameter tensor in declared order, all little endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{UNet, UNetSpec, Variant};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PATO";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_checkpoint<W: Write>(w: &mut W, net: &UNet) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let variant = match net.spec.variant {
        Variant::Plain => 0,
        Variant::SpatialAttention => 1,
        Variant::AttentionGate => 2,
    };
    put_u32(w, variant)?;
    put_u32(w, net.spec.kernel as u32)?;
    put_u32(w, net.spec.attention_kernel as u32)?;
    put_u32(w, net.spec.ladder.len() as u32)?;
    for c in &net.spec.ladder {
        put_u32(w, *c as u32)?;
    }
    w.write_all(&net.output_scale.to_le_bytes())?;
    put_u32(w, net.params.len() as u32)?;
    for p in &net.params {
        for s in p.shape {
            put_u32(w, s as u32)?;
        }
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<UNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a model file"));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported model format version {version}")));
    }
    let variant = match get_u32(r)? {
        0 => Variant::Plain,
        1 => Variant::SpatialAttention,
        2 => Variant::AttentionGate,
        v => return Err(bad(format!("unknown variant tag {v}"))),
    };
    let kernel = get_u32(r)? as usize;
    let attention_kernel = get_u32(r)? as usize;
    let n = get_u32(r)? as usize;
    if n > 64 {
        return Err(bad("implausible ladder length"));
    }
    let ladder = (0..n).map(|_| get_u32(r).map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
    let spec = UNetSpec { variant, ladder, kernel, attention_kernel };
    let mut net = UNet::zeros(spec).map_err(|e| bad(e.to_string()))?;
    net.output_scale = get_f64(r)?;
    let count = get_u32(r)? as usize;
    if count != net.params.len() {
        return Err(bad(format!("expected {} tensors, found {count}", net.params.len())));
    }
    for p in &mut net.params {
        let mut shape = [0usize; 5];
        for s in &mut shape {
            *s = get_u32(r)? as usize;
        }
        if shape != p.shape {
            return Err(bad(format!("tensor shape {shape:?} does not match {:?}", p.shape)));
        }
        for v in &mut p.data {
            *v = get_f64(r)?;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(net)
}

pub fn save_checkpoint(path: &Path, net: &UNet) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UNet> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

