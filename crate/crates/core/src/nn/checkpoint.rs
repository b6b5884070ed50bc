//! Binary checkpoint: `"SBNN"`, version `u32`, layer count `u32`,
//! `layer count + 1` dims as `u32`, activation tag `u8`, then per layer the
//! row-major weights followed by the biases, all `f64` little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Activation, MlpNet};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SBNN";
const VERSION: u32 = 1;
const MAX_DIM: u32 = 1 << 20;

pub fn write_checkpoint<W: Write>(net: &MlpNet, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(net.num_layers() as u32)?;
    for &d in net.dims() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u8(net.activation().tag())?;
    for l in 0..net.num_layers() {
        for &v in net.weights(l).iter().chain(net.biases(l)) {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<MlpNet> {
    let bad = |reason: &str| Error::format(origin, reason);
    let trunc = |_| bad("truncated checkpoint");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not a network checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let layers = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if layers == 0 || layers > 64 {
        return Err(bad("implausible layer count"));
    }
    let mut dims = Vec::with_capacity(layers as usize + 1);
    for _ in 0..=layers {
        let d = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if d == 0 || d > MAX_DIM {
            return Err(bad("implausible layer size"));
        }
        dims.push(d as usize);
    }
    let activation = Activation::from_tag(r.read_u8().map_err(trunc)?)
        .ok_or_else(|| bad("unknown activation tag"))?;
    let mut weights = Vec::with_capacity(layers as usize);
    let mut biases = Vec::with_capacity(layers as usize);
    for l in 0..layers as usize {
        let mut w = vec![0.0; dims[l] * dims[l + 1]];
        r.read_f64_into::<LittleEndian>(&mut w).map_err(trunc)?;
        let mut b = vec![0.0; dims[l + 1]];
        r.read_f64_into::<LittleEndian>(&mut b).map_err(trunc)?;
        weights.push(w);
        biases.push(b);
    }
    MlpNet::from_parts(&dims, activation, weights, biases)
}

pub fn save_checkpoint(net: &MlpNet, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(net, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpNet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), path)
}
