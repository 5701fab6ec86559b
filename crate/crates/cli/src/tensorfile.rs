//! Raw `f64` tensors on disk: `GMTN`, four little-endian `u32` dims
//! (`n w h c`), then the values in tensor order.

use std::path::Path;

use anyhow::{bail, Context};
use gradmine::{Dims, Tensor4};

const MAGIC: &[u8; 4] = b"GMTN";

pub fn write(path: &Path, t: &Tensor4<f64>) -> anyhow::Result<()> {
    let d = t.dims();
    let mut buf = Vec::with_capacity(20 + 8 * t.data().len());
    buf.extend_from_slice(MAGIC);
    for v in [d.n, d.w, d.h, d.c] {
        buf.extend_from_slice(&u32::try_from(v)?.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> anyhow::Result<Tensor4<f64>> {
    let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if buf.len() < 20 || &buf[..4] != MAGIC {
        bail!(gradmine::Error::Format(format!("{} is not a tensor file", path.display())));
    }
    let dim = |k: usize| u32::from_le_bytes(buf[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let d = Dims::new(dim(0), dim(1), dim(2), dim(3));
    if buf.len() != 20 + 8 * d.len() {
        bail!(gradmine::Error::Format(format!("{}: payload does not match dims {d}", path.display())));
    }
    let data = buf[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Tensor4::from_vec(d, data)?)
}
