//! Binary checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "GMCK"  u32 version  u32 layer_count
//! per layer:       u8 kind tag; conv/dense layers then store
//!                  weights and bias, each as 4×u32 dims + payload
//! Adam first moments of every conv/dense layer, same order and encoding
//! Adam second moments, same order and encoding
//! u64 step
//! ```
//!
//! Version 1 stores `f32` payloads, version 2 `f64`.

use std::io::Write;
use std::path::Path;

use super::params::LayerState;
use super::{Network, ParamStore};
use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::tensor::{Dims, Scalar, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";

fn version_for<T: Scalar>() -> u32 {
    if T::BYTES == 4 {
        1
    } else {
        2
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor4<T>) {
    let d = t.dims();
    for v in [d.n, d.w, d.h, d.c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialise a parameter store to bytes.
pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&version_for::<T>().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (tag, s) in store.kinds().iter().zip(store.states()) {
        out.push(*tag);
        if let Some(s) = s {
            put_tensor(&mut out, &s.params.weights);
            put_tensor(&mut out, &s.params.bias);
        }
    }
    for pick in [|s: &LayerState<T>| s.m.clone(), |s: &LayerState<T>| s.v.clone()] {
        for s in store.states().iter().flatten() {
            let p = pick(s);
            put_tensor(&mut out, &p.weights);
            put_tensor(&mut out, &p.bias);
        }
    }
    out.extend_from_slice(&store.step().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor4<T>> {
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = self.u32()? as usize;
        }
        let dims = Dims::new(d[0], d[1], d[2], d[3]);
        dims.validate().map_err(|e| format_err(e.to_string()))?;
        let len = d.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| format_err("dims overflow"))?;
        let bytes = self.take(len.checked_mul(T::BYTES).ok_or_else(|| format_err("dims overflow"))?)?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor4::from_vec(dims, data)
    }

    fn params<T: Scalar>(&mut self) -> Result<ConvParams<T>> {
        Ok(ConvParams { weights: self.tensor()?, bias: self.tensor()? })
    }
}

/// Parse a checkpoint; any inconsistency is a format error.
pub fn decode<T: Scalar>(buf: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != 1 && version != 2 {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    if version != version_for::<T>() {
        let bits = if version == 1 { 32 } else { 64 };
        return Err(format_err(format!("checkpoint holds {bits}-bit parameters, network uses {}-bit", T::BYTES * 8)));
    }
    let count = r.u32()? as usize;
    let mut kinds = Vec::new();
    let mut params = Vec::new();
    for _ in 0..count {
        let tag = r.u8()?;
        match tag {
            1 | 2 => params.push(Some(r.params::<T>()?)),
            3..=8 => params.push(None),
            _ => return Err(format_err(format!("unknown layer kind tag {tag}"))),
        }
        kinds.push(tag);
    }
    let mut moments = [Vec::new(), Vec::new()];
    for m in &mut moments {
        for p in params.iter().flatten() {
            let q = r.params::<T>()?;
            if q.weights.dims() != p.weights.dims() || q.bias.dims() != p.bias.dims() {
                return Err(format_err("moment dims differ from parameter dims"));
            }
            m.push(q);
        }
    }
    let step = r.u64()?;
    if r.pos != buf.len() {
        return Err(format_err(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }
    let [ms, vs] = moments;
    let (mut ms, mut vs) = (ms.into_iter(), vs.into_iter());
    let layers = params
        .into_iter()
        .map(|p| {
            p.map(|params| LayerState { params, m: ms.next().expect("counted"), v: vs.next().expect("counted") })
        })
        .collect();
    Ok(ParamStore::from_parts(kinds, layers, step))
}

/// Write `store` to `path` (via a temporary file renamed into place).
pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode(store);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    decode(&std::fs::read(path)?)
}

/// Exact file size of a checkpoint for `net` at scalar width `bytes`.
pub fn checkpoint_len(net: &Network, bytes: usize) -> usize {
    let header = 4 + 4 + 4;
    let tensor = |d: Dims| 16 + d.len() * bytes;
    let mut params = 0;
    for l in net.layers() {
        let conv = match l {
            crate::ops::Layer::Conv(c) => c,
            crate::ops::Layer::Dense(d) => &d.conv,
            _ => continue,
        };
        params += tensor(conv.weight_dims()) + tensor(conv.bias_dims());
    }
    header + net.layers().len() + 3 * params + 8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{presets, train_step, TrainConfig};
    use crate::rng::Rng;

    fn trained_toy() -> (Network, ParamStore<f32>) {
        let net = Network::build(&presets::toy(0.33)).unwrap();
        let mut store = ParamStore::<f32>::init(&net, 4);
        let x = Tensor4::filled(net.input_dims(2), 0.25f32);
        let cfg = TrainConfig { nu: 1e-3, ..TrainConfig::default() };
        train_step(&net, &mut store, &x, &[1.0, 0.0], &cfg, &mut Rng::new(1)).unwrap();
        (net, store)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, store) = trained_toy();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&store, &a).unwrap();
        let loaded: ParamStore<f32> = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(loaded.step(), 1);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn toy_golden_length() {
        let (net, store) = trained_toy();
        // conv 4×4×3×8 + untied 32×32×8, conv 3×3×8×16 + 15×15×16,
        // conv 3×3×16×16 + 7×7×16, dense 3×3×16×1 + 1
        let scalars = (384 + 8192) + (1152 + 3600) + (2304 + 784) + (144 + 1);
        let per_set = 8 * 16 + scalars * 4;
        let expect = 12 + 10 + 3 * per_set + 8;
        assert_eq!(checkpoint_len(&net, 4), expect);
        assert_eq!(encode(&store).len(), expect);
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let (_, store) = trained_toy();
        let bytes = encode(&store);
        for cut in [0, 3, 11, 13, 100, bytes.len() - 1] {
            assert!(matches!(decode::<f32>(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format(_))));
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode::<f32>(&long), Err(Error::Format(_))));
    }

    #[test]
    fn f64_round_trip() {
        let net = Network::build(&presets::toy(0.33)).unwrap();
        let store = ParamStore::<f64>::init(&net, 9);
        let bytes = encode(&store);
        assert_eq!(bytes.len(), checkpoint_len(&net, 8));
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(decode::<f64>(&bytes).unwrap(), store);
    }
}
