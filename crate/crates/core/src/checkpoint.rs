//! Binary tensor archive used for checkpoints and multi-channel images.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"RDSK"
//! version u32 (= 1)
//! count   u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, payload f64 × Π dims }
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RDSK";
pub const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(alloc::format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(len)?).map_err(|_| corrupt("tensor name is not utf-8"))?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflows usize"))?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Every parameter plus running statistics (`<layer>.running_mean` /
/// `<layer>.running_var`) in construction order.
pub fn network_entries(net: &Network) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = net.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    for i in 0..net.norms().len() {
        let r = crate::nn::NormRef(i);
        let name = net.norm_name(r);
        let bn = net.norm(r);
        out.push((alloc::format!("{name}.running_mean"), Tensor::from_vec(bn.running_mean.clone())));
        out.push((alloc::format!("{name}.running_var"), Tensor::from_vec(bn.running_var.clone())));
    }
    out
}

pub fn save_network(net: &Network) -> Vec<u8> {
    encode(&network_entries(net))
}

/// Overwrites a network's parameters and statistics from checkpoint bytes.
/// The network must have been built with the same configuration.
pub fn load_network(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    let expected = network_entries(net);
    if entries.len() != expected.len() {
        return Err(corrupt(alloc::format!("expected {} tensors, found {}", expected.len(), entries.len())));
    }
    for ((name, t), (want, cur)) in entries.iter().zip(&expected) {
        if name != want || t.shape() != cur.shape() {
            return Err(corrupt(alloc::format!("tensor {name} {:?} does not match {want} {:?}", t.shape(), cur.shape())));
        }
    }
    let n_params = net.params().len();
    let ids: Vec<_> = net.params().ids().collect();
    for (id, (_, t)) in ids.into_iter().zip(&entries) {
        *net.params_mut().get_mut(id) = t.clone();
    }
    for (i, pair) in entries[n_params..].chunks_exact(2).enumerate() {
        let bn = &mut net.norms_mut()[i];
        bn.running_mean = pair[0].1.data().to_vec();
        bn.running_var = pair[1].1.data().to_vec();
    }
    Ok(())
}
