//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "AIRD"                      magic
//! u32                         format version (1)
//! u32 len, [u8; len]          architecture descriptor, canonical text
//! u32 n                       parameter manifest:
//!   n × { u32 len, name, u32 ndim, ndim × u64 extent }
//! u32 m                       BN manifest:
//!   m × { u32 len, name, u64 channels }
//! parameter blocks            f64 values, manifest order
//! BN blocks                   per BN layer: mean[channels], var[channels]
//! ```
//!
//! Loading re-derives the manifest from the descriptor and rejects any
//! disagreement, so a checkpoint always matches its own architecture.

use std::fs;
use std::path::Path;

use super::arch::Architecture;
use super::batchnorm::{BnStats, BnStore};
use super::network::Network;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AIRD";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &net.arch.to_text());
    put_u32(&mut out, net.params.len() as u32);
    for (name, t) in net.params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.ndim() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    put_u32(&mut out, net.bn.len() as u32);
    for (name, s) in net.bn.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(s.channels() as u64).to_le_bytes());
    }
    for (_, t) in net.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (_, s) in net.bn.iter() {
        for v in s.mean.iter().chain(&s.var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Network> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {version} (expected {FORMAT_VERSION})"
        )));
    }
    let arch = Architecture::parse(&r.string()?)?;
    let specs = arch.param_specs()?;
    let n = r.u32()? as usize;
    if n != specs.len() {
        return Err(Error::Format(format!(
            "manifest lists {n} parameters, architecture defines {}",
            specs.len()
        )));
    }
    let mut manifest = Vec::with_capacity(n);
    for spec in &specs {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != spec.name || shape != spec.shape {
            return Err(Error::Format(format!(
                "manifest entry {name} {shape:?} disagrees with architecture ({} {:?})",
                spec.name, spec.shape
            )));
        }
        manifest.push((name, shape));
    }
    let bn_layers = arch.bn_layers()?;
    let m = r.u32()? as usize;
    if m != bn_layers.len() {
        return Err(Error::Format(format!(
            "manifest lists {m} BN layers, architecture defines {}",
            bn_layers.len()
        )));
    }
    let mut bn_manifest = Vec::with_capacity(m);
    for (expected, channels) in &bn_layers {
        let name = r.string()?;
        let c = r.u64()? as usize;
        if &name != expected || c != *channels {
            return Err(Error::Format(format!("BN manifest entry {name} disagrees")));
        }
        bn_manifest.push((name, c));
    }
    let mut params = ParamStore::new();
    for (name, shape) in manifest {
        let len = shape.iter().product();
        params.insert(name, Tensor::new(shape, r.f64s(len)?)?)?;
    }
    let mut bn = BnStore::new();
    for (name, c) in bn_manifest {
        let mean = r.f64s(c)?;
        let var = r.f64s(c)?;
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::Format(format!(
                "negative running variance in {name}"
            )));
        }
        bn.insert(name, BnStats { mean, var });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        )));
    }
    Ok(Network { arch, params, bn })
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut net = Network::init(Architecture::student(8, 3), SeedStream::new(11)).unwrap();
        net.bn.get_mut("b1.bn").unwrap().mean[2] = 0.1 + 0.2;
        let bytes = to_bytes(&net);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupted_input_is_rejected() {
        let net = Network::init(Architecture::student(8, 3), SeedStream::new(1)).unwrap();
        let bytes = to_bytes(&net);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(from_bytes(&longer).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load(Path::new("/nonexistent/teacher.ckpt")).unwrap_err();
        assert!(err.to_string().contains("teacher.ckpt"));
    }
}
