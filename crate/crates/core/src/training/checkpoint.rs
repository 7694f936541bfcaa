//! Binary checkpoint container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes  "MMACKPT\0"
//! version      u32
//! step         u64
//! manifest     u32 byte length, then UTF-8 TOML of the run configuration
//! n_arrays     u32
//! per array    u32 name length, name (UTF-8), u32 ndim, ndim x u64 dims,
//!              prod(dims) x f32 values
//! has_adam     u8 (0 or 1)
//! adam         f64 beta1, f64 beta2, f64 eps, u64 step, then for every
//!              array in order: first moments (f32), then second moments (f32)
//! ```

use std::io::Write;
use std::path::Path;

use super::config::RunConfig;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: Vec<Param<f32>>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(config: &RunConfig, model: &Model<S>, step: u64, optimizer: Option<&Adam>) -> Self {
        Self {
            config: config.clone(),
            step,
            params: model.params().iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model; fails with a version error if the stored arrays do
    /// not match the stored configuration.
    pub fn model<S: Scalar>(&self) -> Result<Model<S>> {
        let params = self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect();
        Model::from_params(self.config.model(), params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config.to_toml());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, p.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                for v in [a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&a.step.to_le_bytes());
                for (m, v) in a.m.iter().zip(&a.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Version("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("checkpoint format {version}, expected {FORMAT_VERSION}")));
        }
        let step = r.u64()?;
        let manifest = r.string()?;
        let config = RunConfig::from_toml(&manifest).map_err(|e| Error::Version(format!("bad manifest: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = r.f32s(len)?;
            params.push(Param { name, value: Tensor::new(shape, data)? });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for p in &params {
                    m.push(r.f32s(p.value.len())?);
                    v.push(r.f32s(p.value.len())?);
                }
                Some(Adam { beta1, beta2, eps, step, m, v })
            }
            other => return Err(Error::Version(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Version(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self { config, step, params, optimizer };
        ckpt.model::<f32>()?;
        Ok(ckpt)
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s<S: Scalar>(out: &mut Vec<u8>, data: &[S]) {
    for v in data {
        out.extend_from_slice(&Scalar::to_f32(*v).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Version("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Version("non-UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Version("array too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig { d_model: 8, ffn_dim: 16, n_heads: 2, encoder_layers: 1, decoder_layers: 1, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let model = Model::<f32>::new(cfg.model(), 5).unwrap();
        let mut opt = Adam::new(model.params().iter().map(|p| p.value.len()), 0.9, 0.98, 1e-8);
        opt.step = 7;
        opt.m[0][3] = 0.25;
        let ck = Checkpoint::from_model(&cfg, &model, 42, Some(&opt));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let m2: Model<f32> = back.model().unwrap();
        for (a, b) in model.params().iter().zip(m2.params()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = tiny();
        let model = Model::<f32>::new(cfg.model(), 5).unwrap();
        let bytes = Checkpoint::from_model(&cfg, &model, 1, None).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Version(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version(_))));
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Version(_))));
    }

    #[test]
    fn config_mismatch_is_a_version_error() {
        let cfg = tiny();
        let model = Model::<f32>::new(cfg.model(), 5).unwrap();
        let mut ck = Checkpoint::from_model(&cfg, &model, 1, None);
        ck.config.d_model = 16;
        ck.config.ffn_dim = 16;
        assert!(matches!(ck.model::<f32>(), Err(Error::Version(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = tiny();
        let model = Model::<f32>::new(cfg.model(), 5).unwrap();
        let ck = Checkpoint::from_model(&cfg, &model, 3, None);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
