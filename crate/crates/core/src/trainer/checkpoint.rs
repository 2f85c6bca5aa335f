//! Versioned binary checkpoints: `SVQCKPT1`, a little-endian `u32` version,
//! a `u64` payload length, the payload, and a CRC32 of the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::optim::OptimState;

pub const MAGIC: &[u8; 8] = b"SVQCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the configuration that produced the run.
    pub config: String,
    pub step: u64,
    /// Seed of the data-order and noise streams; both are derived per step.
    pub seed: u64,
    pub params: ParamStore,
    pub optim: OptimState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn data(&mut self, t: &Tensor) {
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt {
                op: "load_checkpoint",
                msg: format!("payload ends early at byte {}", self.at),
            });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.bytes.len() as u64 {
            return Err(Error::Corrupt {
                op: "load_checkpoint",
                msg: format!("length {n} exceeds payload"),
            });
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt {
            op: "load_checkpoint",
            msg: "invalid utf-8".into(),
        })
    }
    fn data(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(8 * n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    fn payload(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.str(&self.config);
        w.u64(self.step);
        w.u64(self.seed);
        w.u64(self.params.len() as u64);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.u64(t.ndim() as u64);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.data(t);
        }
        let o = &self.optim;
        w.u64(o.step);
        for x in [o.beta1, o.beta2, o.eps, o.weight_decay] {
            w.f64(x);
        }
        for t in o.m.iter().chain(&o.v) {
            w.data(t);
        }
        w.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let op = "load_checkpoint";
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::format(op, "missing SVQCKPT1 header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                op,
                expected: VERSION,
                found: version,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if bytes.len() as u64 != 20 + len + 4 {
            return Err(Error::Corrupt {
                op,
                msg: format!("declared payload {len} bytes, file has {}", bytes.len()),
            });
        }
        let payload = &bytes[20..20 + len as usize];
        let crc = u32::from_le_bytes(bytes[20 + len as usize..].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != crc {
            return Err(Error::Corrupt {
                op,
                msg: "CRC32 mismatch".into(),
            });
        }
        let mut r = Reader {
            bytes: payload,
            at: 0,
        };
        let config = r.str()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let t = r.data(shape)?;
            if params.id(&name).is_some() {
                return Err(Error::Corrupt {
                    op,
                    msg: format!("duplicate parameter {name}"),
                });
            }
            params.add(name, t);
        }
        let ostep = r.u64()?;
        let (beta1, beta2, eps, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let shapes: Vec<Vec<usize>> = params.values().iter().map(|t| t.shape().to_vec()).collect();
        let m = shapes
            .iter()
            .map(|s| r.data(s.clone()))
            .collect::<Result<Vec<_>>>()?;
        let v = shapes
            .iter()
            .map(|s| r.data(s.clone()))
            .collect::<Result<Vec<_>>>()?;
        if r.at != payload.len() {
            return Err(Error::Corrupt {
                op,
                msg: "trailing bytes in payload".into(),
            });
        }
        Ok(Checkpoint {
            config,
            step,
            seed,
            params,
            optim: OptimState {
                m,
                v,
                step: ostep,
                beta1,
                beta2,
                eps,
                weight_decay,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io("save_checkpoint", path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io("load_checkpoint", path, e))?;
        Self::from_bytes(&bytes)
    }
}
