//! GAPW: named-tensor checkpoint container.
//!
//! ```text
//! "GAPW" | u16 version=1 | u16 flags=0 | u32 blob count
//! count × ( u16 name_len | name utf-8 | u32 ndim | ndim × u32 extent | f32 payload )
//! ```
//!
//! Text blobs (the run config) are stored one byte per `f32` under a name
//! ending in `.json`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GAPW";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blobs: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        let name = name.into();
        match self.blobs.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.blobs.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no blob named {name:?}")))
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        let n = bytes.len();
        self.insert(name, Tensor::new(&[n], bytes).expect("1-D blob"));
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.require(name)?;
        let bytes = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Data(format!("blob {name:?} is not a byte string")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("blob {name:?}: {e}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Data(format!("blob name {name:?} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if buf.len() - pos < n {
                return Err(Error::Format {
                    offset: pos as u64,
                    msg: format!("truncated {what}"),
                });
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().expect("2"));
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let _flags = take(2, "flags")?;
        let count = u32::from_le_bytes(take(4, "blob count")?.try_into().expect("4")) as usize;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let nl = u16::from_le_bytes(take(2, "name length")?.try_into().expect("2")) as usize;
            let name = String::from_utf8(take(nl, "name")?.to_vec()).map_err(|e| Error::Format {
                offset: 0,
                msg: format!("blob name: {e}"),
            })?;
            let ndim = u32::from_le_bytes(take(4, "ndim")?.try_into().expect("4")) as usize;
            if ndim > 8 {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("blob {name:?} has {ndim} dimensions"),
                });
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4, "extent")?.try_into().expect("4")) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    msg: format!("blob {name:?} shape {shape:?} overflows"),
                })?;
            let raw = take(n, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
                .collect();
            blobs.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self { blobs })
    }
}

pub fn write_gapw(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_gapw(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
