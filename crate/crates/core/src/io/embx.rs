//! EMBX: little-endian embedding container.
//!
//! ```text
//! "EMBX" | u16 version=1 | u16 flags=0 | u32 count | u32 dim
//! count × ( u8 label | u32 generator_id | u16 tag_len | tag utf-8 | dim × f32 )
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{EmbeddingRecord, EmbeddingSet};

pub const MAGIC: [u8; 4] = *b"EMBX";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
/// label + generator id + tag length, before the tag and vector.
const RECORD_FIXED: usize = 1 + 4 + 2;

pub fn encode(set: &EmbeddingSet) -> Result<Vec<u8>> {
    set.validate()?;
    let count = u32::try_from(set.records.len())
        .map_err(|_| Error::Data("too many records for EMBX".into()))?;
    let dim = u32::try_from(set.dim).map_err(|_| Error::Data("dimension too large for EMBX".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + set.records.len() * (RECORD_FIXED + 4 * set.dim));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for r in &set.records {
        let tag = r.tag.as_bytes();
        let tag_len =
            u16::try_from(tag.len()).map_err(|_| Error::Data(format!("tag of {} bytes is too long", tag.len())))?;
        out.push(r.label);
        out.extend_from_slice(&r.generator_id.to_le_bytes());
        out.extend_from_slice(&tag_len.to_le_bytes());
        out.extend_from_slice(tag);
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(buf: &[u8]) -> Result<EmbeddingSet> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let flags = c.u16("flags")?;
    if flags != 0 {
        return Err(Error::Format {
            offset: 6,
            msg: format!("unsupported flags {flags:#06x}"),
        });
    }
    let count = c.u32("record count")? as usize;
    let dim = c.u32("dim")? as usize;
    let min_record = dim
        .checked_mul(4)
        .and_then(|v| v.checked_add(RECORD_FIXED))
        .ok_or_else(|| Error::Format {
            offset: 12,
            msg: format!("dim {dim} overflows"),
        })?;
    if count.checked_mul(min_record).is_none_or(|need| need > c.remaining()) {
        return Err(Error::Format {
            offset: 8,
            msg: format!(
                "{count} records of dim {dim} need at least {} bytes, file has {}",
                count.saturating_mul(min_record),
                c.remaining()
            ),
        });
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let label_at = c.pos as u64;
        let label = c.u8("label")?;
        if label > 1 {
            return Err(Error::Format {
                offset: label_at,
                msg: format!("label {label} is not 0 or 1"),
            });
        }
        let generator_id = c.u32("generator id")?;
        let tag_len = c.u16("tag length")? as usize;
        let tag_at = c.pos as u64;
        let tag = std::str::from_utf8(c.take(tag_len, "tag")?)
            .map_err(|e| Error::Format {
                offset: tag_at,
                msg: format!("tag is not utf-8: {e}"),
            })?
            .to_owned();
        let raw = c.take(4 * dim, "vector")?;
        let vector = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(EmbeddingRecord {
            vector,
            label,
            generator_id,
            tag,
        });
    }
    if c.remaining() != 0 {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: format!("{} trailing bytes", c.remaining()),
        });
    }
    Ok(EmbeddingSet { dim, records })
}

pub fn write_embx(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(set)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embx(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, dim: usize) -> EmbeddingSet {
        let records = (0..n)
            .map(|i| EmbeddingRecord {
                vector: (0..dim).map(|j| (i * dim + j) as f32 * 0.25 - 3.0).collect(),
                label: (i % 2) as u8,
                generator_id: (i % 2) as u32 * (i as u32 % 5 + 1),
                tag: format!("img{i}"),
            })
            .collect();
        EmbeddingSet { dim, records }
    }

    #[test]
    fn empty_set_roundtrip_keeps_dim() {
        let set = EmbeddingSet::new(4);
        let back = decode(&encode(&set).unwrap()).unwrap();
        assert_eq!(back.dim, 4);
        assert!(back.records.is_empty());
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(&sample(1, 2)).unwrap();
        assert_eq!(&bytes[..4], &[0x45, 0x4D, 0x42, 0x58]);
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        // label, generator id, tag length 4, "img0", two f32
        assert_eq!(bytes.len(), 16 + 1 + 4 + 2 + 4 + 8);
        assert_eq!(&bytes[16..23], &[0, 0, 0, 0, 0, 4, 0]);
    }

    #[test]
    fn three_records_roundtrip_bitwise() {
        let set = sample(3, 5);
        assert_eq!(decode(&encode(&set).unwrap()).unwrap(), set);
    }

    #[test]
    fn thousand_by_128_roundtrip() {
        let set = sample(1000, 128);
        assert_eq!(decode(&encode(&set).unwrap()).unwrap(), set);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample(2, 3)).unwrap();
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode(&sample(2, 3)).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncated_at_header_boundary_cites_offset() {
        let bytes = encode(&sample(2, 3)).unwrap();
        match decode(&bytes[..12]) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 12);
                assert!(msg.contains("dim"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match decode(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oversized_count_rejected_before_allocation() {
        let mut bytes = encode(&sample(1, 3)).unwrap();
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 8, .. })));
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }
}
