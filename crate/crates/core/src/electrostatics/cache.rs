//! Binary container for solved basis densities.
//!
//! Layout, all integers little endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `TRAPBSIS` |
//! | 4     | format version (u32) |
//! | 32    | content hash of geometry, mesh options and kernel version |
//! | 32    | mesh checksum |
//! | 8     | panel count (u64) |
//! | 4     | electrode count (u32) |
//! | ...   | per electrode: name length (u32), UTF-8 name, role tag (u8), side (u8, 255 = none), index (u32), then one f64 density per panel |
//! | 32    | SHA-256 of everything above |

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{ElectrodeRole, Side};

pub const MAGIC: &[u8; 8] = b"TRAPBSIS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("not a basis cache file")]
    BadMagic,
    #[error("unsupported cache format version {0}")]
    Version(u32),
    #[error("cache file truncated")]
    Truncated,
    #[error("cache file checksum mismatch")]
    Checksum,
    #[error("invalid electrode record {0}")]
    BadRecord(usize),
    #[error("trailing bytes after cache payload")]
    Trailing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachedElectrode {
    pub name: String,
    pub role: ElectrodeRole,
    pub charges: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheContents {
    pub content_hash: [u8; 32],
    pub mesh_checksum: [u8; 32],
    pub n_panels: usize,
    pub electrodes: Vec<CachedElectrode>,
}

fn role_tag(role: &ElectrodeRole) -> (u8, u8, u32) {
    let side = |s: &Side| match s {
        Side::Left => 0u8,
        Side::Right => 1u8,
    };
    match role {
        ElectrodeRole::RfRail { side: s } => (0, side(s), 0),
        ElectrodeRole::DcSegment { side: s, index } => (1, side(s), *index as u32),
        ElectrodeRole::DcDiagonal { side: s } => (2, side(s), 0),
        ElectrodeRole::TopGround => (3, 255, 0),
        ElectrodeRole::BottomGround => (4, 255, 0),
        ElectrodeRole::Substrate => (5, 255, 0),
        ElectrodeRole::Other => (6, 255, 0),
    }
}

fn role_from_tag(tag: u8, side: u8, index: u32) -> Option<ElectrodeRole> {
    let side = match side {
        0 => Some(Side::Left),
        1 => Some(Side::Right),
        255 => None,
        _ => return None,
    };
    Some(match (tag, side) {
        (0, Some(side)) => ElectrodeRole::RfRail { side },
        (1, Some(side)) => ElectrodeRole::DcSegment {
            side,
            index: index as usize,
        },
        (2, Some(side)) => ElectrodeRole::DcDiagonal { side },
        (3, None) => ElectrodeRole::TopGround,
        (4, None) => ElectrodeRole::BottomGround,
        (5, None) => ElectrodeRole::Substrate,
        (6, None) => ElectrodeRole::Other,
        _ => return None,
    })
}

pub fn encode(c: &CacheContents) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + c.electrodes.len() * (c.n_panels * 8 + 32));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.content_hash);
    out.extend_from_slice(&c.mesh_checksum);
    out.extend_from_slice(&(c.n_panels as u64).to_le_bytes());
    out.extend_from_slice(&(c.electrodes.len() as u32).to_le_bytes());
    for e in &c.electrodes {
        assert_eq!(e.charges.len(), c.n_panels, "density vector length");
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let (tag, side, index) = role_tag(&e.role);
        out.push(tag);
        out.push(side);
        out.extend_from_slice(&index.to_le_bytes());
        for v in &e.charges {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CacheError> {
        let end = self.pos.checked_add(n).ok_or(CacheError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CacheError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CacheError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CacheError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parse and verify a cache file. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<CacheContents, CacheError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CacheError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CacheError::Truncated);
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: payload, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CacheError::Version(version));
    }
    if Sha256::digest(payload).as_slice() != digest {
        return Err(CacheError::Checksum);
    }
    let content_hash = r.array()?;
    let mesh_checksum = r.array()?;
    let n_panels = usize::try_from(r.u64()?).map_err(|_| CacheError::Truncated)?;
    let n_electrodes = r.u32()? as usize;
    let per_record = n_panels.checked_mul(8).ok_or(CacheError::Truncated)?;
    if per_record.checked_mul(n_electrodes).ok_or(CacheError::Truncated)? > r.remaining() {
        return Err(CacheError::Truncated);
    }
    // every record holds at least 10 header bytes
    let mut electrodes = Vec::with_capacity(n_electrodes.min(r.remaining() / 10));
    for i in 0..n_electrodes {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CacheError::BadRecord(i))?
            .to_owned();
        let [tag, side] = r.array()?;
        let index = r.u32()?;
        let role = role_from_tag(tag, side, index).ok_or(CacheError::BadRecord(i))?;
        let raw = r.take(per_record)?;
        let charges = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        electrodes.push(CachedElectrode { name, role, charges });
    }
    if r.remaining() != 0 {
        return Err(CacheError::Trailing);
    }
    Ok(CacheContents {
        content_hash,
        mesh_checksum,
        n_panels,
        electrodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CacheContents {
        CacheContents {
            content_hash: [7; 32],
            mesh_checksum: [9; 32],
            n_panels: 3,
            electrodes: vec![
                CachedElectrode {
                    name: "rf_left".into(),
                    role: ElectrodeRole::RfRail { side: Side::Left },
                    charges: vec![1.0, -2.5, 3.25],
                },
                CachedElectrode {
                    name: "dc_right_04".into(),
                    role: ElectrodeRole::DcSegment {
                        side: Side::Right,
                        index: 4,
                    },
                    charges: vec![0.0, f64::MIN_POSITIVE, -0.0],
                },
                CachedElectrode {
                    name: "substrate".into(),
                    role: ElectrodeRole::Substrate,
                    charges: vec![1e300, -1e-300, 5.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = encode(&c);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert_eq!(decode(&bytes), Err(CacheError::Checksum));
    }

    #[test]
    fn truncation_and_garbage_are_errors() {
        let bytes = encode(&sample());
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err());
        }
        assert_eq!(decode(b"not a cache"), Err(CacheError::BadMagic));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[8] = 2;
        assert_eq!(decode(&bytes), Err(CacheError::Version(2)));
    }

    #[test]
    fn huge_declared_sizes_do_not_allocate() {
        let mut c = sample();
        c.electrodes.clear();
        let mut bytes = encode(&c);
        // declare u64::MAX panels and re-sign the payload
        bytes.truncate(bytes.len() - 32);
        let off = 8 + 4 + 64;
        bytes[off..off + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        bytes[off + 8..off + 12].copy_from_slice(&1000u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert_eq!(decode(&bytes), Err(CacheError::Truncated));
    }
}
