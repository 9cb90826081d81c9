//! Binary snapshot format (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PXMODIDX"
//! version    u16
//! hash kind  u8       1 = PHASH64, 2 = PDQ256
//! count      u64      record slots, including removed ones
//! config     u8 kind (0 flat, 1 ivf), u32 nlist, u32 nprobe
//! clustering u8 present; if 1: u32 nlist, u32 max_iters, u64 seed,
//!            nlist * words u64 centroids
//! records    count times: u8 flags (bit 0 = removed), u16 id length,
//!            id bytes, words u64, and a u32 cluster when clustered
//! crc32      u32 over every preceding byte
//! ```
//!
//! The checksum is verified before anything else is parsed, so a truncated
//! file is always reported as a checksum failure.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BinaryIndex, IndexConfig, IndexError, IndexKind, IvfParams, IvfState};
use crate::hashing::HashKind;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"PXMODIDX";
pub const SNAPSHOT_VERSION: u16 = 1;

const FLAG_REMOVED: u8 = 1;

impl BinaryIndex {
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.ids.len() * (self.stride * 8 + 24));
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.push(self.hash_kind.tag());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());

        out.push(match self.config.kind {
            IndexKind::Flat => 0,
            IndexKind::Ivf => 1,
        });
        out.extend_from_slice(&self.config.nlist.to_le_bytes());
        out.extend_from_slice(&self.config.nprobe.to_le_bytes());
        match &self.ivf {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.params.nlist.to_le_bytes());
                out.extend_from_slice(&state.params.max_iters.to_le_bytes());
                out.extend_from_slice(&state.params.seed.to_le_bytes());
                for w in &state.centroids {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }

        for slot in 0..self.ids.len() {
            out.push(if self.live[slot] { 0 } else { FLAG_REMOVED });
            let id = self.ids[slot].as_bytes();
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id);
            for w in self.slot_words(slot) {
                out.extend_from_slice(&w.to_le_bytes());
            }
            if let Some(state) = &self.ivf {
                out.extend_from_slice(&state.assignment[slot].to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 4 {
            return Err(IndexError::ChecksumMismatch);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(IndexError::ChecksumMismatch);
        }

        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = r.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let tag = r.u8()?;
        let hash_kind = HashKind::from_tag(tag).ok_or_else(|| IndexError::Corrupt(format!("hash kind tag {tag}")))?;
        let count = usize::try_from(r.u64()?).map_err(|_| IndexError::Corrupt("record count".into()))?;

        let kind = match r.u8()? {
            0 => IndexKind::Flat,
            1 => IndexKind::Ivf,
            k => return Err(IndexError::Corrupt(format!("index kind {k}"))),
        };
        let config = IndexConfig {
            kind,
            nlist: r.u32()?,
            nprobe: r.u32()?,
        };
        config.validate().map_err(|e| IndexError::Corrupt(e.to_string()))?;

        let mut index = BinaryIndex::new(hash_kind, config)?;
        let stride = index.stride;
        let clustered = match r.u8()? {
            0 => None,
            1 => {
                let params = IvfParams {
                    nlist: r.u32()?,
                    max_iters: r.u32()?,
                    seed: r.u64()?,
                };
                if params.nlist == 0 {
                    return Err(IndexError::Corrupt("zero clusters".into()));
                }
                let mut centroids = Vec::with_capacity(params.nlist as usize * stride);
                for _ in 0..params.nlist as usize * stride {
                    centroids.push(r.u64()?);
                }
                Some((params, centroids))
            }
            p => return Err(IndexError::Corrupt(format!("clustering flag {p}"))),
        };

        // Guard allocation against a hostile count: each record needs at
        // least 3 + 8 * stride bytes.
        if count > r.remaining() / (3 + 8 * stride) {
            return Err(IndexError::Corrupt("record count exceeds file size".into()));
        }
        index.ids.reserve(count);
        index.words.reserve(count * stride);
        index.live.reserve(count);
        let mut assignment = Vec::new();
        for slot in 0..count {
            let flags = r.u8()?;
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|_| IndexError::Corrupt("id is not UTF-8".into()))?;
            for _ in 0..stride {
                let w = r.u64()?;
                index.words.push(w);
            }
            let live = flags & FLAG_REMOVED == 0;
            if live && index.by_id.insert(id.into(), slot as u32).is_some() {
                return Err(IndexError::Corrupt(format!("duplicate live id {id:?}")));
            }
            index.ids.push(id.into());
            index.live.push(live);
            if live {
                index.live_count += 1;
            }
            if let Some((params, _)) = &clustered {
                let c = r.u32()?;
                if c >= params.nlist {
                    return Err(IndexError::Corrupt(format!("cluster {c} out of range")));
                }
                assignment.push(c);
            }
        }
        if r.remaining() != 0 {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        if let Some((params, centroids)) = clustered {
            let mut lists = vec![Vec::new(); params.nlist as usize];
            for (slot, &c) in assignment.iter().enumerate() {
                lists[c as usize].push(slot as u32);
            }
            index.ivf = Some(IvfState {
                params,
                centroids,
                assignment,
                lists,
            });
        }
        Ok(index)
    }

    /// Writes the snapshot to a sibling temp file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_snapshot_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_snapshot_bytes(&fs::read(path)?)
    }

    /// Like [`BinaryIndex::load`] but rejects a snapshot of another hash kind.
    pub fn load_expecting(path: impl AsRef<Path>, kind: HashKind) -> Result<Self, IndexError> {
        let index = Self::load(path)?;
        if index.hash_kind != kind {
            return Err(IndexError::KindMismatch {
                expected: kind,
                actual: index.hash_kind,
            });
        }
        Ok(index)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IndexError::Corrupt("unexpected end of snapshot".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
