//! Append-only event log. Each frame is a little-endian `u32` payload
//! length, the payload's CRC-32, then the payload (one JSON event).
//!
//! Replay stops at the first short or corrupt frame and cuts the file
//! there, so a write torn by a crash loses only that one event.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::StoreError;

const HEADER: usize = 8;
/// Frames larger than this are treated as corruption.
const MAX_FRAME: u32 = 64 << 20;

pub(crate) struct Journal {
    file: File,
    fsync: bool,
}

impl Journal {
    /// Opens or creates the log and returns the events it holds plus the
    /// number of bytes dropped from a torn tail.
    pub(crate) fn open<E: DeserializeOwned>(path: &Path, fsync: bool) -> Result<(Self, Vec<E>, u64), StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let mut events = Vec::new();
        let mut at = 0usize;
        while bytes.len() - at >= HEADER {
            let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            let crc = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().expect("4 bytes"));
            if len > MAX_FRAME || bytes.len() - at - HEADER < len as usize {
                break;
            }
            let payload = &bytes[at + HEADER..at + HEADER + len as usize];
            if crc32fast::hash(payload) != crc {
                break;
            }
            let event = serde_json::from_slice(payload).map_err(|e| StoreError::Corrupt(format!("journal event at byte {at}: {e}")))?;
            events.push(event);
            at += HEADER + len as usize;
        }
        let dropped = (bytes.len() - at) as u64;
        if dropped > 0 {
            tracing::warn!(path = %path.display(), dropped, "discarding torn journal tail");
            file.set_len(at as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok((Journal { file, fsync }, events, dropped))
    }

    pub(crate) fn append<E: Serialize>(&mut self, event: &E) -> Result<(), StoreError> {
        let payload = serde_json::to_vec(event).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        let mut frame = Vec::with_capacity(HEADER + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        frame.extend_from_slice(&payload);
        self.file.write_all(&frame)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}
