//! Persistent authenticated dictionary: typed leaves in an append-only file,
//! with the node cache rebuilt in memory on open.
//!
//! File layout: a 16-byte header (`RGPADLOG`, format version and hash
//! algorithm id as big-endian u32) followed by records, each a little-endian
//! u32 length and the canonical leaf encoding `kind || index (u64 BE) ||
//! payload`.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{hash_leaf, ConsistencyProof, InclusionProof, MerkleTree, PadRoot};
use crate::codec::DecodeError;
use crate::digest::{Digest, HASH_ALGORITHM_ID};
use crate::error::{Error, Result};

pub const PAD_MAGIC: &[u8; 8] = b"RGPADLOG";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;
const LEAF_PREFIX: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum LeafKind {
    VersionEntry = 1,
    HeadPointer = 2,
    Tombstone = 3,
    SnapshotEntry = 4,
    IntentRecord = 5,
    CompletionRecord = 6,
}

impl LeafKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::VersionEntry,
            2 => Self::HeadPointer,
            3 => Self::Tombstone,
            4 => Self::SnapshotEntry,
            5 => Self::IntentRecord,
            6 => Self::CompletionRecord,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadLeaf {
    pub kind: LeafKind,
    pub index: u64,
    pub payload: Vec<u8>,
}

impl PadLeaf {
    pub fn new(kind: LeafKind, index: u64, payload: Vec<u8>) -> Self {
        Self { kind, index, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LEAF_PREFIX + self.payload.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < LEAF_PREFIX {
            return Err(DecodeError::Truncated(bytes.len()));
        }
        let kind = LeafKind::from_u8(bytes[0]).ok_or(DecodeError::InvalidTag {
            what: "leaf kind",
            tag: bytes[0],
        })?;
        let index = u64::from_be_bytes(bytes[1..9].try_into().unwrap());
        Ok(Self {
            kind,
            index,
            payload: bytes[LEAF_PREFIX..].to_vec(),
        })
    }

    pub fn leaf_hash(&self) -> Digest {
        hash_leaf(&self.encode())
    }
}

/// What followed the last well-formed record when the file was opened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PadTail {
    Clean,
    /// A partially written record (crash mid-append).
    Torn { offset: u64 },
    /// A complete record that does not decode or carries the wrong index.
    Invalid { index: u64, offset: u64, reason: String },
}

#[derive(Debug)]
pub struct Pad {
    path: Option<PathBuf>,
    file: Option<File>,
    leaves: Vec<PadLeaf>,
    offsets: Vec<u64>,
    end: u64,
    tree: MerkleTree,
    tail: PadTail,
}

fn header() -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..8].copy_from_slice(PAD_MAGIC);
    h[8..12].copy_from_slice(&FORMAT_VERSION.to_be_bytes());
    h[12..16].copy_from_slice(&HASH_ALGORITHM_ID.to_be_bytes());
    h
}

fn bad_file(detail: impl Into<String>) -> Error {
    Error::TamperDetected {
        pad: None,
        index: None,
        detail: detail.into(),
    }
}

impl Pad {
    /// A pad without file backing, for tests and oracles.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            leaves: Vec::new(),
            offsets: Vec::new(),
            end: HEADER_LEN,
            tree: MerkleTree::new(),
            tail: PadTail::Clean,
        }
    }

    /// Opens (or creates) the leaf file and replays every well-formed record.
    /// Anything after the first malformed record is reported through
    /// [`Pad::tail`] and ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_owned();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(Error::io(&path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(Error::io(&path))?;
        if bytes.is_empty() {
            file.write_all(&header()).map_err(Error::io(&path))?;
            file.sync_all().map_err(Error::io(&path))?;
            bytes = header().to_vec();
        }
        if bytes.len() < HEADER_LEN as usize || bytes[..HEADER_LEN as usize] != header() {
            return Err(bad_file(format!("{}: bad pad header", path.display())));
        }
        let mut pad = Self {
            path: Some(path),
            file: Some(file),
            ..Self::in_memory()
        };
        pad.replay(&bytes);
        Ok(pad)
    }

    fn replay(&mut self, bytes: &[u8]) {
        let mut pos = HEADER_LEN as usize;
        while pos < bytes.len() {
            let offset = pos as u64;
            if bytes.len() - pos < 4 {
                self.tail = PadTail::Torn { offset };
                return;
            }
            let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            if bytes.len() - pos - 4 < len {
                self.tail = PadTail::Torn { offset };
                return;
            }
            let record = &bytes[pos + 4..pos + 4 + len];
            let expected = self.leaves.len() as u64;
            match PadLeaf::decode(record) {
                Ok(leaf) if leaf.index == expected => {
                    self.push_parsed(leaf, offset);
                    pos += 4 + len;
                    self.end = pos as u64;
                }
                Ok(leaf) => {
                    self.tail = PadTail::Invalid {
                        index: expected,
                        offset,
                        reason: format!("record carries index {}", leaf.index),
                    };
                    return;
                }
                Err(e) => {
                    self.tail = PadTail::Invalid {
                        index: expected,
                        offset,
                        reason: e.to_string(),
                    };
                    return;
                }
            }
        }
    }

    fn push_parsed(&mut self, leaf: PadLeaf, offset: u64) {
        self.tree.push(leaf.leaf_hash());
        self.offsets.push(offset);
        self.leaves.push(leaf);
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn size(&self) -> u64 {
        self.leaves.len() as u64
    }

    pub fn tail(&self) -> &PadTail {
        &self.tail
    }

    /// Bytes of well-formed content in the backing file, header included.
    pub fn byte_len(&self) -> u64 {
        self.end
    }

    /// Appends `leaf`, whose index must equal the current size. The write is
    /// not synced; call [`Pad::sync`] at the durability point.
    pub fn append(&mut self, leaf: PadLeaf) -> Result<PadRoot> {
        if leaf.index != self.size() {
            return Err(Error::IndexMismatch {
                expected: self.size(),
                got: leaf.index,
            });
        }
        let encoded = leaf.encode();
        let offset = self.end;
        if let (Some(file), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            if self.tail != PadTail::Clean {
                file.set_len(offset).map_err(Error::io(path))?;
                self.tail = PadTail::Clean;
            }
            let len = u32::try_from(encoded.len()).expect("leaf larger than 4 GiB");
            let mut record = Vec::with_capacity(4 + encoded.len());
            record.extend_from_slice(&len.to_le_bytes());
            record.extend_from_slice(&encoded);
            file.seek(SeekFrom::Start(offset)).map_err(Error::io(path))?;
            file.write_all(&record).map_err(Error::io(path))?;
        }
        self.end = offset + 4 + encoded.len() as u64;
        self.push_parsed(leaf, offset);
        Ok(self.tree.root())
    }

    /// Convenience wrapper assigning the next index.
    pub fn append_payload(&mut self, kind: LeafKind, payload: Vec<u8>) -> Result<u64> {
        let index = self.size();
        self.append(PadLeaf::new(kind, index, payload))?;
        Ok(index)
    }

    pub fn sync(&mut self) -> Result<()> {
        if let (Some(file), Some(path)) = (self.file.as_ref(), self.path.as_ref()) {
            file.sync_data().map_err(Error::io(path))?;
        }
        Ok(())
    }

    /// Drops every leaf at or beyond `size`, along with any malformed tail.
    pub fn truncate(&mut self, size: u64) -> Result<()> {
        if size > self.size() {
            return Err(Error::OutOfRange {
                start: 0,
                end: size,
                size: self.size(),
            });
        }
        let end = self.offsets.get(size as usize).copied().unwrap_or(self.end);
        if let (Some(file), Some(path)) = (self.file.as_ref(), self.path.as_ref()) {
            file.set_len(end).map_err(Error::io(path))?;
            file.sync_all().map_err(Error::io(path))?;
        }
        self.leaves.truncate(size as usize);
        self.offsets.truncate(size as usize);
        self.tree.truncate(size);
        self.end = end;
        self.tail = PadTail::Clean;
        Ok(())
    }

    pub fn root(&self) -> PadRoot {
        self.tree.root()
    }

    pub fn root_at(&self, size: u64) -> Result<PadRoot> {
        self.tree.root_at(size)
    }

    pub fn leaf(&self, index: u64) -> Option<&PadLeaf> {
        self.leaves.get(index as usize)
    }

    pub fn prove_inclusion(&self, index: u64, at_size: u64) -> Result<InclusionProof> {
        self.tree.prove_inclusion(index, at_size)
    }

    pub fn prove_consistency(&self, old_size: u64, new_size: u64) -> Result<ConsistencyProof> {
        self.tree.prove_consistency(old_size, new_size)
    }

    /// Leaves in `[start, end)` in index order; each leaf's index is the
    /// handle for its inclusion proof.
    pub fn scan(&self, range: Range<u64>) -> Result<&[PadLeaf]> {
        if range.start > range.end || range.end > self.size() {
            return Err(Error::OutOfRange {
                start: range.start,
                end: range.end,
                size: self.size(),
            });
        }
        Ok(&self.leaves[range.start as usize..range.end as usize])
    }
}
