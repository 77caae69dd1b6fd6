//! Simulated hardware root of trust.
//!
//! Provides the two primitives the rest of the system trusts: a strictly
//! monotonic counter and a sealing key. Both live in a trusted-private
//! directory that the untrusted-storage attacker model never touches. The
//! counter file is authenticated with the sealing key so that a stray rewrite
//! is reported instead of silently rewinding the counter.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::fsutil;

type HmacSha256 = Hmac<Sha256>;

const KEY_FILE: &str = "seal.key";
const COUNTER_FILE: &str = "counter";
const SEAL_DOMAIN: &[u8] = b"SEAL";
const COUNTER_DOMAIN: &[u8] = b"CTR1";
const FLAG_IN_FLIGHT: u8 = 0x01;

/// 256-bit sealing key. Never serialized outside the trusted directory.
struct SealKey([u8; 32]);

impl SealKey {
    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts 32-byte keys")
    }
}

impl fmt::Debug for SealKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SealKey(..)")
    }
}

/// Authenticator binding a root digest to one counter value.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Seal {
    #[serde(with = "hex_tag")]
    pub tag: [u8; 32],
    pub counter: u64,
    pub root: Digest,
}

mod hex_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tag: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(tag))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("seal tag must be 32 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CounterState {
    value: u64,
    in_flight: bool,
}

/// Operation counts, used to check the one-seal-one-increment cost model.
#[derive(Debug, Default)]
pub struct HardwareStats {
    seals: AtomicU64,
    increments: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub seals: u64,
    pub increments: u64,
}

impl std::ops::Sub for StatsSnapshot {
    type Output = StatsSnapshot;
    fn sub(self, rhs: Self) -> Self {
        StatsSnapshot {
            seals: self.seals - rhs.seals,
            increments: self.increments - rhs.increments,
        }
    }
}

#[derive(Debug)]
pub struct HardwareRoot {
    dir: PathBuf,
    key: SealKey,
    counter: Mutex<CounterState>,
    stats: HardwareStats,
}

impl HardwareRoot {
    /// Opens the trusted directory, provisioning a fresh key and a zero
    /// counter on first boot.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_owned();
        fsutil::create_dir(&dir)?;
        let key = load_or_create_key(&dir.join(KEY_FILE))?;
        let mut root = Self {
            dir,
            key,
            counter: Mutex::new(CounterState {
                value: 0,
                in_flight: false,
            }),
            stats: HardwareStats::default(),
        };
        let path = root.counter_path();
        let state = match fsutil::read_optional(&path)? {
            Some(bytes) => root.decode_counter(&bytes)?,
            None => {
                let fresh = CounterState {
                    value: 0,
                    in_flight: false,
                };
                root.persist(fresh)?;
                fresh
            }
        };
        *root.counter.get_mut().unwrap() = state;
        Ok(root)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn counter_path(&self) -> PathBuf {
        self.dir.join(COUNTER_FILE)
    }

    fn counter_tag(&self, value: u64, flags: u8) -> [u8; 32] {
        let mut mac = self.key.mac();
        mac.update(COUNTER_DOMAIN);
        mac.update(&value.to_be_bytes());
        mac.update(&[flags]);
        mac.finalize().into_bytes().into()
    }

    fn encode_counter(&self, s: CounterState) -> Vec<u8> {
        let flags = if s.in_flight { FLAG_IN_FLIGHT } else { 0 };
        let mut out = Vec::with_capacity(41);
        out.extend_from_slice(&s.value.to_be_bytes());
        out.push(flags);
        out.extend_from_slice(&self.counter_tag(s.value, flags));
        out
    }

    fn decode_counter(&self, bytes: &[u8]) -> Result<CounterState> {
        if bytes.len() != 41 {
            return Err(Error::CounterCorrupted(format!("length {}", bytes.len())));
        }
        let value = u64::from_be_bytes(bytes[..8].try_into().unwrap());
        let flags = bytes[8];
        let mut mac = self.key.mac();
        mac.update(COUNTER_DOMAIN);
        mac.update(&value.to_be_bytes());
        mac.update(&[flags]);
        mac.verify_slice(&bytes[9..])
            .map_err(|_| Error::CounterCorrupted("authenticator mismatch".into()))?;
        if flags & !FLAG_IN_FLIGHT != 0 {
            return Err(Error::CounterCorrupted(format!("unknown flags {flags:#x}")));
        }
        Ok(CounterState {
            value,
            in_flight: flags & FLAG_IN_FLIGHT != 0,
        })
    }

    fn persist(&self, s: CounterState) -> Result<()> {
        fsutil::atomic_write(&self.counter_path(), &self.encode_counter(s))
    }

    /// Applies `f` to the counter state, persisting before the new state
    /// becomes visible. On failure the in-memory state is unchanged.
    fn transition(&self, f: impl FnOnce(CounterState) -> CounterState) -> Result<CounterState> {
        let mut guard = self.counter.lock().unwrap();
        let next = f(*guard);
        if next.value < guard.value {
            return Err(Error::CounterCorrupted("attempted decrement".into()));
        }
        self.persist(next)?;
        *guard = next;
        Ok(next)
    }

    pub fn counter_read(&self) -> u64 {
        self.counter.lock().unwrap().value
    }

    /// Advances the counter by one and clears the in-flight flag.
    pub fn counter_increment(&self) -> Result<u64> {
        let s = self.transition(|s| CounterState {
            value: s.value.checked_add(1).expect("counter overflow"),
            in_flight: false,
        })?;
        self.stats.increments.fetch_add(1, Ordering::Relaxed);
        Ok(s.value)
    }

    /// Advances the counter by two in a single durable write, so the skipped
    /// value is never observable as committed.
    pub fn counter_double_increment(&self) -> Result<u64> {
        let s = self.transition(|s| CounterState {
            value: s.value.checked_add(2).expect("counter overflow"),
            in_flight: false,
        })?;
        self.stats.increments.fetch_add(2, Ordering::Relaxed);
        Ok(s.value)
    }

    /// Durably records that a state transition has started. A flag still set
    /// at startup means the previous process died mid-transaction.
    pub fn begin_transaction(&self) -> Result<()> {
        self.transition(|s| CounterState {
            in_flight: true,
            ..s
        })
        .map(drop)
    }

    /// Clears the in-flight flag after an aborted (never sealed) transaction.
    pub fn abort_transaction(&self) -> Result<()> {
        self.transition(|s| CounterState {
            in_flight: false,
            ..s
        })
        .map(drop)
    }

    pub fn transaction_in_flight(&self) -> bool {
        self.counter.lock().unwrap().in_flight
    }

    fn seal_tag(&self, root: &Digest, counter: u64) -> HmacSha256 {
        let mut mac = self.key.mac();
        mac.update(SEAL_DOMAIN);
        mac.update(&counter.to_be_bytes());
        mac.update(root.as_bytes());
        mac
    }

    pub fn seal(&self, root: Digest, counter: u64) -> Seal {
        self.stats.seals.fetch_add(1, Ordering::Relaxed);
        Seal {
            tag: self.seal_tag(&root, counter).finalize().into_bytes().into(),
            counter,
            root,
        }
    }

    /// True iff `seal` was produced by `seal(root, counter)` under this key.
    pub fn verify_seal(&self, seal: &Seal, root: &Digest, counter: u64) -> bool {
        seal.counter == counter
            && seal.root == *root
            && self.seal_tag(root, counter).verify_slice(&seal.tag).is_ok()
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            seals: self.stats.seals.load(Ordering::Relaxed),
            increments: self.stats.increments.load(Ordering::Relaxed),
        }
    }
}

fn load_or_create_key(path: &Path) -> Result<SealKey> {
    if let Some(bytes) = fsutil::read_optional(path)? {
        let key: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::CounterCorrupted("seal key must be 32 bytes".into()))?;
        return Ok(SealKey(key));
    }
    let mut key = [0u8; 32];
    rand::rng().fill_bytes(&mut key);
    fsutil::atomic_write(path, &key)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let _ = std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600));
    }
    Ok(SealKey(key))
}
