//! Append-only Merkle history tree with inclusion and consistency proofs.
//!
//! Hashing follows RFC 6962: a leaf hashes as `H(0x00 || data)`, an interior
//! node as `H(0x01 || left || right)`, and a tree of `n` leaves splits at the
//! largest power of two strictly below `n`. Verification follows the
//! iterative algorithms of RFC 9162 section 2.1.

mod pad;

pub use pad::{LeafKind, Pad, PadLeaf, PadTail, PAD_MAGIC};

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::{Error, Result};

pub fn hash_leaf(data: &[u8]) -> Digest {
    Digest::of_parts(&[&[0x00], data])
}

pub fn hash_node(left: &Digest, right: &Digest) -> Digest {
    Digest::of_parts(&[&[0x01], left.as_bytes(), right.as_bytes()])
}

pub fn empty_root() -> Digest {
    Digest::of(b"")
}

/// Root of a tree prefix: digest plus leaf count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRoot {
    pub digest: Digest,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    pub path: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyProof {
    pub old_size: u64,
    pub new_size: u64,
    pub path: Vec<Digest>,
}

/// Largest power of two strictly less than `n` (`n >= 2`).
fn split_point(n: u64) -> u64 {
    debug_assert!(n >= 2);
    1 << (63 - (n - 1).leading_zeros())
}

/// `ceil(log2(n))` for `n >= 1`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// In-memory node store. `levels[h][i]` holds the hash of the complete
/// subtree covering leaves `[i * 2^h, (i + 1) * 2^h)`; only complete subtrees
/// are stored, so every append costs amortized O(1) hashes.
#[derive(Debug, Clone, Default)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
    partial: PartialCache,
}

const PARTIAL_CACHE_LIMIT: usize = 1 << 14;

/// Hashes of incomplete subtrees computed for roots and proofs. Each covers
/// a fixed leaf range, so appends never invalidate them; truncation does.
#[derive(Debug, Default)]
struct PartialCache(Mutex<HashMap<(u64, u64), Digest>>);

impl Clone for PartialCache {
    fn clone(&self) -> Self {
        Self(Mutex::new(self.0.lock().unwrap().clone()))
    }
}

impl MerkleTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_leaf_hashes(hashes: impl IntoIterator<Item = Digest>) -> Self {
        let mut t = Self::new();
        for h in hashes {
            t.push(h);
        }
        t
    }

    pub fn len(&self) -> u64 {
        self.levels.first().map_or(0, |l| l.len() as u64)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, leaf_hash: Digest) {
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        self.levels[0].push(leaf_hash);
        let mut h = 0;
        while self.levels[h].len().is_multiple_of(2) {
            let n = self.levels[h].len();
            let parent = hash_node(&self.levels[h][n - 2], &self.levels[h][n - 1]);
            if self.levels.len() == h + 1 {
                self.levels.push(Vec::new());
            }
            self.levels[h + 1].push(parent);
            h += 1;
        }
    }

    pub fn truncate(&mut self, size: u64) {
        if size >= self.len() {
            return;
        }
        for (h, level) in self.levels.iter_mut().enumerate() {
            level.truncate((size >> h) as usize);
        }
        self.partial.0.get_mut().unwrap().retain(|&(_, end), _| end <= size);
        while self.levels.last().is_some_and(Vec::is_empty) && self.levels.len() > 1 {
            self.levels.pop();
        }
    }

    pub fn leaf_hash(&self, index: u64) -> Option<Digest> {
        self.levels.first()?.get(index as usize).copied()
    }

    /// Hash of leaves `[start, end)` as the RFC 6962 recursion defines it.
    fn range_hash(&self, start: u64, end: u64) -> Digest {
        let n = end - start;
        if n == 0 {
            return empty_root();
        }
        if n.is_power_of_two() && start.is_multiple_of(n) {
            let h = n.trailing_zeros() as usize;
            if let Some(d) = self.levels.get(h).and_then(|l| l.get((start >> h) as usize)) {
                return *d;
            }
        }
        if let Some(d) = self.partial.0.lock().unwrap().get(&(start, end)) {
            return *d;
        }
        let k = split_point(n);
        let d = hash_node(&self.range_hash(start, start + k), &self.range_hash(start + k, end));
        let mut cache = self.partial.0.lock().unwrap();
        if cache.len() >= PARTIAL_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert((start, end), d);
        d
    }

    pub fn root(&self) -> PadRoot {
        self.root_at(self.len()).expect("current size is in range")
    }

    pub fn root_at(&self, size: u64) -> Result<PadRoot> {
        if size > self.len() {
            return Err(Error::OutOfRange {
                start: 0,
                end: size,
                size: self.len(),
            });
        }
        Ok(PadRoot {
            digest: self.range_hash(0, size),
            size,
        })
    }

    pub fn prove_inclusion(&self, index: u64, at_size: u64) -> Result<InclusionProof> {
        if index >= at_size || at_size > self.len() {
            return Err(Error::OutOfRange {
                start: index,
                end: at_size,
                size: self.len(),
            });
        }
        let mut path = Vec::with_capacity(ceil_log2(at_size) as usize);
        self.inclusion_path(index, 0, at_size, &mut path);
        Ok(InclusionProof {
            leaf_index: index,
            tree_size: at_size,
            path,
        })
    }

    // PATH(m, D[start:end]), siblings pushed leaf-to-root.
    fn inclusion_path(&self, m: u64, start: u64, end: u64, out: &mut Vec<Digest>) {
        let n = end - start;
        if n <= 1 {
            return;
        }
        let k = split_point(n);
        if m < k {
            self.inclusion_path(m, start, start + k, out);
            out.push(self.range_hash(start + k, end));
        } else {
            self.inclusion_path(m - k, start + k, end, out);
            out.push(self.range_hash(start, start + k));
        }
    }

    pub fn prove_consistency(&self, old_size: u64, new_size: u64) -> Result<ConsistencyProof> {
        if old_size > new_size || new_size > self.len() {
            return Err(Error::OutOfRange {
                start: old_size,
                end: new_size,
                size: self.len(),
            });
        }
        let mut path = Vec::new();
        if old_size > 0 && old_size < new_size {
            self.subproof(old_size, 0, new_size, true, &mut path);
        }
        Ok(ConsistencyProof {
            old_size,
            new_size,
            path,
        })
    }

    // SUBPROOF(m, D[start:end], b)
    fn subproof(&self, m: u64, start: u64, end: u64, complete: bool, out: &mut Vec<Digest>) {
        let n = end - start;
        if m == n {
            if !complete {
                out.push(self.range_hash(start, end));
            }
            return;
        }
        let k = split_point(n);
        if m <= k {
            self.subproof(m, start, start + k, complete, out);
            out.push(self.range_hash(start + k, end));
        } else {
            self.subproof(m - k, start + k, end, false, out);
            out.push(self.range_hash(start, start + k));
        }
    }
}

/// Recomputes the root committed by an inclusion proof for `leaf_hash`.
pub fn root_from_inclusion(proof: &InclusionProof, leaf_hash: Digest) -> Option<Digest> {
    if proof.leaf_index >= proof.tree_size {
        return None;
    }
    let mut fnode = proof.leaf_index;
    let mut snode = proof.tree_size - 1;
    let mut r = leaf_hash;
    for p in &proof.path {
        if snode == 0 {
            return None;
        }
        if fnode & 1 == 1 || fnode == snode {
            r = hash_node(p, &r);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            r = hash_node(&r, p);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    (snode == 0).then_some(r)
}

pub fn verify_inclusion_hash(proof: &InclusionProof, leaf_hash: Digest, root: &PadRoot) -> bool {
    proof.tree_size == root.size && root_from_inclusion(proof, leaf_hash) == Some(root.digest)
}

/// True iff `leaf` sits at `proof.leaf_index` in the tree committed by `root`.
pub fn verify_inclusion(proof: &InclusionProof, leaf: &PadLeaf, root: &PadRoot) -> bool {
    leaf.index == proof.leaf_index && verify_inclusion_hash(proof, leaf.leaf_hash(), root)
}

/// True iff the tree committed by `old` is a prefix of the one committed by `new`.
pub fn verify_consistency(proof: &ConsistencyProof, old: &PadRoot, new: &PadRoot) -> bool {
    if proof.old_size != old.size || proof.new_size != new.size || old.size > new.size {
        return false;
    }
    if old.size == new.size {
        return proof.path.is_empty() && old.digest == new.digest;
    }
    if old.size == 0 {
        return proof.path.is_empty() && old.digest == empty_root();
    }
    let mut path: Vec<Digest> = Vec::with_capacity(proof.path.len() + 1);
    if old.size.is_power_of_two() {
        path.push(old.digest);
    }
    path.extend_from_slice(&proof.path);
    let Some((&first, rest)) = path.split_first() else {
        return false;
    };
    let mut fnode = old.size - 1;
    let mut snode = new.size - 1;
    while fnode & 1 == 1 {
        fnode >>= 1;
        snode >>= 1;
    }
    let mut fr = first;
    let mut sr = first;
    for c in rest {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            fr = hash_node(c, &fr);
            sr = hash_node(c, &sr);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            sr = hash_node(&sr, c);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    fr == old.digest && sr == new.digest && snode == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    // Naive recursive MTH over the full hash list; shares nothing with the
    // level cache.
    fn naive_root(leaves: &[Digest]) -> Digest {
        match leaves.len() {
            0 => empty_root(),
            1 => leaves[0],
            n => {
                let k = split_point(n as u64) as usize;
                hash_node(&naive_root(&leaves[..k]), &naive_root(&leaves[k..]))
            }
        }
    }

    fn hashes(n: usize) -> Vec<Digest> {
        (0..n).map(|i| hash_leaf(format!("leaf-{i}").as_bytes())).collect()
    }

    #[test]
    fn split_and_log() {
        assert_eq!(split_point(2), 1);
        assert_eq!(split_point(5), 4);
        assert_eq!(split_point(8), 4);
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(2700), 12);
        assert_eq!(ceil_log2(4096), 12);
        assert_eq!(ceil_log2(4097), 13);
    }

    #[test]
    fn roots_match_naive_for_every_prefix() {
        let hs = hashes(70);
        let t = MerkleTree::from_leaf_hashes(hs.iter().copied());
        for n in 0..=70 {
            assert_eq!(t.root_at(n as u64).unwrap().digest, naive_root(&hs[..n]), "n={n}");
        }
    }

    #[test]
    fn truncate_restores_prefix_root() {
        let hs = hashes(37);
        let mut t = MerkleTree::from_leaf_hashes(hs.iter().copied());
        t.truncate(21);
        assert_eq!(t.len(), 21);
        assert_eq!(t.root().digest, naive_root(&hs[..21]));
        t.push(hs[21]);
        assert_eq!(t.root().digest, naive_root(&hs[..22]));
    }

    #[test]
    fn truncate_then_diverge_drops_cached_ranges() {
        let old = hashes(45);
        let mut t = MerkleTree::from_leaf_hashes(old.iter().copied());
        // Warm the cache with ranges that straddle the cut.
        for n in 1..=45 {
            t.root_at(n).unwrap();
            t.prove_inclusion(n - 1, n).unwrap();
        }
        t.truncate(19);
        let mut new: Vec<Digest> = old[..19].to_vec();
        for i in 19..45 {
            let h = hash_leaf(format!("other-{i}").as_bytes());
            new.push(h);
            t.push(h);
        }
        let fresh = MerkleTree::from_leaf_hashes(new.iter().copied());
        for n in 1..=45u64 {
            assert_eq!(t.root_at(n).unwrap(), fresh.root_at(n).unwrap(), "n={n}");
            assert_eq!(t.root_at(n).unwrap().digest, naive_root(&new[..n as usize]));
            for i in 0..n {
                assert_eq!(t.prove_inclusion(i, n).unwrap(), fresh.prove_inclusion(i, n).unwrap());
            }
        }
    }

    #[test]
    fn consistency_between_all_small_prefixes() {
        let t = MerkleTree::from_leaf_hashes(hashes(20));
        for new in 0..=20 {
            for old in 0..=new {
                let p = t.prove_consistency(old, new).unwrap();
                assert!(verify_consistency(&p, &t.root_at(old).unwrap(), &t.root_at(new).unwrap()));
            }
        }
    }

    #[test]
    fn out_of_range_requests_fail() {
        let t = MerkleTree::from_leaf_hashes(hashes(4));
        assert!(t.prove_inclusion(4, 4).is_err());
        assert!(t.prove_inclusion(0, 5).is_err());
        assert!(t.prove_consistency(3, 2).is_err());
        assert!(t.root_at(5).is_err());
    }
}
