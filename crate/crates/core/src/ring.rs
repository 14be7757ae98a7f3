//! Consistent-hash placement of inode metadata and chunks.
//!
//! Every node contributes one point on a 64-bit ring. A key is owned by the
//! node with the greatest point that is `<=` the key's hash; keys hashing
//! below the smallest point wrap around to the node with the largest point.
//! Each node therefore owns the half-open arc `[own point, successor point)`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{InodeId, NodeId};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Output of the placement hash (64-bit FNV-1a).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HashPoint(pub u64);

impl fmt::Display for HashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Serialized placement key: `"<inode>"` or `"<inode>/<chunk offset>"`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlacementKey(String);

impl PlacementKey {
    pub fn from_raw(raw: impl Into<String>) -> Self {
        PlacementKey(raw.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PlacementKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RingError {
    #[error("ring has no members")]
    Empty,
    #[error("chunk offset {offset} is not a multiple of chunk size {chunk_size}")]
    Misaligned { offset: u64, chunk_size: u64 },
    #[error("rings differ by {0} members; only single join/leave diffs are supported")]
    UnsupportedDiff(usize),
    #[error("duplicate hash point {0}")]
    DuplicatePoint(HashPoint),
}

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

pub fn hash_key(key: &PlacementKey) -> HashPoint {
    HashPoint(fnv1a64(key.as_bytes()))
}

/// Placement key for an inode (`chunk_offset == None`) or one of its chunks.
///
/// Offset 0 maps to the bare inode key so the first chunk always lives with
/// the inode metadata.
pub fn placement_key(
    inode: InodeId,
    chunk_offset: Option<u64>,
    chunk_size: u64,
) -> Result<PlacementKey, RingError> {
    match chunk_offset {
        None | Some(0) => Ok(PlacementKey(inode.to_string())),
        Some(offset) => {
            if chunk_size == 0 || offset % chunk_size != 0 {
                return Err(RingError::Misaligned { offset, chunk_size });
            }
            Ok(PlacementKey(format!("{inode}/{offset}")))
        }
    }
}

/// Hash point of a cluster member: the placement hash of `node-<id>`,
/// passed through the splitmix64 finalizer. Names differ only in their
/// trailing digits, and plain FNV-1a would leave their points within a
/// narrow band of the ring.
pub fn node_point(node: NodeId) -> HashPoint {
    let mut z = hash_key(&PlacementKey(format!("node-{node}"))).0;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    HashPoint(z ^ (z >> 31))
}

/// Versioned set of `(point, node)` pairs sorted by point.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ring {
    version: u64,
    points: Vec<(HashPoint, NodeId)>,
}

impl Ring {
    pub fn new(
        version: u64,
        members: impl IntoIterator<Item = (NodeId, HashPoint)>,
    ) -> Result<Self, RingError> {
        let mut points: Vec<(HashPoint, NodeId)> =
            members.into_iter().map(|(n, p)| (p, n)).collect();
        points.sort();
        for pair in points.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(RingError::DuplicatePoint(pair[0].0));
            }
        }
        Ok(Ring { version, points })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn points(&self) -> &[(HashPoint, NodeId)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.points.iter().map(|(_, n)| *n)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.points.iter().any(|(_, n)| *n == node)
    }

    pub fn owner_of_hash(&self, hash: HashPoint) -> Result<NodeId, RingError> {
        if self.points.is_empty() {
            return Err(RingError::Empty);
        }
        // Number of points <= hash.
        let idx = self.points.partition_point(|(p, _)| *p <= hash);
        let slot = if idx == 0 { self.points.len() - 1 } else { idx - 1 };
        Ok(self.points[slot].1)
    }

    pub fn owner(&self, key: &PlacementKey) -> Result<NodeId, RingError> {
        self.owner_of_hash(hash_key(key))
    }

    /// Arc `[start, end)` owned by `node`, with `end` being the successor
    /// point (which may be numerically smaller when the arc wraps).
    pub fn arc(&self, node: NodeId) -> Option<(HashPoint, HashPoint)> {
        let idx = self.points.iter().position(|(_, n)| *n == node)?;
        let start = self.points[idx].0;
        let end = self.points[(idx + 1) % self.points.len()].0;
        Some((start, end))
    }
}

/// A key whose owner differs between two rings.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct MovedKey {
    pub key: PlacementKey,
    pub old_owner: NodeId,
    pub new_owner: NodeId,
}

/// Keys whose owner changes between `old` and `new`, which must differ by
/// exactly one joined or departed member.
pub fn diff_owners<'a>(
    old: &Ring,
    new: &Ring,
    keys: impl IntoIterator<Item = &'a PlacementKey>,
) -> Result<Vec<MovedKey>, RingError> {
    let old_set: BTreeSet<NodeId> = old.nodes().collect();
    let new_set: BTreeSet<NodeId> = new.nodes().collect();
    let changed = old_set.symmetric_difference(&new_set).count();
    if changed != 1 || old_set.len().abs_diff(new_set.len()) != 1 {
        return Err(RingError::UnsupportedDiff(changed));
    }
    let mut moved = Vec::new();
    for key in keys {
        let h = hash_key(key);
        // Scaling to or from zero members leaves no owner on one side.
        let (Ok(a), Ok(b)) = (old.owner_of_hash(h), new.owner_of_hash(h)) else {
            continue;
        };
        if a != b {
            moved.push(MovedKey { key: key.clone(), old_owner: a, new_owner: b });
        }
    }
    moved.sort();
    Ok(moved)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(points: &[(u64, NodeId)]) -> Ring {
        Ring::new(1, points.iter().map(|(p, n)| (*n, HashPoint(*p)))).unwrap()
    }

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn golden_placement_hashes() {
        assert_eq!(hash_key(&PlacementKey::from_raw("5")).0, 0xaf63a84c86019430);
        assert_eq!(hash_key(&PlacementKey::from_raw("5/16777216")).0, 0xcbc3cb6f9583abaa);
    }

    #[test]
    fn placement_key_rendering() {
        let cs = 16 << 20;
        assert_eq!(placement_key(5, None, cs).unwrap().as_str(), "5");
        assert_eq!(placement_key(5, Some(0), cs).unwrap().as_str(), "5");
        assert_eq!(placement_key(5, Some(33554432), cs).unwrap().as_str(), "5/33554432");
        assert_eq!(
            placement_key(5, Some(100), cs),
            Err(RingError::Misaligned { offset: 100, chunk_size: cs })
        );
    }

    #[test]
    fn owner_scan_and_wrap() {
        let r = ring(&[(10, 1), (20, 2), (30, 3)]);
        assert_eq!(r.owner_of_hash(HashPoint(25)).unwrap(), 2);
        assert_eq!(r.owner_of_hash(HashPoint(5)).unwrap(), 3);
        assert_eq!(r.owner_of_hash(HashPoint(20)).unwrap(), 2);
        assert_eq!(r.owner_of_hash(HashPoint(u64::MAX)).unwrap(), 3);
        assert_eq!(Ring::default().owner_of_hash(HashPoint(1)), Err(RingError::Empty));
    }

    #[test]
    fn node_points_match_independent_vectors() {
        // From tests/fixtures/gen.py.
        assert_eq!(node_point(1), HashPoint(0x1395_0d4e_f307_e655));
        assert_eq!(node_point(2), HashPoint(0xc8c9_d86c_1e83_187b));
        assert_eq!(node_point(8), HashPoint(0xe6c2_8b5d_ba1c_a3d3));
    }

    #[test]
    fn three_members_each_own_inodes() {
        let r = Ring::new(1, (1..=3).map(|n| (n, node_point(n)))).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for c in 1..=1000 {
            let id = crate::store::pack_inode_id(1, c);
            *counts.entry(r.owner(&placement_key(id, None, 64).unwrap()).unwrap()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn single_member_owns_everything() {
        let r = Ring::new(1, [(7, node_point(7))]).unwrap();
        for i in 0..100u64 {
            assert_eq!(r.owner(&placement_key(i, None, 64).unwrap()).unwrap(), 7);
        }
    }

    #[test]
    fn duplicate_points_rejected() {
        let err = Ring::new(1, [(1, HashPoint(3)), (2, HashPoint(3))]).unwrap_err();
        assert_eq!(err, RingError::DuplicatePoint(HashPoint(3)));
    }

    #[test]
    fn diff_rejects_multi_member_changes() {
        let a = ring(&[(10, 1)]);
        let b = ring(&[(10, 1), (20, 2), (30, 3)]);
        let keys = [PlacementKey::from_raw("1")];
        assert_eq!(diff_owners(&a, &b, keys.iter()), Err(RingError::UnsupportedDiff(2)));
        let c = ring(&[(10, 4)]);
        assert!(diff_owners(&a, &c, keys.iter()).is_err());
    }

    #[test]
    fn join_moves_only_the_joiner_arc() {
        // N1 < N2 < N4 < N3: the joiner takes [H(N4), H(N3)) from N2.
        let old = ring(&[(100, 1), (200, 2), (400, 3)]);
        let new = ring(&[(100, 1), (200, 2), (300, 4), (400, 3)]);
        for h in [50u64, 150, 250, 299, 300, 350, 399, 400, 500] {
            let a = old.owner_of_hash(HashPoint(h)).unwrap();
            let b = new.owner_of_hash(HashPoint(h)).unwrap();
            let in_arc = (300..400).contains(&h);
            assert_eq!(a != b, in_arc, "hash {h}");
            if in_arc {
                assert_eq!((a, b), (2, 4));
            }
        }
    }
}
