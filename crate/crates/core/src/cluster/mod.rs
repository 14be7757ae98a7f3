//! Membership: the versioned node list, version checks on requests and the
//! migration plan a node computes when the ring changes.
//!
//! The list changes only through a membership transaction coordinated by
//! the owner of [`MEMBERSHIP_KEY`] under the current ring. On a join every
//! node pushes the entities it loses to the joiner, limited to dirty
//! metadata, dirty chunks and all directories; clean data is refetched from
//! the object store on demand. A leaving node first persists its dirty data
//! and then hands only its directories to their new owner.

use serde::{Deserialize, Serialize};

use crate::ring::{node_point, placement_key, HashPoint, PlacementKey, Ring};
use crate::store::{Chunk, ChunkKey, DirTable, InodeMeta, InodeStore};
use crate::{InodeId, NodeId};

/// Reserved placement key whose owner coordinates membership changes.
pub const MEMBERSHIP_KEY: &str = "__membership__";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub id: NodeId,
    pub addr: String,
    pub point: HashPoint,
}

impl Member {
    pub fn new(id: NodeId) -> Self {
        Member { id, addr: format!("sim://node-{id}"), point: node_point(id) }
    }
}

/// Versioned membership; mirrors the placement [`Ring`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeList {
    pub version: u64,
    /// Sorted by node id.
    pub members: Vec<Member>,
}

impl NodeList {
    pub fn bootstrap(node: NodeId) -> Self {
        NodeList { version: 1, members: vec![Member::new(node)] }
    }

    pub fn ring(&self) -> Ring {
        Ring::new(self.version, self.members.iter().map(|m| (m.id, m.point)))
            .expect("member points are distinct")
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.iter().any(|m| m.id == node)
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.members.iter().map(|m| m.id).collect()
    }

    pub fn with_member(&self, node: NodeId) -> NodeList {
        let mut members = self.members.clone();
        members.push(Member::new(node));
        members.sort_by_key(|m| m.id);
        NodeList { version: self.version + 1, members }
    }

    pub fn without_member(&self, node: NodeId) -> NodeList {
        let members = self.members.iter().filter(|m| m.id != node).cloned().collect();
        NodeList { version: self.version + 1, members }
    }
}

/// Accepts a request only when it was built against the local version.
pub fn validate_version(request: u64, local: &NodeList) -> Result<(), NodeList> {
    if request == local.version {
        Ok(())
    } else {
        Err(local.clone())
    }
}

pub fn meta_owner(ring: &Ring, inode: InodeId, chunk_size: u64) -> Option<NodeId> {
    ring.owner(&placement_key(inode, None, chunk_size).ok()?).ok()
}

pub fn chunk_owner(ring: &Ring, key: ChunkKey, chunk_size: u64) -> Option<NodeId> {
    ring.owner(&placement_key(key.inode, Some(key.offset), chunk_size).ok()?).ok()
}

pub fn membership_owner(ring: &Ring) -> Option<NodeId> {
    ring.owner(&PlacementKey::from_raw(MEMBERSHIP_KEY)).ok()
}

/// Entities a node hands to new owners after a ring change.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MigrationPlan {
    pub dirty_metas: Vec<(NodeId, InodeMeta)>,
    pub dirty_chunks: Vec<(NodeId, ChunkKey)>,
    pub directories: Vec<(NodeId, InodeMeta, DirTable)>,
}

impl MigrationPlan {
    pub fn is_empty(&self) -> bool {
        self.dirty_metas.is_empty() && self.dirty_chunks.is_empty() && self.directories.is_empty()
    }

    pub fn targets(&self) -> Vec<NodeId> {
        let mut t: Vec<NodeId> = self
            .dirty_metas
            .iter()
            .map(|(n, _)| *n)
            .chain(self.dirty_chunks.iter().map(|(n, _)| *n))
            .chain(self.directories.iter().map(|(n, _, _)| *n))
            .collect();
        t.sort();
        t.dedup();
        t
    }
}

/// Everything `node` holds whose owner changes from `node` under `old` to
/// another node under `new`, restricted to dirty entities and directories.
pub fn compute_migration_plan(store: &InodeStore, node: NodeId, old: &Ring, new: &Ring, chunk_size: u64) -> MigrationPlan {
    let mut plan = MigrationPlan::default();
    if new.is_empty() {
        return plan;
    }
    let moves = |owner_old: Option<NodeId>, owner_new: Option<NodeId>| match (owner_old, owner_new) {
        (Some(a), Some(b)) if a == node && b != node => Some(b),
        _ => None,
    };
    for (id, meta) in &store.metas {
        let Some(to) = moves(meta_owner(old, *id, chunk_size), meta_owner(new, *id, chunk_size)) else {
            continue;
        };
        if meta.is_dir() {
            let table = store.dirs.get(id).cloned().unwrap_or_default();
            plan.directories.push((to, meta.clone(), table));
        } else if meta.dirty {
            plan.dirty_metas.push((to, meta.clone()));
        }
    }
    for (key, chunk) in &store.chunks {
        if !chunk.dirty {
            continue;
        }
        if let Some(to) = moves(chunk_owner(old, *key, chunk_size), chunk_owner(new, *key, chunk_size)) {
            plan.dirty_chunks.push((to, *key));
        }
    }
    plan
}

/// Payload of a `MigrationReceive` log entry. Chunk pieces refer to the
/// receiver's own second-level log.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationReceive {
    pub from: NodeId,
    pub list_version: u64,
    pub metas: Vec<InodeMeta>,
    pub dirs: Vec<(InodeMeta, DirTable)>,
    pub chunks: Vec<Chunk>,
}

impl MigrationReceive {
    /// Chunk bytes carried by this batch.
    pub fn payload_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.length).sum()
    }

    pub fn entity_count(&self) -> usize {
        self.metas.len() + self.dirs.len() + self.chunks.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raftlog::{Command, SecondLevelRef};
    use crate::store::{FoldStaged, InodeKind, Piece, WriteSource};

    const CS: u64 = 64 << 10;

    #[test]
    fn version_check() {
        let l = NodeList::bootstrap(1).with_member(2);
        assert_eq!(validate_version(2, &l), Ok(()));
        assert_eq!(validate_version(1, &l), Err(l.clone()));
        assert_eq!(validate_version(3, &l), Err(l.clone()));
    }

    #[test]
    fn list_edits_bump_version() {
        let l = NodeList::bootstrap(3).with_member(1);
        assert_eq!(l.version, 2);
        assert_eq!(l.ids(), vec![1, 3]);
        let l = l.without_member(3);
        assert_eq!((l.version, l.ids()), (3, vec![1]));
    }

    fn store_with(node: NodeId, n: u64) -> InodeStore {
        let mut s = InodeStore::new(node);
        for i in 0..n {
            let id = 1000 + i;
            let mut m = InodeMeta::new(id, if i % 5 == 0 { InodeKind::Directory } else { InodeKind::File }, None, 0);
            if i % 2 == 0 {
                m.touch_dirty(1);
            }
            s.apply(&Command::UpdateMeta(m));
            let key = ChunkKey { inode: id, offset: CS };
            s.apply(&Command::FoldStaged(FoldStaged { chunk: key, stages: vec![], base: None }));
            if i % 3 == 0 {
                s.chunks.get_mut(&key).unwrap().dirty = false;
            }
            s.chunks.get_mut(&key).unwrap().pieces.push(Piece {
                at: 0,
                len: 1,
                source: WriteSource::SecondLevel(SecondLevelRef { file_id: 0, offset: 0, length: 1 }),
            });
        }
        s
    }

    #[test]
    fn plan_matches_brute_force() {
        let old = NodeList::bootstrap(1);
        let new = old.with_member(2);
        let (ro, rn) = (old.ring(), new.ring());
        let s = store_with(1, 200);
        let plan = compute_migration_plan(&s, 1, &ro, &rn, CS);
        for (id, m) in &s.metas {
            let moved = meta_owner(&rn, *id, CS) == Some(2);
            let in_plan = plan.dirty_metas.iter().any(|(_, x)| x.id == *id)
                || plan.directories.iter().any(|(_, x, _)| x.id == *id);
            assert_eq!(in_plan, moved && (m.dirty || m.is_dir()), "inode {id}");
        }
        for (k, c) in &s.chunks {
            let moved = chunk_owner(&rn, *k, CS) == Some(2);
            assert_eq!(plan.dirty_chunks.iter().any(|(_, x)| x == k), moved && c.dirty);
        }
        assert!(plan.targets().iter().all(|t| *t == 2));
    }

    #[test]
    fn unchanged_ring_gives_empty_plan() {
        let l = NodeList::bootstrap(1);
        let s = store_with(1, 20);
        assert!(compute_migration_plan(&s, 1, &l.ring(), &l.ring(), CS).is_empty());
    }
}
