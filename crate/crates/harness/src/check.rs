//! Oracle checks that produce human-readable findings. An empty finding
//! list means the check passed.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use cachefs::extstore::ObjectStore;
use cachefs::fsops::Client;
use cachefs::raftlog::{Command, LogStore, MemStore, RaftLog, SecondLevelRef, DEFAULT_ROLLOVER};
use cachefs::server::{MigrationRecord, SimCluster};
use cachefs::store::{ChunkKey, EntryKind, Piece, WriteSource};
use cachefs::txn::{OutcomeMark, TxId};
use cachefs::{InodeId, NodeId};

use crate::exec::error_name;
use crate::model::RefFs;

/// Listings and contents seen through `client` against the model tree.
pub async fn compare_tree(client: &Client, model: &RefFs) -> Vec<String> {
    let mut out = Vec::new();
    for (dir, want) in model.dirs() {
        match client.readdir(&dir).await {
            Ok(got) => {
                let got: Vec<(String, bool)> = got.into_iter().map(|(n, k)| (n, k == EntryKind::Directory)).collect();
                if got != want {
                    out.push(format!("listing {dir}: got {got:?}, want {want:?}"));
                }
            }
            Err(e) => out.push(format!("listing {dir}: {}", error_name(&e))),
        }
    }
    for (path, want) in model.files() {
        match client.read_file(&path).await {
            Ok(got) if got == want => {}
            Ok(got) => out.push(format!("content {path}: got {} bytes, want {}", got.len(), want.len())),
            Err(e) => out.push(format!("content {path}: {}", error_name(&e))),
        }
    }
    out
}

/// Splits `/bucket/key` into its object address.
pub fn object_address(path: &str) -> (&str, &str) {
    let rest = path.trim_start_matches('/');
    rest.split_once('/').unwrap_or((rest, ""))
}

/// Every file in `files` is present in the store with the same bytes.
pub fn store_holds(ext: &ObjectStore, files: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut out = Vec::new();
    for (path, want) in files {
        let (b, k) = object_address(path);
        match ext.object(b, k) {
            Some(got) if got == &want[..] => {}
            Some(got) => out.push(format!("store {path}: {} bytes, want {}", got.len(), want.len())),
            None => out.push(format!("store {path}: missing")),
        }
    }
    out
}

/// FNV-1a 64, written out here so the ring oracle shares no code with the
/// placement it checks.
fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Owner of a placement string by exhaustive scan over the members.
pub fn brute_owner(members: &[NodeId], key: &str) -> Option<NodeId> {
    let h = fnv(key.as_bytes());
    let points: Vec<(u64, NodeId)> = members.iter().map(|m| (mix(fnv(format!("node-{m}").as_bytes())), *m)).collect();
    points.iter().filter(|(p, _)| *p <= h).max().or_else(|| points.iter().max()).map(|(_, n)| *n)
}

pub fn meta_key(inode: InodeId) -> String {
    inode.to_string()
}

pub fn chunk_key(k: ChunkKey) -> String {
    if k.offset == 0 {
        k.inode.to_string()
    } else {
        format!("{}/{}", k.inode, k.offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Entity {
    Meta(InodeId),
    Dir(InodeId),
    Chunk(ChunkKey),
}

/// One entity moving from one node to another.
pub type Move = (NodeId, NodeId, Entity);

/// What each node held before a ring change, with dirtiness.
#[derive(Clone, Debug, Default)]
pub struct Holdings {
    pub entities: Vec<(NodeId, Entity, bool)>,
}

impl Holdings {
    pub fn capture(c: &SimCluster) -> Holdings {
        let mut entities = Vec::new();
        for n in c.members() {
            c.with_node(n, |node| {
                for (id, m) in &node.store.metas {
                    let e = if m.is_dir() { Entity::Dir(*id) } else { Entity::Meta(*id) };
                    entities.push((n, e, m.dirty));
                }
                for (k, ch) in &node.store.chunks {
                    entities.push((n, Entity::Chunk(*k), ch.dirty));
                }
            });
        }
        Holdings { entities }
    }

    /// Moves a ring change from `old` to `new` members must make: every
    /// directory and every dirty entity whose owner changes away from the
    /// node holding it.
    pub fn expected_moves(&self, old: &[NodeId], new: &[NodeId]) -> BTreeSet<Move> {
        self.moving(old, new).filter(|(_, dirty)| *dirty).map(|(m, _)| m).collect()
    }

    /// Clean non-directory entities whose owner changes.
    pub fn clean_moving(&self, old: &[NodeId], new: &[NodeId]) -> usize {
        self.moving(old, new).filter(|((_, _, e), dirty)| !dirty && !matches!(e, Entity::Dir(_))).count()
    }

    fn moving<'a>(&'a self, old: &'a [NodeId], new: &'a [NodeId]) -> impl Iterator<Item = (Move, bool)> + 'a {
        self.entities.iter().filter_map(move |(n, e, dirty)| {
            let key = match e {
                Entity::Meta(id) | Entity::Dir(id) => meta_key(*id),
                Entity::Chunk(k) => chunk_key(*k),
            };
            let (from, to) = (brute_owner(old, &key)?, brute_owner(new, &key)?);
            (from == *n && to != *n).then_some(((from, to, *e), *dirty || matches!(e, Entity::Dir(_))))
        })
    }

    pub fn dirty_inodes_on(&self, node: NodeId) -> BTreeSet<InodeId> {
        self.entities
            .iter()
            .filter(|(n, e, d)| *n == node && *d && !matches!(e, Entity::Dir(_)))
            .map(|(_, e, _)| match e {
                Entity::Meta(id) | Entity::Dir(id) => *id,
                Entity::Chunk(k) => k.inode,
            })
            .collect()
    }
}

/// Moves the cluster recorded for list `version`.
pub fn recorded_moves(records: &[MigrationRecord], version: u64) -> BTreeSet<Move> {
    let mut out = BTreeSet::new();
    for r in records.iter().filter(|r| r.list_version == version) {
        out.extend(r.metas.iter().map(|id| (r.from, r.to, Entity::Meta(*id))));
        out.extend(r.dirs.iter().map(|id| (r.from, r.to, Entity::Dir(*id))));
        out.extend(r.chunks.iter().map(|k| (r.from, r.to, Entity::Chunk(*k))));
    }
    out
}

pub fn compare_moves(want: &BTreeSet<Move>, got: &BTreeSet<Move>) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(m) = want.difference(got).next() {
        out.push(format!("{} expected moves missing, first {m:?}", want.difference(got).count()));
    }
    if let Some(m) = got.difference(want).next() {
        out.push(format!("{} unexpected moves, first {m:?}", got.difference(want).count()));
    }
    out
}

/// Chunk bytes carried by migration entries that took effect, summed over
/// the given node logs. A batch counts when the node list it was sent for
/// is adopted, either directly or through a committed transaction.
pub fn migrated_bytes_in_logs(disks: &[Rc<RefCell<MemStore>>]) -> Result<u64, String> {
    let mut total = 0;
    for d in disks {
        let log = RaftLog::open(d.borrow().clone(), DEFAULT_ROLLOVER).map_err(|e| e.to_string())?;
        let mut pending: BTreeMap<u64, u64> = BTreeMap::new();
        let mut lists: BTreeMap<TxId, u64> = BTreeMap::new();
        let mut adopt = |v: u64, pending: &mut BTreeMap<u64, u64>| {
            total += pending.remove(&v).unwrap_or(0);
            pending.clear();
        };
        log.replay(|_, cmd| match cmd {
            Command::MigrationReceive(m) => *pending.entry(m.list_version).or_default() += m.payload_bytes(),
            Command::NodeListUpdate(l) => adopt(l.version, &mut pending),
            Command::TxPrepareMeta(r) | Command::TxPrepareChunk(r) => {
                for u in &r.updates {
                    if let Command::NodeListUpdate(l) = u {
                        lists.insert(r.txid, l.version);
                    }
                }
            }
            Command::TxCommit(o) => {
                if let Some(v) = lists.remove(&o.txid) {
                    adopt(v, &mut pending);
                }
            }
            Command::TxAbort(o) => {
                if lists.remove(&o.txid).is_some() {
                    pending.clear();
                }
            }
            _ => {}
        })
        .map_err(|e| e.to_string())?;
    }
    Ok(total)
}

/// Every second-level reference in a node's log points at readable bytes.
pub fn second_level_refs_resolve<S: LogStore>(log: &RaftLog<S>) -> Result<u64, String> {
    let mut refs = Vec::new();
    log.replay(|i, cmd| collect_refs(i, &cmd, &mut refs)).map_err(|e| e.to_string())?;
    for (i, r) in &refs {
        log.read_second_level(r).map_err(|e| format!("entry {i}: {e}"))?;
    }
    Ok(refs.len() as u64)
}

fn collect_refs(i: u64, cmd: &Command, out: &mut Vec<(u64, SecondLevelRef)>) {
    let piece = |p: &Piece, out: &mut Vec<(u64, SecondLevelRef)>| {
        if let WriteSource::SecondLevel(r) = p.source {
            if r.length > 0 {
                out.push((i, r));
            }
        }
    };
    match cmd {
        Command::TxPrepareMeta(r) | Command::TxPrepareChunk(r) => r.updates.iter().for_each(|u| collect_refs(i, u, out)),
        Command::TxCommit(o) | Command::TxAbort(o) => {
            if let OutcomeMark::OnePhase { updates, .. } = &o.mark {
                updates.iter().for_each(|u| collect_refs(i, u, out));
            }
        }
        Command::StageWriteRecord(s) => {
            if let WriteSource::SecondLevel(r) = s.source {
                out.push((i, r));
            }
        }
        Command::ClearDirtyChunk(c) => out.extend(c.compacted.filter(|(r, _)| r.length > 0).map(|(r, _)| (i, r))),
        Command::PinChunk(p) if p.data.length > 0 => out.push((i, p.data)),
        Command::MigrationReceive(m) => m.chunks.iter().flat_map(|c| &c.pieces).for_each(|p| piece(p, out)),
        _ => {}
    }
}

/// One operation in a concurrent history, stamped with a global event
/// counter at invocation and response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub key: String,
    pub invoke: u64,
    pub response: u64,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Wrote a value unique across the history.
    Write(u64),
    /// Read back a value; `None` when the bytes matched no written value.
    Read(Option<u64>),
}

/// Checks that every read returns the initial value or a written one,
/// never a value overwritten before the read began and never one written
/// after it returned.
pub fn check_reads(history: &[Event], initial: u64) -> Vec<String> {
    let mut out = Vec::new();
    let writes: BTreeMap<(&str, u64), &Event> = history
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::Write(v) => Some(((e.key.as_str(), v), e)),
            _ => None,
        })
        .collect();
    let superseded = |w_resp: u64, key: &str, read_invoke: u64| {
        history.iter().any(|w2| {
            w2.key == key && matches!(w2.kind, EventKind::Write(_)) && w2.invoke > w_resp && w2.response < read_invoke
        })
    };
    for r in history {
        let EventKind::Read(v) = r.kind else { continue };
        let Some(v) = v else {
            out.push(format!("read of {} at {} returned bytes no write produced", r.key, r.invoke));
            continue;
        };
        if v == initial {
            if history.iter().any(|w| w.key == r.key && matches!(w.kind, EventKind::Write(_)) && w.response < r.invoke) {
                out.push(format!("read of {} at {} returned the initial value after a write completed", r.key, r.invoke));
            }
            continue;
        }
        match writes.get(&(r.key.as_str(), v)) {
            None => out.push(format!("read of {} at {} returned unknown value {v}", r.key, r.invoke)),
            Some(w) if w.invoke > r.response => out.push(format!("read of {} at {} returned value {v} written later", r.key, r.invoke)),
            Some(w) if superseded(w.response, &r.key, r.invoke) => {
                out.push(format!("read of {} at {} returned stale value {v}", r.key, r.invoke))
            }
            Some(_) => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use cachefs::fsops::Consistency;
    use cachefs::ring::{hash_key, node_point, placement_key, Ring};
    use cachefs::server::ClusterConfig;
    use cachefs::simnet::SimConfig;
    use proptest::prelude::*;

    use super::*;
    use crate::workload::Op;

    fn w(key: &str, invoke: u64, response: u64, v: u64) -> Event {
        Event { key: key.into(), invoke, response, kind: EventKind::Write(v) }
    }

    fn r(key: &str, invoke: u64, response: u64, v: Option<u64>) -> Event {
        Event { key: key.into(), invoke, response, kind: EventKind::Read(v) }
    }

    #[test]
    fn history_accepts_overlapping_reads_of_either_value() {
        let h = vec![w("k", 1, 4, 7), r("k", 2, 3, Some(0)), r("k", 3, 5, Some(7)), r("k", 6, 7, Some(7)), r("j", 6, 7, Some(0))];
        assert!(check_reads(&h, 0).is_empty());
    }

    #[test]
    fn history_flags_stale_future_torn_and_reverted_reads() {
        let stale = vec![w("k", 1, 2, 7), w("k", 3, 4, 8), r("k", 5, 6, Some(7))];
        let future = vec![r("k", 1, 2, Some(7)), w("k", 3, 4, 7)];
        let torn = vec![w("k", 1, 2, 7), r("k", 3, 4, None)];
        let reverted = vec![w("k", 1, 2, 7), r("k", 3, 4, Some(0))];
        let unknown = vec![r("k", 3, 4, Some(9))];
        for h in [stale, future, torn, reverted, unknown] {
            assert_eq!(check_reads(&h, 0).len(), 1, "{h:?}");
        }
    }

    #[test]
    fn store_check_reports_missing_and_corrupt_objects() {
        let mut ext = ObjectStore::new(&["data"]);
        ext.insert_raw("data", "a", b"hello".to_vec());
        ext.insert_raw("data", "b", b"world".to_vec());
        let files: BTreeMap<String, Vec<u8>> =
            [("/data/a", b"hello"), ("/data/b", b"wOrld"), ("/data/c", b"again")].iter().map(|(p, d)| (p.to_string(), d.to_vec())).collect();
        let found = store_holds(&ext, &files);
        assert_eq!(found.len(), 2, "{found:?}");
        assert!(found[0].starts_with("store /data/b"));
        assert!(found[1].ends_with("missing"));
    }

    #[test]
    fn tree_check_reports_a_corrupted_cluster() {
        let ext = Rc::new(RefCell::new(ObjectStore::new(&["data"])));
        let cfg = ClusterConfig { chunk_size: 32, flush_interval: None, ..ClusterConfig::default() };
        let c = SimCluster::with_nodes(cfg, SimConfig::default(), ext, 2).unwrap();
        let mut model = RefFs::new(&["data".to_string()]);
        for op in [Op::Create { path: "/data/f".into() }, Op::Write { path: "/data/f".into(), offset: 0, data: vec![1; 40] }] {
            model.apply(&op);
        }
        let cl = c.client(Consistency::Strict);
        let found = c
            .block_on(async move {
                cl.create("/data/f").await.unwrap();
                cl.write("/data/f", 0, &[1; 40]).await.unwrap();
                let clean = compare_tree(&cl, &model).await;
                cl.write("/data/f", 39, &[2]).await.unwrap();
                cl.create("/data/extra").await.unwrap();
                (clean, compare_tree(&cl, &model).await)
            })
            .unwrap();
        assert!(found.0.is_empty(), "{:?}", found.0);
        assert_eq!(found.1.len(), 2, "{:?}", found.1);
    }

    proptest! {
        #[test]
        fn ring_oracle_agrees_with_the_ring(n in 1u32..12, inodes in proptest::collection::vec((1u64..u64::MAX, 0u64..64), 1..40)) {
            let members: Vec<NodeId> = (1..=n).collect();
            let ring = Ring::new(1, members.iter().map(|m| (*m, node_point(*m)))).unwrap();
            for (inode, chunk) in inodes {
                let offset = chunk * 4096;
                let pk = placement_key(inode, Some(offset), 4096).unwrap();
                let want = ring.owner_of_hash(hash_key(&pk)).unwrap();
                prop_assert_eq!(brute_owner(&members, &chunk_key(ChunkKey { inode, offset })), Some(want));
                let mk = placement_key(inode, None, 4096).unwrap();
                prop_assert_eq!(brute_owner(&members, &meta_key(inode)), Some(ring.owner_of_hash(hash_key(&mk)).unwrap()));
            }
        }
    }
}
