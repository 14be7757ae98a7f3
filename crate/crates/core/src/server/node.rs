use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use super::msg::{Blob, MetaHint, Req};
use super::{ClusterConfig, MigrationRecord, SimDisk, Stats};
use crate::cluster::{chunk_owner, compute_migration_plan, meta_owner, MigrationReceive, NodeList};
use crate::error::{Crashed, FsError};
use crate::extstore::{ObjectStore, StoreError};
use crate::raftlog::{is_injected_crash, Command, LogError, RaftLog, SecondLevelRef};
use crate::ring::Ring;
use crate::simnet::{Faults, ReplyToken};
use crate::store::{
    compose_chunk, Chunk, ChunkKey, ClearDirtyChunk, ClearDirtyMeta, CreateInode, DirEntry, DirEntryAdd,
    DirEntryRemove, DirTable, EntryKind, ExtKey, ExternalBase, FoldStaged, InodeKind, InodeMeta, InodeStore, Piece, PinChunk,
    SetDeleted, StageId, StagedWrite, Target, Truncate, WriteSource, ROOT_INODE,
};
use crate::txn::{
    Intent, MpuBegin, OutcomeMark, OutcomeRecord, PartTag, PersistKind, PrepareCheck, PrepareRecord, Refusal,
    ResourceId, TxId, TxReply, TxState, TxTable, Vote, VoteInfo,
};
use crate::{ClientId, InodeId, NodeId, Tick};

/// Failure of a node-local step: either the node died, or the request
/// failed with a filesystem error.
#[derive(Debug)]
pub(crate) enum Fail {
    Crashed,
    Fs(FsError),
}

impl From<Crashed> for Fail {
    fn from(_: Crashed) -> Self {
        Fail::Crashed
    }
}

impl From<FsError> for Fail {
    fn from(e: FsError) -> Self {
        Fail::Fs(e)
    }
}

pub(crate) fn store_err(e: StoreError) -> FsError {
    match e {
        StoreError::NotFound => FsError::NotFound,
        StoreError::Precondition(m) => FsError::Protocol(m),
        StoreError::Transient(op) => FsError::Transient(format!("object store {op} failed")),
    }
}

/// Result of evaluating a participant's intents.
struct Evaluated {
    resources: Vec<ResourceId>,
    updates: Vec<Command>,
    vote: VoteInfo,
}

/// Working view used while evaluating several intents of one transaction,
/// so later intents see the effect of earlier ones.
#[derive(Default)]
struct Scratch {
    metas: BTreeMap<InodeId, InodeMeta>,
    dirs: BTreeMap<InodeId, DirTable>,
}

pub(crate) enum PersistStart {
    Finished(Result<TxReply, Refusal>),
    Multipart { key: ExtKey, upload: u64, old: Option<(ExtKey, u64)>, plan: BTreeMap<NodeId, Vec<Intent>> },
}

/// One cache node. Everything except the fields marked volatile is rebuilt
/// from the log on restart.
pub struct Node {
    pub id: NodeId,
    cfg: Rc<ClusterConfig>,
    ext: Rc<RefCell<ObjectStore>>,
    stats: Rc<RefCell<Stats>>,
    faults: Faults,
    log: RaftLog<SimDisk>,
    pub store: InodeStore,
    pub txns: TxTable,
    pub list: NodeList,
    ring: Ring,
    pending_migrations: BTreeMap<u64, Vec<MigrationReceive>>,
    replaying: bool,
    pub(crate) now: Tick,
    // Volatile.
    pub(crate) inflight: BTreeMap<(ClientId, u64), Vec<ReplyToken>>,
    /// Recent outcomes per client, so a duplicate of a request refused
    /// before anything was logged is answered instead of re-run.
    pub(crate) replies: BTreeMap<ClientId, VecDeque<(u64, crate::txn::CommitOutcome)>>,
    pub(crate) preparing: BTreeMap<(TxId, u32), Vec<ReplyToken>>,
    pub(crate) pushed: BTreeSet<(TxId, u32)>,
    pub(crate) persisting: BTreeSet<InodeId>,
    pub(crate) leaving: bool,
    pub(crate) leave_waiters: Vec<ReplyToken>,
}

fn is_persist_intent(i: &Intent) -> bool {
    matches!(i, Intent::PersistMeta { .. } | Intent::PersistChunk { .. } | Intent::ClearChunk { .. } | Intent::NodeList { .. })
}

fn resource_of(i: &Intent) -> ResourceId {
    match i {
        Intent::Create { meta } => ResourceId::Meta(meta.id),
        Intent::ExtendSize { inode, .. }
        | Intent::SetSize { inode, .. }
        | Intent::MarkDeleted { inode, .. }
        | Intent::Rebind { inode, .. }
        | Intent::PersistMeta { inode, .. } => ResourceId::Meta(*inode),
        Intent::RequireEmpty { dir } | Intent::DirAdd { dir, .. } | Intent::DirRemove { dir, .. } => ResourceId::Meta(*dir),
        Intent::Fold { chunk, .. }
        | Intent::TruncateChunk { chunk, .. }
        | Intent::DeleteChunk { chunk, .. }
        | Intent::PinChunk { chunk, .. }
        | Intent::PersistChunk { chunk, .. }
        | Intent::ClearChunk { chunk, .. } => ResourceId::Chunk(chunk.inode, chunk.offset),
        Intent::NodeList { .. } => ResourceId::Membership,
    }
}

fn refuse(e: FsError) -> Refusal {
    Refusal::Error(e)
}

impl Node {
    pub(crate) fn open(
        id: NodeId,
        disk: SimDisk,
        cfg: Rc<ClusterConfig>,
        ext: Rc<RefCell<ObjectStore>>,
        stats: Rc<RefCell<Stats>>,
        faults: Faults,
        now: Tick,
    ) -> Result<Node, LogError> {
        let log = RaftLog::open(disk, cfg.rollover)?;
        let mut cmds = Vec::new();
        log.replay(|_, c| cmds.push(c))?;
        let mut node = Node {
            id,
            cfg,
            ext,
            stats,
            faults,
            log,
            store: InodeStore::new(id),
            txns: TxTable::new(id),
            list: NodeList::default(),
            ring: NodeList::default().ring(),
            pending_migrations: BTreeMap::new(),
            replaying: true,
            now,
            inflight: BTreeMap::new(),
            replies: BTreeMap::new(),
            preparing: BTreeMap::new(),
            pushed: BTreeSet::new(),
            persisting: BTreeSet::new(),
            leaving: false,
            leave_waiters: Vec::new(),
        };
        for c in &cmds {
            node.apply(c);
        }
        node.replaying = false;
        Ok(node)
    }

    pub fn chunk_size(&self) -> u64 {
        self.cfg.chunk_size
    }

    pub fn ring(&self) -> &Ring {
        &self.ring
    }

    pub fn log(&self) -> &RaftLog<SimDisk> {
        &self.log
    }

    pub fn owns_meta(&self, id: InodeId) -> bool {
        meta_owner(&self.ring, id, self.cfg.chunk_size) == Some(self.id)
    }

    pub fn owns_chunk(&self, key: ChunkKey) -> bool {
        chunk_owner(&self.ring, key, self.cfg.chunk_size) == Some(self.id)
    }

    fn owns(&self, r: &ResourceId) -> bool {
        match r {
            ResourceId::Meta(id) => self.owns_meta(*id),
            ResourceId::Chunk(inode, offset) => self.owns_chunk(ChunkKey { inode: *inode, offset: *offset }),
            ResourceId::Membership => true,
        }
    }

    /// The list being installed by a prepared membership transaction.
    pub(crate) fn pending_list(&self) -> Option<(TxId, NodeList)> {
        self.txns.prepared().find_map(|rec| {
            rec.updates.iter().find_map(|u| match u {
                Command::NodeListUpdate(l) => Some((rec.txid, l.clone())),
                _ => None,
            })
        })
    }

    fn moves_under(&self, r: &ResourceId, ring: &Ring) -> bool {
        let cs = self.cfg.chunk_size;
        match r {
            ResourceId::Meta(id) => meta_owner(ring, *id, cs) != Some(self.id),
            ResourceId::Chunk(inode, offset) => chunk_owner(ring, ChunkKey { inode: *inode, offset: *offset }, cs) != Some(self.id),
            ResourceId::Membership => false,
        }
    }

    /// True while a membership change is prepared that moves `r` away.
    pub(crate) fn read_only(&self, r: &ResourceId) -> bool {
        match self.pending_list() {
            Some((_, l)) => self.moves_under(r, &l.ring()),
            None => false,
        }
    }

    pub(crate) fn append(&mut self, cmd: Command) -> Result<(), Crashed> {
        match self.log.append(&cmd) {
            Ok(_) => {
                self.apply(&cmd);
                Ok(())
            }
            Err(e) => {
                if !is_injected_crash(&e) {
                    self.faults.borrow_mut().request_crash(self.id);
                }
                Err(Crashed)
            }
        }
    }

    pub(crate) fn sl_append(&mut self, data: &[u8]) -> Result<SecondLevelRef, Crashed> {
        self.log.append_second_level(data).map_err(|e| {
            if !is_injected_crash(&e) {
                self.faults.borrow_mut().request_crash(self.id);
            }
            Crashed
        })
    }

    fn apply(&mut self, cmd: &Command) {
        match cmd {
            Command::TxPrepareMeta(rec) | Command::TxPrepareChunk(rec) => {
                for u in &rec.updates {
                    match u {
                        Command::CreateInode(c) => self.store.observe_id(c.meta.id),
                        Command::DirEntryAdd(a) => self.store.observe_id(a.entry.child),
                        _ => {}
                    }
                }
                self.txns.apply(cmd);
            }
            Command::TxCommit(_) | Command::TxAbort(_) => {
                let membership_abort = match cmd {
                    Command::TxAbort(o) if o.mark == OutcomeMark::Participant => self
                        .txns
                        .participant(&o.txid)
                        .is_some_and(|p| p.state == TxState::Prepared && p.record.resources.contains(&ResourceId::Membership)),
                    _ => false,
                };
                for u in self.txns.apply(cmd) {
                    self.apply(&u);
                }
                if membership_abort {
                    self.pending_migrations.clear();
                }
            }
            Command::MpuBeginRecord(_) | Command::PersistedInodeRecord(_) => {
                self.txns.apply(cmd);
            }
            Command::NodeListUpdate(l) => self.adopt_list(l),
            Command::MigrationReceive(m) => {
                self.pending_migrations.entry(m.list_version).or_default().push(m.clone());
            }
            other => self.store.apply(other),
        }
    }

    fn adopt_list(&mut self, l: &NodeList) {
        let batches = self.pending_migrations.remove(&l.version).unwrap_or_default();
        self.pending_migrations.clear();
        self.list = l.clone();
        self.ring = l.ring();
        for b in batches {
            if !self.replaying {
                self.stats.borrow_mut().migrations.push(MigrationRecord::new(self.id, &b));
            }
            self.store.apply(&Command::MigrationReceive(b));
        }
        if l.contains(self.id) {
            let (ring, me, cs) = (self.ring.clone(), self.id, self.cfg.chunk_size);
            self.store.retain_owned(
                |id| meta_owner(&ring, id, cs) == Some(me),
                |k| chunk_owner(&ring, k, cs) == Some(me),
            );
        }
    }

    fn read_sl(&self, r: &SecondLevelRef) -> Result<Vec<u8>, FsError> {
        self.log.read_second_level(r).map_err(|e| FsError::Corrupt(e.to_string()))
    }

    fn read_ext(&self, key: &ExtKey, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        self.ext.borrow_mut().get_range(&key.bucket, &key.key, offset, len).map_err(store_err)
    }

    pub(crate) fn compose(&self, chunk: &Chunk) -> Result<Vec<u8>, FsError> {
        compose_chunk(chunk, |r| self.read_sl(r), |k, o, l| self.read_ext(k, o, l))
    }

    /// Committed bytes of a chunk: the cached copy, or the external base
    /// when the chunk is not cached. Nothing is cached by a read.
    pub(crate) fn read_chunk(&self, key: ChunkKey, base: Option<&ExternalBase>) -> Result<Vec<u8>, FsError> {
        if let Some(c) = self.store.chunks.get(&key) {
            return self.compose(c);
        }
        match base {
            Some(b) => self.read_ext(&b.key, b.object_offset, b.len),
            None => Ok(Vec::new()),
        }
    }

    pub(crate) fn stage(&mut self, id: StageId, chunk: ChunkKey, at: u64, data: &[u8]) -> Result<(), Fail> {
        let cs = self.cfg.chunk_size;
        if data.is_empty() || chunk.offset % cs != 0 || at + data.len() as u64 > cs {
            return Err(FsError::Usage("staged write must be non-empty and stay inside one chunk".into()).into());
        }
        if self.store.staged.contains_key(&id) {
            return Ok(());
        }
        let r = self.sl_append(data)?;
        self.append(Command::StageWriteRecord(StagedWrite {
            id,
            inode: chunk.inode,
            chunk_offset: chunk.offset,
            at,
            len: data.len() as u64,
            source: WriteSource::SecondLevel(r),
        }))?;
        Ok(())
    }

    /// Returns the live metadata of `id`, building it from the object store
    /// when this owner has never seen it.
    pub(crate) fn materialize(&mut self, id: InodeId, hint: &MetaHint) -> Result<InodeMeta, Fail> {
        if let Some(m) = self.store.metas.get(&id) {
            return if m.deleted { Err(FsError::NotFound.into()) } else { Ok(m.clone()) };
        }
        let now = self.now;
        let (meta, entries) = match hint {
            MetaHint::Root => {
                if id != ROOT_INODE {
                    return Err(FsError::Protocol(format!("root hint for inode {id}")).into());
                }
                let mut t = DirTable::new();
                for b in self.cfg.buckets.clone() {
                    let child = self.store.allocate_id();
                    t.insert(b, DirEntry { child, kind: EntryKind::Directory });
                }
                (InodeMeta::new(ROOT_INODE, InodeKind::Directory, None, now), Some(t))
            }
            MetaHint::Dir(key) => {
                let listing = self.ext.borrow_mut().list_prefix(&key.bucket, &key.key).map_err(store_err)?;
                let mut kinds: BTreeMap<String, EntryKind> = BTreeMap::new();
                let mut marker = false;
                for k in &listing.keys {
                    let name = &k[key.key.len()..];
                    if name.is_empty() {
                        marker = true;
                    } else {
                        kinds.insert(name.to_string(), EntryKind::File);
                    }
                }
                for p in &listing.common_prefixes {
                    let name = &p[key.key.len()..p.len() - 1];
                    if name.is_empty() {
                        continue;
                    }
                    kinds
                        .entry(name.to_string())
                        .and_modify(|k| *k = EntryKind::Conflict)
                        .or_insert(EntryKind::Directory);
                }
                let mut t = DirTable::new();
                for (name, kind) in kinds {
                    let child = self.store.allocate_id();
                    t.insert(name, DirEntry { child, kind });
                }
                let mut meta = InodeMeta::new(id, InodeKind::Directory, Some(key.clone()), now);
                if marker {
                    let info = self.ext.borrow_mut().head(&key.bucket, &key.key).map_err(store_err)?;
                    meta.persisted = Some(key.clone());
                    meta.persisted_gen = info.generation;
                }
                (meta, Some(t))
            }
            MetaHint::File(key) => {
                let info = self.ext.borrow_mut().head(&key.bucket, &key.key).map_err(store_err)?;
                (InodeMeta::from_external(id, InodeKind::File, key.clone(), info.size, info.generation, now), None)
            }
        };
        self.append(Command::CreateInode(CreateInode { meta, entries }))?;
        Ok(self.store.metas[&id].clone())
    }

    fn scratch_meta(&self, sc: &Scratch, id: InodeId) -> Option<InodeMeta> {
        sc.metas.get(&id).cloned().or_else(|| self.store.metas.get(&id).cloned())
    }

    fn live(&self, sc: &Scratch, id: InodeId) -> Result<InodeMeta, FsError> {
        self.scratch_meta(sc, id).filter(|m| !m.deleted).ok_or(FsError::NotFound)
    }

    fn scratch_dir(&self, sc: &Scratch, dir: InodeId) -> Result<DirTable, FsError> {
        let m = self.live(sc, dir)?;
        if !m.is_dir() {
            return Err(FsError::NotDir);
        }
        Ok(sc.dirs.get(&dir).cloned().or_else(|| self.store.dirs.get(&dir).cloned()).unwrap_or_default())
    }

    /// Checks preconditions and builds the commands a participant logs.
    /// Persist intents upload their part here, before the vote.
    fn evaluate(&mut self, txid: TxId, intents: &[Intent]) -> Result<Result<Evaluated, Refusal>, Crashed> {
        let mut resources: Vec<ResourceId> = intents.iter().map(resource_of).collect();
        resources.sort();
        resources.dedup();
        if resources.iter().any(|r| !self.owns(r)) {
            return Ok(Err(Refusal::Stale(self.list.clone())));
        }
        if self.leaving && !intents.iter().all(is_persist_intent) {
            return Ok(Err(Refusal::Busy));
        }
        if let Some((mtx, l)) = self.pending_list() {
            let ring = l.ring();
            if mtx != txid && resources.iter().any(|r| self.moves_under(r, &ring)) {
                return Ok(Err(Refusal::Busy));
            }
        }
        if self.txns.conflicts(txid, &resources) {
            let membership = resources.contains(&ResourceId::Membership);
            return Ok(Err(if membership { Refusal::Busy } else { Refusal::Conflict }));
        }
        let now = self.now;
        let mut sc = Scratch::default();
        let mut updates = Vec::new();
        let mut vote = VoteInfo::default();
        for intent in intents {
            let r = self.evaluate_one(txid, intent, now, &mut sc, &mut updates, &mut vote)?;
            if let Err(refusal) = r {
                return Ok(Err(refusal));
            }
        }
        Ok(Ok(Evaluated { resources, updates, vote }))
    }

    fn evaluate_one(
        &mut self,
        txid: TxId,
        intent: &Intent,
        now: Tick,
        sc: &mut Scratch,
        updates: &mut Vec<Command>,
        vote: &mut VoteInfo,
    ) -> Result<Result<(), Refusal>, Crashed> {
        macro_rules! check {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(e) => return Ok(Err(refuse(e))),
                }
            };
        }
        match intent {
            Intent::Create { meta } => {
                if self.scratch_meta(sc, meta.id).is_some() || meta.id == 0 {
                    return Ok(Err(refuse(FsError::Exists)));
                }
                let mut m = meta.clone();
                m.dirty = false;
                m.touch_dirty(now);
                let entries = m.is_dir().then(DirTable::new);
                if let Some(t) = &entries {
                    sc.dirs.insert(m.id, t.clone());
                }
                sc.metas.insert(m.id, m.clone());
                vote.meta = Some(m.clone());
                updates.push(Command::CreateInode(CreateInode { meta: m, entries }));
            }
            Intent::ExtendSize { inode, end, mtime, persisted, valid } => {
                let mut m = check!(self.live(sc, *inode));
                if m.is_dir() {
                    return Ok(Err(refuse(FsError::IsDir)));
                }
                if m.persisted != *persisted || m.external_valid != *valid {
                    return Ok(Err(refuse(FsError::Stale)));
                }
                m.size = m.size.max(*end);
                m.touch_dirty((*mtime).max(now));
                sc.metas.insert(m.id, m.clone());
                vote.meta = Some(m.clone());
                updates.push(Command::UpdateMeta(m));
            }
            Intent::SetSize { inode, size, expect_size, mtime } => {
                let mut m = check!(self.live(sc, *inode));
                if m.is_dir() {
                    return Ok(Err(refuse(FsError::IsDir)));
                }
                if m.size != *expect_size {
                    return Ok(Err(refuse(FsError::Stale)));
                }
                m.size = *size;
                m.external_valid = m.external_valid.min(*size);
                m.touch_dirty((*mtime).max(now));
                sc.metas.insert(m.id, m.clone());
                vote.meta = Some(m);
                updates.push(Command::TruncateRecord(Truncate { target: Target::Meta(*inode), size: *size, mtime: (*mtime).max(now) }));
            }
            Intent::MarkDeleted { inode, kind, expect_size, mtime } => {
                let mut m = check!(self.live(sc, *inode));
                if m.kind != *kind {
                    return Ok(Err(refuse(if m.is_dir() { FsError::IsDir } else { FsError::NotDir })));
                }
                if expect_size.is_some_and(|s| s != m.size) {
                    return Ok(Err(refuse(FsError::Stale)));
                }
                if m.is_dir() && !check!(self.scratch_dir(sc, *inode)).is_empty() {
                    return Ok(Err(refuse(FsError::NotEmpty)));
                }
                m.deleted = true;
                m.size = 0;
                sc.metas.insert(m.id, m);
                updates.push(Command::SetDeletedFlag(SetDeleted { target: Target::Meta(*inode), mtime: (*mtime).max(now) }));
            }
            Intent::Rebind { inode, key, valid, mtime } => {
                let mut m = check!(self.live(sc, *inode));
                if m.external_valid != *valid {
                    return Ok(Err(refuse(FsError::Stale)));
                }
                m.external_key = Some(key.clone());
                m.external_valid = 0;
                m.touch_dirty((*mtime).max(now));
                sc.metas.insert(m.id, m.clone());
                updates.push(Command::UpdateMeta(m));
            }
            Intent::RequireEmpty { dir } => {
                if !check!(self.scratch_dir(sc, *dir)).is_empty() {
                    return Ok(Err(refuse(FsError::NotEmpty)));
                }
            }
            Intent::DirAdd { dir, name, child, kind, replace, mtime } => {
                let mut t = check!(self.scratch_dir(sc, *dir));
                let existing = t.get(name).copied();
                match (existing, replace) {
                    (None, None) => {}
                    (Some(e), Some(r)) if e.child == *r => vote.replaced = Some(e),
                    (Some(_), _) => return Ok(Err(refuse(FsError::Exists))),
                    (None, Some(_)) => return Ok(Err(refuse(FsError::Stale))),
                }
                let entry = DirEntry { child: *child, kind: *kind };
                t.insert(name.clone(), entry);
                sc.dirs.insert(*dir, t);
                updates.push(Command::DirEntryAdd(DirEntryAdd { dir: *dir, name: name.clone(), entry, mtime: (*mtime).max(now) }));
            }
            Intent::DirRemove { dir, name, expect_child, mtime } => {
                let mut t = check!(self.scratch_dir(sc, *dir));
                if t.get(name).map(|e| e.child) != Some(*expect_child) {
                    return Ok(Err(refuse(FsError::NotFound)));
                }
                t.remove(name);
                sc.dirs.insert(*dir, t);
                updates.push(Command::DirEntryRemove(DirEntryRemove { dir: *dir, name: name.clone(), mtime: (*mtime).max(now) }));
            }
            Intent::Fold { chunk, stages, base } => {
                let all_here = stages.iter().all(|id| {
                    self.store.staged.get(id).is_some_and(|s| s.inode == chunk.inode && s.chunk_offset == chunk.offset)
                });
                if !all_here {
                    return Ok(Err(refuse(FsError::StageMissing)));
                }
                updates.push(Command::FoldStaged(FoldStaged { chunk: *chunk, stages: stages.clone(), base: base.clone() }));
            }
            Intent::TruncateChunk { chunk, size, mtime } => {
                updates.push(Command::TruncateRecord(Truncate { target: Target::Chunk(*chunk), size: *size, mtime: (*mtime).max(now) }));
            }
            Intent::DeleteChunk { chunk, mtime } => {
                updates.push(Command::SetDeletedFlag(SetDeleted { target: Target::Chunk(*chunk), mtime: (*mtime).max(now) }));
            }
            Intent::PinChunk { chunk, base } => {
                let external = match self.store.chunks.get(chunk) {
                    Some(c) => c.pieces.iter().any(|p| matches!(p.source, WriteSource::ExternalFetch { .. })),
                    None => base.is_some(),
                };
                if external {
                    let bytes = check!(self.read_chunk(*chunk, base.as_ref()));
                    let r = if bytes.is_empty() { SecondLevelRef::default() } else { self.sl_append(&bytes)? };
                    updates.push(Command::PinChunk(PinChunk { chunk: *chunk, length: bytes.len() as u64, data: r }));
                }
            }
            Intent::PersistMeta { inode, version, key, generation, size } => {
                let m = check!(self.scratch_meta(sc, *inode).ok_or(FsError::NotFound));
                if m.version != *version {
                    return Ok(Err(refuse(FsError::Stale)));
                }
                vote.meta = Some(m);
                updates.push(Command::ClearDirtyMeta(ClearDirtyMeta {
                    inode: *inode,
                    version: *version,
                    persisted: key.clone(),
                    generation: *generation,
                    size: *size,
                }));
            }
            Intent::PersistChunk { chunk, expected_len, base, upload_id, part } => {
                let version = self.store.chunks.get(chunk).map_or(0, |c| c.version);
                let mut bytes = check!(self.read_chunk(*chunk, base.as_ref()));
                bytes.resize(*expected_len as usize, 0);
                let tag = match self.ext.borrow_mut().mpu_add(*upload_id, *part, &bytes) {
                    Ok(t) => t,
                    Err(e) => return Ok(Err(refuse(store_err(e)))),
                };
                let r = self.sl_append(&bytes)?;
                vote.parts.push(PartTag { number: *part, tag });
                updates.push(Command::ClearDirtyChunk(ClearDirtyChunk { chunk: *chunk, version, compacted: Some((r, *expected_len)) }));
            }
            Intent::ClearChunk { chunk, version, compacted } => {
                updates.push(Command::ClearDirtyChunk(ClearDirtyChunk { chunk: *chunk, version: *version, compacted: *compacted }));
            }
            Intent::NodeList { list } => {
                if list.version != self.list.version + 1 && !self.list.is_empty() {
                    return Ok(Err(Refusal::Stale(self.list.clone())));
                }
                let ring = list.ring();
                let locked_moving = self
                    .txns
                    .locks()
                    .any(|(r, holder)| *holder != txid && self.moves_under(r, &ring) && self.list.contains(self.id));
                if locked_moving {
                    return Ok(Err(Refusal::Busy));
                }
                updates.push(Command::NodeListUpdate(list.clone()));
            }
        }
        Ok(Ok(()))
    }

    pub(crate) fn prepare(&mut self, txid: TxId, attempt: u32, coordinator: NodeId, participants: &[NodeId], intents: &[Intent]) -> Result<Vote, Crashed> {
        if let PrepareCheck::Cached(v) = self.txns.check_prepare(txid, attempt) {
            return Ok(v);
        }
        let ev = match self.evaluate(txid, intents)? {
            Ok(ev) => ev,
            Err(r) => return Ok(Vote::No(r)),
        };
        let rec = PrepareRecord {
            txid,
            attempt,
            coordinator,
            participants: participants.to_vec(),
            resources: ev.resources,
            updates: ev.updates,
            vote: ev.vote.clone(),
        };
        let cmd = if intents.iter().any(Intent::touches_meta) { Command::TxPrepareMeta(rec) } else { Command::TxPrepareChunk(rec) };
        self.append(cmd)?;
        Ok(Vote::Yes(ev.vote))
    }

    pub(crate) fn one_phase(&mut self, txid: TxId, attempt: u32, intents: &[Intent], reply: &TxReply) -> Result<Vote, Crashed> {
        let ev = match self.evaluate(txid, intents)? {
            Ok(ev) => ev,
            Err(r) => return Ok(Vote::No(r)),
        };
        let mark = OutcomeMark::OnePhase { resources: ev.resources, updates: ev.updates, reply: reply.clone() };
        self.append(Command::TxCommit(OutcomeRecord { txid, attempt, mark }))?;
        Ok(Vote::Yes(ev.vote))
    }

    pub(crate) fn decide(&mut self, txid: TxId, attempt: u32, commit: bool) -> Result<(), Crashed> {
        let known = self.txns.participant(&txid).map(|p| (p.record.attempt, p.state));
        match known {
            Some((a, TxState::Prepared)) if a == attempt => {
                let o = OutcomeRecord { txid, attempt, mark: OutcomeMark::Participant };
                self.append(if commit { Command::TxCommit(o) } else { Command::TxAbort(o) })
            }
            Some((a, _)) if a >= attempt => Ok(()),
            _ => {
                if commit {
                    self.stats.borrow_mut().protocol_errors += 1;
                } else {
                    self.txns.note_unknown_abort(txid, attempt);
                }
                Ok(())
            }
        }
    }

    pub(crate) fn log_outcome(&mut self, txid: TxId, attempt: u32, commit: bool, mark: OutcomeMark) -> Result<(), Crashed> {
        let o = OutcomeRecord { txid, attempt, mark };
        self.append(if commit { Command::TxCommit(o) } else { Command::TxAbort(o) })
    }

    /// Cached reply for a request this node coordinates, if it finished.
    pub(crate) fn remember_reply(&mut self, client: ClientId, seq: u64, outcome: crate::txn::CommitOutcome) {
        let w = self.replies.entry(client).or_default();
        if w.iter().any(|(s, _)| *s == seq) {
            return;
        }
        w.push_back((seq, outcome));
        if w.len() > crate::txn::DEDUP_WINDOW {
            w.pop_front();
        }
    }

    pub(crate) fn cached_reply(&self, client: ClientId, seq: u64) -> Option<crate::txn::CommitOutcome> {
        self.replies.get(&client)?.iter().find(|(s, _)| *s == seq).map(|(_, o)| o.clone())
    }

    pub(crate) fn finished_reply(&self, client: ClientId, seq: u64) -> Option<Option<crate::txn::CommitOutcome>> {
        use crate::txn::CommitOutcome;
        let e = self.txns.coordinator_entry(client, seq)?;
        Some(e.complete.then(|| match e.decision {
            Some(true) => CommitOutcome::Committed(e.reply.clone()),
            _ => CommitOutcome::Aborted(Refusal::Aborted),
        }))
    }

    /// Runs everything of a persist that needs no remote participant. Small
    /// files, directories and deletions finish here; large files return the
    /// multipart plan after the upload id is logged.
    pub(crate) fn persist_start(&mut self, txid: TxId, attempt: u32, inode: InodeId) -> Result<PersistStart, Crashed> {
        use PersistStart::Finished;
        let cs = self.cfg.chunk_size;
        let Some(meta) = self.store.metas.get(&inode).cloned() else {
            return Ok(Finished(Ok(TxReply::Clean)));
        };
        if !meta.dirty {
            return Ok(Finished(Ok(TxReply::Clean)));
        }
        if self.read_only(&ResourceId::Meta(inode)) {
            return Ok(Finished(Err(Refusal::Busy)));
        }
        let finish_one = |node: &mut Node, intents: Vec<Intent>, kind: PersistKind| -> Result<Result<TxReply, Refusal>, Crashed> {
            let reply = TxReply::Persisted(kind);
            Ok(match node.one_phase(txid, attempt, &intents, &reply)? {
                Vote::Yes(_) => Ok(reply),
                Vote::No(r) => Err(r),
            })
        };
        let transient = |e: StoreError| Finished(Err(refuse(store_err(e))));
        if meta.deleted {
            if let Some(k) = &meta.persisted {
                match self.ext.borrow_mut().delete_object(&k.bucket, &k.key, Some(meta.persisted_gen)) {
                    Ok(()) | Err(StoreError::Precondition(_)) => {}
                    Err(e) => return Ok(transient(e)),
                }
            }
            let intents = vec![Intent::PersistMeta { inode, version: meta.version, key: None, generation: 0, size: 0 }];
            return Ok(Finished(finish_one(self, intents, PersistKind::Delete)?));
        }
        let key = meta.external_key.clone();
        let old = meta.persisted.clone().filter(|p| Some(p) != key.as_ref()).map(|p| (p, meta.persisted_gen));
        if meta.is_dir() || key.is_none() {
            let mut generation = 0;
            if let Some(k) = key.as_ref().filter(|k| !k.key.is_empty()) {
                match self.ext.borrow_mut().put_object(&k.bucket, &k.key, &[]) {
                    Ok(g) => generation = g,
                    Err(e) => return Ok(transient(e)),
                }
            }
            let intents = vec![Intent::PersistMeta { inode, version: meta.version, key: key.clone(), generation, size: 0 }];
            let r = finish_one(self, intents, PersistKind::Marker)?;
            if r.is_ok() {
                self.delete_old(old);
            }
            return Ok(Finished(r));
        }
        let key = key.unwrap();
        if meta.size <= cs {
            let ck = ChunkKey { inode, offset: 0 };
            let cached = self.store.chunks.get(&ck).map(|c| c.version);
            let mut bytes = match self.read_chunk(ck, meta.external_base(0, cs).as_ref()) {
                Ok(b) => b,
                Err(e) => return Ok(Finished(Err(refuse(e)))),
            };
            bytes.resize(meta.size as usize, 0);
            let generation = match self.ext.borrow_mut().put_object(&key.bucket, &key.key, &bytes) {
                Ok(g) => g,
                Err(e) => return Ok(transient(e)),
            };
            let compacted = if bytes.is_empty() { None } else { Some((self.sl_append(&bytes)?, meta.size)) };
            let mut intents =
                vec![Intent::PersistMeta { inode, version: meta.version, key: Some(key), generation, size: meta.size }];
            if cached.is_some() || compacted.is_some() {
                intents.push(Intent::ClearChunk { chunk: ck, version: cached.unwrap_or(0), compacted });
            }
            let r = finish_one(self, intents, PersistKind::Put)?;
            if r.is_ok() {
                self.delete_old(old);
            }
            return Ok(Finished(r));
        }
        let upload = match self.ext.borrow_mut().mpu_begin(&key.bucket, &key.key) {
            Ok(u) => u,
            Err(e) => return Ok(transient(e)),
        };
        self.append(Command::MpuBeginRecord(MpuBegin { txid, attempt, key: key.clone(), upload_id: upload }))?;
        let mut plan: BTreeMap<NodeId, Vec<Intent>> = BTreeMap::new();
        plan.entry(self.id).or_default().push(Intent::PersistMeta {
            inode,
            version: meta.version,
            key: Some(key.clone()),
            generation: upload,
            size: meta.size,
        });
        let parts = meta.size.div_ceil(cs);
        for i in 0..parts {
            let offset = i * cs;
            let chunk = ChunkKey { inode, offset };
            let owner = chunk_owner(&self.ring, chunk, cs).expect("ring is not empty");
            plan.entry(owner).or_default().push(Intent::PersistChunk {
                chunk,
                expected_len: cs.min(meta.size - offset),
                base: meta.external_base(offset, cs),
                upload_id: upload,
                part: i as u32 + 1,
            });
        }
        Ok(PersistStart::Multipart { key, upload, old, plan })
    }

    /// Removes the object a renamed inode was persisted under, unless a
    /// newer object took the key.
    pub(crate) fn delete_old(&mut self, old: Option<(ExtKey, u64)>) {
        if let Some((k, generation)) = old {
            // A failure leaves an orphan object behind; the inode is correct.
            let _ = self.ext.borrow_mut().delete_object(&k.bucket, &k.key, Some(generation));
        }
    }

    pub(crate) fn abort_upload(&mut self, upload: u64) {
        let _ = self.ext.borrow_mut().mpu_abort(upload);
    }

    pub(crate) fn commit_upload(&mut self, upload: u64, parts: &[(u32, String)]) -> Result<(), FsError> {
        self.ext.borrow_mut().mpu_commit(upload, parts).map(|_| ()).map_err(store_err)
    }

    /// Migration batches for the nodes that take over entities under `new`.
    pub(crate) fn build_migration(&self, new: &NodeList) -> Result<Vec<(NodeId, Req)>, FsError> {
        let plan = compute_migration_plan(&self.store, self.id, &self.ring, &new.ring(), self.cfg.chunk_size);
        let mut out: BTreeMap<NodeId, (Vec<InodeMeta>, Vec<(InodeMeta, DirTable)>, Vec<(Chunk, Blob)>)> = BTreeMap::new();
        for (to, m) in plan.dirty_metas {
            out.entry(to).or_default().0.push(m);
        }
        for (to, m, t) in plan.directories {
            out.entry(to).or_default().1.push((m, t));
        }
        for (to, key) in plan.dirty_chunks {
            let c = &self.store.chunks[&key];
            let bytes = self.compose(c)?;
            let header = Chunk { pieces: Vec::new(), ..c.clone() };
            out.entry(to).or_default().2.push((header, Blob(bytes)));
        }
        Ok(out
            .into_iter()
            .map(|(to, (metas, dirs, chunks))| {
                (to, Req::MigratePush { from: self.id, list_version: new.version, metas, dirs, chunks })
            })
            .collect())
    }

    pub(crate) fn receive_migration(
        &mut self,
        from: NodeId,
        list_version: u64,
        metas: Vec<InodeMeta>,
        dirs: Vec<(InodeMeta, DirTable)>,
        chunks: Vec<(Chunk, Blob)>,
    ) -> Result<(), Crashed> {
        let mut stored = Vec::with_capacity(chunks.len());
        for (mut c, data) in chunks {
            c.length = data.0.len() as u64;
            c.pieces = if data.0.is_empty() {
                Vec::new()
            } else {
                let r = self.sl_append(&data.0)?;
                vec![Piece { at: 0, len: c.length, source: WriteSource::SecondLevel(r) }]
            };
            stored.push(c);
        }
        self.append(Command::MigrationReceive(MigrationReceive { from, list_version, metas, dirs, chunks: stored }))
    }

    /// Dirty inodes this node must persist before leaving: its own dirty
    /// metadata, and the metadata owners of its dirty chunks.
    pub(crate) fn dirty_work(&self) -> (Vec<InodeId>, Vec<(NodeId, InodeId)>) {
        let cs = self.cfg.chunk_size;
        let metas = self.store.metas.values().filter(|m| m.dirty).map(|m| m.id).collect();
        let mut remote: BTreeSet<(NodeId, InodeId)> = BTreeSet::new();
        for c in self.store.chunks.values().filter(|c| c.dirty) {
            if let Some(owner) = meta_owner(&self.ring, c.inode, cs).filter(|o| *o != self.id) {
                remote.insert((owner, c.inode));
            }
        }
        (metas, remote.into_iter().collect())
    }

    /// Dirty metadata whose age reached the flush interval.
    pub(crate) fn expired(&self, interval: Tick) -> Vec<InodeId> {
        self.store
            .metas
            .values()
            .filter(|m| m.dirty && self.now.saturating_sub(m.dirty_since) >= interval && !self.persisting.contains(&m.id))
            .map(|m| m.id)
            .collect()
    }

    pub(crate) fn pending_batch(&self, from: NodeId, version: u64) -> bool {
        self.pending_migrations.get(&version).is_some_and(|b| b.iter().any(|m| m.from == from))
    }

    pub(crate) fn is_member(&self) -> bool {
        self.list.contains(self.id)
    }
}
