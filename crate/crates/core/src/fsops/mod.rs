//! Client sessions: path-level file operations over a simulated cluster.
//!
//! A session keeps only its copy of the node list and its open handles.
//! Every operation resolves paths against the metadata owners, so strict
//! sessions see every committed write. Weak sessions buffer writes made
//! through a handle until close, fsync, or a size threshold, and readers
//! see them after the writer's close (close-to-open).

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use futures::future::join_all;

use crate::cluster::{chunk_owner, meta_owner, NodeList};
use crate::error::FsError;
use crate::server::{MetaHint, Place, Req, Resp, SimCluster};
use crate::simnet::Endpoint;
use crate::store::{split_write, ChunkKey, DirEntry, EntryKind, ExtKey, InodeKind, InodeMeta, StageId, ROOT_INODE};
use crate::txn::{backoff_ticks, CommitOutcome, Intent, Refusal, TxReply};
use crate::{ClientId, InodeId, NodeId};

/// Weak sessions flush a handle once a contiguous run of buffered writes
/// reaches this many bytes.
pub const WEAK_FLUSH_BYTES: u64 = 128 << 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consistency {
    /// Writes commit before the call returns.
    Strict,
    /// Handle writes are buffered until close or fsync.
    Weak,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub flushes: u64,
    /// Number of buffered writes carried by each flush.
    pub writes_per_flush: Vec<usize>,
    pub restarts: u64,
}

pub type Fd = u64;

/// A resolved path component: the inode and how to rebuild it.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Loc {
    id: InodeId,
    hint: MetaHint,
}

impl Loc {
    fn root() -> Loc {
        Loc { id: ROOT_INODE, hint: MetaHint::Root }
    }

    fn key(&self) -> Option<&ExtKey> {
        self.hint.key()
    }
}

struct Handle {
    loc: Loc,
    pending: Vec<(u64, Vec<u8>)>,
    run_end: u64,
    run_bytes: u64,
}

struct Inner {
    cluster: SimCluster,
    id: ClientId,
    mode: Consistency,
    list: RefCell<NodeList>,
    seq: Cell<u64>,
    handles: RefCell<BTreeMap<Fd, Handle>>,
    next_fd: Cell<Fd>,
    stats: RefCell<ClientStats>,
}

/// One client session. Cheap to clone; clones share the session.
#[derive(Clone)]
pub struct Client(Rc<Inner>);

fn components(path: &str) -> Result<Vec<&str>, FsError> {
    let parts: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
    if parts.iter().any(|c| *c == "." || *c == "..") {
        return Err(FsError::Usage(format!("path {path:?} must not contain . or ..")));
    }
    Ok(parts)
}

fn child_hint(parent: &MetaHint, name: &str, kind: EntryKind) -> Result<MetaHint, FsError> {
    match (parent, kind) {
        (_, EntryKind::Conflict) => Err(FsError::TypeConflict),
        (MetaHint::Root, _) => Ok(MetaHint::Dir(ExtKey::new(name, ""))),
        (MetaHint::Dir(k), EntryKind::File) => Ok(MetaHint::File(k.child(name, InodeKind::File))),
        (MetaHint::Dir(k), EntryKind::Directory) => Ok(MetaHint::Dir(k.child(name, InodeKind::Directory))),
        (MetaHint::File(_), _) => Err(FsError::NotDir),
    }
}

fn entry_kind(kind: InodeKind) -> EntryKind {
    match kind {
        InodeKind::File => EntryKind::File,
        InodeKind::Directory => EntryKind::Directory,
    }
}

fn unexpected(r: Resp) -> FsError {
    FsError::Protocol(format!("unexpected reply {r:?}"))
}

impl SimCluster {
    pub fn client(&self, mode: Consistency) -> Client {
        Client::new(self, mode)
    }
}

impl Client {
    pub fn new(cluster: &SimCluster, mode: Consistency) -> Client {
        Client(Rc::new(Inner {
            cluster: cluster.clone(),
            id: cluster.next_client_id(),
            mode,
            list: RefCell::new(cluster.list().unwrap_or_default()),
            seq: Cell::new(1),
            handles: RefCell::default(),
            next_fd: Cell::new(3),
            stats: RefCell::default(),
        }))
    }

    pub fn id(&self) -> ClientId {
        self.0.id
    }

    pub fn mode(&self) -> Consistency {
        self.0.mode
    }

    pub fn stats(&self) -> ClientStats {
        self.0.stats.borrow().clone()
    }

    fn cs(&self) -> u64 {
        self.0.cluster.config().chunk_size
    }

    fn next_seq(&self) -> u64 {
        let s = self.0.seq.get();
        self.0.seq.set(s + 1);
        s
    }

    fn now(&self) -> u64 {
        self.0.cluster.sim().now()
    }

    async fn backoff(&self, attempt: u32) {
        let sim = self.0.cluster.sim();
        let t = backoff_ticks(&self.0.cluster.config().retry, attempt.min(16), |n| sim.rand_below(n));
        sim.sleep(t.max(1)).await;
    }

    fn adopt(&self, l: NodeList) -> bool {
        let mut mine = self.0.list.borrow_mut();
        if l.version > mine.version {
            *mine = l;
            true
        } else {
            false
        }
    }

    /// Asks every known node for its list and keeps the newest.
    async fn refresh(&self) {
        let mut candidates: Vec<NodeId> = self.0.list.borrow().ids();
        candidates.extend(self.0.cluster.seeds().borrow().iter().copied());
        candidates.sort_unstable();
        candidates.dedup();
        let sim = self.0.cluster.sim().clone();
        let timeout = self.0.cluster.config().rpc_timeout;
        let me = Endpoint::Client(self.0.id);
        let calls = candidates.into_iter().map(|n| sim.call(me, n, Req::GetList, timeout));
        for r in join_all(calls).await.into_iter().flatten() {
            if let Resp::List(l) = r {
                self.adopt(l);
            }
        }
    }

    fn owner(&self, place: Place) -> Option<NodeId> {
        let ring = self.0.list.borrow().ring();
        match place {
            Place::Meta(id) => meta_owner(&ring, id, self.cs()),
            Place::Chunk(k) => chunk_owner(&ring, k, self.cs()),
        }
    }

    /// Sends a request to the owner of `place`, following list changes.
    /// `limit` bounds consecutive timeouts; `None` retries the same request
    /// until the simulator reports a livelock.
    async fn call(&self, place: Place, mk: impl Fn(u64) -> Req, limit: Option<u32>) -> Result<Resp, FsError> {
        let sim = self.0.cluster.sim().clone();
        let timeout = self.0.cluster.config().rpc_timeout;
        let mut timeouts = 0;
        let mut busy = 0;
        loop {
            let Some(owner) = self.owner(place) else {
                timeouts += 1;
                if limit.is_some_and(|l| timeouts >= l) {
                    return Err(FsError::Timeout);
                }
                self.refresh().await;
                sim.sleep(timeout).await;
                continue;
            };
            let ver = self.0.list.borrow().version;
            match sim.call(Endpoint::Client(self.0.id), owner, mk(ver), timeout).await {
                None => {
                    timeouts += 1;
                    if limit.is_some_and(|l| timeouts >= l) {
                        return Err(FsError::Timeout);
                    }
                    sim.note_retry(format_args!("c{} timeout", self.0.id));
                    self.refresh().await;
                }
                Some(Resp::Stale(l)) => {
                    sim.note_retry(format_args!("c{} stale", self.0.id));
                    if !self.adopt(l) {
                        self.refresh().await;
                        sim.sleep(1 + sim.rand_below(timeout)).await;
                    }
                }
                Some(Resp::Busy) => {
                    sim.note_retry(format_args!("c{} busy", self.0.id));
                    self.backoff(busy).await;
                    busy += 1;
                }
                Some(Resp::Err(e)) => return Err(e),
                Some(r) => return Ok(r),
            }
        }
    }

    fn read_limit(&self) -> Option<u32> {
        Some(self.0.cluster.config().rpc_retries)
    }

    /// Runs a transaction, retrying with a new sequence number after
    /// aborts that may succeed later.
    async fn transact(&self, ops: Vec<(Place, Intent)>) -> Result<TxReply, FsError> {
        let first = ops[0].0;
        let mut attempt = 0;
        loop {
            let seq = self.next_seq();
            let client = self.0.id;
            let resp = self.call(first, |ver| Req::Transact { ver, client, seq, ops: ops.clone() }, None).await?;
            match resp {
                Resp::Outcome(CommitOutcome::Committed(r)) => return Ok(r),
                Resp::Outcome(CommitOutcome::Aborted(Refusal::Error(e))) => return Err(e),
                Resp::Outcome(CommitOutcome::Aborted(Refusal::Stale(l))) => {
                    if !self.adopt(l) {
                        self.refresh().await;
                    }
                }
                Resp::Outcome(CommitOutcome::Aborted(_)) => self.backoff(attempt).await,
                r => return Err(unexpected(r)),
            }
            self.0.stats.borrow_mut().restarts += 1;
            self.0.cluster.sim().note_retry(format_args!("c{} tx", self.0.id));
            attempt += 1;
        }
    }

    async fn lookup(&self, dir: &Loc, name: &str) -> Result<(DirEntry, Loc), FsError> {
        let (id, hint) = (dir.id, dir.hint.clone());
        let resp = self
            .call(Place::Meta(id), |ver| Req::Lookup { ver, dir: id, hint: hint.clone(), name: name.to_string() }, self.read_limit())
            .await?;
        let Resp::Entry(e) = resp else { return Err(unexpected(resp)) };
        let hint = child_hint(&dir.hint, name, e.kind)?;
        Ok((e, Loc { id: e.child, hint }))
    }

    /// Locations of every component, starting with the root.
    async fn resolve(&self, parts: &[&str]) -> Result<Vec<Loc>, FsError> {
        let mut out = vec![Loc::root()];
        for name in parts {
            let (_, loc) = self.lookup(out.last().unwrap(), name).await?;
            out.push(loc);
        }
        Ok(out)
    }

    async fn resolve_path(&self, path: &str) -> Result<Loc, FsError> {
        let parts = components(path)?;
        Ok(self.resolve(&parts).await?.pop().unwrap())
    }

    async fn meta(&self, loc: &Loc) -> Result<InodeMeta, FsError> {
        let (id, hint) = (loc.id, loc.hint.clone());
        let resp = self.call(Place::Meta(id), |ver| Req::GetMeta { ver, inode: id, hint: hint.clone() }, self.read_limit()).await?;
        match resp {
            Resp::Meta(m) => Ok(m),
            r => Err(unexpected(r)),
        }
    }

    pub async fn stat(&self, path: &str) -> Result<InodeMeta, FsError> {
        let loc = self.resolve_path(path).await?;
        self.meta(&loc).await
    }

    pub async fn exists(&self, path: &str) -> Result<bool, FsError> {
        match self.resolve_path(path).await {
            Ok(_) => Ok(true),
            Err(FsError::NotFound) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub async fn readdir(&self, path: &str) -> Result<Vec<(String, EntryKind)>, FsError> {
        let loc = self.resolve_path(path).await?;
        let (id, hint) = (loc.id, loc.hint.clone());
        let resp = self.call(Place::Meta(id), |ver| Req::ReadDir { ver, dir: id, hint: hint.clone() }, self.read_limit()).await?;
        match resp {
            Resp::Dir(entries) => Ok(entries.into_iter().map(|(n, e)| (n, e.kind)).collect()),
            r => Err(unexpected(r)),
        }
    }

    async fn read_meta(&self, meta: &InodeMeta, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        if meta.is_dir() {
            return Err(FsError::IsDir);
        }
        let end = offset.saturating_add(len).min(meta.size);
        if end <= offset {
            return Ok(Vec::new());
        }
        let cs = self.cs();
        let first = offset - offset % cs;
        let chunks: Vec<u64> = (first..end).step_by(cs as usize).collect();
        let reads = chunks.iter().map(|co| {
            let key = ChunkKey { inode: meta.id, offset: *co };
            let base = meta.external_base(*co, cs);
            async move {
                let r = self
                    .call(Place::Chunk(key), |ver| Req::ReadChunk { ver, chunk: key, base: base.clone() }, self.read_limit())
                    .await?;
                match r {
                    Resp::Data(b) => Ok(b.0),
                    r => Err(unexpected(r)),
                }
            }
        });
        let mut out = Vec::with_capacity((end - offset) as usize);
        for (co, data) in chunks.iter().zip(join_all(reads).await) {
            let mut data = data?;
            data.resize(cs as usize, 0);
            let lo = offset.max(*co) - co;
            let hi = end.min(co + cs) - co;
            out.extend_from_slice(&data[lo as usize..hi as usize]);
        }
        Ok(out)
    }

    pub async fn read(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        let meta = self.stat(path).await?;
        self.read_meta(&meta, offset, len).await
    }

    pub async fn read_file(&self, path: &str) -> Result<Vec<u8>, FsError> {
        let meta = self.stat(path).await?;
        self.read_meta(&meta, 0, meta.size).await
    }

    /// Stages every fragment and commits them with the size change in one
    /// transaction.
    async fn write_now(&self, loc: &Loc, writes: &[(u64, Vec<u8>)]) -> Result<(), FsError> {
        let writes: Vec<&(u64, Vec<u8>)> = writes.iter().filter(|(_, d)| !d.is_empty()).collect();
        if writes.is_empty() {
            return Ok(());
        }
        let cs = self.cs();
        loop {
            let meta = self.meta(loc).await?;
            if meta.is_dir() {
                return Err(FsError::IsDir);
            }
            let seq = self.next_seq();
            let mut part = 0;
            let mut by_chunk: BTreeMap<u64, Vec<StageId>> = BTreeMap::new();
            let mut stages = Vec::new();
            let mut end = 0;
            for (off, data) in &writes {
                end = end.max(off + data.len() as u64);
                for (co, at, range) in split_write(*off, data.len() as u64, cs) {
                    part += 1;
                    let id = StageId { client: self.0.id, seq, part };
                    by_chunk.entry(co).or_default().push(id);
                    stages.push((ChunkKey { inode: meta.id, offset: co }, id, at, data[range].to_vec()));
                }
            }
            let calls = stages.into_iter().map(|(chunk, id, at, data)| async move {
                let blob = crate::server::Blob(data);
                let r = self
                    .call(Place::Chunk(chunk), |ver| Req::Stage { ver, id, chunk, at, data: blob.clone() }, self.read_limit())
                    .await?;
                match r {
                    Resp::Ack => Ok(()),
                    r => Err(unexpected(r)),
                }
            });
            for r in join_all(calls).await {
                r?;
            }
            let now = self.now();
            let mut ops = vec![(
                Place::Meta(meta.id),
                Intent::ExtendSize { inode: meta.id, end, mtime: now, persisted: meta.persisted.clone(), valid: meta.external_valid },
            )];
            for (co, ids) in by_chunk {
                let chunk = ChunkKey { inode: meta.id, offset: co };
                ops.push((Place::Chunk(chunk), Intent::Fold { chunk, stages: ids, base: meta.external_base(co, cs) }));
            }
            match self.transact(ops).await {
                Ok(_) => return Ok(()),
                Err(FsError::StageMissing | FsError::Stale) => {
                    self.0.stats.borrow_mut().restarts += 1;
                    self.0.cluster.sim().note_retry(format_args!("c{} write", self.0.id));
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub async fn write(&self, path: &str, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let loc = self.resolve_path(path).await?;
        self.write_now(&loc, &[(offset, data.to_vec())]).await
    }

    async fn create_kind(&self, path: &str, kind: InodeKind) -> Result<InodeId, FsError> {
        let parts = components(path)?;
        let Some((name, dir)) = parts.split_last() else {
            return Err(FsError::Exists);
        };
        if dir.is_empty() {
            return Err(FsError::Unsupported("buckets cannot be created".into()));
        }
        let parent = self.resolve(dir).await?.pop().unwrap();
        if !self.meta(&parent).await?.is_dir() {
            return Err(FsError::NotDir);
        }
        let Some(pkey) = parent.key().cloned() else { return Err(FsError::NotDir) };
        let now = self.now();
        let meta = InodeMeta::new(0, kind, Some(pkey.child(name, kind)), now);
        let ops = vec![
            (
                Place::Meta(parent.id),
                Intent::DirAdd { dir: parent.id, name: name.to_string(), child: 0, kind: entry_kind(kind), replace: None, mtime: now },
            ),
            (Place::Meta(0), Intent::Create { meta }),
        ];
        match self.transact(ops).await? {
            TxReply::Created(id) => Ok(id),
            r => Err(FsError::Protocol(format!("create replied {r:?}"))),
        }
    }

    pub async fn create(&self, path: &str) -> Result<InodeId, FsError> {
        self.create_kind(path, InodeKind::File).await
    }

    pub async fn mkdir(&self, path: &str) -> Result<InodeId, FsError> {
        self.create_kind(path, InodeKind::Directory).await
    }

    fn chunk_offsets(&self, size: u64) -> impl Iterator<Item = u64> {
        (0..size).step_by(self.cs() as usize)
    }

    pub async fn truncate(&self, path: &str, size: u64) -> Result<(), FsError> {
        let loc = self.resolve_path(path).await?;
        loop {
            let meta = self.meta(&loc).await?;
            if meta.is_dir() {
                return Err(FsError::IsDir);
            }
            let now = self.now();
            let cs = self.cs();
            let mut ops = vec![(Place::Meta(meta.id), Intent::SetSize { inode: meta.id, size, expect_size: meta.size, mtime: now })];
            for co in self.chunk_offsets(meta.size) {
                let chunk = ChunkKey { inode: meta.id, offset: co };
                if co >= size {
                    ops.push((Place::Chunk(chunk), Intent::DeleteChunk { chunk, mtime: now }));
                } else if size < co + cs {
                    ops.push((Place::Chunk(chunk), Intent::TruncateChunk { chunk, size, mtime: now }));
                }
            }
            match self.transact(ops).await {
                Err(FsError::Stale) => self.0.stats.borrow_mut().restarts += 1,
                r => return r.map(|_| ()),
            }
        }
    }

    /// Intents that delete `meta` and all of its chunks.
    fn delete_ops(&self, meta: &InodeMeta, now: u64, ops: &mut Vec<(Place, Intent)>) {
        let expect_size = (!meta.is_dir()).then_some(meta.size);
        ops.push((Place::Meta(meta.id), Intent::MarkDeleted { inode: meta.id, kind: meta.kind, expect_size, mtime: now }));
        if !meta.is_dir() {
            for co in self.chunk_offsets(meta.size) {
                let chunk = ChunkKey { inode: meta.id, offset: co };
                ops.push((Place::Chunk(chunk), Intent::DeleteChunk { chunk, mtime: now }));
            }
        }
    }

    async fn remove(&self, path: &str, dir: bool) -> Result<(), FsError> {
        let parts = components(path)?;
        if parts.len() < 2 {
            return Err(FsError::Unsupported("buckets cannot be removed".into()));
        }
        loop {
            let locs = self.resolve(&parts).await?;
            let (parent, loc) = (&locs[locs.len() - 2], &locs[locs.len() - 1]);
            let meta = self.meta(loc).await?;
            match (meta.is_dir(), dir) {
                (true, false) => return Err(FsError::IsDir),
                (false, true) => return Err(FsError::NotDir),
                _ => {}
            }
            let now = self.now();
            let name = parts.last().unwrap().to_string();
            let mut ops = vec![(Place::Meta(parent.id), Intent::DirRemove { dir: parent.id, name, expect_child: meta.id, mtime: now })];
            if dir {
                ops.push((Place::Meta(meta.id), Intent::RequireEmpty { dir: meta.id }));
            }
            self.delete_ops(&meta, now, &mut ops);
            match self.transact(ops).await {
                Err(FsError::Stale) => self.0.stats.borrow_mut().restarts += 1,
                r => return r.map(|_| ()),
            }
        }
    }

    pub async fn unlink(&self, path: &str) -> Result<(), FsError> {
        self.remove(path, false).await
    }

    pub async fn rmdir(&self, path: &str) -> Result<(), FsError> {
        self.remove(path, true).await
    }

    /// Moves a file, or an empty directory, to `to`. An existing file at
    /// `to` is replaced.
    pub async fn rename(&self, from: &str, to: &str) -> Result<(), FsError> {
        let src_parts = components(from)?;
        let dst_parts = components(to)?;
        if src_parts.len() < 2 || dst_parts.len() < 2 {
            return Err(FsError::Unsupported("buckets cannot be renamed".into()));
        }
        if src_parts == dst_parts {
            self.resolve(&src_parts).await?;
            return Ok(());
        }
        if dst_parts.starts_with(&src_parts) {
            return Err(FsError::Usage("cannot move a directory into itself".into()));
        }
        loop {
            let src = self.resolve(&src_parts).await?;
            let (sparent, sloc) = (&src[src.len() - 2], &src[src.len() - 1]);
            let (dname, ddir) = dst_parts.split_last().unwrap();
            let dparent = self.resolve(ddir).await?.pop().unwrap();
            let Some(dkey) = dparent.key().cloned().filter(|_| matches!(dparent.hint, MetaHint::Dir(_))) else {
                return Err(FsError::NotDir);
            };
            let existing = match self.lookup(&dparent, dname).await {
                Ok((_, loc)) => Some(self.meta(&loc).await?),
                Err(FsError::NotFound) => None,
                Err(e) => return Err(e),
            };
            let meta = self.meta(sloc).await?;
            let now = self.now();
            let mut ops = vec![(
                Place::Meta(sparent.id),
                Intent::DirRemove { dir: sparent.id, name: src_parts.last().unwrap().to_string(), expect_child: meta.id, mtime: now },
            )];
            if meta.is_dir() {
                if existing.is_some() {
                    return Err(FsError::Exists);
                }
                ops.push((Place::Meta(meta.id), Intent::RequireEmpty { dir: meta.id }));
            } else if existing.as_ref().is_some_and(|m| m.is_dir()) {
                return Err(FsError::IsDir);
            }
            ops.push((
                Place::Meta(dparent.id),
                Intent::DirAdd {
                    dir: dparent.id,
                    name: dname.to_string(),
                    child: meta.id,
                    kind: entry_kind(meta.kind),
                    replace: existing.as_ref().map(|m| m.id),
                    mtime: now,
                },
            ));
            ops.push((
                Place::Meta(meta.id),
                Intent::Rebind { inode: meta.id, key: dkey.child(dname, meta.kind), valid: meta.external_valid, mtime: now },
            ));
            if !meta.is_dir() {
                for co in self.chunk_offsets(meta.size) {
                    let chunk = ChunkKey { inode: meta.id, offset: co };
                    ops.push((Place::Chunk(chunk), Intent::PinChunk { chunk, base: meta.external_base(co, self.cs()) }));
                }
            }
            if let Some(old) = &existing {
                self.delete_ops(old, now, &mut ops);
            }
            match self.transact(ops).await {
                Err(FsError::Stale) => self.0.stats.borrow_mut().restarts += 1,
                Err(FsError::NotEmpty) if meta.is_dir() => {
                    return Err(FsError::Unsupported("renaming a non-empty directory".into()))
                }
                r => return r.map(|_| ()),
            }
        }
    }

    async fn persist(&self, loc: &Loc) -> Result<(), FsError> {
        let id = loc.id;
        let mut attempt = 0;
        loop {
            let seq = self.next_seq();
            let client = self.0.id;
            let r = self.call(Place::Meta(id), |ver| Req::Persist { ver, client, seq, inode: id }, None).await?;
            match r {
                Resp::Outcome(CommitOutcome::Committed(_)) => return Ok(()),
                Resp::Outcome(CommitOutcome::Aborted(Refusal::Error(e))) if !e.is_transient() => return Err(e),
                Resp::Outcome(CommitOutcome::Aborted(Refusal::Stale(l))) => {
                    if !self.adopt(l) {
                        self.refresh().await;
                    }
                }
                Resp::Outcome(CommitOutcome::Aborted(_)) => self.backoff(attempt).await,
                r => return Err(unexpected(r)),
            }
            self.0.cluster.sim().note_retry(format_args!("c{} persist", self.0.id));
            attempt += 1;
        }
    }

    /// Uploads the file's committed content to the object store.
    pub async fn fsync(&self, path: &str) -> Result<(), FsError> {
        let loc = self.resolve_path(path).await?;
        self.persist(&loc).await
    }

    /// Replaces the whole content of `path`, creating it if needed.
    pub async fn write_file(&self, path: &str, data: &[u8]) -> Result<(), FsError> {
        match self.resolve_path(path).await {
            Ok(_) => self.truncate(path, 0).await?,
            Err(FsError::NotFound) => {
                self.create(path).await?;
            }
            Err(e) => return Err(e),
        }
        self.write(path, 0, data).await
    }

    pub async fn open(&self, path: &str, create: bool) -> Result<Fd, FsError> {
        let loc = match self.resolve_path(path).await {
            Ok(loc) => loc,
            Err(FsError::NotFound) if create => {
                self.create(path).await?;
                self.resolve_path(path).await?
            }
            Err(e) => return Err(e),
        };
        if !matches!(loc.hint, MetaHint::File(_)) {
            return Err(FsError::IsDir);
        }
        let fd = self.0.next_fd.get();
        self.0.next_fd.set(fd + 1);
        self.0.handles.borrow_mut().insert(fd, Handle { loc, pending: Vec::new(), run_end: 0, run_bytes: 0 });
        Ok(fd)
    }

    fn handle_loc(&self, fd: Fd) -> Result<Loc, FsError> {
        self.0.handles.borrow().get(&fd).map(|h| h.loc.clone()).ok_or(FsError::BadHandle)
    }

    pub async fn write_fd(&self, fd: Fd, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let loc = self.handle_loc(fd)?;
        if self.0.mode == Consistency::Strict {
            return self.write_now(&loc, &[(offset, data.to_vec())]).await;
        }
        let full = {
            let mut hs = self.0.handles.borrow_mut();
            let h = hs.get_mut(&fd).ok_or(FsError::BadHandle)?;
            let len = data.len() as u64;
            h.run_bytes = if h.run_bytes > 0 && offset == h.run_end { h.run_bytes + len } else { len };
            h.run_end = offset + len;
            h.pending.push((offset, data.to_vec()));
            h.run_bytes >= WEAK_FLUSH_BYTES
        };
        if full {
            self.flush(fd).await?;
        }
        Ok(())
    }

    /// Reads through the handle; buffered writes of this handle are visible.
    pub async fn read_fd(&self, fd: Fd, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        let loc = self.handle_loc(fd)?;
        let meta = self.meta(&loc).await?;
        let pending: Vec<(u64, Vec<u8>)> = self.0.handles.borrow().get(&fd).map(|h| h.pending.clone()).unwrap_or_default();
        let size = pending.iter().map(|(o, d)| o + d.len() as u64).fold(meta.size, u64::max);
        let end = offset.saturating_add(len).min(size);
        if end <= offset {
            return Ok(Vec::new());
        }
        let mut out = self.read_meta(&meta, offset, end - offset).await?;
        out.resize((end - offset) as usize, 0);
        for (o, d) in pending {
            let lo = o.max(offset);
            let hi = (o + d.len() as u64).min(end);
            if lo < hi {
                out[(lo - offset) as usize..(hi - offset) as usize].copy_from_slice(&d[(lo - o) as usize..(hi - o) as usize]);
            }
        }
        Ok(out)
    }

    async fn flush(&self, fd: Fd) -> Result<(), FsError> {
        let (loc, writes) = {
            let mut hs = self.0.handles.borrow_mut();
            let h = hs.get_mut(&fd).ok_or(FsError::BadHandle)?;
            h.run_bytes = 0;
            (h.loc.clone(), std::mem::take(&mut h.pending))
        };
        if writes.is_empty() {
            return Ok(());
        }
        let n = writes.len();
        if let Err(e) = self.write_now(&loc, &writes).await {
            // Keep the buffer so a later close or fsync can retry it.
            if let Some(h) = self.0.handles.borrow_mut().get_mut(&fd) {
                let later = std::mem::replace(&mut h.pending, writes);
                h.pending.extend(later);
            }
            return Err(e);
        }
        let mut s = self.0.stats.borrow_mut();
        s.flushes += 1;
        s.writes_per_flush.push(n);
        Ok(())
    }

    pub async fn fsync_fd(&self, fd: Fd) -> Result<(), FsError> {
        self.flush(fd).await?;
        let loc = self.handle_loc(fd)?;
        self.persist(&loc).await
    }

    /// Flushes and releases the handle. On a flush error the handle stays
    /// open with its buffer intact.
    pub async fn close(&self, fd: Fd) -> Result<(), FsError> {
        self.flush(fd).await?;
        self.0.handles.borrow_mut().remove(&fd);
        Ok(())
    }
}
