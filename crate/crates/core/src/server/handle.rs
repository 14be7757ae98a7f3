use std::collections::BTreeMap;

use super::coord::{self, Ctx};
use super::msg::{Blob, Place, Req, Resp};
use super::node::{Fail, Node};
use super::Fs;
use crate::cluster::{chunk_owner, meta_owner, NodeList};
use crate::error::FsError;
use crate::raftlog::Command;
use crate::simnet::{Endpoint, Handled, ReplyToken, Sim};
use crate::store::EntryKind;
use crate::txn::{Intent, Refusal, TxId, TxReply, Vote};
use crate::{ClientId, NodeId};

impl Node {
    fn stale(&self, ver: u64) -> Option<Resp> {
        (ver != self.list.version || !self.is_member()).then(|| Resp::Stale(self.list.clone()))
    }

    fn spawn(&self, sim: &Sim<Fs>, fut: impl std::future::Future<Output = ()> + 'static) {
        sim.spawn(Endpoint::Node(self.id), fut);
    }

    pub(crate) fn handle(&mut self, sim: &Sim<Fs>, req: Req, token: ReplyToken) -> Handled<Resp> {
        let r = match self.dispatch(sim, req, token) {
            Ok(Some(resp)) => return Handled::Reply(resp),
            Ok(None) => return Handled::Deferred,
            Err(e) => e,
        };
        match r {
            Fail::Crashed => Handled::Crashed,
            Fail::Fs(e) => Handled::Reply(Resp::Err(e)),
        }
    }

    /// `Ok(None)` means the token was kept for a later reply.
    fn dispatch(&mut self, sim: &Sim<Fs>, req: Req, token: ReplyToken) -> Result<Option<Resp>, Fail> {
        let cs = self.chunk_size();
        match req {
            Req::GetList => Ok(Some(Resp::List(self.list.clone()))),
            Req::Lookup { ver, dir, hint, name } => {
                if let Some(s) = self.stale(ver).or_else(|| self.not_owner_meta(dir)) {
                    return Ok(Some(s));
                }
                let meta = self.materialize(dir, &hint)?;
                if !meta.is_dir() {
                    return Err(FsError::NotDir.into());
                }
                let e = self.store.dirs.get(&dir).and_then(|t| t.get(&name)).copied().ok_or(FsError::NotFound)?;
                if e.kind == EntryKind::Conflict {
                    return Err(FsError::TypeConflict.into());
                }
                Ok(Some(Resp::Entry(e)))
            }
            Req::GetMeta { ver, inode, hint } => {
                if let Some(s) = self.stale(ver).or_else(|| self.not_owner_meta(inode)) {
                    return Ok(Some(s));
                }
                Ok(Some(Resp::Meta(self.materialize(inode, &hint)?)))
            }
            Req::ReadDir { ver, dir, hint } => {
                if let Some(s) = self.stale(ver).or_else(|| self.not_owner_meta(dir)) {
                    return Ok(Some(s));
                }
                let meta = self.materialize(dir, &hint)?;
                if !meta.is_dir() {
                    return Err(FsError::NotDir.into());
                }
                let entries = self.store.dirs.get(&dir).map(|t| t.entries().iter().map(|(n, e)| (n.clone(), *e)).collect()).unwrap_or_default();
                Ok(Some(Resp::Dir(entries)))
            }
            Req::ReadChunk { ver, chunk, base } => {
                if let Some(s) = self.stale(ver) {
                    return Ok(Some(s));
                }
                if !self.owns_chunk(chunk) {
                    return Ok(Some(Resp::Stale(self.list.clone())));
                }
                Ok(Some(Resp::Data(Blob(self.read_chunk(chunk, base.as_ref())?))))
            }
            Req::Stage { ver, id, chunk, at, data } => {
                if let Some(s) = self.stale(ver) {
                    return Ok(Some(s));
                }
                if !self.owns_chunk(chunk) {
                    return Ok(Some(Resp::Stale(self.list.clone())));
                }
                if self.leaving || self.read_only(&crate::txn::ResourceId::Chunk(chunk.inode, chunk.offset)) {
                    return Ok(Some(Resp::Busy));
                }
                self.stage(id, chunk, at, &data.0)?;
                Ok(Some(Resp::Ack))
            }
            Req::Transact { ver, client, seq, ops } => {
                if let Some(s) = self.stale(ver) {
                    return Ok(Some(s));
                }
                if let Some(r) = self.dedup(client, seq, &token) {
                    return Ok(r);
                }
                if self.leaving {
                    return Ok(Some(Resp::Busy));
                }
                let Some(plan) = self.plan(ops, cs) else {
                    return Ok(Some(Resp::Stale(self.list.clone())));
                };
                let reply = plan
                    .values()
                    .flatten()
                    .find_map(|i| match i {
                        Intent::Create { meta } => Some(TxReply::Created(meta.id)),
                        _ => None,
                    })
                    .unwrap_or(TxReply::Done);
                let txid = TxId { client, seq, tx_seq: self.txns.assign_tx_seq() };
                self.inflight.insert((client, seq), vec![token]);
                self.spawn(sim, coord::run_transact(Ctx::new(sim, self.id), txid, plan, reply));
                Ok(None)
            }
            Req::Persist { ver, client, seq, inode } => {
                if let Some(s) = self.stale(ver).or_else(|| self.not_owner_meta(inode)) {
                    return Ok(Some(s));
                }
                if let Some(r) = self.dedup(client, seq, &token) {
                    return Ok(r);
                }
                let txid = TxId { client, seq, tx_seq: self.txns.assign_tx_seq() };
                self.inflight.insert((client, seq), vec![token]);
                self.spawn(sim, coord::serve_persist(Ctx::new(sim, self.id), txid, inode));
                Ok(None)
            }
            Req::Prepare { ver, txid, attempt, coordinator, participants, intents } => {
                let membership = intents.iter().find_map(|i| match i {
                    Intent::NodeList { list } => Some(list.clone()),
                    _ => None,
                });
                if let Some(new) = membership {
                    return self.ring_check(sim, ver, txid, attempt, coordinator, &participants, &intents, new, token);
                }
                if ver != self.list.version {
                    return Ok(Some(Resp::Vote(Vote::No(Refusal::Stale(self.list.clone())))));
                }
                let v = self.prepare(txid, attempt, coordinator, &participants, &intents)?;
                Ok(Some(Resp::Vote(v)))
            }
            Req::Decide { txid, attempt, commit, .. } => {
                self.decide(txid, attempt, commit)?;
                Ok(Some(Resp::Ack))
            }
            Req::Join { node } => {
                if self.list.is_empty() {
                    if node != self.id {
                        return Err(FsError::Protocol("join through a node that is not a member".into()).into());
                    }
                    self.append(Command::NodeListUpdate(NodeList::bootstrap(self.id)))?;
                    return Ok(Some(Resp::List(self.list.clone())));
                }
                if self.list.contains(node) {
                    return Ok(Some(Resp::List(self.list.clone())));
                }
                self.spawn(sim, coord::serve_join(Ctx::new(sim, self.id), node, token));
                Ok(None)
            }
            Req::Leave { node } => {
                if node != self.id {
                    return Err(FsError::Usage("leave must be sent to the leaving node".into()).into());
                }
                self.leave_waiters.push(token);
                if !self.leaving {
                    self.leaving = true;
                    self.spawn(sim, coord::serve_leave(Ctx::new(sim, self.id)));
                }
                Ok(None)
            }
            Req::Membership { change } => {
                self.spawn(sim, coord::serve_membership(Ctx::new(sim, self.id), change, token));
                Ok(None)
            }
            Req::MigratePush { from, list_version, metas, dirs, chunks } => {
                let dup = self.pending_batch(from, list_version);
                if !dup {
                    self.receive_migration(from, list_version, metas, dirs, chunks)?;
                }
                Ok(Some(Resp::Ack))
            }
        }
    }

    fn not_owner_meta(&self, id: crate::InodeId) -> Option<Resp> {
        (!self.owns_meta(id)).then(|| Resp::Stale(self.list.clone()))
    }

    /// Duplicate detection for client-numbered requests. `Some(None)` defers
    /// onto the running coordinator.
    fn dedup(&mut self, client: ClientId, seq: u64, token: &ReplyToken) -> Option<Option<Resp>> {
        if let Some(w) = self.inflight.get_mut(&(client, seq)) {
            w.push(token.clone());
            return Some(None);
        }
        if let Some(o) = self.cached_reply(client, seq) {
            return Some(Some(Resp::Outcome(o)));
        }
        match self.finished_reply(client, seq) {
            Some(Some(outcome)) => Some(Some(Resp::Outcome(outcome))),
            Some(None) => {
                // Recovery owns this request; answer when it completes.
                self.inflight.insert((client, seq), vec![token.clone()]);
                Some(None)
            }
            None => None,
        }
    }

    /// Groups intents by owner, assigning fresh inode ids to creations.
    /// Returns `None` when the first place is not owned here.
    fn plan(&mut self, ops: Vec<(Place, Intent)>, cs: u64) -> Option<BTreeMap<NodeId, Vec<Intent>>> {
        let ring = self.ring().clone();
        let owner = |p: &Place| match p {
            Place::Meta(id) => meta_owner(&ring, *id, cs),
            Place::Chunk(k) => chunk_owner(&ring, *k, cs),
        };
        let first = ops.first()?;
        if owner(&first.0) != Some(self.id) && !matches!(first.1, Intent::Create { .. }) {
            return None;
        }
        let fresh = if ops.iter().any(|(_, i)| matches!(i, Intent::Create { meta } if meta.id == 0)) { self.store.allocate_id() } else { 0 };
        let mut plan: BTreeMap<NodeId, Vec<Intent>> = BTreeMap::new();
        for (place, mut intent) in ops {
            let place = match &mut intent {
                Intent::Create { meta } if meta.id == 0 => {
                    meta.id = fresh;
                    Place::Meta(fresh)
                }
                Intent::DirAdd { child, .. } if *child == 0 => {
                    *child = fresh;
                    place
                }
                _ => place,
            };
            plan.entry(owner(&place)?).or_default().push(intent);
        }
        if !plan.contains_key(&self.id) {
            return None;
        }
        Some(plan)
    }

    #[allow(clippy::too_many_arguments)]
    fn ring_check(
        &mut self,
        sim: &Sim<Fs>,
        ver: u64,
        txid: TxId,
        attempt: u32,
        coordinator: NodeId,
        participants: &[NodeId],
        intents: &[Intent],
        new: NodeList,
        token: ReplyToken,
    ) -> Result<Option<Resp>, Fail> {
        let key = (txid, attempt);
        if let Some(w) = self.preparing.get_mut(&key) {
            w.push(token);
            return Ok(None);
        }
        if !self.list.is_empty() && ver != self.list.version {
            return Ok(Some(Resp::Vote(Vote::No(Refusal::Stale(self.list.clone())))));
        }
        let vote = self.prepare(txid, attempt, coordinator, participants, intents)?;
        let still_prepared = self.txns.participant(&txid).is_some_and(|p| p.record.attempt == attempt && !p.state.is_terminal());
        if matches!(vote, Vote::Yes(_)) && still_prepared && !self.pushed.contains(&key) {
            self.preparing.insert(key, vec![token]);
            self.spawn(sim, coord::serve_ring_check(Ctx::new(sim, self.id), key, new));
            return Ok(None);
        }
        Ok(Some(Resp::Vote(vote)))
    }
}

impl Fs {
    pub(crate) fn dispatch(&mut self, sim: &Sim<Fs>, to: NodeId, req: Req, token: ReplyToken) -> Handled<Resp> {
        let now = sim.now();
        match self.node_mut(to, now) {
            Some(n) => n.handle(sim, req, token),
            None => Handled::Crashed,
        }
    }
}
