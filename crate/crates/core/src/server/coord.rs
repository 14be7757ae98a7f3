//! Async drivers that outlive a single request handler: client
//! transactions, persists, membership changes, leaving, and recovery of
//! coordinated transactions after a restart.

use std::collections::BTreeMap;
use std::rc::Rc;

use futures::future::join_all;

use super::msg::{MembershipChange, Req, Resp};
use super::node::{Node, PersistStart};
use super::{ClusterConfig, Fs};
use crate::cluster::{membership_owner, NodeList};
use crate::error::Crashed;
use crate::simnet::{Endpoint, Sim};
use crate::txn::{
    backoff_ticks, coordinate, finish, prepare_remotes, worst_refusal, CommitOutcome, Intent, OutcomeMark,
    Participants, PersistKind, PersistedInode, Refusal, TxId, TxReply, Vote,
};
use crate::raftlog::Command;
use crate::{ClientId, InodeId, NodeId, Tick};

/// Client id used by the membership coordinator.
pub const MEMBERSHIP_CLIENT: ClientId = u64::MAX;

/// Client id of a node's own background work.
pub fn internal_client(node: NodeId) -> ClientId {
    (1 << 63) | node as u64
}

#[derive(Clone)]
pub(crate) struct Ctx {
    pub sim: Sim<Fs>,
    pub me: NodeId,
    pub membership: bool,
}

fn retryable(r: &Refusal) -> bool {
    matches!(r, Refusal::Conflict | Refusal::Busy | Refusal::Aborted)
}

impl Ctx {
    pub fn new(sim: &Sim<Fs>, me: NodeId) -> Ctx {
        Ctx { sim: sim.clone(), me, membership: false }
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut Node) -> T) -> Result<T, Crashed> {
        let now = self.sim.now();
        self.sim.with_world(|w| w.node_mut(self.me, now).map(f)).ok_or(Crashed)
    }

    pub fn cfg(&self) -> Rc<ClusterConfig> {
        self.sim.with_world(|w| w.cfg.clone())
    }

    fn timeout(&self) -> Tick {
        self.cfg().rpc_timeout
    }

    pub async fn call(&self, to: NodeId, req: Req) -> Option<Resp> {
        self.sim.call(Endpoint::Node(self.me), to, req, self.timeout()).await
    }

    pub fn reply_waiters(&self, key: (ClientId, u64), resp: Resp) {
        let toks = self
            .with(|n| {
                if let Resp::Outcome(o) = &resp {
                    n.remember_reply(key.0, key.1, o.clone());
                }
                n.inflight.remove(&key)
            })
            .ok()
            .flatten()
            .unwrap_or_default();
        for t in toks {
            self.sim.reply(t, resp.clone());
        }
    }

    fn count(&self, outcome: &CommitOutcome) {
        self.sim.with_world(|w| {
            let mut s = w.stats.borrow_mut();
            match outcome {
                CommitOutcome::Committed(_) => s.committed += 1,
                CommitOutcome::Aborted(_) => s.aborted += 1,
            }
        });
    }

    async fn backoff(&self, attempt: u32) {
        let policy = self.cfg().retry;
        let t = backoff_ticks(&policy, attempt, |n| self.sim.rand_below(n));
        self.sim.sleep(t).await;
    }

    fn internal_txid(&self) -> Result<TxId, Crashed> {
        self.with(|n| {
            let seq = n.txns.assign_tx_seq();
            TxId { client: internal_client(n.id), seq, tx_seq: seq }
        })
    }
}

impl Participants for Ctx {
    fn me(&self) -> NodeId {
        self.me
    }

    fn prepare_local(&self, txid: TxId, attempt: u32, participants: &[NodeId], intents: &[Intent]) -> Result<Vote, Crashed> {
        self.with(|n| n.prepare(txid, attempt, self.me, participants, intents))?
    }

    fn one_phase(&self, txid: TxId, attempt: u32, intents: &[Intent], reply: &TxReply) -> Result<Vote, Crashed> {
        let v = self.with(|n| n.one_phase(txid, attempt, intents, reply))??;
        if matches!(v, Vote::Yes(_)) {
            self.sim.with_world(|w| w.stats.borrow_mut().one_phase += 1);
        }
        Ok(v)
    }

    async fn prepare_remote(&self, node: NodeId, txid: TxId, attempt: u32, participants: &[NodeId], intents: Vec<Intent>) -> Vote {
        let Ok(ver) = self.with(|n| n.list.version) else { return Vote::No(Refusal::Timeout) };
        let req = Req::Prepare { ver, txid, attempt, coordinator: self.me, participants: participants.to_vec(), intents };
        match self.call(node, req).await {
            Some(Resp::Vote(v)) => v,
            Some(Resp::Stale(l)) => Vote::No(Refusal::Stale(l)),
            Some(Resp::Busy) => Vote::No(Refusal::Busy),
            Some(Resp::Err(e)) => Vote::No(Refusal::Error(e)),
            _ => Vote::No(Refusal::Timeout),
        }
    }

    fn log_outcome(&self, txid: TxId, attempt: u32, commit: bool, mark: OutcomeMark) -> Result<(), Crashed> {
        self.with(|n| n.log_outcome(txid, attempt, commit, mark))?
    }

    fn decide_local(&self, txid: TxId, attempt: u32, commit: bool) -> Result<(), Crashed> {
        self.with(|n| n.decide(txid, attempt, commit))?
    }

    async fn decide_remote(&self, node: NodeId, txid: TxId, attempt: u32, commit: bool) -> Result<(), Crashed> {
        let req = Req::Decide { txid, attempt, commit, membership: self.membership };
        loop {
            if let Some(Resp::Ack) = self.call(node, req.clone()).await {
                return Ok(());
            }
            // A decommissioned node will never answer; its share is gone.
            if self.sim.with_world(|w| w.is_retired(node)) {
                return Ok(());
            }
            self.with(|_| ())?;
            self.sim.note_retry(format_args!("decide {txid} n{node}"));
            self.sim.sleep(self.timeout()).await;
        }
    }

    async fn sleep(&self, ticks: Tick) {
        self.sim.sleep(ticks).await;
    }

    fn draw(&self, bound: u64) -> u64 {
        self.sim.rand_below(bound)
    }

    fn note_retry(&self, txid: TxId) {
        self.sim.note_retry(format_args!("tx {txid}"));
    }
}

/// Coordinates a client transaction and answers everyone waiting on it.
pub(crate) async fn run_transact(ctx: Ctx, txid: TxId, plan: BTreeMap<NodeId, Vec<Intent>>, reply: TxReply) {
    let policy = ctx.cfg().retry;
    let Ok(outcome) = coordinate(&ctx, txid, &plan, reply, &policy).await else { return };
    ctx.count(&outcome);
    ctx.reply_waiters((txid.client, txid.seq), Resp::Outcome(outcome));
}

/// One attempt of a persist. Large files run the multipart protocol with
/// the chunk owners as participants.
async fn persist_attempt(ctx: &Ctx, txid: TxId, attempt: u32, inode: InodeId) -> Result<Result<TxReply, Refusal>, Crashed> {
    let start = ctx.with(|n| n.persist_start(txid, attempt, inode))??;
    let (key, upload, old, plan) = match start {
        PersistStart::Finished(r) => return Ok(r),
        PersistStart::Multipart { key, upload, old, plan } => (key, upload, old, plan),
    };
    let me = ctx.me;
    let participants: Vec<NodeId> = plan.keys().copied().collect();
    let size = plan[&me]
        .iter()
        .find_map(|i| match i {
            Intent::PersistMeta { size, .. } => Some(*size),
            _ => None,
        })
        .unwrap_or(0);
    let mut parts = Vec::new();
    let refusal = match ctx.prepare_local(txid, attempt, &participants, &plan[&me])? {
        Vote::No(r) => {
            ctx.with(|n| n.abort_upload(upload))?;
            ctx.log_outcome(txid, attempt, false, OutcomeMark::Decision { participants: Vec::new(), reply: TxReply::Done })?;
            finish(ctx, txid, attempt, &[], false).await?;
            return Ok(Err(r));
        }
        Vote::Yes(info) => {
            parts.extend(info.parts);
            let votes = prepare_remotes(ctx, txid, attempt, &participants, &plan).await;
            for (_, v) in &votes {
                if let Vote::Yes(info) = v {
                    parts.extend(info.parts.iter().cloned());
                }
            }
            worst_refusal(votes.iter().map(|(_, v)| v))
        }
    };
    let refusal = match refusal {
        Some(r) => Some(r),
        None => {
            parts.sort_by_key(|p| p.number);
            let tags: Vec<(u32, String)> = parts.into_iter().map(|p| (p.number, p.tag)).collect();
            ctx.with(|n| n.commit_upload(upload, &tags))?.err().map(Refusal::Error)
        }
    };
    if let Some(r) = refusal {
        ctx.with(|n| n.abort_upload(upload))?;
        let mark = OutcomeMark::Decision { participants: participants.clone(), reply: TxReply::Done };
        ctx.log_outcome(txid, attempt, false, mark)?;
        finish(ctx, txid, attempt, &participants, false).await?;
        return Ok(Err(r));
    }
    let rec = PersistedInode { txid, attempt, inode, key, size, participants: participants.clone(), kind: PersistKind::Multipart };
    ctx.with(|n| n.append(Command::PersistedInodeRecord(rec)))??;
    finish(ctx, txid, attempt, &participants, true).await?;
    ctx.with(|n| n.delete_old(old))?;
    Ok(Ok(TxReply::Persisted(PersistKind::Multipart)))
}

/// Persists `inode` under `txid`, retrying conflicts with backoff.
pub(crate) async fn run_persist(ctx: &Ctx, txid: TxId, inode: InodeId) -> Result<CommitOutcome, Crashed> {
    let policy = ctx.cfg().retry;
    let mut attempt = 0;
    loop {
        let refusal = match persist_attempt(ctx, txid, attempt, inode).await? {
            Ok(reply) => {
                let outcome = CommitOutcome::Committed(reply);
                ctx.count(&outcome);
                return Ok(outcome);
            }
            Err(r) => r,
        };
        if !retryable(&refusal) || attempt + 1 >= policy.max_attempts {
            let outcome = CommitOutcome::Aborted(refusal);
            ctx.count(&outcome);
            return Ok(outcome);
        }
        ctx.sim.with_world(|w| w.stats.borrow_mut().retried += 1);
        Participants::note_retry(ctx, txid);
        ctx.backoff(attempt).await;
        attempt += 1;
    }
}

pub(crate) async fn serve_persist(ctx: Ctx, txid: TxId, inode: InodeId) {
    let Ok(outcome) = run_persist(&ctx, txid, inode).await else { return };
    ctx.reply_waiters((txid.client, txid.seq), Resp::Outcome(outcome));
}

/// Background flush of one expired inode.
pub(crate) async fn flush_one(ctx: Ctx, inode: InodeId) {
    let Ok(txid) = ctx.internal_txid() else { return };
    let _ = run_persist(&ctx, txid, inode).await;
    let _ = ctx.with(|n| n.persisting.remove(&inode));
}

/// Finishes every coordinated transaction left open by a crash. Without a
/// durable decision the transaction is aborted.
pub(crate) async fn resume(ctx: Ctx) {
    let Ok(open) = ctx.with(|n| n.txns.coordinated().filter(|c| !c.complete).cloned().collect::<Vec<_>>()) else {
        return;
    };
    for c in open {
        let mut c_ctx = ctx.clone();
        c_ctx.membership = c.txid.client == MEMBERSHIP_CLIENT;
        let commit = match c.decision {
            Some(d) => d,
            None => {
                let r = ctx.with(|n| {
                    if let Some((_, upload)) = &c.upload {
                        n.abort_upload(*upload);
                    }
                    let mark = OutcomeMark::Decision { participants: c.participants.clone(), reply: TxReply::Done };
                    n.log_outcome(c.txid, c.attempt, false, mark)
                });
                if !matches!(r, Ok(Ok(()))) {
                    return;
                }
                false
            }
        };
        if finish(&c_ctx, c.txid, c.attempt, &c.participants, commit).await.is_err() {
            return;
        }
        let outcome = if commit { CommitOutcome::Committed(c.reply.clone()) } else { CommitOutcome::Aborted(Refusal::Aborted) };
        ctx.reply_waiters((c.txid.client, c.txid.seq), Resp::Outcome(outcome));
    }
}

/// Pushes this node's share of the migration for `new` to its new owners.
pub(crate) async fn migrate_out(ctx: &Ctx, new: &NodeList) -> Result<bool, Crashed> {
    let Ok(batches) = ctx.with(|n| n.build_migration(new))? else { return Ok(false) };
    let retries = ctx.cfg().rpc_retries;
    let calls = batches.into_iter().map(|(to, req)| async move {
        for _ in 0..retries {
            if let Some(Resp::Ack) = ctx.call(to, req.clone()).await {
                return true;
            }
        }
        false
    });
    Ok(join_all(calls).await.into_iter().all(|ok| ok))
}

/// Runs a membership change on the membership coordinator. Participants
/// are the old members plus the node being added or removed.
pub(crate) async fn run_membership(ctx: Ctx, change: MembershipChange) -> Result<Resp, Crashed> {
    let ctx = Ctx { membership: true, ..ctx };
    let me = ctx.me;
    let policy = ctx.cfg().retry;
    let seq = ctx.with(|n| n.txns.assign_tx_seq())?;
    // Every member takes part in every membership change, so the id must
    // not collide with one coordinated elsewhere.
    let txid = TxId { client: MEMBERSHIP_CLIENT, seq: (u64::from(me) << 40) | seq, tx_seq: seq };
    let mut attempt = 0u32;
    loop {
        let list = ctx.with(|n| n.list.clone())?;
        let (new, subject) = match change {
            MembershipChange::Add(x) if list.contains(x) => return Ok(Resp::List(list)),
            MembershipChange::Add(x) => (list.with_member(x), x),
            MembershipChange::Remove(x) if !list.contains(x) => return Ok(Resp::List(list)),
            MembershipChange::Remove(x) => (list.without_member(x), x),
        };
        if membership_owner(&list.ring()) != Some(me) {
            return Ok(Resp::Stale(list));
        }
        let mut participants = list.ids();
        participants.push(subject);
        participants.sort_unstable();
        participants.dedup();
        let intents = vec![Intent::NodeList { list: new.clone() }];
        let plan: BTreeMap<NodeId, Vec<Intent>> = participants.iter().map(|p| (*p, intents.clone())).collect();
        let refusal = match ctx.prepare_local(txid, attempt, &participants, &intents)? {
            Vote::No(r) => r,
            Vote::Yes(_) => {
                let pushed = migrate_out(&ctx, &new).await?;
                let refusal = if pushed {
                    let votes = prepare_remotes(&ctx, txid, attempt, &participants, &plan).await;
                    worst_refusal(votes.iter().map(|(_, v)| v))
                } else {
                    Some(Refusal::Timeout)
                };
                let commit = refusal.is_none();
                let mark = OutcomeMark::Decision { participants: participants.clone(), reply: TxReply::Done };
                ctx.log_outcome(txid, attempt, commit, mark)?;
                finish(&ctx, txid, attempt, &participants, commit).await?;
                match refusal {
                    None => {
                        ctx.sim.with_world(|w| w.stats.borrow_mut().membership_txs += 1);
                        return Ok(Resp::List(new));
                    }
                    Some(r) => r,
                }
            }
        };
        if let Refusal::Stale(l) = &refusal {
            return Ok(Resp::Stale(l.clone()));
        }
        if let Refusal::Error(e) = &refusal {
            return Ok(Resp::Err(e.clone()));
        }
        Participants::note_retry(&ctx, txid);
        ctx.backoff(attempt.min(policy.max_attempts)).await;
        attempt += 1;
    }
}

/// Asks the membership coordinator to apply `change`, following list
/// updates until it is in effect.
pub(crate) async fn request_membership(ctx: Ctx, change: MembershipChange) -> Result<Resp, Crashed> {
    let mut attempt = 0;
    loop {
        let list = ctx.with(|n| n.list.clone())?;
        let Some(coord) = membership_owner(&list.ring()) else {
            return Ok(Resp::Err(crate::FsError::Protocol("no members".into())));
        };
        let resp = if coord == ctx.me {
            Some(run_membership(ctx.clone(), change).await?)
        } else {
            ctx.call(coord, Req::Membership { change }).await
        };
        match resp {
            Some(Resp::List(l)) => return Ok(Resp::List(l)),
            Some(Resp::Err(e)) => return Ok(Resp::Err(e)),
            Some(Resp::Stale(l)) if l.version > list.version => {
                // Members learn new lists through commits; a stale reply from
                // the coordinator only means this node is behind.
                let _ = l;
            }
            _ => {}
        }
        ctx.sim.note_retry(format_args!("membership n{} {change:?}", ctx.me));
        ctx.backoff(attempt).await;
        attempt = (attempt + 1).min(8);
    }
}

/// Drains the node: persists everything dirty it holds, waits for its
/// transactions to finish, then removes it from the list.
pub(crate) async fn run_leave(ctx: Ctx) -> Result<(), Crashed> {
    ctx.with(|n| n.leaving = true)?;
    loop {
        let (metas, remote, busy) = ctx.with(|n| {
            let (m, r) = n.dirty_work();
            (m, r, n.txns.locks_held() > 0 || !n.inflight.is_empty() || !n.persisting.is_empty())
        })?;
        if metas.is_empty() && remote.is_empty() && !busy {
            break;
        }
        for inode in metas {
            let txid = ctx.internal_txid()?;
            run_persist(&ctx, txid, inode).await?;
        }
        for (owner, inode) in remote {
            let (ver, txid) = (ctx.with(|n| n.list.version)?, ctx.internal_txid()?);
            let req = Req::Persist { ver, client: txid.client, seq: txid.seq, inode };
            let _ = ctx.call(owner, req).await;
        }
        ctx.sim.note_retry(format_args!("leave n{}", ctx.me));
        ctx.sim.sleep(ctx.timeout()).await;
    }
    let list = ctx.with(|n| n.list.clone())?;
    if list.ids() == [ctx.me] {
        return Ok(());
    }
    request_membership(ctx.clone(), MembershipChange::Remove(ctx.me)).await?;
    Ok(())
}

pub(crate) async fn serve_leave(ctx: Ctx) {
    if run_leave(ctx.clone()).await.is_err() {
        return;
    }
    let Ok(waiters) = ctx.with(|n| std::mem::take(&mut n.leave_waiters)) else { return };
    for t in waiters {
        ctx.sim.reply(t, Resp::Ack);
    }
    ctx.sim.with_world(|w| w.retire(ctx.me));
    ctx.sim.faults().borrow_mut().request_crash(ctx.me);
}

/// Runs the participant side of a membership prepare: log the prepare,
/// push data that moves away, then vote.
pub(crate) async fn serve_ring_check(ctx: Ctx, key: (TxId, u32), new: NodeList) {
    let Ok(ok) = migrate_out(&ctx, &new).await else { return };
    let Ok(waiters) = ctx.with(|n| {
        if ok {
            n.pushed.insert(key);
        }
        n.preparing.remove(&key).unwrap_or_default()
    }) else {
        return;
    };
    let vote = if ok {
        ctx.with(|n| n.txns.check_prepare(key.0, key.1)).ok().and_then(|c| match c {
            crate::txn::PrepareCheck::Cached(v) => Some(v),
            _ => None,
        })
    } else {
        None
    };
    let vote = vote.unwrap_or(Vote::No(Refusal::Timeout));
    for t in waiters {
        ctx.sim.reply(t, Resp::Vote(vote.clone()));
    }
}

pub(crate) async fn serve_join(ctx: Ctx, node: NodeId, token: crate::simnet::ReplyToken) {
    if let Ok(resp) = request_membership(ctx.clone(), MembershipChange::Add(node)).await {
        ctx.sim.reply(token, resp);
    }
}

pub(crate) async fn serve_membership(ctx: Ctx, change: MembershipChange, token: crate::simnet::ReplyToken) {
    if let Ok(resp) = run_membership(ctx.clone(), change).await {
        ctx.sim.reply(token, resp);
    }
}
