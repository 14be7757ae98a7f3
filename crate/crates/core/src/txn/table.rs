use std::collections::{BTreeMap, VecDeque};

use super::{
    OutcomeMark, OutcomeRecord, PrepareRecord, Refusal, ResourceId, TxId, TxReply, TxState, Vote,
};
use crate::raftlog::Command;
use crate::store::ExtKey;
use crate::{ClientId, NodeId};

/// Completed transactions remembered per client for duplicate detection.
pub const DEDUP_WINDOW: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantTx {
    pub record: PrepareRecord,
    pub state: TxState,
}

/// What a coordinator knows about a request it runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoordState {
    pub txid: TxId,
    pub attempt: u32,
    pub participants: Vec<NodeId>,
    /// `Some(true)` for commit.
    pub decision: Option<bool>,
    pub complete: bool,
    pub reply: TxReply,
    pub upload: Option<(ExtKey, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PrepareCheck {
    Fresh,
    Cached(Vote),
}

/// Transaction state of one node, rebuilt from its log.
#[derive(Clone, Debug, Default)]
pub struct TxTable {
    node: NodeId,
    participant: BTreeMap<TxId, ParticipantTx>,
    /// Aborts received for transactions never prepared here. Volatile.
    tombstones: BTreeMap<TxId, u32>,
    locks: BTreeMap<ResourceId, TxId>,
    coord: BTreeMap<(ClientId, u64), CoordState>,
    window: BTreeMap<ClientId, VecDeque<TxId>>,
    next_tx_seq: u64,
}

impl TxTable {
    pub fn new(node: NodeId) -> Self {
        TxTable { node, next_tx_seq: 1, ..Default::default() }
    }

    pub fn assign_tx_seq(&mut self) -> u64 {
        let s = self.next_tx_seq;
        self.next_tx_seq += 1;
        s
    }

    pub fn lock_holder(&self, r: &ResourceId) -> Option<TxId> {
        self.locks.get(r).copied()
    }

    pub fn locks(&self) -> impl Iterator<Item = (&ResourceId, &TxId)> {
        self.locks.iter()
    }

    pub fn locks_held(&self) -> usize {
        self.locks.len()
    }

    /// True when any resource is locked by a transaction other than `txid`.
    pub fn conflicts(&self, txid: TxId, resources: &[ResourceId]) -> bool {
        resources.iter().any(|r| self.locks.get(r).is_some_and(|h| *h != txid))
    }

    pub fn participant(&self, txid: &TxId) -> Option<&ParticipantTx> {
        self.participant.get(txid)
    }

    pub fn prepared(&self) -> impl Iterator<Item = &PrepareRecord> {
        self.participant
            .values()
            .filter(|p| p.state == TxState::Prepared)
            .map(|p| &p.record)
    }

    pub fn coordinator_entry(&self, client: ClientId, seq: u64) -> Option<&CoordState> {
        self.coord.get(&(client, seq))
    }

    pub fn coordinated(&self) -> impl Iterator<Item = &CoordState> {
        self.coord.values()
    }

    pub fn check_prepare(&self, txid: TxId, attempt: u32) -> PrepareCheck {
        if let Some(p) = self.participant.get(&txid) {
            use std::cmp::Ordering::*;
            return match p.record.attempt.cmp(&attempt) {
                Equal => match p.state {
                    TxState::Aborted => PrepareCheck::Cached(Vote::No(Refusal::Aborted)),
                    _ => PrepareCheck::Cached(Vote::Yes(p.record.vote.clone())),
                },
                Greater => PrepareCheck::Cached(Vote::No(Refusal::Aborted)),
                Less if p.state == TxState::Prepared => PrepareCheck::Cached(Vote::No(Refusal::Conflict)),
                Less => PrepareCheck::Fresh,
            };
        }
        match self.tombstones.get(&txid) {
            Some(a) if *a >= attempt => PrepareCheck::Cached(Vote::No(Refusal::Aborted)),
            _ => PrepareCheck::Fresh,
        }
    }

    /// Records an abort for an attempt this node never prepared.
    pub fn note_unknown_abort(&mut self, txid: TxId, attempt: u32) {
        let a = self.tombstones.entry(txid).or_insert(attempt);
        *a = (*a).max(attempt);
    }

    fn release(&mut self, txid: TxId, resources: &[ResourceId]) {
        for r in resources {
            if self.locks.get(r) == Some(&txid) {
                self.locks.remove(r);
            }
        }
    }

    fn remember(&mut self, txid: TxId) {
        let w = self.window.entry(txid.client).or_default();
        if w.contains(&txid) {
            return;
        }
        w.push_back(txid);
        while w.len() > DEDUP_WINDOW {
            let old = w.pop_front().unwrap();
            if self.participant.get(&old).is_some_and(|p| p.state.is_terminal()) {
                self.participant.remove(&old);
            }
            if self.coord.get(&(old.client, old.seq)).is_some_and(|c| c.complete) {
                self.coord.remove(&(old.client, old.seq));
            }
        }
    }

    fn coord_entry(&mut self, txid: TxId, attempt: u32) -> &mut CoordState {
        let e = self.coord.entry((txid.client, txid.seq)).or_insert_with(|| CoordState {
            txid,
            attempt,
            participants: Vec::new(),
            decision: None,
            complete: false,
            reply: TxReply::Done,
            upload: None,
        });
        if attempt > e.attempt {
            e.attempt = attempt;
            e.decision = None;
            e.complete = false;
            e.upload = None;
        }
        e
    }

    /// Applies a transaction record and returns the data-plane commands that
    /// became effective.
    pub fn apply(&mut self, cmd: &Command) -> Vec<Command> {
        match cmd {
            Command::TxPrepareMeta(rec) | Command::TxPrepareChunk(rec) => {
                for r in &rec.resources {
                    self.locks.insert(*r, rec.txid);
                }
                if rec.coordinator == self.node {
                    self.next_tx_seq = self.next_tx_seq.max(rec.txid.tx_seq + 1);
                    let e = self.coord_entry(rec.txid, rec.attempt);
                    e.participants = rec.participants.clone();
                }
                self.tombstones.remove(&rec.txid);
                self.participant
                    .insert(rec.txid, ParticipantTx { record: rec.clone(), state: TxState::Prepared });
                Vec::new()
            }
            Command::TxCommit(o) => self.apply_outcome(o, true),
            Command::TxAbort(o) => self.apply_outcome(o, false),
            Command::MpuBeginRecord(m) => {
                self.next_tx_seq = self.next_tx_seq.max(m.txid.tx_seq + 1);
                self.coord_entry(m.txid, m.attempt).upload = Some((m.key.clone(), m.upload_id));
                Vec::new()
            }
            Command::PersistedInodeRecord(p) => {
                let e = self.coord_entry(p.txid, p.attempt);
                e.decision = Some(true);
                e.participants = p.participants.clone();
                e.reply = TxReply::Persisted(p.kind);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn apply_outcome(&mut self, o: &OutcomeRecord, commit: bool) -> Vec<Command> {
        let state = if commit { TxState::Committed } else { TxState::Aborted };
        match &o.mark {
            OutcomeMark::Participant => {
                let Some(p) = self.participant.get_mut(&o.txid) else {
                    return Vec::new();
                };
                if p.record.attempt != o.attempt || p.state != TxState::Prepared {
                    return Vec::new();
                }
                p.state = state;
                let resources = p.record.resources.clone();
                let updates = if commit { p.record.updates.clone() } else { Vec::new() };
                self.release(o.txid, &resources);
                self.remember(o.txid);
                updates
            }
            OutcomeMark::Decision { participants, reply } => {
                self.next_tx_seq = self.next_tx_seq.max(o.txid.tx_seq + 1);
                let e = self.coord_entry(o.txid, o.attempt);
                e.decision = Some(commit);
                e.participants = participants.clone();
                e.reply = reply.clone();
                Vec::new()
            }
            OutcomeMark::Complete => {
                let e = self.coord_entry(o.txid, o.attempt);
                e.complete = true;
                e.decision.get_or_insert(commit);
                self.remember(o.txid);
                Vec::new()
            }
            OutcomeMark::OnePhase { resources, updates, reply } => {
                self.next_tx_seq = self.next_tx_seq.max(o.txid.tx_seq + 1);
                let me = self.node;
                let e = self.coord_entry(o.txid, o.attempt);
                e.participants = vec![me];
                e.decision = Some(commit);
                e.complete = true;
                e.reply = reply.clone();
                self.participant.insert(
                    o.txid,
                    ParticipantTx {
                        record: PrepareRecord {
                            txid: o.txid,
                            attempt: o.attempt,
                            coordinator: self.node,
                            participants: vec![self.node],
                            resources: resources.clone(),
                            updates: Vec::new(),
                            vote: Default::default(),
                        },
                        state,
                    },
                );
                self.remember(o.txid);
                if commit { updates.clone() } else { Vec::new() }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{InodeKind, InodeMeta};
    use crate::txn::VoteInfo;

    fn txid(seq: u64) -> TxId {
        TxId { client: 7, seq, tx_seq: seq }
    }

    fn prepare(t: TxId, coordinator: NodeId, res: Vec<ResourceId>) -> Command {
        Command::TxPrepareMeta(PrepareRecord {
            txid: t,
            attempt: 0,
            coordinator,
            participants: vec![1, 2],
            resources: res,
            updates: vec![Command::UpdateMeta(InodeMeta::new(5, InodeKind::File, None, 0))],
            vote: VoteInfo::default(),
        })
    }

    fn outcome(t: TxId, commit: bool) -> Command {
        let o = OutcomeRecord { txid: t, attempt: 0, mark: OutcomeMark::Participant };
        if commit { Command::TxCommit(o) } else { Command::TxAbort(o) }
    }

    #[test]
    fn prepare_locks_and_commit_releases() {
        let mut tt = TxTable::new(2);
        let r = ResourceId::Meta(5);
        assert_eq!(tt.check_prepare(txid(1), 0), PrepareCheck::Fresh);
        tt.apply(&prepare(txid(1), 1, vec![r]));
        assert!(tt.conflicts(txid(2), &[r]));
        assert!(!tt.conflicts(txid(1), &[r]));
        let updates = tt.apply(&outcome(txid(1), true));
        assert_eq!(updates.len(), 1);
        assert_eq!(tt.locks_held(), 0);
        // Duplicate commit applies nothing.
        assert!(tt.apply(&outcome(txid(1), true)).is_empty());
    }

    #[test]
    fn abort_releases_without_updates() {
        let mut tt = TxTable::new(2);
        tt.apply(&prepare(txid(1), 1, vec![ResourceId::Chunk(5, 64)]));
        assert!(tt.apply(&outcome(txid(1), false)).is_empty());
        assert_eq!(tt.locks_held(), 0);
        assert_eq!(tt.check_prepare(txid(1), 0), PrepareCheck::Cached(Vote::No(Refusal::Aborted)));
        assert_eq!(tt.check_prepare(txid(1), 1), PrepareCheck::Fresh);
    }

    #[test]
    fn duplicate_prepare_returns_cached_vote() {
        let mut tt = TxTable::new(2);
        tt.apply(&prepare(txid(1), 1, vec![]));
        assert!(matches!(tt.check_prepare(txid(1), 0), PrepareCheck::Cached(Vote::Yes(_))));
    }

    #[test]
    fn unknown_abort_leaves_tombstone() {
        let mut tt = TxTable::new(2);
        tt.note_unknown_abort(txid(3), 0);
        assert_eq!(tt.check_prepare(txid(3), 0), PrepareCheck::Cached(Vote::No(Refusal::Aborted)));
        assert_eq!(tt.locks_held(), 0);
    }

    #[test]
    fn coordinator_entries_follow_records() {
        let mut tt = TxTable::new(1);
        tt.apply(&prepare(txid(4), 1, vec![]));
        assert_eq!(tt.assign_tx_seq(), 5);
        let e = tt.coordinator_entry(7, 4).unwrap();
        assert_eq!(e.decision, None);
        tt.apply(&Command::TxCommit(OutcomeRecord {
            txid: txid(4),
            attempt: 0,
            mark: OutcomeMark::Decision { participants: vec![1, 2], reply: TxReply::Created(9) },
        }));
        let e = tt.coordinator_entry(7, 4).unwrap();
        assert_eq!((e.decision, e.complete), (Some(true), false));
        tt.apply(&Command::TxCommit(OutcomeRecord { txid: txid(4), attempt: 0, mark: OutcomeMark::Complete }));
        assert!(tt.coordinator_entry(7, 4).unwrap().complete);
    }

    #[test]
    fn window_evicts_oldest_completed() {
        let mut tt = TxTable::new(2);
        for seq in 0..(DEDUP_WINDOW as u64 + 5) {
            tt.apply(&prepare(txid(seq), 1, vec![]));
            tt.apply(&outcome(txid(seq), true));
        }
        assert!(tt.participant(&txid(0)).is_none());
        assert!(tt.participant(&txid(5)).is_some());
    }
}
