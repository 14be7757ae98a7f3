use std::collections::BTreeMap;

use futures::future::join_all;

use super::{CommitOutcome, Intent, OutcomeMark, Refusal, TxId, TxReply, Vote};
use crate::{Crashed, NodeId, Tick};

/// Backoff for coordinator retries after conflicting votes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base: Tick,
    pub backoff_cap: Tick,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 16, backoff_base: 2, backoff_cap: 256 }
    }
}

/// Full-jitter exponential backoff: uniform in `[0, min(cap, base * 2^attempt)]`.
/// `draw(n)` must return a value in `[0, n)`.
pub fn backoff_ticks(policy: &RetryPolicy, attempt: u32, draw: impl FnOnce(u64) -> u64) -> Tick {
    let ceiling = policy.backoff_base.saturating_mul(1u64 << attempt.min(32)).min(policy.backoff_cap);
    draw(ceiling + 1)
}

/// Transport and local effects used by [`coordinate`].
#[allow(async_fn_in_trait)]
pub trait Participants {
    fn me(&self) -> NodeId;
    /// Evaluates the coordinator's own intents and logs its prepare record.
    fn prepare_local(&self, txid: TxId, attempt: u32, participants: &[NodeId], intents: &[Intent]) -> Result<Vote, Crashed>;
    /// Evaluates and applies intents in a single commit record.
    fn one_phase(&self, txid: TxId, attempt: u32, intents: &[Intent], reply: &TxReply) -> Result<Vote, Crashed>;
    /// Sends a prepare; a lost exchange yields `No(Timeout)`.
    async fn prepare_remote(&self, node: NodeId, txid: TxId, attempt: u32, participants: &[NodeId], intents: Vec<Intent>) -> Vote;
    fn log_outcome(&self, txid: TxId, attempt: u32, commit: bool, mark: OutcomeMark) -> Result<(), Crashed>;
    fn decide_local(&self, txid: TxId, attempt: u32, commit: bool) -> Result<(), Crashed>;
    /// Delivers a decision, retrying until acknowledged.
    async fn decide_remote(&self, node: NodeId, txid: TxId, attempt: u32, commit: bool) -> Result<(), Crashed>;
    async fn sleep(&self, ticks: Tick);
    fn draw(&self, bound: u64) -> u64;
    fn note_retry(&self, txid: TxId);
}

fn severity(r: &Refusal) -> u8 {
    match r {
        Refusal::Error(_) => 5,
        Refusal::Stale(_) => 4,
        Refusal::Timeout => 3,
        Refusal::Busy => 2,
        Refusal::Conflict => 1,
        Refusal::Aborted => 0,
    }
}

/// The refusal reported for a set of votes: the most severe one.
pub fn worst_refusal<'a>(votes: impl IntoIterator<Item = &'a Vote>) -> Option<Refusal> {
    votes
        .into_iter()
        .filter_map(|v| match v {
            Vote::No(r) => Some(r),
            Vote::Yes(_) => None,
        })
        .max_by_key(|r| severity(r))
        .cloned()
}

fn retryable(r: &Refusal) -> bool {
    matches!(r, Refusal::Conflict | Refusal::Busy | Refusal::Aborted)
}

/// Prepares every remote participant concurrently.
pub async fn prepare_remotes<P: Participants>(
    p: &P,
    txid: TxId,
    attempt: u32,
    participants: &[NodeId],
    plan: &BTreeMap<NodeId, Vec<Intent>>,
) -> Vec<(NodeId, Vote)> {
    let me = p.me();
    let calls = plan.iter().filter(|(n, _)| **n != me).map(|(n, intents)| async move {
        (*n, p.prepare_remote(*n, txid, attempt, participants, intents.clone()).await)
    });
    join_all(calls).await
}

/// Second phase after the decision is durable: remote participants first,
/// then the local share, then the completion mark.
pub async fn finish<P: Participants>(
    p: &P,
    txid: TxId,
    attempt: u32,
    participants: &[NodeId],
    commit: bool,
) -> Result<(), Crashed> {
    let me = p.me();
    let acks = join_all(
        participants.iter().filter(|n| **n != me).map(|n| p.decide_remote(*n, txid, attempt, commit)),
    )
    .await;
    for a in acks {
        a?;
    }
    if participants.contains(&me) {
        p.decide_local(txid, attempt, commit)?;
    }
    p.log_outcome(txid, attempt, commit, OutcomeMark::Complete)
}

/// Runs a transaction whose coordinator is `p.me()`, which must appear in
/// `plan`. Conflicting votes are retried with backoff under the same `TxId`
/// and a new attempt number.
pub async fn coordinate<P: Participants>(
    p: &P,
    txid: TxId,
    plan: &BTreeMap<NodeId, Vec<Intent>>,
    reply: TxReply,
    policy: &RetryPolicy,
) -> Result<CommitOutcome, Crashed> {
    let me = p.me();
    let participants: Vec<NodeId> = plan.keys().copied().collect();
    debug_assert!(participants.contains(&me));
    let mut attempt = 0;
    loop {
        let refusal = if participants == [me] {
            match p.one_phase(txid, attempt, &plan[&me], &reply)? {
                Vote::Yes(_) => return Ok(CommitOutcome::Committed(reply)),
                Vote::No(r) => r,
            }
        } else {
            match p.prepare_local(txid, attempt, &participants, &plan[&me])? {
                Vote::No(r) => r,
                Vote::Yes(_) => {
                    let votes = prepare_remotes(p, txid, attempt, &participants, plan).await;
                    match worst_refusal(votes.iter().map(|(_, v)| v)) {
                        None => {
                            let mark = OutcomeMark::Decision { participants: participants.clone(), reply: reply.clone() };
                            p.log_outcome(txid, attempt, true, mark)?;
                            finish(p, txid, attempt, &participants, true).await?;
                            return Ok(CommitOutcome::Committed(reply));
                        }
                        Some(r) => {
                            let mark = OutcomeMark::Decision { participants: participants.clone(), reply: TxReply::Done };
                            p.log_outcome(txid, attempt, false, mark)?;
                            finish(p, txid, attempt, &participants, false).await?;
                            r
                        }
                    }
                }
            }
        };
        if !retryable(&refusal) || attempt + 1 >= policy.max_attempts {
            return Ok(CommitOutcome::Aborted(refusal));
        }
        p.note_retry(txid);
        p.sleep(backoff_ticks(policy, attempt, |n| p.draw(n))).await;
        attempt += 1;
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use super::*;
    use crate::error::FsError;
    use crate::txn::VoteInfo;

    /// Participants that answer from scripted votes and record every call.
    struct Mock {
        me: NodeId,
        votes: RefCell<BTreeMap<(NodeId, u32), Vote>>,
        log: RefCell<Vec<String>>,
    }

    impl Mock {
        fn new(me: NodeId) -> Self {
            Mock { me, votes: RefCell::new(BTreeMap::new()), log: RefCell::new(Vec::new()) }
        }
        fn vote(&self, node: NodeId, attempt: u32) -> Vote {
            self.votes.borrow().get(&(node, attempt)).cloned().unwrap_or(Vote::Yes(VoteInfo::default()))
        }
        fn push(&self, s: String) {
            self.log.borrow_mut().push(s);
        }
    }

    impl Participants for Mock {
        fn me(&self) -> NodeId {
            self.me
        }
        fn prepare_local(&self, _: TxId, attempt: u32, _: &[NodeId], _: &[Intent]) -> Result<Vote, Crashed> {
            self.push(format!("prepare {} a{attempt}", self.me));
            Ok(self.vote(self.me, attempt))
        }
        fn one_phase(&self, _: TxId, attempt: u32, _: &[Intent], _: &TxReply) -> Result<Vote, Crashed> {
            self.push(format!("one-phase a{attempt}"));
            Ok(self.vote(self.me, attempt))
        }
        async fn prepare_remote(&self, node: NodeId, _: TxId, attempt: u32, _: &[NodeId], _: Vec<Intent>) -> Vote {
            self.push(format!("prepare {node} a{attempt}"));
            self.vote(node, attempt)
        }
        fn log_outcome(&self, _: TxId, attempt: u32, commit: bool, mark: OutcomeMark) -> Result<(), Crashed> {
            let what = match mark {
                OutcomeMark::Decision { .. } => "decision",
                OutcomeMark::Complete => "complete",
                _ => "other",
            };
            self.push(format!("log {what} {commit} a{attempt}"));
            Ok(())
        }
        fn decide_local(&self, _: TxId, _: u32, commit: bool) -> Result<(), Crashed> {
            self.push(format!("decide {} {commit}", self.me));
            Ok(())
        }
        async fn decide_remote(&self, node: NodeId, _: TxId, _: u32, commit: bool) -> Result<(), Crashed> {
            self.push(format!("decide {node} {commit}"));
            Ok(())
        }
        async fn sleep(&self, ticks: Tick) {
            self.push(format!("sleep {ticks}"));
        }
        fn draw(&self, bound: u64) -> u64 {
            bound - 1
        }
        fn note_retry(&self, _: TxId) {}
    }

    fn plan(nodes: &[NodeId]) -> BTreeMap<NodeId, Vec<Intent>> {
        nodes.iter().map(|n| (*n, Vec::new())).collect()
    }

    const T: TxId = TxId { client: 1, seq: 1, tx_seq: 1 };

    fn run(m: &Mock, nodes: &[NodeId]) -> CommitOutcome {
        futures::executor::block_on(coordinate(m, T, &plan(nodes), TxReply::Done, &RetryPolicy::default()))
            .unwrap()
    }

    #[test]
    fn all_yes_commits_with_decision_logged_before_fanout() {
        let m = Mock::new(1);
        assert_eq!(run(&m, &[1, 2]), CommitOutcome::Committed(TxReply::Done));
        assert_eq!(
            *m.log.borrow(),
            ["prepare 1 a0", "prepare 2 a0", "log decision true a0", "decide 2 true", "decide 1 true", "log complete true a0"]
        );
    }

    #[test]
    fn persistent_error_aborts_everyone() {
        let m = Mock::new(1);
        m.votes.borrow_mut().insert((2, 0), Vote::No(Refusal::Error(FsError::NotFound)));
        assert_eq!(run(&m, &[1, 2, 3]), CommitOutcome::Aborted(Refusal::Error(FsError::NotFound)));
        let log = m.log.borrow();
        assert!(log.contains(&"decide 3 false".to_string()));
        assert!(log.contains(&"decide 1 false".to_string()));
        assert!(!log.iter().any(|l| l.contains("true")));
    }

    #[test]
    fn conflict_retries_with_next_attempt() {
        let m = Mock::new(1);
        m.votes.borrow_mut().insert((2, 0), Vote::No(Refusal::Conflict));
        assert_eq!(run(&m, &[1, 2]), CommitOutcome::Committed(TxReply::Done));
        let log = m.log.borrow();
        assert!(log.contains(&"sleep 2".to_string()));
        assert!(log.contains(&"log decision true a1".to_string()));
    }

    #[test]
    fn local_refusal_sends_nothing_remote() {
        let m = Mock::new(1);
        for a in 0..16 {
            m.votes.borrow_mut().insert((1, a), Vote::No(Refusal::Conflict));
        }
        assert_eq!(run(&m, &[1, 2]), CommitOutcome::Aborted(Refusal::Conflict));
        assert!(!m.log.borrow().iter().any(|l| l.starts_with("prepare 2")));
    }

    #[test]
    fn single_participant_uses_one_phase() {
        let m = Mock::new(4);
        assert_eq!(run(&m, &[4]), CommitOutcome::Committed(TxReply::Done));
        assert_eq!(*m.log.borrow(), ["one-phase a0"]);
    }

    #[test]
    fn backoff_is_capped_full_jitter() {
        let p = RetryPolicy { max_attempts: 5, backoff_base: 2, backoff_cap: 20 };
        assert_eq!(backoff_ticks(&p, 0, |n| n - 1), 2);
        assert_eq!(backoff_ticks(&p, 3, |n| n - 1), 16);
        assert_eq!(backoff_ticks(&p, 9, |n| n - 1), 20);
        assert_eq!(backoff_ticks(&p, 9, |_| 0), 0);
    }
}
