use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use super::Endpoint;
use crate::{NodeId, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultTarget {
    Any,
    /// Matches messages sent or received by the node, and its durable writes.
    Node(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Matcher {
    AnyMessage,
    /// Messages whose kind equals the string.
    Message(String),
    DurableWrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultAction {
    Drop,
    Duplicate,
    Delay(Tick),
    /// Kill the node before the write lands (or before the message leaves).
    CrashBefore,
    /// Kill the node right after the write lands (or the message leaves).
    CrashAfter,
}

/// Fires on the `ordinal`-th (1-based) occurrence matching `target` and
/// `matcher`, or on every occurrence when `ordinal` is `None`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultRule {
    pub target: FaultTarget,
    pub matcher: Matcher,
    pub ordinal: Option<u64>,
    pub action: FaultAction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub rules: Vec<FaultRule>,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn with(mut self, rule: FaultRule) -> Self {
        self.rules.push(rule);
        self
    }
}

/// What a durable write should do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteVerdict {
    Proceed,
    CrashBefore,
    CrashAfter,
}

/// Fault plan plus the crash bookkeeping shared by the executor and the
/// simulated disks.
#[derive(Debug, Default)]
pub struct FaultState {
    plan: FaultPlan,
    hits: Vec<u64>,
    crashing: BTreeSet<NodeId>,
    pending: Vec<NodeId>,
    /// Durable writes and messages seen since the plan was installed.
    pub durable_writes: u64,
    pub messages: u64,
    /// Every durable write since the plan was installed, in order: the node
    /// and whether it went to the primary log.
    pub journal: Vec<(NodeId, bool)>,
    /// Nodes taken down since the plan was installed.
    pub crashes: u64,
}

pub type Faults = Rc<RefCell<FaultState>>;

fn endpoint_is(e: Endpoint, node: NodeId) -> bool {
    e == Endpoint::Node(node)
}

impl FaultState {
    pub fn install(&mut self, plan: FaultPlan) {
        self.hits = vec![0; plan.rules.len()];
        self.plan = plan;
        self.durable_writes = 0;
        self.messages = 0;
        self.journal.clear();
        self.crashes = 0;
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    fn fire(&mut self, mut matches: impl FnMut(&FaultRule) -> bool) -> Vec<FaultAction> {
        let mut out = Vec::new();
        for (i, rule) in self.plan.rules.iter().enumerate() {
            if !matches(rule) {
                continue;
            }
            self.hits[i] += 1;
            if rule.ordinal.is_none_or(|o| o == self.hits[i]) {
                out.push(rule.action);
            }
        }
        out
    }

    pub fn on_message(&mut self, from: Endpoint, to: Endpoint, kind: &str) -> Vec<FaultAction> {
        self.messages += 1;
        self.fire(|r| {
            let target = match r.target {
                FaultTarget::Any => true,
                FaultTarget::Node(n) => endpoint_is(from, n) || endpoint_is(to, n),
            };
            target
                && match &r.matcher {
                    Matcher::AnyMessage => true,
                    Matcher::Message(k) => k == kind,
                    Matcher::DurableWrite => false,
                }
        })
    }

    pub fn on_durable_write(&mut self, node: NodeId, primary: bool) -> WriteVerdict {
        if self.crashing.contains(&node) {
            return WriteVerdict::CrashBefore;
        }
        self.durable_writes += 1;
        self.journal.push((node, primary));
        let actions = self.fire(|r| {
            matches!(r.matcher, Matcher::DurableWrite)
                && match r.target {
                    FaultTarget::Any => true,
                    FaultTarget::Node(n) => n == node,
                }
        });
        let verdict = if actions.contains(&FaultAction::CrashBefore) {
            WriteVerdict::CrashBefore
        } else if actions.contains(&FaultAction::CrashAfter) {
            WriteVerdict::CrashAfter
        } else {
            WriteVerdict::Proceed
        };
        if verdict != WriteVerdict::Proceed {
            self.request_crash(node);
        }
        verdict
    }

    /// Marks the node as dying: its further writes fail and its messages are
    /// suppressed until the executor takes it down.
    pub fn request_crash(&mut self, node: NodeId) {
        if self.crashing.insert(node) {
            self.pending.push(node);
        }
    }

    pub fn is_crashing(&self, node: NodeId) -> bool {
        self.crashing.contains(&node)
    }

    pub(crate) fn take_pending(&mut self) -> Vec<NodeId> {
        std::mem::take(&mut self.pending)
    }

    pub(crate) fn finish_crash(&mut self, node: NodeId, was_up: bool) {
        self.crashing.remove(&node);
        self.crashes += u64::from(was_up);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordinal_counts_only_matching_events() {
        let mut f = FaultState::default();
        f.install(FaultPlan::none().with(FaultRule {
            target: FaultTarget::Node(2),
            matcher: Matcher::DurableWrite,
            ordinal: Some(2),
            action: FaultAction::CrashAfter,
        }));
        assert_eq!(f.on_durable_write(1, true), WriteVerdict::Proceed);
        assert_eq!(f.on_durable_write(2, true), WriteVerdict::Proceed);
        assert_eq!(f.on_durable_write(2, true), WriteVerdict::CrashAfter);
        assert!(f.is_crashing(2));
        assert_eq!(f.on_durable_write(2, true), WriteVerdict::CrashBefore);
        assert_eq!(f.take_pending(), vec![2]);
    }

    #[test]
    fn message_rules() {
        let mut f = FaultState::default();
        f.install(FaultPlan::none().with(FaultRule {
            target: FaultTarget::Any,
            matcher: Matcher::Message("Prepare".into()),
            ordinal: None,
            action: FaultAction::Duplicate,
        }));
        assert_eq!(f.on_message(Endpoint::Node(1), Endpoint::Node(2), "Prepare"), vec![FaultAction::Duplicate]);
        assert!(f.on_message(Endpoint::Node(1), Endpoint::Node(2), "Decide").is_empty());
        assert_eq!(f.messages, 2);
    }
}
