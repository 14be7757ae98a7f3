//! Deterministic discrete-event simulation.
//!
//! A single-threaded executor drives async tasks against a logical clock.
//! Messages travel through an event queue ordered by `(tick, insertion)`,
//! so a seed and a scenario fully determine every delivery, timeout, crash
//! and restart. Node logic lives in a [`World`]; request handlers run to
//! completion at their delivery tick and may spawn tasks or defer replies.
//!
//! Crashes come from the [`FaultPlan`] (at durable writes or message sends)
//! or from explicit schedules. A crash drops the node's tasks and volatile
//! state through [`World::on_crash`]; a restart calls [`World::on_restart`],
//! which replays the node's log.

mod fault;

use std::cell::{RefCell, RefMut};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ring::fnv1a64;
use crate::{ClientId, NodeId, Tick};

pub use fault::{FaultAction, FaultPlan, FaultRule, FaultState, FaultTarget, Faults, Matcher, WriteVerdict};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Node(NodeId),
    Client(ClientId),
    Admin,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Node(n) => write!(f, "n{n}"),
            Endpoint::Client(c) => write!(f, "c{c}"),
            Endpoint::Admin => f.write_str("admin"),
        }
    }
}

pub trait Message: Clone + fmt::Debug + 'static {
    fn kind(&self) -> &'static str;
}

/// Handle for answering a request after its handler returned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplyToken {
    rpc: u64,
    caller: Endpoint,
    callee: NodeId,
}

impl ReplyToken {
    pub fn caller(&self) -> Endpoint {
        self.caller
    }
}

pub enum Handled<R> {
    Reply(R),
    /// The handler kept the token and will answer via [`Sim::reply`].
    Deferred,
    /// The node died while handling; nothing is sent.
    Crashed,
}

pub trait World: Sized + 'static {
    type Req: Message;
    type Resp: Message;

    fn handle(&mut self, sim: &Sim<Self>, to: NodeId, from: Endpoint, req: Self::Req, token: ReplyToken) -> Handled<Self::Resp>;
    fn is_up(&self, node: NodeId) -> bool;
    /// Drops all volatile state of the node.
    fn on_crash(&mut self, node: NodeId);
    /// Rebuilds the node from durable state.
    fn on_restart(&mut self, sim: &Sim<Self>, node: NodeId);
    fn on_periodic(&mut self, _sim: &Sim<Self>, _node: NodeId) {}
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    pub latency: Tick,
    /// Extra uniform delay in `[0, jitter]` per message.
    pub jitter: Tick,
    /// Restart crashed nodes after this many ticks.
    pub auto_restart: Option<Tick>,
    /// Retries of a single key before the run is declared livelocked.
    pub livelock_bound: u32,
    /// Keep one text line per event.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { seed: 0, latency: 1, jitter: 0, auto_restart: Some(10), livelock_bound: 2000, trace: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("livelock: {0} retried without progress")]
    Livelock(String),
    #[error("no runnable work left before the awaited task finished")]
    Stuck,
}

enum Event<W: World> {
    Deliver { rpc: u64, from: Endpoint, to: NodeId, req: W::Req },
    Respond { rpc: u64, from: NodeId, to: Endpoint, resp: W::Resp },
    Timeout { rpc: u64 },
    Wake { timer: u64 },
    Crash { node: NodeId },
    Restart { node: NodeId },
    Periodic { node: NodeId },
}

impl<W: World> Event<W> {
    fn is_background(&self) -> bool {
        matches!(self, Event::Periodic { .. })
    }
}

enum RpcState<R> {
    Pending,
    Done(R),
    TimedOut,
}

struct RpcSlot<R> {
    owner: Endpoint,
    state: RpcState<R>,
    waker: Option<Waker>,
}

struct TimerSlot {
    fired: bool,
    waker: Option<Waker>,
}

type BoxFuture = Pin<Box<dyn Future<Output = ()>>>;

struct Task {
    owner: Endpoint,
    fut: Option<BoxFuture>,
}

struct Core<W: World> {
    cfg: SimConfig,
    now: Tick,
    seq: u64,
    events: BTreeMap<(Tick, u64), Event<W>>,
    foreground: usize,
    tasks: BTreeMap<u64, Task>,
    next_task: u64,
    rpcs: BTreeMap<u64, RpcSlot<W::Resp>>,
    next_rpc: u64,
    timers: BTreeMap<u64, TimerSlot>,
    next_timer: u64,
    rng: ChaCha8Rng,
    cut: BTreeSet<(Endpoint, Endpoint)>,
    periodic: BTreeMap<NodeId, Tick>,
    retries: BTreeMap<String, u32>,
    livelock: Option<String>,
    trace: Vec<String>,
    trace_hash: u64,
    executed: u64,
}

impl<W: World> Core<W> {
    fn schedule(&mut self, at: Tick, ev: Event<W>) {
        if !ev.is_background() {
            self.foreground += 1;
        }
        self.seq += 1;
        self.events.insert((at, self.seq), ev);
    }

    fn latency(&mut self) -> Tick {
        let j = if self.cfg.jitter > 0 { self.rng.gen_range(0..=self.cfg.jitter) } else { 0 };
        self.cfg.latency + j
    }

    fn record(&mut self, line: impl FnOnce() -> String) {
        if self.cfg.trace {
            let l = line();
            self.trace_hash = fnv1a64(format!("{:016x}{l}", self.trace_hash).as_bytes());
            self.trace.push(l);
        }
    }

    fn blocked(&self, a: Endpoint, b: Endpoint) -> bool {
        self.cut.contains(&(a, b))
    }
}

struct TaskWaker {
    id: u64,
    ready: Arc<Mutex<VecDeque<u64>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.ready.lock().unwrap().push_back(self.id);
    }
}

struct Inner<W: World> {
    world: RefCell<W>,
    core: RefCell<Core<W>>,
    ready: Arc<Mutex<VecDeque<u64>>>,
    faults: Faults,
}

/// Cheaply clonable handle to the simulation.
pub struct Sim<W: World>(Rc<Inner<W>>);

impl<W: World> Clone for Sim<W> {
    fn clone(&self) -> Self {
        Sim(self.0.clone())
    }
}

fn digest(msg: &impl fmt::Debug) -> u64 {
    fnv1a64(format!("{msg:?}").as_bytes())
}

impl<W: World> Sim<W> {
    pub fn new(cfg: SimConfig, faults: Faults, world: W) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let core = Core {
            cfg,
            now: 0,
            seq: 0,
            events: BTreeMap::new(),
            foreground: 0,
            tasks: BTreeMap::new(),
            next_task: 1,
            rpcs: BTreeMap::new(),
            next_rpc: 1,
            timers: BTreeMap::new(),
            next_timer: 1,
            rng,
            cut: BTreeSet::new(),
            periodic: BTreeMap::new(),
            retries: BTreeMap::new(),
            livelock: None,
            trace: Vec::new(),
            trace_hash: 0,
            executed: 0,
        };
        Sim(Rc::new(Inner {
            world: RefCell::new(world),
            core: RefCell::new(core),
            ready: Arc::new(Mutex::new(VecDeque::new())),
            faults,
        }))
    }

    fn core(&self) -> RefMut<'_, Core<W>> {
        self.0.core.borrow_mut()
    }

    pub fn faults(&self) -> &Faults {
        &self.0.faults
    }

    pub fn install_faults(&self, plan: FaultPlan) {
        self.0.faults.borrow_mut().install(plan);
    }

    pub fn now(&self) -> Tick {
        self.core().now
    }

    pub fn config(&self) -> SimConfig {
        self.core().cfg.clone()
    }

    /// Runs `f` with the world borrowed mutably. Must not be called from
    /// inside [`World::handle`].
    pub fn with_world<T>(&self, f: impl FnOnce(&mut W) -> T) -> T {
        f(&mut self.0.world.borrow_mut())
    }

    pub fn rand_below(&self, n: u64) -> u64 {
        if n <= 1 {
            0
        } else {
            self.core().rng.gen_range(0..n)
        }
    }

    pub fn executed(&self) -> u64 {
        self.core().executed
    }

    pub fn trace(&self) -> Vec<String> {
        self.core().trace.clone()
    }

    pub fn trace_hash(&self) -> u64 {
        self.core().trace_hash
    }

    /// Records a retry of `key`; too many retries flag a livelock.
    pub fn note_retry(&self, key: impl fmt::Display) {
        let mut core = self.core();
        let key = key.to_string();
        let bound = core.cfg.livelock_bound;
        let n = core.retries.entry(key.clone()).or_insert(0);
        *n += 1;
        if *n > bound && core.livelock.is_none() {
            core.livelock = Some(key);
        }
    }

    pub fn spawn(&self, owner: Endpoint, fut: impl Future<Output = ()> + 'static) -> u64 {
        let mut core = self.core();
        let id = core.next_task;
        core.next_task += 1;
        core.tasks.insert(id, Task { owner, fut: Some(Box::pin(fut)) });
        drop(core);
        self.0.ready.lock().unwrap().push_back(id);
        id
    }

    fn sender_alive(&self, from: Endpoint) -> bool {
        match from {
            Endpoint::Node(n) => !self.0.faults.borrow().is_crashing(n),
            _ => true,
        }
    }

    /// Applies the fault plan to an outgoing message and returns the delays
    /// of the copies to deliver.
    fn route(&self, from: Endpoint, to: Endpoint, kind: &str) -> Vec<Tick> {
        if !self.sender_alive(from) {
            return Vec::new();
        }
        let actions = self.0.faults.borrow_mut().on_message(from, to, kind);
        let mut core = self.core();
        let mut copies = vec![core.latency()];
        for a in actions {
            match a {
                FaultAction::Drop => copies.clear(),
                FaultAction::Duplicate => {
                    if !copies.is_empty() {
                        let l = core.latency() + 1;
                        copies.push(l);
                    }
                }
                FaultAction::Delay(d) => copies.iter_mut().for_each(|c| *c += d),
                FaultAction::CrashBefore | FaultAction::CrashAfter => {
                    if let Endpoint::Node(n) = from {
                        if a == FaultAction::CrashBefore {
                            copies.clear();
                        }
                        drop(core);
                        self.0.faults.borrow_mut().request_crash(n);
                        core = self.core();
                    }
                }
            }
        }
        copies
    }

    /// Sends a request; resolves to `None` when no reply arrives in time.
    pub fn call(&self, from: Endpoint, to: NodeId, req: W::Req, timeout: Tick) -> RpcFuture<W> {
        let kind = req.kind();
        let copies = self.route(from, Endpoint::Node(to), kind);
        let mut core = self.core();
        let rpc = core.next_rpc;
        core.next_rpc += 1;
        core.rpcs.insert(rpc, RpcSlot { owner: from, state: RpcState::Pending, waker: None });
        let now = core.now;
        for d in copies {
            core.schedule(now + d, Event::Deliver { rpc, from, to, req: req.clone() });
        }
        core.schedule(now + timeout, Event::Timeout { rpc });
        RpcFuture { sim: self.clone(), rpc }
    }

    /// Answers a deferred request.
    pub fn reply(&self, token: ReplyToken, resp: W::Resp) {
        let copies = self.route(Endpoint::Node(token.callee), token.caller, resp.kind());
        let mut core = self.core();
        let now = core.now;
        for d in copies {
            core.schedule(now + d, Event::Respond { rpc: token.rpc, from: token.callee, to: token.caller, resp: resp.clone() });
        }
    }

    pub fn sleep(&self, ticks: Tick) -> Sleep<W> {
        let mut core = self.core();
        let id = core.next_timer;
        core.next_timer += 1;
        core.timers.insert(id, TimerSlot { fired: false, waker: None });
        let at = core.now + ticks.max(1);
        core.schedule(at, Event::Wake { timer: id });
        Sleep { sim: self.clone(), id }
    }

    pub fn crash_at(&self, node: NodeId, at: Tick) {
        self.core().schedule(at, Event::Crash { node });
    }

    pub fn restart_at(&self, node: NodeId, at: Tick) {
        self.core().schedule(at, Event::Restart { node });
    }

    /// Calls [`World::on_periodic`] for `node` every `every` ticks. Periodic
    /// events do not keep the simulation from being quiescent.
    pub fn set_periodic(&self, node: NodeId, every: Tick) {
        let mut core = self.core();
        let first = core.periodic.insert(node, every).is_none();
        if first {
            let at = core.now + every;
            core.schedule(at, Event::Periodic { node });
        }
    }

    pub fn clear_periodic(&self, node: NodeId) {
        self.core().periodic.remove(&node);
    }

    /// Blocks traffic in both directions between the two groups.
    pub fn partition(&self, a: &[Endpoint], b: &[Endpoint]) {
        let mut core = self.core();
        for x in a {
            for y in b {
                core.cut.insert((*x, *y));
                core.cut.insert((*y, *x));
            }
        }
    }

    pub fn heal(&self) {
        self.core().cut.clear();
    }

    fn process_crashes(&self) {
        loop {
            let pending = self.0.faults.borrow_mut().take_pending();
            if pending.is_empty() {
                return;
            }
            for node in pending {
                self.crash_now(node);
            }
        }
    }

    fn crash_now(&self, node: NodeId) {
        let was_up = self.0.world.borrow().is_up(node);
        if was_up {
            self.0.world.borrow_mut().on_crash(node);
        }
        let dropped: Vec<Task> = {
            let mut core = self.core();
            let ids: Vec<u64> = core.tasks.iter().filter(|(_, t)| t.owner == Endpoint::Node(node)).map(|(i, _)| *i).collect();
            let tasks = ids.into_iter().filter_map(|i| core.tasks.remove(&i)).collect();
            core.rpcs.retain(|_, s| s.owner != Endpoint::Node(node));
            let now = core.now;
            core.record(|| format!("{now} crash n{node} - 0000000000000000"));
            if was_up {
                if let Some(d) = core.cfg.auto_restart {
                    core.schedule(now + d, Event::Restart { node });
                }
            }
            tasks
        };
        self.0.faults.borrow_mut().finish_crash(node, was_up);
        drop(dropped);
    }

    fn poll_task(&self, id: u64) {
        let fut = {
            let mut core = self.core();
            match core.tasks.get_mut(&id) {
                Some(t) => t.fut.take(),
                None => None,
            }
        };
        let Some(mut fut) = fut else { return };
        let waker = Waker::from(Arc::new(TaskWaker { id, ready: self.0.ready.clone() }));
        let mut cx = Context::from_waker(&waker);
        let done = fut.as_mut().poll(&mut cx).is_ready();
        let leftover = {
            let mut core = self.core();
            if done {
                core.tasks.remove(&id);
                Some(fut)
            } else if let Some(t) = core.tasks.get_mut(&id) {
                t.fut = Some(fut);
                None
            } else {
                Some(fut)
            }
        };
        drop(leftover);
        self.process_crashes();
    }

    fn drain_ready(&self) {
        loop {
            let next = self.0.ready.lock().unwrap().pop_front();
            match next {
                Some(id) => self.poll_task(id),
                None => return,
            }
        }
    }

    fn pop_event(&self, limit: Option<Tick>) -> Option<Event<W>> {
        let mut core = self.core();
        let (&(at, seq), _) = core.events.first_key_value()?;
        if limit.is_some_and(|l| at > l) {
            return None;
        }
        let ev = core.events.remove(&(at, seq)).unwrap();
        if !ev.is_background() {
            core.foreground -= 1;
        }
        core.now = at;
        core.executed += 1;
        Some(ev)
    }

    fn execute(&self, ev: Event<W>) {
        match ev {
            Event::Deliver { rpc, from, to, req } => {
                let up = self.0.world.borrow().is_up(to);
                let blocked = self.core().blocked(from, Endpoint::Node(to));
                {
                    let mut core = self.core();
                    let now = core.now;
                    let fate = if !up { " dropped-down" } else if blocked { " dropped-cut" } else { "" };
                    core.record(|| format!("{now} {}{fate} {from} n{to} {:016x}", req.kind(), digest(&req)));
                }
                if !up || blocked {
                    return;
                }
                let token = ReplyToken { rpc, caller: from, callee: to };
                let handled = self.0.world.borrow_mut().handle(self, to, from, req, token.clone());
                if let Handled::Reply(resp) = handled {
                    self.reply(token, resp);
                }
                self.process_crashes();
            }
            Event::Respond { rpc, from, to, resp } => {
                let caller_up = match to {
                    Endpoint::Node(n) => self.0.world.borrow().is_up(n),
                    _ => true,
                };
                let mut core = self.core();
                let blocked = core.blocked(Endpoint::Node(from), to);
                let now = core.now;
                core.record(|| format!("{now} {}.resp n{from} {to} {:016x}", resp.kind(), digest(&resp)));
                if !caller_up || blocked {
                    return;
                }
                if let Some(slot) = core.rpcs.get_mut(&rpc) {
                    if matches!(slot.state, RpcState::Pending) {
                        slot.state = RpcState::Done(resp);
                        if let Some(w) = slot.waker.take() {
                            w.wake();
                        }
                    }
                }
            }
            Event::Timeout { rpc } => {
                let mut core = self.core();
                if let Some(slot) = core.rpcs.get_mut(&rpc) {
                    if matches!(slot.state, RpcState::Pending) {
                        slot.state = RpcState::TimedOut;
                        if let Some(w) = slot.waker.take() {
                            w.wake();
                        }
                    }
                }
            }
            Event::Wake { timer } => {
                let mut core = self.core();
                if let Some(t) = core.timers.get_mut(&timer) {
                    t.fired = true;
                    if let Some(w) = t.waker.take() {
                        w.wake();
                    }
                }
            }
            Event::Crash { node } => {
                self.0.faults.borrow_mut().request_crash(node);
                self.process_crashes();
            }
            Event::Restart { node } => {
                if self.0.world.borrow().is_up(node) {
                    return;
                }
                {
                    let mut core = self.core();
                    let now = core.now;
                    core.record(|| format!("{now} restart n{node} - 0000000000000000"));
                }
                self.0.world.borrow_mut().on_restart(self, node);
                self.process_crashes();
            }
            Event::Periodic { node } => {
                let every = self.core().periodic.get(&node).copied();
                let Some(every) = every else { return };
                if self.0.world.borrow().is_up(node) {
                    self.0.world.borrow_mut().on_periodic(self, node);
                    self.process_crashes();
                }
                let mut core = self.core();
                let at = core.now + every;
                core.schedule(at, Event::Periodic { node });
            }
        }
    }

    fn check_livelock(&self) -> Result<(), SimError> {
        match &self.core().livelock {
            Some(k) => Err(SimError::Livelock(k.clone())),
            None => Ok(()),
        }
    }

    fn has_foreground(&self) -> bool {
        self.core().foreground > 0
    }

    /// Runs until no task is runnable and only periodic events remain.
    /// Returns the number of events executed.
    pub fn run_until_quiescent(&self) -> Result<u64, SimError> {
        let start = self.executed();
        loop {
            self.drain_ready();
            self.check_livelock()?;
            if !self.has_foreground() {
                return Ok(self.executed() - start);
            }
            let Some(ev) = self.pop_event(None) else { return Ok(self.executed() - start) };
            self.execute(ev);
        }
    }

    /// Runs every event scheduled at or before `tick`, then advances the clock.
    pub fn run_until(&self, tick: Tick) -> Result<u64, SimError> {
        let start = self.executed();
        loop {
            self.drain_ready();
            self.check_livelock()?;
            match self.pop_event(Some(tick)) {
                Some(ev) => self.execute(ev),
                None => break,
            }
        }
        let mut core = self.core();
        core.now = core.now.max(tick);
        Ok(core.executed - start)
    }

    /// Spawns `fut` as an admin task and runs the simulation until it
    /// finishes.
    pub fn block_on<T: 'static>(&self, fut: impl Future<Output = T> + 'static) -> Result<T, SimError> {
        let out: Rc<RefCell<Option<T>>> = Rc::new(RefCell::new(None));
        let slot = out.clone();
        self.spawn(Endpoint::Admin, async move {
            let v = fut.await;
            *slot.borrow_mut() = Some(v);
        });
        loop {
            self.drain_ready();
            self.check_livelock()?;
            if let Some(v) = out.borrow_mut().take() {
                return Ok(v);
            }
            match self.pop_event(None) {
                Some(ev) => {
                    if !self.has_foreground() && ev.is_background() && self.0.ready.lock().unwrap().is_empty() {
                        // Only periodic work is left and the awaited task
                        // can no longer make progress without it.
                        self.execute(ev);
                        self.drain_ready();
                        if let Some(v) = out.borrow_mut().take() {
                            return Ok(v);
                        }
                        if !self.has_foreground() && self.0.ready.lock().unwrap().is_empty() {
                            return Err(SimError::Stuck);
                        }
                        continue;
                    }
                    self.execute(ev);
                }
                None => return Err(SimError::Stuck),
            }
        }
    }
}

pub struct RpcFuture<W: World> {
    sim: Sim<W>,
    rpc: u64,
}

impl<W: World> Future for RpcFuture<W> {
    type Output = Option<W::Resp>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut core = self.sim.core();
        let Some(slot) = core.rpcs.get_mut(&self.rpc) else { return Poll::Ready(None) };
        match std::mem::replace(&mut slot.state, RpcState::Pending) {
            RpcState::Pending => {
                slot.waker = Some(cx.waker().clone());
                Poll::Pending
            }
            RpcState::Done(r) => {
                core.rpcs.remove(&self.rpc);
                Poll::Ready(Some(r))
            }
            RpcState::TimedOut => {
                core.rpcs.remove(&self.rpc);
                Poll::Ready(None)
            }
        }
    }
}

impl<W: World> Drop for RpcFuture<W> {
    fn drop(&mut self) {
        if let Ok(mut core) = self.sim.0.core.try_borrow_mut() {
            core.rpcs.remove(&self.rpc);
        }
    }
}

pub struct Sleep<W: World> {
    sim: Sim<W>,
    id: u64,
}

impl<W: World> Future for Sleep<W> {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        let mut core = self.sim.core();
        match core.timers.get_mut(&self.id) {
            Some(t) if t.fired => {
                core.timers.remove(&self.id);
                Poll::Ready(())
            }
            Some(t) => {
                t.waker = Some(cx.waker().clone());
                Poll::Pending
            }
            None => Poll::Ready(()),
        }
    }
}

impl<W: World> Drop for Sleep<W> {
    fn drop(&mut self) {
        if let Ok(mut core) = self.sim.0.core.try_borrow_mut() {
            core.timers.remove(&self.id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug)]
    enum Req {
        Add(u64),
        Get,
        Later(u64),
    }

    impl Message for Req {
        fn kind(&self) -> &'static str {
            match self {
                Req::Add(_) => "Add",
                Req::Get => "Get",
                Req::Later(_) => "Later",
            }
        }
    }

    #[derive(Clone, Debug, PartialEq)]
    struct Resp(u64);

    impl Message for Resp {
        fn kind(&self) -> &'static str {
            "Resp"
        }
    }

    /// Counters with a durable and a volatile copy.
    #[derive(Default)]
    struct Counters {
        durable: BTreeMap<NodeId, u64>,
        volatile: BTreeMap<NodeId, Option<u64>>,
        handled: u64,
    }

    impl World for Counters {
        type Req = Req;
        type Resp = Resp;

        fn handle(&mut self, sim: &Sim<Self>, to: NodeId, _: Endpoint, req: Req, token: ReplyToken) -> Handled<Resp> {
            self.handled += 1;
            let v = self.volatile.entry(to).or_insert(Some(0)).get_or_insert(0);
            match req {
                Req::Add(n) => {
                    *v += n;
                    *self.durable.entry(to).or_default() = *v;
                    Handled::Reply(Resp(*v))
                }
                Req::Get => Handled::Reply(Resp(*v)),
                Req::Later(d) => {
                    let s = sim.clone();
                    let val = *v;
                    sim.spawn(Endpoint::Node(to), async move {
                        s.sleep(d).await;
                        s.reply(token, Resp(val));
                    });
                    Handled::Deferred
                }
            }
        }

        fn is_up(&self, node: NodeId) -> bool {
            self.volatile.get(&node).is_none_or(|v| v.is_some())
        }

        fn on_crash(&mut self, node: NodeId) {
            self.volatile.insert(node, None);
        }

        fn on_restart(&mut self, _: &Sim<Self>, node: NodeId) {
            let d = self.durable.get(&node).copied().unwrap_or(0);
            self.volatile.insert(node, Some(d));
        }
    }

    fn sim(cfg: SimConfig) -> Sim<Counters> {
        Sim::new(cfg, Faults::default(), Counters::default())
    }

    #[test]
    fn empty_queue_runs_nothing() {
        assert_eq!(sim(SimConfig::default()).run_until_quiescent().unwrap(), 0);
    }

    #[test]
    fn call_takes_two_latencies() {
        let s = sim(SimConfig { latency: 3, ..Default::default() });
        let s2 = s.clone();
        let r = s.block_on(async move { (s2.call(Endpoint::Client(1), 1, Req::Add(5), 50).await, s2.now()) }).unwrap();
        assert_eq!(r, (Some(Resp(5)), 6));
    }

    #[test]
    fn dropped_request_times_out() {
        let s = sim(SimConfig::default());
        s.install_faults(FaultPlan::none().with(FaultRule {
            target: FaultTarget::Any,
            matcher: Matcher::Message("Add".into()),
            ordinal: Some(1),
            action: FaultAction::Drop,
        }));
        let s2 = s.clone();
        let r = s
            .block_on(async move {
                let first = s2.call(Endpoint::Client(1), 1, Req::Add(5), 50).await;
                let t = s2.now();
                let second = s2.call(Endpoint::Client(1), 1, Req::Add(5), 50).await;
                (first, t, second)
            })
            .unwrap();
        assert_eq!(r, (None, 50, Some(Resp(5))));
    }

    #[test]
    fn duplicate_delivers_twice_and_first_reply_wins() {
        let s = sim(SimConfig::default());
        s.install_faults(FaultPlan::none().with(FaultRule {
            target: FaultTarget::Any,
            matcher: Matcher::AnyMessage,
            ordinal: None,
            action: FaultAction::Duplicate,
        }));
        let s2 = s.clone();
        let r = s.block_on(async move { s2.call(Endpoint::Client(1), 1, Req::Add(5), 50).await }).unwrap();
        assert_eq!(r, Some(Resp(5)));
        s.run_until_quiescent().unwrap();
        assert_eq!(s.with_world(|w| w.handled), 2);
    }

    #[test]
    fn crash_drops_volatile_state_and_restart_recovers_durable() {
        let s = sim(SimConfig { auto_restart: None, ..Default::default() });
        let s2 = s.clone();
        s.block_on(async move { s2.call(Endpoint::Client(1), 1, Req::Add(7), 50).await }).unwrap();
        s.crash_at(1, 10);
        s.restart_at(1, 20);
        let s2 = s.clone();
        let during = s.block_on(async move {
            s2.sleep(10).await;
            s2.call(Endpoint::Client(1), 1, Req::Get, 5).await
        });
        assert_eq!(during.unwrap(), None);
        s.run_until(25).unwrap();
        let s2 = s.clone();
        let after = s.block_on(async move { s2.call(Endpoint::Client(1), 1, Req::Get, 5).await }).unwrap();
        assert_eq!(after, Some(Resp(7)));
    }

    #[test]
    fn crash_kills_deferred_work() {
        let s = sim(SimConfig { auto_restart: None, ..Default::default() });
        s.crash_at(1, 3);
        let s2 = s.clone();
        let r = s.block_on(async move { s2.call(Endpoint::Client(1), 1, Req::Later(10), 30).await }).unwrap();
        assert_eq!(r, None);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let s = sim(SimConfig { seed, jitter: 3, trace: true, ..Default::default() });
            for c in 0..4u64 {
                let s2 = s.clone();
                s.spawn(Endpoint::Client(c), async move {
                    for i in 0..5 {
                        s2.call(Endpoint::Client(c), (i % 2) as NodeId, Req::Add(c), 50).await;
                    }
                });
            }
            s.run_until_quiescent().unwrap();
            (s.trace_hash(), s.trace())
        };
        let (a, ta) = run(9);
        let (b, tb) = run(9);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_ne!(run(10).0, a);
    }

    #[test]
    fn livelock_is_reported() {
        let s = sim(SimConfig { livelock_bound: 3, ..Default::default() });
        let s2 = s.clone();
        s.spawn(Endpoint::Admin, async move {
            loop {
                s2.note_retry("tx-1");
                s2.sleep(5).await;
            }
        });
        assert_eq!(s.run_until_quiescent(), Err(SimError::Livelock("tx-1".into())));
    }

    #[test]
    fn partition_blocks_delivery() {
        let s = sim(SimConfig::default());
        s.partition(&[Endpoint::Client(1)], &[Endpoint::Node(1)]);
        let s2 = s.clone();
        assert_eq!(s.block_on(async move { s2.call(Endpoint::Client(1), 1, Req::Get, 5).await }).unwrap(), None);
        s.heal();
        let s2 = s.clone();
        assert!(s.block_on(async move { s2.call(Endpoint::Client(1), 1, Req::Get, 5).await }).unwrap().is_some());
    }
}
