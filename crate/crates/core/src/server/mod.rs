//! Cache nodes as a simulated world, plus a facade for driving a cluster.
//!
//! Each node owns a log on a [`SimDisk`] that survives crashes; all other
//! state is rebuilt by replaying it. Requests arrive as [`Req`] messages
//! and are answered with [`Resp`]. Work that needs further messages runs as
//! a task owned by the node, so a crash cancels it.

mod coord;
mod disk;
mod handle;
mod msg;
mod node;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use crate::cluster::{MigrationReceive, NodeList};
use crate::error::FsError;
use crate::extstore::ObjectStore;
use crate::raftlog::{LogError, MemStore};
use crate::simnet::{Endpoint, FaultPlan, Faults, Handled, ReplyToken, Sim, SimConfig, SimError, World};
use crate::store::ChunkKey;
use crate::txn::RetryPolicy;
use crate::{InodeId, NodeId, Tick};

pub use coord::{internal_client, MEMBERSHIP_CLIENT};
pub use disk::SimDisk;
pub use msg::{Blob, MembershipChange, MetaHint, Place, Req, Resp};
pub use node::Node;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterConfig {
    pub chunk_size: u64,
    /// Buckets exposed as the top-level directories.
    pub buckets: Vec<String>,
    /// Age at which dirty metadata is flushed in the background; `None`
    /// disables background flushing.
    pub flush_interval: Option<Tick>,
    pub rpc_timeout: Tick,
    /// Attempts for a read before a client reports a timeout.
    pub rpc_retries: u32,
    pub retry: RetryPolicy,
    /// Second-level log file size before rolling over.
    pub rollover: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            chunk_size: 16 << 20,
            buckets: vec!["data".into()],
            flush_interval: Some(5000),
            rpc_timeout: 50,
            rpc_retries: 5,
            retry: RetryPolicy::default(),
            rollover: 64 << 20,
        }
    }
}

/// Entities moved by one migration batch, recorded when the receiver
/// commits the new list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MigrationRecord {
    pub list_version: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub metas: Vec<InodeId>,
    pub dirs: Vec<InodeId>,
    pub chunks: Vec<ChunkKey>,
    pub bytes: u64,
}

impl MigrationRecord {
    pub(crate) fn new(to: NodeId, m: &MigrationReceive) -> Self {
        MigrationRecord {
            list_version: m.list_version,
            from: m.from,
            to,
            metas: m.metas.iter().map(|x| x.id).collect(),
            dirs: m.dirs.iter().map(|(x, _)| x.id).collect(),
            chunks: m.chunks.iter().map(|c| c.key()).collect(),
            bytes: m.payload_bytes(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub committed: u64,
    pub aborted: u64,
    pub retried: u64,
    pub one_phase: u64,
    pub membership_txs: u64,
    /// Commit decisions that reached a node with no matching prepare.
    pub protocol_errors: u64,
    pub migrations: Vec<MigrationRecord>,
}

struct Slot {
    disk: Rc<RefCell<MemStore>>,
    node: Option<Node>,
    retired: bool,
    boot_error: Option<String>,
}

/// The simulated world: every cache node plus the shared object store.
pub struct Fs {
    pub(crate) cfg: Rc<ClusterConfig>,
    pub(crate) stats: Rc<RefCell<Stats>>,
    ext: Rc<RefCell<ObjectStore>>,
    faults: Faults,
    slots: BTreeMap<NodeId, Slot>,
}

impl Fs {
    pub fn new(cfg: ClusterConfig, ext: Rc<RefCell<ObjectStore>>, faults: Faults) -> Self {
        Fs { cfg: Rc::new(cfg), stats: Rc::default(), ext, faults, slots: BTreeMap::new() }
    }

    pub(crate) fn node_mut(&mut self, id: NodeId, now: Tick) -> Option<&mut Node> {
        let n = self.slots.get_mut(&id)?.node.as_mut()?;
        n.now = now;
        Some(n)
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.slots.get(&id)?.node.as_ref()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.slots.keys().copied().collect()
    }

    pub fn disk(&self, id: NodeId) -> Option<Rc<RefCell<MemStore>>> {
        self.slots.get(&id).map(|s| s.disk.clone())
    }

    pub fn boot_error(&self, id: NodeId) -> Option<String> {
        self.slots.get(&id)?.boot_error.clone()
    }

    pub fn is_retired(&self, id: NodeId) -> bool {
        self.slots.get(&id).is_some_and(|s| s.retired)
    }

    pub(crate) fn retire(&mut self, id: NodeId) {
        if let Some(s) = self.slots.get_mut(&id) {
            s.retired = true;
        }
    }

    fn boot(&mut self, id: NodeId, now: Tick) -> Result<(), LogError> {
        let slot = self.slots.entry(id).or_insert_with(|| Slot {
            disk: Rc::new(RefCell::new(MemStore::new())),
            node: None,
            retired: false,
            boot_error: None,
        });
        let disk = SimDisk::new(id, slot.disk.clone(), self.faults.clone());
        match Node::open(id, disk, self.cfg.clone(), self.ext.clone(), self.stats.clone(), self.faults.clone(), now) {
            Ok(n) => {
                slot.node = Some(n);
                slot.boot_error = None;
                Ok(())
            }
            Err(e) => {
                slot.boot_error = Some(e.to_string());
                Err(e)
            }
        }
    }
}

impl World for Fs {
    type Req = Req;
    type Resp = Resp;

    fn handle(&mut self, sim: &Sim<Self>, to: NodeId, _from: Endpoint, req: Req, token: ReplyToken) -> Handled<Resp> {
        self.dispatch(sim, to, req, token)
    }

    fn is_up(&self, node: NodeId) -> bool {
        self.node(node).is_some()
    }

    fn on_crash(&mut self, node: NodeId) {
        if let Some(s) = self.slots.get_mut(&node) {
            s.node = None;
        }
    }

    fn on_restart(&mut self, sim: &Sim<Self>, node: NodeId) {
        if self.is_retired(node) || !self.slots.contains_key(&node) {
            return;
        }
        if self.boot(node, sim.now()).is_err() {
            // A corrupt log keeps the node down.
            return;
        }
        sim.spawn(Endpoint::Node(node), coord::resume(coord::Ctx::new(sim, node)));
    }

    fn on_periodic(&mut self, sim: &Sim<Self>, node: NodeId) {
        let Some(interval) = self.cfg.flush_interval else { return };
        let Some(n) = self.node_mut(node, sim.now()) else { return };
        if n.leaving || !n.is_member() {
            return;
        }
        let due = n.expired(interval);
        for inode in due {
            n.persisting.insert(inode);
            sim.spawn(Endpoint::Node(node), coord::flush_one(coord::Ctx::new(sim, node), inode));
        }
    }
}

/// Handle on a simulated cluster: starts nodes, changes membership and
/// hands out client sessions.
#[derive(Clone)]
pub struct SimCluster {
    sim: Sim<Fs>,
    ext: Rc<RefCell<ObjectStore>>,
    cfg: Rc<ClusterConfig>,
    seeds: Rc<RefCell<BTreeSet<NodeId>>>,
    next_node: Rc<Cell<NodeId>>,
    next_client: Rc<Cell<u64>>,
}

impl SimCluster {
    pub fn new(cfg: ClusterConfig, sim_cfg: SimConfig, ext: Rc<RefCell<ObjectStore>>) -> Self {
        let faults = Faults::default();
        let fs = Fs::new(cfg, ext.clone(), faults.clone());
        let cfg = fs.cfg.clone();
        SimCluster {
            sim: Sim::new(sim_cfg, faults, fs),
            ext,
            cfg,
            seeds: Rc::default(),
            next_node: Rc::new(Cell::new(1)),
            next_client: Rc::new(Cell::new(1)),
        }
    }

    /// A cluster of `n` nodes joined one after another.
    pub fn with_nodes(cfg: ClusterConfig, sim_cfg: SimConfig, ext: Rc<RefCell<ObjectStore>>, n: usize) -> Result<Self, FsError> {
        let c = SimCluster::new(cfg, sim_cfg, ext);
        for _ in 0..n {
            c.add_node()?;
        }
        Ok(c)
    }

    pub fn sim(&self) -> &Sim<Fs> {
        &self.sim
    }

    pub fn ext(&self) -> &Rc<RefCell<ObjectStore>> {
        &self.ext
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn install_faults(&self, plan: FaultPlan) {
        self.sim.install_faults(plan);
    }

    pub fn stats(&self) -> Stats {
        self.sim.with_world(|w| w.stats.borrow().clone())
    }

    /// Nodes currently serving in the latest list any seed knows.
    pub fn members(&self) -> Vec<NodeId> {
        self.list().map(|l| l.ids()).unwrap_or_default()
    }

    pub fn list(&self) -> Option<NodeList> {
        self.sim.with_world(|w| {
            w.slots.values().filter_map(|s| s.node.as_ref()).map(|n| n.list.clone()).max_by_key(|l| l.version)
        })
    }

    pub fn seeds(&self) -> Rc<RefCell<BTreeSet<NodeId>>> {
        self.seeds.clone()
    }

    pub fn with_node<T>(&self, id: NodeId, f: impl FnOnce(&Node) -> T) -> Option<T> {
        self.sim.with_world(|w| w.node(id).map(f))
    }

    pub fn disk(&self, id: NodeId) -> Option<Rc<RefCell<MemStore>>> {
        self.sim.with_world(|w| w.disk(id))
    }

    pub fn boot_error(&self, id: NodeId) -> Option<String> {
        self.sim.with_world(|w| w.boot_error(id))
    }

    /// Boots a fresh node that is not yet a member. Ids are never reused.
    pub fn start_node(&self) -> NodeId {
        let id = self.next_node.get();
        self.next_node.set(id + 1);
        let now = self.sim.now();
        self.sim.with_world(|w| w.boot(id, now)).expect("an empty log opens");
        if let Some(every) = self.cfg.flush_interval {
            self.sim.set_periodic(id, every.clamp(1, 1000));
        }
        id
    }

    /// Adds `node` to the cluster through any live seed, or bootstraps a
    /// one-node cluster when there is none.
    pub async fn join(&self, node: NodeId) -> Result<NodeList, FsError> {
        for _ in 0..1000 {
            let via = self.seeds.borrow().iter().copied().find(|s| self.sim.with_world(|w| w.is_up(*s))).unwrap_or(node);
            match self.sim.call(Endpoint::Admin, via, Req::Join { node }, 20_000).await {
                Some(Resp::List(l)) if l.contains(node) => {
                    self.seeds.borrow_mut().insert(node);
                    return Ok(l);
                }
                Some(Resp::Err(e)) => return Err(e),
                _ => self.sim.sleep(self.cfg.rpc_timeout).await,
            }
        }
        Err(FsError::Timeout)
    }

    /// Drains `node` and removes it. The node shuts down for good.
    pub async fn leave(&self, node: NodeId) -> Result<(), FsError> {
        self.seeds.borrow_mut().remove(&node);
        for _ in 0..1000 {
            if self.sim.with_world(|w| w.is_retired(node)) {
                return Ok(());
            }
            match self.sim.call(Endpoint::Admin, node, Req::Leave { node }, 100_000).await {
                Some(Resp::Ack) => return Ok(()),
                Some(Resp::Err(e)) => return Err(e),
                _ => self.sim.sleep(self.cfg.rpc_timeout).await,
            }
        }
        Err(FsError::Timeout)
    }

    pub fn block_on<T: 'static>(&self, fut: impl std::future::Future<Output = T> + 'static) -> Result<T, SimError> {
        self.sim.block_on(fut)
    }

    fn sim_err(e: SimError) -> FsError {
        FsError::Protocol(e.to_string())
    }

    pub fn add_node(&self) -> Result<NodeId, FsError> {
        let id = self.start_node();
        let c = self.clone();
        self.block_on(async move { c.join(id).await }).map_err(Self::sim_err)??;
        Ok(id)
    }

    pub fn remove_node(&self, id: NodeId) -> Result<(), FsError> {
        let c = self.clone();
        self.block_on(async move { c.leave(id).await }).map_err(Self::sim_err)?
    }

    pub(crate) fn next_client_id(&self) -> u64 {
        let id = self.next_client.get();
        self.next_client.set(id + 1);
        id
    }

    /// Schedules a crash of `node` now; it restarts per the simulator config.
    pub fn crash(&self, node: NodeId) {
        self.sim.crash_at(node, self.sim.now());
    }

    pub fn run_until_quiescent(&self) -> Result<u64, SimError> {
        self.sim.run_until_quiescent()
    }
}
