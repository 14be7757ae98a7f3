//! Executes a scenario and collects a deterministic report.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use cachefs::extstore::ObjectStore;
use cachefs::fsops::Client;
use cachefs::raftlog::MemStore;
use cachefs::server::SimCluster;
use cachefs::simnet::FaultPlan;
use cachefs::{InodeId, NodeId};
use futures::future::join_all;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::check::{self, Holdings};
use crate::exec;
use crate::model::RefFs;
use crate::scenario::{FaultPhase, FaultSpec, Scenario, Step};
use crate::workload::{gen_workload, payload, Op, Outcome, TraceOp};

/// Ticks the simulator runs after a step so background work settles.
const SETTLE: u64 = 200;

pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub lines: Vec<String>,
    pub findings: Vec<String>,
    pub metrics: BTreeMap<String, u64>,
    pub trace: Vec<String>,
    /// Every cluster the run booted, oldest first.
    pub clusters: Vec<SimCluster>,
    pub ext: Rc<RefCell<ObjectStore>>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let _ = writeln!(out, "{l}");
        }
        for f in &self.findings {
            let _ = writeln!(out, "finding {f}");
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "result {verdict} ({} findings)", self.findings.len());
        out
    }

    pub fn metrics_text(&self) -> String {
        self.metrics.iter().map(|(k, v)| format!("{k} {v}\n")).collect()
    }

    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|l| format!("{l}\n")).collect()
    }

    /// Writes each node's log under `dir/node-<id>` and the object store
    /// under `dir/store`. Nodes of later clusters shadow earlier ones with
    /// the same id.
    pub fn dump(&self, dir: &Path) -> std::io::Result<()> {
        for (i, c) in self.clusters.iter().enumerate() {
            for (id, disk) in disks(c) {
                let name = if i == 0 { format!("node-{id}") } else { format!("boot{i}-node-{id}") };
                disk.borrow().dump_to_dir(&dir.join(name))?;
            }
        }
        self.ext.borrow().dump_to_dir(&dir.join("store"))
    }
}

fn disks(c: &SimCluster) -> Vec<(NodeId, Rc<RefCell<MemStore>>)> {
    let ids = c.sim().with_world(|w| w.node_ids());
    ids.into_iter().filter_map(|id| c.disk(id).map(|d| (id, d))).collect()
}

/// Runs `s` with `seed`, or with the scenario's own seed. A scenario with a
/// sweep runs once fault-free and then once per fault variant.
pub fn run_scenario(s: &Scenario, seed: Option<u64>) -> Report {
    let seed = seed.unwrap_or(s.seed);
    let mut base = Run::new(s, seed).execute();
    if let Some(sweep) = &s.sweep {
        let mut variants = 0;
        let mut failed = 0;
        let mut crashes = 0;
        for &a in &sweep.actions {
            let mut k = 1;
            while k <= sweep.max_ordinal {
                let mut v = s.clone();
                v.sweep = None;
                v.faults = vec![FaultSpec { node: None, on: sweep.on.clone(), ordinal: Some(k), action: a, delay: 20 }];
                let r = Run::new(&v, seed).execute();
                let seen = if sweep.on == "durable_write" { "faults.durable_writes" } else { "faults.messages" };
                if r.metrics.get(seen).copied().unwrap_or(0) < k {
                    break;
                }
                variants += 1;
                crashes += r.metrics.get("faults.crashes").copied().unwrap_or(0);
                let tag = format!("sweep {} {a:?} #{k}", sweep.on);
                if r.passed() {
                    base.lines.push(format!("{tag}: ok"));
                } else {
                    failed += 1;
                    base.lines.push(format!("{tag}: FAIL"));
                    base.findings.extend(r.findings.iter().map(|f| format!("{tag}: {f}")));
                }
                k += sweep.stride;
            }
        }
        base.metrics.insert("sweep.variants".into(), variants);
        base.metrics.insert("sweep.failed".into(), failed);
        base.metrics.insert("sweep.crashes".into(), crashes);
    }
    base
}

struct Run<'a> {
    s: &'a Scenario,
    seed: u64,
    ext: Rc<RefCell<ObjectStore>>,
    clusters: Vec<SimCluster>,
    model: RefFs,
    ids: BTreeMap<InodeId, String>,
    lines: Vec<String>,
    findings: Vec<String>,
    metrics: BTreeMap<String, u64>,
    trace: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(s: &'a Scenario, seed: u64) -> Self {
        let buckets: Vec<&str> = s.buckets.iter().map(String::as_str).collect();
        Run {
            s,
            seed,
            ext: Rc::new(RefCell::new(ObjectStore::new(&buckets))),
            clusters: Vec::new(),
            model: RefFs::new(&s.buckets),
            ids: BTreeMap::new(),
            lines: vec![format!("scenario {} seed {seed}", s.name)],
            findings: Vec::new(),
            metrics: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    fn c(&self) -> &SimCluster {
        self.clusters.last().expect("a cluster is booted")
    }

    fn boot(&mut self, nodes: usize) -> bool {
        let sim = self.s.sim_config(self.seed.wrapping_add(self.clusters.len() as u64));
        match SimCluster::with_nodes(self.s.cluster_config(), sim, self.ext.clone(), nodes) {
            Ok(c) => {
                self.clusters.push(c);
                true
            }
            Err(e) => {
                self.findings.push(format!("boot of {nodes} nodes failed: {e}"));
                false
            }
        }
    }

    fn check(&mut self, name: &str, findings: Vec<String>) {
        let key = if findings.is_empty() { "pass" } else { "fail" };
        *self.metrics.entry(format!("check.{name}.{key}")).or_default() += 1;
        if findings.is_empty() {
            self.lines.push(format!("check {name} ok"));
        } else {
            self.lines.push(format!("check {name} FAIL ({} findings)", findings.len()));
            self.findings.extend(findings.into_iter().map(|f| format!("{name}: {f}")));
        }
    }

    fn block_on<T: 'static>(&mut self, what: &str, fut: impl std::future::Future<Output = T> + 'static) -> Option<T> {
        match self.c().block_on(fut) {
            Ok(v) => Some(v),
            Err(e) => {
                self.findings.push(format!("{what}: simulator {e}"));
                None
            }
        }
    }

    fn settle(&mut self) {
        let c = self.c().clone();
        if let Err(e) = c.sim().run_until(c.sim().now() + SETTLE) {
            self.findings.push(format!("settle: simulator {e}"));
        }
    }

    fn execute(mut self) -> Report {
        if self.boot(self.s.nodes) {
            self.clean_phase();
            if self.s.fault_phase == FaultPhase::Workload {
                self.install_faults();
            }
            self.workload_phase();
            if self.s.fault_phase == FaultPhase::Workload {
                self.clear_faults();
            }
            self.settle();
            self.content_check("content");
            self.index_inodes();
            if self.s.fault_phase == FaultPhase::Steps {
                self.install_faults();
            }
            for (i, step) in self.s.steps.clone().iter().enumerate() {
                if self.findings.iter().any(|f| f.contains("simulator")) {
                    break;
                }
                self.step(i + 1, step);
            }
            if self.s.fault_phase == FaultPhase::Steps {
                self.clear_faults();
                if !self.c().members().is_empty() {
                    self.settle();
                    self.content_check("final-content");
                }
            }
            self.reconcile();
        }
        self.collect_metrics();
        Report {
            scenario: self.s.name.clone(),
            seed: self.seed,
            lines: self.lines,
            findings: self.findings,
            metrics: self.metrics,
            trace: self.trace,
            clusters: self.clusters,
            ext: self.ext,
        }
    }

    /// Runs `ops`: directory creations in order first, then each session's
    /// operations concurrently. Outcomes are compared with the model.
    fn run_ops(&mut self, phase: &str, ops: Vec<TraceOp>) {
        let c = self.c().clone();
        let mode = self.s.consistency.into();
        let sessions = ops.iter().map(|t| t.session).max().map_or(0, |m| m + 1);
        let clients: Vec<Client> = (0..sessions).map(|_| c.client(mode)).collect();
        let (dirs, rest): (Vec<(usize, TraceOp)>, Vec<(usize, TraceOp)>) =
            ops.iter().cloned().enumerate().partition(|(_, t)| matches!(t.op, Op::Mkdir { .. }));
        let mut by_session: Vec<Vec<(usize, TraceOp)>> = vec![Vec::new(); sessions];
        for (i, t) in rest {
            by_session[t.session].push((i, t));
        }
        let start = c.sim().now();
        let first = clients.first().cloned();
        let outcomes = self.block_on(phase, async move {
            let mut out: Vec<(usize, Outcome)> = Vec::new();
            if let Some(cl) = first {
                for (i, t) in &dirs {
                    out.push((*i, exec::apply(&cl, &t.op).await));
                }
            }
            let runs = by_session.into_iter().zip(clients).map(|(ops, cl)| async move {
                let mut out = Vec::new();
                for (i, t) in ops {
                    out.push((i, exec::apply(&cl, &t.op).await));
                }
                out
            });
            for o in join_all(runs).await {
                out.extend(o);
            }
            out.sort_by_key(|(i, _)| *i);
            out
        });
        let ticks = self.c().sim().now() - start;
        self.lines.push(format!("phase {phase} ticks {ticks} ops {}", ops.len()));
        *self.metrics.entry(format!("phase.{phase}.ticks")).or_default() += ticks;
        let Some(outcomes) = outcomes else { return };
        let mut mismatches = Vec::new();
        for (t, (_, got)) in ops.iter().zip(&outcomes) {
            self.trace.push(t.to_string());
            let want = self.model.apply(&t.op);
            if *got != want {
                mismatches.push(format!("`{t}`: got {got}, want {want}"));
            }
        }
        self.check(&format!("{phase}-outcomes"), mismatches);
    }

    fn clean_phase(&mut self) {
        let n = self.s.clean_files;
        if n == 0 {
            return;
        }
        let w = &self.s.workload;
        let dir = format!("/{}/clean", w.bucket);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xc1ea);
        let mut ops = vec![TraceOp { session: 0, op: Op::Mkdir { path: dir.clone() } }];
        for i in 0..n {
            let path = format!("{dir}/c{i:05}");
            let size = rng.gen_range(w.min_size..=w.max_size);
            ops.push(TraceOp { session: 0, op: Op::Create { path: path.clone() } });
            ops.push(TraceOp { session: 0, op: Op::Write { path: path.clone(), offset: 0, data: payload(!self.seed, i as u64, size as usize) } });
            ops.push(TraceOp { session: 0, op: Op::Fsync { path } });
        }
        ops.push(TraceOp { session: 0, op: Op::Fsync { path: dir } });
        self.run_ops("clean", ops);
        self.settle();
    }

    fn install_faults(&mut self) {
        let plan = self.s.faults.iter().fold(FaultPlan::none(), |p, f| p.with(f.rule()));
        self.c().install_faults(plan);
    }

    /// Records what the fault phase saw and removes the plan.
    fn clear_faults(&mut self) {
        let (writes, messages, crashes) = {
            let f = self.c().sim().faults().borrow();
            (f.durable_writes, f.messages, f.crashes)
        };
        self.metrics.insert("faults.durable_writes".into(), writes);
        self.metrics.insert("faults.messages".into(), messages);
        self.metrics.insert("faults.crashes".into(), crashes);
        self.c().install_faults(FaultPlan::none());
    }

    fn workload_phase(&mut self) {
        let ops = gen_workload(&self.s.workload, self.seed);
        self.run_ops("workload", ops);
    }

    fn content_check(&mut self, name: &str) {
        let cl = self.c().client(cachefs::fsops::Consistency::Strict);
        let model = self.model.clone();
        if let Some(f) = self.block_on(name, async move { check::compare_tree(&cl, &model).await }) {
            self.check(name, f);
        }
    }

    /// Maps inode ids to paths for every file the model holds.
    fn index_inodes(&mut self) {
        let cl = self.c().client(cachefs::fsops::Consistency::Strict);
        let paths: Vec<String> = self.model.files().into_keys().collect();
        let r = self.block_on("index", async move {
            let mut out = Vec::new();
            for p in paths {
                if let Ok(m) = cl.stat(&p).await {
                    out.push((m.id, p));
                }
            }
            out
        });
        self.ids = r.unwrap_or_default().into_iter().collect();
    }

    fn step(&mut self, n: usize, step: &Step) {
        match step {
            Step::Join { count } => {
                for _ in 0..*count {
                    self.join(n);
                }
            }
            Step::Leave { count } => {
                for _ in 0..*count {
                    self.leave(n);
                }
            }
            Step::ScaleToZero => {
                while !self.c().members().is_empty() {
                    if !self.leave(n) {
                        break;
                    }
                }
            }
            Step::ColdStart { nodes } => {
                if self.boot(*nodes) {
                    self.lines.push(format!("step {n} cold start with {nodes} nodes"));
                    self.content_check("cold-start-content");
                    self.index_inodes();
                }
            }
            Step::PersistAll => {
                let cl = self.c().client(cachefs::fsops::Consistency::Strict);
                let mut paths: Vec<String> = self.model.files().into_keys().collect();
                paths.extend(self.model.dirs().into_keys());
                let start = self.c().sim().now();
                let r = self.block_on("persist-all", async move {
                    let mut errs = Vec::new();
                    for p in paths {
                        if let Err(e) = cl.fsync(&p).await {
                            errs.push(format!("fsync {p}: {}", exec::error_name(&e)));
                        }
                    }
                    errs
                });
                let ticks = self.c().sim().now() - start;
                self.lines.push(format!("step {n} persist all ticks {ticks}"));
                *self.metrics.entry("phase.persist.ticks".into()).or_default() += ticks;
                if let Some(errs) = r {
                    self.check("persist-all", errs);
                }
                let files = self.model.files();
                let f = check::store_holds(&self.ext.borrow(), &files);
                self.check("store", f);
            }
            Step::Crash { node } => {
                let c = self.c().clone();
                c.crash(*node);
                self.lines.push(format!("step {n} crash node {node}"));
                self.settle();
                self.content_check("content");
            }
        }
    }

    fn join(&mut self, n: usize) {
        let c = self.c().clone();
        let old = c.members();
        let holdings = Holdings::capture(&c);
        let start = c.sim().now();
        let id = match c.add_node() {
            Ok(id) => id,
            Err(e) => {
                self.findings.push(format!("step {n}: join failed: {}", exec::error_name(&e)));
                return;
            }
        };
        self.settle();
        let ticks = c.sim().now() - start - SETTLE;
        let new = c.members();
        let version = c.list().map_or(0, |l| l.version);
        let got = check::recorded_moves(&c.stats().migrations, version);
        let want = holdings.expected_moves(&old, &new);
        self.lines.push(format!(
            "step {n} join node {id} list v{version} ticks {ticks} moved {} clean-owner-changes {}",
            got.len(),
            holdings.clean_moving(&old, &new)
        ));
        *self.metrics.entry("phase.join.ticks".into()).or_default() += ticks;
        self.check("migration-oracle", check::compare_moves(&want, &got));
        let clean: Vec<String> = got
            .iter()
            .filter(|(from, _, e)| holdings.entities.iter().any(|(h, x, dirty)| h == from && x == e && !dirty && !matches!(e, check::Entity::Dir(_))))
            .map(|m| format!("clean entity migrated: {m:?}"))
            .collect();
        self.check("no-clean-migration", clean);
        self.content_check("content");
    }

    /// Removes the lowest-numbered member. Returns false when it could not.
    fn leave(&mut self, n: usize) -> bool {
        let c = self.c().clone();
        let old = c.members();
        let Some(&leaver) = old.first() else {
            self.findings.push(format!("step {n}: leave with no members"));
            return false;
        };
        let holdings = Holdings::capture(&c);
        let dirty = holdings.dirty_inodes_on(leaver);
        let membership = c.stats().membership_txs;
        let start = c.sim().now();
        if let Err(e) = c.remove_node(leaver) {
            self.findings.push(format!("step {n}: leave of node {leaver} failed: {}", exec::error_name(&e)));
            return false;
        }
        let ticks = c.sim().now() - start;
        *self.metrics.entry("phase.leave.ticks".into()).or_default() += ticks;
        let new = c.members();
        let files: BTreeMap<String, Vec<u8>> = {
            let all = self.model.files();
            dirty.iter().filter_map(|id| self.ids.get(id)).filter_map(|p| all.get(p).map(|d| (p.clone(), d.clone()))).collect()
        };
        if new.is_empty() {
            self.lines.push(format!("step {n} last node {leaver} left ticks {ticks} persisted {}", files.len()));
            let extra = c.stats().membership_txs - membership;
            let f = if extra == 0 { Vec::new() } else { vec![format!("{extra} membership transactions on the final removal")] };
            self.check("final-leave-local", f);
            let all = self.model.files();
            let f = check::store_holds(&self.ext.borrow(), &all);
            self.check("store", f);
            return true;
        }
        self.settle();
        let version = c.list().map_or(0, |l| l.version);
        let got = check::recorded_moves(&c.stats().migrations, version);
        let want: std::collections::BTreeSet<_> =
            holdings.expected_moves(&old, &new).into_iter().filter(|(_, _, e)| matches!(e, check::Entity::Dir(_))).collect();
        self.lines.push(format!("step {n} leave node {leaver} list v{version} ticks {ticks} moved {} persisted {}", got.len(), files.len()));
        self.check("migration-oracle", check::compare_moves(&want, &got));
        let f = check::store_holds(&self.ext.borrow(), &files);
        self.check("leaver-dirty-in-store", f);
        self.content_check("content");
        true
    }

    fn reconcile(&mut self) {
        let recorded: u64 = self.clusters.iter().flat_map(|c| c.stats().migrations).map(|m| m.bytes).sum();
        let logs: Vec<Rc<RefCell<MemStore>>> = self.clusters.iter().flat_map(|c| disks(c).into_iter().map(|(_, d)| d)).collect();
        let f = match check::migrated_bytes_in_logs(&logs) {
            Ok(b) if b == recorded => Vec::new(),
            Ok(b) => vec![format!("migration records carry {recorded} bytes, logs carry {b}")],
            Err(e) => vec![format!("log replay: {e}")],
        };
        self.check("reconcile", f);
    }

    fn collect_metrics(&mut self) {
        let m = &mut self.metrics;
        for c in &self.clusters {
            let st = c.stats();
            for (k, v) in [
                ("tx.committed", st.committed),
                ("tx.aborted", st.aborted),
                ("tx.retried", st.retried),
                ("tx.one_phase", st.one_phase),
                ("tx.membership", st.membership_txs),
                ("tx.protocol_errors", st.protocol_errors),
            ] {
                *m.entry(k.into()).or_default() += v;
            }
            for r in &st.migrations {
                *m.entry("migrated.metas".into()).or_default() += r.metas.len() as u64;
                *m.entry("migrated.dirs".into()).or_default() += r.dirs.len() as u64;
                *m.entry("migrated.chunks".into()).or_default() += r.chunks.len() as u64;
                *m.entry("migrated.bytes".into()).or_default() += r.bytes;
            }
        }
        for k in ["migrated.metas", "migrated.dirs", "migrated.chunks", "migrated.bytes"] {
            m.entry(k.into()).or_default();
        }
        for call in self.ext.borrow().calls() {
            *m.entry(format!("extstore.{}", call.op.name())).or_default() += 1;
        }
        let passed = m.iter().filter(|(k, _)| k.ends_with(".pass")).map(|(_, v)| *v).sum();
        let failed = m.iter().filter(|(k, _)| k.ends_with(".fail")).map(|(_, v)| *v).sum();
        m.insert("checks.passed".into(), passed);
        m.insert("checks.failed".into(), failed);
        m.insert("findings".into(), self.findings.len() as u64);
    }
}
