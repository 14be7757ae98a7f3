//! The acceptance criteria, each reduced to a pass/fail verdict with a
//! short explanation.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::time::{Duration, Instant};

use cachefs::extstore::{ObjectStore, StoreOp};
use cachefs::fsops::Consistency;
use cachefs::raftlog::{verify, Command, MemStore, RaftLog, Verification, DEFAULT_ROLLOVER};
use cachefs::server::{ClusterConfig, SimCluster};
use cachefs::simnet::{FaultAction, FaultPlan, FaultRule, FaultTarget, Matcher, SimConfig};
use cachefs::store::{ChunkKey, InodeStore};
use cachefs::{FsError, InodeId, NodeId};
use futures::future::join_all;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::check::{brute_owner, check_reads, chunk_key, compare_tree, meta_key, Event, EventKind};
use crate::exec::{self, error_name};
use crate::model::RefFs;
use crate::runner::{run_scenario, Report};
use crate::scenario::{Scenario, Step};
use crate::workload::{random_trace, Op, TraceOp};

#[derive(Clone, Debug)]
pub struct Verdict {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:>2} {} ({:.1}s): {}", self.id, self.name, self.elapsed.as_secs_f64(), self.detail)
    }
}

fn verdict(id: u32, name: &'static str, start: Instant, r: Result<String, String>) -> Verdict {
    let (pass, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Verdict { id, name, pass, detail, elapsed: start.elapsed() }
}

fn store() -> Rc<RefCell<ObjectStore>> {
    Rc::new(RefCell::new(ObjectStore::new(&["data"])))
}

fn sim(seed: u64) -> SimConfig {
    SimConfig { seed, ..SimConfig::default() }
}

fn cfg(chunk_size: u64) -> ClusterConfig {
    ClusterConfig { chunk_size, flush_interval: None, ..ClusterConfig::default() }
}

fn boot(cfg: ClusterConfig, sim_cfg: SimConfig, nodes: usize) -> Result<SimCluster, String> {
    SimCluster::with_nodes(cfg, sim_cfg, store(), nodes).map_err(|e| format!("boot: {e}"))
}

/// Runs the cluster long enough for restarts, recovery and retries to finish.
fn settle(c: &SimCluster, ticks: u64) -> Result<(), String> {
    c.sim().run_until(c.sim().now() + ticks).map(|_| ()).map_err(|e| format!("simulator {e}"))
}

fn run<T: 'static>(c: &SimCluster, fut: impl std::future::Future<Output = Result<T, FsError>> + 'static) -> Result<T, String> {
    c.block_on(fut).map_err(|e| format!("simulator {e}"))?.map_err(|e| error_name(&e))
}

fn pattern(tag: u8, len: usize) -> Vec<u8> {
    (0..len).map(|i| tag ^ (i as u8).wrapping_mul(31)).collect()
}

fn counters(c: &SimCluster) -> (u64, u64, Vec<(NodeId, bool)>) {
    let f = c.sim().faults().borrow();
    (f.durable_writes, f.messages, f.journal.clone())
}

fn crashes(c: &SimCluster) -> u64 {
    c.sim().faults().borrow().crashes
}

fn rule(target: FaultTarget, matcher: Matcher, ordinal: u64, action: FaultAction) -> FaultPlan {
    FaultPlan::none().with(FaultRule { target, matcher, ordinal: Some(ordinal), action })
}

fn calls_for(c: &SimCluster, key: &str, op: StoreOp) -> usize {
    c.ext().borrow().calls().iter().filter(|r| r.key == key && r.op == op).count()
}

// 1. Atomicity of a three-participant flush.

const FLUSH_CHUNK: u64 = 64;

struct FlushCase {
    c: SimCluster,
    path: String,
    old: Vec<u8>,
    new: Vec<u8>,
}

/// A three-node cluster holding a 192-byte file whose metadata and the
/// chunks at 64 and 128 live on three different nodes.
fn flush_case() -> Result<FlushCase, String> {
    let c = boot(cfg(FLUSH_CHUNK), sim(11), 3)?;
    let members = c.members();
    let cl = c.client(Consistency::Strict);
    let old = pattern(0x11, 192);
    let new = pattern(0x77, 128);
    let w = old.clone();
    let path = run(&c, async move {
        for i in 0..500 {
            let p = format!("/data/f{i}");
            let id = cl.create(&p).await?;
            let owners: Vec<Option<NodeId>> = [meta_key(id), chunk_key(ChunkKey { inode: id, offset: 64 }), chunk_key(ChunkKey { inode: id, offset: 128 })]
                .iter()
                .map(|k| brute_owner(&members, k))
                .collect();
            if owners[0] != owners[1] && owners[1] != owners[2] && owners[0] != owners[2] {
                cl.write(&p, 0, &w).await?;
                return Ok(Some(p));
            }
        }
        Ok(None)
    })?
    .ok_or("no file with three distinct owners")?;
    Ok(FlushCase { c, path, old, new })
}

/// Buffers two writes in a weak session and flushes them on close under
/// `plan`, while a strict reader polls the file. Returns whether the close
/// succeeded and how many polls caught the commit applied on some
/// participants but not yet on others. Reads are not isolated from that
/// window; only the settled state must be whole.
fn flush_under(case: &FlushCase, plan: FaultPlan) -> Result<(bool, u64), String> {
    let w = case.c.client(Consistency::Weak);
    let (p, new) = (case.path.clone(), case.new.clone());
    let wc = w.clone();
    let fd = run(&case.c, async move { wc.open(&p, false).await })?;
    case.c.install_faults(plan);
    let done = Rc::new(Cell::new(false));
    let (d1, d2) = (done.clone(), done.clone());
    let writer = async move {
        let r = async {
            w.write_fd(fd, 64, &new[..64]).await?;
            w.write_fd(fd, 128, &new[64..]).await?;
            w.close(fd).await
        }
        .await;
        d1.set(true);
        r
    };
    let reader = case.c.client(Consistency::Strict);
    let (p, s) = (case.path.clone(), case.c.sim().clone());
    let mut all_new = case.old[..64].to_vec();
    all_new.extend_from_slice(&case.new);
    let old = case.old.clone();
    let poller = async move {
        let mut partial = 0u64;
        while !d2.get() {
            if let Ok(got) = reader.read_file(&p).await {
                partial += u64::from(got != old && got != all_new);
            }
            s.sleep(1).await;
        }
        partial
    };
    let (closed, partial) = case.c.block_on(async move { futures::join!(writer, poller) }).map_err(|e| format!("simulator {e}"))?;
    Ok((closed.is_ok(), partial))
}

/// After a faulted flush: the file holds either the old bytes or every new
/// byte, and a later write still goes through.
fn flush_outcome(case: &FlushCase) -> Result<bool, String> {
    case.c.install_faults(FaultPlan::none());
    settle(&case.c, 600)?;
    let r = case.c.client(Consistency::Strict);
    let p = case.path.clone();
    let rr = r.clone();
    let got = run(&case.c, async move { rr.read_file(&p).await })?;
    let mut all_new = case.old[..64].to_vec();
    all_new.extend_from_slice(&case.new);
    let applied = if got == case.old {
        false
    } else if got == all_new {
        true
    } else {
        return Err(format!("{} holds a mix of old and new bytes", case.path));
    };
    let p = case.path.clone();
    let after = pattern(0x3c, 192);
    let a = after.clone();
    let back = run(&case.c, async move {
        r.write(&p, 0, &a).await?;
        r.read_file(&p).await
    })
    .map_err(|e| format!("write after the fault: {e}"))?;
    if back != after {
        return Err("write after the fault not visible".into());
    }
    Ok(applied)
}

pub fn flush_atomicity() -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let probe = flush_case()?;
        if !flush_under(&probe, FaultPlan::none())?.0 {
            return Err("fault-free flush failed".into());
        }
        let (writes, messages, journal) = counters(&probe.c);
        if !flush_outcome(&probe)? {
            return Err("fault-free flush not applied".into());
        }
        let members = probe.c.members();
        let mut per_node: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (n, _) in &journal {
            *per_node.entry(*n).or_default() += 1;
        }
        let writers = per_node.len();
        let (mut cases, mut applied, mut fired, mut partial, mut failed_closes, mut aborted) = (0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
        let mut tally = |(closed, n): (bool, u64)| {
            partial += n;
            failed_closes += u64::from(!closed);
        };
        for n in &members {
            for k in 1..=per_node.get(n).copied().unwrap_or(0) {
                for action in [FaultAction::CrashBefore, FaultAction::CrashAfter] {
                    let case = flush_case()?;
                    tally(flush_under(&case, rule(FaultTarget::Node(*n), Matcher::DurableWrite, k, action)).map_err(|e| format!("node {n} write {k} {action:?}: {e}"))?);
                    fired += u64::from(crashes(&case.c) > 0);
                    applied += u64::from(flush_outcome(&case).map_err(|e| format!("node {n} write {k} {action:?}: {e}"))?);
                    aborted += u64::from(case.c.stats().aborted > 0);
                    cases += 1;
                }
            }
        }
        for k in 1..=messages {
            let case = flush_case()?;
            tally(flush_under(&case, rule(FaultTarget::Any, Matcher::AnyMessage, k, FaultAction::Drop)).map_err(|e| format!("drop message {k}: {e}"))?);
            applied += u64::from(flush_outcome(&case).map_err(|e| format!("drop message {k}: {e}"))?);
            aborted += u64::from(case.c.stats().aborted > 0);
            cases += 1;
        }
        if writers < 3 {
            return Err(format!("flush wrote on {writers} nodes, expected 3 participants"));
        }
        if fired != 2 * writes {
            return Err(format!("{fired} of {} crash points took a node down", 2 * writes));
        }
        if start.elapsed() > Duration::from_secs(60) {
            return Err(format!("{cases} cases took {:.1}s", start.elapsed().as_secs_f64()));
        }
        Ok(format!(
            "{cases} cases ({writes} durable writes on {writers} nodes, {messages} messages): {applied} applied, {} rolled back, {aborted} aborted an attempt first, {failed_closes} closes failed, {partial} in-flight reads caught a partly applied commit",
            cases - applied
        ))
    })();
    verdict(1, "flush atomicity", start, r)
}

// 2. Racing multi-chunk writes.

pub fn racy_writes(seeds: u64) -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let (z, a, b) = (pattern(0x5a, 128), pattern(0xa5, 128), pattern(0xc3, 128));
        let mut wins = [0u64; 2];
        let (mut mid_reads, mut torn) = (0u64, 0u64);
        let mut schedules = std::collections::BTreeSet::new();
        for seed in 0..seeds {
            let sc = SimConfig { seed, jitter: 3, trace: true, ..SimConfig::default() };
            let c = boot(cfg(64), sc, 3)?;
            let init = c.client(Consistency::Strict);
            let zz = z.clone();
            run(&c, async move {
                init.create("/data/race").await?;
                init.write("/data/race", 0, &zz).await
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let delays: Vec<u64> = (0..3).map(|_| rng.gen_range(0..6)).collect();
            let s = c.sim().clone();
            let (wa, wb, rd) = (c.client(Consistency::Strict), c.client(Consistency::Strict), c.client(Consistency::Strict));
            let (da, db) = (a.clone(), b.clone());
            let (s1, s2, s3) = (s.clone(), s.clone(), s.clone());
            let (d0, d1, d2) = (delays[0], delays[1], delays[2]);
            let reads = run(&c, async move {
                let fa = async move {
                    s1.sleep(d0).await;
                    wa.write("/data/race", 0, &da).await
                };
                let fb = async move {
                    s2.sleep(d1).await;
                    wb.write("/data/race", 0, &db).await
                };
                let fr = async move {
                    s3.sleep(d2).await;
                    let mut out = Vec::new();
                    for _ in 0..4 {
                        out.push(rd.read_file("/data/race").await?);
                        s3.sleep(1).await;
                    }
                    Ok::<_, FsError>(out)
                };
                let (ra, rb, rr) = futures::join!(fa, fb, fr);
                ra?;
                rb?;
                rr
            })
            .map_err(|e| format!("seed {seed}: {e}"))?;
            settle(&c, 200)?;
            for got in &reads {
                torn += u64::from(*got != z && *got != a && *got != b);
                mid_reads += u64::from(*got == a || *got == b);
            }
            let mut finals = Vec::new();
            for _ in 0..3 {
                let cl = c.client(Consistency::Strict);
                finals.push(run(&c, async move { cl.read_file("/data/race").await })?);
            }
            if finals.iter().any(|f| *f != finals[0]) {
                return Err(format!("seed {seed}: settled readers disagree"));
            }
            if finals[0] == a {
                wins[0] += 1;
            } else if finals[0] == b {
                wins[1] += 1;
            } else {
                return Err(format!("seed {seed}: settled value is not one writer's complete data"));
            }
            schedules.insert(c.sim().trace_hash());
        }
        Ok(format!(
            "{seeds} seeds, {} distinct schedules, A won {}, B won {}; in flight {mid_reads} reads saw a whole new value, {torn} caught a partly applied commit",
            schedules.len(),
            wins[0],
            wins[1]
        ))
    })();
    verdict(2, "racy writes", start, r)
}

// 3. Crash windows around the upload and its log records.

struct UploadCase {
    c: SimCluster,
    path: String,
    data: Vec<u8>,
    coord: NodeId,
}

fn upload_case() -> Result<UploadCase, String> {
    let c = boot(cfg(64), sim(21), 3)?;
    let cl = c.client(Consistency::Strict);
    let data = pattern(0x42, 200);
    let d = data.clone();
    let id: InodeId = run(&c, async move {
        let id = cl.create("/data/up").await?;
        cl.write("/data/up", 0, &d).await?;
        Ok(id)
    })?;
    let coord = brute_owner(&c.members(), &meta_key(id)).ok_or("no owner")?;
    c.ext().borrow_mut().clear_calls();
    Ok(UploadCase { c, path: "/data/up".into(), data, coord })
}

fn wal_commands(c: &SimCluster, node: NodeId) -> Result<Vec<Command>, String> {
    let disk: MemStore = c.disk(node).ok_or("no disk")?.borrow().clone();
    let log = RaftLog::open(disk, DEFAULT_ROLLOVER).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    log.replay(|_, cmd| out.push(cmd)).map_err(|e| e.to_string())?;
    Ok(out)
}

struct UploadRun {
    /// Object content right after the fault settled, before any retry.
    after_fault: Option<Vec<u8>>,
    begins: usize,
    adds: usize,
    commits: usize,
}

fn upload_under(case: &UploadCase, plan: FaultPlan) -> Result<UploadRun, String> {
    let cl = case.c.client(Consistency::Strict);
    case.c.install_faults(plan);
    let p = case.path.clone();
    let c2 = cl.clone();
    let _ = case.c.block_on(async move { c2.fsync(&p).await });
    case.c.install_faults(FaultPlan::none());
    settle(&case.c, 600)?;
    let after_fault = case.c.ext().borrow().object("data", "up").map(<[u8]>::to_vec);
    if after_fault.as_ref().is_some_and(|o| *o != case.data) {
        return Err("object holds partial content".into());
    }
    let p = case.path.clone();
    let meta = run(&case.c, async move {
        cl.fsync(&p).await?;
        let bytes = cl.read_file(&p).await?;
        Ok((cl.stat(&p).await?, bytes))
    })?;
    if meta.0.dirty || meta.1 != case.data {
        return Err("file dirty or changed after the retried fsync".into());
    }
    if case.c.ext().borrow().object("data", "up") != Some(&case.data[..]) {
        return Err("object differs after the retried fsync".into());
    }
    Ok(UploadRun {
        after_fault,
        begins: calls_for(&case.c, "up", StoreOp::MpuBegin),
        adds: calls_for(&case.c, "up", StoreOp::MpuAdd),
        commits: calls_for(&case.c, "up", StoreOp::MpuCommit),
    })
}

pub fn upload_crash_windows() -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let probe = upload_case()?;
        let before = wal_commands(&probe.c, probe.coord)?.len();
        let cl = probe.c.client(Consistency::Strict);
        probe.c.install_faults(FaultPlan::none());
        run(&probe.c, async move { cl.fsync("/data/up").await })?;
        let (writes, _, journal) = counters(&probe.c);
        let base = upload_under(&probe, FaultPlan::none())?;
        if base.begins != 1 || base.commits != 1 {
            return Err(format!("fault-free fsync made {} begins and {} commits", base.begins, base.commits));
        }
        // Position of the inode record among the coordinator's new log entries,
        // then among all of its durable writes.
        let new_cmds = &wal_commands(&probe.c, probe.coord)?[before..];
        let pos = new_cmds
            .iter()
            .position(|c| matches!(c, Command::PersistedInodeRecord(_)))
            .ok_or("no inode record logged")?;
        let mut primary_seen = 0;
        let mut ordinal = None;
        for (i, (n, primary)) in journal.iter().filter(|(n, _)| *n == probe.coord).enumerate() {
            let _ = n;
            if *primary {
                if primary_seen == pos {
                    ordinal = Some(i as u64 + 1);
                    break;
                }
                primary_seen += 1;
            }
        }
        let ordinal = ordinal.ok_or("inode record not in the write journal")?;
        let mut per_node: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (n, _) in &journal {
            *per_node.entry(*n).or_default() += 1;
        }
        let mut cases = 0;
        let mut window = None;
        for (n, count) in &per_node {
            for k in 1..=*count {
                for action in [FaultAction::CrashBefore, FaultAction::CrashAfter] {
                    let case = upload_case()?;
                    let out = upload_under(&case, rule(FaultTarget::Node(*n), Matcher::DurableWrite, k, action))
                        .map_err(|e| format!("node {n} write {k} {action:?}: {e}"))?;
                    cases += 1;
                    if *n == probe.coord && k == ordinal && action == FaultAction::CrashBefore {
                        window = Some(out);
                    }
                }
            }
        }
        let w = window.ok_or("inode record window not exercised")?;
        if w.after_fault.as_deref() != Some(&probe.data[..]) {
            return Err("upload committed before the crash is missing".into());
        }
        if w.begins != base.begins + 1 || w.commits != base.commits + 1 || w.adds != 2 * base.adds {
            return Err(format!(
                "crash before the inode record: {} begins, {} parts, {} commits; want one extra sequence over {}/{}/{}",
                w.begins, w.adds, w.commits, base.begins, base.adds, base.commits
            ));
        }
        Ok(format!(
            "{cases} crash cases over {writes} durable writes; crash before inode record (write {ordinal} on node {}) re-uploads once with identical bytes",
            probe.coord
        ))
    })();
    verdict(3, "fsync crash windows", start, r)
}

// 4. Small objects skip the multipart path.

pub fn small_object_path() -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let chunk = 4096u64;
        let c = boot(cfg(chunk), sim(4), 3)?;
        let mut lines = Vec::new();
        for (name, size) in [("tiny", 100u64), ("exact", chunk), ("over", chunk + 1)] {
            let cl = c.client(Consistency::Strict);
            let p = format!("/data/{name}");
            let data = pattern(size as u8, size as usize);
            run(&c, async move {
                cl.create(&p).await?;
                cl.write(&p, 0, &data).await?;
                cl.fsync(&p).await
            })?;
            let puts = calls_for(&c, name, StoreOp::Put);
            let mpu: usize = [StoreOp::MpuBegin, StoreOp::MpuAdd, StoreOp::MpuCommit].iter().map(|op| calls_for(&c, name, *op)).sum();
            let ok = if size <= chunk {
                puts == 1 && mpu == 0
            } else {
                puts == 0 && calls_for(&c, name, StoreOp::MpuBegin) == 1 && calls_for(&c, name, StoreOp::MpuAdd) == 2 && calls_for(&c, name, StoreOp::MpuCommit) == 1
            };
            if !ok {
                return Err(format!("{size} bytes: {puts} puts, {mpu} multipart calls"));
            }
            lines.push(format!("{size}B {puts} put/{mpu} mpu"));
        }
        Ok(lines.join(", "))
    })();
    verdict(4, "small-object path", start, r)
}

// 5 and 6. Scenario-driven membership changes.

const SCALE_UP: &str = include_str!("../../../scenarios/scale_up_dirty.toml");
const ZERO_SCALE: &str = include_str!("../../../scenarios/zero_scale_roundtrip.toml");

fn metric(r: &Report, key: &str) -> u64 {
    r.metrics.get(key).copied().unwrap_or(0)
}

fn report_failure(r: &Report) -> String {
    let first = r.findings.first().cloned().unwrap_or_default();
    format!("{} findings, first: {first}", r.findings.len())
}

pub fn scaled_scale_up() -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let s = Scenario::parse(SCALE_UP, "scale_up_dirty.toml").map_err(|e| e.to_string())?;
        let w = &s.workload;
        let shape = (s.nodes, w.files, w.dirs, w.min_size, w.max_size, s.chunk_size);
        if shape != (1, 1024, 32, 4 << 10, 32 << 10, 64 << 10) || s.steps != [Step::Join { count: 7 }, Step::Leave { count: 8 }] {
            return Err("scenario shape differs from 1024 files in 32 dirs, 4-32 KiB, 64 KiB chunks, 1->8->0".into());
        }
        let rep = run_scenario(&s, None);
        if !rep.passed() {
            return Err(report_failure(&rep));
        }
        let oracle = metric(&rep, "check.migration-oracle.pass");
        let clean = metric(&rep, "check.no-clean-migration.pass");
        let stored = metric(&rep, "check.leaver-dirty-in-store.pass") + metric(&rep, "check.final-leave-local.pass");
        let content = metric(&rep, "check.content.pass");
        if oracle != 14 || clean != 7 || stored != 8 || content < 15 {
            return Err(format!("oracle {oracle}/14, clean {clean}/7, stored {stored}/8, content {content}/15"));
        }
        if start.elapsed() > Duration::from_secs(120) {
            return Err(format!("took {:.1}s", start.elapsed().as_secs_f64()));
        }
        Ok(format!(
            "14 membership changes match the oracle, {} metas, {} chunks, {} bytes migrated",
            metric(&rep, "migrated.metas"),
            metric(&rep, "migrated.chunks"),
            metric(&rep, "migrated.bytes")
        ))
    })();
    verdict(5, "scaled scale-up", start, r)
}

pub fn zero_scale_round_trip() -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let s = Scenario::parse(ZERO_SCALE, "zero_scale_roundtrip.toml").map_err(|e| e.to_string())?;
        let rep = run_scenario(&s, None);
        if !rep.passed() {
            return Err(report_failure(&rep));
        }
        for name in ["final-leave-local", "cold-start-content"] {
            if metric(&rep, &format!("check.{name}.pass")) != 1 {
                return Err(format!("check {name} did not run"));
            }
        }
        Ok(format!("{} files restored with identical bytes and listings", s.workload.files + s.clean_files))
    })();
    verdict(6, "zero-scale round trip", start, r)
}

// 7. Consistency modes.

const HISTORY_CLIENTS: u64 = 3;
const HISTORY_OPS: u64 = 500;

/// A 16-byte value spanning two 8-byte chunks, each chunk an independent
/// register: the first holds `v`, the second `!v`.
fn encode(v: u64) -> Vec<u8> {
    let mut out = v.to_le_bytes().to_vec();
    out.extend_from_slice(&(!v).to_le_bytes());
    out
}

/// The value each chunk of a read holds, or `None` for a short read.
fn decode(b: &[u8]) -> [Option<u64>; 2] {
    if b.len() != 16 {
        return [None, None];
    }
    let lo = u64::from_le_bytes(b[..8].try_into().unwrap());
    let hi = !u64::from_le_bytes(b[8..].try_into().unwrap());
    [Some(lo), Some(hi)]
}

fn strict_history() -> Result<String, String> {
    let sc = SimConfig { seed: 7, jitter: 2, ..SimConfig::default() };
    let c = boot(cfg(8), sc, 3)?;
    let keys: Vec<String> = (0..4).map(|i| format!("/data/k{i}")).collect();
    let init = c.client(Consistency::Strict);
    let ks = keys.clone();
    run(&c, async move {
        for k in &ks {
            init.create(k).await?;
            init.write(k, 0, &encode(0)).await?;
        }
        Ok(())
    })?;
    let clock = Rc::new(Cell::new(0u64));
    let history = Rc::new(RefCell::new(Vec::new()));
    let sessions: Vec<_> = (0..HISTORY_CLIENTS)
        .map(|s| {
            let cl = c.client(Consistency::Strict);
            let (clock, history, keys) = (clock.clone(), history.clone(), keys.clone());
            async move {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
                for i in 0..HISTORY_OPS {
                    let key = keys[rng.gen_range(0..keys.len())].clone();
                    let tick = || {
                        clock.set(clock.get() + 1);
                        clock.get()
                    };
                    let invoke = tick();
                    let kinds = if rng.gen_bool(0.5) {
                        let v = (s + 1) << 32 | (i + 1);
                        cl.write(&key, 0, &encode(v)).await?;
                        [EventKind::Write(v); 2]
                    } else {
                        decode(&cl.read_file(&key).await?).map(EventKind::Read)
                    };
                    let response = tick();
                    for (half, kind) in kinds.into_iter().enumerate() {
                        history.borrow_mut().push(Event { key: format!("{key}#{half}"), invoke, response, kind });
                    }
                }
                Ok::<_, FsError>(())
            }
        })
        .collect();
    run(&c, async move {
        for r in join_all(sessions).await {
            r?;
        }
        Ok(())
    })?;
    let h = history.borrow();
    let findings = check_reads(&h, 0);
    if let Some(f) = findings.first() {
        return Err(format!("strict: {} findings, first: {f}", findings.len()));
    }
    let overlapping = h.iter().filter(|e| h.iter().any(|o| o.key == e.key && o.invoke < e.response && e.invoke < o.response && o != *e)).count();
    let ops = HISTORY_CLIENTS * HISTORY_OPS;
    Ok(format!("strict {ops} ops ({} chunk events, {overlapping} overlapping) pass the read-after-write check", h.len()))
}

const WEAK_WRITES: u64 = 16;
const WEAK_BLOCK: usize = 16 << 10;

fn weak_close_to_open() -> Result<String, String> {
    let c = boot(cfg(64 << 10), sim(8), 3)?;
    let writer = c.client(Consistency::Weak);
    let mut batches = Vec::new();
    for round in 0..3u8 {
        let data: Vec<u8> = (0..WEAK_WRITES as usize).flat_map(|i| pattern(round.wrapping_mul(16).wrapping_add(i as u8), WEAK_BLOCK)).collect();
        let before = writer.stats();
        let (w, d) = (writer.clone(), data.clone());
        run(&c, async move {
            let fd = w.open("/data/batch", round == 0).await?;
            for i in 0..WEAK_WRITES as usize {
                let off = i * WEAK_BLOCK;
                w.write_fd(fd, off as u64, &d[off..off + WEAK_BLOCK]).await?;
            }
            w.close(fd).await
        })?;
        let after = writer.stats();
        let flushes = after.flushes - before.flushes;
        let per = after.writes_per_flush[before.writes_per_flush.len()..].to_vec();
        if flushes == 0 || flushes >= WEAK_WRITES || per.iter().any(|n| *n < 2) || per.iter().sum::<usize>() != WEAK_WRITES as usize {
            return Err(format!("round {round}: {flushes} flushes carrying {per:?} writes"));
        }
        batches.extend(per);
        let reader = c.client(Consistency::Weak);
        let got = run(&c, async move {
            let fd = reader.open("/data/batch", false).await?;
            let got = reader.read_fd(fd, 0, WEAK_WRITES * WEAK_BLOCK as u64).await?;
            reader.close(fd).await?;
            Ok(got)
        })?;
        if got != data {
            return Err(format!("round {round}: open after close did not see the closed content"));
        }
    }
    Ok(format!("weak close-to-open over 3 rounds, writes per flush {batches:?}"))
}

pub fn consistency_modes() -> Verdict {
    let start = Instant::now();
    let r = strict_history().and_then(|s| weak_close_to_open().map(|w| format!("{s}; {w}")));
    verdict(7, "consistency modes", start, r)
}

// 8. Duplicate delivery.

struct DupRun {
    outcomes: Vec<String>,
    objects: Vec<(String, String, Vec<u8>)>,
    stores: BTreeMap<NodeId, InodeStore>,
    protocol_errors: u64,
    tree: Vec<String>,
}

/// Node state with clock readings cleared: duplicate deliveries shift the
/// schedule, so timestamps legitimately differ between the two runs.
fn normalized(store: &InodeStore) -> InodeStore {
    let mut s = store.clone();
    for m in s.metas.values_mut() {
        m.mtime = 0;
        m.dirty_since = 0;
    }
    s
}

fn dup_run(seed: u64, duplicate: bool) -> Result<DupRun, String> {
    let c = boot(cfg(32), sim(seed), 3)?;
    if duplicate {
        c.install_faults(FaultPlan::none().with(FaultRule {
            target: FaultTarget::Any,
            matcher: Matcher::AnyMessage,
            ordinal: None,
            action: FaultAction::Duplicate,
        }));
    }
    let mut trace = random_trace(seed, 150, "data");
    let mut model = RefFs::new(&["data".to_string()]);
    trace.iter().for_each(|t| {
        model.apply(&t.op);
    });
    trace.extend(model.files().into_keys().map(|path| TraceOp { session: 0, op: Op::Fsync { path } }));
    let outcomes = Rc::new(RefCell::new(Vec::new()));
    let apply = |c: &SimCluster, ops: Vec<TraceOp>| -> Result<(), String> {
        let cl = c.client(Consistency::Strict);
        let out = outcomes.clone();
        c.block_on(async move {
            for t in ops {
                let got = exec::apply(&cl, &t.op).await;
                out.borrow_mut().push(format!("{t} => {got}"));
            }
        })
        .map_err(|e| format!("simulator {e}"))
    };
    apply(&c, trace)?;
    c.add_node().map_err(|e| format!("join: {e}"))?;
    settle(&c, 200)?;
    let more = random_trace(seed + 1000, 60, "data");
    apply(&c, more)?;
    let lowest = *c.members().first().ok_or("no members")?;
    c.remove_node(lowest).map_err(|e| format!("leave: {e}"))?;
    settle(&c, 200)?;
    let cl = c.client(Consistency::Strict);
    let tree = run(&c, async move {
        let mut out = Vec::new();
        let mut stack = vec!["/data".to_string()];
        while let Some(d) = stack.pop() {
            for (name, kind) in cl.readdir(&d).await? {
                let p = format!("{d}/{name}");
                if kind == cachefs::store::EntryKind::Directory {
                    stack.push(p.clone());
                    out.push(format!("{p}/"));
                } else {
                    let bytes = cl.read_file(&p).await?;
                    out.push(format!("{p} {}", crate::workload::digest(&bytes)));
                }
            }
        }
        out.sort();
        Ok(out)
    })?;
    let objects = c.ext().borrow().objects().map(|(b, k, d)| (b.to_string(), k.to_string(), d.to_vec())).collect();
    let stores = c.members().into_iter().filter_map(|n| c.with_node(n, |node| (n, normalized(&node.store)))).collect();
    let outcomes = outcomes.borrow().clone();
    Ok(DupRun { outcomes, objects, stores, protocol_errors: c.stats().protocol_errors, tree })
}

pub fn duplicate_messages(seeds: u64) -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let mut ops = 0;
        for seed in 0..seeds {
            let plain = dup_run(seed, false)?;
            let dup = dup_run(seed, true)?;
            if let Some(i) = (0..plain.outcomes.len()).find(|i| plain.outcomes.get(*i) != dup.outcomes.get(*i)) {
                return Err(format!("seed {seed} op {i}: {} vs {:?}", plain.outcomes[i], dup.outcomes.get(i)));
            }
            if plain.outcomes.len() != dup.outcomes.len() {
                return Err(format!("seed {seed}: reply counts differ"));
            }
            if plain.tree != dup.tree {
                return Err(format!("seed {seed}: namespace differs"));
            }
            if plain.objects != dup.objects {
                return Err(format!("seed {seed}: object store differs"));
            }
            if plain.stores != dup.stores {
                let n = plain.stores.keys().find(|n| plain.stores.get(n) != dup.stores.get(n));
                return Err(format!("seed {seed}: node {n:?} state differs"));
            }
            if dup.protocol_errors != 0 {
                return Err(format!("seed {seed}: {} protocol errors", dup.protocol_errors));
            }
            ops += plain.outcomes.len();
        }
        Ok(format!("{seeds} runs, {ops} replies and all node state identical under duplication"))
    })();
    verdict(8, "duplicate messages", start, r)
}

// 9. Golden log fixtures.

const FIXTURES: [(&str, &[u8], usize); 2] = [
    ("two_appends.wal", include_bytes!("../../core/tests/fixtures/two_appends.wal"), 2),
    ("three_entries.wal", include_bytes!("../../core/tests/fixtures/three_entries.wal"), 3),
];

fn open_bytes(bytes: &[u8]) -> Result<RaftLog<MemStore>, String> {
    let mut s = MemStore::new();
    s.wal_bytes_mut().extend_from_slice(bytes);
    RaftLog::open(s, DEFAULT_ROLLOVER).map_err(|e| e.to_string())
}

pub fn golden_fixtures() -> Verdict {
    let start = Instant::now();
    let r = (|| {
        let mut flips = 0;
        for (name, bytes, entries) in FIXTURES {
            if verify(bytes) != (Verification::Ok { entries: entries as u64 }) {
                return Err(format!("{name} does not verify"));
            }
            let mut cmds = Vec::new();
            open_bytes(bytes)?.replay(|_, c| cmds.push(c)).map_err(|e| e.to_string())?;
            if cmds.len() != entries || !matches!(cmds[0], Command::NodeListUpdate(_)) {
                return Err(format!("{name} decoded to {cmds:?}"));
            }
            let mut rebuilt = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).map_err(|e| e.to_string())?;
            for c in &cmds {
                rebuilt.append(c).map_err(|e| e.to_string())?;
            }
            if rebuilt.store().wal_bytes() != bytes {
                return Err(format!("{name} re-encodes differently"));
            }
            for bit in 0..bytes.len() * 8 {
                let mut bad = bytes.to_vec();
                bad[bit / 8] ^= 1 << (bit % 8);
                if !matches!(verify(&bad), Verification::Corrupt { .. }) || open_bytes(&bad).is_ok() {
                    return Err(format!("{name}: flip of bit {bit} went unnoticed"));
                }
                flips += 1;
            }
        }
        Ok(format!("2 fixtures decode and re-encode, {flips} single-bit flips all halt replay"))
    })();
    verdict(9, "golden fixtures", start, r)
}

/// Single-session random traces against the reference model.
pub fn reference_model(traces: u64, len: usize) -> Verdict {
    let start = Instant::now();
    let mut ops = 0;
    let r = (|| {
        for seed in 0..traces {
            let cfg = ClusterConfig { chunk_size: 32, flush_interval: Some(40), ..ClusterConfig::default() };
            let c = SimCluster::with_nodes(cfg, sim(seed), store(), 3).map_err(|e| format!("seed {seed}: boot {e}"))?;
            let cl = c.client(Consistency::Strict);
            let trace = random_trace(seed, len, "data");
            ops += trace.len();
            let findings = c
                .block_on(async move {
                    let mut model = RefFs::new(&["data".to_string()]);
                    for (i, t) in trace.iter().enumerate() {
                        let want = model.apply(&t.op);
                        let got = exec::apply(&cl, &t.op).await;
                        if got != want {
                            return vec![format!("op {i} `{t}`: got {got}, want {want}")];
                        }
                    }
                    compare_tree(&cl, &model).await
                })
                .map_err(|e| format!("seed {seed}: {e}"))?;
            if let Some(f) = findings.first() {
                return Err(format!("seed {seed}: {f}"));
            }
        }
        Ok(format!("{traces} traces, {ops} ops match"))
    })();
    verdict(10, "reference model", start, r)
}

pub fn run_all() -> Vec<Verdict> {
    vec![
        flush_atomicity(),
        racy_writes(200),
        upload_crash_windows(),
        small_object_path(),
        scaled_scale_up(),
        zero_scale_round_trip(),
        consistency_modes(),
        duplicate_messages(3),
        golden_fixtures(),
        reference_model(50, 200),
    ]
}
