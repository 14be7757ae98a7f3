use std::cell::RefCell;
use std::rc::Rc;

use cachefs::extstore::{ObjectStore, StoreOp};
use cachefs::fsops::Consistency;
use cachefs::server::{ClusterConfig, SimCluster};
use cachefs::simnet::SimConfig;
use cachefs::store::EntryKind;
use cachefs::FsError;

fn cfg(chunk: u64) -> ClusterConfig {
    ClusterConfig { chunk_size: chunk, flush_interval: None, ..ClusterConfig::default() }
}

fn cluster(nodes: usize, chunk: u64) -> SimCluster {
    let ext = Rc::new(RefCell::new(ObjectStore::new(&["data"])));
    SimCluster::with_nodes(cfg(chunk), SimConfig::default(), ext, nodes).unwrap()
}

fn pattern(len: usize, salt: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
}

#[test]
fn write_then_read_across_chunks() {
    let c = cluster(3, 64);
    let cl = c.client(Consistency::Strict);
    let out = c
        .block_on(async move {
            cl.mkdir("/data/a").await?;
            cl.create("/data/a/f").await?;
            cl.write("/data/a/f", 10, &pattern(200, 1)).await?;
            cl.write("/data/a/f", 100, &pattern(50, 9)).await?;
            let all = cl.read_file("/data/a/f").await?;
            let ls = cl.readdir("/data/a").await?;
            Ok::<_, FsError>((all, ls))
        })
        .unwrap()
        .unwrap();
    let mut want = vec![0u8; 210];
    want[10..210].copy_from_slice(&pattern(200, 1));
    want[100..150].copy_from_slice(&pattern(50, 9));
    assert_eq!(out.0, want);
    assert_eq!(out.1, vec![("f".to_string(), EntryKind::File)]);
}

#[test]
fn small_file_persists_with_one_put() {
    let c = cluster(2, 64);
    let cl = c.client(Consistency::Strict);
    let c2 = c.clone();
    c.block_on(async move {
        cl.write_file("/data/s", &pattern(64, 3)).await.unwrap();
        c2.ext().borrow_mut().clear_calls();
        cl.fsync("/data/s").await.unwrap();
    })
    .unwrap();
    let ext = c.ext().borrow();
    assert_eq!(ext.call_count(StoreOp::Put), 1);
    assert_eq!(ext.calls().iter().filter(|r| r.op.is_mpu()).count(), 0);
    assert_eq!(ext.object("data", "s").unwrap(), &pattern(64, 3)[..]);
}

#[test]
fn large_file_persists_with_multipart() {
    let c = cluster(2, 64);
    let cl = c.client(Consistency::Strict);
    let c2 = c.clone();
    c.block_on(async move {
        cl.write_file("/data/l", &pattern(65, 4)).await.unwrap();
        c2.ext().borrow_mut().clear_calls();
        cl.fsync("/data/l").await.unwrap();
    })
    .unwrap();
    let ext = c.ext().borrow();
    assert_eq!(ext.call_count(StoreOp::Put), 0);
    assert_eq!(ext.call_count(StoreOp::MpuBegin), 1);
    assert_eq!(ext.call_count(StoreOp::MpuCommit), 1);
    assert_eq!(ext.object("data", "l").unwrap(), &pattern(65, 4)[..]);
}

#[test]
fn rename_and_unlink() {
    let ext = Rc::new(RefCell::new(ObjectStore::new(&["data"])));
    let cfg = ClusterConfig { chunk_size: 32, flush_interval: Some(100), ..ClusterConfig::default() };
    let c = SimCluster::with_nodes(cfg, SimConfig::default(), ext, 3).unwrap();
    let cl = c.client(Consistency::Strict);
    let r = c
        .block_on(async move {
            cl.mkdir("/data/d").await?;
            cl.write_file("/data/d/x", &pattern(100, 5)).await?;
            cl.fsync("/data/d/x").await?;
            cl.rename("/data/d/x", "/data/y").await?;
            cl.write("/data/y", 0, b"hello").await?;
            let y = cl.read_file("/data/y").await?;
            let gone = cl.exists("/data/d/x").await?;
            cl.fsync("/data/y").await?;
            cl.unlink("/data/y").await?;
            let after = cl.exists("/data/y").await?;
            Ok::<_, FsError>((y, gone, after))
        })
        .unwrap()
        .unwrap();
    let mut want = pattern(100, 5);
    want[..5].copy_from_slice(b"hello");
    assert_eq!(r.0, want);
    assert!(!r.1);
    assert!(!r.2);
    c.sim().run_until(c.sim().now() + 2000).unwrap();
    let ext = c.ext().borrow();
    assert!(ext.object("data", "d/x").is_none());
    assert!(ext.object("data", "y").is_none());
}

#[test]
fn truncate_zero_fills_on_growth() {
    let c = cluster(1, 16);
    let cl = c.client(Consistency::Strict);
    let r = c
        .block_on(async move {
            cl.write_file("/data/t", &pattern(40, 6)).await?;
            cl.fsync("/data/t").await?;
            cl.truncate("/data/t", 5).await?;
            cl.truncate("/data/t", 30).await?;
            cl.read_file("/data/t").await
        })
        .unwrap()
        .unwrap();
    let mut want = vec![0u8; 30];
    want[..5].copy_from_slice(&pattern(5, 6));
    assert_eq!(r, want);
}

#[test]
fn weak_session_batches_until_close() {
    let c = cluster(2, 64);
    let w = c.client(Consistency::Weak);
    let r = c.client(Consistency::Strict);
    let (before, after, stats) = c
        .block_on(async move {
            let fd = w.open("/data/w", true).await?;
            for i in 0..16u64 {
                w.write_fd(fd, i * 4, &[i as u8; 4]).await?;
            }
            let before = r.read_file("/data/w").await?;
            w.close(fd).await?;
            let after = r.read_file("/data/w").await?;
            Ok::<_, FsError>((before, after, w.stats()))
        })
        .unwrap()
        .unwrap();
    assert!(before.is_empty());
    assert_eq!(after.len(), 64);
    assert_eq!(stats.writes_per_flush, vec![16]);
}

#[test]
fn crash_and_restart_keeps_committed_data() {
    let c = cluster(3, 32);
    let cl = c.client(Consistency::Strict);
    let c2 = c.clone();
    let r = c
        .block_on(async move {
            cl.write_file("/data/k", &pattern(90, 7)).await?;
            for n in c2.members() {
                c2.crash(n);
            }
            c2.sim().sleep(100).await;
            cl.read_file("/data/k").await
        })
        .unwrap()
        .unwrap();
    assert_eq!(r, pattern(90, 7));
}

#[test]
fn join_and_leave_preserve_files() {
    let c = cluster(1, 32);
    let cl = c.client(Consistency::Strict);
    let files: Vec<(String, Vec<u8>)> = (0..12).map(|i| (format!("/data/d{}/f{i}", i % 3), pattern(20 + i * 7, i as u8))).collect();
    let f2 = files.clone();
    let cl2 = cl.clone();
    c.block_on(async move {
        for d in 0..3 {
            cl2.mkdir(&format!("/data/d{d}")).await.unwrap();
        }
        for (p, d) in &f2 {
            cl2.write_file(p, d).await.unwrap();
        }
    })
    .unwrap();
    let check = |c: &SimCluster| {
        let cl = cl.clone();
        let files = files.clone();
        c.block_on(async move {
            for (p, d) in &files {
                assert_eq!(&cl.read_file(p).await.unwrap(), d, "{p}");
            }
        })
        .unwrap();
    };
    for _ in 0..3 {
        c.add_node().unwrap();
        check(&c);
    }
    assert_eq!(c.members().len(), 4);
    for n in c.members().into_iter().take(3) {
        c.remove_node(n).unwrap();
        check(&c);
    }
    assert_eq!(c.members().len(), 1);
}

#[test]
fn leaving_to_zero_then_cold_start() {
    let ext = Rc::new(RefCell::new(ObjectStore::new(&["data"])));
    let c = SimCluster::with_nodes(cfg(32), SimConfig::default(), ext.clone(), 3).unwrap();
    let cl = c.client(Consistency::Strict);
    let files: Vec<(String, Vec<u8>)> = (0..8).map(|i| (format!("/data/d{}/f{i}", i % 2), pattern(10 + i * 13, i as u8))).collect();
    let f2 = files.clone();
    c.block_on(async move {
        for d in 0..2 {
            cl.mkdir(&format!("/data/d{d}")).await.unwrap();
        }
        for (p, d) in &f2 {
            cl.write_file(p, d).await.unwrap();
        }
    })
    .unwrap();
    let before = c.stats().membership_txs;
    for n in c.members() {
        c.remove_node(n).unwrap();
    }
    assert_eq!(c.stats().membership_txs, before + 2);
    for (p, d) in &files {
        assert_eq!(ext.borrow().object("data", &p["/data/".len()..]).unwrap(), &d[..]);
    }

    let cold = SimCluster::with_nodes(cfg(32), SimConfig::default(), ext, 2).unwrap();
    let cl = cold.client(Consistency::Strict);
    let paths: Vec<String> = files.iter().map(|(p, _)| p.clone()).collect();
    let (listing, read) = cold
        .block_on(async move {
            let mut read = Vec::new();
            for p in &paths {
                read.push(cl.read_file(p).await.unwrap());
            }
            (cl.readdir("/data/d0").await.unwrap(), read)
        })
        .unwrap();
    let names: Vec<String> = listing.into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["f0", "f2", "f4", "f6"]);
    for ((_, d), r) in files.iter().zip(&read) {
        assert_eq!(d, r);
    }
}

/// A refused create leaves nothing in the log; its duplicate must be
/// answered from the reply cache rather than planned again, which would
/// burn an inode id.
#[test]
fn duplicated_refusal_is_not_replanned() {
    use cachefs::simnet::{FaultAction, FaultPlan, FaultRule, FaultTarget, Matcher};
    let run = |dup: bool| {
        let c = cluster(1, 64);
        if dup {
            c.install_faults(FaultPlan::none().with(FaultRule {
                target: FaultTarget::Any,
                matcher: Matcher::AnyMessage,
                ordinal: None,
                action: FaultAction::Duplicate,
            }));
        }
        let cl = c.client(Consistency::Strict);
        c.block_on(async move {
            cl.create("/data/a").await.unwrap();
            assert_eq!(cl.create("/data/a").await, Err(FsError::Exists));
            cl.create("/data/b").await.unwrap()
        })
        .unwrap()
    };
    assert_eq!(run(true), run(false));
}
