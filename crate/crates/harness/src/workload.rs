//! Operation traces and the generators that produce them.

use std::fmt;

use cachefs::ring::fnv1a64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::RefFs;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Mkdir { path: String },
    Create { path: String },
    Write { path: String, offset: u64, data: Vec<u8> },
    Read { path: String, offset: u64, len: u64 },
    Truncate { path: String, size: u64 },
    Unlink { path: String },
    Rmdir { path: String },
    Rename { from: String, to: String },
    Readdir { path: String },
    Fsync { path: String },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Mkdir { .. } => "mkdir",
            Op::Create { .. } => "create",
            Op::Write { .. } => "write",
            Op::Read { .. } => "read",
            Op::Truncate { .. } => "truncate",
            Op::Unlink { .. } => "unlink",
            Op::Rmdir { .. } => "rmdir",
            Op::Rename { .. } => "rename",
            Op::Readdir { .. } => "readdir",
            Op::Fsync { .. } => "fsync",
        }
    }

    /// Path field of the trace line; renames render as `from->to`.
    pub fn path(&self) -> String {
        match self {
            Op::Rename { from, to } => format!("{from}->{to}"),
            Op::Mkdir { path }
            | Op::Create { path }
            | Op::Write { path, .. }
            | Op::Read { path, .. }
            | Op::Truncate { path, .. }
            | Op::Unlink { path }
            | Op::Rmdir { path }
            | Op::Readdir { path }
            | Op::Fsync { path } => path.clone(),
        }
    }

    fn range(&self) -> (u64, u64) {
        match self {
            Op::Write { offset, data, .. } => (*offset, data.len() as u64),
            Op::Read { offset, len, .. } => (*offset, *len),
            Op::Truncate { size, .. } => (*size, 0),
            _ => (0, 0),
        }
    }
}

pub fn digest(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// One operation issued by one session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceOp {
    pub session: usize,
    pub op: Op,
}

impl fmt::Display for TraceOp {
    /// `op path offset length digest session`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (offset, len) = self.op.range();
        let dig = match &self.op {
            Op::Write { data, .. } => digest(data),
            _ => "-".into(),
        };
        write!(f, "{} {} {} {} {} {}", self.op.name(), self.op.path(), offset, len, dig, self.session)
    }
}

/// What an operation returned, in a form both the cluster and the
/// reference model can produce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Data(Vec<u8>),
    Listing(Vec<(String, bool)>),
    Failed(String),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Done => write!(f, "ok"),
            Outcome::Data(d) => write!(f, "data:{}:{}", d.len(), digest(d)),
            Outcome::Listing(l) => {
                let text: Vec<String> = l.iter().map(|(n, dir)| if *dir { format!("{n}/") } else { n.clone() }).collect();
                write!(f, "list:{}:{}", l.len(), digest(text.join("\n").as_bytes()))
            }
            Outcome::Failed(e) => write!(f, "err:{e}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Whole-file writes in one call.
    Sequential,
    /// Fixed-size blocks written in shuffled order.
    #[default]
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub files: usize,
    pub dirs: usize,
    pub min_size: u64,
    pub max_size: u64,
    #[serde(default = "default_block")]
    pub block: u64,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default = "default_bucket")]
    pub bucket: String,
    /// Read every file back after writing it.
    #[serde(default)]
    pub read_back: bool,
}

fn default_block() -> u64 {
    4096
}

fn default_clients() -> usize {
    1
}

fn default_bucket() -> String {
    "data".into()
}

impl WorkloadSpec {
    pub fn dir_path(&self, d: usize) -> String {
        format!("/{}/dir{d:03}", self.bucket)
    }

    pub fn file_path(&self, f: usize) -> String {
        format!("{}/file{f:05}", self.dir_path(f % self.dirs.max(1)))
    }
}

/// Deterministic bytes for write number `n` of a trace seeded with `seed`.
pub fn payload(seed: u64, n: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out = vec![0u8; len];
    rng.fill(&mut out[..]);
    out
}

/// Builds the trace for `spec`: directories first (session 0), then each
/// file created and written by session `file % clients`. Sizes are drawn
/// uniformly from `[min_size, max_size]`.
pub fn gen_workload(spec: &WorkloadSpec, seed: u64) -> Vec<TraceOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let clients = spec.clients.max(1);
    for d in 0..spec.dirs {
        out.push(TraceOp { session: 0, op: Op::Mkdir { path: spec.dir_path(d) } });
    }
    let mut n = 0u64;
    for f in 0..spec.files {
        let session = f % clients;
        let path = spec.file_path(f);
        let size = rng.gen_range(spec.min_size..=spec.max_size.max(spec.min_size));
        out.push(TraceOp { session, op: Op::Create { path: path.clone() } });
        let mut blocks: Vec<(u64, u64)> = match spec.pattern {
            Pattern::Sequential => vec![(0, size)],
            Pattern::Random => {
                let b = spec.block.max(1);
                (0..size.div_ceil(b)).map(|i| (i * b, b.min(size - i * b))).collect()
            }
        };
        if spec.pattern == Pattern::Random {
            blocks.shuffle(&mut rng);
        }
        for (offset, len) in blocks {
            n += 1;
            let data = payload(seed, n, len as usize);
            out.push(TraceOp { session, op: Op::Write { path: path.clone(), offset, data } });
        }
        if spec.read_back {
            out.push(TraceOp { session, op: Op::Read { path, offset: 0, len: size } });
        }
    }
    out
}

/// A random single-session trace over a small namespace, mixing valid
/// and invalid operations. The generator tracks the namespace through the
/// reference model so most operations target paths that exist.
pub fn random_trace(seed: u64, len: usize, bucket: &str) -> Vec<TraceOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RefFs::new(&[bucket.to_string()]);
    let dirs = [format!("/{bucket}"), format!("/{bucket}/a"), format!("/{bucket}/b"), format!("/{bucket}/a/c")];
    let names = ["x", "y", "z"];
    let any_path = |rng: &mut ChaCha8Rng| -> String {
        let d = dirs.choose(rng).unwrap();
        match rng.gen_range(0..10) {
            0 => d.clone(),
            _ => format!("{d}/{}", names.choose(rng).unwrap()),
        }
    };
    let mut out = Vec::with_capacity(len);
    let mut n = 0u64;
    for _ in 0..len {
        let files: Vec<String> = model.files().into_keys().collect();
        let live_dirs: Vec<String> = model.dirs().into_keys().collect();
        let pick = |rng: &mut ChaCha8Rng| -> String {
            if !files.is_empty() && rng.gen_bool(0.75) {
                files.choose(rng).unwrap().clone()
            } else {
                any_path(rng)
            }
        };
        let p = pick(&mut rng);
        let op = match rng.gen_range(0..100) {
            0..=7 => Op::Mkdir { path: dirs[1..].choose(&mut rng).unwrap().clone() },
            8..=21 => {
                let d = live_dirs.choose(&mut rng).unwrap();
                Op::Create { path: format!("{d}/{}", names.choose(&mut rng).unwrap()) }
            }
            22..=46 => {
                n += 1;
                let offset = rng.gen_range(0..80);
                let len = rng.gen_range(1..60);
                Op::Write { path: p, offset, data: payload(seed, n, len) }
            }
            47..=61 => Op::Read { path: p, offset: rng.gen_range(0..40), len: rng.gen_range(1..120) },
            62..=67 => Op::Truncate { path: p, size: rng.gen_range(0..100) },
            68..=72 => Op::Unlink { path: p },
            73..=75 => Op::Rmdir { path: dirs[1..].choose(&mut rng).unwrap().clone() },
            76..=84 => {
                let to = any_path(&mut rng);
                Op::Rename { from: p, to }
            }
            85..=92 => Op::Readdir { path: live_dirs.choose(&mut rng).unwrap().clone() },
            _ => Op::Fsync { path: p },
        };
        model.apply(&op);
        out.push(TraceOp { session: 0, op });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(files: usize, dirs: usize, min: u64, max: u64) -> WorkloadSpec {
        WorkloadSpec {
            files,
            dirs,
            min_size: min,
            max_size: max,
            block: 4096,
            clients: 1,
            pattern: Pattern::Random,
            bucket: "data".into(),
            read_back: false,
        }
    }

    fn sizes(trace: &[TraceOp]) -> std::collections::BTreeMap<String, u64> {
        let mut m = std::collections::BTreeMap::new();
        for t in trace {
            if let Op::Write { path, offset, data } = &t.op {
                let e = m.entry(path.clone()).or_insert(0);
                *e = (*e).max(offset + data.len() as u64);
            }
        }
        m
    }

    #[test]
    fn equal_sizes_spread_over_dirs() {
        let t = gen_workload(&spec(4, 2, 4096, 4096), 1);
        let s = sizes(&t);
        assert_eq!(s.len(), 4);
        assert!(s.values().all(|v| *v == 4096));
        let mkdirs = t.iter().filter(|o| matches!(o.op, Op::Mkdir { .. })).count();
        assert_eq!(mkdirs, 2);
        assert!(s.keys().filter(|p| p.starts_with("/data/dir000/")).count() == 2);
    }

    #[test]
    fn scaled_shape_stays_within_bounds() {
        let sp = spec(1024, 32, 4 << 10, 32 << 10);
        let s = sizes(&gen_workload(&sp, 7));
        assert_eq!(s.len(), 1024);
        let total: u64 = s.values().sum();
        assert!(s.values().all(|v| (4 << 10..=32 << 10).contains(v)));
        assert!((1024 * (4 << 10)..=1024 * (32 << 10)).contains(&total));
    }

    #[test]
    fn same_seed_same_trace() {
        let sp = spec(20, 3, 100, 9000);
        assert_eq!(gen_workload(&sp, 5), gen_workload(&sp, 5));
        assert_ne!(gen_workload(&sp, 5), gen_workload(&sp, 6));
        assert_eq!(random_trace(3, 50, "data"), random_trace(3, 50, "data"));
    }

    #[test]
    fn trace_line_framing() {
        let t = TraceOp { session: 2, op: Op::Write { path: "/data/f".into(), offset: 8, data: b"abc".to_vec() } };
        assert_eq!(t.to_string(), format!("write /data/f 8 3 {} 2", digest(b"abc")));
        let r = TraceOp { session: 0, op: Op::Rename { from: "/data/a".into(), to: "/data/b".into() } };
        assert_eq!(r.to_string(), "rename /data/a->/data/b 0 0 - 0");
    }
}
