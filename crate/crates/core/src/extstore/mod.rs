//! In-memory S3-like object store used as the durable tier.
//!
//! Supports ranged GET, HEAD, PUT, DELETE, delimiter listing and multipart
//! uploads. Every committed object carries a generation number, and DELETE
//! can be made conditional on it. Every call is appended to a call log, and a fault plan can fail
//! chosen calls by `(operation, ordinal)`. The store lives outside every
//! cache node, so it survives node crashes and whole-cluster restarts.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::ring::fnv1a64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StoreOp {
    Get,
    Head,
    Put,
    Delete,
    List,
    MpuBegin,
    MpuAdd,
    MpuCommit,
    MpuAbort,
}

impl StoreOp {
    pub fn name(self) -> &'static str {
        match self {
            StoreOp::Get => "get",
            StoreOp::Head => "head",
            StoreOp::Put => "put",
            StoreOp::Delete => "delete",
            StoreOp::List => "list",
            StoreOp::MpuBegin => "mpu_begin",
            StoreOp::MpuAdd => "mpu_add",
            StoreOp::MpuCommit => "mpu_commit",
            StoreOp::MpuAbort => "mpu_abort",
        }
    }

    pub fn is_mpu(self) -> bool {
        matches!(self, StoreOp::MpuBegin | StoreOp::MpuAdd | StoreOp::MpuCommit | StoreOp::MpuAbort)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("no such key or upload")]
    NotFound,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("injected fault on {0}")]
    Transient(&'static str),
}

/// One entry of the call log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallRecord {
    pub op: StoreOp,
    pub bucket: String,
    pub key: String,
    /// Operation-specific arguments, e.g. `offset=0 len=10` or `upload=3 part=2`.
    pub detail: String,
    /// FNV-1a of the payload for writes, 0 otherwise.
    pub digest: u64,
    pub ok: bool,
}

impl fmt::Display for CallRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {:016x} {}",
            self.op.name(),
            self.bucket,
            if self.key.is_empty() { "-" } else { &self.key },
            if self.detail.is_empty() { "-" } else { &self.detail },
            self.digest,
            if self.ok { "ok" } else { "err" }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreFaultAction {
    FailOnce,
    FailN(u32),
    /// Never answers; surfaces to the caller as a failed call.
    Hang,
}

/// Fails the `ordinal`-th call (1-based) of `op`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreFault {
    pub op: StoreOp,
    pub ordinal: u64,
    pub action: StoreFaultAction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Upload {
    bucket: String,
    key: String,
    parts: BTreeMap<u32, Vec<u8>>,
}

/// Result of HEAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectInfo {
    pub size: u64,
    pub generation: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Object {
    data: Vec<u8>,
    generation: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Listing {
    pub keys: Vec<String>,
    pub common_prefixes: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ObjectStore {
    buckets: BTreeMap<String, BTreeMap<String, Object>>,
    uploads: BTreeMap<u64, Upload>,
    next_upload: u64,
    calls: Vec<CallRecord>,
    counts: BTreeMap<StoreOp, u64>,
    faults: Vec<StoreFault>,
    failing: BTreeMap<StoreOp, u32>,
}

impl ObjectStore {
    pub fn new(buckets: &[&str]) -> Self {
        let mut s = ObjectStore { next_upload: 1, ..Default::default() };
        for b in buckets {
            s.buckets.insert((*b).to_string(), BTreeMap::new());
        }
        s
    }

    pub fn bucket_names(&self) -> Vec<String> {
        self.buckets.keys().cloned().collect()
    }

    pub fn add_fault(&mut self, fault: StoreFault) {
        self.faults.push(fault);
    }

    pub fn clear_faults(&mut self) {
        self.faults.clear();
        self.failing.clear();
    }

    pub fn calls(&self) -> &[CallRecord] {
        &self.calls
    }

    pub fn clear_calls(&mut self) {
        self.calls.clear();
    }

    pub fn call_count(&self, op: StoreOp) -> usize {
        self.calls.iter().filter(|c| c.op == op).count()
    }

    /// Direct view of a committed object, not logged.
    pub fn object(&self, bucket: &str, key: &str) -> Option<&[u8]> {
        self.buckets.get(bucket)?.get(key).map(|o| o.data.as_slice())
    }

    /// All committed objects as `(bucket, key, bytes)`, not logged.
    pub fn objects(&self) -> impl Iterator<Item = (&str, &str, &[u8])> {
        self.buckets
            .iter()
            .flat_map(|(b, objs)| objs.iter().map(move |(k, v)| (b.as_str(), k.as_str(), v.data.as_slice())))
    }

    /// Writes an object without logging; used to seed buckets and to model
    /// out-of-band changes.
    pub fn insert_raw(&mut self, bucket: &str, key: &str, data: Vec<u8>) {
        self.store(bucket.to_string(), key.to_string(), data, None);
    }

    /// Publishes an object; uploads keep their id as the generation.
    fn store(&mut self, bucket: String, key: String, data: Vec<u8>, generation: Option<u64>) -> u64 {
        let generation = generation.unwrap_or_else(|| {
            let g = self.next_upload;
            self.next_upload += 1;
            g
        });
        self.buckets.entry(bucket).or_default().insert(key, Object { data, generation });
        generation
    }

    pub fn pending_uploads(&self) -> usize {
        self.uploads.len()
    }

    fn begin_call(&mut self, op: StoreOp) -> Result<(), StoreError> {
        let n = self.counts.entry(op).or_insert(0);
        *n += 1;
        let ordinal = *n;
        if let Some(left) = self.failing.get_mut(&op) {
            if *left > 0 {
                *left -= 1;
                return Err(StoreError::Transient(op.name()));
            }
        }
        for f in &self.faults {
            if f.op == op && f.ordinal == ordinal {
                match f.action {
                    StoreFaultAction::FailOnce | StoreFaultAction::Hang => {}
                    StoreFaultAction::FailN(n) => {
                        self.failing.insert(op, n.saturating_sub(1));
                    }
                }
                return Err(StoreError::Transient(op.name()));
            }
        }
        Ok(())
    }

    fn record<T>(&mut self, op: StoreOp, bucket: &str, key: &str, detail: String, digest: u64, r: &Result<T, StoreError>) {
        self.calls.push(CallRecord {
            op,
            bucket: bucket.to_string(),
            key: key.to_string(),
            detail,
            digest,
            ok: r.is_ok(),
        });
    }

    pub fn get_range(&mut self, bucket: &str, key: &str, offset: u64, len: u64) -> Result<Vec<u8>, StoreError> {
        let r = self.begin_call(StoreOp::Get).and_then(|_| {
            let obj = &self.buckets.get(bucket).and_then(|b| b.get(key)).ok_or(StoreError::NotFound)?.data;
            let start = (offset as usize).min(obj.len());
            let end = (offset.saturating_add(len) as usize).min(obj.len());
            Ok(obj[start..end].to_vec())
        });
        self.record(StoreOp::Get, bucket, key, format!("offset={offset} len={len}"), 0, &r);
        r
    }

    pub fn head(&mut self, bucket: &str, key: &str) -> Result<ObjectInfo, StoreError> {
        let r = self.begin_call(StoreOp::Head).and_then(|_| {
            self.buckets
                .get(bucket)
                .and_then(|b| b.get(key))
                .map(|o| ObjectInfo { size: o.data.len() as u64, generation: o.generation })
                .ok_or(StoreError::NotFound)
        });
        self.record(StoreOp::Head, bucket, key, String::new(), 0, &r);
        r
    }

    /// Returns the generation of the new object.
    pub fn put_object(&mut self, bucket: &str, key: &str, data: &[u8]) -> Result<u64, StoreError> {
        let digest = fnv1a64(data);
        let r = self
            .begin_call(StoreOp::Put)
            .map(|_| self.store(bucket.to_string(), key.to_string(), data.to_vec(), None));
        self.record(StoreOp::Put, bucket, key, format!("len={}", data.len()), digest, &r);
        r
    }

    /// Deleting a missing key succeeds, as in S3. With `if_generation`,
    /// an object of any other generation is kept and the call fails with
    /// `Precondition`.
    pub fn delete_object(&mut self, bucket: &str, key: &str, if_generation: Option<u64>) -> Result<(), StoreError> {
        let r = self.begin_call(StoreOp::Delete).and_then(|_| {
            let Some(b) = self.buckets.get_mut(bucket) else { return Ok(()) };
            match (b.get(key), if_generation) {
                (Some(o), Some(g)) if o.generation != g => {
                    Err(StoreError::Precondition(format!("generation {} is not {g}", o.generation)))
                }
                _ => {
                    b.remove(key);
                    Ok(())
                }
            }
        });
        let detail = if_generation.map(|g| format!("if_generation={g}")).unwrap_or_default();
        self.record(StoreOp::Delete, bucket, key, detail, 0, &r);
        r
    }

    /// Keys under `prefix`, with anything below the next `/` collapsed into
    /// common prefixes. Both lists are sorted.
    pub fn list_prefix(&mut self, bucket: &str, prefix: &str) -> Result<Listing, StoreError> {
        let r = self.begin_call(StoreOp::List).map(|_| {
            let mut out = Listing::default();
            let Some(b) = self.buckets.get(bucket) else { return out };
            for key in b.range(prefix.to_string()..).map(|(k, _)| k).take_while(|k| k.starts_with(prefix)) {
                let rest = &key[prefix.len()..];
                match rest.find('/') {
                    Some(i) => {
                        let p = format!("{prefix}{}", &rest[..=i]);
                        if out.common_prefixes.last() != Some(&p) {
                            out.common_prefixes.push(p);
                        }
                    }
                    None => out.keys.push(key.clone()),
                }
            }
            out
        });
        self.record(StoreOp::List, bucket, prefix, String::new(), 0, &r);
        r
    }

    pub fn mpu_begin(&mut self, bucket: &str, key: &str) -> Result<u64, StoreError> {
        let r = self.begin_call(StoreOp::MpuBegin).map(|_| {
            let id = self.next_upload;
            self.next_upload += 1;
            self.uploads.insert(id, Upload { bucket: bucket.to_string(), key: key.to_string(), parts: BTreeMap::new() });
            id
        });
        let detail = r.as_ref().map(|id| format!("upload={id}")).unwrap_or_default();
        self.record(StoreOp::MpuBegin, bucket, key, detail, 0, &r);
        r
    }

    /// Re-adding a part number replaces the earlier bytes. Returns the part tag.
    pub fn mpu_add(&mut self, upload: u64, part: u32, data: &[u8]) -> Result<String, StoreError> {
        let digest = fnv1a64(data);
        let (bucket, key) = self.upload_target(upload);
        let r = self.begin_call(StoreOp::MpuAdd).and_then(|_| {
            let u = self.uploads.get_mut(&upload).ok_or(StoreError::NotFound)?;
            u.parts.insert(part, data.to_vec());
            Ok(format!("{digest:016x}"))
        });
        self.record(StoreOp::MpuAdd, &bucket, &key, format!("upload={upload} part={part} len={}", data.len()), digest, &r);
        r
    }

    /// Concatenates the listed parts in part-number order and publishes the
    /// object atomically. The object's generation is the upload id.
    pub fn mpu_commit(&mut self, upload: u64, parts: &[(u32, String)]) -> Result<u64, StoreError> {
        let (bucket, key) = self.upload_target(upload);
        let r = self.begin_call(StoreOp::MpuCommit).and_then(|_| {
            let u = self.uploads.get(&upload).ok_or(StoreError::NotFound)?;
            let mut sorted: Vec<&(u32, String)> = parts.iter().collect();
            sorted.sort_by_key(|(n, _)| *n);
            let mut data = Vec::new();
            for (n, tag) in sorted {
                let bytes = u.parts.get(n).ok_or_else(|| StoreError::Precondition(format!("part {n} missing")))?;
                if format!("{:016x}", fnv1a64(bytes)) != *tag {
                    return Err(StoreError::Precondition(format!("part {n} tag mismatch")));
                }
                data.extend_from_slice(bytes);
            }
            let u = self.uploads.remove(&upload).unwrap();
            Ok(self.store(u.bucket, u.key, data, Some(upload)))
        });
        self.record(StoreOp::MpuCommit, &bucket, &key, format!("upload={upload} parts={}", parts.len()), 0, &r);
        r
    }

    pub fn mpu_abort(&mut self, upload: u64) -> Result<(), StoreError> {
        let (bucket, key) = self.upload_target(upload);
        let r = self.begin_call(StoreOp::MpuAbort).and_then(|_| {
            self.uploads.remove(&upload).map(|_| ()).ok_or(StoreError::NotFound)
        });
        self.record(StoreOp::MpuAbort, &bucket, &key, format!("upload={upload}"), 0, &r);
        r
    }

    fn upload_target(&self, upload: u64) -> (String, String) {
        self.uploads.get(&upload).map(|u| (u.bucket.clone(), u.key.clone())).unwrap_or_default()
    }

    /// Writes every object to `<dir>/<bucket>/<urlencoded key>`.
    pub fn dump_to_dir(&self, dir: &Path) -> io::Result<()> {
        for (bucket, objs) in &self.buckets {
            let bdir = dir.join(bucket);
            std::fs::create_dir_all(&bdir)?;
            for (key, data) in objs {
                std::fs::write(bdir.join(urlencoding::encode(key).as_ref()), &data.data)?;
            }
        }
        Ok(())
    }

    /// Call log as text, one call per line.
    pub fn call_log_text(&self) -> String {
        self.calls.iter().map(|c| format!("{c}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(len: usize, seed: u8) -> Vec<u8> {
        (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
    }

    #[test]
    fn put_get_range() {
        let mut s = ObjectStore::new(&["b"]);
        let data = pattern(48 << 10, 1);
        s.put_object("b", "k", &data).unwrap();
        assert_eq!(s.get_range("b", "k", 0, 48 << 10).unwrap(), data);
        assert_eq!(s.get_range("b", "k", 16 << 10, 16 << 10).unwrap(), &data[16 << 10..32 << 10]);
        assert_eq!(s.get_range("b", "missing", 0, 1), Err(StoreError::NotFound));
        s.put_object("b", "k", b"v2").unwrap();
        assert_eq!(s.get_range("b", "k", 0, 100).unwrap(), b"v2");
        assert_eq!(s.head("b", "k").unwrap().size, 2);
    }

    #[test]
    fn conditional_delete_checks_generation() {
        let mut s = ObjectStore::new(&["b"]);
        let g1 = s.put_object("b", "k", b"one").unwrap();
        let g2 = s.put_object("b", "k", b"two").unwrap();
        assert_ne!(g1, g2);
        assert!(matches!(s.delete_object("b", "k", Some(g1)), Err(StoreError::Precondition(_))));
        assert_eq!(s.object("b", "k").unwrap(), b"two");
        s.delete_object("b", "k", Some(g2)).unwrap();
        assert_eq!(s.object("b", "k"), None);
        s.delete_object("b", "k", Some(g2)).unwrap();
        let id = s.mpu_begin("b", "m").unwrap();
        let t = s.mpu_add(id, 1, b"x").unwrap();
        assert_eq!(s.mpu_commit(id, &[(1, t)]).unwrap(), id);
        assert_eq!(s.head("b", "m").unwrap().generation, id);
    }

    #[test]
    fn listing_collapses_at_delimiter() {
        let mut s = ObjectStore::new(&["b"]);
        for k in ["a/b/c.txt", "a/d.txt", "a/b/e", "z"] {
            s.put_object("b", k, b"x").unwrap();
        }
        let l = s.list_prefix("b", "a/").unwrap();
        assert_eq!(l.keys, vec!["a/d.txt"]);
        assert_eq!(l.common_prefixes, vec!["a/b/"]);
        let top = s.list_prefix("b", "").unwrap();
        assert_eq!(top.keys, vec!["z"]);
        assert_eq!(top.common_prefixes, vec!["a/"]);
        assert_eq!(ObjectStore::new(&["e"]).list_prefix("e", "").unwrap(), Listing::default());
    }

    #[test]
    fn multipart_concatenates_parts_in_order() {
        let mut s = ObjectStore::new(&["b"]);
        let parts: Vec<Vec<u8>> = (0..3).map(|i| pattern(16 << 10, i)).collect();
        let id = s.mpu_begin("b", "big").unwrap();
        let mut tags = Vec::new();
        for (i, p) in parts.iter().enumerate().rev() {
            tags.push((i as u32 + 1, s.mpu_add(id, i as u32 + 1, p).unwrap()));
        }
        assert_eq!(s.head("b", "big"), Err(StoreError::NotFound));
        s.mpu_commit(id, &tags).unwrap();
        assert_eq!(s.object("b", "big").unwrap(), parts.concat());
        assert_eq!(s.pending_uploads(), 0);
    }

    #[test]
    fn readding_a_part_replaces_it() {
        let mut s = ObjectStore::new(&["b"]);
        let id = s.mpu_begin("b", "k").unwrap();
        s.mpu_add(id, 1, b"aa").unwrap();
        s.mpu_add(id, 2, b"old").unwrap();
        let t2 = s.mpu_add(id, 2, b"new").unwrap();
        let t1 = s.mpu_add(id, 1, b"aa").unwrap();
        s.mpu_commit(id, &[(1, t1), (2, t2)]).unwrap();
        assert_eq!(s.object("b", "k").unwrap(), b"aanew");
    }

    #[test]
    fn abort_and_missing_parts() {
        let mut s = ObjectStore::new(&["b"]);
        let id = s.mpu_begin("b", "k").unwrap();
        let t = s.mpu_add(id, 1, b"x").unwrap();
        assert!(matches!(s.mpu_commit(id, &[(1, t), (2, "0".into())]), Err(StoreError::Precondition(_))));
        s.mpu_abort(id).unwrap();
        assert_eq!(s.get_range("b", "k", 0, 1), Err(StoreError::NotFound));
        assert_eq!(s.mpu_add(id, 1, b"x"), Err(StoreError::NotFound));
    }

    #[test]
    fn faults_by_ordinal() {
        let mut s = ObjectStore::new(&["b"]);
        s.add_fault(StoreFault { op: StoreOp::Put, ordinal: 2, action: StoreFaultAction::FailN(2) });
        assert!(s.put_object("b", "k", b"1").is_ok());
        assert!(s.put_object("b", "k", b"2").is_err());
        assert!(s.put_object("b", "k", b"3").is_err());
        assert!(s.put_object("b", "k", b"4").is_ok());
        assert_eq!(s.object("b", "k").unwrap(), b"4");
        assert_eq!(s.calls().iter().filter(|c| !c.ok).count(), 2);
    }

    #[test]
    fn dump_uses_urlencoded_keys() {
        let mut s = ObjectStore::new(&["b"]);
        s.put_object("b", "a/b c.txt", b"hi").unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.dump_to_dir(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("b").join("a%2Fb%20c.txt")).unwrap(), b"hi");
    }
}
