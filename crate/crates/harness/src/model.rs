//! In-memory reference filesystem.
//!
//! Each operation returns the same [`Outcome`] the cluster client is
//! expected to return, including which error wins when several apply.

use std::collections::BTreeMap;

use crate::workload::{Op, Outcome};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Node {
    File(Vec<u8>),
    Dir(BTreeMap<String, Node>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefFs {
    root: BTreeMap<String, Node>,
}

type Res<T> = Result<T, &'static str>;

fn components(path: &str) -> Res<Vec<String>> {
    let parts: Vec<String> = path.split('/').filter(|c| !c.is_empty()).map(String::from).collect();
    if parts.iter().any(|c| c == "." || c == "..") {
        return Err("Usage");
    }
    Ok(parts)
}

impl RefFs {
    pub fn new(buckets: &[String]) -> Self {
        RefFs { root: buckets.iter().map(|b| (b.clone(), Node::Dir(BTreeMap::new()))).collect() }
    }

    fn dir_at(&self, parts: &[String]) -> Res<&BTreeMap<String, Node>> {
        let mut cur = &self.root;
        for p in parts {
            match cur.get(p) {
                None => return Err("NotFound"),
                Some(Node::File(_)) => return Err("NotDir"),
                Some(Node::Dir(d)) => cur = d,
            }
        }
        Ok(cur)
    }

    fn dir_at_mut(&mut self, parts: &[String]) -> &mut BTreeMap<String, Node> {
        let mut cur = &mut self.root;
        for p in parts {
            match cur.get_mut(p) {
                Some(Node::Dir(d)) => cur = d,
                _ => unreachable!("caller resolved the path"),
            }
        }
        cur
    }

    /// Resolves every component; the root resolves to `None`.
    fn resolve(&self, parts: &[String]) -> Res<Option<&Node>> {
        let Some((last, dir)) = parts.split_last() else { return Ok(None) };
        let d = self.dir_at(dir)?;
        d.get(last).map(Some).ok_or("NotFound")
    }

    fn is_dir(&self, parts: &[String]) -> Res<bool> {
        Ok(match self.resolve(parts)? {
            None | Some(Node::Dir(_)) => true,
            Some(Node::File(_)) => false,
        })
    }

    fn file_mut(&mut self, parts: &[String]) -> &mut Vec<u8> {
        let (last, dir) = parts.split_last().unwrap();
        match self.dir_at_mut(dir).get_mut(last) {
            Some(Node::File(f)) => f,
            _ => unreachable!("caller checked the kind"),
        }
    }

    fn create(&mut self, path: &str, dir: bool) -> Res<()> {
        let parts = components(path)?;
        let Some((name, parent)) = parts.split_last() else { return Err("Exists") };
        if parent.is_empty() {
            return Err("Unsupported");
        }
        if !self.is_dir(parent)? {
            return Err("NotDir");
        }
        let d = self.dir_at_mut(parent);
        if d.contains_key(name) {
            return Err("Exists");
        }
        d.insert(name.clone(), if dir { Node::Dir(BTreeMap::new()) } else { Node::File(Vec::new()) });
        Ok(())
    }

    fn write(&mut self, path: &str, offset: u64, data: &[u8]) -> Res<()> {
        let parts = components(path)?;
        let dir = self.is_dir(&parts)?;
        if data.is_empty() {
            return Ok(());
        }
        if dir {
            return Err("IsDir");
        }
        let f = self.file_mut(&parts);
        let end = offset as usize + data.len();
        if f.len() < end {
            f.resize(end, 0);
        }
        f[offset as usize..end].copy_from_slice(data);
        Ok(())
    }

    fn read(&self, path: &str, offset: u64, len: u64) -> Res<Vec<u8>> {
        let parts = components(path)?;
        match self.resolve(&parts)? {
            None | Some(Node::Dir(_)) => Err("IsDir"),
            Some(Node::File(f)) => {
                let end = offset.saturating_add(len).min(f.len() as u64);
                if end <= offset {
                    return Ok(Vec::new());
                }
                Ok(f[offset as usize..end as usize].to_vec())
            }
        }
    }

    fn truncate(&mut self, path: &str, size: u64) -> Res<()> {
        let parts = components(path)?;
        if self.is_dir(&parts)? {
            return Err("IsDir");
        }
        self.file_mut(&parts).resize(size as usize, 0);
        Ok(())
    }

    fn remove(&mut self, path: &str, dir: bool) -> Res<()> {
        let parts = components(path)?;
        if parts.len() < 2 {
            return Err("Unsupported");
        }
        match (self.resolve(&parts)?.unwrap(), dir) {
            (Node::Dir(_), false) => return Err("IsDir"),
            (Node::File(_), true) => return Err("NotDir"),
            (Node::Dir(d), true) if !d.is_empty() => return Err("NotEmpty"),
            _ => {}
        }
        let (last, parent) = parts.split_last().unwrap();
        self.dir_at_mut(parent).remove(last);
        Ok(())
    }

    fn rename(&mut self, from: &str, to: &str) -> Res<()> {
        let src = components(from)?;
        let dst = components(to)?;
        if src.len() < 2 || dst.len() < 2 {
            return Err("Unsupported");
        }
        if src == dst {
            self.resolve(&src)?;
            return Ok(());
        }
        if dst.starts_with(&src) {
            return Err("Usage");
        }
        let node = self.resolve(&src)?.unwrap().clone();
        let (dname, ddir) = dst.split_last().unwrap();
        if !self.is_dir(ddir)? {
            return Err("NotDir");
        }
        let existing = self.dir_at(ddir)?.get(dname).cloned();
        match (&node, &existing) {
            (Node::Dir(_), Some(_)) => return Err("Exists"),
            (Node::Dir(d), None) if !d.is_empty() => return Err("Unsupported"),
            (Node::File(_), Some(Node::Dir(_))) => return Err("IsDir"),
            _ => {}
        }
        let (sname, sdir) = src.split_last().unwrap();
        self.dir_at_mut(sdir).remove(sname);
        self.dir_at_mut(ddir).insert(dname.clone(), node);
        Ok(())
    }

    fn readdir(&self, path: &str) -> Res<Vec<(String, bool)>> {
        let parts = components(path)?;
        let d = match self.resolve(&parts)? {
            None => &self.root,
            Some(Node::Dir(d)) => d,
            Some(Node::File(_)) => return Err("NotDir"),
        };
        Ok(d.iter().map(|(n, c)| (n.clone(), matches!(c, Node::Dir(_)))).collect())
    }

    pub fn apply(&mut self, op: &Op) -> Outcome {
        let r = match op {
            Op::Mkdir { path } => self.create(path, true).map(|_| Outcome::Done),
            Op::Create { path } => self.create(path, false).map(|_| Outcome::Done),
            Op::Write { path, offset, data } => self.write(path, *offset, data).map(|_| Outcome::Done),
            Op::Read { path, offset, len } => self.read(path, *offset, *len).map(Outcome::Data),
            Op::Truncate { path, size } => self.truncate(path, *size).map(|_| Outcome::Done),
            Op::Unlink { path } => self.remove(path, false).map(|_| Outcome::Done),
            Op::Rmdir { path } => self.remove(path, true).map(|_| Outcome::Done),
            Op::Rename { from, to } => self.rename(from, to).map(|_| Outcome::Done),
            Op::Readdir { path } => self.readdir(path).map(Outcome::Listing),
            Op::Fsync { path } => components(path).and_then(|p| self.resolve(&p)).map(|_| Outcome::Done),
        };
        r.unwrap_or_else(|e| Outcome::Failed(e.into()))
    }

    /// Every file with its content, by absolute path.
    pub fn files(&self) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        walk(&self.root, "", &mut |p, n| {
            if let Node::File(f) = n {
                out.insert(p.to_string(), f.clone());
            }
        });
        out
    }

    /// Every directory (buckets included) with its sorted listing.
    pub fn dirs(&self) -> BTreeMap<String, Vec<(String, bool)>> {
        let mut out = BTreeMap::new();
        walk(&self.root, "", &mut |p, n| {
            if let Node::Dir(d) = n {
                out.insert(p.to_string(), d.iter().map(|(k, c)| (k.clone(), matches!(c, Node::Dir(_)))).collect());
            }
        });
        out
    }
}

fn walk(dir: &BTreeMap<String, Node>, prefix: &str, f: &mut impl FnMut(&str, &Node)) {
    for (name, n) in dir {
        let p = format!("{prefix}/{name}");
        f(&p, n);
        if let Node::Dir(d) = n {
            walk(d, &p, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs() -> RefFs {
        RefFs::new(&["data".to_string()])
    }

    fn ok(o: Outcome) {
        assert_eq!(o, Outcome::Done);
    }

    fn err(o: Outcome, e: &str) {
        assert_eq!(o, Outcome::Failed(e.into()));
    }

    #[test]
    fn sparse_writes_zero_fill() {
        let mut m = fs();
        ok(m.apply(&Op::Create { path: "/data/f".into() }));
        ok(m.apply(&Op::Write { path: "/data/f".into(), offset: 3, data: b"ab".to_vec() }));
        assert_eq!(m.apply(&Op::Read { path: "/data/f".into(), offset: 0, len: 100 }), Outcome::Data(vec![0, 0, 0, b'a', b'b']));
        ok(m.apply(&Op::Truncate { path: "/data/f".into(), size: 1 }));
        assert_eq!(m.files()["/data/f"], vec![0]);
    }

    #[test]
    fn error_precedence() {
        let mut m = fs();
        err(m.apply(&Op::Mkdir { path: "/data".into() }), "Unsupported");
        err(m.apply(&Op::Create { path: "/data/a/x".into() }), "NotFound");
        ok(m.apply(&Op::Create { path: "/data/f".into() }));
        err(m.apply(&Op::Create { path: "/data/f/x".into() }), "NotDir");
        err(m.apply(&Op::Create { path: "/data/f".into() }), "Exists");
        ok(m.apply(&Op::Mkdir { path: "/data/a".into() }));
        ok(m.apply(&Op::Create { path: "/data/a/x".into() }));
        err(m.apply(&Op::Rmdir { path: "/data/a".into() }), "NotEmpty");
        err(m.apply(&Op::Unlink { path: "/data/a".into() }), "IsDir");
        err(m.apply(&Op::Rmdir { path: "/data/f".into() }), "NotDir");
        err(m.apply(&Op::Rename { from: "/data/a".into(), to: "/data/b".into() }), "Unsupported");
        err(m.apply(&Op::Rename { from: "/data/a".into(), to: "/data/a/y".into() }), "Usage");
        err(m.apply(&Op::Rename { from: "/data/f".into(), to: "/data/a".into() }), "IsDir");
        err(m.apply(&Op::Read { path: "/data/a".into(), offset: 0, len: 1 }), "IsDir");
        err(m.apply(&Op::Readdir { path: "/data/f".into() }), "NotDir");
    }

    #[test]
    fn rename_replaces_files() {
        let mut m = fs();
        ok(m.apply(&Op::Create { path: "/data/f".into() }));
        ok(m.apply(&Op::Write { path: "/data/f".into(), offset: 0, data: b"one".to_vec() }));
        ok(m.apply(&Op::Create { path: "/data/g".into() }));
        ok(m.apply(&Op::Rename { from: "/data/f".into(), to: "/data/g".into() }));
        assert_eq!(m.files().into_iter().collect::<Vec<_>>(), vec![("/data/g".to_string(), b"one".to_vec())]);
        assert_eq!(m.dirs()["/data"], vec![("g".to_string(), false)]);
    }
}
