use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::InodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    File,
    Directory,
    /// Both `name` and `name/` exist in the bucket.
    Conflict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirEntry {
    pub child: InodeId,
    pub kind: EntryKind,
}

/// Directory contents: `name -> child`, kept sorted by name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirTable {
    entries: BTreeMap<String, DirEntry>,
}

impl DirTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &BTreeMap<String, DirEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&DirEntry> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: String, entry: DirEntry) -> Option<DirEntry> {
        debug_assert!(name != "." && name != ".." && !name.is_empty() && !name.contains('/'));
        self.entries.insert(name, entry)
    }

    pub fn remove(&mut self, name: &str) -> Option<DirEntry> {
        self.entries.remove(name)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// `u16 name length | name | u64 child id | u8 kind` per entry, by name.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len() as usize);
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&e.child.to_le_bytes());
            out.push(match e.kind {
                EntryKind::File => 0,
                EntryKind::Directory => 1,
                EntryKind::Conflict => 2,
            });
        }
        out
    }

    pub fn serialized_len(&self) -> u64 {
        self.entries.keys().map(|n| 2 + n.len() as u64 + 9).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_is_sorted_and_sized() {
        let mut t = DirTable::new();
        t.insert("zeta".into(), DirEntry { child: 2, kind: EntryKind::File });
        t.insert("alpha".into(), DirEntry { child: 3, kind: EntryKind::Directory });
        let bytes = t.serialize();
        assert_eq!(bytes.len() as u64, t.serialized_len());
        assert_eq!(&bytes[0..2], &5u16.to_le_bytes());
        assert_eq!(&bytes[2..7], b"alpha");
        assert_eq!(bytes[15], 1);
    }
}
