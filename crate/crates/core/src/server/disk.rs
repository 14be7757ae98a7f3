use std::cell::RefCell;
use std::io;
use std::rc::Rc;

use crate::raftlog::{injected_crash, LogFile, LogStore, MemStore};
use crate::simnet::{Faults, WriteVerdict};
use crate::NodeId;

/// A node's disk inside the simulator. The bytes live outside the node so
/// they survive crashes; every append consults the fault plan and may kill
/// the node just before or just after the write lands.
#[derive(Clone, Debug)]
pub struct SimDisk {
    node: NodeId,
    files: Rc<RefCell<MemStore>>,
    faults: Faults,
}

impl SimDisk {
    pub fn new(node: NodeId, files: Rc<RefCell<MemStore>>, faults: Faults) -> Self {
        SimDisk { node, files, faults }
    }

    pub fn files(&self) -> &Rc<RefCell<MemStore>> {
        &self.files
    }
}

impl LogStore for SimDisk {
    fn append(&mut self, file: LogFile, data: &[u8]) -> io::Result<u64> {
        let verdict = self.faults.borrow_mut().on_durable_write(self.node, file == LogFile::Wal);
        match verdict {
            WriteVerdict::CrashBefore => Err(injected_crash()),
            WriteVerdict::CrashAfter => {
                self.files.borrow_mut().append(file, data)?;
                Err(injected_crash())
            }
            WriteVerdict::Proceed => self.files.borrow_mut().append(file, data),
        }
    }

    fn read_at(&self, file: LogFile, offset: u64, len: u64) -> io::Result<Vec<u8>> {
        self.files.borrow().read_at(file, offset, len)
    }

    fn file_len(&self, file: LogFile) -> io::Result<u64> {
        self.files.borrow().file_len(file)
    }

    fn second_level_ids(&self) -> io::Result<Vec<u32>> {
        self.files.borrow().second_level_ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::{FaultAction, FaultPlan, FaultRule, FaultTarget, Matcher};

    fn disk(plan: FaultPlan) -> SimDisk {
        let faults = Faults::default();
        faults.borrow_mut().install(plan);
        SimDisk::new(1, Rc::new(RefCell::new(MemStore::new())), faults)
    }

    fn crash_on_second(action: FaultAction) -> FaultPlan {
        FaultPlan::none().with(FaultRule { target: FaultTarget::Node(1), matcher: Matcher::DurableWrite, ordinal: Some(2), action })
    }

    #[test]
    fn crash_before_leaves_no_bytes() {
        let mut d = disk(crash_on_second(FaultAction::CrashBefore));
        d.append(LogFile::Wal, b"a").unwrap();
        assert!(d.append(LogFile::Wal, b"b").is_err());
        assert_eq!(d.files().borrow().wal_bytes(), b"a");
        assert!(d.append(LogFile::Wal, b"c").is_err(), "node is dying; later writes fail");
    }

    #[test]
    fn crash_after_keeps_bytes() {
        let mut d = disk(crash_on_second(FaultAction::CrashAfter));
        d.append(LogFile::Wal, b"a").unwrap();
        assert!(d.append(LogFile::Wal, b"b").is_err());
        assert_eq!(d.files().borrow().wal_bytes(), b"ab");
    }
}
