//! The fixtures under `tests/fixtures` are assembled by `gen.py`, which
//! shares no code with this crate.

use std::path::PathBuf;

use cachefs::cluster::{Member, NodeList};
use cachefs::raftlog::{verify, Command, LogError, MemStore, RaftLog, Verification, DEFAULT_ROLLOVER};
use cachefs::store::{DirEntry, DirEntryAdd, DirEntryRemove, EntryKind};

fn fixture(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn list(version: u64, ids: &[u32]) -> Command {
    Command::NodeListUpdate(NodeList { version, members: ids.iter().map(|i| Member::new(*i)).collect() })
}

fn add(dir: u64, name: &str, child: u64, kind: EntryKind, mtime: u64) -> Command {
    Command::DirEntryAdd(DirEntryAdd { dir, name: name.into(), entry: DirEntry { child, kind }, mtime })
}

fn cases() -> Vec<(&'static str, Vec<Command>)> {
    vec![
        ("two_appends.wal", vec![list(1, &[1]), add(1, "data", 2, EntryKind::Directory, 7)]),
        (
            "three_entries.wal",
            vec![
                list(2, &[1, 2]),
                add(2, "a.txt", 3, EntryKind::File, 10),
                Command::DirEntryRemove(DirEntryRemove { dir: 2, name: "a.txt".into(), mtime: 11 }),
            ],
        ),
    ]
}

fn load(bytes: &[u8]) -> Result<RaftLog<MemStore>, LogError> {
    let mut store = MemStore::new();
    store.wal_bytes_mut().extend_from_slice(bytes);
    RaftLog::open(store, DEFAULT_ROLLOVER)
}

#[test]
fn fixtures_decode_to_expected_commands() {
    for (name, want) in cases() {
        let log = load(&fixture(name)).unwrap();
        let mut seen = Vec::new();
        log.replay(|i, c| seen.push((i, c))).unwrap();
        let want: Vec<(u64, Command)> = want.into_iter().enumerate().map(|(i, c)| (i as u64 + 1, c)).collect();
        assert_eq!(seen, want, "{name}");
    }
}

#[test]
fn appends_reproduce_fixture_bytes() {
    for (name, cmds) in cases() {
        let mut log = RaftLog::open(MemStore::new(), DEFAULT_ROLLOVER).unwrap();
        for (i, c) in cmds.iter().enumerate() {
            assert_eq!(log.append(c).unwrap(), i as u64 + 1);
        }
        assert_eq!(log.store().wal_bytes(), &fixture(name)[..], "{name}");
    }
}

#[test]
fn every_single_bit_flip_halts_replay() {
    for (name, cmds) in cases() {
        let bytes = fixture(name);
        assert_eq!(verify(&bytes), Verification::Ok { entries: cmds.len() as u64 });
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(matches!(verify(&bad), Verification::Corrupt { .. }), "{name} bit {bit}");
            assert!(load(&bad).is_err(), "{name} bit {bit} opened");
        }
    }
}

#[test]
fn truncated_final_entry_is_reported_at_its_index() {
    let bytes = fixture("three_entries.wal");
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(verify(cut), Verification::Corrupt { index: 3, .. }));
}
