use std::collections::BTreeSet;

use cachefs::ring::{diff_owners, fnv1a64, hash_key, node_point, placement_key, HashPoint, PlacementKey, Ring};
use cachefs::NodeId;
use proptest::prelude::*;

/// Owner by exhaustive scan: the member with the greatest point not above
/// `h`, or the greatest point overall when none is.
fn brute_owner(members: &[(NodeId, u64)], h: u64) -> NodeId {
    let below = members.iter().filter(|(_, p)| *p <= h).max_by_key(|(_, p)| *p);
    below.or_else(|| members.iter().max_by_key(|(_, p)| *p)).unwrap().0
}

fn ring_of(version: u64, members: &[(NodeId, u64)]) -> Ring {
    Ring::new(version, members.iter().map(|(n, p)| (*n, HashPoint(*p)))).unwrap()
}

fn members() -> impl Strategy<Value = Vec<(NodeId, u64)>> {
    proptest::collection::btree_map(any::<u64>(), Just(()), 1..12)
        .prop_map(|m| m.into_keys().enumerate().map(|(i, p)| (i as NodeId + 1, p)).collect())
}

fn keys(n: usize) -> Vec<PlacementKey> {
    let mut out = Vec::new();
    for inode in 1..=n as u64 {
        out.push(placement_key(inode, None, 64).unwrap());
        out.push(placement_key(inode, Some(64 * inode), 64).unwrap());
    }
    out
}

proptest! {
    #[test]
    fn owner_matches_exhaustive_scan(m in members(), hs in proptest::collection::vec(any::<u64>(), 1..64)) {
        let r = ring_of(1, &m);
        for h in hs {
            prop_assert_eq!(r.owner_of_hash(HashPoint(h)).unwrap(), brute_owner(&m, h));
        }
        for (_, p) in &m {
            prop_assert_eq!(r.owner_of_hash(HashPoint(*p)).unwrap(), brute_owner(&m, *p));
        }
    }

    #[test]
    fn join_moves_exactly_what_the_joiner_now_owns(m in members(), joiner_point in any::<u64>()) {
        prop_assume!(m.iter().all(|(_, p)| *p != joiner_point));
        let joiner = m.len() as NodeId + 1;
        let mut grown = m.clone();
        grown.push((joiner, joiner_point));
        let (old, new) = (ring_of(1, &m), ring_of(2, &grown));
        let ks = keys(200);
        let moved = diff_owners(&old, &new, ks.iter()).unwrap();
        let want: BTreeSet<PlacementKey> = ks
            .iter()
            .filter(|k| brute_owner(&grown, hash_key(k).0) == joiner)
            .cloned()
            .collect();
        let got: BTreeSet<PlacementKey> = moved.iter().map(|mk| mk.key.clone()).collect();
        prop_assert_eq!(got, want);
        prop_assert!(moved.iter().all(|mk| mk.new_owner == joiner));
    }

    #[test]
    fn leave_moves_exactly_what_the_leaver_owned(m in members(), pick in any::<prop::sample::Index>()) {
        prop_assume!(m.len() >= 2);
        let gone = m[pick.index(m.len())].0;
        let shrunk: Vec<_> = m.iter().copied().filter(|(n, _)| *n != gone).collect();
        let (old, new) = (ring_of(1, &m), ring_of(2, &shrunk));
        let ks = keys(200);
        let moved = diff_owners(&old, &new, ks.iter()).unwrap();
        let want: BTreeSet<PlacementKey> = ks
            .iter()
            .filter(|k| brute_owner(&m, hash_key(k).0) == gone)
            .cloned()
            .collect();
        let got: BTreeSet<PlacementKey> = moved.iter().map(|mk| mk.key.clone()).collect();
        prop_assert_eq!(got, want);
        for mk in &moved {
            prop_assert_eq!(mk.old_owner, gone);
            prop_assert_eq!(mk.new_owner, brute_owner(&shrunk, hash_key(&mk.key).0));
        }
    }

    #[test]
    fn hashing_is_fnv1a_of_the_rendered_key(inode in 1u64..1_000_000, chunk in 0u64..1000) {
        let k = placement_key(inode, Some(chunk * 4096), 4096).unwrap();
        prop_assert_eq!(hash_key(&k).0, fnv1a64(k.as_bytes()));
        let want = if chunk == 0 { inode.to_string() } else { format!("{inode}/{}", chunk * 4096) };
        prop_assert_eq!(k.as_str(), want.as_str());
    }
}

#[test]
fn no_collisions_among_test_placement_keys() {
    let ks = keys(5000);
    let hashes: BTreeSet<u64> = ks.iter().map(|k| hash_key(k).0).collect();
    assert_eq!(hashes.len(), ks.len());
    let points: BTreeSet<u64> = (1..=256).map(|n| node_point(n).0).collect();
    assert_eq!(points.len(), 256);
}
