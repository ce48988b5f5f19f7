use std::collections::BTreeMap;
use std::os::unix::fs::PermissionsExt;

use super::*;
use crate::policy::Literal;
use crate::repo::{Opcode, RecordingRepo, RepoStore};
use crate::scheme::Dimension;
use crate::wire::peek;

fn project_schema(d_max: u32) -> AttributeSchema {
    AttributeSchema::new(
        vec![
            Dimension {
                name: "role".into(),
                arity: 5,
            },
            Dimension {
                name: "project".into(),
                arity: 5,
            },
        ],
        d_max,
    )
    .unwrap()
}

fn binary(n: usize, d_max: u32) -> Profile {
    Profile::Schema(AttributeSchema::binary(n, d_max).unwrap())
}

fn repo() -> Arc<RepoStore> {
    Arc::new(RepoStore::in_memory())
}

fn enroll(id: &str, profile: Profile, repo: &Arc<RepoStore>, seed: u64) -> Node {
    Node::enroll(id, profile, repo.clone(), Some(seed)).unwrap()
}

fn pump(nodes: &mut [&mut Node]) {
    for _ in 0..100 {
        let mut n = 0;
        for node in nodes.iter_mut() {
            n += node.process_mailbox().unwrap();
        }
        if n == 0 {
            return;
        }
    }
    panic!("network did not quiesce");
}

fn link(from: &mut Node, to: &str, grant: Grant, d: u32) {
    let out = from.create_link(to, grant, d).unwrap();
    from.send(&out).unwrap();
}

fn wildcard(n: usize) -> Grant {
    Grant::Pattern(vec![None; n])
}

fn denied(r: Result<Vec<u8>, NodeError>) -> bool {
    matches!(r, Err(NodeError::Denied))
}

#[test]
fn enrollment_publishes_record_once() {
    let r = repo();
    let alice = enroll("alice", binary(2, 3), &r, 1);
    let (bytes, epoch) = r.get_public_key("alice").unwrap();
    assert_eq!(epoch, 0);
    let record = PublicRecord::from_bytes(&bytes).unwrap();
    assert_eq!(record, alice.public_record());
    assert!(matches!(
        Node::enroll("alice", binary(2, 3), r.clone(), Some(2)),
        Err(NodeError::AlreadyEnrolled(_))
    ));
}

#[test]
fn project_document_example() {
    let r = repo();
    let mut alice = enroll("alice", Profile::Schema(project_schema(2)), &r, 10);
    let mut bob = enroll("bob", binary(1, 1), &r, 11);
    let mut carol = enroll("carol", binary(1, 1), &r, 12);
    let mut david = enroll("david", binary(1, 1), &r, 13);
    let stranger = enroll("eve", binary(1, 1), &r, 14);
    alice
        .publish_with(
            "project-doc",
            "text/plain",
            b"project 1 plan",
            Labels::Pairs(vec![PolicyPair::new(vec![0, 1], 1)]),
        )
        .unwrap();
    link(&mut alice, "bob", Grant::Pattern(vec![Some(0), Some(1)]), 1);
    link(
        &mut alice,
        "carol",
        Grant::Pattern(vec![Some(0), Some(1)]),
        2,
    );
    link(&mut alice, "david", Grant::Pattern(vec![Some(0), None]), 1);
    assert_eq!(
        alice.issued()["bob"].pattern(),
        &KeyPattern::new(vec![Some(0), Some(1)], 1)
    );
    pump(&mut [&mut alice, &mut bob, &mut carol, &mut david]);
    assert_eq!(
        bob.access("alice", "project-doc").unwrap(),
        b"project 1 plan"
    );
    assert!(denied(carol.access("alice", "project-doc")));
    assert_eq!(
        david.access("alice", "project-doc").unwrap(),
        b"project 1 plan"
    );
    assert!(denied(stranger.access("alice", "project-doc")));
    assert!(matches!(
        bob.access("alice", "missing"),
        Err(NodeError::NotFound(_))
    ));
}

#[test]
fn announcement_through_policy_language() {
    let r = repo();
    let universe =
        ConditionUniverse::parse(r#"FriendType="music club"; FriendType="college""#, 3).unwrap();
    let mut alice = enroll("alice", Profile::Universe(universe), &r, 20);
    let mut bob = enroll("bob", binary(1, 3), &r, 21);
    let mut carol = enroll("carol", binary(1, 3), &r, 22);
    let mut dan = enroll("dan", binary(1, 3), &r, 23);
    let mut erin = enroll("erin", binary(1, 3), &r, 24);
    let mut fred = enroll("fred", binary(1, 3), &r, 25);
    let record = alice
        .publish(
            "ann",
            b"concert on friday",
            r#"FriendType="music club", dist(u,2); FriendType="college", dist(u,1)"#,
        )
        .unwrap();
    assert_eq!(record.revocable_blob_refs.len(), 2);
    let creds = |t: &str| {
        Grant::Credentials(CredentialSet::new().with("FriendType", Literal::Str(t.into())))
    };
    link(&mut alice, "bob", creds("music club"), 1);
    link(&mut alice, "carol", creds("college"), 1);
    link(&mut alice, "fred", creds("coworker"), 1);
    link(&mut bob, "dan", wildcard(1), 1);
    link(&mut carol, "erin", wildcard(1), 1);
    pump(&mut [
        &mut alice, &mut bob, &mut carol, &mut dan, &mut erin, &mut fred,
    ]);
    assert_eq!(bob.access("alice", "ann").unwrap(), b"concert on friday");
    assert_eq!(dan.access("alice", "ann").unwrap(), b"concert on friday");
    assert_eq!(carol.access("alice", "ann").unwrap(), b"concert on friday");
    assert!(denied(erin.access("alice", "ann")));
    assert!(denied(fred.access("alice", "ann")));
    assert_eq!(dan.held_keys("alice")[0].1.pattern().d, 2);
}

#[test]
fn propagation_stops_at_maximum_distance() {
    let r = repo();
    let mut a = enroll("a", binary(1, 2), &r, 30);
    let mut b = enroll("b", binary(1, 2), &r, 31);
    let mut c = enroll("c", binary(1, 2), &r, 32);
    let mut d = enroll("d", binary(1, 2), &r, 33);
    a.publish_with(
        "far",
        "t",
        b"x",
        Labels::Pairs(vec![PolicyPair::new(vec![0], 2)]),
    )
    .unwrap();
    link(&mut c, "d", wildcard(1), 1);
    link(&mut b, "c", wildcard(1), 1);
    link(&mut a, "b", wildcard(1), 1);
    pump(&mut [&mut a, &mut b, &mut c, &mut d]);
    let held = c.held_keys("a");
    assert_eq!(held.len(), 1);
    assert_eq!(held[0].0, ["a", "b"]);
    assert_eq!(held[0].1.pattern().d, 2);
    assert_eq!(d.key_ring_size("a"), 0);
    assert_eq!(c.access("a", "far").unwrap(), b"x");
}

#[test]
fn cycles_are_suppressed() {
    let r = repo();
    let mut a = enroll("a", binary(1, 3), &r, 40);
    let mut b = enroll("b", binary(1, 3), &r, 41);
    let mut c = enroll("c", binary(1, 3), &r, 42);
    link(&mut b, "c", wildcard(1), 1);
    link(&mut c, "b", wildcard(1), 1);
    link(&mut c, "a", wildcard(1), 1);
    link(&mut b, "a", wildcard(1), 1);
    link(&mut a, "b", wildcard(1), 1);
    pump(&mut [&mut a, &mut b, &mut c]);
    assert_eq!(b.key_ring_size("a"), 1);
    assert_eq!(c.key_ring_size("a"), 1);
    assert!(c
        .held_keys("a")
        .iter()
        .all(|(chain, _)| chain == &["a", "b"]));
    assert_eq!(a.key_ring_size("a"), 0);
}

#[test]
fn redelivery_is_idempotent() {
    let r = repo();
    let mut a = enroll("a", binary(1, 3), &r, 50);
    let mut b = enroll("b", binary(1, 3), &r, 51);
    let mut c = enroll("c", binary(1, 3), &r, 52);
    link(&mut b, "c", wildcard(1), 1);
    let out = a.create_link("b", wildcard(1), 1).unwrap();
    let first = b.receive_and_propagate(out[0].message.clone()).unwrap();
    assert_eq!(first.len(), 1);
    assert!(b
        .receive_and_propagate(out[0].message.clone())
        .unwrap()
        .is_empty());
    assert_eq!(b.key_ring_size("a"), 1);
    assert!(c
        .receive_and_propagate(first[0].message.clone())
        .unwrap()
        .is_empty());
    assert_eq!(c.key_ring_size("a"), 1);
}

#[test]
fn stale_messages_are_dropped() {
    let r = repo();
    let mut a = enroll("a", binary(1, 3), &r, 60);
    let mut b = enroll("b", binary(1, 3), &r, 61);
    let old = a.create_link("b", wildcard(1), 1).unwrap();
    enroll("c", binary(1, 3), &r, 62);
    link(&mut a, "c", wildcard(1), 1);
    a.revoke_link("c").unwrap();
    assert!(b
        .receive_and_propagate(old[0].message.clone())
        .unwrap()
        .is_empty());
    assert_eq!(b.key_ring_size("a"), 0);
}

#[test]
fn access_reads_only() {
    let store = repo();
    let rec = Arc::new(RecordingRepo::new(store.clone()));
    let mut alice = Node::enroll("alice", binary(1, 2), store.clone(), Some(70)).unwrap();
    let mut bob = Node::enroll("bob", binary(1, 2), rec.clone(), Some(71)).unwrap();
    alice
        .publish_with(
            "doc",
            "t",
            b"hello",
            Labels::Pairs(vec![PolicyPair::new(vec![1], 1)]),
        )
        .unwrap();
    link(&mut alice, "bob", wildcard(1), 1);
    bob.process_mailbox().unwrap();
    rec.clear();
    assert_eq!(bob.access("alice", "doc").unwrap(), b"hello");
    assert!(denied(
        bob.access("alice", "doc").and(Err(NodeError::Denied))
    ));
    let calls = rec.calls();
    assert!(calls.iter().all(|op| op.is_read()), "{calls:?}");
    assert_eq!(calls, [Opcode::GetResource, Opcode::GetResource]);
    assert!(store.mailbox_fetch("alice", None).unwrap().is_empty());
}

#[test]
fn master_and_key_ring_stable_under_publishing() {
    let r = repo();
    let mut alice = enroll("alice", binary(2, 2), &r, 80);
    let mut bob = enroll("bob", binary(1, 2), &r, 81);
    link(&mut alice, "bob", wildcard(2), 1);
    pump(&mut [&mut alice, &mut bob]);
    let msk = alice.master_key_bytes();
    let ring = bob.key_ring_size("alice");
    for i in 0..10 {
        alice
            .publish_with(
                &format!("r{i}"),
                "t",
                format!("content {i}").as_bytes(),
                Labels::Pairs(vec![PolicyPair::new(vec![i % 2, 0], 1)]),
            )
            .unwrap();
    }
    assert_eq!(alice.master_key_bytes(), msk);
    assert_eq!(bob.key_ring_size("alice"), ring);
    assert_eq!(bob.access("alice", "r7").unwrap(), b"content 7");
}

#[test]
fn republish_bumps_version() {
    let r = repo();
    let mut alice = enroll("alice", binary(1, 1), &r, 90);
    let pairs = || Labels::Pairs(vec![PolicyPair::new(vec![0], 1)]);
    let v1 = alice.publish_with("doc", "t", b"one", pairs()).unwrap();
    let v2 = alice.publish_with("doc", "t", b"two", pairs()).unwrap();
    assert_eq!((v1.version, v2.version), (1, 2));
    assert_ne!(v1.permanent_blob_ref, v2.permanent_blob_ref);
    assert_eq!(r.list_resources("alice").unwrap().len(), 1);
    assert_eq!(alice.publications()["doc"].version, 2);
}

#[test]
fn hybrid_shape() {
    let r = repo();
    let mut alice = enroll("alice", binary(2, 2), &r, 100);
    let pairs = || Labels::Pairs(vec![PolicyPair::new(vec![1, 0], 2)]);
    alice
        .publish_with("small", "t", &[1u8; 10], pairs())
        .unwrap();
    alice
        .publish_with("big", "t", &vec![1u8; 1 << 20], pairs())
        .unwrap();
    let (_, small) = r.get_resource("alice", "small").unwrap();
    let (_, big) = r.get_resource("alice", "big").unwrap();
    assert_eq!(small.revocable[0].len(), big.revocable[0].len());
    assert!(big.permanent.len() >= 1 << 20 && big.permanent.len() < (1 << 20) + 64);
}

#[test]
fn link_validation_and_replacement() {
    let r = repo();
    let mut alice = enroll("alice", binary(1, 2), &r, 110);
    enroll("bob", binary(1, 2), &r, 111);
    assert!(matches!(
        alice.create_link("bob", wildcard(1), 0),
        Err(NodeError::BadDistance { d: 0, d_max: 2 })
    ));
    assert!(matches!(
        alice.create_link("bob", Grant::Credentials(CredentialSet::new()), 1),
        Err(NodeError::NoUniverse)
    ));
    alice.create_link("bob", wildcard(1), 1).unwrap();
    alice
        .create_link("bob", Grant::Pattern(vec![Some(1)]), 2)
        .unwrap();
    assert_eq!(alice.issued().len(), 1);
    assert_eq!(alice.revoked_pending().len(), 1);
    assert!(matches!(
        alice.revoke_link("carol"),
        Err(NodeError::NoSuchLink(_))
    ));
    alice.revoke_pending().unwrap();
    assert!(alice.revoked_pending().is_empty());
    assert_eq!(alice.epoch(), 1);
}

#[test]
fn revocation_on_a_path_with_a_second_route() {
    // a -> b -> c, a -> d -> c: revoking b leaves c reachable through d.
    let r = repo();
    let mut a = enroll("a", binary(1, 2), &r, 120);
    let mut b = enroll("b", binary(1, 2), &r, 121);
    let mut c = enroll("c", binary(1, 2), &r, 122);
    let mut d = enroll("d", binary(1, 2), &r, 123);
    for i in 0..3 {
        a.publish_with(
            &format!("r{i}"),
            "t",
            format!("secret {i}").as_bytes(),
            Labels::Pairs(vec![PolicyPair::new(vec![0], 2)]),
        )
        .unwrap();
    }
    link(&mut b, "c", wildcard(1), 1);
    link(&mut a, "b", wildcard(1), 1);
    pump(&mut [&mut a, &mut b, &mut c, &mut d]);
    assert_eq!(c.access("a", "r0").unwrap(), b"secret 0");
    let msk = a.master_key_bytes();
    let before: Vec<_> = (0..3)
        .map(|i| r.get_resource("a", &format!("r{i}")).unwrap())
        .collect();
    let receipt = a.revoke_link("b").unwrap();
    assert_ne!(a.master_key_bytes(), msk);
    assert_eq!((receipt.new_epoch, receipt.resources_updated), (1, 3));
    assert!(receipt.messages.is_empty());
    for (i, (rec, blobs)) in before.iter().enumerate() {
        let (rec2, blobs2) = r.get_resource("a", &format!("r{i}")).unwrap();
        assert_eq!(blobs2.permanent, blobs.permanent);
        assert_ne!(blobs2.revocable, blobs.revocable);
        assert_eq!((rec2.epoch, rec2.version), (1, rec.version));
    }
    pump(&mut [&mut a, &mut b, &mut c, &mut d]);
    assert!(denied(b.access("a", "r0")));
    assert!(denied(c.access("a", "r0")));

    link(&mut d, "c", wildcard(1), 1);
    link(&mut a, "d", wildcard(1), 1);
    pump(&mut [&mut a, &mut b, &mut c, &mut d]);
    for i in 0..3 {
        let g = c.access_traced("a", &format!("r{i}")).unwrap();
        assert_eq!(g.plaintext, format!("secret {i}").as_bytes());
        assert_eq!(g.chain, ["a", "d"]);
        assert_eq!((g.key_epoch, g.ct_epoch), (1, 1));
    }
    assert!(denied(b.access("a", "r1")));
}

#[test]
fn survivors_are_refreshed_after_revocation() {
    let r = repo();
    let mut a = enroll("a", binary(1, 2), &r, 130);
    let mut b = enroll("b", binary(1, 2), &r, 131);
    let mut c = enroll("c", binary(1, 2), &r, 132);
    let mut e = enroll("e", binary(1, 2), &r, 133);
    a.publish_with(
        "doc",
        "t",
        b"m",
        Labels::Pairs(vec![PolicyPair::new(vec![1], 2)]),
    )
    .unwrap();
    link(&mut c, "e", wildcard(1), 1);
    link(&mut a, "b", wildcard(1), 1);
    link(&mut a, "c", wildcard(1), 1);
    pump(&mut [&mut a, &mut b, &mut c, &mut e]);
    assert_eq!(e.access("a", "doc").unwrap(), b"m");
    let old_b = b.held_keys("a");
    let receipt = a.revoke_link("b").unwrap();
    assert_eq!(receipt.messages.len(), 1);
    assert!(
        denied(c.access("a", "doc")),
        "cross-epoch key must fail before refresh"
    );
    a.send(&receipt.messages).unwrap();
    pump(&mut [&mut a, &mut b, &mut c, &mut e]);
    assert_eq!(c.access("a", "doc").unwrap(), b"m");
    assert_eq!(e.access("a", "doc").unwrap(), b"m");
    assert_eq!(e.held_keys("a")[0].1.epoch(), 1);
    assert!(denied(b.access("a", "doc")));
    assert_eq!(b.held_keys("a"), old_b);
}

#[test]
fn revocation_without_publications_rotates_keys() {
    let r = repo();
    let mut a = enroll("a", binary(1, 1), &r, 140);
    enroll("b", binary(1, 1), &r, 141);
    enroll("c", binary(1, 1), &r, 142);
    link(&mut a, "b", wildcard(1), 1);
    link(&mut a, "c", wildcard(1), 1);
    let out = a.revoke_link("b").unwrap();
    assert_eq!(
        (out.new_epoch, out.ciphertexts_updated, out.messages.len()),
        (1, 0, 1)
    );
    assert_eq!(r.get_public_key("a").unwrap().1, 1);
    assert_eq!(a.issued().keys().collect::<Vec<_>>(), ["c"]);
}

#[test]
fn repository_holds_no_key_material() {
    let r = repo();
    let mut a = enroll("a", binary(2, 2), &r, 150);
    let mut b = enroll("b", binary(2, 2), &r, 151);
    enroll("c", binary(2, 2), &r, 152);
    a.publish_with(
        "doc",
        "t",
        b"x",
        Labels::Pairs(vec![PolicyPair::new(vec![1, 1], 2)]),
    )
    .unwrap();
    link(&mut a, "b", wildcard(2), 1);
    link(&mut b, "c", wildcard(2), 1);
    b.process_mailbox().unwrap();
    let mut tags = BTreeMap::new();
    for s in r.stored_streams() {
        let (tag, _) = peek(&s).expect("every stored stream is an envelope");
        assert!(!tag.is_secret(), "{tag:?}");
        *tags.entry(tag as u8).or_insert(0) += 1;
    }
    assert_eq!(
        tags.keys().copied().collect::<Vec<_>>(),
        [0x01, 0x08, 0x0D, 0x10]
    );
}

#[test]
fn private_store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alice.json");
    let r = repo();
    let universe = ConditionUniverse::parse(r#"team="red""#, 2).unwrap();
    let mut alice = enroll("alice", Profile::Universe(universe), &r, 160);
    let mut bob = enroll("bob", binary(1, 2), &r, 161);
    alice.publish("doc", b"hi", r#"team="red""#).unwrap();
    link(
        &mut alice,
        "bob",
        Grant::Credentials(CredentialSet::new().with("team", Literal::Str("red".into()))),
        1,
    );
    bob.process_mailbox().unwrap();
    alice.save(&path).unwrap();
    bob.save(&dir.path().join("bob.json")).unwrap();
    assert_eq!(fs_mode(&path), 0o600);
    let alice2 = Node::load(&path, r.clone()).unwrap();
    assert_eq!(alice2.master_key_bytes(), alice.master_key_bytes());
    assert_eq!(alice2.issued(), alice.issued());
    assert_eq!(alice2.publications(), alice.publications());
    assert_eq!(alice2.universe(), alice.universe());
    let bob2 = Node::load(&dir.path().join("bob.json"), r.clone()).unwrap();
    assert_eq!(bob2.access("alice", "doc").unwrap(), b"hi");
    assert_eq!(bob2.held_keys("alice"), bob.held_keys("alice"));
}

fn fs_mode(p: &std::path::Path) -> u32 {
    std::fs::metadata(p).unwrap().permissions().mode() & 0o777
}
