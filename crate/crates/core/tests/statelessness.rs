//! A fresh client can pick up from a server snapshot between any two
//! episodes; nothing survives on the client side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use stash_oram::crypto::{CipherKind, GroupKey};
use stash_oram::hierarchy::{encrypted_store, ObliviousRam, Oram};
use stash_oram::params::{Mode, OramParams};
use stash_oram::server::Server;
use stash_oram::store::{EncryptedStore, RecordStore};
use stash_oram::tree::TreeOram;
use stash_oram::Error;

fn params(n: u64) -> OramParams {
    OramParams { mode: Mode::Oblivious, master_seed: 77, ..OramParams::new(n) }
}

fn reopen(bytes: &[u8], p: &OramParams, key: &GroupKey, nonce_seed: u64) -> EncryptedStore {
    let server = Server::read_snapshot(bytes).unwrap();
    EncryptedStore::new(server, p.cipher, key, nonce_seed)
}

fn snapshot(store: &EncryptedStore) -> Vec<u8> {
    let mut bytes = Vec::new();
    store.server().write_snapshot(&mut bytes).unwrap();
    bytes
}

#[test]
fn prf_client_restarts_every_episode() {
    let p = params(64);
    let key = GroupKey::from_seed(p.master_seed);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut plain = vec![0u64; 64];
    let mut bytes = snapshot(Oram::init(p.clone(), encrypted_store(&p, false)).unwrap().store());
    for step in 0..400u64 {
        let mut oram = Oram::resume(p.clone(), reopen(&bytes, &p, &key, step)).unwrap();
        assert_eq!(oram.episodes().unwrap(), step);
        let x = rng.gen_range(0..64);
        let v = rng.gen();
        assert_eq!(oram.write(x, v).unwrap(), plain[x as usize]);
        plain[x as usize] = v;
        bytes = snapshot(oram.store());
    }
    let mut oram = Oram::resume(p.clone(), reopen(&bytes, &p, &key, 999)).unwrap();
    for x in 0..64 {
        assert_eq!(oram.read(x).unwrap(), plain[x as usize]);
    }
}

#[test]
fn tree_client_restarts_every_episode() {
    let p = params(16);
    let key = GroupKey::from_seed(p.master_seed);
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut plain = vec![0u64; 16];
    let mut bytes = snapshot(TreeOram::init(p.clone(), encrypted_store(&p, false)).unwrap().store());
    for step in 0..120u64 {
        let mut tree = TreeOram::resume(p.clone(), reopen(&bytes, &p, &key, step)).unwrap();
        let x = rng.gen_range(0..16);
        let v = rng.gen();
        assert_eq!(tree.write(x, v).unwrap(), plain[x as usize]);
        plain[x as usize] = v;
        assert_eq!(tree.check_reachability().unwrap(), 30);
        bytes = snapshot(tree.store());
    }
    let mut tree = TreeOram::resume(p.clone(), reopen(&bytes, &p, &key, 999)).unwrap();
    for x in 0..16 {
        assert_eq!(tree.read(x).unwrap(), plain[x as usize]);
    }
}

#[test]
fn snapshot_file_round_trip() {
    let p = params(32);
    let mut oram = Oram::init(p.clone(), encrypted_store(&p, false)).unwrap();
    for x in 0..40 {
        oram.write(x % 32, x).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.snap");
    oram.write_snapshot(&mut std::fs::File::create(&path).unwrap()).unwrap();
    let server = Server::read_snapshot(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(server.total_cells(), oram.store().total_cells());
    let store = EncryptedStore::new(server, p.cipher, &GroupKey::from_seed(77), 1);
    let mut resumed = Oram::resume(p, store).unwrap();
    assert_eq!(resumed.read(7).unwrap(), 39);
}

#[test]
fn wrong_key_and_damaged_snapshots_are_rejected() {
    let p = params(32);
    let oram = Oram::init(p.clone(), encrypted_store(&p, false)).unwrap();
    let bytes = snapshot(oram.store());
    let wrong = reopen(&bytes, &p, &GroupKey::from_seed(78), 0);
    assert!(matches!(Oram::resume(p.clone(), wrong), Err(Error::Integrity(_))));
    assert!(matches!(Server::read_snapshot(&bytes[..bytes.len() / 2]), Err(_)));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Server::read_snapshot(&bad[..]), Err(Error::Format(_))));
    // A different n does not fit the stored layout.
    let other = reopen(&bytes, &p, &GroupKey::from_seed(77), 0);
    assert!(matches!(Oram::resume(params(4096), other), Err(Error::Usage(_))));
}

#[test]
fn transparent_cipher_snapshots_resume_too() {
    let p = OramParams { cipher: CipherKind::Transparent, ..params(64) };
    let mut oram = Oram::init(p.clone(), encrypted_store(&p, false)).unwrap();
    oram.write(3, 9).unwrap();
    let bytes = snapshot(oram.store());
    let mut resumed = Oram::resume(p.clone(), reopen(&bytes, &p, &GroupKey::from_seed(77), 0)).unwrap();
    assert_eq!(resumed.read(3).unwrap(), 9);
}
