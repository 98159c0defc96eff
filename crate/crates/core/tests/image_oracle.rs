//! Image-source enumeration against a brute-force mirror oracle.

mod common;

use std::collections::BTreeSet;

use common::{brute_audible, brute_images, key, random_inside, rooms};
use echosep::acoustics::{audible_images, enumerate_images, Room, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn enumeration_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, room) in rooms() {
        for _ in 0..10 {
            let p = random_inside(&room, &mut rng);
            for order in 0..=2 {
                let got: BTreeSet<_> = enumerate_images(&room, p, order).unwrap().iter().map(|i| key(i.position)).collect();
                assert_eq!(got, brute_images(&room, p, order), "{name} at {p:?}, order {order}");
            }
        }
    }
}

#[test]
fn shoebox_order_two_count() {
    let room = Room::shoebox([4.0, 6.0, 3.0], 0.4, 16000).unwrap();
    let imgs = enumerate_images(&room, Vec3::new(1.0, 1.0, 1.0), 2).unwrap();
    // 1 + 6 + 6·5 sequences, minus the 12 duplicated corner pairs
    assert_eq!(imgs.len(), 1 + 6 + 30 - 12);
}

#[test]
fn audibility_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, room) in rooms() {
        for _ in 0..10 {
            let s = random_inside(&room, &mut rng);
            let r = random_inside(&room, &mut rng);
            let got: BTreeSet<_> = audible_images(&room, s, r, 2).unwrap().iter().map(|i| key(i.position)).collect();
            assert_eq!(got, brute_audible(&room, s, r, 2), "{name}: source {s:?}, receiver {r:?}");
        }
    }
}
