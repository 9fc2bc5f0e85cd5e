mod common;

use common::*;
use couple_core::index::{hamming, pack_rows, BinaryCodeIndex};
use couple_core::matrix::Matrix;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn search_matches_float_hamming() {
    let mut r = rng(31);
    for &l in &[16usize, 32, 48, 64, 65, 96, 128] {
        for _ in 0..5 {
            let n = r.random_range(1..300);
            let db = random_codes(&mut r, n, l);
            let q = random_codes(&mut r, 7, l);
            let index = BinaryCodeIndex::pack(&db).unwrap();
            let k = r.random_range(1..=n + 5);
            let seq = index.search(&q, k).unwrap();
            let par = index.search_parallel(&q, k).unwrap();
            assert_eq!(seq, par);
            assert_eq!(seq.clamped, k > n);
            for (qi, got) in seq.neighbors.iter().enumerate() {
                let want = hamming_oracle(&db, q.row(qi));
                let want: Vec<(usize, u32)> = want.into_iter().take(k).collect();
                let got: Vec<(usize, u32)> = got.iter().map(|nb| (nb.index, nb.distance)).collect();
                assert_eq!(got, want, "L = {l}");
            }
        }
    }
}

#[test]
fn sharded_search_equals_sequential() {
    let mut r = rng(32);
    let db = random_codes(&mut r, 1000, 64);
    let index = BinaryCodeIndex::pack(&db).unwrap();
    let q = pack_rows(&random_codes(&mut r, 1, 64)).unwrap();
    let full = index.search_packed(&q, 50).unwrap();
    for shards in [1, 2, 3, 7, 16] {
        assert_eq!(index.search_packed_sharded(&q, 50, shards).unwrap(), full);
    }
}

#[test]
fn pack_round_trip_all_lengths() {
    let mut r = rng(33);
    for &l in &[16usize, 32, 48, 64, 96, 128] {
        let codes = random_codes(&mut r, 20, l);
        let index = BinaryCodeIndex::pack(&codes).unwrap();
        assert_eq!(index.unpack(), codes);
        let bytes = index.to_bytes();
        let back = BinaryCodeIndex::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        assert_eq!(back, index);
    }
}

#[test]
fn save_and_load_with_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(34);
    let codes = random_codes(&mut r, 10, 32);
    let index = BinaryCodeIndex::pack(&codes)
        .unwrap()
        .with_ids((100..110).collect())
        .unwrap();
    let cp = dir.path().join("c.hsh");
    let ip = dir.path().join("c.ids");
    index.save(&cp, Some(&ip)).unwrap();
    assert_eq!(BinaryCodeIndex::load(&cp, Some(&ip)).unwrap(), index);
}

#[test]
fn non_binary_entries_are_rejected() {
    let m = Matrix::from_rows(&[[1.0, 0.5]]);
    assert!(BinaryCodeIndex::pack(&m).is_err());
}

fn code(bits: &[bool]) -> Matrix {
    Matrix::from_vec(1, bits.len(), bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect())
}

proptest! {
    #[test]
    fn hamming_is_a_metric(
        a in proptest::collection::vec(any::<bool>(), 70),
        b in proptest::collection::vec(any::<bool>(), 70),
        c in proptest::collection::vec(any::<bool>(), 70),
    ) {
        let pa = pack_rows(&code(&a)).unwrap();
        let pb = pack_rows(&code(&b)).unwrap();
        let pc = pack_rows(&code(&c)).unwrap();
        prop_assert_eq!(hamming(&pa, &pa), 0);
        prop_assert_eq!(hamming(&pa, &pb), hamming(&pb, &pa));
        prop_assert!(hamming(&pa, &pc) <= hamming(&pa, &pb) + hamming(&pb, &pc));
        let direct = a.iter().zip(&b).filter(|(x, y)| x != y).count() as u32;
        prop_assert_eq!(hamming(&pa, &pb), direct);
        if hamming(&pa, &pb) == 0 {
            prop_assert_eq!(&a, &b);
        }
    }

    #[test]
    fn distance_matches_inner_product_identity(bits in proptest::collection::vec(any::<bool>(), 2..130), seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = bits.len();
        let a = code(&bits);
        let b = random_codes(&mut r, 1, l);
        let ip: f64 = a.row(0).iter().zip(b.row(0)).map(|(x, y)| x * y).sum();
        let d = hamming(&pack_rows(&a).unwrap(), &pack_rows(&b).unwrap());
        prop_assert_eq!(2 * d as i64, l as i64 - ip as i64);
    }
}
