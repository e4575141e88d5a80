use nomad_core::{unpack_row, KeyCodeCache, KeyCodes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_keys_match_shadow_array() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for &s in &[1usize, 3, 16, 64] {
        let mut cache = KeyCodeCache::new(s).unwrap();
        let mut shadow: Vec<Vec<u8>> = Vec::new();
        for _ in 0..1000 {
            let codes: Vec<u8> = (0..s).map(|_| rng.random_range(0..16)).collect();
            cache
                .append(&KeyCodes::new(codes.clone()).unwrap())
                .unwrap();
            shadow.push(codes);
        }
        assert_eq!(cache.bytes_used(), 1000usize.div_ceil(32) * s * 16);
        for (i, codes) in shadow.iter().enumerate() {
            for (j, &c) in codes.iter().enumerate() {
                assert_eq!(cache.read_code(i, j).unwrap(), c);
            }
        }
        // unpacking every row reproduces each sub-quantizer's sequence, zero padded
        for j in 0..s {
            let mut seq = Vec::new();
            for block in cache.blocks() {
                seq.extend_from_slice(&unpack_row(block.row(j)));
            }
            let mut want: Vec<u8> = shadow.iter().map(|c| c[j]).collect();
            want.resize(seq.len(), 0);
            assert_eq!(seq, want);
        }
        assert!(cache.read_code(1000, 0).is_err());
    }
}

#[test]
fn appends_of_0_to_31_unpack_in_order() {
    let mut cache = KeyCodeCache::new(1).unwrap();
    for c in 0..32u8 {
        cache.append(&KeyCodes::new(vec![c % 16]).unwrap()).unwrap();
    }
    let want: Vec<u8> = (0..32).map(|c| c % 16).collect();
    assert_eq!(unpack_row(cache.block(0).row(0)).to_vec(), want);
}
