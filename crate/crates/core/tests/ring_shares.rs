mod common;

use common::CODEC;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sgnn::ring::{trunc_share, RingElem, ShareRole};
use sgnn::shares::{reconstruct, share, Dealer};

const ULP: f64 = 1.0 / 32768.0;

/// Pearson statistic of byte counts against a uniform expectation.
fn chi_square(counts: &[u64; 256]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / 256.0;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

// Upper 0.1% point of chi-square with 255 degrees of freedom.
const CHI2_255_P001: f64 = 330.52;

#[test]
fn single_shares_are_uniform_bytes() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let secret = CODEC.encode(3.25).unwrap();
    let (mut low, mut high) = ([0u64; 256], [0u64; 256]);
    for _ in 0..100_000 {
        let s = share(secret, &mut rng);
        assert_eq!(s.reconstruct(), secret);
        low[(s.second.0 & 0xff) as usize] += 1;
        high[(s.first.0 >> 56) as usize] += 1;
    }
    assert!(chi_square(&low) < CHI2_255_P001, "low byte {}", chi_square(&low));
    assert!(chi_square(&high) < CHI2_255_P001, "high byte {}", chi_square(&high));
}

#[test]
fn dealt_triples_satisfy_their_relations() {
    let mut d = Dealer::new(4);
    let [a, b] = d.arith(500);
    for i in 0..500 {
        let u = reconstruct(a.u[i], b.u[i]);
        let v = reconstruct(a.v[i], b.v[i]);
        assert_eq!(reconstruct(a.w[i], b.w[i]), u * v);
    }
    let [a, b] = d.binary(300);
    let (u, v, w) = (a.u.xor(&b.u), a.v.xor(&b.v), a.w.xor(&b.w));
    assert_eq!(w, u.and(&v));
}

#[test]
fn encoding_bound_is_enforced() {
    assert!(CODEC.encode(CODEC.bound() * 0.99).is_ok());
    assert!(CODEC.encode(CODEC.bound() * 1.01).is_err());
    assert!(CODEC.encode(f64::NAN).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn encoded_sums_decode_within_two_ulps(x in -1e6f64..1e6, y in -1e6f64..1e6) {
        let s = CODEC.encode(x).unwrap() + CODEC.encode(y).unwrap();
        prop_assert!((CODEC.decode(s) - (x + y)).abs() <= 2.0 * ULP);
    }

    #[test]
    fn shared_truncated_products_stay_within_two_ulps(x in -1024.0f64..1024.0, y in -1024.0f64..1024.0, seed: u64) {
        let (ex, ey) = (CODEC.encode(x).unwrap(), CODEC.encode(y).unwrap());
        let (fx, fy) = (CODEC.decode(ex), CODEC.decode(ey));
        prop_assume!((fx * fy).abs() < 1_048_576.0);
        let s = share(ex * ey, &mut ChaCha20Rng::seed_from_u64(seed));
        let t = trunc_share(s.first, 15, ShareRole::First) + trunc_share(s.second, 15, ShareRole::Second);
        // Local share truncation is wrong with probability ~|xy| 2^-49; the
        // chance over these cases is negligible.
        prop_assert!((CODEC.decode(t) - fx * fy).abs() <= 2.0 * ULP);
    }

    #[test]
    fn encoding_is_injective_on_the_grid(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000) {
        let (x, y) = (a as f64 * ULP, b as f64 * ULP);
        let (ex, ey) = (CODEC.encode(x).unwrap(), CODEC.encode(y).unwrap());
        prop_assert_eq!(ex == ey, a == b);
        prop_assert_eq!(CODEC.decode(ex), x);
    }

    #[test]
    fn any_ring_element_reconstructs(v: u64, seed: u64) {
        let s = share(RingElem(v), &mut ChaCha20Rng::seed_from_u64(seed));
        prop_assert_eq!(reconstruct(s.first, s.second), RingElem(v));
    }
}
