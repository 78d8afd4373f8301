mod common;

use std::net::TcpListener;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sgnn::net::{run_session, SessionConfig, Topology};
use sgnn::prims::{self, share_index};
use sgnn::{PartyId, RingElem};

const CHI2_255_P001: f64 = 330.52;

/// Pearson statistic against a uniform distribution over `counts.len()` bins.
fn chi_square(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Runs `q` accesses of the same secret row and returns each party's view.
fn access_views(m: usize, secret: u64, q: usize, seed: u64) -> [Vec<(PartyId, Vec<u8>)>; 3] {
    let values: Vec<f64> = (0..m).map(|i| i as f64).collect();
    let array = split(&values, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed + 1);
    let (mut i1, mut i2) = (Vec::new(), Vec::new());
    for _ in 0..q {
        let (a, b) = share_index(secret, m as u64, &mut rng);
        i1.push(a);
        i2.push(b);
    }
    let idx = [i1, i2, vec![RingElem::ZERO; q]];
    run(seed + 2, |ctx| {
        ctx.capture_view();
        prims::array_access(ctx, mine(ctx, &array), 1, mine(ctx, &idx))?;
        Ok(ctx.take_view())
    })
    .outputs
}

fn words(payload: &[u8]) -> Vec<u64> {
    payload
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn access_view_of_p2_is_uniform() {
    let (m, q) = (5, 4000);
    for secret in [1, 4] {
        let [_, v2, _] = access_views(m, secret, q, 10 + secret);
        let from_p1: Vec<u64> = v2
            .iter()
            .filter(|(p, _)| *p == PartyId::P1)
            .flat_map(|(_, b)| words(b))
            .collect();
        assert_eq!(from_p1.len(), q * (m + 1));
        let (mut h, mut bytes) = (vec![0u64; m], vec![0u64; 256]);
        for chunk in from_p1.chunks(m + 1) {
            h[chunk[m] as usize] += 1;
            for w in &chunk[..m] {
                bytes[(w & 0xff) as usize] += 1;
            }
        }
        // Upper 0.1% point with 4 degrees of freedom.
        assert!(chi_square(&h) < 18.47, "secret {secret}: shifted index counts {h:?}");
        assert!(chi_square(&bytes) < CHI2_255_P001, "secret {secret}: masked rows");
    }
}

#[test]
fn access_view_of_p3_is_uniform() {
    let (m, q) = (5, 4000);
    let [_, _, v3] = access_views(m, 2, q, 30);
    let got: Vec<u64> = v3
        .iter()
        .filter(|(p, _)| *p == PartyId::P2)
        .flat_map(|(_, b)| words(b))
        .collect();
    let mut h = vec![0u64; m];
    for chunk in got.chunks(m + 1) {
        h[chunk[m] as usize] += 1;
    }
    assert!(chi_square(&h) < 18.47, "{h:?}");
}

#[test]
fn dealing_sends_nothing_online() {
    let out = run(3, |ctx| {
        ctx.scoped("deal", |ctx| {
            prims::arith_triples(ctx, 64)?;
            prims::bin_triples(ctx, 64)?;
            Ok(())
        })
    });
    let s = out.metrics.scope("deal").unwrap();
    assert_eq!((s.online_bytes, s.online_bits, s.rounds), (0, 0, 0));
    assert_eq!(s.offline_bits, 2 * (3 * 64 * 64 + 3 * 64));
}

fn program(ctx: &mut sgnn::Ctx) -> sgnn::Result<Vec<RingElem>> {
    let x = split(&[1.5, -2.0, 7.25], 9);
    let y = split(&[0.5, 3.0, -1.0], 10);
    let p = prims::mul(ctx, mine(ctx, &x), mine(ctx, &y))?;
    prims::relu(ctx, &p)
}

#[test]
fn transcripts_repeat_and_do_not_depend_on_the_transport() {
    let a = run_session(&SessionConfig::with_seed(21), program).unwrap();
    let b = run_session(&SessionConfig::with_seed(21), program).unwrap();
    assert_eq!(a.metrics.transcripts(), b.metrics.transcripts());
    assert_eq!(open(&a.outputs), [0.75, 0.0, 0.0]);

    let ports: Vec<_> = (0..3).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let addrs = ports.iter().map(|l| l.local_addr().unwrap()).collect::<Vec<_>>();
    drop(ports);
    let cfg = SessionConfig {
        topology: Topology::Tcp {
            addrs: addrs.try_into().unwrap(),
        },
        ..SessionConfig::with_seed(21)
    };
    let t = run_session(&cfg, program).unwrap();
    assert_eq!(a.metrics.transcripts(), t.metrics.transcripts());
    assert_eq!(a.outputs, t.outputs);
    assert_eq!(a.metrics.rounds(), t.metrics.rounds());
}
