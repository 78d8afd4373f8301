mod common;

use common::*;
use proptest::prelude::*;
use sgnn::graphstore::{encrypt_graph, pad, parse_content_cites, synthetic, GraphShare, PlainGraph, SyntheticSpec};
use sgnn::net::SessionConfig;
use sgnn::oracle::{self, backward, forward, loss, GraphPrep, Num, OracleMode, PlainModel, StopCounter};
use sgnn::prims::ApproxConfig;
use sgnn::sgcn::{
    infer_session, prepare, probe_session, sec_aggregate, sec_converged, train_session, ModelState, TrainConfig,
};
use sgnn::{Error, PartyId, RingElem};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

fn faithful(cfg: &TrainConfig) -> Num {
    Num::new(OracleMode::ApproxFaithful, cfg.approx)
}

/// Holder inputs for a session; P3 gets shape-only placeholders.
fn inputs(d: &Desk, id: PartyId) -> (GraphShare, ModelState) {
    match id {
        PartyId::P1 => (d.shares[0].clone(), d.model_shares[0].clone()),
        PartyId::P2 => (d.shares[1].clone(), d.model_shares[1].clone()),
        PartyId::P3 => (GraphShare::placeholder(&d.shares[0]), d.model_shares[0].placeholder()),
    }
}

fn graph_from_text(content: &str, cites: &str) -> PlainGraph {
    parse_content_cites(content.as_bytes(), "t.content", cites.as_bytes(), "t.cites").expect("valid toy files")
}

#[test]
fn forward_and_gradients_match_faithful_oracle() {
    for (n, l) in [(8, 4), (8, 8), (24, 4), (24, 8)] {
        for fused in [false, true] {
            let mut d = desk(n, l, 7);
            d.cfg.fused_grad = fused;
            let p = probe_session(&SessionConfig::with_seed(1), &d.shares, &d.model_shares, &d.cfg).unwrap();
            let num = faithful(&d.cfg);
            let prep = GraphPrep::new(&d.graph, &num);
            let model = d.model.quantized(&CODEC);
            let tr = forward(&prep, &model, &num);
            let g = backward(&prep, &model, &tr, &num, fused);
            let z: Vec<f64> = prep
                .labeled
                .iter()
                .flat_map(|&v| tr.z[v * 3..v * 3 + 3].to_vec())
                .collect();
            let what = format!("n={n} l={l} fused={fused}");
            assert!(max_diff(&p.fbar, &prep.fbar) < 1e-3, "{what}");
            assert!(max_diff(&p.agg0, &tr.agg0) < 1e-3, "{what}");
            assert!(max_diff(&p.pre1, &tr.pre1) < 1e-3, "{what}");
            assert!(max_diff(&p.x1, &tr.x1) < 1e-3, "{what}");
            assert!(max_diff(&p.z, &z) < 1e-2, "{what}");
            assert!((p.loss - loss(&prep, &tr.z, &num)).abs() < 1e-2, "{what}");
            assert!(max_diff(&p.dm1, &g.dm1) < 5e-2, "{what}");
            assert!(max_diff(&p.dm2, &g.dm2) < 5e-2, "{what}");
        }
    }
}

#[test]
fn fused_and_separated_gradients_agree() {
    let d = desk(24, 8, 3);
    let num = faithful(&d.cfg);
    let prep = GraphPrep::new(&d.graph, &num);
    let tr = forward(&prep, &d.model, &num);
    let sep = backward(&prep, &d.model, &tr, &num, false);
    let fused = backward(&prep, &d.model, &tr, &num, true);
    assert!(max_diff(&sep.dm1, &fused.dm1) < 2e-2);
    assert!(max_diff(&sep.dm2, &fused.dm2) < 2e-2);
}

#[test]
fn secure_training_tracks_the_oracle_and_halts_with_it() {
    for (n, l) in [(8, 4), (8, 8), (24, 4), (24, 8)] {
        let mut d = desk(n, l, 7);
        d.cfg.debug_loss = true;
        let s = train_session(&SessionConfig::with_seed(1), &d.shares, &d.model_shares, &d.cfg).unwrap();
        let o = oracle::plain_train(&d.graph, &d.model.quantized(&CODEC), &d.cfg, OracleMode::ApproxFaithful);
        assert_eq!((s.epochs, s.halted), (o.epochs, o.halted), "n={n} l={l}");
        assert_eq!(s.flags, o.flags);
        assert!(max_diff(&s.losses, &o.losses) < 1e-2, "n={n} l={l}");
        let flags = s.flags.len() as u64;
        assert_eq!(
            s.metrics.opened(),
            [flags, flags, 0],
            "only convergence flags are opened"
        );
        assert_eq!(s.records.len(), s.epochs);
        assert!(s.anomalies.is_empty(), "{:?}", s.anomalies);
        assert!(max_diff(&s.model.m1, &o.model.m1) < 5e-2);
    }
}

#[test]
fn inference_argmax_matches_oracle_on_every_node() {
    for (n, l, seed) in [(8, 4, 8), (24, 8, 9), (24, 4, 11)] {
        let d = desk(n, l, seed);
        let model = trained_model(&d);
        let shares = ModelState::share(&model, CODEC, 5).unwrap();
        let nodes: Vec<usize> = (0..n).collect();
        let out = infer_session(&SessionConfig::with_seed(3), &d.shares, &shares, &nodes, &d.cfg.approx).unwrap();
        let num = faithful(&d.cfg);
        let tr = forward(&GraphPrep::new(&d.graph, &num), &model, &num);
        assert!(max_diff(&out.z, &tr.z) < 1e-2);
        for v in nodes {
            let (sec, orc) = (&out.z[v * 3..v * 3 + 3], &tr.z[v * 3..v * 3 + 3]);
            assert_eq!(argmax(sec), argmax(orc), "node {v}: {sec:?} vs {orc:?}");
        }
    }
}

#[test]
fn batched_inference_beats_one_query_at_a_time() {
    let d = desk(24, 8, 5);
    let cfg = ApproxConfig::default();
    let session = SessionConfig::with_seed(4);
    let batch = infer_session(&session, &d.shares, &d.model_shares, &[0, 5, 9, 17], &cfg).unwrap();
    let single = infer_session(&session, &d.shares, &d.model_shares, &[0], &cfg).unwrap();
    let infer_bytes = |m: &sgnn::net::SessionMetrics| m.scope("infer").unwrap().online_bytes;
    assert!(infer_bytes(&batch.metrics) < 4 * infer_bytes(&single.metrics));
    assert!(max_diff(&batch.z[..3], &single.z) < 1e-2);
}

#[test]
fn unknown_node_is_rejected() {
    let d = desk(8, 4, 5);
    let err = infer_session(
        &SessionConfig::default(),
        &d.shares,
        &d.model_shares,
        &[8],
        &ApproxConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::UnknownNode(9)), "{err}");
}

#[test]
fn runs_are_deterministic_per_seed() {
    let mut d = desk(8, 4, 5);
    d.cfg.max_epochs = 3;
    let session = SessionConfig::with_seed(9);
    let a = train_session(&session, &d.shares, &d.model_shares, &d.cfg).unwrap();
    let b = train_session(&session, &d.shares, &d.model_shares, &d.cfg).unwrap();
    assert_eq!(a.model_shares, b.model_shares);
    assert_eq!(a.metrics.transcripts(), b.metrics.transcripts());
    let c = train_session(&SessionConfig::with_seed(10), &d.shares, &d.model_shares, &d.cfg).unwrap();
    assert_ne!(a.model_shares, c.model_shares);
}

#[test]
fn invalid_config_fails_before_the_session() {
    let d = desk(8, 4, 5);
    let cfg = TrainConfig {
        alpha: 0.0,
        ..d.cfg.clone()
    };
    let err = train_session(&SessionConfig::default(), &d.shares, &d.model_shares, &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn toy_training_stops_at_the_recorded_epoch() {
    let fixtures: oracle::Fixtures =
        serde_json::from_str(include_str!("fixtures/derived.json")).expect("fixtures parse");
    let toy = oracle::toy_fixture();
    let shares = encrypt_graph(&toy.graph, &pad(&toy.graph), CODEC, 1).unwrap();
    let model = ModelState::share(&toy.model, CODEC, 2).unwrap();
    let s = train_session(&SessionConfig::with_seed(1), &shares, &model, &toy.cfg).unwrap();
    assert_eq!(s.epochs, fixtures.toy_halt_epoch);
    assert_eq!(s.halted, fixtures.toy_halted);
}

#[test]
fn path_graph_middle_node_aggregate() {
    let g = graph_from_text("a 1 x\nb 1 x\nc 1 x\n", "a b\nb c\n");
    let shares = encrypt_graph(&g, &pad(&g), CODEC, 3).unwrap();
    let x = split(&[1.0, 2.0, 3.0], 4);
    let out = run(5, |ctx| {
        let share = match ctx.id() {
            PartyId::P3 => GraphShare::placeholder(&shares[0]),
            p => shares[p.index() - 1].clone(),
        };
        let prepared = prepare(ctx, share, &ApproxConfig::default())?;
        sec_aggregate(ctx, &prepared, mine(ctx, &x), 1, &[0, 1, 2])
    });
    let agg = open(&out.outputs);
    let want = 2.0 / 3.0 + 4.0 / 6f64.sqrt();
    assert!(
        (agg[1] - 2.2997).abs() < 1e-2 && (agg[1] - want).abs() < 1e-2,
        "{agg:?}"
    );
}

#[test]
fn isolated_node_keeps_its_own_features() {
    let g = graph_from_text("a 1 0 x\nb 0 1 y\nc 1 1 x\n", "a b\n");
    assert_eq!(g.sw()[2], 1.0);
    let shares = encrypt_graph(&g, &pad(&g), CODEC, 3).unwrap();
    let x = split(&[0.5, -1.0, 2.0, 0.25, -3.0, 1.5], 4);
    let out = run(5, |ctx| {
        let share = match ctx.id() {
            PartyId::P3 => GraphShare::placeholder(&shares[0]),
            p => shares[p.index() - 1].clone(),
        };
        let prepared = prepare(ctx, share, &ApproxConfig::default())?;
        sec_aggregate(ctx, &prepared, mine(ctx, &x), 2, &[2])
    });
    assert!(max_diff(&open(&out.outputs), &[-3.0, 1.5]) < 1e-2);
}

#[test]
fn wrapped_values_are_reported_as_anomalies() {
    let mut m = PlainModel::init(4, 3, 2, 1);
    assert!(sgnn::sgcn::anomalies(&m, &[1.1, 0.9]).is_empty());
    m.m2[4] = CODEC.decode(RingElem(1 << 62));
    let found = sgnn::sgcn::anomalies(&m, &[1.1, 3e13]);
    assert_eq!(found.len(), 2, "{found:?}");
    assert!(found[0].starts_with("M2[4]"));
    assert!(found[1].starts_with("loss at epoch 2"));
}

#[test]
fn model_files_round_trip() {
    let model = PlainModel::init(5, 4, 3, 8);
    let shares = ModelState::share(&model, CODEC, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p1.model");
    shares[0].save(&path).unwrap();
    assert_eq!(ModelState::load(&path).unwrap(), shares[0]);
    let back = ModelState::reconstruct(&shares, &CODEC);
    assert!(max_diff(&back.m1, &model.m1) <= 0.5 / CODEC.scale());
}

/// Runs the secure convergence check over a loss sequence and returns the
/// number of epochs executed before halting, if it halted.
fn secure_halt(losses: &[f64], alpha: f64, beta: usize) -> Option<usize> {
    let shared = split(losses, 21);
    let out = run(22, |ctx| {
        let l = mine(ctx, &shared);
        let mut counter = StopCounter::default();
        for e in 1..l.len() {
            sec_converged(ctx, l[e - 1], l[e], alpha, &mut counter)?;
            if counter.halted(beta) {
                return Ok(Some(e + 1));
            }
        }
        Ok(None)
    });
    let [a, b, c] = out.outputs;
    assert!(a == b && b == c, "parties disagree on halting");
    a
}

fn plain_halt(losses: &[f64], alpha: f64, beta: usize) -> Option<usize> {
    let mut counter = StopCounter::default();
    (1..losses.len()).find_map(|e| {
        counter.update(oracle::loss_flag(losses[e - 1], losses[e], alpha));
        counter.halted(beta).then_some(e + 1)
    })
}

#[test]
fn convergence_halts_after_five_small_changes() {
    let mut losses = vec![2.0, 1.5, 1.2, 1.0];
    losses.extend((1..=8).map(|i| 1.0 - 0.01 * i as f64));
    assert_eq!(secure_halt(&losses, 0.02, 5), Some(9));
    assert_eq!(plain_halt(&losses, 0.02, 5), Some(9));
}

#[test]
fn convergence_never_halts_on_alternating_changes() {
    let losses: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 1.0 } else { 1.1 }).collect();
    assert_eq!(secure_halt(&losses, 0.02, 5), None);
    let broken: Vec<f64> = (0..30)
        .map(|i| 1.0 - 0.005 * i as f64 + if i % 4 == 3 { 0.5 } else { 0.0 })
        .collect();
    assert_eq!(secure_halt(&broken, 0.02, 5), None);
    assert_eq!(plain_halt(&broken, 0.02, 5), None);
}

#[test]
fn encrypted_graph_has_no_degree_dependent_sizes() {
    let spec = SyntheticSpec {
        nodes: 12,
        ..Default::default()
    };
    let a = synthetic(&spec);
    let b = synthetic(&SyntheticSpec { seed: 99, ..spec });
    let (pa, pb) = (pad(&a), pad(&b));
    let sa = encrypt_graph(&a, &pa, CODEC, 1).unwrap();
    let sb = encrypt_graph(&b, &pb, CODEC, 1).unwrap();
    let words = |s: &GraphShare| s.structure_words();
    assert_eq!(words(&sa[0]), 12 * (2 * pa.d_max + 1));
    assert_eq!(words(&sb[0]), 12 * (2 * pb.d_max + 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn aggregation_matches_dense_normalized_adjacency(seed in 0u64..1000, nodes in 3usize..12, weighted: bool) {
        let g = synthetic(&SyntheticSpec { nodes, features: 2, weighted, seed, ..Default::default() });
        let shares = encrypt_graph(&g, &pad(&g), CODEC, seed).unwrap();
        let xs: Vec<f64> = (0..nodes * 2).map(|i| ((i * 7 + seed as usize) % 11) as f64 / 4.0 - 1.0).collect();
        let x = split(&xs, seed + 1);
        let all: Vec<usize> = (0..nodes).collect();
        let out = run(seed, |ctx| {
            let share = match ctx.id() {
                PartyId::P3 => GraphShare::placeholder(&shares[0]),
                p => shares[p.index() - 1].clone(),
            };
            let prepared = prepare(ctx, share, &ApproxConfig::default())?;
            sec_aggregate(ctx, &prepared, mine(ctx, &x), 2, &all)
        });
        let a = oracle::dense_adjacency(&g);
        let want: Vec<f64> = (0..nodes)
            .flat_map(|v| (0..2).map(move |c| (v, c)))
            .map(|(v, c)| (0..nodes).map(|u| a[v * nodes + u] * xs[u * 2 + c]).sum())
            .collect();
        prop_assert!(max_diff(&open(&out.outputs), &want) < 1e-2);
    }

    #[test]
    fn padding_choice_does_not_change_the_aggregate(seed in 0u64..1000) {
        let g = synthetic(&SyntheticSpec { nodes: 9, features: 3, seed, ..Default::default() });
        let num = Num::new(OracleMode::Exact, ApproxConfig::default());
        let prep = GraphPrep::new(&g, &num);
        let mut other = prep.clone();
        other.pad = sgnn::graphstore::pad_with(&g, |v| ((v + 3) % 9 + 1) as u64);
        let x: Vec<f64> = (0..27).map(|i| i as f64 / 10.0).collect();
        prop_assert!(max_diff(&prep.aggregate(&num, &x, 3), &other.aggregate(&num, &x, 3)) < 1e-12);
    }
}

#[test]
fn share_placeholders_hold_nothing() {
    let d = desk(8, 4, 1);
    let (g, m) = inputs(&d, PartyId::P3);
    assert!(g.features.iter().chain(&g.ne).all(|&x| x == RingElem::ZERO));
    assert!(m.m1.data.iter().all(|&x| x == RingElem::ZERO));
}
