#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sgnn::net::{run_session, SessionConfig, SessionOutput};
use sgnn::ring::{FixedCodec, RingElem};
use sgnn::shares::{reconstruct_vec, share_vec};
use sgnn::{Ctx, PartyId, Result};

pub const CODEC: FixedCodec = FixedCodec { frac_bits: 15 };

/// Encodes and splits plaintext values; P3's slot holds placeholder zeros.
pub fn split(xs: &[f64], seed: u64) -> [Vec<RingElem>; 3] {
    let enc = CODEC.encode_all(xs).expect("encodable input");
    split_ring(&enc, seed)
}

pub fn split_ring(xs: &[RingElem], seed: u64) -> [Vec<RingElem>; 3] {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (a, b) = share_vec(xs, &mut rng);
    [a, b, vec![RingElem::ZERO; xs.len()]]
}

pub fn mine<'a, T>(ctx: &Ctx, shares: &'a [T; 3]) -> &'a T {
    &shares[ctx.id().index() - 1]
}

pub fn run<T: Send>(seed: u64, f: impl Fn(&mut Ctx) -> Result<T> + Sync) -> SessionOutput<T> {
    run_session(&SessionConfig::with_seed(seed), f).expect("session runs")
}

pub fn open(out: &[Vec<RingElem>; 3]) -> Vec<f64> {
    CODEC.decode_all(&reconstruct_vec(&out[0], &out[1]))
}

pub fn open_ring(out: &[Vec<RingElem>; 3]) -> Vec<RingElem> {
    reconstruct_vec(&out[0], &out[1])
}

pub fn is_holder(p: PartyId) -> bool {
    p != PartyId::P3
}

use sgnn::graphstore::{encrypt_graph, pad, synthetic, GraphShare, PlainGraph, SyntheticSpec};
use sgnn::oracle::PlainModel;
use sgnn::sgcn::{ModelState, TrainConfig};

/// A generated graph with its shares, initial weights and training config.
pub struct Desk {
    pub graph: PlainGraph,
    pub model: PlainModel,
    pub shares: [GraphShare; 2],
    pub model_shares: [ModelState; 2],
    pub cfg: TrainConfig,
}

pub fn desk(nodes: usize, features: usize, seed: u64) -> Desk {
    let graph = synthetic(&SyntheticSpec {
        nodes,
        features,
        classes: 3,
        avg_degree: 3,
        labeled_per_class: if nodes <= 8 { 2 } else { 4 },
        seed,
        ..Default::default()
    });
    let cfg = TrainConfig {
        hidden: 8,
        max_epochs: 60,
        ..Default::default()
    };
    let model = PlainModel::init(features, cfg.hidden, 3, seed + 100);
    let shares = encrypt_graph(&graph, &pad(&graph), CODEC, seed + 200).expect("encrypt");
    let model_shares = ModelState::share(&model, CODEC, seed + 300).expect("share model");
    Desk {
        graph,
        model,
        shares,
        model_shares,
        cfg,
    }
}

/// Weights trained in plaintext until the outputs are far from uniform, for
/// checks that compare argmax decisions.
pub fn trained_model(d: &Desk) -> PlainModel {
    let cfg = TrainConfig {
        learning_rate: 10.0,
        max_epochs: 30,
        beta: usize::MAX,
        ..d.cfg.clone()
    };
    let run = sgnn::oracle::plain_train(&d.graph, &d.model, &cfg, sgnn::oracle::OracleMode::Exact);
    run.model.quantized(&CODEC)
}
