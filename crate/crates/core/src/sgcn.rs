//! Secure two-layer GCN over an encrypted graph: training with a secure
//! convergence check, and batched inference.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphstore::GraphShare;
use crate::net::{run_session, Ctx, PartyId, Phase, SessionConfig, SessionMetrics};
use crate::oracle::{PlainModel, StopCounter, CLIP_LO, CLIP_SCALE};
use crate::prims::{self, ApproxConfig, SharedMatrix};
use crate::ring::{FixedCodec, RingElem, ShareRole};
use crate::shares::{reconstruct_vec, share_vec, OfflineMaterial};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub hidden: usize,
    /// Convergence threshold on the absolute loss change.
    pub alpha: f64,
    /// Consecutive small changes needed to stop.
    pub beta: usize,
    pub max_epochs: usize,
    pub labeled_per_class: usize,
    pub approx: ApproxConfig,
    /// Use `Z - T` at the output instead of the `-T/Z` and softmax-Jacobian chain.
    pub fused_grad: bool,
    /// Have the holders return loss shares so the data owner can plot them.
    pub debug_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.2,
            hidden: 16,
            alpha: 0.02,
            beta: 5,
            max_epochs: 200,
            labeled_per_class: 40,
            approx: ApproxConfig::default(),
            fused_grad: false,
            debug_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.beta == 0 || self.max_epochs == 0 || self.hidden == 0 {
            return Err(Error::Config("beta, max_epochs and hidden must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.approx.validate()
    }
}

/// One party's shares of the weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelState {
    pub m1: SharedMatrix,
    pub m2: SharedMatrix,
}

impl ModelState {
    pub fn share(plain: &PlainModel, codec: FixedCodec, seed: u64) -> Result<[ModelState; 2]> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (a1, b1) = share_vec(&codec.encode_all(&plain.m1)?, &mut rng);
        let (a2, b2) = share_vec(&codec.encode_all(&plain.m2)?, &mut rng);
        let mk = |m1, m2| ModelState {
            m1: SharedMatrix::new(plain.l, plain.h, m1),
            m2: SharedMatrix::new(plain.h, plain.c, m2),
        };
        Ok([mk(a1, a2), mk(b1, b2)])
    }

    pub fn zeros(l: usize, h: usize, c: usize) -> ModelState {
        ModelState {
            m1: SharedMatrix::zeros(l, h),
            m2: SharedMatrix::zeros(h, c),
        }
    }

    pub fn placeholder(&self) -> ModelState {
        ModelState {
            m1: SharedMatrix::zeros(self.m1.rows, self.m1.cols),
            m2: SharedMatrix::zeros(self.m2.rows, self.m2.cols),
        }
    }

    pub fn reconstruct(shares: &[ModelState; 2], codec: &FixedCodec) -> PlainModel {
        let [a, b] = shares;
        PlainModel {
            l: a.m1.rows,
            h: a.m1.cols,
            c: a.m2.cols,
            m1: codec.decode_all(&reconstruct_vec(&a.m1.data, &b.m1.data)),
            m2: codec.decode_all(&reconstruct_vec(&a.m2.data, &b.m2.data)),
        }
    }

    /// Model share file: magic `SGMD`, u16 version, then `L`, `H`, `C` as u64
    /// and the raw words of `M1` and `M2`, little endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"SGMD")?;
        w.write_all(&1u16.to_le_bytes())?;
        for d in [self.m1.rows, self.m1.cols, self.m2.cols] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in self.m1.data.iter().chain(&self.m2.data) {
            w.write_all(&x.0.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<ModelState> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..4] != b"SGMD" || head[4..] != 1u16.to_le_bytes() {
            return Err(Error::Format {
                path: "<model file>".into(),
                line: 0,
                reason: "bad magic or version".into(),
            });
        }
        let mut word = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let (l, h, c) = (word()? as usize, word()? as usize, word()? as usize);
        let m1 = (0..l * h).map(|_| word().map(RingElem)).collect::<Result<_>>()?;
        let m2 = (0..h * c).map(|_| word().map(RingElem)).collect::<Result<_>>()?;
        Ok(ModelState {
            m1: SharedMatrix::new(l, h, m1),
            m2: SharedMatrix::new(h, c, m2),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        ModelState::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Per-graph shared quantities that do not change during training.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub share: GraphShare,
    /// Row-normalized features, `N x L`.
    pub fbar: Vec<RingElem>,
    /// `1 / sw_v`, taken as the square of `1 / sqrt(sw_v)`.
    pub inv_sw: Vec<RingElem>,
    /// `W_vj / (sqrt(sw_v) sqrt(sw_Ne_vj))`, `N x d_max`.
    pub coef: Vec<RingElem>,
    /// Aggregated normalized features, `N x L`.
    pub agg0: Vec<RingElem>,
}

impl PreparedGraph {
    pub fn n(&self) -> usize {
        self.share.summary.nodes
    }

    pub fn d(&self) -> usize {
        self.share.summary.d_max
    }
}

/// Divides each feature row by its sum.
pub fn sec_normalize(ctx: &mut Ctx, f: &[RingElem], cols: usize, cfg: &ApproxConfig) -> Result<Vec<RingElem>> {
    ctx.scoped("normalize", |ctx| {
        let sums = prims::row_sums(f, cols);
        let inv = prims::reciprocal(ctx, &sums, cfg)?;
        prims::mul_rows(ctx, f, &inv, cols)
    })
}

/// Normalizes features and caches the aggregation coefficients and the
/// first-layer aggregate.
pub fn prepare(ctx: &mut Ctx, share: GraphShare, cfg: &ApproxConfig) -> Result<PreparedGraph> {
    ctx.scoped("prepare", |ctx| {
        let l = share.summary.features;
        let d = share.summary.d_max;
        let fbar = sec_normalize(ctx, &share.features, l, cfg)?;
        let (inv_sw, coef) = ctx.scoped("coefficients", |ctx| {
            let isq = prims::inv_sqrt(ctx, &share.sw, cfg)?;
            let inv_sw = prims::mul(ctx, &isq, &isq)?;
            if d == 0 {
                return Ok((inv_sw, Vec::new()));
            }
            let isq_ne = prims::array_access(ctx, &isq, 1, &share.ne)?;
            let wv = prims::mul_rows(ctx, &share.w, &isq, d)?;
            let coef = prims::mul(ctx, &wv, &isq_ne)?;
            Ok((inv_sw, coef))
        })?;
        let mut g = PreparedGraph {
            share,
            fbar,
            inv_sw,
            coef,
            agg0: Vec::new(),
        };
        let all: Vec<usize> = (0..g.n()).collect();
        g.agg0 = sec_aggregate(ctx, &g, &g.fbar, l, &all)?;
        Ok(g)
    })
}

/// Neighborhood aggregation for the listed rows of an `N x width` state:
/// neighbor rows come from secure array access, then one batched product
/// applies the self and neighbor coefficients.
pub fn sec_aggregate(
    ctx: &mut Ctx,
    g: &PreparedGraph,
    x: &[RingElem],
    width: usize,
    rows: &[usize],
) -> Result<Vec<RingElem>> {
    let d = g.d();
    ctx.scoped("aggregate", |ctx| {
        let idx: Vec<RingElem> = rows
            .iter()
            .flat_map(|&v| g.share.ne[v * d..(v + 1) * d].iter().copied())
            .collect();
        let fetched = if d == 0 {
            Vec::new()
        } else {
            prims::array_access(ctx, x, width, &idx)?
        };
        let mut lhs = Vec::with_capacity(rows.len() * (d + 1) * width);
        let mut rhs = Vec::with_capacity(lhs.capacity());
        for &v in rows {
            lhs.extend(std::iter::repeat_n(g.inv_sw[v], width));
            rhs.extend_from_slice(&x[v * width..(v + 1) * width]);
        }
        for (k, &v) in rows.iter().enumerate() {
            for j in 0..d {
                lhs.extend(std::iter::repeat_n(g.coef[v * d + j], width));
            }
            rhs.extend_from_slice(&fetched[k * d * width..(k + 1) * d * width]);
        }
        let prod = prims::mul(ctx, &lhs, &rhs)?;
        let (own, nbr) = prod.split_at(rows.len() * width);
        let mut out = own.to_vec();
        for (k, o) in out.chunks_mut(width).enumerate() {
            for j in 0..d {
                let at = (k * d + j) * width;
                for (a, &b) in o.iter_mut().zip(&nbr[at..at + width]) {
                    *a += b;
                }
            }
        }
        Ok(out)
    })
}

/// Shared intermediates of a forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    /// First-layer pre-activations, `N x H`.
    pub pre1: Vec<RingElem>,
    /// ReLU outputs, `N x H`.
    pub x1: Vec<RingElem>,
    /// ReLU derivative mask, `N x H`.
    pub mask: Vec<RingElem>,
    /// Rows for which the second layer was evaluated.
    pub rows: Vec<usize>,
    /// Aggregated hidden state of those rows, `|rows| x H`.
    pub agg1: Vec<RingElem>,
    /// Softmax outputs of those rows, `|rows| x C`.
    pub z: Vec<RingElem>,
}

/// Forward pass. The first layer always covers every node, since servers
/// cannot tell which nodes neighbor the queried ones; the second layer only
/// the requested rows.
pub fn sec_forward(
    ctx: &mut Ctx,
    g: &PreparedGraph,
    model: &ModelState,
    rows: &[usize],
    cfg: &ApproxConfig,
) -> Result<LayerCache> {
    ctx.scoped("forward", |ctx| {
        let n = g.n();
        let (h, c) = (model.m1.cols, model.m2.cols);
        let agg0 = SharedMatrix::new(n, g.share.summary.features, g.agg0.clone());
        let pre1 = prims::matmul(ctx, &agg0, &model.m1)?.data;
        let (x1, mask) = prims::relu_with_mask(ctx, &pre1)?;
        let agg1 = sec_aggregate(ctx, g, &x1, h, rows)?;
        let pre2 = prims::matmul(ctx, &SharedMatrix::new(rows.len(), h, agg1.clone()), &model.m2)?;
        let z = prims::softmax(ctx, &pre2.data, rows.len(), c, cfg)?;
        Ok(LayerCache {
            pre1,
            x1,
            mask,
            rows: rows.to_vec(),
            agg1,
            z,
        })
    })
}

fn clip(ctx: &Ctx, z: &[RingElem]) -> Vec<RingElem> {
    prims::add_const(ctx, &prims::mul_const(ctx, z, CLIP_SCALE), CLIP_LO)
}

/// Average cross-entropy of clipped outputs against the one-hot labels over
/// `rows` labeled nodes, with `z` holding those rows in order.
pub fn sec_cross_entropy(
    ctx: &mut Ctx,
    z: &[RingElem],
    t: &[RingElem],
    rows: usize,
    cfg: &ApproxConfig,
) -> Result<RingElem> {
    assert_eq!(z.len(), t.len(), "outputs and labels disagree");
    ctx.scoped("loss", |ctx| {
        let lnz = prims::ln(ctx, &clip(ctx, z), cfg)?;
        let terms = prims::mul(ctx, t, &lnz)?;
        let total: RingElem = terms.iter().sum();
        Ok(prims::mul_const(ctx, &[total], -1.0 / rows as f64)[0])
    })
}

/// Shared weight gradients.
#[derive(Clone, Debug)]
pub struct SharedGradients {
    pub dm1: SharedMatrix,
    pub dm2: SharedMatrix,
}

/// Backward pass over the labeled rows of `cache`.
pub fn sec_backward(
    ctx: &mut Ctx,
    g: &PreparedGraph,
    model: &ModelState,
    cache: &LayerCache,
    cfg: &TrainConfig,
) -> Result<SharedGradients> {
    ctx.scoped("backward", |ctx| {
        let (n, l) = (g.n(), g.share.summary.features);
        let (h, c) = (model.m1.cols, model.m2.cols);
        let t = cache.rows.len();
        let labels = &g.share.labels;
        let delta2 = if cfg.fused_grad {
            prims::sub(&cache.z, labels)
        } else {
            ctx.scoped("output_delta", |ctx| {
                let inv = prims::reciprocal(ctx, &clip(ctx, &cache.z), &cfg.approx)?;
                let tz = prims::mul(ctx, labels, &inv)?;
                let dz = prims::mul_const(ctx, &tz, -CLIP_SCALE);
                let weighted = prims::mul(ctx, &dz, &cache.z)?;
                let dot = prims::row_sums(&weighted, c);
                let centered: Vec<RingElem> = dz.iter().enumerate().map(|(i, &v)| v - dot[i / c]).collect();
                prims::mul(ctx, &cache.z, &centered)
            })?
        };
        let delta2 = SharedMatrix::new(t, c, delta2);
        let inv_t = 1.0 / t as f64;
        let agg1 = SharedMatrix::new(t, h, cache.agg1.clone());
        let dm2 = prims::matmul(ctx, &agg1.transpose(), &delta2)?;
        let dm2 = SharedMatrix::new(h, c, prims::mul_const(ctx, &dm2.data, inv_t));
        let back = prims::matmul(ctx, &delta2, &model.m2.transpose())?;
        let mut full = vec![RingElem::ZERO; n * h];
        for (row, &v) in cache.rows.iter().enumerate() {
            full[v * h..(v + 1) * h].copy_from_slice(back.row(row));
        }
        let all: Vec<usize> = (0..n).collect();
        let spread = sec_aggregate(ctx, g, &full, h, &all)?;
        let delta1 = prims::mul(ctx, &spread, &cache.mask)?;
        let agg0 = SharedMatrix::new(n, l, g.agg0.clone());
        let dm1 = prims::matmul(ctx, &agg0.transpose(), &SharedMatrix::new(n, h, delta1))?;
        let dm1 = SharedMatrix::new(l, h, prims::mul_const(ctx, &dm1.data, inv_t));
        Ok(SharedGradients { dm1, dm2 })
    })
}

pub fn apply_update(ctx: &Ctx, model: &mut ModelState, grads: &SharedGradients, rho: f64) {
    let step1 = prims::mul_const(ctx, &grads.dm1.data, rho);
    let step2 = prims::mul_const(ctx, &grads.dm2.data, rho);
    model.m1.data = prims::sub(&model.m1.data, &step1);
    model.m2.data = prims::sub(&model.m2.data, &step2);
}

/// Secure convergence check. Computes `|curr - prev|` as two ReLUs, takes
/// the raw sign bit of `alpha - |curr - prev|` (1 when the loss moved by more
/// than `alpha`), opens that single bit to the holders and forwards it to P3
/// so all three agree on control flow, then applies the window rule.
pub fn sec_converged(
    ctx: &mut Ctx,
    prev: RingElem,
    curr: RingElem,
    alpha: f64,
    counter: &mut StopCounter,
) -> Result<bool> {
    let flag = ctx.scoped("converged", |ctx| {
        let d = curr - prev;
        let r = prims::relu(ctx, &[d, -d])?;
        let gap = prims::add_const(ctx, &[-(r[0] + r[1])], alpha);
        let sign = prims::msb(ctx, &gap)?;
        let opened = prims::reveal_bits(ctx, &sign)?;
        match ctx.id() {
            PartyId::P1 => {
                ctx.send_bits(PartyId::P3, Phase::Online, &opened)?;
                Ok(opened.get(0))
            }
            PartyId::P2 => Ok(opened.get(0)),
            PartyId::P3 => Ok(ctx.recv_bits(PartyId::P1, Phase::Online, 1)?.get(0)),
        }
    })?;
    counter.update(flag);
    Ok(flag)
}

/// One party's view of a finished training run.
#[derive(Clone, Debug)]
pub struct PartyTraining {
    pub model: ModelState,
    pub flags: Vec<bool>,
    pub epochs: usize,
    pub halted: bool,
    /// This party's loss share per epoch, when `debug_loss` is set.
    pub loss_shares: Vec<RingElem>,
}

/// Full-batch secure training: forward, loss, convergence check against the
/// previous epoch, then backward and update unless the check halted.
pub fn sec_train(ctx: &mut Ctx, g: &PreparedGraph, model: ModelState, cfg: &TrainConfig) -> Result<PartyTraining> {
    let mut model = model;
    let rows = g.share.labeled.clone();
    let mut counter = StopCounter::default();
    let mut prev = None;
    let mut out = PartyTraining {
        model: model.clone(),
        flags: Vec::new(),
        epochs: 0,
        halted: false,
        loss_shares: Vec::new(),
    };
    for _ in 0..cfg.max_epochs {
        let stop = ctx.scoped("epoch", |ctx| {
            let cache = sec_forward(ctx, g, &model, &rows, &cfg.approx)?;
            let loss = sec_cross_entropy(ctx, &cache.z, &g.share.labels, rows.len(), &cfg.approx)?;
            if cfg.debug_loss {
                out.loss_shares.push(loss);
            }
            if let Some(p) = prev.replace(loss) {
                out.flags.push(sec_converged(ctx, p, loss, cfg.alpha, &mut counter)?);
                if counter.halted(cfg.beta) {
                    return Ok(true);
                }
            }
            let grads = sec_backward(ctx, g, &model, &cache, cfg)?;
            apply_update(ctx, &mut model, &grads, cfg.learning_rate);
            Ok(false)
        })?;
        out.epochs += 1;
        if stop {
            out.halted = true;
            break;
        }
    }
    out.model = model;
    Ok(out)
}

/// Class probabilities for the queried nodes (0-based), still shared. All
/// queries in one call share the first-layer work.
pub fn sec_infer(
    ctx: &mut Ctx,
    g: &PreparedGraph,
    model: &ModelState,
    nodes: &[usize],
    cfg: &ApproxConfig,
) -> Result<Vec<RingElem>> {
    if let Some(&bad) = nodes.iter().find(|&&v| v >= g.n()) {
        return Err(Error::UnknownNode(bad + 1));
    }
    ctx.scoped("infer", |ctx| Ok(sec_forward(ctx, g, model, nodes, cfg)?.z))
}

/// Per-epoch line of a training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub flag: Option<bool>,
    pub online_bytes: u64,
    pub offline_bytes: u64,
    pub rounds: u32,
    pub millis: f64,
}

/// Data owner's view of a finished secure training session.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PlainModel,
    pub model_shares: [ModelState; 2],
    pub epochs: usize,
    pub halted: bool,
    pub flags: Vec<bool>,
    /// Reconstructed per-epoch losses when `debug_loss` is set.
    pub losses: Vec<f64>,
    pub records: Vec<EpochRecord>,
    pub metrics: SessionMetrics,
    pub millis: f64,
    /// Reconstructed values no correct run can produce; see [`anomalies`].
    pub anomalies: Vec<String>,
}

/// Largest weight magnitude a sane run reaches; a wrapped truncation lands
/// near `2^(63 - t)` instead.
pub const WEIGHT_LIMIT: f64 = 65536.0;

/// Flags reconstructed weights beyond [`WEIGHT_LIMIT`] and debug losses
/// outside the range the output clipping allows. Servers cannot see these
/// values, so only the data owner can notice a truncation wrap.
pub fn anomalies(model: &PlainModel, losses: &[f64]) -> Vec<String> {
    let mut found = Vec::new();
    for (name, m) in [("M1", &model.m1), ("M2", &model.m2)] {
        if let Some((i, w)) = m.iter().enumerate().find(|(_, w)| w.abs() > WEIGHT_LIMIT) {
            found.push(format!("{name}[{i}] = {w:e}"));
        }
    }
    let max_loss = 1.0 - CLIP_LO.ln();
    for (e, l) in losses.iter().enumerate() {
        if !(-1.0..=max_loss).contains(l) {
            found.push(format!("loss at epoch {} = {l:e}", e + 1));
        }
    }
    found
}

fn party_inputs(shares: &[GraphShare; 2], model: &[ModelState; 2], id: PartyId) -> (GraphShare, ModelState) {
    match id {
        PartyId::P1 => (shares[0].clone(), model[0].clone()),
        PartyId::P2 => (shares[1].clone(), model[1].clone()),
        PartyId::P3 => (GraphShare::placeholder(&shares[0]), model[0].placeholder()),
    }
}

/// Hands pre-dealt triples to a holder and switches it to consuming them.
pub fn load_offline(ctx: &mut Ctx, offline: Option<&[OfflineMaterial; 2]>) {
    if let (Some(material), Some(role)) = (offline, ctx.id().role()) {
        let m = &material[matches!(role, ShareRole::Second) as usize];
        ctx.pool.push_arith(m.arith.clone());
        ctx.pool.push_binary(m.binary.clone());
    }
    if offline.is_some() {
        ctx.set_predealt(true);
    }
}

/// Runs secure training with all three parties and reconstructs the results.
pub fn train_session(
    session: &SessionConfig,
    shares: &[GraphShare; 2],
    model: &[ModelState; 2],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_session_with(session, shares, model, cfg, None)
}

/// [`train_session`] drawing arithmetic and binary triples from pre-dealt
/// material when given; matrix triples are still dealt on demand.
pub fn train_session_with(
    session: &SessionConfig,
    shares: &[GraphShare; 2],
    model: &[ModelState; 2],
    cfg: &TrainConfig,
    offline: Option<&[OfflineMaterial; 2]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if shares[0].labeled.is_empty() {
        return Err(Error::Config("no labeled nodes to train on".into()));
    }
    let start = Instant::now();
    let out = run_session(session, |ctx| {
        load_offline(ctx, offline);
        let (share, m) = party_inputs(shares, model, ctx.id());
        let g = prepare(ctx, share, &cfg.approx)?;
        sec_train(ctx, &g, m, cfg)
    })?;
    let [p1, p2, _] = out.outputs;
    let codec = session.codec;
    let losses: Vec<f64> = p1
        .loss_shares
        .iter()
        .zip(&p2.loss_shares)
        .map(|(&a, &b)| codec.decode(a + b))
        .collect();
    let records = out
        .metrics
        .scopes_named("epoch")
        .enumerate()
        .map(|(i, s)| EpochRecord {
            epoch: i + 1,
            flag: i.checked_sub(1).and_then(|k| p1.flags.get(k).copied()),
            online_bytes: s.online_bytes,
            offline_bytes: s.offline_bytes,
            rounds: s.rounds,
            millis: s.millis,
        })
        .collect();
    let model_shares = [p1.model, p2.model];
    let model = ModelState::reconstruct(&model_shares, &codec);
    let anomalies = anomalies(&model, &losses);
    Ok(TrainOutcome {
        model,
        model_shares,
        anomalies,
        epochs: p1.epochs,
        halted: p1.halted,
        flags: p1.flags,
        losses,
        records,
        metrics: out.metrics,
        millis: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Data owner's view of a secure inference session.
#[derive(Debug)]
pub struct InferOutcome {
    /// `|nodes| x C` reconstructed probabilities.
    pub z: Vec<f64>,
    pub metrics: SessionMetrics,
}

pub fn infer_session(
    session: &SessionConfig,
    shares: &[GraphShare; 2],
    model: &[ModelState; 2],
    nodes: &[usize],
    cfg: &ApproxConfig,
) -> Result<InferOutcome> {
    if let Some(&bad) = nodes.iter().find(|&&v| v >= shares[0].summary.nodes) {
        return Err(Error::UnknownNode(bad + 1));
    }
    let out = run_session(session, |ctx| {
        let (share, m) = party_inputs(shares, model, ctx.id());
        let g = prepare(ctx, share, cfg)?;
        sec_infer(ctx, &g, &m, nodes, cfg)
    })?;
    Ok(InferOutcome {
        z: session
            .codec
            .decode_all(&reconstruct_vec(&out.outputs[0], &out.outputs[1])),
        metrics: out.metrics,
    })
}

/// Reconstructed intermediates of one forward and backward pass, for
/// comparison against the plaintext reference.
#[derive(Clone, Debug)]
pub struct ForwardProbe {
    pub fbar: Vec<f64>,
    pub agg0: Vec<f64>,
    pub pre1: Vec<f64>,
    pub x1: Vec<f64>,
    /// Labeled rows only.
    pub agg1: Vec<f64>,
    pub z: Vec<f64>,
    pub loss: f64,
    pub dm1: Vec<f64>,
    pub dm2: Vec<f64>,
}

pub fn probe_session(
    session: &SessionConfig,
    shares: &[GraphShare; 2],
    model: &[ModelState; 2],
    cfg: &TrainConfig,
) -> Result<ForwardProbe> {
    let out = run_session(session, |ctx| {
        let (share, m) = party_inputs(shares, model, ctx.id());
        let g = prepare(ctx, share, &cfg.approx)?;
        let rows = g.share.labeled.clone();
        let cache = sec_forward(ctx, &g, &m, &rows, &cfg.approx)?;
        let loss = sec_cross_entropy(ctx, &cache.z, &g.share.labels, rows.len(), &cfg.approx)?;
        let grads = sec_backward(ctx, &g, &m, &cache, cfg)?;
        Ok(vec![
            g.fbar,
            g.agg0,
            cache.pre1,
            cache.x1,
            cache.agg1,
            cache.z,
            vec![loss],
            grads.dm1.data,
            grads.dm2.data,
        ])
    })?;
    let codec = session.codec;
    let open: Vec<Vec<f64>> = out.outputs[0]
        .iter()
        .zip(&out.outputs[1])
        .map(|(a, b)| codec.decode_all(&reconstruct_vec(a, b)))
        .collect();
    let mut it = open.into_iter();
    let mut next = || it.next().expect("probe part");
    Ok(ForwardProbe {
        fbar: next(),
        agg0: next(),
        pre1: next(),
        x1: next(),
        agg1: next(),
        z: next(),
        loss: next()[0],
        dm1: next(),
        dm2: next(),
    })
}
