//! Plaintext references for the secure engine.
//!
//! [`Num`] evaluates the same sequence of operations as the secure path in one
//! of three modes. Exact mode uses true transcendental functions. The
//! approximation-faithful mode replays every iteration of the secure
//! approximations in double precision. The fixed-point mode also rounds inputs
//! onto the codec grid and floors after every multiplication, as local share
//! truncation does (up to its one-ulp randomness).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphstore::{pad, synthetic, PaddedAdjacency, PlainGraph, SyntheticSpec};
use crate::prims::ApproxConfig;
use crate::ring::FixedCodec;
use crate::sgcn::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Exact,
    ApproxFaithful,
    ApproxFaithfulFixedPoint,
}

/// Scalar arithmetic under an [`OracleMode`].
#[derive(Clone, Copy, Debug)]
pub struct Num {
    pub mode: OracleMode,
    pub cfg: ApproxConfig,
    pub codec: FixedCodec,
}

impl Num {
    pub fn new(mode: OracleMode, cfg: ApproxConfig) -> Self {
        Num {
            mode,
            cfg,
            codec: FixedCodec::default(),
        }
    }

    fn fixed(&self) -> bool {
        self.mode == OracleMode::ApproxFaithfulFixedPoint
    }

    fn scale(&self) -> f64 {
        self.codec.scale()
    }

    /// Floors onto the grid, as truncation of a double-scaled product does.
    pub fn floor(&self, x: f64) -> f64 {
        if self.fixed() {
            (x * self.scale()).floor() / self.scale()
        } else {
            x
        }
    }

    /// Rounds onto the grid, as encoding does.
    pub fn enc(&self, x: f64) -> f64 {
        if self.fixed() {
            (x * self.scale()).round() / self.scale()
        } else {
            x
        }
    }

    pub fn mul(&self, a: f64, b: f64) -> f64 {
        self.floor(a * b)
    }

    pub fn cmul(&self, a: f64, c: f64) -> f64 {
        self.floor(a * self.enc(c))
    }

    pub fn cadd(&self, a: f64, c: f64) -> f64 {
        a + self.enc(c)
    }

    /// `x / 2^bits` by share truncation.
    pub fn shift(&self, x: f64, bits: u32) -> f64 {
        self.floor(x / f64::from(1u32 << bits))
    }

    pub fn exp(&self, x: f64) -> f64 {
        if self.mode == OracleMode::Exact {
            return x.exp();
        }
        let mut y = self.cadd(self.shift(x, self.cfg.exp_squarings), 1.0);
        for _ in 0..self.cfg.exp_squarings {
            y = self.mul(y, y);
        }
        y
    }

    pub fn recip(&self, x: f64) -> f64 {
        if self.mode == OracleMode::Exact {
            return 1.0 / x;
        }
        let e = self.exp(self.cadd(-x, 0.5));
        let mut y = self.cadd(self.cmul(e, 3.0), 0.003);
        for _ in 0..self.cfg.recip_iters {
            let xy = self.mul(x, y);
            y = self.mul(y, self.cadd(-xy, 2.0));
        }
        y
    }

    pub fn inv_sqrt(&self, x: f64) -> f64 {
        if self.mode == OracleMode::Exact {
            return 1.0 / x.sqrt();
        }
        let e = self.exp(self.cadd(-x, 0.5));
        let mut y = self.cadd(self.cmul(e, self.cfg.invsqrt_init_scale), 0.003);
        for _ in 0..self.cfg.invsqrt_iters {
            let xyy = self.mul(self.mul(x, y), y);
            y = self.mul(y, self.cadd(self.cmul(xyy, -0.5), 1.5));
        }
        y
    }

    pub fn ln(&self, x: f64) -> f64 {
        if self.mode == OracleMode::Exact {
            return x.ln();
        }
        let e = self.exp(self.cadd(-2.0 * x, -1.0));
        let mut y = self.cadd(self.cmul(x, 1.0 / 120.0) - 20.0 * e, 3.0);
        for _ in 0..self.cfg.ln_iters {
            let h = self.cadd(-self.mul(x, self.exp(-y)), 1.0);
            let mut pow = h;
            let mut series = h;
            for k in 2..=self.cfg.ln_terms {
                pow = self.mul(pow, h);
                series += self.cmul(pow, 1.0 / k as f64);
            }
            y -= series;
        }
        y
    }

    /// Row-wise softmax of a `rows x cols` matrix with max subtraction.
    pub fn softmax(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| self.exp(v - m)).collect();
            let inv = self.recip(e.iter().sum());
            out.extend(e.iter().map(|&v| self.mul(v, inv)));
        }
        out
    }

    /// `a (n x k) * b (k x m)` with one truncation per output entry.
    pub fn matmul(&self, a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = a[i * k + p];
                for j in 0..m {
                    out[i * m + j] += aip * b[p * m + j];
                }
            }
        }
        out.iter().map(|&v| self.floor(v)).collect()
    }
}

/// Which standalone approximation to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxFn {
    Recip,
    InvSqrt,
    Exp,
    Ln,
}

impl ApproxFn {
    /// Inputs the default iteration counts are meant for.
    pub fn domain(self) -> (f64, f64) {
        match self {
            ApproxFn::Recip => (0.5, 300.0),
            ApproxFn::InvSqrt => (1.0, 400.0),
            ApproxFn::Exp => (-20.0, 5.0),
            ApproxFn::Ln => (0.001, 2.0),
        }
    }
}

/// The approximation iterated in double precision, rejecting inputs outside
/// its documented domain.
pub fn approx_oracle(f: ApproxFn, x: f64, cfg: &ApproxConfig) -> Result<f64> {
    let (lo, hi) = f.domain();
    let inside = match f {
        ApproxFn::Ln => x > lo && x <= hi,
        _ => x >= lo && x <= hi,
    };
    if !inside {
        return Err(Error::Domain(format!("{f:?} input {x} outside [{lo}, {hi}]")));
    }
    let num = Num::new(OracleMode::ApproxFaithful, *cfg);
    Ok(match f {
        ApproxFn::Recip => num.recip(x),
        ApproxFn::InvSqrt => num.inv_sqrt(x),
        ApproxFn::Exp => num.exp(x),
        ApproxFn::Ln => num.ln(x),
    })
}

/// Plaintext two-layer weights: `M1` is `L x H`, `M2` is `H x C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainModel {
    pub l: usize,
    pub h: usize,
    pub c: usize,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

impl PlainModel {
    /// Uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
    pub fn init(l: usize, h: usize, c: usize, seed: u64) -> PlainModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, len: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-b..b)).collect()
        };
        let m1 = layer(l, l * h);
        let m2 = layer(h, h * c);
        PlainModel { l, h, c, m1, m2 }
    }

    /// Snaps the weights onto the fixed-point grid.
    pub fn quantized(&self, codec: &FixedCodec) -> PlainModel {
        let q = |v: &Vec<f64>| v.iter().map(|&x| codec.decode(codec.constant(x))).collect();
        PlainModel {
            m1: q(&self.m1),
            m2: q(&self.m2),
            ..self.clone()
        }
    }
}

/// Normalization and aggregation coefficients, fixed per graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphPrep {
    pub n: usize,
    pub l: usize,
    pub c: usize,
    pub pad: PaddedAdjacency,
    /// Row-normalized features.
    pub fbar: Vec<f64>,
    /// `1 / sw_v`.
    pub inv_sw: Vec<f64>,
    /// `W_vj / (sqrt(sw_v) sqrt(sw_Ne_vj))`, `N x d_max`.
    pub coef: Vec<f64>,
    pub labeled: Vec<usize>,
    /// `|T| x C` one-hot rows.
    pub t: Vec<f64>,
}

impl GraphPrep {
    pub fn new(g: &PlainGraph, num: &Num) -> GraphPrep {
        let (n, l) = (g.n(), g.n_features);
        let pad = pad(g);
        let d = pad.d_max;
        let feats: Vec<f64> = g.features.iter().map(|&f| num.enc(f)).collect();
        let mut fbar = Vec::with_capacity(n * l);
        for row in feats.chunks(l) {
            let inv = num.recip(row.iter().sum());
            fbar.extend(row.iter().map(|&f| num.mul(f, inv)));
        }
        let sw: Vec<f64> = g.sw().iter().map(|&s| num.enc(s)).collect();
        let isq: Vec<f64> = sw.iter().map(|&s| num.inv_sqrt(s)).collect();
        let inv_sw = if num.mode == OracleMode::Exact {
            sw.iter().map(|s| 1.0 / s).collect()
        } else {
            isq.iter().map(|&y| num.mul(y, y)).collect()
        };
        let mut coef = Vec::with_capacity(n * d);
        for v in 0..n {
            for (id, w) in pad.neighbors(v) {
                let wv = num.mul(num.enc(w), isq[v]);
                coef.push(num.mul(wv, isq[id as usize - 1]));
            }
        }
        GraphPrep {
            n,
            l,
            c: g.n_classes(),
            pad,
            fbar,
            inv_sw,
            coef,
            labeled: g.labeled.clone(),
            t: g.label_matrix(),
        }
    }

    /// Symmetric-normalized neighbor aggregation of an `N x width` state.
    pub fn aggregate(&self, num: &Num, x: &[f64], width: usize) -> Vec<f64> {
        self.aggregate_rows(num, x, width, &(0..self.n).collect::<Vec<_>>())
    }

    /// Aggregation evaluated only for the listed rows.
    pub fn aggregate_rows(&self, num: &Num, x: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
        let d = self.pad.d_max;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &v in rows {
            let mut acc: Vec<f64> = x[v * width..(v + 1) * width]
                .iter()
                .map(|&a| num.mul(self.inv_sw[v], a))
                .collect();
            for (j, (id, _)) in self.pad.neighbors(v).enumerate() {
                let u = id as usize - 1;
                let cf = self.coef[v * d + j];
                for (a, &xu) in acc.iter_mut().zip(&x[u * width..(u + 1) * width]) {
                    *a += num.mul(cf, xu);
                }
            }
            out.extend(acc);
        }
        out
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Aggregated normalized features, `N x L`.
    pub agg0: Vec<f64>,
    /// `agg0 * M1`, `N x H`.
    pub pre1: Vec<f64>,
    /// ReLU of `pre1`.
    pub x1: Vec<f64>,
    /// 1 where `pre1 >= 0`.
    pub mask: Vec<f64>,
    /// Aggregated hidden state, `N x H`.
    pub agg1: Vec<f64>,
    /// `agg1 * M2`, `N x C`.
    pub pre2: Vec<f64>,
    /// Softmax outputs, `N x C`.
    pub z: Vec<f64>,
}

pub fn forward(prep: &GraphPrep, model: &PlainModel, num: &Num) -> ForwardTrace {
    let (n, l, h, c) = (prep.n, prep.l, model.h, model.c);
    let agg0 = prep.aggregate(num, &prep.fbar, l);
    let pre1 = num.matmul(&agg0, &model.m1, n, l, h);
    let x1: Vec<f64> = pre1.iter().map(|&v| v.max(0.0)).collect();
    let mask = pre1.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
    let agg1 = prep.aggregate(num, &x1, h);
    let pre2 = num.matmul(&agg1, &model.m2, n, h, c);
    let z = num.softmax(&pre2, c);
    ForwardTrace {
        agg0,
        pre1,
        x1,
        mask,
        agg1,
        pre2,
        z,
    }
}

/// Clipping of probabilities into `[0.0005, 0.999]` before `ln` and division.
pub const CLIP_LO: f64 = 0.0005;
pub const CLIP_SCALE: f64 = 0.9985;

fn labeled_rows(x: &[f64], cols: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .flat_map(|&v| x[v * cols..(v + 1) * cols].iter().copied())
        .collect()
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Average cross-entropy over the labeled nodes with clipped probabilities.
pub fn loss(prep: &GraphPrep, z: &[f64], num: &Num) -> f64 {
    let zt = labeled_rows(z, prep.c, &prep.labeled);
    let total: f64 = zt
        .iter()
        .zip(&prep.t)
        .map(|(&p, &t)| {
            let clipped = num.cadd(num.cmul(p, CLIP_SCALE), CLIP_LO);
            num.mul(t, num.ln(clipped))
        })
        .sum();
    num.cmul(total, -1.0 / prep.labeled.len() as f64)
}

/// Weight gradients of [`loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub dm1: Vec<f64>,
    pub dm2: Vec<f64>,
}

/// Output-layer error on the labeled rows, `|T| x C`: the chain through
/// `-T / Z` and the softmax Jacobian, or the fused `Z - T`.
pub fn output_delta(prep: &GraphPrep, z: &[f64], num: &Num, fused: bool) -> Vec<f64> {
    let c = prep.c;
    let zt = labeled_rows(z, c, &prep.labeled);
    if fused {
        return zt.iter().zip(&prep.t).map(|(a, b)| a - b).collect();
    }
    let dz: Vec<f64> = zt
        .iter()
        .zip(&prep.t)
        .map(|(&p, &t)| {
            let clipped = num.cadd(num.cmul(p, CLIP_SCALE), CLIP_LO);
            num.cmul(num.mul(t, num.recip(clipped)), -CLIP_SCALE)
        })
        .collect();
    let dot: Vec<f64> = dz
        .chunks(c)
        .zip(zt.chunks(c))
        .map(|(d, p)| d.iter().zip(p).map(|(&a, &b)| num.mul(a, b)).sum())
        .collect();
    (0..zt.len()).map(|i| num.mul(zt[i], dz[i] - dot[i / c])).collect()
}

pub fn backward(prep: &GraphPrep, model: &PlainModel, tr: &ForwardTrace, num: &Num, fused: bool) -> Gradients {
    let (n, l, h, c) = (prep.n, prep.l, model.h, model.c);
    let t = prep.labeled.len();
    let inv_t = 1.0 / t as f64;
    let delta2 = output_delta(prep, &tr.z, num, fused);
    let agg1_t = labeled_rows(&tr.agg1, h, &prep.labeled);
    let dm2 = num
        .matmul(&transpose(&agg1_t, t, h), &delta2, h, t, c)
        .iter()
        .map(|&v| num.cmul(v, inv_t))
        .collect();
    let back = num.matmul(&delta2, &transpose(&model.m2, h, c), t, c, h);
    let mut full = vec![0.0; n * h];
    for (row, &v) in prep.labeled.iter().enumerate() {
        full[v * h..(v + 1) * h].copy_from_slice(&back[row * h..(row + 1) * h]);
    }
    let spread = prep.aggregate(num, &full, h);
    let delta1: Vec<f64> = spread.iter().zip(&tr.mask).map(|(&a, &m)| num.mul(a, m)).collect();
    let dm1 = num
        .matmul(&transpose(&tr.agg0, n, l), &delta1, l, n, h)
        .iter()
        .map(|&v| num.cmul(v, inv_t))
        .collect();
    Gradients { dm1, dm2 }
}

/// Gradient-descent step `M <- M - rho dM`.
pub fn apply_update(model: &mut PlainModel, grads: &Gradients, rho: f64, num: &Num) {
    for (m, g) in model.m1.iter_mut().zip(&grads.dm1) {
        *m -= num.cmul(*g, rho);
    }
    for (m, g) in model.m2.iter_mut().zip(&grads.dm2) {
        *m -= num.cmul(*g, rho);
    }
}

/// Window counter of the convergence check. `flag` is true when the loss
/// moved by more than the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCounter {
    pub stop: usize,
}

impl StopCounter {
    pub fn update(&mut self, flag: bool) {
        self.stop = if flag { 0 } else { self.stop + 1 };
    }

    pub fn halted(&self, beta: usize) -> bool {
        self.stop >= beta
    }
}

/// `|l_curr - l_prev| > alpha` as the raw sign of `alpha - |delta|`.
pub fn loss_flag(prev: f64, curr: f64, alpha: f64) -> bool {
    alpha - (curr - prev).abs() < 0.0
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub model: PlainModel,
    /// Loss of each epoch's forward pass, before that epoch's update.
    pub losses: Vec<f64>,
    /// Convergence flag per epoch from the second on.
    pub flags: Vec<bool>,
    /// Epochs executed.
    pub epochs: usize,
    /// Whether the window rule stopped training before the epoch cap.
    pub halted: bool,
}

/// Full-batch training. Each epoch runs the forward pass, the loss, the
/// convergence check against the previous epoch's loss, and then the update;
/// a halting check skips that epoch's update.
pub fn plain_train(g: &PlainGraph, model: &PlainModel, cfg: &TrainConfig, mode: OracleMode) -> TrainTrace {
    let num = Num::new(mode, cfg.approx);
    let prep = GraphPrep::new(g, &num);
    let mut model = if mode == OracleMode::ApproxFaithfulFixedPoint {
        model.quantized(&num.codec)
    } else {
        model.clone()
    };
    let mut losses = Vec::new();
    let mut flags = Vec::new();
    let mut counter = StopCounter::default();
    let mut halted = false;
    for epoch in 1..=cfg.max_epochs {
        let tr = forward(&prep, &model, &num);
        let l = loss(&prep, &tr.z, &num);
        if let Some(&prev) = losses.last() {
            let flag = loss_flag(prev, l, cfg.alpha);
            flags.push(flag);
            counter.update(flag);
        }
        losses.push(l);
        if counter.halted(cfg.beta) {
            halted = true;
            return TrainTrace {
                model,
                losses,
                flags,
                epochs: epoch,
                halted,
            };
        }
        let grads = backward(&prep, &model, &tr, &num, cfg.fused_grad);
        apply_update(&mut model, &grads, cfg.learning_rate, &num);
    }
    TrainTrace {
        model,
        losses,
        flags,
        epochs: cfg.max_epochs,
        halted,
    }
}

/// Central differences of the loss with respect to every weight.
pub fn finite_difference(g: &PlainGraph, model: &PlainModel, num: &Num, eps: f64) -> Gradients {
    let prep = GraphPrep::new(g, num);
    let f = |m: &PlainModel| loss(&prep, &forward(&prep, m, num).z, num);
    let probe = |which: usize, len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let mut hi = model.clone();
                let mut lo = model.clone();
                let (h, l) = if which == 1 {
                    (&mut hi.m1, &mut lo.m1)
                } else {
                    (&mut hi.m2, &mut lo.m2)
                };
                h[i] += eps;
                l[i] -= eps;
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect()
    };
    Gradients {
        dm1: probe(1, model.m1.len()),
        dm2: probe(2, model.m2.len()),
    }
}

/// Dense `D^-1/2 (A + I) D^-1/2` for cross-checking the sparse aggregation.
pub fn dense_adjacency(g: &PlainGraph) -> Vec<f64> {
    let n = g.n();
    let sw = g.sw();
    let mut a = vec![0.0; n * n];
    for v in 0..n {
        a[v * n + v] = 1.0 / sw[v];
        for &(u, w) in &g.adj[v] {
            a[v * n + u] = w / (sw[v].sqrt() * sw[u].sqrt());
        }
    }
    a
}

/// Reference values derived by iterating the approximations, keyed by name.
pub fn derived_constants(cfg: &ApproxConfig) -> BTreeMap<String, f64> {
    let num = Num::new(OracleMode::ApproxFaithful, *cfg);
    let mut out = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        out.insert(k.to_string(), v);
    };
    put("exp(0)", num.exp(0.0));
    put("exp(1)", num.exp(1.0));
    put("exp(-2)", num.exp(-2.0));
    put("recip(1)", num.recip(1.0));
    put("recip(2)", num.recip(2.0));
    put("recip(100)", num.recip(100.0));
    put("inv_sqrt(1)", num.inv_sqrt(1.0));
    put("inv_sqrt(4)", num.inv_sqrt(4.0));
    put("inv_sqrt(169)", num.inv_sqrt(169.0));
    put("inv_sqrt(400)", num.inv_sqrt(400.0));
    put("ln(1)", num.ln(1.0));
    put("ln(0.5)", num.ln(0.5));
    put("ln(e^-1)", num.ln((-1.0f64).exp()));
    put("ln(0.05)", num.ln(0.05));
    put("ln(2)", num.ln(2.0));
    let scale3_init = Num::new(
        OracleMode::ApproxFaithful,
        ApproxConfig {
            invsqrt_init_scale: 3.0,
            ..*cfg
        },
    );
    put("inv_sqrt(1) with init scale 3", scale3_init.inv_sqrt(1.0));
    put("inv_sqrt(4) with init scale 3", scale3_init.inv_sqrt(4.0));
    put(
        "path graph middle aggregate",
        2.0 / 3.0 + 1.0 / (3f64.sqrt() * 2f64.sqrt()) * (1.0 + 3.0),
    );
    out
}

/// Small training problem whose halting epoch is recorded in the fixtures.
#[derive(Clone, Debug)]
pub struct ToyFixture {
    pub spec: SyntheticSpec,
    pub graph: PlainGraph,
    pub model: PlainModel,
    pub cfg: TrainConfig,
}

/// Seed of the toy model's initial weights; the CLI derives the initial
/// weights from `--seed` the same way.
pub const TOY_SEED: u64 = 1;

pub fn toy_fixture() -> ToyFixture {
    let spec = SyntheticSpec::default();
    let graph = synthetic(&spec);
    let cfg = toy_train_config();
    let model = PlainModel::init(spec.features, cfg.hidden, spec.classes, TOY_SEED);
    ToyFixture {
        spec,
        graph,
        model,
        cfg,
    }
}

/// Training config of the toy fixture: defaults with a narrower hidden layer
/// and a short epoch cap.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        hidden: 8,
        max_epochs: 60,
        ..Default::default()
    }
}

/// Checked-in table of oracle-derived values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixtures {
    pub approx: ApproxConfig,
    pub constants: BTreeMap<String, f64>,
    pub toy_spec: SyntheticSpec,
    pub toy_config: TrainConfig,
    pub toy_halt_epoch: usize,
    pub toy_halted: bool,
    pub toy_losses: Vec<f64>,
}

pub fn fixtures() -> Fixtures {
    let toy = toy_fixture();
    let run = plain_train(&toy.graph, &toy.model, &toy.cfg, OracleMode::ApproxFaithful);
    Fixtures {
        approx: toy.cfg.approx,
        constants: derived_constants(&toy.cfg.approx),
        toy_spec: toy.spec,
        toy_config: toy.cfg,
        toy_halt_epoch: run.epochs,
        toy_halted: run.halted,
        toy_losses: run.losses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_floor_matches_arithmetic_shift() {
        let num = Num::new(OracleMode::ApproxFaithfulFixedPoint, ApproxConfig::default());
        let codec = FixedCodec::default();
        for (a, b) in [(1.5, -0.3), (-2.25, 0.7), (3.1, 3.1)] {
            let (ea, eb) = (codec.encode(a).unwrap(), codec.encode(b).unwrap());
            let want = codec.decode(codec.trunc_plain(ea * eb));
            assert_eq!(num.mul(codec.decode(ea), codec.decode(eb)), want);
        }
    }

    #[test]
    fn domain_violations_are_reported() {
        let cfg = ApproxConfig::default();
        assert!(matches!(approx_oracle(ApproxFn::Ln, 0.0, &cfg), Err(Error::Domain(_))));
        assert!(approx_oracle(ApproxFn::Recip, 1000.0, &cfg).is_err());
        assert!(approx_oracle(ApproxFn::Exp, 1.0, &cfg).is_ok());
    }

    #[test]
    fn stop_counter_rule() {
        let mut c = StopCounter::default();
        c.update(true);
        assert_eq!(c.stop, 0);
        for _ in 0..4 {
            c.update(false);
        }
        assert!(!c.halted(5));
        c.update(false);
        assert!(c.halted(5));
    }
}
