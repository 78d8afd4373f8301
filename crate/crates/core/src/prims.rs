//! Secure primitives over 2-of-2 shares held by P1 and P2.
//!
//! Every function is called by all three parties with vectors of the same
//! length. P3 passes placeholder zeros, deals whatever triples the call
//! needs just in time, and returns zeros unless it has a role in the protocol
//! (array access). Inputs and outputs are this party's shares.

use itertools::Itertools;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Ctx, PartyId, Phase};
use crate::ring::{trunc_share, RingElem};
use crate::shares::{matmul_ring, ArithTriples, BinTriples, MatTriple, PackedBits, PairKey};

/// Iteration counts and initial-guess constants of the approximations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub recip_iters: usize,
    pub exp_squarings: u32,
    pub invsqrt_iters: usize,
    pub ln_iters: usize,
    pub ln_terms: usize,
    /// Scale `s` of the inverse square root's first guess `s e^(0.5 - x) + 0.003`.
    /// With `s = 3` the iteration diverges for inputs near 1 (`x y0^2 > 3`), so
    /// the default halves it; `s = 1.5` keeps `x y0^2 <= 1.13` on `[1, inf)`.
    pub invsqrt_init_scale: f64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        ApproxConfig {
            recip_iters: 13,
            exp_squarings: 8,
            invsqrt_iters: 18,
            ln_iters: 3,
            ln_terms: 8,
            invsqrt_init_scale: 1.5,
        }
    }
}

impl ApproxConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("recip_iters", self.recip_iters),
            ("exp_squarings", self.exp_squarings as usize),
            ("invsqrt_iters", self.invsqrt_iters),
            ("ln_iters", self.ln_iters),
            ("ln_terms", self.ln_terms),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.exp_squarings > 14 {
            return Err(Error::Config("exp_squarings above the fractional precision".into()));
        }
        Ok(())
    }
}

/// A row-major matrix of this party's shares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<RingElem>,
}

impl SharedMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<RingElem>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        SharedMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        SharedMatrix::new(rows, cols, vec![RingElem::ZERO; rows * cols])
    }

    pub fn row(&self, i: usize) -> &[RingElem] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, rows: &[usize]) -> SharedMatrix {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        SharedMatrix::new(rows.len(), self.cols, data)
    }

    pub fn transpose(&self) -> SharedMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.data[r * self.cols + c]);
            }
        }
        SharedMatrix::new(self.cols, self.rows, data)
    }
}

pub fn add(x: &[RingElem], y: &[RingElem]) -> Vec<RingElem> {
    assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(&a, &b)| a + b).collect()
}

pub fn sub(x: &[RingElem], y: &[RingElem]) -> Vec<RingElem> {
    assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(&a, &b)| a - b).collect()
}

pub fn neg(x: &[RingElem]) -> Vec<RingElem> {
    x.iter().map(|&a| -a).collect()
}

/// Adds a public fixed-point constant (P1 carries it).
pub fn add_const(ctx: &Ctx, x: &[RingElem], c: f64) -> Vec<RingElem> {
    let e = ctx.codec.constant(c);
    match ctx.id() {
        PartyId::P1 => x.iter().map(|&a| a + e).collect(),
        _ => x.to_vec(),
    }
}

/// A public fixed-point constant as a sharing.
pub fn public(ctx: &Ctx, c: f64, n: usize) -> Vec<RingElem> {
    add_const(ctx, &vec![RingElem::ZERO; n], c)
}

/// Truncates each share by `bits`.
pub fn trunc(ctx: &Ctx, x: &[RingElem], bits: u32) -> Vec<RingElem> {
    match ctx.id().role() {
        Some(role) => x.iter().map(|&a| trunc_share(a, bits, role)).collect(),
        None => vec![RingElem::ZERO; x.len()],
    }
}

/// Multiplies by a public constant, then truncates: no communication.
pub fn mul_const(ctx: &Ctx, x: &[RingElem], c: f64) -> Vec<RingElem> {
    let e = ctx.codec.constant(c);
    let scaled: Vec<RingElem> = x.iter().map(|&a| a * e).collect();
    trunc(ctx, &scaled, ctx.codec.frac_bits)
}

/// Multiplies by a public integer; exact, no truncation.
pub fn mul_int(x: &[RingElem], k: i64) -> Vec<RingElem> {
    let k = RingElem::from_signed(k);
    x.iter().map(|&a| a * k).collect()
}

/// Opens values to both holders. The only way secrets become public; every
/// call is counted by the transcript audit.
pub fn reveal(ctx: &mut Ctx, x: &[RingElem]) -> Result<Vec<RingElem>> {
    ctx.scoped("reveal", |ctx| {
        if !ctx.is_holder() {
            return Ok(vec![RingElem::ZERO; x.len()]);
        }
        let other = ctx.exchange_words(x)?;
        ctx.note_opened(x.len() as u64);
        Ok(add(x, &other))
    })
}

/// Opens bits to both holders; counted like [`reveal`].
pub fn reveal_bits(ctx: &mut Ctx, b: &PackedBits) -> Result<PackedBits> {
    ctx.scoped("reveal", |ctx| {
        if !ctx.is_holder() {
            return Ok(PackedBits::zeros(b.len()));
        }
        let other = ctx.exchange_bits(b)?;
        ctx.note_opened(b.len() as u64);
        Ok(b.xor(&other))
    })
}

fn words(xs: &[&[RingElem]]) -> Vec<RingElem> {
    xs.iter().flat_map(|x| x.iter().copied()).collect()
}

/// Pulls `n` arithmetic triples from the pool, having P3 deal them first
/// unless the session runs on pre-dealt material.
pub fn arith_triples(ctx: &mut Ctx, n: usize) -> Result<ArithTriples> {
    if ctx.predealt() {
        return if ctx.is_holder() {
            ctx.pool.take_arith(n)
        } else {
            Ok(ArithTriples::default())
        };
    }
    match ctx.id() {
        PartyId::P3 => {
            let [t1, t2] = ctx.dealer().arith(n);
            ctx.send_words(PartyId::P1, Phase::Offline, &words(&[&t1.u, &t1.v, &t1.w]))?;
            ctx.send_words(PartyId::P2, Phase::Offline, &words(&[&t2.u, &t2.v, &t2.w]))?;
            Ok(ArithTriples::default())
        }
        _ => {
            let w = ctx.recv_words(PartyId::P3, Phase::Offline, 3 * n)?;
            ctx.pool.push_arith(ArithTriples {
                u: w[..n].to_vec(),
                v: w[n..2 * n].to_vec(),
                w: w[2 * n..].to_vec(),
            });
            ctx.pool.take_arith(n)
        }
    }
}

pub fn bin_triples(ctx: &mut Ctx, n: usize) -> Result<BinTriples> {
    if ctx.predealt() {
        return if ctx.is_holder() {
            ctx.pool.take_binary(n)
        } else {
            Ok(BinTriples::default())
        };
    }
    match ctx.id() {
        PartyId::P3 => {
            let [t1, t2] = ctx.dealer().binary(n);
            for (to, t) in [(PartyId::P1, t1), (PartyId::P2, t2)] {
                ctx.send_bits(to, Phase::Offline, &PackedBits::concat([&t.u, &t.v, &t.w]))?;
            }
            Ok(BinTriples::default())
        }
        _ => {
            let b = ctx.recv_bits(PartyId::P3, Phase::Offline, 3 * n)?;
            ctx.pool.push_binary(BinTriples {
                u: b.slice(0, n),
                v: b.slice(n, n),
                w: b.slice(2 * n, n),
            });
            ctx.pool.take_binary(n)
        }
    }
}

fn mat_triple(ctx: &mut Ctx, n: usize, k: usize, m: usize) -> Result<MatTriple> {
    match ctx.id() {
        PartyId::P3 => {
            let [t1, t2] = ctx.dealer().matrix(n, k, m);
            ctx.send_words(PartyId::P1, Phase::Offline, &words(&[&t1.u, &t1.v, &t1.w]))?;
            ctx.send_words(PartyId::P2, Phase::Offline, &words(&[&t2.u, &t2.v, &t2.w]))?;
            Ok(t1)
        }
        _ => {
            let w = ctx.recv_words(PartyId::P3, Phase::Offline, n * k + k * m + n * m)?;
            let (u, rest) = w.split_at(n * k);
            let (v, w) = rest.split_at(k * m);
            Ok(MatTriple {
                n,
                k,
                m,
                u: u.to_vec(),
                v: v.to_vec(),
                w: w.to_vec(),
            })
        }
    }
}

/// Beaver multiplication without truncation: one round, 4 words per product.
pub fn mul_ring(ctx: &mut Ctx, x: &[RingElem], y: &[RingElem]) -> Result<Vec<RingElem>> {
    assert_eq!(x.len(), y.len(), "operand lengths differ");
    let n = x.len();
    let t = arith_triples(ctx, n)?;
    if !ctx.is_holder() {
        return Ok(vec![RingElem::ZERO; n]);
    }
    let mut masked = Vec::with_capacity(2 * n);
    masked.extend(x.iter().zip(&t.u).map(|(&a, &u)| a - u));
    masked.extend(y.iter().zip(&t.v).map(|(&b, &v)| b - v));
    let other = ctx.exchange_words(&masked)?;
    let first = ctx.id() == PartyId::P1;
    Ok((0..n)
        .map(|i| {
            let e = masked[i] + other[i];
            let f = masked[n + i] + other[n + i];
            let z = t.w[i] + e * t.v[i] + f * t.u[i];
            if first {
                z + e * f
            } else {
                z
            }
        })
        .collect())
}

/// Fixed-point product: Beaver multiplication then local truncation.
pub fn mul(ctx: &mut Ctx, x: &[RingElem], y: &[RingElem]) -> Result<Vec<RingElem>> {
    ctx.scoped("mul", |ctx| {
        let z = mul_ring(ctx, x, y)?;
        Ok(trunc(ctx, &z, ctx.codec.frac_bits))
    })
}

/// Fixed-point matrix product `a (n x k) * b (k x m)` with a matrix triple:
/// one round, `2(nk + km)` words.
pub fn matmul(ctx: &mut Ctx, a: &SharedMatrix, b: &SharedMatrix) -> Result<SharedMatrix> {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    ctx.scoped("matmul", |ctx| {
        let t = mat_triple(ctx, n, k, m)?;
        if !ctx.is_holder() {
            return Ok(SharedMatrix::zeros(n, m));
        }
        let mut masked = sub(&a.data, &t.u);
        masked.extend(sub(&b.data, &t.v));
        let other = ctx.exchange_words(&masked)?;
        let opened = add(&masked, &other);
        let (e, f) = opened.split_at(n * k);
        let mut z = add(&t.w, &matmul_ring(e, &t.v, n, k, m));
        z = add(&z, &matmul_ring(&t.u, f, n, k, m));
        if ctx.id() == PartyId::P1 {
            z = add(&z, &matmul_ring(e, f, n, k, m));
        }
        Ok(SharedMatrix::new(n, m, trunc(ctx, &z, ctx.codec.frac_bits)))
    })
}

/// AND of XOR-shared bits with binary Beaver triples: one round, 4 bits per gate.
pub fn and(ctx: &mut Ctx, x: &PackedBits, y: &PackedBits) -> Result<PackedBits> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let t = bin_triples(ctx, n)?;
    if !ctx.is_holder() {
        return Ok(PackedBits::zeros(n));
    }
    let e = x.xor(&t.u);
    let f = y.xor(&t.v);
    let other = ctx.exchange_bits(&PackedBits::concat([&e, &f]))?;
    let e = e.xor(&other.slice(0, n));
    let f = f.xor(&other.slice(n, n));
    let mut z = t.w.xor(&e.and(&t.v)).xor(&f.and(&t.u));
    if ctx.id() == PartyId::P1 {
        z = z.xor(&e.and(&f));
    }
    Ok(z)
}

/// Evaluates several AND gates of equal width in one round.
fn and_batch(ctx: &mut Ctx, gates: &[(PackedBits, PackedBits)]) -> Result<Vec<PackedBits>> {
    let n = gates.first().map_or(0, |g| g.0.len());
    let xs = PackedBits::concat(gates.iter().map(|g| &g.0));
    let ys = PackedBits::concat(gates.iter().map(|g| &g.1));
    let z = and(ctx, &xs, &ys)?;
    Ok((0..gates.len()).map(|i| z.slice(i * n, n)).collect())
}

/// Leaves of the prefix tree: `(generate, propagate)` where the lowest leaf
/// needs no propagate.
type Node = (PackedBits, Option<PackedBits>);

/// AND gates per layer of the sign-bit circuit for a 64-bit ring.
pub fn msb_gate_layers() -> Vec<usize> {
    let pairs = (RING_CARRY_BITS / 2) as usize;
    let mut layers = vec![3 + 4 * (pairs - 1) + RING_CARRY_BITS as usize % 2];
    let mut spine = vec![true];
    spine.extend(std::iter::repeat_n(false, pairs - 1 + RING_CARRY_BITS as usize % 2));
    while spine.len() > 1 {
        let mut gates = 0;
        let mut next = Vec::new();
        for c in spine.chunks(2) {
            if let [lo, _] = c {
                gates += if *lo { 1 } else { 2 };
            }
            next.push(c[0]);
        }
        layers.push(gates);
        spine = next;
    }
    layers
}

/// Bits whose carry chain feeds the sign bit.
const RING_CARRY_BITS: u32 = 63;

/// Binary sharing of the sign bit of each shared value (1 iff negative).
///
/// Each holder decomposes its own share into bits, so the sum of the two
/// shares is an ordinary addition of a P1-held and a P2-held 64-bit number.
/// The sign bit is `a63 ^ b63 ^ carry63`, and the carry into bit 63 is the
/// group generate over bits 0..=62. The first layer merges adjacent bit
/// pairs directly, since each party knows its own operand bits in the clear:
/// `G = a1 b1 ^ (a1 a0) b0 ^ a0 (b1 b0)` costs three cross ANDs, and the pair
/// propagate one more. A balanced tree over the 32 leaves then finishes in
/// five layers, with the lowest branch carrying generate only. Six rounds,
/// 181 AND gates.
pub fn msb(ctx: &mut Ctx, x: &[RingElem]) -> Result<PackedBits> {
    ctx.scoped("msb", |ctx| {
        let n = x.len();
        let me = ctx.id();
        let own = |i: u32| -> PackedBits {
            let bits: Vec<bool> = x.iter().map(|v| v.bit(i)).collect();
            PackedBits::from_bools(&bits)
        };
        let bits: Vec<PackedBits> = (0..64).map(own).collect();
        let zero = PackedBits::zeros(n);
        // a_i lives at P1, b_i at P2; the other holder's share is zero.
        let a = |i: usize| {
            if me == PartyId::P1 {
                bits[i].clone()
            } else {
                zero.clone()
            }
        };
        let b = |i: usize| {
            if me == PartyId::P2 {
                bits[i].clone()
            } else {
                zero.clone()
            }
        };
        let p = |i: usize| if ctx_holds(me) { bits[i].clone() } else { zero.clone() };

        let pairs = (RING_CARRY_BITS / 2) as usize;
        let mut gates = Vec::new();
        for j in 0..pairs {
            let (lo, hi) = (2 * j, 2 * j + 1);
            gates.push((a(hi), b(hi)));
            gates.push((a(hi).and(&a(lo)), b(lo)));
            gates.push((a(lo), b(hi).and(&b(lo))));
            if j > 0 {
                gates.push((p(hi), p(lo)));
            }
        }
        let top = RING_CARRY_BITS as usize - 1;
        gates.push((a(top), b(top)));
        let out = and_batch(ctx, &gates)?;

        let mut leaves: Vec<Node> = Vec::with_capacity(pairs + 1);
        let mut it = out.into_iter();
        for j in 0..pairs {
            let (t1, t2, t3) = it.next_tuple().expect("three generate terms per pair");
            let g = t1.xor(&t2).xor(&t3);
            let prop = (j > 0).then(|| it.next().expect("gate"));
            leaves.push((g, prop));
        }
        leaves.push((it.next().expect("gate"), Some(p(top))));

        while leaves.len() > 1 {
            let mut gates = Vec::new();
            for c in leaves.chunks(2) {
                if let [(g_lo, p_lo), (_, p_hi)] = c {
                    let p_hi = p_hi.as_ref().expect("upper node has propagate");
                    gates.push((p_hi.clone(), g_lo.clone()));
                    if let Some(p_lo) = p_lo {
                        gates.push((p_hi.clone(), p_lo.clone()));
                    }
                }
            }
            let mut out = and_batch(ctx, &gates)?.into_iter();
            let mut next = Vec::with_capacity(leaves.len().div_ceil(2));
            for c in leaves.chunks(2) {
                match c {
                    [(_, p_lo), (g_hi, _)] => {
                        let g = g_hi.xor(&out.next().expect("gate"));
                        let prop = p_lo.as_ref().map(|_| out.next().expect("gate"));
                        next.push((g, prop));
                    }
                    [single] => next.push(single.clone()),
                    _ => unreachable!(),
                }
            }
            leaves = next;
        }
        let carry = leaves.pop().expect("root").0;
        Ok(if ctx_holds(me) { carry.xor(&bits[63]) } else { zero })
    })
}

fn ctx_holds(p: PartyId) -> bool {
    p != PartyId::P3
}

/// Shares of `bit * v` from a binary sharing of `bit`, by masked selection:
/// each holder sends both candidates `(b ^ c) * v - r` for `b` in {0, 1} and
/// the peer keeps the one indexed by its own bit share. One round, four words
/// per element. Note that the two candidates differ by `+-v`, so the receiver
/// learns the sender's share up to sign.
pub fn select(ctx: &mut Ctx, bit: &PackedBits, v: &[RingElem]) -> Result<Vec<RingElem>> {
    assert_eq!(bit.len(), v.len());
    let n = v.len();
    ctx.scoped("select", |ctx| {
        if !ctx.is_holder() {
            return Ok(vec![RingElem::ZERO; n]);
        }
        let mask: Vec<RingElem> = (0..n).map(|_| RingElem(ctx.rng.next_u64())).collect();
        let mut msg = Vec::with_capacity(2 * n);
        for b in [false, true] {
            msg.extend((0..n).map(|i| if b ^ bit.get(i) { v[i] - mask[i] } else { -mask[i] }));
        }
        let other = ctx.exchange_words(&msg)?;
        Ok((0..n)
            .map(|i| mask[i] + if bit.get(i) { other[n + i] } else { other[i] })
            .collect())
    })
}

/// Flips P1's share, turning "negative" into "non-negative".
fn flip(ctx: &Ctx, b: &PackedBits) -> PackedBits {
    if ctx.id() == PartyId::P1 {
        b.not()
    } else {
        b.clone()
    }
}

pub fn relu(ctx: &mut Ctx, x: &[RingElem]) -> Result<Vec<RingElem>> {
    ctx.scoped("relu", |ctx| {
        let sign = msb(ctx, x)?;
        let nonneg = flip(ctx, &sign);
        select(ctx, &nonneg, x)
    })
}

/// Arithmetic sharing of `encode(1)` where `x >= 0`, else 0.
pub fn drelu(ctx: &mut Ctx, x: &[RingElem]) -> Result<Vec<RingElem>> {
    ctx.scoped("drelu", |ctx| {
        let sign = msb(ctx, x)?;
        let nonneg = flip(ctx, &sign);
        let one = public(ctx, 1.0, x.len());
        select(ctx, &nonneg, &one)
    })
}

/// ReLU and its derivative mask from a single sign computation.
pub fn relu_with_mask(ctx: &mut Ctx, x: &[RingElem]) -> Result<(Vec<RingElem>, Vec<RingElem>)> {
    ctx.scoped("relu", |ctx| {
        let n = x.len();
        let sign = msb(ctx, x)?;
        let nonneg = flip(ctx, &sign);
        let mut vals = x.to_vec();
        vals.extend(public(ctx, 1.0, n));
        let both = select(ctx, &PackedBits::concat([&nonneg, &nonneg]), &vals)?;
        let (r, m) = both.split_at(n);
        Ok((r.to_vec(), m.to_vec()))
    })
}

/// Row-wise maximum of a `rows x cols` matrix as a tournament of
/// `max(a, b) = relu(a - b) + b`, one comparison layer per tree level.
pub fn max_tree(ctx: &mut Ctx, x: &[RingElem], rows: usize, cols: usize) -> Result<Vec<RingElem>> {
    assert!(cols >= 1 && x.len() == rows * cols);
    ctx.scoped("max", |ctx| {
        let mut cur: Vec<Vec<RingElem>> = x.chunks(cols).map(<[RingElem]>::to_vec).collect();
        let mut width = cols;
        while width > 1 {
            let half = width / 2;
            let mut lhs = Vec::with_capacity(rows * half);
            let mut rhs = Vec::with_capacity(rows * half);
            for r in &cur {
                for i in 0..half {
                    lhs.push(r[2 * i]);
                    rhs.push(r[2 * i + 1]);
                }
            }
            let m = add(&relu(ctx, &sub(&lhs, &rhs))?, &rhs);
            for (r, chunk) in cur.iter_mut().zip(m.chunks(half)) {
                let odd = (width % 2 == 1).then(|| r[width - 1]);
                *r = chunk.to_vec();
                r.extend(odd);
            }
            width = width.div_ceil(2);
        }
        Ok(cur.into_iter().map(|r| r[0]).collect())
    })
}

/// `(1 + x / 2^n)^(2^n)` by n sequential squarings.
pub fn exp(ctx: &mut Ctx, x: &[RingElem], cfg: &ApproxConfig) -> Result<Vec<RingElem>> {
    ctx.scoped("exp", |ctx| {
        let mut y = add_const(ctx, &trunc(ctx, x, cfg.exp_squarings), 1.0);
        for _ in 0..cfg.exp_squarings {
            y = mul(ctx, &y, &y)?;
        }
        Ok(y)
    })
}

/// Newton iteration `y <- y (2 - x y)` from `y0 = 3 e^(0.5 - x) + 0.003`.
pub fn reciprocal(ctx: &mut Ctx, x: &[RingElem], cfg: &ApproxConfig) -> Result<Vec<RingElem>> {
    ctx.scoped("reciprocal", |ctx| {
        let e = exp(ctx, &add_const(ctx, &neg(x), 0.5), cfg)?;
        let mut y = add_const(ctx, &mul_const(ctx, &e, 3.0), 0.003);
        for _ in 0..cfg.recip_iters {
            let xy = mul(ctx, x, &y)?;
            y = mul(ctx, &y, &add_const(ctx, &neg(&xy), 2.0))?;
        }
        Ok(y)
    })
}

/// Newton iteration `y <- y (3 - x y^2) / 2` from `y0 = s e^(0.5 - x) + 0.003`.
pub fn inv_sqrt(ctx: &mut Ctx, x: &[RingElem], cfg: &ApproxConfig) -> Result<Vec<RingElem>> {
    ctx.scoped("inv_sqrt", |ctx| {
        let e = exp(ctx, &add_const(ctx, &neg(x), 0.5), cfg)?;
        let mut y = add_const(ctx, &mul_const(ctx, &e, cfg.invsqrt_init_scale), 0.003);
        for _ in 0..cfg.invsqrt_iters {
            let xy = mul(ctx, x, &y)?;
            let xyy = mul(ctx, &xy, &y)?;
            let half_step = add_const(ctx, &mul_const(ctx, &xyy, -0.5), 1.5);
            y = mul(ctx, &y, &half_step)?;
        }
        Ok(y)
    })
}

/// Householder-style iteration `y <- y - sum_k (1 - x e^(-y))^k / k` from
/// `y0 = x/120 - 20 e^(-2x - 1) + 3`.
pub fn ln(ctx: &mut Ctx, x: &[RingElem], cfg: &ApproxConfig) -> Result<Vec<RingElem>> {
    ctx.scoped("ln", |ctx| {
        let arg = add_const(ctx, &mul_int(x, -2), -1.0);
        let e = exp(ctx, &arg, cfg)?;
        let mut y = add_const(ctx, &sub(&mul_const(ctx, x, 1.0 / 120.0), &mul_int(&e, 20)), 3.0);
        for _ in 0..cfg.ln_iters {
            let ey = exp(ctx, &neg(&y), cfg)?;
            let xe = mul(ctx, x, &ey)?;
            let h = add_const(ctx, &neg(&xe), 1.0);
            let mut pow = h.clone();
            let mut series = h.clone();
            for k in 2..=cfg.ln_terms {
                pow = mul(ctx, &pow, &h)?;
                series = add(&series, &mul_const(ctx, &pow, 1.0 / k as f64));
            }
            y = sub(&y, &series);
        }
        Ok(y)
    })
}

/// Row-wise softmax: subtract the row maximum, exponentiate, normalize by the
/// reciprocal of the row sum.
pub fn softmax(ctx: &mut Ctx, x: &[RingElem], rows: usize, cols: usize, cfg: &ApproxConfig) -> Result<Vec<RingElem>> {
    ctx.scoped("softmax", |ctx| {
        let m = max_tree(ctx, x, rows, cols)?;
        let shifted: Vec<RingElem> = x.iter().enumerate().map(|(i, &v)| v - m[i / cols]).collect();
        let e = exp(ctx, &shifted, cfg)?;
        let sums: Vec<RingElem> = e.chunks(cols).map(|r| r.iter().sum()).collect();
        let inv = reciprocal(ctx, &sums, cfg)?;
        let spread: Vec<RingElem> = (0..rows * cols).map(|i| inv[i / cols]).collect();
        mul(ctx, &e, &spread)
    })
}

fn rotate_rows(a: &[RingElem], width: usize, r: usize) -> Vec<RingElem> {
    // rot(a, r)[j] = a[(j - r) mod m]
    let m = a.len() / width;
    let mut out = Vec::with_capacity(a.len());
    for j in 0..m {
        let src = (j + m - r % m) % m;
        out.extend_from_slice(&a[src * width..(src + 1) * width]);
    }
    out
}

/// Per-access correlated randomness: rotations `r1` (P1, P2) and `r3`
/// (P1, P3), plus this party's correlated-zero mask.
struct AccessCoins {
    r1: usize,
    r3: usize,
    mask: Vec<RingElem>,
}

fn access_coins(ctx: &mut Ctx, m: usize, width: usize) -> Result<AccessCoins> {
    let counter = ctx.next_prf_counter();
    let keys = *ctx.keys();
    let r1 = match ctx.id() {
        PartyId::P3 => 0,
        _ => keys.agreed_random(PairKey::P1P2, counter, m as u64)? as usize,
    };
    let r3 = match ctx.id() {
        PartyId::P2 => 0,
        _ => keys.agreed_random(PairKey::P1P3, counter, m as u64)? as usize,
    };
    Ok(AccessCoins {
        r1,
        r3,
        mask: keys.correlated_zero(counter, m * width),
    })
}

/// Oblivious read of `indices.len()` rows from a shared `m x width` array.
///
/// Index shares are additive modulo `m` over 1-based indices. Per access, P1
/// sends P2 its rotated, masked array share together with its share of the
/// shifted index `h = I - 1 + r1 + r3`; P2 opens `h`, keeps row `h` of what it
/// received, and forwards its own rotated, masked share plus `h` to P3, who
/// unrotates by `r3` and keeps row `h` too. That is `2 m w + 2` words in one
/// round, leaving the result shared between P2 and P3. P3 then re-shares its
/// part to P1 and P2 in a second, separately metered round.
pub fn array_access(ctx: &mut Ctx, array: &[RingElem], width: usize, indices: &[RingElem]) -> Result<Vec<RingElem>> {
    assert!(width > 0 && array.len().is_multiple_of(width));
    let m = array.len() / width;
    if m == 0 {
        return Err(Error::Protocol("access into an empty array".into()));
    }
    let q = indices.len();
    let me = ctx.id();
    let held = ctx.scoped("access", |ctx| {
        let mut coins = Vec::with_capacity(q);
        for _ in 0..q {
            coins.push(access_coins(ctx, m, width)?);
        }
        match me {
            PartyId::P1 => {
                let mut msg = Vec::with_capacity(q * (m * width + 1));
                for (c, idx) in coins.iter().zip(indices) {
                    let rotated = add(&rotate_rows(array, width, c.r1), &c.mask);
                    msg.extend(rotate_rows(&rotated, width, c.r3));
                    let h = (idx.0 % m as u64 + (m - 1) as u64 + c.r1 as u64 + c.r3 as u64) % m as u64;
                    msg.push(RingElem(h));
                }
                ctx.send_words(PartyId::P2, Phase::Online, &msg)?;
                Ok(Vec::new())
            }
            PartyId::P2 => {
                let got = ctx.recv_words(PartyId::P1, Phase::Online, q * (m * width + 1))?;
                let mut fwd = Vec::with_capacity(got.len());
                let mut mine = Vec::with_capacity(q * width);
                for ((chunk, c), idx) in got.chunks(m * width + 1).zip(&coins).zip(indices) {
                    let h1 = chunk[m * width].0;
                    if h1 >= m as u64 {
                        return Err(Error::Protocol(format!("shifted index share {h1} out of range")));
                    }
                    let h = ((h1 + idx.0 % m as u64) % m as u64) as usize;
                    mine.extend_from_slice(&chunk[h * width..(h + 1) * width]);
                    fwd.extend(add(&rotate_rows(array, width, c.r1), &c.mask));
                    fwd.push(RingElem(h as u64));
                }
                ctx.send_words(PartyId::P3, Phase::Online, &fwd)?;
                Ok(mine)
            }
            PartyId::P3 => {
                let got = ctx.recv_words(PartyId::P2, Phase::Online, q * (m * width + 1))?;
                let mut mine = Vec::with_capacity(q * width);
                for (chunk, c) in got.chunks(m * width + 1).zip(&coins) {
                    let h = chunk[m * width].0 as usize;
                    if h >= m {
                        return Err(Error::Protocol(format!("shifted index {h} out of range")));
                    }
                    // Row h of rot(a'_2 + c3, r3) is row (h - r3) of a'_2 + c3.
                    let src = (h + m - c.r3) % m;
                    let row = &chunk[src * width..(src + 1) * width];
                    let mask = &c.mask[src * width..(src + 1) * width];
                    mine.extend(add(row, mask));
                }
                Ok(mine)
            }
        }
    })?;
    ctx.scoped("reshare", |ctx| match me {
        PartyId::P3 => {
            let s: Vec<RingElem> = (0..held.len()).map(|_| RingElem(ctx.rng.gen())).collect();
            ctx.send_words(PartyId::P1, Phase::Online, &s)?;
            ctx.send_words(PartyId::P2, Phase::Online, &sub(&held, &s))?;
            Ok(vec![RingElem::ZERO; q * width])
        }
        PartyId::P1 => ctx.recv_words(PartyId::P3, Phase::Online, q * width),
        PartyId::P2 => {
            let d = ctx.recv_words(PartyId::P3, Phase::Online, q * width)?;
            Ok(add(&held, &d))
        }
    })
}

/// Shares of a one-based index, additive modulo `m`.
pub fn share_index<R: RngCore>(index: u64, m: u64, rng: &mut R) -> (RingElem, RingElem) {
    let second = rng.gen_range(0..m);
    (RingElem((index % m + m - second) % m), RingElem(second))
}

/// Reconstructs an index sharing produced by [`share_index`].
pub fn reconstruct_index(first: RingElem, second: RingElem, m: u64) -> u64 {
    let r = (first.0 + second.0) % m;
    if r == 0 {
        m
    } else {
        r
    }
}

/// Element-wise product where `x` is a vector and `col` is broadcast over the
/// columns of a `rows x cols` layout.
pub fn mul_rows(ctx: &mut Ctx, x: &[RingElem], per_row: &[RingElem], cols: usize) -> Result<Vec<RingElem>> {
    let spread: Vec<RingElem> = (0..x.len()).map(|i| per_row[i / cols]).collect();
    mul(ctx, x, &spread)
}

/// Sums each row of a `rows x cols` layout.
pub fn row_sums(x: &[RingElem], cols: usize) -> Vec<RingElem> {
    x.chunks(cols).map(|r| r.iter().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_layers_total_181() {
        let layers = msb_gate_layers();
        assert_eq!(layers, vec![124, 31, 15, 7, 3, 1]);
        assert_eq!(layers.iter().sum::<usize>(), 181);
    }

    #[test]
    fn rotation_definition() {
        let a: Vec<RingElem> = (0..5).map(RingElem).collect();
        let r = rotate_rows(&a, 1, 2);
        assert_eq!(r, [3, 4, 0, 1, 2].map(RingElem).to_vec());
        let b: Vec<RingElem> = (0..6).map(RingElem).collect();
        assert_eq!(rotate_rows(&b, 2, 1), [4, 5, 0, 1, 2, 3].map(RingElem).to_vec());
    }

    #[test]
    fn index_sharing_round_trip() {
        let mut rng = rand::rngs::mock::StepRng::new(3, 7);
        for m in [1u64, 5, 100] {
            for i in 1..=m {
                let (a, b) = share_index(i, m, &mut rng);
                assert!(a.0 < m && b.0 < m);
                assert_eq!(reconstruct_index(a, b, m), i);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ApproxConfig::default().validate().is_ok());
        let bad = ApproxConfig {
            ln_terms: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
