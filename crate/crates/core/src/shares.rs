//! Additive and XOR sharing, Beaver triples, and PRF-derived correlated
//! randomness.

use std::io::{Read, Write};

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::PartyId;
use crate::ring::RingElem;

/// Both halves of an arithmetic sharing; only the data owner or a test
/// harness ever holds this pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithShared {
    pub first: RingElem,
    pub second: RingElem,
}

impl ArithShared {
    pub fn reconstruct(&self) -> RingElem {
        self.first + self.second
    }

    pub fn of(&self, party: PartyId) -> RingElem {
        match party {
            PartyId::P1 => self.first,
            PartyId::P2 => self.second,
            PartyId::P3 => RingElem::ZERO,
        }
    }
}

/// Splits `x` so that the second share is uniform and the first is `x - second`.
pub fn share<R: RngCore>(x: RingElem, rng: &mut R) -> ArithShared {
    let second = RingElem(rng.next_u64());
    ArithShared {
        first: x - second,
        second,
    }
}

pub fn share_vec<R: RngCore>(xs: &[RingElem], rng: &mut R) -> (Vec<RingElem>, Vec<RingElem>) {
    xs.iter().map(|&x| share(x, rng)).map(|s| (s.first, s.second)).unzip()
}

pub fn reconstruct(first: RingElem, second: RingElem) -> RingElem {
    first + second
}

pub fn reconstruct_vec(first: &[RingElem], second: &[RingElem]) -> Vec<RingElem> {
    assert_eq!(first.len(), second.len(), "share vectors differ in length");
    first.iter().zip(second).map(|(&a, &b)| a + b).collect()
}

pub fn reconstruct_bin(first: bool, second: bool) -> bool {
    first ^ second
}

/// Bits packed 64 to a word; the XOR shares of a batch of bits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBits {
    len: usize,
    words: Vec<u64>,
}

impl PackedBits {
    pub fn zeros(len: usize) -> Self {
        PackedBits {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut out = PackedBits::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            out.set(i, b);
        }
        out
    }

    pub fn from_words(len: usize, mut words: Vec<u64>) -> Self {
        assert!(words.len() == len.div_ceil(64), "word count does not match bit length");
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        PackedBits { len, words }
    }

    pub fn random<R: RngCore>(len: usize, rng: &mut R) -> Self {
        let words = (0..len.div_ceil(64)).map(|_| rng.next_u64()).collect();
        PackedBits::from_words(len, words)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, b: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i % 64);
        if b {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn xor(&self, other: &PackedBits) -> PackedBits {
        assert_eq!(self.len, other.len);
        let words = self.words.iter().zip(&other.words).map(|(a, b)| a ^ b).collect();
        PackedBits { len: self.len, words }
    }

    pub fn and(&self, other: &PackedBits) -> PackedBits {
        assert_eq!(self.len, other.len);
        let words = self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect();
        PackedBits { len: self.len, words }
    }

    pub fn not(&self) -> PackedBits {
        let words = self.words.iter().map(|w| !w).collect();
        PackedBits::from_words(self.len, words)
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Concatenates bit vectors, repacking at arbitrary offsets.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PackedBits>) -> PackedBits {
        let mut out = PackedBits::default();
        for p in parts {
            out.append(p);
        }
        out
    }

    fn append(&mut self, other: &PackedBits) {
        let off = self.len % 64;
        if off == 0 {
            self.words.extend_from_slice(&other.words);
        } else {
            let last = self.words.len() - 1;
            for (i, &w) in other.words.iter().enumerate() {
                self.words[last + i] |= w << off;
                self.words.push(w >> (64 - off));
            }
        }
        self.len += other.len;
        self.words.truncate(self.len.div_ceil(64));
    }

    /// Bits `[start, start + len)` as a new vector.
    pub fn slice(&self, start: usize, len: usize) -> PackedBits {
        assert!(start + len <= self.len);
        let (first, off) = (start / 64, start % 64);
        let count = len.div_ceil(64);
        let words = (0..count)
            .map(|i| {
                let lo = self.words[first + i] >> off;
                let hi = match self.words.get(first + i + 1) {
                    Some(&w) if off > 0 => w << (64 - off),
                    _ => 0,
                };
                lo | hi
            })
            .collect();
        PackedBits::from_words(len, words)
    }
}

/// One party's shares of a batch of arithmetic triples `w = u * v`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ArithTriples {
    pub u: Vec<RingElem>,
    pub v: Vec<RingElem>,
    pub w: Vec<RingElem>,
}

impl ArithTriples {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// One party's shares of a batch of binary triples `w = u AND v`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BinTriples {
    pub u: PackedBits,
    pub v: PackedBits,
    pub w: PackedBits,
}

impl BinTriples {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// One party's share of a matrix triple `W = U V` with `U: n x k`, `V: k x m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatTriple {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub u: Vec<RingElem>,
    pub v: Vec<RingElem>,
    pub w: Vec<RingElem>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripleKind {
    Arith,
    Binary,
}

/// Triple generation at the dealer. Returns the shares for P1 and P2.
pub struct Dealer {
    rng: ChaCha20Rng,
}

impl Dealer {
    pub fn new(seed: u64) -> Self {
        Dealer {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn from_rng(rng: ChaCha20Rng) -> Self {
        Dealer { rng }
    }

    pub fn arith(&mut self, count: usize) -> [ArithTriples; 2] {
        let mut out = [ArithTriples::default(), ArithTriples::default()];
        for _ in 0..count {
            let u = RingElem(self.rng.next_u64());
            let v = RingElem(self.rng.next_u64());
            for (x, pick) in [u, v, u * v].into_iter().zip(0..) {
                let s = share(x, &mut self.rng);
                let halves = [s.first, s.second];
                for (t, h) in out.iter_mut().zip(halves) {
                    match pick {
                        0 => t.u.push(h),
                        1 => t.v.push(h),
                        _ => t.w.push(h),
                    }
                }
            }
        }
        out
    }

    pub fn binary(&mut self, count: usize) -> [BinTriples; 2] {
        let u = PackedBits::random(count, &mut self.rng);
        let v = PackedBits::random(count, &mut self.rng);
        let w = u.and(&v);
        let split = |x: &PackedBits, rng: &mut ChaCha20Rng| {
            let second = PackedBits::random(count, rng);
            (x.xor(&second), second)
        };
        let (u1, u2) = split(&u, &mut self.rng);
        let (v1, v2) = split(&v, &mut self.rng);
        let (w1, w2) = split(&w, &mut self.rng);
        [BinTriples { u: u1, v: v1, w: w1 }, BinTriples { u: u2, v: v2, w: w2 }]
    }

    pub fn matrix(&mut self, n: usize, k: usize, m: usize) -> [MatTriple; 2] {
        let u: Vec<RingElem> = (0..n * k).map(|_| RingElem(self.rng.next_u64())).collect();
        let v: Vec<RingElem> = (0..k * m).map(|_| RingElem(self.rng.next_u64())).collect();
        let w = matmul_ring(&u, &v, n, k, m);
        let (u1, u2) = share_vec(&u, &mut self.rng);
        let (v1, v2) = share_vec(&v, &mut self.rng);
        let (w1, w2) = share_vec(&w, &mut self.rng);
        [
            MatTriple {
                n,
                k,
                m,
                u: u1,
                v: v1,
                w: w1,
            },
            MatTriple {
                n,
                k,
                m,
                u: u2,
                v: v2,
                w: w2,
            },
        ]
    }
}

/// Row-major `a (n x k) * b (k x m)` over the ring.
pub fn matmul_ring(a: &[RingElem], b: &[RingElem], n: usize, k: usize, m: usize) -> Vec<RingElem> {
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), k * m);
    let mut out = vec![RingElem::ZERO; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (t, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == RingElem::ZERO {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&b[t * m..(t + 1) * m]) {
                *o += x * y;
            }
        }
    }
    out
}

/// Per-party store of dealt triples; consumption never reuses material.
#[derive(Debug, Default)]
pub struct TriplePool {
    arith: ArithTriples,
    arith_used: usize,
    binary: BinTriples,
    bin_used: usize,
}

impl TriplePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arith_available(&self) -> usize {
        self.arith.len() - self.arith_used
    }

    pub fn binary_available(&self) -> usize {
        self.binary.len() - self.bin_used
    }

    pub fn push_arith(&mut self, t: ArithTriples) {
        self.arith.u.extend(t.u);
        self.arith.v.extend(t.v);
        self.arith.w.extend(t.w);
    }

    pub fn push_binary(&mut self, t: BinTriples) {
        let b = &self.binary;
        self.binary = BinTriples {
            u: PackedBits::concat([&b.u, &t.u]),
            v: PackedBits::concat([&b.v, &t.v]),
            w: PackedBits::concat([&b.w, &t.w]),
        };
    }

    pub fn take_arith(&mut self, n: usize) -> Result<ArithTriples> {
        let available = self.arith_available();
        if n > available {
            return Err(Error::TripleExhausted {
                kind: "arithmetic",
                requested: n,
                available,
            });
        }
        let r = self.arith_used..self.arith_used + n;
        self.arith_used += n;
        let out = ArithTriples {
            u: self.arith.u[r.clone()].to_vec(),
            v: self.arith.v[r.clone()].to_vec(),
            w: self.arith.w[r].to_vec(),
        };
        self.compact();
        Ok(out)
    }

    pub fn take_binary(&mut self, n: usize) -> Result<BinTriples> {
        let available = self.binary_available();
        if n > available {
            return Err(Error::TripleExhausted {
                kind: "binary",
                requested: n,
                available,
            });
        }
        let at = self.bin_used;
        self.bin_used += n;
        let out = BinTriples {
            u: self.binary.u.slice(at, n),
            v: self.binary.v.slice(at, n),
            w: self.binary.w.slice(at, n),
        };
        self.compact();
        Ok(out)
    }

    fn compact(&mut self) {
        if self.arith_used == self.arith.len() {
            self.arith = ArithTriples::default();
            self.arith_used = 0;
        }
        if self.bin_used == self.binary.len() {
            self.binary = BinTriples::default();
            self.bin_used = 0;
        }
    }
}

/// Convenience: deal `count` triples of one kind into fresh pools for P1 and P2.
pub fn deal_triples(count: usize, kind: TripleKind, seed: u64) -> [TriplePool; 2] {
    let mut dealer = Dealer::new(seed);
    let mut pools = [TriplePool::new(), TriplePool::new()];
    match kind {
        TripleKind::Arith => {
            for (pool, t) in pools.iter_mut().zip(dealer.arith(count)) {
                pool.push_arith(t);
            }
        }
        TripleKind::Binary => {
            for (pool, t) in pools.iter_mut().zip(dealer.binary(count)) {
                pool.push_binary(t);
            }
        }
    }
    pools
}

/// A 128-bit PRF key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfKey(pub [u8; 16]);

impl PrfKey {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; 16];
        rng.fill_bytes(&mut k);
        PrfKey(k)
    }
}

/// Domain-separation tags for PRF streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    CorrelatedZero = 1,
    Rotation = 2,
    Mask = 3,
}

/// Counter-mode keyed PRF: a ChaCha20 stream keyed by (key, purpose, counter).
pub fn prf_stream(key: &PrfKey, purpose: Purpose, counter: u64) -> ChaCha20Rng {
    let mut seed = [0u8; 32];
    seed[..16].copy_from_slice(&key.0);
    seed[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    seed[24..].copy_from_slice(&counter.to_le_bytes());
    ChaCha20Rng::from_seed(seed)
}

pub fn prf(key: &PrfKey, purpose: Purpose, counter: u64) -> u64 {
    prf_stream(key, purpose, counter).next_u64()
}

/// The keys one party holds: its own `k_i` and its predecessor's `k_{i-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrfKeyRing {
    pub party: PartyId,
    pub own: PrfKey,
    pub prev: PrfKey,
}

/// Which pair of parties derives an agreed random value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKey {
    /// Derived from `k_1`, known to P1 and P2.
    P1P2,
    /// Derived from `k_3`, known to P3 and P1.
    P1P3,
}

impl PrfKeyRing {
    /// The key `k_i` if this party holds it.
    pub fn key(&self, index: PartyId) -> Option<&PrfKey> {
        if index == self.party {
            Some(&self.own)
        } else if index == self.party.prev() {
            Some(&self.prev)
        } else {
            None
        }
    }

    /// This party's slice of correlated zeros for one protocol invocation:
    /// `c^i[j] = F(k_i, j) - F(k_{i-1}, j)`, summing to zero across parties.
    pub fn correlated_zero(&self, counter: u64, m: usize) -> Vec<RingElem> {
        let mut own = prf_stream(&self.own, Purpose::CorrelatedZero, counter);
        let mut prev = prf_stream(&self.prev, Purpose::CorrelatedZero, counter);
        (0..m)
            .map(|_| RingElem(own.next_u64()) - RingElem(prev.next_u64()))
            .collect()
    }

    /// A value in `[0, m)` that both members of `pair` derive identically.
    pub fn agreed_random(&self, pair: PairKey, counter: u64, m: u64) -> Result<u64> {
        let index = match pair {
            PairKey::P1P2 => PartyId::P1,
            PairKey::P1P3 => PartyId::P3,
        };
        let key = self
            .key(index)
            .ok_or_else(|| Error::Protocol(format!("{} does not hold k_{}", self.party, index.index())))?;
        Ok(prf_stream(key, Purpose::Rotation, counter).gen_range(0..m))
    }
}

const OFFLINE_MAGIC: &[u8; 4] = b"SGNN";
const OFFLINE_VERSION: u16 = 1;

/// Dealt material for one party, serializable for reuse across runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OfflineMaterial {
    pub arith: ArithTriples,
    pub binary: BinTriples,
}

impl OfflineMaterial {
    /// Layout: magic, version (u16), arith count, binary count (u64 each),
    /// then u, v, w for arith triples and the packed words of u, v, w for
    /// binary triples, all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(OFFLINE_MAGIC)?;
        w.write_all(&OFFLINE_VERSION.to_le_bytes())?;
        w.write_all(&(self.arith.len() as u64).to_le_bytes())?;
        w.write_all(&(self.binary.len() as u64).to_le_bytes())?;
        for words in [&self.arith.u, &self.arith.v, &self.arith.w] {
            for x in words {
                w.write_all(&x.0.to_le_bytes())?;
            }
        }
        for bits in [&self.binary.u, &self.binary.v, &self.binary.w] {
            for x in bits.words() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::format("offline material", 0, reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != OFFLINE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        if u16::from_le_bytes(v) != OFFLINE_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut read_u64 = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let n_arith = read_u64()? as usize;
        let n_bin = read_u64()? as usize;
        let mut ring = |n: usize| -> Result<Vec<RingElem>> { (0..n).map(|_| read_u64().map(RingElem)).collect() };
        let arith = ArithTriples {
            u: ring(n_arith)?,
            v: ring(n_arith)?,
            w: ring(n_arith)?,
        };
        let mut bits = || -> Result<PackedBits> {
            let words = ring(n_bin.div_ceil(64))?.into_iter().map(|x| x.0).collect();
            Ok(PackedBits::from_words(n_bin, words))
        };
        let binary = BinTriples {
            u: bits()?,
            v: bits()?,
            w: bits()?,
        };
        Ok(OfflineMaterial { arith, binary })
    }
}
