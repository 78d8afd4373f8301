//! Party runtime: ordered, metered point-to-point links among P1, P2, P3.
//!
//! A protocol is a single program run by all three parties. Each party owns a
//! [`Ctx`] holding its links, local randomness, PRF keys and triple pool.
//! Frames are `u32 length | u8 phase | clock header | payload`; only payload
//! bytes are metered.
//!
//! Rounds are counted with a causal clock carried on online frames. A party's
//! clock is a set of `(segment, count)` pairs where a segment is the set of
//! parties touched by the current chain of dependent messages. A message from
//! `p` to `q` extends the segment when `q` has not yet appeared in it and
//! starts a new one otherwise, so two parties swapping messages, or a
//! relay `P1 -> P2 -> P3`, both cost one round, while a reply back into a
//! segment costs another. Every metering scope starts a fresh clock; on exit
//! its chains are appended to the enclosing scope's clock, so scope
//! boundaries act as synchronization points.

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ring::{FixedCodec, RingElem, ShareRole};
use crate::shares::{Dealer, PackedBits, PrfKey, PrfKeyRing, TriplePool};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartyId {
    P1,
    P2,
    P3,
}

impl PartyId {
    pub const ALL: [PartyId; 3] = [PartyId::P1, PartyId::P2, PartyId::P3];

    /// 1-based index.
    pub fn index(self) -> usize {
        match self {
            PartyId::P1 => 1,
            PartyId::P2 => 2,
            PartyId::P3 => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<PartyId> {
        match i {
            1 => Some(PartyId::P1),
            2 => Some(PartyId::P2),
            3 => Some(PartyId::P3),
            _ => None,
        }
    }

    pub fn next(self) -> PartyId {
        PartyId::ALL[self.index() % 3]
    }

    pub fn prev(self) -> PartyId {
        PartyId::ALL[(self.index() + 1) % 3]
    }

    fn bit(self) -> u8 {
        1 << (self.index() - 1)
    }

    /// Role in the P1/P2 sharing, if this party holds shares.
    pub fn role(self) -> Option<ShareRole> {
        match self {
            PartyId::P1 => Some(ShareRole::First),
            PartyId::P2 => Some(ShareRole::Second),
            PartyId::P3 => None,
        }
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Online,
    Offline,
}

impl Phase {
    fn tag(self) -> u8 {
        match self {
            Phase::Online => 0,
            Phase::Offline => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Phase> {
        match t {
            0 => Some(Phase::Online),
            1 => Some(Phase::Offline),
            _ => None,
        }
    }
}

/// Causal round clock; `segments[mask]` is the longest count reaching this
/// party whose current segment is exactly the party set `mask`.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Clock {
    segments: [Option<u32>; 8],
}

impl Clock {
    fn new(me: PartyId) -> Self {
        let mut segments = [None; 8];
        segments[me.bit() as usize] = Some(0);
        Clock { segments }
    }

    fn rounds(&self) -> u32 {
        self.segments.iter().flatten().copied().max().unwrap_or(0)
    }

    fn outgoing(&self, from: PartyId, to: PartyId) -> Vec<(u8, u32)> {
        let pair = from.bit() | to.bit();
        let mut out = [None; 8];
        for (mask, r) in self.segments.iter().enumerate() {
            let Some(r) = *r else { continue };
            let mask = mask as u8;
            let (m, r) = if r == 0 {
                (pair, 1)
            } else if mask & to.bit() != 0 {
                (pair, r + 1)
            } else {
                (mask | to.bit(), r)
            };
            let slot: &mut Option<u32> = &mut out[m as usize];
            *slot = Some(slot.map_or(r, |x: u32| x.max(r)));
        }
        out.iter()
            .enumerate()
            .filter_map(|(m, r)| r.map(|r| (m as u8, r)))
            .collect()
    }

    fn merge(&mut self, entries: &[(u8, u32)]) {
        for &(m, r) in entries {
            let slot = &mut self.segments[m as usize & 7];
            *slot = Some(slot.map_or(r, |x| x.max(r)));
        }
    }

    /// Appends the chains of a finished inner scope after this clock's
    /// longest chain.
    fn append(&mut self, inner: &Clock) {
        let base = self.rounds();
        let entries: Vec<(u8, u32)> = inner
            .segments
            .iter()
            .enumerate()
            .filter_map(|(m, r)| r.filter(|&r| r > 0).map(|r| (m as u8, base + r)))
            .collect();
        self.merge(&entries);
    }
}

/// Raw frame transport between this party and its two peers.
pub trait Transport: Send {
    fn send(&mut self, to: PartyId, frame: Vec<u8>) -> Result<()>;
    fn recv(&mut self, from: PartyId) -> Result<Vec<u8>>;
}

struct ChannelTransport {
    me: PartyId,
    tx: [Option<Sender<Vec<u8>>>; 3],
    rx: [Option<Receiver<Vec<u8>>>; 3],
    timeout: Duration,
}

impl Transport for ChannelTransport {
    fn send(&mut self, to: PartyId, frame: Vec<u8>) -> Result<()> {
        let tx = self.tx[to.index() - 1].as_ref().expect("no link to self");
        tx.send(frame).map_err(|_| Error::Session {
            party: to,
            index: 0,
            reason: format!("channel from {} closed", self.me),
        })
    }

    fn recv(&mut self, from: PartyId) -> Result<Vec<u8>> {
        let rx = self.rx[from.index() - 1].as_ref().expect("no link to self");
        rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Deadlock { from, at: self.me },
            RecvTimeoutError::Disconnected => Error::Session {
                party: from,
                index: 0,
                reason: format!("channel to {} closed", self.me),
            },
        })
    }
}

fn channel_mesh(timeout: Duration) -> [ChannelTransport; 3] {
    let mut tx: [[Option<Sender<Vec<u8>>>; 3]; 3] = Default::default();
    let mut rx: [[Option<Receiver<Vec<u8>>>; 3]; 3] = Default::default();
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                let (s, r) = unbounded();
                tx[a][b] = Some(s);
                rx[b][a] = Some(r);
            }
        }
    }
    let mut out = Vec::new();
    for (i, (t, r)) in tx.into_iter().zip(rx).enumerate() {
        out.push(ChannelTransport {
            me: PartyId::ALL[i],
            tx: t,
            rx: r,
            timeout,
        });
    }
    out.try_into().ok().expect("three transports")
}

/// TCP links: one stream per peer, each drained by a reader thread so that
/// simultaneous large sends in both directions never block each other.
pub struct TcpTransport {
    me: PartyId,
    writers: [Option<BufWriter<TcpStream>>; 3],
    rx: [Option<Receiver<std::io::Result<Vec<u8>>>>; 3],
    timeout: Duration,
}

impl TcpTransport {
    /// Lower-numbered parties listen, higher-numbered parties connect.
    pub fn connect(me: PartyId, addrs: &[SocketAddr; 3], timeout: Duration) -> Result<Self> {
        let mut streams: [Option<TcpStream>; 3] = Default::default();
        let listener = if me != PartyId::P3 {
            Some(TcpListener::bind(addrs[me.index() - 1])?)
        } else {
            None
        };
        for peer in PartyId::ALL.into_iter().filter(|&p| p < me) {
            let deadline = Instant::now() + timeout;
            let mut stream = loop {
                match TcpStream::connect(addrs[peer.index() - 1]) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() > deadline => return Err(e.into()),
                    Err(_) => thread::sleep(Duration::from_millis(20)),
                }
            };
            stream.write_all(&[me.index() as u8])?;
            streams[peer.index() - 1] = Some(stream);
        }
        if let Some(listener) = listener {
            let expected = PartyId::ALL.iter().filter(|&&p| p > me).count();
            for _ in 0..expected {
                let (mut stream, _) = listener.accept()?;
                let mut id = [0u8; 1];
                stream.read_exact(&mut id)?;
                let peer = PartyId::from_index(id[0] as usize)
                    .ok_or_else(|| Error::Protocol(format!("bad peer id {}", id[0])))?;
                streams[peer.index() - 1] = Some(stream);
            }
        }
        let mut writers: [Option<BufWriter<TcpStream>>; 3] = Default::default();
        let mut rx: [Option<Receiver<std::io::Result<Vec<u8>>>>; 3] = Default::default();
        for (i, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else { continue };
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            let (s, r) = unbounded();
            thread::spawn(move || {
                let mut reader = BufReader::new(reader);
                loop {
                    let frame = read_frame(&mut reader);
                    let done = frame.is_err();
                    if s.send(frame).is_err() || done {
                        break;
                    }
                }
            });
            writers[i] = Some(BufWriter::new(stream));
            rx[i] = Some(r);
        }
        Ok(TcpTransport {
            me,
            writers,
            rx,
            timeout,
        })
    }
}

fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut body)?;
    Ok(body)
}

impl Transport for TcpTransport {
    fn send(&mut self, to: PartyId, frame: Vec<u8>) -> Result<()> {
        let w = self.writers[to.index() - 1].as_mut().expect("no link to self");
        w.write_all(&(frame.len() as u32).to_le_bytes())?;
        w.write_all(&frame)?;
        w.flush()?;
        Ok(())
    }

    fn recv(&mut self, from: PartyId) -> Result<Vec<u8>> {
        let rx = self.rx[from.index() - 1].as_ref().expect("no link to self");
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(frame)) => Ok(frame),
            Ok(Err(e)) => Err(Error::Session {
                party: from,
                index: 0,
                reason: format!("read failed at {}: {e}", self.me),
            }),
            Err(RecvTimeoutError::Timeout) => Err(Error::Deadlock { from, at: self.me }),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Session {
                party: from,
                index: 0,
                reason: "link closed".into(),
            }),
        }
    }
}

/// Latency and bandwidth applied to reported (not real) wall time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetModel {
    pub latency_ms: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl Default for NetModel {
    fn default() -> Self {
        NetModel {
            latency_ms: 0.22,
            bandwidth_bytes_per_s: 625e6,
        }
    }
}

impl NetModel {
    pub fn simulated_ms(&self, compute_ms: f64, rounds: u64, bytes: u64) -> f64 {
        compute_ms + rounds as f64 * self.latency_ms + bytes as f64 / self.bandwidth_bytes_per_s * 1e3
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Topology {
    InProcess,
    Tcp { addrs: [SocketAddr; 3] },
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub topology: Topology,
    pub seed: u64,
    pub codec: FixedCodec,
    pub net: NetModel,
    pub recv_timeout: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            topology: Topology::InProcess,
            seed: 0,
            codec: FixedCodec::default(),
            net: NetModel::default(),
            recv_timeout: Duration::from_secs(120),
        }
    }
}

impl SessionConfig {
    pub fn with_seed(seed: u64) -> Self {
        SessionConfig {
            seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counters {
    online_bytes: u64,
    online_bits: u64,
    offline_bytes: u64,
    offline_bits: u64,
    messages: u64,
}

/// One party's view of a metered scope.
#[derive(Clone, Debug, PartialEq)]
pub struct ScopeRecord {
    pub protocol: String,
    pub depth: usize,
    pub online_bytes: u64,
    pub online_bits: u64,
    pub offline_bytes: u64,
    pub offline_bits: u64,
    pub rounds: u32,
    pub millis: f64,
}

struct OpenScope {
    slot: usize,
    start: Counters,
    at: Instant,
}

/// Per-party execution context for protocol programs.
pub struct Ctx {
    id: PartyId,
    transport: Box<dyn Transport>,
    clocks: Vec<Clock>,
    counters: Counters,
    scopes: Vec<ScopeRecord>,
    open: Vec<OpenScope>,
    path: Vec<String>,
    transcript: Sha256,
    received: u64,
    captured: Option<Vec<(PartyId, Vec<u8>)>>,
    opened: u64,
    keys: PrfKeyRing,
    prf_counter: u64,
    pub rng: ChaCha20Rng,
    pub pool: TriplePool,
    dealer: Option<Dealer>,
    predealt: bool,
    pub codec: FixedCodec,
}

impl Ctx {
    fn new(id: PartyId, transport: Box<dyn Transport>, seed: u64, codec: FixedCodec) -> Result<Ctx> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let own = PrfKey::random(&mut rng);
        let dealer =
            (id == PartyId::P3).then(|| Dealer::from_rng(ChaCha20Rng::seed_from_u64(seed.wrapping_add(0xdea1))));
        let mut ctx = Ctx {
            id,
            transport,
            clocks: vec![Clock::new(id)],
            counters: Counters::default(),
            scopes: Vec::new(),
            open: Vec::new(),
            path: Vec::new(),
            transcript: Sha256::new(),
            received: 0,
            captured: None,
            opened: 0,
            keys: PrfKeyRing {
                party: id,
                own,
                prev: own,
            },
            prf_counter: 0,
            rng,
            pool: TriplePool::new(),
            dealer,
            predealt: false,
            codec,
        };
        ctx.scoped("setup", |ctx| {
            // P_i hands k_i to P_{i+1}; afterwards P_i holds k_i and k_{i-1}.
            ctx.send_bytes(id.next(), Phase::Offline, own.0.to_vec(), 128)?;
            let prev = ctx.recv_bytes(id.prev(), Phase::Offline)?;
            let prev: [u8; 16] = prev
                .try_into()
                .map_err(|_| ctx.malformed(id.prev(), "PRF key must be 16 bytes"))?;
            ctx.keys.prev = PrfKey(prev);
            Ok(())
        })?;
        Ok(ctx)
    }

    pub fn id(&self) -> PartyId {
        self.id
    }

    /// Whether this party holds shares (P1 or P2).
    pub fn is_holder(&self) -> bool {
        self.id != PartyId::P3
    }

    pub fn is_dealer(&self) -> bool {
        self.id == PartyId::P3
    }

    pub fn keys(&self) -> &PrfKeyRing {
        &self.keys
    }

    /// Next invocation counter for PRF-derived correlated randomness.
    /// Every party advances it in lockstep since all run the same program.
    pub fn next_prf_counter(&mut self) -> u64 {
        let c = self.prf_counter;
        self.prf_counter += 1;
        c
    }

    /// Whether triples come from material loaded into [`Ctx::pool`] up front
    /// rather than being dealt by P3 on demand. All parties must agree.
    pub fn predealt(&self) -> bool {
        self.predealt
    }

    pub fn set_predealt(&mut self, on: bool) {
        self.predealt = on;
    }

    pub fn dealer(&mut self) -> &mut Dealer {
        self.dealer.as_mut().expect("only P3 deals")
    }

    /// Number of secret values revealed through [`Ctx::note_opened`].
    pub fn opened(&self) -> u64 {
        self.opened
    }

    pub fn note_opened(&mut self, n: u64) {
        self.opened += n;
    }

    /// Rounds on this party's critical path within the innermost scope.
    pub fn rounds(&self) -> u32 {
        self.clock().rounds()
    }

    fn clock(&self) -> &Clock {
        self.clocks.last().expect("root clock")
    }

    fn malformed(&self, from: PartyId, reason: &str) -> Error {
        Error::Session {
            party: from,
            index: self.received,
            reason: reason.to_string(),
        }
    }

    fn send_bytes(&mut self, to: PartyId, phase: Phase, payload: Vec<u8>, bits: u64) -> Result<()> {
        assert_ne!(to, self.id, "cannot send to self");
        let entries = match phase {
            Phase::Online => self.clock().outgoing(self.id, to),
            Phase::Offline => Vec::new(),
        };
        let mut frame = Vec::with_capacity(2 + entries.len() * 5 + payload.len());
        frame.push(phase.tag());
        frame.push(entries.len() as u8);
        for (m, r) in &entries {
            frame.push(*m);
            frame.extend_from_slice(&r.to_le_bytes());
        }
        frame.extend_from_slice(&payload);
        self.transcript.update([0u8, to.index() as u8, phase.tag()]);
        self.transcript.update(&payload);
        match phase {
            Phase::Online => {
                self.counters.online_bytes += payload.len() as u64;
                self.counters.online_bits += bits;
            }
            Phase::Offline => {
                self.counters.offline_bytes += payload.len() as u64;
                self.counters.offline_bits += bits;
            }
        }
        self.counters.messages += 1;
        self.transport.send(to, frame)
    }

    fn recv_bytes(&mut self, from: PartyId, phase: Phase) -> Result<Vec<u8>> {
        assert_ne!(from, self.id, "cannot receive from self");
        let frame = self.transport.recv(from)?;
        self.received += 1;
        let bad = |ctx: &Ctx, reason: &str| ctx.malformed(from, reason);
        if frame.len() < 2 {
            return Err(bad(self, "truncated frame"));
        }
        let got = Phase::from_tag(frame[0]).ok_or_else(|| bad(self, "unknown phase tag"))?;
        if got != phase {
            return Err(bad(self, &format!("expected {phase:?} frame, got {got:?}")));
        }
        let n = frame[1] as usize;
        let body = 2 + n * 5;
        if frame.len() < body {
            return Err(bad(self, "truncated clock header"));
        }
        let entries: Vec<(u8, u32)> = frame[2..body]
            .chunks_exact(5)
            .map(|c| (c[0], u32::from_le_bytes([c[1], c[2], c[3], c[4]])))
            .collect();
        self.clocks.last_mut().expect("root clock").merge(&entries);
        let payload = frame[body..].to_vec();
        self.transcript.update([1u8, from.index() as u8, phase.tag()]);
        self.transcript.update(&payload);
        if let Some(log) = &mut self.captured {
            log.push((from, payload.clone()));
        }
        Ok(payload)
    }

    pub fn send_words(&mut self, to: PartyId, phase: Phase, words: &[RingElem]) -> Result<()> {
        let payload = words.iter().flat_map(|w| w.0.to_le_bytes()).collect();
        self.send_bytes(to, phase, payload, 64 * words.len() as u64)
    }

    /// Receives exactly `n` words; any other length is a session error.
    pub fn recv_words(&mut self, from: PartyId, phase: Phase, n: usize) -> Result<Vec<RingElem>> {
        let payload = self.recv_bytes(from, phase)?;
        if payload.len() != 8 * n {
            return Err(self.malformed(from, &format!("expected {n} words, got {} bytes", payload.len())));
        }
        Ok(payload
            .chunks_exact(8)
            .map(|c| RingElem(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect())
    }

    /// Bits travel packed; the meter records the logical bit count.
    pub fn send_bits(&mut self, to: PartyId, phase: Phase, bits: &PackedBits) -> Result<()> {
        let nbytes = bits.len().div_ceil(8);
        let payload: Vec<u8> = bits.words().iter().flat_map(|w| w.to_le_bytes()).take(nbytes).collect();
        self.send_bytes(to, phase, payload, bits.len() as u64)
    }

    pub fn recv_bits(&mut self, from: PartyId, phase: Phase, len: usize) -> Result<PackedBits> {
        let mut payload = self.recv_bytes(from, phase)?;
        if payload.len() != len.div_ceil(8) {
            return Err(self.malformed(from, &format!("expected {len} bits, got {} bytes", payload.len())));
        }
        payload.resize(len.div_ceil(64) * 8, 0);
        let words = payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(PackedBits::from_words(len, words))
    }

    /// Both holders send to each other, then receive: a single round.
    pub fn exchange_words(&mut self, words: &[RingElem]) -> Result<Vec<RingElem>> {
        let peer = self.peer();
        self.send_words(peer, Phase::Online, words)?;
        self.recv_words(peer, Phase::Online, words.len())
    }

    pub fn exchange_bits(&mut self, bits: &PackedBits) -> Result<PackedBits> {
        let peer = self.peer();
        self.send_bits(peer, Phase::Online, bits)?;
        self.recv_bits(peer, Phase::Online, bits.len())
    }

    /// Starts recording every received payload, i.e. this party's view.
    pub fn capture_view(&mut self) {
        self.captured = Some(Vec::new());
    }

    /// Payloads received since `capture_view`, with their senders.
    pub fn take_view(&mut self) -> Vec<(PartyId, Vec<u8>)> {
        self.captured.take().unwrap_or_default()
    }

    /// The other share holder.
    pub fn peer(&self) -> PartyId {
        match self.id {
            PartyId::P1 => PartyId::P2,
            PartyId::P2 => PartyId::P1,
            PartyId::P3 => panic!("P3 holds no shares"),
        }
    }

    /// Runs `f` inside a named metering scope. Scopes nest; the recorded name
    /// is the slash-joined path.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Ctx) -> Result<T>) -> Result<T> {
        self.path.push(name.to_string());
        let slot = self.scopes.len();
        self.scopes.push(ScopeRecord {
            protocol: self.path.join("/"),
            depth: self.path.len() - 1,
            online_bytes: 0,
            online_bits: 0,
            offline_bytes: 0,
            offline_bits: 0,
            rounds: 0,
            millis: 0.0,
        });
        self.open.push(OpenScope {
            slot,
            start: self.counters,
            at: Instant::now(),
        });
        self.clocks.push(Clock::new(self.id));
        let out = f(self);
        let open = self.open.pop().expect("scope stack");
        self.path.pop();
        let inner = self.clocks.pop().expect("scope clock");
        self.clocks.last_mut().expect("root clock").append(&inner);
        let c = self.counters;
        let rec = &mut self.scopes[open.slot];
        rec.online_bytes = c.online_bytes - open.start.online_bytes;
        rec.online_bits = c.online_bits - open.start.online_bits;
        rec.offline_bytes = c.offline_bytes - open.start.offline_bytes;
        rec.offline_bits = c.offline_bits - open.start.offline_bits;
        rec.rounds = inner.rounds();
        rec.millis = open.at.elapsed().as_secs_f64() * 1e3;
        out
    }

    fn report(self, elapsed: Duration) -> (PartyReport, Box<dyn Transport>) {
        let report = PartyReport {
            party: self.id,
            online_bytes: self.counters.online_bytes,
            online_bits: self.counters.online_bits,
            offline_bytes: self.counters.offline_bytes,
            offline_bits: self.counters.offline_bits,
            messages: self.counters.messages,
            rounds: self.clocks[0].rounds(),
            opened: self.opened,
            transcript: hex(&self.transcript.finalize()),
            scopes: self.scopes,
            millis: elapsed.as_secs_f64() * 1e3,
        };
        (report, self.transport)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one party measured during a session.
#[derive(Clone, Debug)]
pub struct PartyReport {
    pub party: PartyId,
    pub online_bytes: u64,
    pub online_bits: u64,
    pub offline_bytes: u64,
    pub offline_bits: u64,
    pub messages: u64,
    pub rounds: u32,
    pub opened: u64,
    pub transcript: String,
    pub scopes: Vec<ScopeRecord>,
    pub millis: f64,
}

/// A scope merged across the three parties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub protocol: String,
    pub depth: usize,
    pub online_bytes: u64,
    pub online_bits: u64,
    pub offline_bytes: u64,
    pub offline_bits: u64,
    pub rounds: u32,
    pub millis: f64,
    pub sim_millis: f64,
}

/// Line record `{protocol, phase, bytes, rounds, millis}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub protocol: String,
    pub phase: Phase,
    pub bytes: u64,
    pub rounds: u32,
    pub millis: f64,
}

#[derive(Clone, Debug)]
pub struct SessionMetrics {
    pub parties: [PartyReport; 3],
    pub scopes: Vec<ProtocolMetrics>,
    pub net: NetModel,
}

impl SessionMetrics {
    fn merge(parties: [PartyReport; 3], net: NetModel) -> Result<Self> {
        let n = parties[0].scopes.len();
        if parties.iter().any(|p| p.scopes.len() != n) {
            return Err(Error::Protocol("parties ran different scope sequences".into()));
        }
        let mut scopes = Vec::with_capacity(n);
        for i in 0..n {
            let recs: Vec<&ScopeRecord> = parties.iter().map(|p| &p.scopes[i]).collect();
            if recs.iter().any(|r| r.protocol != recs[0].protocol) {
                return Err(Error::Protocol(format!("scope mismatch at {}", recs[0].protocol)));
            }
            let rounds = recs.iter().map(|r| r.rounds).max().unwrap_or(0);
            let online_bytes = recs.iter().map(|r| r.online_bytes).sum();
            let millis = recs.iter().map(|r| r.millis).fold(0.0, f64::max);
            scopes.push(ProtocolMetrics {
                protocol: recs[0].protocol.clone(),
                depth: recs[0].depth,
                online_bytes,
                online_bits: recs.iter().map(|r| r.online_bits).sum(),
                offline_bytes: recs.iter().map(|r| r.offline_bytes).sum(),
                offline_bits: recs.iter().map(|r| r.offline_bits).sum(),
                rounds,
                millis,
                sim_millis: net.simulated_ms(millis, rounds as u64, online_bytes),
            });
        }
        Ok(SessionMetrics { parties, scopes, net })
    }

    pub fn online_bytes(&self) -> u64 {
        self.parties.iter().map(|p| p.online_bytes).sum()
    }

    pub fn online_bits(&self) -> u64 {
        self.parties.iter().map(|p| p.online_bits).sum()
    }

    pub fn offline_bytes(&self) -> u64 {
        self.parties.iter().map(|p| p.offline_bytes).sum()
    }

    pub fn offline_bits(&self) -> u64 {
        self.parties.iter().map(|p| p.offline_bits).sum()
    }

    /// Offline traffic excluding the one-off PRF key exchange.
    pub fn dealt_bytes(&self) -> u64 {
        self.offline_bytes() - self.scope("setup").map_or(0, |s| s.offline_bytes)
    }

    pub fn rounds(&self) -> u32 {
        self.parties.iter().map(|p| p.rounds).max().unwrap_or(0)
    }

    pub fn millis(&self) -> f64 {
        self.parties.iter().map(|p| p.millis).fold(0.0, f64::max)
    }

    pub fn sim_millis(&self) -> f64 {
        self.net
            .simulated_ms(self.millis(), self.rounds() as u64, self.online_bytes())
    }

    pub fn opened(&self) -> [u64; 3] {
        self.parties.each_ref().map(|p| p.opened)
    }

    pub fn transcripts(&self) -> [&str; 3] {
        self.parties.each_ref().map(|p| p.transcript.as_str())
    }

    /// First merged scope with exactly this path.
    pub fn scope(&self, protocol: &str) -> Option<&ProtocolMetrics> {
        self.scopes.iter().find(|s| s.protocol == protocol)
    }

    /// All merged scopes with this path, in execution order.
    pub fn scopes_named<'a>(&'a self, protocol: &'a str) -> impl Iterator<Item = &'a ProtocolMetrics> + 'a {
        self.scopes.iter().filter(move |s| s.protocol == protocol)
    }

    /// Two records (online and offline) per scope.
    pub fn records(&self) -> Vec<MetricRecord> {
        self.scopes
            .iter()
            .flat_map(|s| {
                [
                    MetricRecord {
                        protocol: s.protocol.clone(),
                        phase: Phase::Online,
                        bytes: s.online_bytes,
                        rounds: s.rounds,
                        millis: s.sim_millis,
                    },
                    MetricRecord {
                        protocol: s.protocol.clone(),
                        phase: Phase::Offline,
                        bytes: s.offline_bytes,
                        rounds: 0,
                        millis: 0.0,
                    },
                ]
            })
            .collect()
    }

    pub fn records_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("metric record serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub struct SessionOutput<T> {
    pub outputs: [T; 3],
    pub metrics: SessionMetrics,
}

/// A party's output, report and still-open transport.
type PartyRun<T> = (T, PartyReport, Box<dyn Transport>);

/// Runs one program at all three parties and collects their outputs and
/// merged metrics. In TCP mode the three parties still run in this process,
/// but talk over loopback sockets.
pub fn run_session<T, F>(cfg: &SessionConfig, program: F) -> Result<SessionOutput<T>>
where
    T: Send,
    F: Fn(&mut Ctx) -> Result<T> + Sync,
{
    // Links of finished parties stay open until everyone is done, so a peer
    // waiting on a message that never comes times out rather than seeing a
    // closed channel.
    let results: Vec<Result<PartyRun<T>>> = thread::scope(|s| {
        let program = &program;
        let handles: Vec<_> = match &cfg.topology {
            Topology::InProcess => channel_mesh(cfg.recv_timeout)
                .into_iter()
                .map(|t| {
                    let id = t.me;
                    s.spawn(move || run_with(Box::new(t), id, cfg, program))
                })
                .collect(),
            Topology::Tcp { addrs } => PartyId::ALL
                .into_iter()
                .map(|id| {
                    s.spawn(move || {
                        let t = TcpTransport::connect(id, addrs, cfg.recv_timeout)?;
                        run_with(Box::new(t), id, cfg, program)
                    })
                })
                .collect(),
        };
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Protocol("party thread panicked".into())))
            })
            .collect()
    });
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((t, rep, _links)) => {
                outputs.push(t);
                reports.push(rep);
            }
            Err(e) => errors.push((PartyId::ALL[i], e)),
        }
    }
    if !errors.is_empty() {
        // A failing party closes its links, so peers report closed channels;
        // surface the root cause first.
        errors.sort_by_key(|(_, e)| matches!(e, Error::Session { .. } | Error::Deadlock { .. }));
        return Err(errors.swap_remove(0).1);
    }
    let reports: [PartyReport; 3] = reports.try_into().unwrap_or_else(|_| unreachable!("three reports"));
    let metrics = SessionMetrics::merge(reports, cfg.net)?;
    Ok(SessionOutput {
        outputs: outputs.try_into().unwrap_or_else(|_| unreachable!("three outputs")),
        metrics,
    })
}

fn run_with<T, F>(
    transport: Box<dyn Transport>,
    id: PartyId,
    cfg: &SessionConfig,
    program: &F,
) -> Result<(T, PartyReport, Box<dyn Transport>)>
where
    F: Fn(&mut Ctx) -> Result<T>,
{
    let start = Instant::now();
    let mut ctx = Ctx::new(id, transport, cfg.seed, cfg.codec)?;
    let out = program(&mut ctx)?;
    let (report, links) = ctx.report(start.elapsed());
    Ok((out, report, links))
}

/// Runs a single party over TCP, for deployments with one process per server.
pub fn run_party<T, F>(cfg: &SessionConfig, id: PartyId, program: F) -> Result<(T, PartyReport)>
where
    F: Fn(&mut Ctx) -> Result<T>,
{
    let Topology::Tcp { addrs } = &cfg.topology else {
        return Err(Error::Config("run_party needs a TCP topology".into()));
    };
    let t = TcpTransport::connect(id, addrs, cfg.recv_timeout)?;
    run_with(Box::new(t), id, cfg, &program).map(|(out, report, _)| (out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo(ctx: &mut Ctx) -> Result<Option<RingElem>> {
        ctx.scoped("echo", |ctx| match ctx.id() {
            PartyId::P1 => ctx
                .send_words(PartyId::P2, Phase::Online, &[RingElem(42)])
                .map(|_| None),
            PartyId::P2 => Ok(Some(ctx.recv_words(PartyId::P1, Phase::Online, 1)?[0])),
            PartyId::P3 => Ok(None),
        })
    }

    #[test]
    fn echo_costs_eight_bytes_one_round() {
        let out = run_session(&SessionConfig::default(), echo).unwrap();
        assert_eq!(out.outputs[1], Some(RingElem(42)));
        let s = out.metrics.scope("echo").unwrap();
        assert_eq!((s.online_bytes, s.rounds), (8, 1));
        assert_eq!(out.metrics.online_bytes(), 8);
    }

    #[test]
    fn empty_program_costs_nothing_online() {
        let out = run_session(&SessionConfig::default(), |ctx| ctx.scoped("empty", |_| Ok(()))).unwrap();
        let s = out.metrics.scope("empty").unwrap();
        assert_eq!((s.online_bytes, s.rounds), (0, 0));
        assert_eq!(out.metrics.online_bytes(), 0);
        // Only the key exchange travels offline.
        assert_eq!(out.metrics.offline_bytes(), 48);
    }

    #[test]
    fn messages_arrive_in_order_bit_exact() {
        let out = run_session(&SessionConfig::default(), |ctx| match ctx.id() {
            PartyId::P1 => {
                ctx.send_words(PartyId::P3, Phase::Online, &[RingElem(u64::MAX)])?;
                ctx.send_words(PartyId::P3, Phase::Online, &[RingElem(7), RingElem(8)])?;
                Ok(vec![])
            }
            PartyId::P3 => {
                let mut a = ctx.recv_words(PartyId::P1, Phase::Online, 1)?;
                a.extend(ctx.recv_words(PartyId::P1, Phase::Online, 2)?);
                Ok(a)
            }
            PartyId::P2 => Ok(vec![]),
        })
        .unwrap();
        assert_eq!(out.outputs[2], vec![RingElem(u64::MAX), RingElem(7), RingElem(8)]);
    }

    #[test]
    fn silent_peer_times_out() {
        let cfg = SessionConfig {
            recv_timeout: Duration::from_millis(200),
            ..Default::default()
        };
        let r = run_session(&cfg, |ctx| {
            if ctx.id() == PartyId::P2 {
                ctx.recv_words(PartyId::P1, Phase::Online, 1)?;
            }
            Ok(())
        });
        assert!(matches!(r, Err(Error::Deadlock { .. })));
    }

    #[test]
    fn wrong_length_is_a_session_error() {
        let r = run_session(&SessionConfig::default(), |ctx| {
            match ctx.id() {
                PartyId::P1 => ctx.send_words(PartyId::P2, Phase::Online, &[RingElem(1), RingElem(2)])?,
                PartyId::P2 => {
                    ctx.recv_words(PartyId::P1, Phase::Online, 3)?;
                }
                PartyId::P3 => {}
            }
            Ok(())
        });
        match r {
            Err(Error::Session { party, index, .. }) => {
                assert_eq!(party, PartyId::P1);
                assert_eq!(index, 2);
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("length mismatch accepted"),
        }
    }

    #[test]
    fn round_counting_patterns() {
        let out = run_session(&SessionConfig::default(), |ctx| {
            let id = ctx.id();
            ctx.scoped("swap", |ctx| {
                if ctx.is_holder() {
                    ctx.exchange_words(&[RingElem(1)])?;
                }
                Ok(())
            })?;
            ctx.scoped("relay", |ctx| {
                match id {
                    PartyId::P1 => ctx.send_words(PartyId::P2, Phase::Online, &[RingElem(1)])?,
                    PartyId::P2 => {
                        let x = ctx.recv_words(PartyId::P1, Phase::Online, 1)?;
                        ctx.send_words(PartyId::P3, Phase::Online, &x)?;
                    }
                    PartyId::P3 => {
                        ctx.recv_words(PartyId::P2, Phase::Online, 1)?;
                    }
                }
                Ok(())
            })?;
            ctx.scoped("ping_pong", |ctx| {
                match id {
                    PartyId::P1 => {
                        ctx.send_words(PartyId::P2, Phase::Online, &[RingElem(1)])?;
                        ctx.recv_words(PartyId::P2, Phase::Online, 1)?;
                    }
                    PartyId::P2 => {
                        let x = ctx.recv_words(PartyId::P1, Phase::Online, 1)?;
                        ctx.send_words(PartyId::P1, Phase::Online, &x)?;
                    }
                    PartyId::P3 => {}
                }
                Ok(())
            })
        })
        .unwrap();
        let m = &out.metrics;
        assert_eq!(m.scope("swap").unwrap().rounds, 1);
        assert_eq!(m.scope("relay").unwrap().rounds, 1);
        assert_eq!(m.scope("ping_pong").unwrap().rounds, 2);
        // P1 never waits on the relay, so the session critical path is 1 + 2.
        assert_eq!(m.rounds(), 3);
    }

    #[test]
    fn offline_frames_do_not_advance_rounds() {
        let out = run_session(&SessionConfig::default(), |ctx| {
            ctx.scoped("deal", |ctx| {
                match ctx.id() {
                    PartyId::P3 => ctx.send_words(PartyId::P1, Phase::Offline, &[RingElem(3); 4])?,
                    PartyId::P1 => {
                        ctx.recv_words(PartyId::P3, Phase::Offline, 4)?;
                    }
                    PartyId::P2 => {}
                }
                Ok(())
            })
        })
        .unwrap();
        let s = out.metrics.scope("deal").unwrap();
        assert_eq!(
            (s.rounds, s.online_bytes, s.offline_bytes, s.offline_bits),
            (0, 0, 32, 256)
        );
    }

    #[test]
    fn transcripts_are_deterministic() {
        let run = || run_session(&SessionConfig::with_seed(5), echo).unwrap().metrics;
        let (a, b) = (run(), run());
        assert_eq!(a.transcripts(), b.transcripts());
        let c = run_session(&SessionConfig::with_seed(6), echo).unwrap().metrics;
        assert_ne!(a.transcripts(), c.transcripts());
    }

    #[test]
    fn key_ring_shares_keys_with_neighbours() {
        let out = run_session(&SessionConfig::with_seed(3), |ctx| Ok(*ctx.keys())).unwrap();
        let [k1, k2, k3] = out.outputs;
        assert_eq!(k2.prev, k1.own);
        assert_eq!(k3.prev, k2.own);
        assert_eq!(k1.prev, k3.own);
    }

    #[test]
    fn simulated_time_model() {
        let net = NetModel::default();
        let ms = net.simulated_ms(1.0, 10, 625_000);
        assert!((ms - (1.0 + 2.2 + 1.0)).abs() < 1e-9);
    }
}
