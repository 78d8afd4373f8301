use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sgnn::net::run_session;
use sgnn::prims::{self, SharedMatrix};
use sgnn::sgcn::load_offline;
use sgnn::shares::{OfflineMaterial, PackedBits};
use sgnn::{Ctx, PartyId, RingElem};

use crate::run::{create_dir, session_config, write_lines, write_manifest};
use crate::{ApproxArgs, CliError, CliResult, Mode, SessionArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Mul,
    Matmul,
    And,
    Msb,
    Relu,
    Drelu,
    Max,
    Access,
    Exp,
    Reciprocal,
    InvSqrt,
    Ln,
    Softmax,
    All,
}

const EACH: [Primitive; 13] = [
    Primitive::Mul,
    Primitive::Matmul,
    Primitive::And,
    Primitive::Msb,
    Primitive::Relu,
    Primitive::Drelu,
    Primitive::Max,
    Primitive::Access,
    Primitive::Exp,
    Primitive::Reciprocal,
    Primitive::InvSqrt,
    Primitive::Ln,
    Primitive::Softmax,
];

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Primitive::All)]
    pub primitive: Primitive,
    /// Ring bit width; the engine works over 64-bit words only.
    #[arg(long, default_value_t = 64)]
    pub k: u32,
    /// Rows of the array for `access`.
    #[arg(long, default_value_t = 1000)]
    pub m: usize,
    /// Row width for `access`, `max` and `softmax`; side length for `matmul`.
    #[arg(long, default_value_t = 1)]
    pub width: usize,
    /// Elements (or rows, or queries) per invocation batch.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Also write the table as line-delimited records here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output directory of `deal`; holders then consume these triples.
    #[arg(long)]
    pub offline: Option<PathBuf>,
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub approx: ApproxArgs,
}

/// One row of the cost table, per batch of `count` operations.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub primitive: String,
    pub count: usize,
    pub online_bits: u64,
    pub online_bytes: u64,
    pub offline_bits: u64,
    pub rounds: u32,
    pub online_bits_per_op: f64,
    pub offline_bits_per_op: f64,
    pub millis: f64,
    pub sim_millis: f64,
    /// Published figure for comparison, if any.
    pub reference: Option<String>,
}

fn reference(p: &str, m: usize, width: usize) -> Option<String> {
    match p {
        "msb" => Some("6 rounds, 732 online bits, 1026 offline bits".into()),
        "access" => Some(format!("1 round, {} elements", 2 * m * width + 2)),
        "mul" => Some("1 round, 4 elements".into()),
        _ => None,
    }
}

/// Shares of public bench inputs: both holders derive the same mask stream.
fn holder_shares(ctx: &Ctx, values: &[f64], seed: u64) -> sgnn::Result<Vec<RingElem>> {
    let enc = ctx.codec.encode_all(values)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(enc
        .into_iter()
        .map(|x| {
            let r = RingElem(rng.gen());
            match ctx.id() {
                PartyId::P1 => x - r,
                PartyId::P2 => r,
                PartyId::P3 => RingElem::ZERO,
            }
        })
        .collect())
}

fn inputs(p: Primitive, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let range = match p {
        Primitive::Reciprocal => 0.5..100.0,
        Primitive::InvSqrt => 1.0..400.0,
        Primitive::Ln => 0.05..2.0,
        Primitive::Exp => -10.0..5.0,
        _ => -4.0..4.0,
    };
    (0..n).map(|_| rng.gen_range(range.clone())).collect()
}

fn run_one(a: &BenchArgs, p: Primitive, offline: Option<&[OfflineMaterial; 2]>) -> CliResult<Vec<BenchRow>> {
    let session = session_config(&a.session)?;
    let cfg = a.approx.config();
    let (n, w, m) = (a.count, a.width, a.m);
    let seed = a.session.seed;
    let out = run_session(&session, |ctx| {
        load_offline(ctx, offline);
        match p {
            Primitive::Mul => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                let y = holder_shares(ctx, &inputs(p, n, seed + 1), seed + 1)?;
                prims::mul(ctx, &x, &y)?;
            }
            Primitive::Matmul => {
                let x = holder_shares(ctx, &inputs(p, w * w, seed), seed)?;
                let y = holder_shares(ctx, &inputs(p, w * w, seed + 1), seed + 1)?;
                prims::matmul(ctx, &SharedMatrix::new(w, w, x), &SharedMatrix::new(w, w, y))?;
            }
            Primitive::And => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ctx.id().index() as u64);
                let (x, y) = (PackedBits::random(n, &mut rng), PackedBits::random(n, &mut rng));
                ctx.scoped("and", |ctx| prims::and(ctx, &x, &y))?;
            }
            Primitive::Msb => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                prims::msb(ctx, &x)?;
            }
            Primitive::Relu => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                prims::relu(ctx, &x)?;
            }
            Primitive::Drelu => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                prims::drelu(ctx, &x)?;
            }
            Primitive::Max => {
                let x = holder_shares(ctx, &inputs(p, n * w, seed), seed)?;
                prims::max_tree(ctx, &x, n, w)?;
            }
            Primitive::Softmax => {
                let x = holder_shares(ctx, &inputs(p, n * w, seed), seed)?;
                prims::softmax(ctx, &x, n, w, &cfg)?;
            }
            Primitive::Exp => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                prims::exp(ctx, &x, &cfg)?;
            }
            Primitive::Reciprocal => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                prims::reciprocal(ctx, &x, &cfg)?;
            }
            Primitive::InvSqrt => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                prims::inv_sqrt(ctx, &x, &cfg)?;
            }
            Primitive::Ln => {
                let x = holder_shares(ctx, &inputs(p, n, seed), seed)?;
                prims::ln(ctx, &x, &cfg)?;
            }
            Primitive::Access => {
                let array = holder_shares(ctx, &inputs(p, m * w, seed), seed)?;
                let mut rng = ChaCha20Rng::seed_from_u64(seed + 2);
                let idx: Vec<RingElem> = (0..n)
                    .map(|_| {
                        let (s1, s2) = prims::share_index(rng.gen_range(1..=m as u64), m as u64, &mut rng);
                        match ctx.id() {
                            PartyId::P1 => s1,
                            PartyId::P2 => s2,
                            PartyId::P3 => RingElem::ZERO,
                        }
                    })
                    .collect();
                prims::array_access(ctx, &array, w, &idx)?;
            }
            Primitive::All => unreachable!("expanded by the caller"),
        }
        Ok(())
    })?;
    let names: &[&str] = match p {
        Primitive::Access => &["access", "reshare"],
        Primitive::InvSqrt => &["inv_sqrt"],
        Primitive::Max => &["max"],
        _ => &[],
    };
    let own = serde_json::to_value(p)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let names: Vec<String> = if names.is_empty() {
        vec![own]
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };
    names
        .iter()
        .map(|name| {
            let s = out
                .metrics
                .scopes_named(name)
                .min_by_key(|s| s.depth)
                .ok_or_else(|| CliError::Usage(format!("no metered scope named {name}")))?;
            let ops = if p == Primitive::Matmul { 1 } else { n };
            Ok(BenchRow {
                primitive: name.clone(),
                count: n,
                online_bits: s.online_bits,
                online_bytes: s.online_bytes,
                offline_bits: s.offline_bits,
                rounds: s.rounds,
                online_bits_per_op: s.online_bits as f64 / ops as f64,
                offline_bits_per_op: s.offline_bits as f64 / ops as f64,
                millis: s.millis,
                sim_millis: s.sim_millis,
                reference: reference(name, m, w),
            })
        })
        .collect()
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    if a.k != 64 {
        return Err(CliError::Usage(format!(
            "unsupported ring width k={}; the engine uses k=64",
            a.k
        )));
    }
    if a.session.mode == Mode::Tcp && a.session.party.is_some() {
        return Err(CliError::Usage("bench runs all three parties; omit --party".into()));
    }
    if a.count == 0 || a.width == 0 || a.m == 0 {
        return Err(CliError::Usage("count, width and m must be positive".into()));
    }
    a.approx.config().validate()?;
    let offline = match &a.offline {
        Some(dir) => {
            let read = |i: usize| -> CliResult<OfflineMaterial> {
                let path = dir.join(format!("p{i}.offline"));
                let file = std::fs::File::open(&path).map_err(|source| CliError::File { path, source })?;
                Ok(OfflineMaterial::read_from(std::io::BufReader::new(file))?)
            };
            Some([read(1)?, read(2)?])
        }
        None => None,
    };
    let list: Vec<Primitive> = if a.primitive == Primitive::All {
        EACH.to_vec()
    } else {
        vec![a.primitive]
    };
    let mut rows = Vec::new();
    for p in list {
        rows.extend(run_one(a, p, offline.as_ref())?);
    }
    println!(
        "{:<11} {:>6} {:>12} {:>12} {:>12} {:>7} {:>10} {:>10}  reference",
        "primitive", "count", "online_bits", "bits/op", "offline/op", "rounds", "ms", "sim_ms"
    );
    for r in &rows {
        println!(
            "{:<11} {:>6} {:>12} {:>12.1} {:>12.1} {:>7} {:>10.3} {:>10.3}  {}",
            r.primitive,
            r.count,
            r.online_bits,
            r.online_bits_per_op,
            r.offline_bits_per_op,
            r.rounds,
            r.millis,
            r.sim_millis,
            r.reference.as_deref().unwrap_or("")
        );
    }
    if let Some(path) = &a.out {
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        create_dir(dir)?;
        write_lines(path, &rows)?;
        write_manifest(dir, "bench", a, &[("session", a.session.seed)])?;
    }
    Ok(())
}
