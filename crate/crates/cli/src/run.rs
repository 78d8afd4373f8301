use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sgnn::graphstore::{
    encrypt_graph, load_canonical, load_content_cites, pad, save_canonical, synthetic, Dataset, GraphShare,
    GraphSummary, PlainGraph, SyntheticSpec,
};
use sgnn::net::{run_party, NetModel, SessionConfig, Topology};
use sgnn::oracle::{self, PlainModel};
use sgnn::prims::ApproxConfig;
use sgnn::sgcn::{
    infer_session, load_offline, prepare as sec_prepare, sec_infer, sec_train, train_session_with, ModelState,
    TrainConfig,
};
use sgnn::shares::{Dealer, OfflineMaterial};
use sgnn::{FixedCodec, PartyId, RingElem};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult, DealArgs, FixturesArgs, InferArgs, Mode, PrepareArgs, SessionArgs, TrainArgs};

/// Public parameters written next to the share files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PublicInfo {
    pub dataset: String,
    pub summary: GraphSummary,
    pub frac_bits: u32,
    /// 0-based labeled node indices.
    pub labeled: Vec<usize>,
    pub dropped_edges: usize,
}

/// Everything needed to replay a run in in-process mode.
#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    engine_version: &'static str,
    command: &'static str,
    args: Vec<String>,
    seeds: BTreeMap<&'static str, u64>,
    config_hash: String,
    config: &'a C,
}

pub fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &'static str,
    config: &C,
    seeds: &[(&'static str, u64)],
) -> CliResult<()> {
    write_manifest_as(&dir.join("manifest.json"), command, config, seeds)
}

pub fn write_manifest_as<C: Serialize>(
    path: &Path,
    command: &'static str,
    config: &C,
    seeds: &[(&'static str, u64)],
) -> CliResult<()> {
    let bytes = serde_json::to_vec(config).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let hash: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        engine_version: sgnn_version(),
        command,
        args: std::env::args().skip(1).collect(),
        seeds: seeds.iter().copied().collect(),
        config_hash: hash,
        config,
    };
    write_json(path, &manifest)
}

fn sgnn_version() -> &'static str {
    // The engine is versioned in lockstep with the CLI.
    env!("CARGO_PKG_VERSION")
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::File {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let file = File::create(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(w).and_then(|_| w.flush()).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut text = String::new();
    for item in items {
        let line = serde_json::to_string(&item).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = File::open(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn share_path(dir: &Path, id: PartyId) -> PathBuf {
    dir.join(format!("p{}.share", id.index()))
}

fn model_path(dir: &Path, id: PartyId) -> PathBuf {
    dir.join(format!("p{}.model", id.index()))
}

fn offline_path(dir: &Path, id: PartyId) -> PathBuf {
    dir.join(format!("p{}.offline", id.index()))
}

pub fn session_config(s: &SessionArgs) -> CliResult<SessionConfig> {
    let topology = match s.mode {
        Mode::Inprocess => Topology::InProcess,
        Mode::Tcp => Topology::Tcp { addrs: tcp_addrs(s)?.1 },
    };
    Ok(SessionConfig {
        topology,
        seed: s.seed,
        codec: FixedCodec::new(s.frac_bits),
        net: NetModel {
            latency_ms: s.latency_ms,
            bandwidth_bytes_per_s: s.bandwidth_bytes_per_s,
        },
        recv_timeout: Duration::from_secs(s.timeout_secs),
    })
}

fn tcp_addrs(s: &SessionArgs) -> CliResult<(PartyId, [std::net::SocketAddr; 3])> {
    let (Some(party), Some(listen)) = (s.party, s.listen) else {
        return Err(CliError::Usage("tcp mode needs --party and --listen".into()));
    };
    if s.connect.len() != 2 {
        return Err(CliError::Usage(
            "tcp mode needs --connect for the two other parties".into(),
        ));
    }
    let me = PartyId::from_index(party as usize).expect("party flag is range checked");
    let mut others = s.connect.iter();
    let addrs = PartyId::ALL.map(|p| {
        if p == me {
            listen
        } else {
            *others.next().expect("two peers")
        }
    });
    Ok((me, addrs))
}

fn load_public(dir: &Path, codec: &FixedCodec) -> CliResult<PublicInfo> {
    let public: PublicInfo = read_json(&dir.join("public.json"))?;
    if public.frac_bits != codec.frac_bits {
        return Err(CliError::Usage(format!(
            "shares use {} fractional bits but the session uses {}",
            public.frac_bits, codec.frac_bits
        )));
    }
    Ok(public)
}

fn load_graph_share(dir: &Path, public: &PublicInfo, id: PartyId) -> CliResult<GraphShare> {
    Ok(match id {
        PartyId::P3 => GraphShare::public_only(public.summary, public.frac_bits, public.labeled.clone()),
        _ => GraphShare::load(&share_path(dir, id))?,
    })
}

fn load_offline_pair(dir: Option<&Path>) -> CliResult<Option<[OfflineMaterial; 2]>> {
    let Some(dir) = dir else { return Ok(None) };
    let read = |id| -> CliResult<OfflineMaterial> {
        let path = offline_path(dir, id);
        let file = File::open(&path).map_err(|source| CliError::File { path, source })?;
        Ok(OfflineMaterial::read_from(BufReader::new(file))?)
    };
    Ok(Some([read(PartyId::P1)?, read(PartyId::P2)?]))
}

/// Seeded initial weights, identical at every party.
pub fn initial_model(summary: &GraphSummary, hidden: usize, seed: u64) -> PlainModel {
    PlainModel::init(summary.features, hidden, summary.classes, seed)
}

fn model_shares(
    model_dir: Option<&Path>,
    summary: &GraphSummary,
    hidden: usize,
    codec: FixedCodec,
    seed: u64,
) -> CliResult<[ModelState; 2]> {
    match model_dir {
        Some(dir) => Ok([
            ModelState::load(&model_path(dir, PartyId::P1))?,
            ModelState::load(&model_path(dir, PartyId::P2))?,
        ]),
        None => Ok(ModelState::share(
            &initial_model(summary, hidden, seed),
            codec,
            seed.wrapping_add(1),
        )?),
    }
}

fn load_dataset(a: &PrepareArgs) -> CliResult<PlainGraph> {
    let mut g = match a.dataset.as_str() {
        "toy" => return Ok(oracle::toy_fixture().graph),
        "synthetic" => {
            return Ok(synthetic(&SyntheticSpec {
                nodes: a.nodes,
                features: a.features,
                classes: a.classes,
                avg_degree: a.avg_degree,
                homophily: a.homophily,
                labeled_per_class: a.labeled_per_class,
                weighted: a.weighted,
                seed: a.seed,
            }))
        }
        name => match Dataset::parse(name) {
            Some(d) => {
                let dir = a
                    .data_dir
                    .as_deref()
                    .ok_or_else(|| CliError::Usage(format!("dataset {name} needs --data-dir or SGNN_DATA_DIR")))?;
                d.load(dir)?
            }
            None => load_content_cites(
                Path::new(&format!("{name}.content")),
                Path::new(&format!("{name}.cites")),
            )?,
        },
    };
    g.select_labeled(a.labeled_per_class, a.seed);
    Ok(g)
}

pub fn prepare(a: &PrepareArgs) -> CliResult<()> {
    let g = load_dataset(a)?;
    g.validate()?;
    let codec = FixedCodec::new(a.frac_bits);
    let shares = encrypt_graph(&g, &pad(&g), codec, a.seed)?;
    create_dir(&a.out)?;
    save_canonical(&g, &a.out.join("graph.sgrf"))?;
    for (share, id) in shares.iter().zip([PartyId::P1, PartyId::P2]) {
        share.save(&share_path(&a.out, id))?;
    }
    let public = PublicInfo {
        dataset: a.dataset.clone(),
        summary: g.summary(),
        frac_bits: a.frac_bits,
        labeled: g.labeled.clone(),
        dropped_edges: g.dropped_edges,
    };
    write_json(&a.out.join("public.json"), &public)?;
    write_manifest(&a.out, "prepare", a, &[("share", a.seed), ("labeled", a.seed)])?;
    println!(
        "{}",
        serde_json::json!({
            "dataset": a.dataset,
            "nodes": public.summary.nodes,
            "features": public.summary.features,
            "classes": public.summary.classes,
            "d_max": public.summary.d_max,
            "edges": g.edge_count(),
            "labeled": public.labeled.len(),
            "dropped_edges": g.dropped_edges,
        })
    );
    Ok(())
}

pub fn deal(a: &DealArgs) -> CliResult<()> {
    let mut dealer = Dealer::new(a.seed);
    let [a1, a2] = dealer.arith(a.arith);
    let [b1, b2] = dealer.binary(a.binary);
    create_dir(&a.out)?;
    for (material, id) in [
        OfflineMaterial { arith: a1, binary: b1 },
        OfflineMaterial { arith: a2, binary: b2 },
    ]
    .iter()
    .zip([PartyId::P1, PartyId::P2])
    {
        let path = offline_path(&a.out, id);
        let file = File::create(&path).map_err(|source| CliError::File { path, source })?;
        let mut w = BufWriter::new(file);
        material.write_to(&mut w)?;
        w.flush().map_err(|source| CliError::File {
            path: offline_path(&a.out, id),
            source,
        })?;
    }
    write_manifest(&a.out, "deal", a, &[("dealer", a.seed)])?;
    println!("{}", serde_json::json!({ "arith": a.arith, "binary": a.binary }));
    Ok(())
}

/// Public shape of a trained model, enough for P3 to size its placeholders.
#[derive(Serialize, Deserialize)]
struct ModelShape {
    features: usize,
    hidden: usize,
    classes: usize,
}

#[derive(Serialize)]
struct TrainReport {
    epochs: usize,
    halted: bool,
    flags: Vec<bool>,
    losses: Vec<f64>,
    online_bytes: u64,
    offline_bytes: u64,
    rounds: u32,
    opened: [u64; 3],
    millis: f64,
    sim_millis: f64,
    anomalies: Vec<String>,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    train: &'a TrainConfig,
    session: &'a SessionArgs,
    shares: &'a Path,
    model: Option<&'a Path>,
    offline: Option<&'a Path>,
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.config();
    cfg.validate()?;
    let session = session_config(&a.session)?;
    let public = load_public(&a.shares, &session.codec)?;
    let offline = load_offline_pair(a.offline.as_deref())?;
    create_dir(&a.out)?;
    let shape = ModelShape {
        features: public.summary.features,
        hidden: cfg.hidden,
        classes: public.summary.classes,
    };
    write_json(&a.out.join("model.json"), &shape)?;
    let run_cfg = RunConfig {
        train: &cfg,
        session: &a.session,
        shares: &a.shares,
        model: a.model.as_deref(),
        offline: a.offline.as_deref(),
    };
    let seeds = [("session", a.session.seed), ("model", a.session.seed)];
    if a.session.mode == Mode::Tcp {
        return train_party(a, &cfg, &session, &public, offline, &run_cfg, &seeds);
    }
    let model = model_shares(
        a.model.as_deref(),
        &public.summary,
        cfg.hidden,
        session.codec,
        a.session.seed,
    )?;
    let shares = [
        GraphShare::load(&share_path(&a.shares, PartyId::P1))?,
        GraphShare::load(&share_path(&a.shares, PartyId::P2))?,
    ];
    let out = train_session_with(&session, &shares, &model, &cfg, offline.as_ref())?;
    for (m, id) in out.model_shares.iter().zip([PartyId::P1, PartyId::P2]) {
        m.save(&model_path(&a.out, id))?;
    }
    write_lines(&a.out.join("epochs.jsonl"), &out.records)?;
    write_text(&a.out.join("metrics.jsonl"), &out.metrics.records_jsonl())?;
    let report = TrainReport {
        epochs: out.epochs,
        halted: out.halted,
        flags: out.flags,
        losses: out.losses,
        online_bytes: out.metrics.online_bytes(),
        offline_bytes: out.metrics.offline_bytes(),
        rounds: out.metrics.rounds(),
        opened: out.metrics.opened(),
        millis: out.millis,
        sim_millis: out.metrics.sim_millis(),
        anomalies: out.anomalies,
    };
    for note in &report.anomalies {
        eprintln!("warning: reconstruction anomaly, likely a truncation wrap: {note}");
    }
    write_json(&a.out.join("report.json"), &report)?;
    write_manifest(&a.out, "train", &run_cfg, &seeds)?;
    println!(
        "{}",
        serde_json::json!({ "epochs": report.epochs, "halted": report.halted, "online_bytes": report.online_bytes, "rounds": report.rounds })
    );
    Ok(())
}

#[derive(Serialize)]
struct PartySummary {
    party: usize,
    epochs: Option<usize>,
    halted: Option<bool>,
    flags: Vec<bool>,
    /// This party's loss share per epoch (debug mode), as raw ring words.
    loss_shares: Vec<u64>,
    online_bytes: u64,
    offline_bytes: u64,
    rounds: u32,
    opened: u64,
    transcript: String,
    millis: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_party(
    a: &TrainArgs,
    cfg: &TrainConfig,
    session: &SessionConfig,
    public: &PublicInfo,
    offline: Option<[OfflineMaterial; 2]>,
    run_cfg: &RunConfig,
    seeds: &[(&'static str, u64)],
) -> CliResult<()> {
    let (me, _) = tcp_addrs(&a.session)?;
    let share = load_graph_share(&a.shares, public, me)?;
    let mine = match (me, a.model.as_deref()) {
        (PartyId::P3, _) => ModelState::zeros(public.summary.features, cfg.hidden, public.summary.classes),
        (holder, Some(dir)) => ModelState::load(&model_path(dir, holder))?,
        (holder, None) => {
            let [m1, m2] = model_shares(None, &public.summary, cfg.hidden, session.codec, a.session.seed)?;
            if holder == PartyId::P1 {
                m1
            } else {
                m2
            }
        }
    };
    let (out, report) = run_party(session, me, |ctx| {
        load_offline(ctx, offline.as_ref());
        let g = sec_prepare(ctx, share.clone(), &cfg.approx)?;
        sec_train(ctx, &g, mine.clone(), cfg)
    })?;
    if me != PartyId::P3 {
        out.model.save(&model_path(&a.out, me))?;
    }
    let summary = PartySummary {
        party: me.index(),
        epochs: Some(out.epochs),
        halted: Some(out.halted),
        flags: out.flags,
        loss_shares: out.loss_shares.iter().map(|x| x.0).collect(),
        online_bytes: report.online_bytes,
        offline_bytes: report.offline_bytes,
        rounds: report.rounds,
        opened: report.opened,
        transcript: report.transcript,
        millis: report.millis,
    };
    write_json(&a.out.join(format!("p{}-report.json", me.index())), &summary)?;
    write_manifest_as(
        &a.out.join(format!("p{}-manifest.json", me.index())),
        "train",
        run_cfg,
        seeds,
    )?;
    println!(
        "{}",
        serde_json::json!({ "party": me.index(), "epochs": summary.epochs, "halted": summary.halted })
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    node: usize,
    probs: Vec<f64>,
    argmax: usize,
    label: Option<usize>,
}

#[derive(Serialize)]
struct InferConfig<'a> {
    approx: ApproxConfig,
    session: &'a SessionArgs,
    shares: &'a Path,
    model: &'a Path,
    nodes: Vec<usize>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let approx = a.approx.config();
    approx.validate()?;
    let session = session_config(&a.session)?;
    let public = load_public(&a.shares, &session.codec)?;
    let n = public.summary.nodes;
    let nodes: Vec<usize> = if a.all {
        (0..n).collect()
    } else {
        if a.nodes.is_empty() {
            return Err(CliError::Usage("pass --nodes or --all".into()));
        }
        a.nodes
            .iter()
            .map(|&id| {
                if id == 0 || id > n {
                    Err(sgnn::Error::UnknownNode(id))
                } else {
                    Ok(id - 1)
                }
            })
            .collect::<Result<_, _>>()?
    };
    create_dir(&a.out)?;
    let run_cfg = InferConfig {
        approx,
        session: &a.session,
        shares: &a.shares,
        model: &a.model,
        nodes: nodes.iter().map(|v| v + 1).collect(),
    };
    let seeds = [("session", a.session.seed)];
    if a.session.mode == Mode::Tcp {
        let (me, _) = tcp_addrs(&a.session)?;
        let share = load_graph_share(&a.shares, &public, me)?;
        let mine = match me {
            PartyId::P3 => {
                let shape: ModelShape = read_json(&a.model.join("model.json"))?;
                ModelState::zeros(shape.features, shape.hidden, shape.classes)
            }
            holder => ModelState::load(&model_path(&a.model, holder))?,
        };
        let (z, report) = run_party(&session, me, |ctx| {
            let g = sec_prepare(ctx, share.clone(), &approx)?;
            sec_infer(ctx, &g, &mine, &nodes, &approx)
        })?;
        let words: Vec<u64> = z.iter().map(|x: &RingElem| x.0).collect();
        write_json(
            &a.out.join(format!("p{}-z.json", me.index())),
            &serde_json::json!({ "party": me.index(), "nodes": run_cfg.nodes, "z_share": words, "online_bytes": report.online_bytes, "rounds": report.rounds }),
        )?;
        return write_manifest_as(
            &a.out.join(format!("p{}-manifest.json", me.index())),
            "infer",
            &run_cfg,
            &seeds,
        );
    }
    let model = [
        ModelState::load(&model_path(&a.model, PartyId::P1))?,
        ModelState::load(&model_path(&a.model, PartyId::P2))?,
    ];
    let shares = [
        GraphShare::load(&share_path(&a.shares, PartyId::P1))?,
        GraphShare::load(&share_path(&a.shares, PartyId::P2))?,
    ];
    let out = infer_session(&session, &shares, &model, &nodes, &approx)?;
    let truth = a.shares.join("graph.sgrf");
    let labels = truth
        .exists()
        .then(|| load_canonical(&truth))
        .transpose()?
        .map(|g| g.labels);
    let c = public.summary.classes;
    let preds: Vec<Prediction> = nodes
        .iter()
        .zip(out.z.chunks(c))
        .map(|(&v, row)| Prediction {
            node: v + 1,
            probs: row.to_vec(),
            argmax: argmax(row),
            label: labels.as_ref().map(|l| l[v]),
        })
        .collect();
    let unlabeled: Vec<&Prediction> = preds
        .iter()
        .filter(|p| !public.labeled.contains(&(p.node - 1)))
        .collect();
    let correct = unlabeled.iter().filter(|p| p.label == Some(p.argmax)).count();
    write_lines(&a.out.join("predictions.jsonl"), &preds)?;
    write_text(&a.out.join("metrics.jsonl"), &out.metrics.records_jsonl())?;
    write_manifest(&a.out, "infer", &run_cfg, &seeds)?;
    println!(
        "{}",
        serde_json::json!({
            "queried": preds.len(),
            "top1_unlabeled": labels.is_some().then(|| correct as f64 / unlabeled.len().max(1) as f64),
            "online_bytes": out.metrics.online_bytes(),
            "rounds": out.metrics.rounds(),
        })
    );
    Ok(())
}

pub fn fixtures(a: &FixturesArgs) -> CliResult<()> {
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &oracle::fixtures())
}
