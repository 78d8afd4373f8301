//! Graph data model, dataset ingestion, padding to a fixed degree, and the
//! data owner's encryption of a graph into two share files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::PartyId;
use crate::prims::share_index;
use crate::ring::{FixedCodec, RingElem};
use crate::shares::share_vec;

/// A plaintext attributed graph with node IDs `1..=N` (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct PlainGraph {
    /// Original string IDs, in assigned order.
    pub names: Vec<String>,
    pub n_features: usize,
    /// Row-major `N x L`, nonnegative.
    pub features: Vec<f64>,
    pub label_names: Vec<String>,
    /// Class index of every node.
    pub labels: Vec<usize>,
    /// Nodes whose labels are given to training, 0-based and sorted. Public.
    pub labeled: Vec<usize>,
    /// Sorted, symmetric neighbor lists with positive weights; no self loops.
    pub adj: Vec<Vec<(usize, f64)>>,
    /// Citations naming an unknown node, dropped at load time.
    pub dropped_edges: usize,
}

/// `N`, `L`, `C`, `d_max`: the only facts about the graph servers see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub features: usize,
    pub classes: usize,
    pub d_max: usize,
}

impl PlainGraph {
    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn d_max(&self) -> usize {
        self.adj.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            nodes: self.n(),
            features: self.n_features,
            classes: self.n_classes(),
            d_max: self.d_max(),
        }
    }

    pub fn feature_row(&self, v: usize) -> &[f64] {
        &self.features[v * self.n_features..(v + 1) * self.n_features]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Self-weight sum: one for the implicit self loop plus the edge weights.
    pub fn sw(&self) -> Vec<f64> {
        self.adj
            .iter()
            .map(|ns| 1.0 + ns.iter().map(|&(_, w)| w).sum::<f64>())
            .collect()
    }

    /// One-hot rows of the labeled nodes, `|T| x C`.
    pub fn label_matrix(&self) -> Vec<f64> {
        let c = self.n_classes();
        let mut t = vec![0.0; self.labeled.len() * c];
        for (row, &v) in self.labeled.iter().enumerate() {
            t[row * c + self.labels[v]] = 1.0;
        }
        t
    }

    /// Picks up to `per_class` labeled nodes of each class uniformly at random.
    pub fn select_labeled(&mut self, per_class: usize, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut by_class = vec![Vec::new(); self.n_classes()];
        for (v, &y) in self.labels.iter().enumerate() {
            by_class[y].push(v);
        }
        let mut picked: Vec<usize> = by_class
            .iter_mut()
            .flat_map(|vs| {
                vs.shuffle(&mut rng);
                vs.iter().take(per_class).copied().collect::<Vec<_>>()
            })
            .collect();
        picked.sort_unstable();
        self.labeled = picked;
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |r: String| Err(Error::format("<graph>", 0, r));
        if n == 0 {
            return bad("graph has no nodes".into());
        }
        if self.features.len() != n * self.n_features || self.labels.len() != n || self.adj.len() != n {
            return bad("per-node arrays disagree on N".into());
        }
        if self.features.iter().any(|&f| !(f >= 0.0 && f.is_finite())) {
            return bad("features must be finite and nonnegative".into());
        }
        if self.labels.iter().any(|&y| y >= self.n_classes()) {
            return bad("label index out of range".into());
        }
        if self.labeled.windows(2).any(|w| w[0] >= w[1]) || self.labeled.iter().any(|&v| v >= n) {
            return bad("labeled set must be sorted, unique and in range".into());
        }
        for (v, ns) in self.adj.iter().enumerate() {
            for &(u, w) in ns {
                if u == v || u >= n || !(w > 0.0 && w.is_finite()) {
                    return bad(format!("bad edge {} -> {}", v + 1, u + 1));
                }
                if !self.adj[u].iter().any(|&(x, wx)| x == v && wx == w) {
                    return bad(format!("edge {} -> {} is not symmetric", v + 1, u + 1));
                }
            }
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::format(path.display().to_string(), 0, format!("cannot open: {e}")))
}

/// Reads a `.content` file (`<id> <f_1 .. f_L> <label>`) and a `.cites` file
/// (`<target> <source>`). IDs and labels are assigned in sorted order;
/// duplicate edges collapse and every edge is made undirected.
pub fn load_content_cites(content: &Path, cites: &Path) -> Result<PlainGraph> {
    parse_content_cites(
        open(content)?,
        &content.display().to_string(),
        open(cites)?,
        &cites.display().to_string(),
    )
}

/// [`load_content_cites`] over readers; the names only label errors.
pub fn parse_content_cites(content: impl BufRead, cpath: &str, cites: impl BufRead, spath: &str) -> Result<PlainGraph> {
    let mut rows: BTreeMap<String, (Vec<f64>, String)> = BTreeMap::new();
    let mut width = None;
    for (i, line) in content.lines().enumerate() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::format(cpath, i + 1, "expected an id, features and a label"));
        }
        let feats = toks[1..toks.len() - 1]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::format(cpath, i + 1, format!("bad feature: {e}")))?;
        if feats.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::format(cpath, i + 1, "features must be finite and nonnegative"));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::format(
                    cpath,
                    i + 1,
                    format!("expected {w} features, found {}", feats.len()),
                ))
            }
            _ => {}
        }
        let id = toks[0].to_string();
        if rows
            .insert(id.clone(), (feats, toks[toks.len() - 1].to_string()))
            .is_some()
        {
            return Err(Error::format(cpath, i + 1, format!("duplicate node id {id}")));
        }
    }
    let Some(width) = width else {
        return Err(Error::format(cpath, 0, "graph has no nodes"));
    };

    let names: Vec<String> = rows.keys().cloned().collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let label_names: Vec<String> = rows
        .values()
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut features = Vec::with_capacity(names.len() * width);
    let mut labels = Vec::with_capacity(names.len());
    for (feats, label) in rows.values() {
        features.extend_from_slice(feats);
        labels.push(label_names.binary_search(label).expect("label collected above"));
    }

    let mut edges = BTreeSet::new();
    let mut dropped = 0;
    for (i, line) in cites.lines().enumerate() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            [a, b] => match (index.get(a), index.get(b)) {
                (Some(&u), Some(&v)) if u != v => {
                    edges.insert((u.min(v), u.max(v)));
                }
                (Some(_), Some(_)) => {}
                _ => dropped += 1,
            },
            _ => return Err(Error::format(spath, i + 1, "expected two node ids")),
        }
    }
    let mut adj = vec![Vec::new(); names.len()];
    for (u, v) in edges {
        adj[u].push((v, 1.0));
        adj[v].push((u, 1.0));
    }
    for ns in &mut adj {
        ns.sort_by_key(|&(u, _)| u);
    }
    Ok(PlainGraph {
        names,
        n_features: width,
        features,
        label_names,
        labels,
        labeled: Vec::new(),
        adj,
        dropped_edges: dropped,
    })
}

/// Rewrites the Pubmed-Diabetes tab files into the content/cites format:
/// dense TF-IDF vectors over the declared vocabulary, `label=k` as label.
pub fn convert_pubmed(node_tab: &Path, cites_tab: &Path, content_out: &Path, cites_out: &Path) -> Result<()> {
    let mut content = BufWriter::new(File::create(content_out)?);
    let mut cites = BufWriter::new(File::create(cites_out)?);
    convert_pubmed_streams(
        open(node_tab)?,
        &node_tab.display().to_string(),
        open(cites_tab)?,
        &mut content,
        &mut cites,
    )?;
    content.flush()?;
    cites.flush()?;
    Ok(())
}

pub fn convert_pubmed_streams(
    node_tab: impl BufRead,
    npath: &str,
    cites_tab: impl BufRead,
    content_out: &mut impl Write,
    cites_out: &mut impl Write,
) -> Result<()> {
    let mut lines = node_tab.lines();
    let _title = lines.next().transpose()?;
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::format(npath, 2, "missing vocabulary header"))?;
    // Header fields look like `numeric:w-rat:0.0`; the first is the label.
    let vocab: Vec<String> = header
        .split('\t')
        .filter_map(|f| {
            let mut parts = f.split(':');
            match (parts.next(), parts.next()) {
                (Some("numeric"), Some(name)) => Some(name.to_string()),
                _ => None,
            }
        })
        .collect();
    let slot: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let out = content_out;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let mut fields = line.split('\t');
        let Some(id) = fields.next().filter(|s| !s.is_empty()) else {
            continue;
        };
        let mut label = None;
        let mut row = vec![0.0; vocab.len()];
        for f in fields {
            let Some((k, v)) = f.split_once('=') else { continue };
            if k == "label" {
                label = Some(v.to_string());
            } else if let Some(&j) = slot.get(k) {
                row[j] = v
                    .parse()
                    .map_err(|e| Error::format(npath, i + 3, format!("bad value for {k}: {e}")))?;
            }
        }
        let label = label.ok_or_else(|| Error::format(npath, i + 3, "missing label"))?;
        write!(out, "{id}")?;
        for x in row {
            write!(out, " {x}")?;
        }
        writeln!(out, " {label}")?;
    }
    for line in cites_tab.lines().skip(2) {
        let line = line?;
        // `<edge id>\tpaper:<a>\t|\tpaper:<b>`
        let ids: Vec<&str> = line.split('\t').filter_map(|f| f.strip_prefix("paper:")).collect();
        if let [a, b] = ids.as_slice() {
            writeln!(cites_out, "{b} {a}")?;
        }
    }
    Ok(())
}

/// The public benchmark datasets, looked up under a data directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Cora,
    Citeseer,
    Pubmed,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Citeseer, Dataset::Cora, Dataset::Pubmed];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Cora => "cora",
            Dataset::Citeseer => "citeseer",
            Dataset::Pubmed => "pubmed",
        }
    }

    pub fn parse(s: &str) -> Option<Dataset> {
        Dataset::ALL.into_iter().find(|d| d.name().eq_ignore_ascii_case(s))
    }

    /// Published statistics `(N, L, C, d_max)`.
    pub fn expected(self) -> GraphSummary {
        let (nodes, features, classes, d_max) = match self {
            Dataset::Citeseer => (3327, 3703, 6, 100),
            Dataset::Cora => (2708, 1433, 7, 169),
            Dataset::Pubmed => (19717, 500, 3, 171),
        };
        GraphSummary {
            nodes,
            features,
            classes,
            d_max,
        }
    }

    /// Expected files below `dir/<name>/`.
    pub fn files(self, dir: &Path) -> Vec<PathBuf> {
        let d = dir.join(self.name());
        match self {
            Dataset::Pubmed => vec![
                d.join("Pubmed-Diabetes.NODE.paper.tab"),
                d.join("Pubmed-Diabetes.DIRECTED.cites.tab"),
            ],
            _ => vec![
                d.join(format!("{}.content", self.name())),
                d.join(format!("{}.cites", self.name())),
            ],
        }
    }

    pub fn load(self, dir: &Path) -> Result<PlainGraph> {
        let files = self.files(dir);
        match self {
            Dataset::Pubmed => {
                let (mut content, mut cites) = (Vec::new(), Vec::new());
                convert_pubmed_streams(
                    open(&files[0])?,
                    &files[0].display().to_string(),
                    open(&files[1])?,
                    &mut content,
                    &mut cites,
                )?;
                parse_content_cites(content.as_slice(), "pubmed.content", cites.as_slice(), "pubmed.cites")
            }
            _ => load_content_cites(&files[0], &files[1]),
        }
    }
}

/// Neighbor lists padded to exactly `d_max` entries per node. Dummies point
/// at the node itself and carry weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedAdjacency {
    pub d_max: usize,
    /// 1-based neighbor IDs, `N x d_max`.
    pub ne: Vec<u64>,
    pub w: Vec<f64>,
}

impl PaddedAdjacency {
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (u64, f64)> + '_ {
        let r = v * self.d_max..(v + 1) * self.d_max;
        self.ne[r.clone()].iter().copied().zip(self.w[r].iter().copied())
    }
}

pub fn pad(g: &PlainGraph) -> PaddedAdjacency {
    pad_with(g, |v| v as u64 + 1)
}

/// Pads with a caller-chosen dummy ID per node, to show the choice is inert.
pub fn pad_with(g: &PlainGraph, dummy: impl Fn(usize) -> u64) -> PaddedAdjacency {
    let d = g.d_max();
    let mut ne = Vec::with_capacity(g.n() * d);
    let mut w = Vec::with_capacity(g.n() * d);
    for (v, ns) in g.adj.iter().enumerate() {
        for &(u, wt) in ns {
            ne.push(u as u64 + 1);
            w.push(wt);
        }
        for _ in ns.len()..d {
            ne.push(dummy(v));
            w.push(0.0);
        }
    }
    PaddedAdjacency { d_max: d, ne, w }
}

/// One server's shares of an encrypted graph, plus the public parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphShare {
    pub party: PartyId,
    pub summary: GraphSummary,
    pub frac_bits: u32,
    /// Public labeled node indices (0-based).
    pub labeled: Vec<usize>,
    /// `N x L` fixed-point features.
    pub features: Vec<RingElem>,
    /// `|T| x C` fixed-point one-hot labels.
    pub labels: Vec<RingElem>,
    /// `N x d_max` neighbor IDs, additive modulo `N`.
    pub ne: Vec<RingElem>,
    /// `N x d_max` fixed-point edge weights.
    pub w: Vec<RingElem>,
    /// `N` fixed-point self-weight sums.
    pub sw: Vec<RingElem>,
}

impl GraphShare {
    /// Placeholder for P3, which holds no graph shares but needs the shapes.
    pub fn placeholder(public: &GraphShare) -> GraphShare {
        GraphShare::public_only(public.summary, public.frac_bits, public.labeled.clone())
    }

    /// Zero-filled shares with the shapes implied by the public parameters.
    pub fn public_only(summary: GraphSummary, frac_bits: u32, labeled: Vec<usize>) -> GraphShare {
        let z = |n: usize| vec![RingElem::ZERO; n];
        let GraphSummary {
            nodes,
            features,
            classes,
            d_max,
        } = summary;
        GraphShare {
            party: PartyId::P3,
            summary,
            frac_bits,
            features: z(nodes * features),
            labels: z(labeled.len() * classes),
            labeled,
            ne: z(nodes * d_max),
            w: z(nodes * d_max),
            sw: z(nodes),
        }
    }

    /// Number of ring words describing the structure (`Ne`, `W`, `sw`).
    pub fn structure_words(&self) -> usize {
        self.ne.len() + self.w.len() + self.sw.len()
    }
}

/// Splits a padded graph into shares for P1 and P2. IDs are shared as raw
/// integers modulo `N`; features, labels, weights and `sw` as fixed point.
pub fn encrypt_graph(g: &PlainGraph, pad: &PaddedAdjacency, codec: FixedCodec, seed: u64) -> Result<[GraphShare; 2]> {
    g.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = g.n() as u64;
    let (f1, f2) = share_vec(&codec.encode_all(&g.features)?, &mut rng);
    let (t1, t2) = share_vec(&codec.encode_all(&g.label_matrix())?, &mut rng);
    let (w1, w2) = share_vec(&codec.encode_all(&pad.w)?, &mut rng);
    let (s1, s2) = share_vec(&codec.encode_all(&g.sw())?, &mut rng);
    let (ne1, ne2): (Vec<RingElem>, Vec<RingElem>) = pad.ne.iter().map(|&id| share_index(id, n, &mut rng)).unzip();
    let mk = |party, features, labels, ne, w, sw| GraphShare {
        party,
        summary: g.summary(),
        frac_bits: codec.frac_bits,
        labeled: g.labeled.clone(),
        features,
        labels,
        ne,
        w,
        sw,
    };
    Ok([
        mk(PartyId::P1, f1, t1, ne1, w1, s1),
        mk(PartyId::P2, f2, t2, ne2, w2, s2),
    ])
}

/// The data owner's view recovered from both shares.
#[derive(Clone, Debug, PartialEq)]
pub struct RevealedGraph {
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub ne: Vec<u64>,
    pub w: Vec<f64>,
    pub sw: Vec<f64>,
}

pub fn reconstruct_graph(shares: &[GraphShare; 2]) -> RevealedGraph {
    let codec = FixedCodec::new(shares[0].frac_bits);
    let n = shares[0].summary.nodes as u64;
    let fx =
        |a: &[RingElem], b: &[RingElem]| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| codec.decode(x + y)).collect() };
    let [a, b] = shares;
    RevealedGraph {
        features: fx(&a.features, &b.features),
        labels: fx(&a.labels, &b.labels),
        ne: a
            .ne
            .iter()
            .zip(&b.ne)
            .map(|(&x, &y)| crate::prims::reconstruct_index(x, y, n))
            .collect(),
        w: fx(&a.w, &b.w),
        sw: fx(&a.sw, &b.sw),
    }
}

/// Deterministic random graph for tests and desk-scale runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub features: usize,
    pub classes: usize,
    /// Expected degree; at least this many edge attempts per node.
    pub avg_degree: usize,
    /// Probability that an edge stays within a class.
    pub homophily: f64,
    pub labeled_per_class: usize,
    /// Edge weights drawn from `[0.5, 2)` instead of all ones.
    pub weighted: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 24,
            features: 8,
            classes: 3,
            avg_degree: 3,
            homophily: 0.8,
            labeled_per_class: 4,
            weighted: false,
            seed: 1,
        }
    }
}

/// Class-correlated binary features (every row has at least one nonzero
/// entry) and a homophilous random edge set.
pub fn synthetic(spec: &SyntheticSpec) -> PlainGraph {
    let SyntheticSpec {
        nodes: n,
        features: l,
        classes: c,
        ..
    } = *spec;
    assert!(n >= 2 && l >= 1 && c >= 1);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..n).map(|v| v % c).collect();
    labels.shuffle(&mut rng);
    let mut features = vec![0.0; n * l];
    for v in 0..n {
        let row = &mut features[v * l..(v + 1) * l];
        for (j, f) in row.iter_mut().enumerate() {
            let p = if j % c == labels[v] { 0.6 } else { 0.15 };
            if rng.gen_bool(p) {
                *f = 1.0;
            }
        }
        if row.iter().all(|&f| f == 0.0) {
            row[labels[v] % l] = 1.0;
        }
    }
    let mut edges = BTreeMap::new();
    for v in 0..n {
        for _ in 0..spec.avg_degree.div_ceil(2) {
            let same: Vec<usize> = (0..n).filter(|&u| u != v && labels[u] == labels[v]).collect();
            let u = if rng.gen_bool(spec.homophily) && !same.is_empty() {
                *same.choose(&mut rng).expect("nonempty")
            } else {
                let u = rng.gen_range(0..n - 1);
                if u >= v {
                    u + 1
                } else {
                    u
                }
            };
            let w = if spec.weighted { rng.gen_range(0.5..2.0) } else { 1.0 };
            // Quantize so fixed-point encoding is exact.
            let w = (w * 64.0f64).round() / 64.0;
            edges.entry((u.min(v), u.max(v))).or_insert(w);
        }
    }
    let mut adj = vec![Vec::new(); n];
    for (&(u, v), &w) in &edges {
        adj[u].push((v, w));
        adj[v].push((u, w));
    }
    for ns in &mut adj {
        ns.sort_by_key(|&(u, _)| u);
    }
    let mut g = PlainGraph {
        names: (1..=n).map(|i| i.to_string()).collect(),
        n_features: l,
        features,
        label_names: (0..c).map(|k| format!("class{k}")).collect(),
        labels,
        labeled: Vec::new(),
        adj,
        dropped_edges: 0,
    };
    g.select_labeled(spec.labeled_per_class, spec.seed ^ 0x5eed);
    g
}

const GRAPH_MAGIC: &[u8; 4] = b"SGRF";
const SHARE_MAGIC: &[u8; 4] = b"SGSH";
const FORMAT_VERSION: u16 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::format(what, 0, "bad magic"));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != FORMAT_VERSION {
        return Err(Error::format(
            what,
            0,
            format!("unsupported version {}", u16::from_le_bytes(v)),
        ));
    }
    Ok(())
}

/// Canonical plaintext graph file: magic `SGRF`, u16 version, then `N`, `L`,
/// `C`, `d_max` as u64; `N` fixed-length node records (L features as f64,
/// label index, `d_max` neighbor IDs, `d_max` weights as f64); then the
/// labeled count and labeled IDs. All integers little endian.
pub fn write_canonical(g: &PlainGraph, w: &mut impl Write) -> Result<()> {
    let pad = pad(g);
    let s = g.summary();
    w.write_all(GRAPH_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [s.nodes, s.features, s.classes, s.d_max] {
        put_u64(w, v as u64)?;
    }
    for v in 0..g.n() {
        for &f in g.feature_row(v) {
            w.write_all(&f.to_le_bytes())?;
        }
        put_u64(w, g.labels[v] as u64)?;
        for (id, _) in pad.neighbors(v) {
            put_u64(w, id)?;
        }
        for (_, wt) in pad.neighbors(v) {
            w.write_all(&wt.to_le_bytes())?;
        }
    }
    put_u64(w, g.labeled.len() as u64)?;
    for &v in &g.labeled {
        put_u64(w, v as u64 + 1)?;
    }
    Ok(())
}

pub fn read_canonical(r: &mut impl Read) -> Result<PlainGraph> {
    const WHAT: &str = "<canonical graph>";
    header(r, GRAPH_MAGIC, WHAT)?;
    let n = get_u64(r)? as usize;
    let l = get_u64(r)? as usize;
    let c = get_u64(r)? as usize;
    let d = get_u64(r)? as usize;
    let f64_of = |r: &mut dyn Read| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let mut features = Vec::with_capacity(n * l);
    let mut labels = Vec::with_capacity(n);
    let mut adj = Vec::with_capacity(n);
    for v in 0..n {
        for _ in 0..l {
            features.push(f64_of(r)?);
        }
        labels.push(get_u64(r)? as usize);
        let ids: Vec<u64> = (0..d).map(|_| get_u64(r)).collect::<Result<_>>()?;
        let ws: Vec<f64> = (0..d).map(|_| f64_of(r)).collect::<Result<_>>()?;
        let ns: Vec<(usize, f64)> = ids
            .into_iter()
            .zip(ws)
            .filter(|&(_, w)| w > 0.0)
            .map(|(id, w)| {
                if id == 0 || id as usize > n {
                    Err(Error::format(WHAT, v + 1, format!("neighbor id {id} out of range")))
                } else {
                    Ok((id as usize - 1, w))
                }
            })
            .collect::<Result<_>>()?;
        adj.push(ns);
    }
    let t = get_u64(r)? as usize;
    let labeled = (0..t)
        .map(|_| get_u64(r).map(|id| id as usize - 1))
        .collect::<Result<_>>()?;
    let g = PlainGraph {
        names: (1..=n).map(|i| i.to_string()).collect(),
        n_features: l,
        features,
        label_names: (0..c).map(|k| k.to_string()).collect(),
        labels,
        labeled,
        adj,
        dropped_edges: 0,
    };
    g.validate()?;
    Ok(g)
}

impl GraphShare {
    /// Share file: magic `SGSH`, u16 version, u8 party, u8 fractional bits,
    /// `N`, `L`, `C`, `d_max`, `|T|` as u64, the labeled IDs, then raw words
    /// of `F` (N x L), `T` (|T| x C), `Ne`, `W` (N x d_max each) and `sw` (N).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(SHARE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.party.index() as u8, self.frac_bits as u8])?;
        let s = self.summary;
        for v in [s.nodes, s.features, s.classes, s.d_max, self.labeled.len()] {
            put_u64(w, v as u64)?;
        }
        for &v in &self.labeled {
            put_u64(w, v as u64 + 1)?;
        }
        for part in [&self.features, &self.labels, &self.ne, &self.w, &self.sw] {
            for x in part {
                put_u64(w, x.0)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<GraphShare> {
        const WHAT: &str = "<share file>";
        header(r, SHARE_MAGIC, WHAT)?;
        let mut pb = [0u8; 2];
        r.read_exact(&mut pb)?;
        let party = PartyId::from_index(pb[0] as usize).ok_or_else(|| Error::format(WHAT, 0, "bad party byte"))?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = get_u64(r)? as usize;
        }
        let [nodes, features, classes, d_max, t] = dims;
        let labeled = (0..t)
            .map(|_| get_u64(r).map(|id| id as usize - 1))
            .collect::<Result<Vec<_>>>()?;
        let mut words = |k: usize| -> Result<Vec<RingElem>> { (0..k).map(|_| get_u64(r).map(RingElem)).collect() };
        Ok(GraphShare {
            party,
            summary: GraphSummary {
                nodes,
                features,
                classes,
                d_max,
            },
            frac_bits: pb[1] as u32,
            labeled,
            features: words(nodes * features)?,
            labels: words(t * classes)?,
            ne: words(nodes * d_max)?,
            w: words(nodes * d_max)?,
            sw: words(nodes)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GraphShare> {
        GraphShare::read_from(&mut open(path)?).map_err(|e| relabel(e, path))
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { line, reason, .. } => Error::format(path.display().to_string(), line, reason),
        other => other,
    }
}

pub fn save_canonical(g: &PlainGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_canonical(g, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_canonical(path: &Path) -> Result<PlainGraph> {
    read_canonical(&mut open(path)?).map_err(|e| relabel(e, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph() -> PlainGraph {
        PlainGraph {
            names: vec!["a".into(), "b".into(), "c".into()],
            n_features: 1,
            features: vec![1.0, 2.0, 3.0],
            label_names: vec!["x".into(), "y".into()],
            labels: vec![0, 1, 0],
            labeled: vec![0, 1],
            adj: vec![vec![(1, 1.0)], vec![(0, 1.0), (2, 1.0)], vec![(1, 1.0)]],
            dropped_edges: 0,
        }
    }

    #[test]
    fn padding_fills_with_self_and_zero_weight() {
        let g = path_graph();
        let p = pad(&g);
        assert_eq!(p.d_max, 2);
        assert_eq!(p.ne, vec![2, 1, 1, 3, 2, 3]);
        assert_eq!(p.w, vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(g.sw(), vec![2.0, 3.0, 2.0]);
    }

    #[test]
    fn canonical_round_trip() {
        let g = synthetic(&SyntheticSpec {
            weighted: true,
            ..Default::default()
        });
        let mut buf = Vec::new();
        write_canonical(&g, &mut buf).unwrap();
        let back = read_canonical(&mut buf.as_slice()).unwrap();
        assert_eq!(back.features, g.features);
        assert_eq!(back.adj, g.adj);
        assert_eq!(back.labels, g.labels);
        assert_eq!(back.labeled, g.labeled);
    }

    #[test]
    fn synthetic_graph_is_valid() {
        for seed in 0..20 {
            let g = synthetic(&SyntheticSpec {
                seed,
                weighted: seed % 2 == 0,
                ..Default::default()
            });
            g.validate().unwrap();
            assert!(g.features.chunks(g.n_features).all(|r| r.iter().sum::<f64>() >= 1.0));
            assert_eq!(g.labeled.len(), 12);
        }
    }
}
