//! Graph containers, citation-network ingestion, synthetic generators and a
//! small JSON interchange format.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Index;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A directed graph in COO form with node features, labels and optional
/// node-classification split masks.
#[derive(Clone, Debug)]
pub struct Graph {
    num_nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    x: Tensor,
    y: Vec<usize>,
    num_classes: usize,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
    in_degree: Vec<usize>,
    prob_mask: Option<Vec<f32>>,
}

impl Graph {
    /// `edges` are `(source, target)` pairs. `y` may be empty for unlabeled
    /// graphs.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)], x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rows() != num_nodes {
            return Err(Error::Dimension(format!(
                "feature matrix has {} rows for {num_nodes} nodes",
                x.rows()
            )));
        }
        if !y.is_empty() && y.len() != num_nodes {
            return Err(Error::Dimension(format!("{} labels for {num_nodes} nodes", y.len())));
        }
        if let Some(&(s, t)) = edges.iter().find(|&&(s, t)| s >= num_nodes || t >= num_nodes) {
            return Err(Error::Index(format!("edge ({s}, {t}) outside 0..{num_nodes}")));
        }
        let (src, dst): (Vec<_>, Vec<_>) = edges.iter().copied().unzip();
        let in_degree = compute_in_degree(&dst, num_nodes);
        let num_classes = y.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            num_nodes,
            src,
            dst,
            x,
            y,
            num_classes,
            train_mask: vec![false; num_nodes],
            val_mask: vec![false; num_nodes],
            test_mask: vec![false; num_nodes],
            in_degree,
            prob_mask: None,
        })
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if self.y.iter().any(|&c| c >= num_classes) {
            return Err(Error::Config(format!("labels exceed {num_classes} classes")));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    pub fn with_masks(mut self, train: Vec<bool>, val: Vec<bool>, test: Vec<bool>) -> Result<Self> {
        let n = self.num_nodes;
        if train.len() != n || val.len() != n || test.len() != n {
            return Err(Error::Dimension("split mask length differs from node count".into()));
        }
        for i in 0..n {
            if (train[i] as u8 + val[i] as u8 + test[i] as u8) > 1 {
                return Err(Error::Contract(format!("node {i} is in more than one split")));
            }
        }
        self.train_mask = train;
        self.val_mask = val;
        self.test_mask = test;
        Ok(self)
    }

    pub fn with_prob_mask(mut self, p: Vec<f32>) -> Result<Self> {
        if p.len() != self.num_nodes {
            return Err(Error::Dimension("probability mask length differs from node count".into()));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("protection probabilities must lie in [0, 1]".into()));
        }
        self.prob_mask = Some(p);
        Ok(self)
    }

    pub fn with_features(mut self, x: Tensor) -> Result<Self> {
        if x.rows() != self.num_nodes {
            return Err(Error::Dimension("feature rows differ from node count".into()));
        }
        self.x = x;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        let mask = match split {
            Split::Train => &self.train_mask,
            Split::Val => &self.val_mask,
            Split::Test => &self.test_mask,
        };
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn in_degree(&self) -> &[usize] {
        &self.in_degree
    }

    pub fn prob_mask(&self) -> Option<&[f32]> {
        self.prob_mask.as_deref()
    }

    pub fn has_self_loop(&self) -> Vec<bool> {
        let mut has = vec![false; self.num_nodes];
        for (s, t) in self.edges() {
            if s == t {
                has[s] = true;
            }
        }
        has
    }

    /// Appends `(i, i)` for every node that lacks a self-loop.
    pub fn add_self_loops(&self) -> Graph {
        let has = self.has_self_loop();
        let mut g = self.clone();
        for (i, h) in has.into_iter().enumerate() {
            if !h {
                g.src.push(i);
                g.dst.push(i);
                g.in_degree[i] += 1;
            }
        }
        g
    }

    /// Shared index vectors for the autodiff gather/scatter primitives.
    pub fn index(&self) -> EdgeIndex {
        EdgeIndex { src: Rc::from(self.src.as_slice()), dst: Rc::from(self.dst.as_slice()) }
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            num_nodes: self.num_nodes,
            edges: self.edges().map(|(s, t)| [s, t]).collect(),
            features: (0..self.num_nodes).map(|i| self.x.row(i).to_vec()).collect(),
            labels: self.y.clone(),
            masks: Some(SplitMasks {
                train: self.train_mask.clone(),
                val: self.val_mask.clone(),
                test: self.test_mask.clone(),
            }),
        }
    }

    pub fn from_json(doc: &GraphJson) -> Result<Self> {
        let f = doc.features.first().map_or(0, |r| r.len());
        let x = if doc.num_nodes == 0 { Tensor::zeros(0, 0) } else { Tensor::from_rows(&doc.features)? };
        if x.rows() != doc.num_nodes {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} nodes",
                x.rows(),
                doc.num_nodes
            )));
        }
        let _ = f;
        let edges: Vec<(usize, usize)> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = Graph::new(doc.num_nodes, &edges, x, doc.labels.clone())?;
        if let Some(m) = &doc.masks {
            g = g.with_masks(m.train.clone(), m.val.clone(), m.test.clone())?;
        }
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Edge endpoints as shared autodiff indices.
#[derive(Clone)]
pub struct EdgeIndex {
    pub src: Index,
    pub dst: Index,
}

/// Bincount of edge targets.
pub fn compute_in_degree(dst: &[usize], num_nodes: usize) -> Vec<usize> {
    let mut deg = vec![0usize; num_nodes];
    for &t in dst {
        deg[t] += 1;
    }
    deg
}

/// JSON document for a single graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphJson {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f32>>,
    #[serde(default)]
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<SplitMasks>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

/// A labeled graph in a graph-classification corpus.
#[derive(Clone, Debug)]
pub struct LabeledGraph {
    pub graph: Graph,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusJson {
    pub graphs: Vec<GraphJson>,
    pub labels: Vec<usize>,
}

pub fn corpus_to_json(corpus: &[LabeledGraph]) -> CorpusJson {
    CorpusJson {
        graphs: corpus.iter().map(|g| g.graph.to_json()).collect(),
        labels: corpus.iter().map(|g| g.label).collect(),
    }
}

pub fn corpus_from_json(doc: &CorpusJson) -> Result<Vec<LabeledGraph>> {
    if doc.graphs.len() != doc.labels.len() {
        return Err(Error::Dimension("corpus graph and label counts differ".into()));
    }
    doc.graphs
        .iter()
        .zip(&doc.labels)
        .map(|(g, &label)| Ok(LabeledGraph { graph: Graph::from_json(g)?, label }))
        .collect()
}

pub fn read_graph_json(path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Graph::from_json(&serde_json::from_str(&text)?)
}

pub fn write_graph_json(graph: &Graph, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&graph.to_json())?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Several graphs merged into one disconnected graph plus a node-to-graph map.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub graph: Graph,
    pub batch: Vec<usize>,
    pub num_graphs: usize,
    pub labels: Vec<usize>,
}

impl GraphBatch {
    pub fn from_graphs(items: &[&LabeledGraph]) -> Result<Self> {
        let f = items.first().map_or(0, |g| g.graph.num_features());
        let total: usize = items.iter().map(|g| g.graph.num_nodes()).sum();
        let mut edges = Vec::new();
        let mut data = Vec::with_capacity(total * f);
        let mut batch = Vec::with_capacity(total);
        let mut probs: Option<Vec<f32>> = Some(Vec::with_capacity(total));
        let mut offset = 0;
        for (gi, item) in items.iter().enumerate() {
            let g = &item.graph;
            if g.num_features() != f {
                return Err(Error::Dimension("graphs in a batch differ in feature width".into()));
            }
            edges.extend(g.edges().map(|(s, t)| (s + offset, t + offset)));
            data.extend_from_slice(g.x().data());
            batch.extend(std::iter::repeat_n(gi, g.num_nodes()));
            match (&mut probs, g.prob_mask()) {
                (Some(p), Some(gp)) => p.extend_from_slice(gp),
                _ => probs = None,
            }
            offset += g.num_nodes();
        }
        let x = Tensor::from_vec(total, f, data)?;
        let mut graph = Graph::new(total, &edges, x, Vec::new())?;
        if let Some(p) = probs {
            graph = graph.with_prob_mask(p)?;
        }
        Ok(Self {
            graph,
            batch,
            num_graphs: items.len(),
            labels: items.iter().map(|g| g.label).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Citation networks

/// Result of reading a citation dataset.
#[derive(Clone, Debug)]
pub struct CitationData {
    pub graph: Graph,
    pub class_names: Vec<String>,
    /// Citations referring to ids absent from the content file.
    pub skipped_edges: usize,
}

pub const TRAIN_PER_CLASS: usize = 20;
pub const NUM_VAL: usize = 500;
pub const NUM_TEST: usize = 1000;

/// Reads the classic `.content` / `.cites` pair.
pub fn load_citation(content_path: &Path, cites_path: &Path) -> Result<CitationData> {
    let content = fs::read_to_string(content_path).map_err(|e| Error::io(content_path, e))?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut width = None;
    for (lineno, line) in content.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: content_path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if toks.len() < 3 {
            return Err(parse_err("expected `<id> <features..> <label>`".into()));
        }
        let f = toks.len() - 2;
        match width {
            None => width = Some(f),
            Some(w) if w != f => return Err(parse_err(format!("{f} features, expected {w}"))),
            _ => {}
        }
        let feats = toks[1..toks.len() - 1]
            .iter()
            .map(|t| t.parse::<f32>().map_err(|_| parse_err(format!("bad feature value {t:?}"))))
            .collect::<Result<Vec<f32>>>()?;
        if ids.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(parse_err(format!("duplicate node id {}", toks[0])));
        }
        rows.push(feats);
        raw_labels.push(toks[toks.len() - 1].to_string());
    }
    let n = rows.len();
    let f = width.unwrap_or(0);

    let class_names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let y: Vec<usize> = raw_labels
        .iter()
        .map(|l| class_names.binary_search(l).expect("label present"))
        .collect();

    let mut data = Vec::with_capacity(n * f);
    for mut r in rows {
        let s: f32 = r.iter().sum();
        if s != 0.0 {
            r.iter_mut().for_each(|v| *v /= s);
        }
        data.extend(r);
    }
    let x = Tensor::from_vec(n, f, data)?;

    let cites = fs::read_to_string(cites_path).map_err(|e| Error::io(cites_path, e))?;
    let mut pairs = BTreeSet::new();
    let mut skipped = 0;
    for (lineno, line) in cites.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 2 {
            return Err(Error::Parse {
                path: cites_path.to_path_buf(),
                line: lineno + 1,
                message: "expected `<cited> <citing>`".into(),
            });
        }
        match (ids.get(toks[0]), ids.get(toks[1])) {
            (Some(&a), Some(&b)) => {
                pairs.insert((a, b));
                pairs.insert((b, a));
            }
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} citations with unknown ids", cites_path.display());
    }
    let edges: Vec<(usize, usize)> = pairs.into_iter().collect();
    let num_classes = class_names.len();
    let (train, val, test) = planetoid_split(&y, num_classes);
    let graph = Graph::new(n, &edges, x, y)?
        .with_num_classes(num_classes)?
        .with_masks(train, val, test)?;
    Ok(CitationData { graph, class_names, skipped_edges: skipped })
}

/// First 20 nodes of each class (file order) train, the next 500 other nodes
/// validate, and the final 1000 nodes not already used test.
pub fn planetoid_split(y: &[usize], num_classes: usize) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let n = y.len();
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    let mut per_class = vec![0usize; num_classes];
    for (i, &c) in y.iter().enumerate() {
        if per_class[c] < TRAIN_PER_CLASS {
            per_class[c] += 1;
            train[i] = true;
        }
    }
    let mut taken = 0;
    for i in 0..n {
        if taken == NUM_VAL {
            break;
        }
        if !train[i] {
            val[i] = true;
            taken += 1;
        }
    }
    let mut taken = 0;
    for i in (0..n).rev() {
        if taken == NUM_TEST {
            break;
        }
        if !train[i] && !val[i] {
            test[i] = true;
            taken += 1;
        }
    }
    (train, val, test)
}

/// Root directory for datasets, from `DQ_DATA_DIR` (default `./data`).
pub fn data_dir() -> PathBuf {
    std::env::var_os("DQ_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Paths `<root>/<name>/<name>.content` and `.cites`.
pub fn citation_paths(root: &Path, name: &str) -> (PathBuf, PathBuf) {
    let dir = root.join(name);
    (dir.join(format!("{name}.content")), dir.join(format!("{name}.cites")))
}

/// Loads `cora` or `citeseer` from [`data_dir`].
pub fn load_named(name: &str) -> Result<CitationData> {
    let (content, cites) = citation_paths(&data_dir(), name);
    load_citation(&content, &cites)
}

// ---------------------------------------------------------------------------
// Synthetic graphs

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    ErdosRenyi,
    PreferentialAttachment,
    Star,
}

impl std::str::FromStr for GraphKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "er" | "erdos_renyi" | "erdos-renyi" => Ok(Self::ErdosRenyi),
            "pa" | "ba" | "preferential_attachment" | "preferential-attachment" => Ok(Self::PreferentialAttachment),
            "star" => Ok(Self::Star),
            other => Err(Error::Config(format!("unknown graph family {other:?}"))),
        }
    }
}

/// Feature initialization for generated graphs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureInit {
    Normal,
    Uniform,
    Ones,
}

pub const SYNTHETIC_FEATURES: usize = 16;

/// Generates a bidirectional synthetic graph with 16 standard-normal features.
/// `param` is the edge probability for Erdős–Rényi, the number of edges per
/// new node for preferential attachment, and ignored for stars.
pub fn gen_synthetic(kind: GraphKind, n: usize, param: f64, seed: u64) -> Result<Graph> {
    gen_synthetic_with(kind, n, param, seed, SYNTHETIC_FEATURES, FeatureInit::Normal)
}

pub fn gen_synthetic_with(
    kind: GraphKind,
    n: usize,
    param: f64,
    seed: u64,
    features: usize,
    init: FeatureInit,
) -> Result<Graph> {
    if n < 2 {
        return Err(Error::Config(format!("synthetic graphs need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let undirected = match kind {
        GraphKind::ErdosRenyi => {
            if !(0.0..=1.0).contains(&param) {
                return Err(Error::Config(format!("edge probability {param} outside [0, 1]")));
            }
            erdos_renyi_edges(n, param, &mut rng)
        }
        GraphKind::PreferentialAttachment => {
            if param.fract() != 0.0 || param < 1.0 || param as usize >= n {
                return Err(Error::Config(format!("edges per node must be an integer in [1, n), got {param}")));
            }
            preferential_attachment_edges(n, param as usize, &mut rng)
        }
        GraphKind::Star => (1..n).map(|leaf| (0, leaf)).collect(),
    };
    let mut edges = Vec::with_capacity(undirected.len() * 2);
    for (a, b) in undirected {
        edges.push((a, b));
        edges.push((b, a));
    }
    let x = random_features(n, features, init, &mut rng);
    Graph::new(n, &edges, x, Vec::new())
}

pub fn random_features<R: Rng + ?Sized>(n: usize, f: usize, init: FeatureInit, rng: &mut R) -> Tensor {
    let data = (0..n * f)
        .map(|_| match init {
            FeatureInit::Normal => rng.sample::<f32, _>(StandardNormal),
            FeatureInit::Uniform => rng.random::<f32>(),
            FeatureInit::Ones => 1.0,
        })
        .collect();
    Tensor::from_vec(n, f, data).expect("sized")
}

/// G(n, p) via geometric skipping over the upper triangle, O(n + m).
fn erdos_renyi_edges(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    if p <= 0.0 {
        return edges;
    }
    if p >= 1.0 {
        for v in 1..n {
            for w in 0..v {
                edges.push((w, v));
            }
        }
        return edges;
    }
    let lp = (1.0 - p).ln();
    let (mut v, mut w): (i64, i64) = (1, -1);
    let n = n as i64;
    while v < n {
        let r: f64 = 1.0 - rng.random::<f64>();
        w += 1 + (r.ln() / lp).floor() as i64;
        while w >= v && v < n {
            w -= v;
            v += 1;
        }
        if v < n {
            edges.push((w as usize, v as usize));
        }
    }
    edges
}

/// Barabási–Albert growth: each new node attaches to `m` distinct existing
/// nodes chosen proportionally to degree.
fn preferential_attachment_edges(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity((n - m) * m);
    let mut repeated: Vec<usize> = Vec::with_capacity(2 * n * m);
    let mut targets: Vec<usize> = (0..m).collect();
    let mut chosen = Vec::with_capacity(m);
    for source in m..n {
        for &t in &targets {
            edges.push((t, source));
        }
        repeated.extend_from_slice(&targets);
        repeated.extend(std::iter::repeat_n(source, m));
        chosen.clear();
        while chosen.len() < m {
            let c = repeated[rng.random_range(0..repeated.len())];
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }
        std::mem::swap(&mut targets, &mut chosen);
    }
    edges
}

/// Graph-classification corpus: Erdős–Rényi graphs labeled 0 and
/// preferential-attachment graphs labeled 1 with matched mean degree.
/// Node sizes are drawn uniformly from `n_range`.
pub fn er_vs_pa_corpus(
    num_graphs: usize,
    n_range: (usize, usize),
    features: usize,
    init: FeatureInit,
    seed: u64,
) -> Result<Vec<LabeledGraph>> {
    let (lo, hi) = n_range;
    if lo < 4 || hi < lo {
        return Err(Error::Config(format!("invalid node range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 2usize;
    (0..num_graphs)
        .map(|i| {
            let n = rng.random_range(lo..=hi);
            let gs: u64 = rng.random();
            let label = i % 2;
            let graph = if label == 0 {
                let avg = 2.0 * (m * (n - m)) as f64 / n as f64;
                gen_synthetic_with(GraphKind::ErdosRenyi, n, avg / (n - 1) as f64, gs, features, init)?
            } else {
                gen_synthetic_with(GraphKind::PreferentialAttachment, n, m as f64, gs, features, init)?
            };
            Ok(LabeledGraph { graph, label })
        })
        .collect()
}

/// Parameters of the planted-partition citation surrogate.
#[derive(Clone, Debug)]
pub struct SurrogateConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub num_features: usize,
    pub words_per_node: usize,
    pub mean_degree: f64,
    pub homophily: f64,
    /// Probability that a word is drawn from the node's class vocabulary.
    pub topic_strength: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            num_nodes: 1500,
            num_classes: 5,
            num_features: 300,
            words_per_node: 12,
            mean_degree: 4.0,
            homophily: 0.8,
            topic_strength: 0.3,
        }
    }
}

/// Citation-like node-classification graph with planted communities,
/// heavy-tailed degrees and sparse row-normalized bag-of-words features.
/// Splits follow [`planetoid_split`] with the validation and test sizes
/// scaled to the graph.
pub fn citation_surrogate(cfg: &SurrogateConfig, seed: u64) -> Result<Graph> {
    let SurrogateConfig { num_nodes: n, num_classes: c, num_features: f, .. } = *cfg;
    if n < c * TRAIN_PER_CLASS + 2 || c < 2 || f < c {
        return Err(Error::Config("surrogate graph too small for its class count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &k) in y.iter().enumerate() {
        by_class[k].push(i);
    }

    // degree-weighted endpoint choice gives a heavy tail
    let weights: Vec<f64> = (0..n).map(|_| (1.0 - rng.random::<f64>()).powf(-0.7)).collect();
    let pick = |pool: &[usize], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = pool.iter().map(|&i| weights[i]).sum();
        let mut r = rng.random::<f64>() * total;
        for &i in pool {
            r -= weights[i];
            if r <= 0.0 {
                return i;
            }
        }
        *pool.last().expect("non-empty")
    };
    let all: Vec<usize> = (0..n).collect();
    let m = (cfg.mean_degree * n as f64 / 2.0).round() as usize;
    let mut pairs = BTreeSet::new();
    let mut attempts = 0;
    while pairs.len() < 2 * m && attempts < 20 * m {
        attempts += 1;
        let a = pick(&all, &mut rng);
        let b = if rng.random::<f64>() < cfg.homophily { pick(&by_class[y[a]], &mut rng) } else { pick(&all, &mut rng) };
        if a != b {
            pairs.insert((a, b));
            pairs.insert((b, a));
        }
    }
    let edges: Vec<(usize, usize)> = pairs.into_iter().collect();

    let vocab = f / c;
    let mut x = Tensor::zeros(n, f);
    for i in 0..n {
        for _ in 0..cfg.words_per_node {
            let w = if rng.random::<f64>() < cfg.topic_strength {
                y[i] * vocab + rng.random_range(0..vocab)
            } else {
                rng.random_range(0..f)
            };
            x.set(i, w, 1.0);
        }
        let s: f32 = x.row(i).iter().sum();
        x.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }

    let (train, mut val, mut test) = planetoid_split(&y, c);
    // scale validation/test to the graph size when it is smaller than Cora
    let rest: Vec<usize> = (0..n).filter(|&i| !train[i]).collect();
    if rest.len() < NUM_VAL + NUM_TEST {
        val.iter_mut().for_each(|v| *v = false);
        test.iter_mut().for_each(|v| *v = false);
        let n_val = rest.len() / 3;
        for (k, &i) in rest.iter().enumerate() {
            if k < n_val {
                val[i] = true;
            } else {
                test[i] = true;
            }
        }
    }
    Graph::new(n, &edges, x, y)?.with_num_classes(c)?.with_masks(train, val, test)
}
