//! Attributed graph model, text formats and synthetic generation.
//!
//! Edges are undirected, unit-weight and stored once as `(min, max)` pairs.
//! Dense adjacency is used everywhere downstream, which keeps the code simple
//! for graphs of a few thousand nodes.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Matrix, Result};

/// Immutable attributed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Matrix,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

impl Graph {
    /// Builds a graph, symmetrising and deduplicating `edges`.
    ///
    /// Self-loops and out-of-range endpoints are rejected. When labels are
    /// given, the class count is `max(label) + 1`.
    pub fn new(
        features: Matrix,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.nrows();
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            if u >= n || v >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            set.insert((u.min(v), u.max(v)));
        }
        let num_classes = match &labels {
            Some(l) if l.len() != n => {
                return Err(Error::LabelCount {
                    features: n,
                    labels: l.len(),
                })
            }
            Some(l) => Some(l.iter().copied().max().map_or(0, |m| m + 1)),
            None => None,
        };
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            features,
            edges,
            neighbors,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Deduplicated edge list, each pair as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted neighbour list of `node` (self excluded).
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    /// Copy of this graph with replaced features (same topology and labels).
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.nrows() != self.num_nodes() {
            return Err(Error::dim(
                "with_features",
                format!("{} rows for {} nodes", features.nrows(), self.num_nodes()),
            ));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Binary adjacency without self-loops.
    pub fn adjacency(&self) -> Matrix {
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::dim("permuted", "permutation length differs from n"));
        }
        let mut features = Array2::zeros(self.features.raw_dim());
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).assign(&self.features.row(old));
        }
        let labels = self.labels.as_ref().map(|l| {
            let mut out = vec![0; n];
            for (old, &new) in perm.iter().enumerate() {
                out[new] = l[old];
            }
            out
        });
        Graph::new(
            features,
            self.edges.iter().map(|&(u, v)| (perm[u], perm[v])),
            labels,
        )
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` together with the self-loop degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Matrix,
    pub degrees: Vec<f64>,
}

pub fn normalize_adjacency(g: &Graph) -> NormalizedAdjacency {
    let n = g.num_nodes();
    let degrees: Vec<f64> = (0..n).map(|i| 1.0 + g.degree(i) as f64).collect();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] = 1.0 / degrees[i];
    }
    for &(u, v) in g.edges() {
        let w = 1.0 / (degrees[u] * degrees[v]).sqrt();
        m[[u, v]] = w;
        m[[v, u]] = w;
    }
    NormalizedAdjacency { matrix: m, degrees }
}

/// All-pairs BFS hop counts. Unreachable pairs hold `n`.
pub fn shortest_path_hops(g: &Graph) -> Array2<usize> {
    let n = g.num_nodes();
    let mut dist = Array2::from_elem((n, n), n);
    let mut queue = VecDeque::new();
    for s in 0..n {
        dist[[s, s]] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            let d = dist[[s, v]];
            for &w in g.neighbors(v) {
                if dist[[s, w]] == n {
                    dist[[s, w]] = d + 1;
                    queue.push_back(w);
                }
            }
        }
    }
    dist
}

/// Planted-partition generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    /// One row of feature means per block.
    pub means: Matrix,
    pub noise_std: f64,
}

impl SbmSpec {
    /// Blocks whose means are one-hot over disjoint feature groups, scaled so
    /// that each group coordinate sits `separation * noise_std` above the
    /// other blocks.
    pub fn separated(
        block_sizes: Vec<usize>,
        num_features: usize,
        p_in: f64,
        p_out: f64,
        noise_std: f64,
        separation: f64,
    ) -> Self {
        let k = block_sizes.len();
        let mut means = Array2::zeros((k, num_features));
        if k > 0 {
            for j in 0..num_features {
                means[[j % k, j]] = separation * noise_std;
            }
        }
        Self {
            block_sizes,
            p_in,
            p_out,
            means,
            noise_std,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_in) || !prob(self.p_out) {
            return Err(Error::Config("SBM probabilities must lie in [0, 1]".into()));
        }
        if self.means.nrows() != self.block_sizes.len() {
            return Err(Error::Config(format!(
                "{} mean rows for {} blocks",
                self.means.nrows(),
                self.block_sizes.len()
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("feature noise std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Samples a graph from `spec`. Edges are drawn first in `(i, j)` row-major
/// order over `i < j`, then features node by node, all from one ChaCha stream.
pub fn generate_sbm(spec: &SbmSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = spec
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    let n = labels.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let f = spec.means.ncols();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut features = Array2::zeros((n, f));
    for (i, &b) in labels.iter().enumerate() {
        for j in 0..f {
            let eps = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            features[[i, j]] = spec.means[[b, j]] + eps;
        }
    }
    Graph::new(features, edges, Some(labels))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, line_no, format!("malformed number {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    let f = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), f), flat).expect("rectangular rows"))
}

/// Reads an edge list, validating against `n` nodes. Reversed and repeated
/// lines collapse to one edge.
pub fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let mut it = line.split_whitespace();
        let mut endpoint = || -> Result<usize> {
            let tok = it
                .next()
                .ok_or_else(|| parse_err(path, line_no, "expected two endpoints"))?;
            tok.parse::<usize>()
                .map_err(|_| parse_err(path, line_no, format!("malformed node id {tok:?}")))
        };
        let (u, v) = (endpoint()?, endpoint()?);
        if it.next().is_some() {
            return Err(parse_err(path, line_no, "trailing tokens after edge"));
        }
        if u == v {
            return Err(Error::SelfLoop { line: line_no });
        }
        for endpoint in [u, v] {
            if endpoint >= n {
                return Err(Error::EndpointRange {
                    endpoint,
                    n,
                    line: line_no,
                });
            }
        }
        edges.push((u, v));
    }
    Ok(edges)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    content_lines(&text)
        .map(|(line_no, line)| {
            line.parse::<usize>()
                .map_err(|_| parse_err(path, line_no, format!("malformed label {line:?}")))
        })
        .collect()
}

pub fn load_graph(
    features_path: &Path,
    edges_path: &Path,
    labels_path: Option<&Path>,
) -> Result<Graph> {
    let features = read_features(features_path)?;
    let edges = read_edges(edges_path, features.nrows())?;
    let labels = labels_path.map(read_labels).transpose()?;
    Graph::new(features, edges, labels)
}

/// Decimal text that round-trips every `f64` exactly.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn features_to_csv(features: &Matrix) -> String {
    let mut out = String::new();
    for row in features.rows() {
        let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn edges_to_text(edges: &[(usize, usize)]) -> String {
    let mut out = String::new();
    for (u, v) in edges {
        let _ = writeln!(out, "{u} {v}");
    }
    out
}

pub fn labels_to_text(labels: &[usize]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    out
}

/// Paths written by [`save_graph`].
#[derive(Debug, Clone)]
pub struct GraphFiles {
    pub features: PathBuf,
    pub edges: PathBuf,
    pub labels: Option<PathBuf>,
}

/// Writes `features.csv`, `edges.txt` and (when present) `labels.txt` into `dir`.
pub fn save_graph(g: &Graph, dir: &Path) -> Result<GraphFiles> {
    fs::create_dir_all(dir)?;
    let files = GraphFiles {
        features: dir.join("features.csv"),
        edges: dir.join("edges.txt"),
        labels: g.labels().map(|_| dir.join("labels.txt")),
    };
    fs::write(&files.features, features_to_csv(g.features()))?;
    fs::write(&files.edges, edges_to_text(g.edges()))?;
    if let (Some(path), Some(labels)) = (&files.labels, g.labels()) {
        fs::write(path, labels_to_text(labels))?;
    }
    Ok(files)
}
