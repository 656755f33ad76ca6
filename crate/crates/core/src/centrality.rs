//! Node centrality encodings and attention spatial bias.
//!
//! Betweenness and closeness are unnormalised; degree is divided by the
//! maximum degree. Betweenness counts each unordered pair once.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::graph::{fmt_f64, Graph};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Measure {
    Degree,
    Betweenness,
    Closeness,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Degree, Measure::Betweenness, Measure::Closeness];

    /// Short label used in result tables.
    pub fn abbrev(self) -> &'static str {
        match self {
            Measure::Degree => "DC",
            Measure::Betweenness => "BC",
            Measure::Closeness => "CC",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Degree => "degree",
            Measure::Betweenness => "betweenness",
            Measure::Closeness => "closeness",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "degree" | "dc" => Ok(Measure::Degree),
            "betweenness" | "bc" => Ok(Measure::Betweenness),
            "closeness" | "cc" => Ok(Measure::Closeness),
            other => Err(Error::Config(format!("unknown centrality measure {other:?}"))),
        }
    }
}

/// Parses a comma list such as `degree,closeness` into a sorted, deduplicated set.
pub fn parse_measures(list: &str) -> Result<Vec<Measure>> {
    let mut out = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Measure>>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn degree_centrality(g: &Graph) -> Vec<f64> {
    let n = g.num_nodes();
    let max = (0..n).map(|v| g.degree(v)).max().unwrap_or(0);
    if max == 0 {
        return vec![0.0; n];
    }
    (0..n).map(|v| g.degree(v) as f64 / max as f64).collect()
}

/// Brandes' algorithm on unit-weight edges.
///
/// Per-source dependencies are accumulated in ascending source order, and the
/// ordered-pair total is halved at the end.
pub fn betweenness_centrality(g: &Graph) -> Vec<f64> {
    let n = g.num_nodes();
    let mut centrality = vec![0.0; n];

    let mut stack = Vec::with_capacity(n);
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut sigma = vec![0.0f64; n];
    let mut dist = vec![-1i64; n];
    let mut delta = vec![0.0f64; n];
    let mut queue = VecDeque::with_capacity(n);

    for s in 0..n {
        stack.clear();
        for v in 0..n {
            preds[v].clear();
            sigma[v] = 0.0;
            dist[v] = -1;
            delta[v] = 0.0;
        }
        sigma[s] = 1.0;
        dist[s] = 0;
        queue.push_back(s);

        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in g.neighbors(v) {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }

        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                centrality[w] += delta[w];
            }
        }
    }

    for c in &mut centrality {
        *c /= 2.0;
    }
    centrality
}

/// Reciprocal of the summed hop distance to every reachable node; 0 for
/// nodes that reach nothing.
pub fn closeness_centrality(g: &Graph) -> Vec<f64> {
    let n = g.num_nodes();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    (0..n)
        .map(|s| {
            dist.iter_mut().for_each(|d| *d = usize::MAX);
            dist[s] = 0;
            queue.push_back(s);
            let mut total = 0usize;
            while let Some(v) = queue.pop_front() {
                total += dist[v];
                for &w in g.neighbors(v) {
                    if dist[w] == usize::MAX {
                        dist[w] = dist[v] + 1;
                        queue.push_back(w);
                    }
                }
            }
            if total == 0 {
                0.0
            } else {
                1.0 / total as f64
            }
        })
        .collect()
}

/// Per-node centrality vectors, one column per enabled measure in
/// (degree, betweenness, closeness) order.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralityMatrix {
    values: Matrix,
    measures: Vec<Measure>,
}

impl CentralityMatrix {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn measures(&self) -> &[Measure] {
        &self.measures
    }

    pub fn width(&self) -> usize {
        self.measures.len()
    }

    /// CSV with a header naming the measures.
    pub fn to_csv(&self) -> String {
        let mut out = self
            .measures
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn composite_centrality(g: &Graph, measures: &[Measure]) -> Result<CentralityMatrix> {
    let mut measures = measures.to_vec();
    measures.sort_unstable();
    measures.dedup();
    if measures.is_empty() {
        return Err(Error::Config("at least one centrality measure is required".into()));
    }
    let n = g.num_nodes();
    let mut values = Array2::zeros((n, measures.len()));
    for (col, m) in measures.iter().enumerate() {
        let column = match m {
            Measure::Degree => degree_centrality(g),
            Measure::Betweenness => betweenness_centrality(g),
            Measure::Closeness => closeness_centrality(g),
        };
        for (i, x) in column.into_iter().enumerate() {
            values[[i, col]] = x;
        }
    }
    Ok(CentralityMatrix { values, measures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialMode {
    Euclidean,
    ShortestPath,
}

impl SpatialMode {
    pub fn abbrev(self) -> &'static str {
        match self {
            SpatialMode::Euclidean => "ED",
            SpatialMode::ShortestPath => "SPD",
        }
    }
}

impl fmt::Display for SpatialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialMode::Euclidean => "euclidean",
            SpatialMode::ShortestPath => "shortest-path",
        })
    }
}

impl FromStr for SpatialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euclidean" | "ed" => Ok(SpatialMode::Euclidean),
            "shortest-path" | "shortest_path" | "spd" => Ok(SpatialMode::ShortestPath),
            other => Err(Error::Config(format!("unknown spatial mode {other:?}"))),
        }
    }
}

/// Attention neighbourhoods `N(i) ∪ {i}` with a bias value per stored pair.
///
/// Row `i` lists `(j, d(i, j))` sorted by `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBias {
    mode: SpatialMode,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SpatialBias {
    /// Builds a bias from explicit rows. Every row must contain its own node.
    pub fn from_rows(mode: SpatialMode, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if !row.iter().any(|&(j, _)| j == i) {
                return Err(Error::Contract(format!(
                    "spatial bias row {i} lacks its self entry"
                )));
            }
            if row.iter().any(|&(j, _)| j >= rows.len()) {
                return Err(Error::Contract(format!("spatial bias row {i} out of range")));
            }
        }
        Ok(Self { mode, rows })
    }

    pub fn mode(&self) -> SpatialMode {
        self.mode
    }

    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let row = self.rows.get(i)?;
        row.binary_search_by_key(&j, |&(k, _)| k)
            .ok()
            .map(|pos| row[pos].1)
    }

    pub fn num_pairs(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

pub fn spatial_bias(g: &Graph, mode: SpatialMode) -> SpatialBias {
    let x = g.features();
    let rows = (0..g.num_nodes())
        .map(|i| {
            let mut row: Vec<(usize, f64)> = g
                .neighbors(i)
                .iter()
                .map(|&j| {
                    let d = match mode {
                        SpatialMode::Euclidean => {
                            let diff = &x.row(i) - &x.row(j);
                            diff.dot(&diff).sqrt()
                        }
                        SpatialMode::ShortestPath => 1.0,
                    };
                    (j, d)
                })
                .collect();
            row.push((i, 0.0));
            row.sort_unstable_by_key(|&(j, _)| j);
            row
        })
        .collect();
    SpatialBias { mode, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(Array2::zeros((n, 1)), edges.iter().copied(), None).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn degree_examples() {
        close(&degree_centrality(&graph(3, &[(0, 1), (1, 2)])), &[0.5, 1.0, 0.5]);
        close(&degree_centrality(&graph(3, &[(0, 1), (1, 2), (0, 2)])), &[1.0; 3]);
        close(&degree_centrality(&graph(3, &[])), &[0.0; 3]);
    }

    #[test]
    fn betweenness_examples() {
        close(&betweenness_centrality(&graph(3, &[(0, 1), (1, 2)])), &[0.0, 1.0, 0.0]);
        close(
            &betweenness_centrality(&graph(4, &[(0, 1), (0, 2), (0, 3)])),
            &[3.0, 0.0, 0.0, 0.0],
        );
        close(&betweenness_centrality(&graph(3, &[(0, 1), (1, 2), (0, 2)])), &[0.0; 3]);
    }

    #[test]
    fn betweenness_splits_over_equal_paths() {
        // 4-cycle: each node lies on one of the two shortest paths of its opposite pair.
        close(
            &betweenness_centrality(&graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)])),
            &[0.5; 4],
        );
    }

    #[test]
    fn closeness_examples() {
        close(
            &closeness_centrality(&graph(3, &[(0, 1), (1, 2)])),
            &[1.0 / 3.0, 0.5, 1.0 / 3.0],
        );
        close(
            &closeness_centrality(&graph(4, &[(0, 1), (0, 2), (0, 3)])),
            &[1.0 / 3.0, 0.2, 0.2, 0.2],
        );
        close(&closeness_centrality(&graph(3, &[(0, 1)])), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn composite_examples() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let c = composite_centrality(&g, &Measure::ALL).unwrap();
        let third = 1.0 / 3.0;
        let expected = array![[0.5, 0.0, third], [1.0, 1.0, 0.5], [0.5, 0.0, third]];
        assert!(c.values().iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-12));

        let d = composite_centrality(&g, &[Measure::Degree]).unwrap();
        assert_eq!(d.values().ncols(), 1);
        close(&d.values().column(0).to_vec(), &degree_centrality(&g));

        assert!(matches!(composite_centrality(&g, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn composite_orders_columns() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let c = composite_centrality(&g, &[Measure::Closeness, Measure::Degree]).unwrap();
        assert_eq!(c.measures(), &[Measure::Degree, Measure::Closeness]);
        assert_eq!(parse_measures("cc, degree,DC").unwrap(), vec![Measure::Degree, Measure::Closeness]);
    }

    #[test]
    fn spatial_examples() {
        let g = Graph::new(array![[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]], [(0, 1), (1, 2)], None).unwrap();
        let ed = spatial_bias(&g, SpatialMode::Euclidean);
        assert_eq!(ed.get(0, 1), Some(5.0));
        assert_eq!(ed.get(1, 0), Some(5.0));
        assert_eq!(ed.get(1, 2), Some(0.0));
        assert_eq!(ed.get(2, 2), Some(0.0));
        assert_eq!(ed.get(0, 2), None);

        let spd = spatial_bias(&g, SpatialMode::ShortestPath);
        assert_eq!(spd.get(0, 1), Some(1.0));
        assert_eq!(spd.get(1, 1), Some(0.0));
        assert_eq!(spd.num_pairs(), 3 + 2 * 2);
    }

    #[test]
    fn csv_dump() {
        let g = graph(2, &[(0, 1)]);
        let c = composite_centrality(&g, &[Measure::Degree]).unwrap();
        assert_eq!(c.to_csv().lines().next(), Some("degree"));
        assert_eq!(c.to_csv().lines().count(), 3);
    }
}
