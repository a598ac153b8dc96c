//! Undirected node-classification graphs and the plain-text bundle format.
//!
//! A bundle is a directory holding `edges.tsv` (`u<TAB>v`, 0-based),
//! `features.csv` (one comma-separated row per node) and `labels.csv` (one
//! integer per node). Edges are symmetrized and deduplicated on load and
//! self-loops are dropped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::NdArray;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    num_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: NdArray,
    labels: Vec<usize>,
    num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyScheme {
    /// `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    Gcn,
    /// Row-normalized `A` without self-loops.
    RowMean,
}

impl SparseGraph {
    /// Builds a graph from an arbitrary edge list. Self-loops are dropped and
    /// every edge is stored in both directions exactly once.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: NdArray,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if !features.is_matrix() || features.rows() != num_nodes {
            return Err(Error::invalid(format!(
                "feature matrix {:?} does not have {} rows",
                features.shape(),
                num_nodes
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::invalid(format!("{} labels for {} nodes", labels.len(), num_nodes)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            for x in [u, v] {
                if x >= num_nodes {
                    return Err(Error::NodeOutOfRange { index: x, num_nodes });
                }
            }
            if u == v {
                continue;
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            targets.extend(list);
            offsets.push(targets.len());
        }
        Ok(Self {
            num_nodes,
            offsets,
            targets,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Directed edge slots; each undirected edge counts twice.
    pub fn num_edge_slots(&self) -> usize {
        self.targets.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &NdArray {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Sorted, deduplicated neighbor list of `v`.
    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        if v >= self.num_nodes {
            return Err(Error::NodeOutOfRange {
                index: v,
                num_nodes: self.num_nodes,
            });
        }
        Ok(self.adj(v))
    }

    pub(crate) fn adj(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Undirected edges `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .flat_map(|u| self.adj(u).iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
            .collect()
    }

    pub fn with_features(&self, features: NdArray) -> Result<Self> {
        if features.rows() != self.num_nodes {
            return Err(Error::shape("with_features", self.features.shape(), features.shape()));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Copy with each feature row scaled to unit L2 norm (zero rows stay zero).
    pub fn row_l2_normalized(&self) -> Self {
        let mut features = self.features.clone();
        for r in 0..features.rows() {
            let row = features.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Self {
            features,
            ..self.clone()
        }
    }

    /// Same node set with only the edges whose endpoints both satisfy `keep`.
    pub fn filter_edges(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut offsets = Vec::with_capacity(self.num_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for u in 0..self.num_nodes {
            if keep(u) {
                targets.extend(self.adj(u).iter().copied().filter(|&v| keep(v)));
            }
            offsets.push(targets.len());
        }
        Self {
            offsets,
            targets,
            ..self.clone()
        }
    }

    /// Subgraph induced on `nodes` (renumbered in the given order).
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Self> {
        let mut local = vec![usize::MAX; self.num_nodes];
        for (i, &v) in nodes.iter().enumerate() {
            if v >= self.num_nodes {
                return Err(Error::NodeOutOfRange {
                    index: v,
                    num_nodes: self.num_nodes,
                });
            }
            local[v] = i;
        }
        let mut edges = Vec::new();
        for (i, &v) in nodes.iter().enumerate() {
            for &u in self.adj(v) {
                if local[u] != usize::MAX {
                    edges.push((i, local[u]));
                }
            }
        }
        let features = self.features.select_rows(nodes)?;
        let labels = nodes.iter().map(|&v| self.labels[v]).collect();
        Self::from_edges(nodes.len(), &edges, features, labels, self.num_classes)
    }

    pub fn normalized_adjacency(&self, scheme: AdjacencyScheme) -> CsrMatrix {
        let n = self.num_nodes;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        match scheme {
            AdjacencyScheme::Gcn => {
                let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / ((self.degree(v) + 1) as f64).sqrt()).collect();
                for u in 0..n {
                    let mut row: Vec<usize> = self.adj(u).to_vec();
                    let pos = row.partition_point(|&v| v < u);
                    row.insert(pos, u);
                    for v in row {
                        indices.push(v);
                        values.push(inv_sqrt[u] * inv_sqrt[v]);
                    }
                    offsets.push(indices.len());
                }
            }
            AdjacencyScheme::RowMean => {
                for u in 0..n {
                    let nbrs = self.adj(u);
                    let w = if nbrs.is_empty() { 0.0 } else { 1.0 / nbrs.len() as f64 };
                    for &v in nbrs {
                        indices.push(v);
                        values.push(w);
                    }
                    offsets.push(indices.len());
                }
            }
        }
        CsrMatrix::new(n, n, offsets, indices, values).expect("adjacency is well formed")
    }

    /// Checks the structural invariants; used by tests and after loading.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.offsets.len() != self.num_nodes + 1 || self.offsets.last() != Some(&self.targets.len()) {
            return bad("offsets do not cover the edge slots");
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("offsets are not monotone");
        }
        for u in 0..self.num_nodes {
            for &v in self.adj(u) {
                if v >= self.num_nodes {
                    return bad("edge target out of range");
                }
                if v == u {
                    return bad("self-loop stored");
                }
                if self.adj(v).binary_search(&u).is_err() {
                    return bad("adjacency is not symmetric");
                }
            }
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Loads and validates a bundle directory. The class count is one more than
/// the largest label.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<SparseGraph> {
    let dir = dir.as_ref();
    let (edges_path, feat_path, label_path) =
        (dir.join("edges.tsv"), dir.join("features.csv"), dir.join("labels.csv"));
    let edges_txt = read(&edges_path)?;
    let feat_txt = read(&feat_path)?;
    let label_txt = read(&label_path)?;

    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in feat_txt.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(&feat_path, i + 1, format!("bad number {:?}", tok)))?;
            if !v.is_finite() {
                return Err(parse_err(&feat_path, i + 1, "non-finite feature"));
            }
            data.push(v);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(parse_err(
                    &feat_path,
                    i + 1,
                    format!("ragged row: {} values, expected {}", w, expected),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let features = NdArray::matrix(rows, width.unwrap_or(0), data)?;
    let n = rows;

    let mut labels = Vec::with_capacity(n);
    for (i, line) in label_txt.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let l: i64 = line
            .parse()
            .map_err(|_| parse_err(&label_path, i + 1, format!("bad label {:?}", line)))?;
        if l < 0 {
            return Err(Error::LabelOutOfRange {
                label: l.unsigned_abs() as usize,
                num_classes: 0,
            });
        }
        labels.push(l as usize);
    }
    if labels.len() != n {
        return Err(parse_err(
            &label_path,
            labels.len(),
            format!("{} labels for {} feature rows", labels.len(), n),
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);

    let mut edges = Vec::new();
    for (i, line) in edges_txt.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(&edges_path, i + 1, "expected `u<TAB>v`"));
        };
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(&edges_path, i + 1, format!("bad node index {:?}", t)))
        };
        edges.push((parse(a)?, parse(b)?));
    }
    let g = SparseGraph::from_edges(n, &edges, features, labels, num_classes)?;
    g.validate()?;
    Ok(g)
}

/// Writes a bundle directory readable by [`load_bundle`].
pub fn write_bundle(g: &SparseGraph, dir: impl AsRef<Path>) -> Result<()> {
    use std::fmt::Write as _;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut s = String::new();
    for (u, v) in g.edges() {
        writeln!(s, "{}\t{}", u, v).unwrap();
    }
    fs::write(dir.join("edges.tsv"), &s)?;
    s.clear();
    for r in 0..g.num_nodes() {
        let row: Vec<String> = g.features().row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(dir.join("features.csv"), &s)?;
    s.clear();
    for l in g.labels() {
        writeln!(s, "{}", l).unwrap();
    }
    fs::write(dir.join("labels.csv"), &s)?;
    Ok(())
}
