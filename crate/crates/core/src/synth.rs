//! Synthetic graphs with known structure, for tests and benchmarks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::SparseGraph;
use crate::rng;
use crate::tensor::NdArray;

#[derive(Clone, Debug)]
pub struct SbmSpec {
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Distance between class means relative to the unit feature noise.
    /// Zero gives features that carry no label information.
    pub signal: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            nodes: 200,
            blocks: 2,
            p_in: 0.2,
            p_out: 0.01,
            feature_dim: 8,
            signal: 2.0,
            seed: 0,
        }
    }
}

/// Stochastic block model; node `v` belongs to block `v % blocks` and its
/// label is its block. Features are Gaussian around a per-block mean.
pub fn sbm(spec: &SbmSpec) -> Result<SparseGraph> {
    let mut r = rng::stream(spec.seed, "synth.sbm", 0);
    let n = spec.nodes;
    let labels: Vec<usize> = (0..n).map(|v| v % spec.blocks).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if r.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..spec.blocks)
        .map(|_| (0..spec.feature_dim).map(|_| normal.sample(&mut r)).collect())
        .collect();
    let scale = spec.signal / (2.0f64).sqrt();
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    for &l in &labels {
        for mu in &means[l] {
            data.push(scale * mu + normal.sample(&mut r));
        }
    }
    let features = NdArray::matrix(n, spec.feature_dim, data)?;
    SparseGraph::from_edges(n, &edges, features, labels, spec.blocks)
}

/// Accuracy of assigning each row to the nearest class centroid (centroids
/// computed from all rows).
pub fn nearest_centroid_accuracy(x: &NdArray, labels: &[usize], classes: usize) -> f64 {
    let d = x.cols();
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(x.row(r)) {
            *c += v;
        }
    }
    for (c, &k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= k.max(1) as f64);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let dist = |c: &Vec<f64>| c.iter().zip(x.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..classes)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}
