//! Transductive and inductive node splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[serde(alias = "trans")]
    Transductive,
    #[serde(alias = "ind")]
    Inductive,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trans" | "transductive" => Ok(Self::Transductive),
            "ind" | "inductive" => Ok(Self::Inductive),
            other => Err(Error::invalid(format!("unknown split mode {:?} (expected trans|ind)", other))),
        }
    }
}

impl SplitMode {
    pub fn short(self) -> &'static str {
        match self {
            Self::Transductive => "trans",
            Self::Inductive => "ind",
        }
    }
}

/// Disjoint, sorted node sets. `test` holds the observed unlabeled nodes;
/// in inductive mode the held-out nodes live in `inductive` instead.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub labeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub inductive: Vec<usize>,
}

/// Rounds 20% of `n` to the nearest integer, ties downward.
pub fn inductive_count(n: usize) -> usize {
    (n * 20 + 49) / 100
}

impl SplitSpec {
    /// Nodes visible while training: everything except the inductive set.
    pub fn training_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .labeled
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    /// Nodes whose accuracy is reported as the test score.
    pub fn eval_nodes(&self) -> &[usize] {
        match self.mode {
            SplitMode::Transductive => &self.test,
            SplitMode::Inductive => &self.inductive,
        }
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        for set in [&self.labeled, &self.val, &self.test, &self.inductive] {
            for &v in set {
                if v >= num_nodes {
                    return Err(Error::NodeOutOfRange { index: v, num_nodes });
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Error::invalid(format!("node {} appears in two split sets", v)));
                }
            }
        }
        if self.mode == SplitMode::Transductive && !self.inductive.is_empty() {
            return Err(Error::invalid("transductive split with inductive nodes"));
        }
        Ok(())
    }
}

pub fn make_split(
    g: &SparseGraph,
    mode: SplitMode,
    seed: u64,
    labeled_per_class: usize,
    val_size: usize,
) -> Result<SplitSpec> {
    let n = g.num_nodes();
    let c = g.num_classes();
    if labeled_per_class * c + val_size > n {
        return Err(Error::invalid(format!(
            "{} labeled per class x {} classes + {} val exceeds {} nodes",
            labeled_per_class, c, val_size, n
        )));
    }
    let mut r = rng::stream(seed, "split", 0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (v, &l) in g.labels().iter().enumerate() {
        by_class[l].push(v);
    }
    let mut taken = vec![false; n];
    let mut labeled = Vec::with_capacity(labeled_per_class * c);
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.len() < labeled_per_class {
            return Err(Error::ClassTooSmall {
                class,
                available: members.len(),
                requested: labeled_per_class,
            });
        }
        members.shuffle(&mut r);
        for &v in &members[..labeled_per_class] {
            taken[v] = true;
            labeled.push(v);
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&v| !taken[v]).collect();
    rest.shuffle(&mut r);
    let mut val = rest[..val_size].to_vec();
    let mut test = rest[val_size..].to_vec();
    let mut inductive = Vec::new();
    if mode == SplitMode::Inductive {
        let k = inductive_count(test.len());
        inductive = test.drain(..k).collect();
    }
    for set in [&mut labeled, &mut val, &mut test, &mut inductive] {
        set.sort_unstable();
    }
    Ok(SplitSpec {
        mode,
        labeled,
        val,
        test,
        inductive,
    })
}

#[derive(Deserialize)]
struct SplitFile {
    labeled: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

/// Reads an explicit transductive split from `splits.json` if the bundle has
/// one.
pub fn load_split_file(dir: impl AsRef<Path>, num_nodes: usize) -> Result<Option<SplitSpec>> {
    let path = dir.as_ref().join("splits.json");
    if !path.exists() {
        return Ok(None);
    }
    let raw: SplitFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let mut spec = SplitSpec {
        mode: SplitMode::Transductive,
        labeled: raw.labeled,
        val: raw.val,
        test: raw.test,
        inductive: Vec::new(),
    };
    for set in [&mut spec.labeled, &mut spec.val, &mut spec.test] {
        set.sort_unstable();
    }
    spec.validate(num_nodes)?;
    Ok(Some(spec))
}

/// Training graph for an inductive split: every edge touching an inductive
/// node is removed. The node set and numbering are unchanged.
pub fn cut_inductive_edges(g: &SparseGraph, s: &SplitSpec) -> Result<SparseGraph> {
    if s.mode != SplitMode::Inductive {
        return Err(Error::invalid("cut_inductive_edges requires an inductive split"));
    }
    let mut held_out = vec![false; g.num_nodes()];
    for &v in &s.inductive {
        if v >= g.num_nodes() {
            return Err(Error::NodeOutOfRange {
                index: v,
                num_nodes: g.num_nodes(),
            });
        }
        held_out[v] = true;
    }
    Ok(g.filter_edges(|v| !held_out[v]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NdArray;

    fn labeled_graph(n: usize, classes: usize, edges: &[(usize, usize)]) -> SparseGraph {
        let labels = (0..n).map(|v| v % classes).collect();
        SparseGraph::from_edges(n, edges, NdArray::zeros(&[n, 1]), labels, classes).unwrap()
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(inductive_count(100), 20);
        assert_eq!(inductive_count(12), 2); // 2.4
        assert_eq!(inductive_count(13), 3); // 2.6
        assert_eq!(inductive_count(5), 1);
        assert_eq!(inductive_count(0), 0);
    }

    #[test]
    fn inductive_takes_twenty_percent_of_remaining() {
        let g = labeled_graph(110, 2, &[]);
        let s = make_split(&g, SplitMode::Inductive, 3, 5, 0).unwrap();
        assert_eq!(s.labeled.len(), 10);
        assert_eq!(s.inductive.len(), 20);
        assert_eq!(s.test.len(), 80);
        s.validate(110).unwrap();
    }

    #[test]
    fn same_seed_same_split() {
        let g = labeled_graph(60, 3, &[]);
        let a = make_split(&g, SplitMode::Inductive, 9, 4, 10).unwrap();
        let b = make_split(&g, SplitMode::Inductive, 9, 4, 10).unwrap();
        let c = make_split(&g, SplitMode::Inductive, 10, 4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn small_class_and_oversized_requests_fail() {
        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let skewed = SparseGraph::from_edges(10, &[], NdArray::zeros(&[10, 1]), labels, 2).unwrap();
        assert!(matches!(
            make_split(&skewed, SplitMode::Transductive, 0, 3, 0),
            Err(Error::ClassTooSmall { class: 1, available: 2, requested: 3 })
        ));
        let g = labeled_graph(10, 2, &[]);
        assert!(make_split(&g, SplitMode::Transductive, 0, 2, 7).is_err());
    }

    #[test]
    fn cut_edges_path_and_star() {
        let path = labeled_graph(3, 1, &[(0, 1), (1, 2)]);
        let mut s = SplitSpec {
            mode: SplitMode::Inductive,
            labeled: vec![0],
            val: vec![],
            test: vec![1],
            inductive: vec![2],
        };
        assert_eq!(cut_inductive_edges(&path, &s).unwrap().edges(), vec![(0, 1)]);
        s.inductive.clear();
        s.test = vec![1, 2];
        assert_eq!(cut_inductive_edges(&path, &s).unwrap().edges(), path.edges());

        let star = labeled_graph(5, 1, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let s = SplitSpec {
            mode: SplitMode::Inductive,
            labeled: vec![1, 2],
            val: vec![],
            test: vec![3, 4],
            inductive: vec![0],
        };
        assert_eq!(cut_inductive_edges(&star, &s).unwrap().num_edge_slots(), 0);
        let trans = SplitSpec {
            mode: SplitMode::Transductive,
            inductive: vec![],
            ..s
        };
        assert!(cut_inductive_edges(&star, &trans).is_err());
    }
}
