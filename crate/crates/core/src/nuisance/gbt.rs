//! Histogram-based least-squares gradient-boosted regression trees.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::rng;

const MAX_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    #[serde(default = "defaults::trees")]
    pub trees: usize,
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::rate")]
    pub rate: f64,
    #[serde(default = "defaults::subsample")]
    pub subsample: f64,
    #[serde(default = "defaults::min_leaf")]
    pub min_leaf: usize,
}

mod defaults {
    pub fn trees() -> usize {
        200
    }
    pub fn depth() -> usize {
        3
    }
    pub fn rate() -> f64 {
        0.1
    }
    pub fn subsample() -> f64 {
        0.8
    }
    pub fn min_leaf() -> usize {
        5
    }
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            trees: defaults::trees(),
            depth: defaults::depth(),
            rate: defaults::rate(),
            subsample: defaults::subsample(),
            min_leaf: defaults::min_leaf(),
        }
    }
}

/// One tree stored as a flat node array; node 0 is the root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub base: f64,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Quantile bin edges per feature; `edges[j][b]` is the upper edge of bin `b`.
fn bin_edges(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.columns()
        .into_iter()
        .map(|col| {
            let mut v: Vec<f64> = col.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup();
            if v.len() <= MAX_BINS {
                // midpoints between distinct values
                v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            } else {
                let mut e: Vec<f64> = (1..MAX_BINS)
                    .map(|b| {
                        let pos = b * (v.len() - 1) / MAX_BINS;
                        0.5 * (v[pos] + v[pos + 1])
                    })
                    .collect();
                e.dedup();
                e
            }
        })
        .collect()
}

fn bin_of(edges: &[f64], v: f64) -> u8 {
    edges.partition_point(|&e| e < v) as u8
}

struct Builder<'a> {
    bins: &'a [Vec<u8>],
    edges: &'a [Vec<f64>],
    grad: &'a [f64],
    params: &'a GbtParams,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let s: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let value = self.params.rate * s / rows.len().max(1) as f64;
        self.nodes.push(Node::Leaf { value });
        self.nodes.len() - 1
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let min_leaf = self.params.min_leaf.max(1);
        if depth == 0 || rows.len() < 2 * min_leaf {
            return self.leaf(&rows);
        }
        let total: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let n = rows.len() as f64;
        let parent = total * total / n;
        let mut best: Option<(f64, usize, usize)> = None;
        let mut sums = [0.0; MAX_BINS];
        let mut counts = [0usize; MAX_BINS];
        for (f, col) in self.bins.iter().enumerate() {
            let nb = self.edges[f].len() + 1;
            if nb < 2 {
                continue;
            }
            sums[..nb].fill(0.0);
            counts[..nb].fill(0);
            for &i in &rows {
                let b = col[i] as usize;
                sums[b] += self.grad[i];
                counts[b] += 1;
            }
            let (mut sl, mut cl) = (0.0, 0usize);
            for b in 0..nb - 1 {
                sl += sums[b];
                cl += counts[b];
                let cr = rows.len() - cl;
                if cl < min_leaf || cr < min_leaf {
                    continue;
                }
                let sr = total - sl;
                let gain = sl * sl / cl as f64 + sr * sr / cr as f64 - parent;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, feature, b)) = best else {
            return self.leaf(&rows);
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| (self.bins[feature][i] as usize) <= b);
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let left = self.build(left_rows, depth - 1);
        let right = self.build(right_rows, depth - 1);
        self.nodes[idx] = Node::Split { feature, threshold: self.edges[feature][b], left, right };
        idx
    }
}

pub fn fit_gbt(x: ArrayView2<f64>, y: ArrayView1<f64>, params: &GbtParams, seed: u64) -> Result<GbtModel> {
    let n = y.len();
    if n < 2 {
        return param("gradient boosting needs at least two rows");
    }
    if params.trees < 1 || params.depth < 1 {
        return param("trees and depth must be >= 1");
    }
    if !(params.rate > 0.0 && params.rate <= 1.0) {
        return param("learning rate must lie in (0, 1]");
    }
    if !(params.subsample > 0.0 && params.subsample <= 1.0) {
        return param("subsample must lie in (0, 1]");
    }
    let edges = bin_edges(x);
    let bins: Vec<Vec<u8>> = x
        .columns()
        .into_iter()
        .zip(&edges)
        .map(|(col, e)| col.iter().map(|&v| bin_of(e, v)).collect())
        .collect();
    let base = y.sum() / n as f64;
    let mut pred = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut rng = rng::rng(seed);
    let mut trees = Vec::with_capacity(params.trees);
    let mut buf = vec![0.0; x.ncols()];
    for _ in 0..params.trees {
        for i in 0..n {
            grad[i] = y[i] - pred[i];
        }
        let rows: Vec<usize> = if params.subsample < 1.0 {
            let picked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < params.subsample).collect();
            if picked.len() < 2 {
                (0..n).collect()
            } else {
                picked
            }
        } else {
            (0..n).collect()
        };
        let mut b = Builder { bins: &bins, edges: &edges, grad: &grad, params, nodes: Vec::new() };
        b.build(rows, params.depth);
        let tree = Tree { nodes: b.nodes };
        for i in 0..n {
            buf.iter_mut().zip(x.row(i).iter()).for_each(|(d, s)| *d = *s);
            pred[i] += tree.predict(&buf);
        }
        trees.push(tree);
    }
    Ok(GbtModel { base, trees })
}
