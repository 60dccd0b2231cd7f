//! Histogram-binned regression trees, bagged forests and boosted ensembles.
//!
//! Split thresholds are always values seen in training, so a tree behaves
//! the same under any strictly increasing rescaling of a feature.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Nodes above this size build their histograms feature-parallel.
const PAR_ROWS: usize = 8192;

/// Column-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: Vec<Vec<f64>>,
}

impl Matrix {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], width: usize) -> Self {
        let mut cols = vec![Vec::with_capacity(rows.len()); width];
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), width, "ragged feature rows");
            for (c, &v) in cols.iter_mut().zip(r) {
                c.push(v);
            }
        }
        Self { rows: rows.len(), cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[i]).collect()
    }
}

/// Quantized copy of a matrix with the cut values for each feature.
pub(crate) struct Binned {
    cuts: Vec<Vec<f64>>,
    bins: Vec<Vec<u16>>,
}

impl Binned {
    pub(crate) fn new(x: &Matrix, max_bins: usize) -> Self {
        let max_bins = max_bins.clamp(2, u16::MAX as usize);
        let cuts: Vec<Vec<f64>> = x.cols.par_iter().map(|c| cut_points(c, max_bins)).collect();
        let bins = x
            .cols
            .par_iter()
            .zip(&cuts)
            .map(|(c, k)| c.iter().map(|&v| k.partition_point(|&t| t < v) as u16).collect())
            .collect();
        Self { cuts, bins }
    }

    fn width(&self) -> usize {
        self.cuts.len()
    }

    fn bin_count(&self, f: usize) -> usize {
        self.cuts[f].len() + 1
    }
}

/// Up to `max_bins − 1` distinct training values; `x <= cut[k]` sends a
/// row to bins `0..=k`.
fn cut_points(col: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq = sorted.clone();
    uniq.dedup();
    if uniq.len() <= max_bins {
        uniq.pop();
        return uniq;
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..max_bins).map(|k| sorted[k * n / max_bins]).collect();
    cuts.dedup();
    let top = sorted[n - 1];
    cuts.retain(|&c| c < top);
    cuts
}

/// Flat binary tree. A node is a leaf when `feature < 0`; `value` holds the
/// split threshold for inner nodes and the output for leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    feature: Vec<i32>,
    value: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let f = self.feature[i];
            if f < 0 {
                return self.value[i];
            }
            i = if x[f as usize] <= self.value[i] {
                self.left[i]
            } else {
                self.right[i]
            } as usize;
        }
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.feature.iter().filter(|&&f| f < 0).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            if t.feature[i] < 0 {
                0
            } else {
                1 + go(t, t.left[i] as usize).max(go(t, t.right[i] as usize))
            }
        }
        go(self, 0)
    }

    fn scale_leaves(&mut self, k: f64) {
        for (f, v) in self.feature.iter().zip(self.value.iter_mut()) {
            if *f < 0 {
                *v *= k;
            }
        }
    }

    pub(crate) fn check(&self, width: usize) -> Result<(), String> {
        let n = self.feature.len();
        if n == 0 || self.value.len() != n || self.left.len() != n || self.right.len() != n {
            return Err("tree arrays have inconsistent lengths".into());
        }
        for i in 0..n {
            if self.feature[i] >= 0 {
                if self.feature[i] as usize >= width {
                    return Err(format!("node {i} splits on feature {} of {width}", self.feature[i]));
                }
                // Children always follow their parent, which also rules out cycles.
                for c in [self.left[i], self.right[i]] {
                    if c as usize <= i || c as usize >= n {
                        return Err(format!("node {i} has bad child {c}"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams {
    /// 0 means unlimited.
    pub max_depth: usize,
    /// 0 means unlimited.
    pub max_leaves: usize,
    /// Smallest total weight allowed in a leaf.
    pub min_leaf: f64,
    /// Features tried per node; the full set when `>= width`.
    pub mtry: usize,
}

#[derive(Clone, Copy)]
struct Cand {
    gain: f64,
    feature: usize,
    bin: usize,
}

struct Pending {
    node: usize,
    rows: Vec<u32>,
    depth: usize,
    w: f64,
    wy: f64,
    hist: Option<Vec<Vec<[f64; 2]>>>,
    best: Option<Cand>,
}

/// Grown tree plus the rows that landed in each leaf.
pub(crate) struct Grown {
    pub tree: Tree,
    pub leaves: Vec<(usize, Vec<u32>)>,
}

/// Grows one tree minimizing weighted squared error, always splitting the
/// leaf with the largest gain next.
pub(crate) fn grow(
    data: &Binned,
    y: &[f64],
    w: &[f64],
    rows: Vec<u32>,
    p: GrowParams,
    rng: &mut ChaCha8Rng,
) -> Grown {
    let d = data.width();
    let full = p.mtry >= d;
    let mut tree = Tree {
        feature: vec![-1],
        value: vec![0.0],
        left: vec![0],
        right: vec![0],
    };
    let (w0, wy0) = totals(&rows, y, w);
    let mut root = Pending {
        node: 0,
        rows,
        depth: 0,
        w: w0,
        wy: wy0,
        hist: None,
        best: None,
    };
    evaluate(data, y, w, &mut root, None, p, full, rng);
    let mut open = vec![root];
    let mut leaves = 1usize;
    loop {
        if p.max_leaves > 0 && leaves >= p.max_leaves {
            break;
        }
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(k, n)| n.best.map(|b| (k, b.gain, n.node)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)));
        let Some((k, _, _)) = pick else { break };
        let mut node = open.swap_remove(k);
        let b = node.best.expect("picked node has a split");
        let col = &data.bins[b.feature];
        let (lrows, rrows): (Vec<u32>, Vec<u32>) =
            node.rows.iter().partition(|&&r| col[r as usize] as usize <= b.bin);
        let li = tree.feature.len();
        let ri = li + 1;
        tree.feature[node.node] = b.feature as i32;
        tree.value[node.node] = data.cuts[b.feature][b.bin];
        tree.left[node.node] = li as u32;
        tree.right[node.node] = ri as u32;
        for _ in 0..2 {
            tree.feature.push(-1);
            tree.value.push(0.0);
            tree.left.push(0);
            tree.right.push(0);
        }
        let (lw, lwy) = totals(&lrows, y, w);
        let mk = |idx, rows, w, wy| Pending {
            node: idx,
            rows,
            depth: node.depth + 1,
            w,
            wy,
            hist: None,
            best: None,
        };
        let mut l = mk(li, lrows, lw, lwy);
        let mut r = mk(ri, rrows, node.w - lw, node.wy - lwy);
        let parent_hist = node.hist.take();
        if let Some(ph) = parent_hist {
            // Build the smaller child directly and derive the other.
            let (small, big) = if l.rows.len() <= r.rows.len() {
                (&mut l, &mut r)
            } else {
                (&mut r, &mut l)
            };
            evaluate(data, y, w, small, None, p, full, rng);
            let sh = small.hist.as_ref().expect("full histograms are kept");
            let bh: Vec<Vec<[f64; 2]>> = ph
                .iter()
                .zip(sh)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| [x[0] - y[0], x[1] - y[1]]).collect())
                .collect();
            evaluate(data, y, w, big, Some(bh), p, full, rng);
        } else {
            evaluate(data, y, w, &mut l, None, p, full, rng);
            evaluate(data, y, w, &mut r, None, p, full, rng);
        }
        node.rows = Vec::new();
        open.push(l);
        open.push(r);
        leaves += 1;
    }
    let mut out = Vec::with_capacity(open.len());
    for n in open {
        tree.value[n.node] = if n.w > 0.0 { n.wy / n.w } else { 0.0 };
        out.push((n.node, n.rows));
    }
    out.sort_by_key(|(n, _)| *n);
    Grown { tree, leaves: out }
}

fn totals(rows: &[u32], y: &[f64], w: &[f64]) -> (f64, f64) {
    let mut sw = 0.0;
    let mut swy = 0.0;
    for &r in rows {
        let r = r as usize;
        sw += w[r];
        swy += w[r] * y[r];
    }
    (sw, swy)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    data: &Binned,
    y: &[f64],
    w: &[f64],
    n: &mut Pending,
    given: Option<Vec<Vec<[f64; 2]>>>,
    p: GrowParams,
    full: bool,
    rng: &mut ChaCha8Rng,
) {
    let d = data.width();
    let splittable = (p.max_depth == 0 || n.depth < p.max_depth) && n.w >= 2.0 * p.min_leaf && n.rows.len() >= 2;
    if !splittable && !full {
        return;
    }
    let build = |f: usize| -> Vec<[f64; 2]> {
        let mut h = vec![[0.0; 2]; data.bin_count(f)];
        let col = &data.bins[f];
        for &r in &n.rows {
            let r = r as usize;
            let e = &mut h[col[r] as usize];
            e[0] += w[r];
            e[1] += w[r] * y[r];
        }
        h
    };
    let (feats, hist): (Vec<usize>, Vec<Vec<[f64; 2]>>) = if full {
        let feats: Vec<usize> = (0..d).collect();
        let hist = given.unwrap_or_else(|| {
            if n.rows.len() >= PAR_ROWS {
                feats.par_iter().map(|&f| build(f)).collect()
            } else {
                feats.iter().map(|&f| build(f)).collect()
            }
        });
        (feats, hist)
    } else {
        // Draw features in random order until `mtry` of them vary within
        // the node; constant ones do not count.
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(rng);
        let mut picked = Vec::with_capacity(p.mtry);
        for f in order {
            if picked.len() >= p.mtry.max(1) {
                break;
            }
            let h = build(f);
            if h.iter().filter(|e| e[0] > 0.0).count() > 1 {
                picked.push((f, h));
            }
        }
        picked.sort_by_key(|(f, _)| *f);
        picked.into_iter().unzip()
    };
    if splittable {
        let mut sse = 0.0;
        for &r in &n.rows {
            let r = r as usize;
            sse += w[r] * y[r] * y[r];
        }
        let parent = n.wy * n.wy / n.w;
        sse -= parent;
        let mut best: Option<Cand> = None;
        if sse > 1e-12 * (sse + parent).abs().max(f64::MIN_POSITIVE) {
            for (h, &f) in hist.iter().zip(&feats) {
                let mut lw = 0.0;
                let mut lwy = 0.0;
                for (bin, e) in h.iter().enumerate().take(h.len() - 1) {
                    lw += e[0];
                    lwy += e[1];
                    let rw = n.w - lw;
                    if lw < p.min_leaf || e[0] == 0.0 {
                        continue;
                    }
                    if rw < p.min_leaf {
                        break;
                    }
                    let rwy = n.wy - lwy;
                    let gain = lwy * lwy / lw + rwy * rwy / rw - parent;
                    if gain > 1e-9 * sse && best.is_none_or(|b| gain > b.gain) {
                        best = Some(Cand { gain, feature: f, bin });
                    }
                }
            }
        }
        n.best = best;
    }
    if full {
        n.hist = Some(hist);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ForestParams {
    pub n_trees: usize,
    pub grow: GrowParams,
    pub seed: u64,
    pub max_bins: usize,
}

impl Forest {
    /// Bagged trees on 0/1 targets. Tree `t` draws its bootstrap from
    /// stream `t` of the seed, so the result is independent of threading.
    pub(crate) fn fit(x: &Matrix, y: &[f64], p: ForestParams) -> Self {
        let data = Binned::new(x, p.max_bins);
        let n = x.rows();
        let trees = (0..p.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
                rng.set_stream(t as u64);
                let mut w = vec![0.0; n];
                for _ in 0..n {
                    w[rng.gen_range(0..n)] += 1.0;
                }
                let rows: Vec<u32> = (0..n as u32).filter(|&i| w[i as usize] > 0.0).collect();
                grow(&data, y, &w, rows, p.grow, &mut rng).tree
            })
            .collect();
        Self { trees, width: x.width() }
    }

    /// Fraction of trees voting positive; a leaf at exactly one half votes
    /// positive.
    pub fn vote(&self, x: &[f64]) -> f64 {
        let yes = self.trees.iter().filter(|t| t.predict(x) >= 0.5).count();
        yes as f64 / self.trees.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boosted {
    pub base: f64,
    pub trees: Vec<Tree>,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BoostParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub grow: GrowParams,
    pub seed: u64,
    pub max_bins: usize,
}

impl Boosted {
    /// Least-squares boosting from the target mean. Leaf outputs are stored
    /// already shrunk by the learning rate.
    pub(crate) fn fit(x: &Matrix, y: &[f64], p: BoostParams) -> Self {
        let data = Binned::new(x, p.max_bins);
        let n = x.rows();
        let base = if n == 0 { 0.0 } else { y.iter().sum::<f64>() / n as f64 };
        let w = vec![1.0; n];
        let mut f = vec![base; n];
        let mut resid = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut trees = Vec::with_capacity(p.n_trees);
        for _ in 0..p.n_trees {
            for i in 0..n {
                resid[i] = y[i] - f[i];
            }
            let g = grow(&data, &resid, &w, (0..n as u32).collect(), p.grow, &mut rng);
            let mut tree = g.tree;
            tree.scale_leaves(p.learning_rate);
            for (node, rows) in &g.leaves {
                let v = tree.value[*node];
                for &r in rows {
                    f[r as usize] += v;
                }
            }
            let stump = tree.node_count() == 1;
            trees.push(tree);
            if stump {
                // Nothing left to fit; later stages would all be this leaf.
                break;
            }
        }
        Self {
            base,
            trees,
            width: x.width(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut s = self.base;
        for t in &self.trees {
            s += t.predict(x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cuts_are_training_values() {
        let col: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let c = cut_points(&col, 16);
        assert!(c.len() <= 15);
        assert!(c.iter().all(|v| col.contains(v)));
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn few_unique_values_get_one_cut_each() {
        let c = cut_points(&[3.0, 1.0, 2.0, 1.0], 256);
        assert_eq!(c, vec![1.0, 2.0]);
    }

    #[test]
    fn step_function_is_recovered() {
        let rows: Vec<[f64; 1]> = (0..200).map(|i| [i as f64]).collect();
        let y: Vec<f64> = (0..200).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect();
        let x = Matrix::from_rows(&rows, 1);
        let b = Boosted::fit(
            &x,
            &y,
            BoostParams {
                n_trees: 50,
                learning_rate: 0.5,
                grow: GrowParams {
                    max_depth: 0,
                    max_leaves: 2,
                    min_leaf: 1.0,
                    mtry: 1,
                },
                seed: 0,
                max_bins: 256,
            },
        );
        assert!((b.predict(&[10.0]) - 1.0).abs() < 1e-6);
        assert!(b.predict(&[150.0]).abs() < 1e-6);
        assert_eq!(b.trees[0].value[0], 49.0);
    }

    #[test]
    fn forest_votes() {
        let rows: Vec<[f64; 2]> = (0..300).map(|i| [i as f64, (i % 7) as f64]).collect();
        let y: Vec<f64> = (0..300).map(|i| if i < 100 { 1.0 } else { 0.0 }).collect();
        let x = Matrix::from_rows(&rows, 2);
        let f = Forest::fit(
            &x,
            &y,
            ForestParams {
                n_trees: 20,
                grow: GrowParams {
                    max_depth: 8,
                    max_leaves: 0,
                    min_leaf: 1.0,
                    mtry: 1,
                },
                seed: 3,
                max_bins: 256,
            },
        );
        assert_eq!(f.vote(&[20.0, 1.0]), 1.0);
        assert_eq!(f.vote(&[250.0, 1.0]), 0.0);
        for t in &f.trees {
            t.check(2).unwrap();
            assert!(t.depth() <= 8);
        }
    }
}
