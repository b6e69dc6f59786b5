//! Hand-rolled CART trees shared by the ensemble regressor and the fault
//! classifier: axis-aligned splits, random feature subsampling per split,
//! least-squares or Gini impurity. Kept deliberately small — no pruning, no
//! surrogate splits.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: usize,
}

/// A fitted tree in parallel-array form. `feature[i] == -1` marks a leaf, in
/// which case `value[i]` carries the payload (mean target or class index);
/// otherwise `value[i]` is the split threshold and rows with
/// `x[feature] <= value` descend left.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    feature: Vec<i32>,
    value: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
}

impl Tree {
    /// A single-node tree that always answers `payload`.
    pub fn leaf(payload: f64) -> Self {
        let mut tree = Self::default();
        tree.push_leaf(payload);
        tree
    }

    fn push_leaf(&mut self, payload: f64) -> usize {
        self.feature.push(-1);
        self.value.push(payload);
        self.left.push(0);
        self.right.push(0);
        self.feature.len() - 1
    }

    fn push_split(&mut self, feature: usize, threshold: f64) -> usize {
        self.feature.push(feature as i32);
        self.value.push(threshold);
        self.left.push(0);
        self.right.push(0);
        self.feature.len() - 1
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        loop {
            let f = self.feature[node];
            if f < 0 {
                return self.value[node];
            }
            node = if x[f as usize] <= self.value[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.feature.len()
    }

    /// Leaf payload reached by each training row; used by tests to check
    /// leaf-size floors.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut node = 0usize;
        while self.feature[node] >= 0 {
            node = if x[self.feature[node] as usize] <= self.value[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
        node
    }
}

/// Draw a bootstrap resample (indices with replacement).
pub fn bootstrap_indices(rng: &mut impl Rng, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..len)).collect()
}

/// Column-major copy of the row-major design matrix, so sorts and split scans
/// touch one contiguous slice per feature.
fn columns(xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dims = xs[0].len();
    (0..dims)
        .map(|f| xs.iter().map(|row| row[f]).collect())
        .collect()
}

/// Order rows ascending by one feature, ties broken by row index so the
/// result is a total order independent of the incoming permutation.
fn sort_by_column(idx: &mut [usize], col: &[f64]) {
    idx.sort_unstable_by(|&a, &b| col[a].total_cmp(&col[b]).then_with(|| a.cmp(&b)));
}

/// Pick candidate feature indices for one split, ascending for a canonical
/// evaluation order.
fn candidate_features(rng: &mut impl Rng, dims: usize, k: usize) -> Vec<usize> {
    let mut picks = rand::seq::index::sample(rng, dims, k.min(dims)).into_vec();
    picks.sort_unstable();
    picks
}

pub fn fit_regression_tree(
    xs: &[Vec<f64>],
    ys: &[f64],
    params: &TreeParams,
    rng: &mut impl Rng,
) -> Tree {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let cols = columns(xs);
    let mut tree = Tree { feature: vec![], value: vec![], left: vec![], right: vec![] };
    let idx: Vec<usize> = (0..xs.len()).collect();
    grow_regression(&mut tree, &cols, ys, idx, 0, params, rng);
    tree
}

fn grow_regression(
    tree: &mut Tree,
    cols: &[Vec<f64>],
    ys: &[f64],
    mut idx: Vec<usize>,
    depth: usize,
    params: &TreeParams,
    rng: &mut impl Rng,
) -> usize {
    let m = idx.len();
    let mean = idx.iter().map(|&i| ys[i]).sum::<f64>() / m as f64;
    let spread = idx.iter().map(|&i| (ys[i] - mean).abs()).fold(0.0, f64::max);
    if depth >= params.max_depth || m < 2 * params.min_leaf || spread == 0.0 {
        return tree.push_leaf(mean);
    }

    // Only (cost, feature, threshold, pos) is kept per candidate; the winning
    // order is recreated by one more sort below instead of cloning it on
    // every improvement.
    let mut best: Option<(f64, usize, f64, usize)> = None;
    for feature in candidate_features(rng, cols.len(), params.features_per_split) {
        let col = &cols[feature];
        sort_by_column(&mut idx, col);
        let (mut ty, mut ty2) = (0.0, 0.0);
        for &i in &idx {
            ty += ys[i];
            ty2 += ys[i] * ys[i];
        }
        // running left-hand sums of y and y^2 along the sorted order
        let (mut sy, mut sy2) = (0.0, 0.0);
        for pos in 1..m {
            let y = ys[idx[pos - 1]];
            sy += y;
            sy2 += y * y;
            if pos < params.min_leaf || pos + params.min_leaf > m {
                continue;
            }
            let (lo, hi) = (col[idx[pos - 1]], col[idx[pos]]);
            if lo == hi {
                continue;
            }
            let (ry, ry2) = (ty - sy, ty2 - sy2);
            let cost = (sy2 - sy * sy / pos as f64)
                + (ry2 - ry * ry / (m - pos) as f64);
            if best.is_none_or(|b| cost < b.0) {
                best = Some((cost, feature, (lo + hi) / 2.0, pos));
            }
        }
    }

    let Some((_, feature, threshold, pos)) = best else {
        return tree.push_leaf(mean);
    };
    sort_by_column(&mut idx, &cols[feature]);
    let right_idx = idx.split_off(pos);
    let node = tree.push_split(feature, threshold);
    let l = grow_regression(tree, cols, ys, idx, depth + 1, params, rng);
    let r = grow_regression(tree, cols, ys, right_idx, depth + 1, params, rng);
    tree.left[node] = l as u32;
    tree.right[node] = r as u32;
    node
}

pub fn fit_classification_tree(
    xs: &[Vec<f64>],
    ys: &[usize],
    num_classes: usize,
    params: &TreeParams,
    rng: &mut impl Rng,
) -> Tree {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let cols = columns(xs);
    let mut tree = Tree { feature: vec![], value: vec![], left: vec![], right: vec![] };
    let idx: Vec<usize> = (0..xs.len()).collect();
    grow_classification(&mut tree, &cols, ys, num_classes, idx, 0, params, rng);
    tree
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0usize;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn gini_weighted(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let sum_sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    t * (1.0 - sum_sq / (t * t))
}

/// Gini cost of the complement branch (`counts - left`), computed without
/// materializing the right-hand count vector.
fn gini_weighted_rest(counts: &[usize], left: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let sum_sq: f64 = counts
        .iter()
        .zip(left)
        .map(|(&c, &l)| ((c - l) * (c - l)) as f64)
        .sum();
    t * (1.0 - sum_sq / (t * t))
}

fn grow_classification(
    tree: &mut Tree,
    cols: &[Vec<f64>],
    ys: &[usize],
    num_classes: usize,
    mut idx: Vec<usize>,
    depth: usize,
    params: &TreeParams,
    rng: &mut impl Rng,
) -> usize {
    let m = idx.len();
    let mut counts = vec![0usize; num_classes];
    for &i in &idx {
        counts[ys[i]] += 1;
    }
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    if depth >= params.max_depth || m < 2 * params.min_leaf || pure {
        return tree.push_leaf(majority(&counts) as f64);
    }

    let mut best: Option<(f64, usize, f64, usize)> = None;
    let mut left_counts = vec![0usize; num_classes];
    for feature in candidate_features(rng, cols.len(), params.features_per_split) {
        let col = &cols[feature];
        sort_by_column(&mut idx, col);
        left_counts.fill(0);
        for pos in 1..m {
            left_counts[ys[idx[pos - 1]]] += 1;
            if pos < params.min_leaf || pos + params.min_leaf > m {
                continue;
            }
            let (lo, hi) = (col[idx[pos - 1]], col[idx[pos]]);
            if lo == hi {
                continue;
            }
            let cost = gini_weighted(&left_counts, pos)
                + gini_weighted_rest(&counts, &left_counts, m - pos);
            if best.is_none_or(|b| cost < b.0) {
                best = Some((cost, feature, (lo + hi) / 2.0, pos));
            }
        }
    }

    let Some((_, feature, threshold, pos)) = best else {
        return tree.push_leaf(majority(&counts) as f64);
    };
    sort_by_column(&mut idx, &cols[feature]);
    let right_idx = idx.split_off(pos);
    let node = tree.push_split(feature, threshold);
    let l = grow_classification(tree, cols, ys, num_classes, idx, depth + 1, params, rng);
    let r = grow_classification(tree, cols, ys, num_classes, right_idx, depth + 1, params, rng);
    tree.left[node] = l as u32;
    tree.right[node] = r as u32;
    node
}
