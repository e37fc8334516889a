//! CART-style regression trees grown by variance reduction.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
        size: usize,
    },
    /// Rows with `z[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeFit {
    nodes: Vec<Node>,
    p: usize,
}

impl TreeFit {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Index of the leaf containing `z`.
    pub fn leaf_of(&self, z: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if z[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        match &self.nodes[self.leaf_of(z)] {
            Node::Leaf { value, .. } => *value,
            Node::Split { .. } => unreachable!(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Grows a regression tree. Each split maximises the reduction in the sum of
/// squared errors subject to both children holding at least `min_leaf` rows;
/// ties go to the lowest feature index, then the smallest threshold.
/// `max_depth = 0` yields the root-only tree.
pub fn fit_tree(x: &DMatrix<f64>, y: &[f64], min_leaf: usize, max_depth: usize) -> Result<TreeFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{} responses for {n} rows", y.len())));
    }
    let min_leaf = min_leaf.max(1);
    if n < 2 * min_leaf {
        return Err(Error::InvalidArgument(format!(
            "tree needs n >= 2 * min_leaf ({n} < {})",
            2 * min_leaf
        )));
    }
    let mut tree = TreeFit { nodes: Vec::new(), p };
    let rows: Vec<usize> = (0..n).collect();
    let total_ss = sum_sq_dev(y, &rows);
    grow(&mut tree, x, y, rows, 0, min_leaf, max_depth, total_ss);
    Ok(tree)
}

fn mean(y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64
}

fn sum_sq_dev(y: &[f64], rows: &[usize]) -> f64 {
    let m = mean(y, rows);
    rows.iter().map(|&i| (y[i] - m).powi(2)).sum()
}

#[allow(clippy::too_many_arguments)]
fn grow(
    tree: &mut TreeFit,
    x: &DMatrix<f64>,
    y: &[f64],
    rows: Vec<usize>,
    depth: usize,
    min_leaf: usize,
    max_depth: usize,
    total_ss: f64,
) -> usize {
    let id = tree.nodes.len();
    tree.nodes.push(Node::Leaf {
        value: mean(y, &rows),
        size: rows.len(),
    });
    if depth >= max_depth || rows.len() < 2 * min_leaf {
        return id;
    }
    let Some(best) = best_split(x, y, &rows, min_leaf) else {
        return id;
    };
    // numerically zero improvement: leave as leaf
    if best.gain <= 1e-12 * total_ss.max(f64::MIN_POSITIVE) {
        return id;
    }
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&i| x[(i, best.feature)] < best.threshold);
    let left = grow(tree, x, y, left_rows, depth + 1, min_leaf, max_depth, total_ss);
    let right = grow(tree, x, y, right_rows, depth + 1, min_leaf, max_depth, total_ss);
    tree.nodes[id] = Node::Split {
        feature: best.feature,
        threshold: best.threshold,
        left,
        right,
    };
    id
}

fn best_split(x: &DMatrix<f64>, y: &[f64], rows: &[usize], min_leaf: usize) -> Option<Candidate> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let base = total * total / n as f64;
    let mut best: Option<Candidate> = None;
    let mut order = rows.to_vec();
    for feature in 0..x.ncols() {
        order.sort_by(|&a, &b| x[(a, feature)].total_cmp(&x[(b, feature)]));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += y[order[k]];
            let n_left = k + 1;
            let n_right = n - n_left;
            if n_left < min_leaf {
                continue;
            }
            if n_right < min_leaf {
                break;
            }
            let (a, b) = (x[(order[k], feature)], x[(order[k + 1], feature)]);
            if a == b {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - base;
            if best.is_none_or(|c| gain > c.gain) {
                best = Some(Candidate {
                    feature,
                    threshold: 0.5 * (a + b),
                    gain,
                });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngStream;
    use rand::Rng;

    #[test]
    fn constant_response_single_leaf() {
        let x = DMatrix::from_fn(100, 2, |r, c| (r * (c + 1)) as f64);
        let tree = fit_tree(&x, &[3.5; 100], 5, 4).unwrap();
        assert_eq!(tree.n_leaves(), 1);
        assert_eq!(tree.predict(&[1.0, 2.0]), 3.5);
    }

    #[test]
    fn depth_zero_is_global_mean() {
        let x = DMatrix::from_fn(10, 1, |r, _| r as f64);
        let y: Vec<f64> = (0..10).map(|r| r as f64).collect();
        let tree = fit_tree(&x, &y, 1, 0).unwrap();
        assert_eq!(tree.n_leaves(), 1);
        assert!((tree.predict(&[100.0]) - 4.5).abs() < 1e-12);
    }

    /// Exhaustive search over every (feature, observed-value) cut.
    fn brute_force_first_split(x: &DMatrix<f64>, y: &[f64], min_leaf: usize) -> (usize, f64) {
        let n = y.len();
        let sse = |idx: &[usize]| {
            let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
            idx.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
        };
        let mut best = (usize::MAX, f64::NAN, f64::INFINITY);
        for f in 0..x.ncols() {
            for r in 0..n {
                let cut = x[(r, f)];
                let (l, rr): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| x[(i, f)] < cut);
                if l.len() < min_leaf || rr.len() < min_leaf {
                    continue;
                }
                let total = sse(&l) + sse(&rr);
                if total < best.2 - 1e-9 {
                    best = (f, cut, total);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn step_in_second_feature() {
        let mut rng = RngStream::new(4);
        let n = 500;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|r| if x[(r, 1)] >= 0.0 { 1.0 } else { 0.0 }).collect();
        let tree = fit_tree(&x, &y, 20, 4).unwrap();
        match tree.root() {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 1);
                assert!(threshold.abs() < 0.02);
                let (bf, bcut) = brute_force_first_split(&x, &y, 20);
                assert_eq!(bf, 1);
                // both cut the same gap in the data
                let (lo, hi) = (threshold.min(bcut), threshold.max(bcut));
                assert!((0..n).all(|r| !(x[(r, 1)] > lo && x[(r, 1)] < hi)));
            }
            other => panic!("expected split, got {other:?}"),
        }
        let mut leaf_values: Vec<f64> = tree
            .nodes()
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { value, .. } => Some(*value),
                _ => None,
            })
            .collect();
        leaf_values.sort_by(f64::total_cmp);
        assert_eq!(leaf_values, vec![0.0, 1.0]);
    }

    #[test]
    fn predictions_constant_within_leaf_cells() {
        let mut rng = RngStream::new(9);
        let n = 400;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n)
            .map(|r| f64::sin(x[(r, 0)]) + x[(r, 1)] * x[(r, 1)] + 0.1 * rng.random::<f64>())
            .collect();
        let tree = fit_tree(&x, &y, 10, 4).unwrap();
        for r in 0..n {
            let z = [x[(r, 0)], x[(r, 1)]];
            let leaf = tree.leaf_of(&z);
            for _ in 0..5 {
                let probe = [z[0] + rng.random_range(-0.05..0.05), z[1] + rng.random_range(-0.05..0.05)];
                if tree.leaf_of(&probe) == leaf {
                    assert_eq!(tree.predict(&probe), tree.predict(&z));
                }
            }
        }
    }

    #[test]
    fn min_leaf_respected_and_precondition() {
        let x = DMatrix::from_fn(30, 1, |r, _| r as f64);
        let y: Vec<f64> = (0..30).map(|r| (r % 7) as f64).collect();
        let tree = fit_tree(&x, &y, 6, 5).unwrap();
        for node in tree.nodes() {
            if let Node::Leaf { size, .. } = node {
                assert!(*size >= 6);
            }
        }
        assert!(fit_tree(&x, &y, 16, 2).is_err());
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // identical columns give identical gains
        let x = DMatrix::from_fn(40, 2, |r, _| r as f64);
        let y: Vec<f64> = (0..40).map(|r| if r >= 20 { 1.0 } else { 0.0 }).collect();
        let tree = fit_tree(&x, &y, 5, 1).unwrap();
        assert!(matches!(tree.root(), Node::Split { feature: 0, .. }));
    }
}
