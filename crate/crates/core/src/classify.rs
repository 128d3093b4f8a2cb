//! Low/high delay classification with a random forest.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub const LOW: u8 = 0;
pub const HIGH: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitLabels {
    pub threshold: f64,
    /// [`LOW`] when the delay is at most the threshold, else [`HIGH`].
    pub labels: Vec<u8>,
}

impl SplitLabels {
    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn median_split(y: &[f64]) -> Result<SplitLabels> {
    if y.len() < 2 {
        return Err(ClassifyError::TooFew { needed: 2, got: y.len() });
    }
    let threshold = median(y);
    Ok(SplitLabels {
        threshold,
        labels: y.iter().map(|&v| if v <= threshold { LOW } else { HIGH }).collect(),
    })
}

/// Splitmix64 mixing of a master seed with a tag, for independent sub-seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(u8),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Classification tree grown with the Gini criterion, trying `mtry` random
/// features at each node.
#[derive(Debug, Clone)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

fn majority(counts: [usize; 2]) -> u8 {
    if counts[HIGH as usize] > counts[LOW as usize] {
        HIGH
    } else {
        LOW
    }
}

fn class_counts(rows: &[usize], labels: &[u8]) -> [usize; 2] {
    let mut c = [0usize; 2];
    for &r in rows {
        c[labels[r] as usize] += 1;
    }
    c
}

fn gini(c: [usize; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = c[0] as f64 / n;
    2.0 * p * (1.0 - p)
}

struct Best {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn best_split(
    x: &DMatrix<f64>,
    labels: &[u8],
    rows: &[usize],
    mtry: usize,
    min_leaf: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Best> {
    let k = x.ncols();
    let mut features: Vec<usize> = (0..k).collect();
    features.shuffle(rng);
    let total = class_counts(rows, labels);
    let n = rows.len();
    let mut best: Option<Best> = None;
    let mut tried = 0;
    let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(n);
    for f in features {
        if tried == mtry {
            break;
        }
        pairs.clear();
        pairs.extend(rows.iter().map(|&r| (x[(r, f)], labels[r])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[n - 1].0 {
            // constant here: does not count against mtry
            continue;
        }
        tried += 1;
        let mut left = [0usize; 2];
        for i in 0..n - 1 {
            left[pairs[i].1 as usize] += 1;
            if pairs[i].0 == pairs[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let imp = (nl as f64 * gini(left) + nr as f64 * gini(right)) / n as f64;
            if best.as_ref().is_none_or(|b| imp < b.impurity) {
                best = Some(Best {
                    feature: f,
                    threshold: (pairs[i].0 + pairs[i + 1].0) / 2.0,
                    impurity: imp,
                });
            }
        }
    }
    best
}

impl DecisionTree {
    pub fn fit(
        x: &DMatrix<f64>,
        labels: &[u8],
        rows: &[usize],
        mtry: usize,
        min_leaf: usize,
        rng: &mut ChaCha8Rng,
    ) -> DecisionTree {
        let mut nodes = Vec::new();
        // explicit stack: (rows, slot to fill)
        nodes.push(Node::Leaf(LOW));
        let mut stack: Vec<(Vec<usize>, usize)> = vec![(rows.to_vec(), 0)];
        while let Some((rows, slot)) = stack.pop() {
            let counts = class_counts(&rows, labels);
            let pure = counts[0] == 0 || counts[1] == 0;
            let split = if pure || rows.len() < 2 * min_leaf {
                None
            } else {
                best_split(x, labels, &rows, mtry, min_leaf, rng)
            };
            match split {
                Some(b) if b.impurity < gini(counts) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&row| x[(row, b.feature)] <= b.threshold);
                    let li = nodes.len();
                    nodes.push(Node::Leaf(LOW));
                    nodes.push(Node::Leaf(LOW));
                    nodes[slot] = Node::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left: li,
                        right: li + 1,
                    };
                    stack.push((r, li + 1));
                    stack.push((l, li));
                }
                _ => nodes[slot] = Node::Leaf(majority(counts)),
            }
        }
        DecisionTree { nodes }
    }

    pub fn predict(&self, x: &DMatrix<f64>, row: usize) -> u8 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(c) => return *c,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[(row, *feature)] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Grows each tree on a bootstrap sample of `rows`; tree `t` uses its own
    /// RNG stream of `seed`.
    pub fn fit(x: &DMatrix<f64>, labels: &[u8], rows: &[usize], mtry: usize, params: &ForestParams, seed: u64) -> Self {
        let counts = class_counts(rows, labels);
        if counts[0] == 0 || counts[1] == 0 {
            log::warn!("training rows contain a single class; the forest predicts it everywhere");
        }
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let sample: Vec<usize> = (0..rows.len()).map(|_| rows[rng.gen_range(0..rows.len())]).collect();
                DecisionTree::fit(x, labels, &sample, mtry.max(1), params.min_leaf, &mut rng)
            })
            .collect();
        RandomForest { trees }
    }

    /// Majority vote; ties go to [`LOW`].
    pub fn predict(&self, x: &DMatrix<f64>, row: usize) -> u8 {
        let high = self.trees.iter().filter(|t| t.predict(x, row) == HIGH).count();
        if 2 * high > self.trees.len() {
            HIGH
        } else {
            LOW
        }
    }

    pub fn accuracy(&self, x: &DMatrix<f64>, labels: &[u8], rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let hits = rows.iter().filter(|&&r| self.predict(x, r) == labels[r]).count();
        hits as f64 / rows.len() as f64
    }
}

/// Feature-subset sizes {floor(sqrt k)/2, floor(sqrt k), 2 floor(sqrt k)},
/// at least 1, at most k, without duplicates.
pub fn mtry_grid(k: usize) -> Vec<usize> {
    let r = (k as f64).sqrt().floor() as usize;
    let mut g: Vec<usize> = [r / 2, r, 2 * r].iter().map(|&m| m.clamp(1, k.max(1))).collect();
    g.dedup();
    g
}

/// Disjoint (train, test) row indices. With `stratified`, each class
/// contributes the rounded `fraction` of its rows to the test set.
pub fn train_test_split(labels: &[u8], fraction: f64, stratified: bool, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        [LOW, HIGH]
            .iter()
            .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        let m = (g.len() as f64 * fraction).round() as usize;
        test.extend_from_slice(&g[..m]);
        train.extend_from_slice(&g[m..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Splits `rows` into `folds` stratified folds (fewer when rows are scarce).
pub fn stratified_folds(rows: &[usize], labels: &[u8], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let folds = folds.clamp(1, rows.len().max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for c in [LOW, HIGH] {
        let mut g: Vec<usize> = rows.iter().copied().filter(|&r| labels[r] == c).collect();
        g.shuffle(&mut rng);
        for r in g {
            out[next % folds].push(r);
            next += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub folds: usize,
    pub forest: ForestParams,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_fraction: 0.1,
            folds: 10,
            forest: ForestParams::default(),
            stratified: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub mtry: usize,
    pub cv_accuracy: f64,
    pub test_accuracy: f64,
}

/// Chooses `mtry` by cross-validation on `train` (ties to the smaller value),
/// refits on all of `train` and scores `test`.
pub fn train_and_evaluate(
    x: &DMatrix<f64>,
    labels: &[u8],
    train: &[usize],
    test: &[usize],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if labels.len() != x.nrows() {
        return Err(ClassifyError::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    if train.len() < 2 {
        return Err(ClassifyError::TooFew { needed: 2, got: train.len() });
    }
    let folds = stratified_folds(train, labels, cfg.folds, derive_seed(cfg.seed, 1));
    let mut best: Option<(usize, f64)> = None;
    for mtry in mtry_grid(x.ncols()) {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (f, held) in folds.iter().enumerate() {
            if held.is_empty() {
                continue;
            }
            let fit_rows: Vec<usize> = train.iter().copied().filter(|r| held.binary_search(r).is_err()).collect();
            if fit_rows.is_empty() {
                continue;
            }
            let forest = RandomForest::fit(x, labels, &fit_rows, mtry, &cfg.forest, derive_seed(cfg.seed, 100 + f as u64));
            hits += held.iter().filter(|&&r| forest.predict(x, r) == labels[r]).count();
            total += held.len();
        }
        let acc = if total == 0 { f64::NAN } else { hits as f64 / total as f64 };
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((mtry, acc));
        }
    }
    let (mtry, cv_accuracy) = best.expect("mtry grid is never empty");
    let forest = RandomForest::fit(x, labels, train, mtry, &cfg.forest, derive_seed(cfg.seed, 2));
    Ok(Evaluation {
        mtry,
        cv_accuracy,
        test_accuracy: forest.accuracy(x, labels, test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let s = median_split(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.threshold, 2.5);
        assert_eq!(s.labels, vec![LOW, LOW, HIGH, HIGH]);
        let c = median_split(&[3.0; 5]).unwrap();
        assert_eq!(c.count(LOW), 5);
        assert!(median_split(&[1.0]).is_err());
    }

    #[test]
    fn grid_values() {
        assert_eq!(mtry_grid(47), vec![3, 6, 12]);
        assert_eq!(mtry_grid(21), vec![2, 4, 8]);
        assert_eq!(mtry_grid(2), vec![1, 2]);
        assert_eq!(mtry_grid(1), vec![1]);
    }

    #[test]
    fn splits_are_disjoint_and_stratified() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 4 == 0)).collect();
        let (train, test) = train_test_split(&labels, 0.1, true, 3);
        assert_eq!(train.len() + test.len(), 100);
        assert!(test.iter().all(|t| train.binary_search(t).is_err()));
        assert_eq!(test.iter().filter(|&&i| labels[i] == HIGH).count(), 3);
        assert_eq!(train_test_split(&labels, 0.1, true, 3), (train, test));

        let folds = stratified_folds(&(0..100).collect::<Vec<_>>(), &labels, 10, 1);
        assert_eq!(folds.len(), 10);
        assert!(folds.iter().all(|f| f.len() == 10));
        assert_eq!(stratified_folds(&[1, 2, 3], &labels, 10, 1).len(), 3);
    }

    #[test]
    fn tree_fits_training_data_exactly() {
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { i as f64 } else { (i % 3) as f64 });
        let labels: Vec<u8> = vec![0, 1, 0, 1, 1, 0, 0, 1];
        let rows: Vec<usize> = (0..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = DecisionTree::fit(&x, &labels, &rows, 2, 1, &mut rng);
        for r in rows {
            assert_eq!(tree.predict(&x, r), labels[r]);
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let labels: Vec<u8> = (0..n).map(|i| u8::from(x[(i, 1)] + 0.5 * x[(i, 2)] > 0.0)).collect();
        let (train, test) = train_test_split(&labels, 0.2, true, 1);
        let cfg = EvalConfig {
            folds: 5,
            forest: ForestParams { n_trees: 50, min_leaf: 1 },
            ..Default::default()
        };
        let e = train_and_evaluate(&x, &labels, &train, &test, &cfg).unwrap();
        assert!(e.test_accuracy >= 0.9, "{e:?}");
        assert_eq!(train_and_evaluate(&x, &labels, &train, &test, &cfg).unwrap(), e);
    }

    #[test]
    fn single_class_training_predicts_that_class() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i * (j + 1)) as f64);
        let labels = vec![HIGH; 6];
        let f = RandomForest::fit(&x, &labels, &[0, 1, 2, 3, 4, 5], 1, &ForestParams { n_trees: 5, min_leaf: 1 }, 0);
        assert_eq!(f.predict(&x, 2), HIGH);
    }
}
