//! Bagged CART trees (Gini impurity) over small feature vectors.
//!
//! At each node one feature is drawn at random and the best threshold on
//! that feature is chosen. Thresholds are stored as observed training values
//! (`x <= t` goes left), so predictions are unchanged by any strictly
//! increasing transform applied to a feature in both train and test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::argmax;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 6,
            min_samples_split: 2,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
enum Node {
    Leaf {
        dist: Vec<f64>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { dist } => return dist,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub classes: Vec<String>,
    pub n_features: usize,
    pub config: ForestConfig,
    trees: Vec<Tree>,
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    cfg: &'a ForestConfig,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; self.k];
        for &i in idx {
            c[self.y[i]] += 1.0;
        }
        c
    }

    fn leaf(&mut self, idx: &[usize]) -> usize {
        let c = self.counts(idx);
        let n = idx.len() as f64;
        self.nodes.push(Node::Leaf {
            dist: c.into_iter().map(|v| v / n).collect(),
        });
        self.nodes.len() - 1
    }

    /// Best `x[f] <= t` split by weighted Gini, or None if no split separates.
    fn best_split(&self, idx: &[usize], f: usize) -> Option<(f64, f64)> {
        let mut sorted: Vec<usize> = idx.to_vec();
        sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
        let total = self.counts(idx);
        let n = idx.len() as f64;
        let mut left = vec![0.0; self.k];
        let mut best: Option<(f64, f64)> = None;
        for w in 0..sorted.len() - 1 {
            left[self.y[sorted[w]]] += 1.0;
            let (v, next) = (self.x[sorted[w]][f], self.x[sorted[w + 1]][f]);
            if v == next {
                continue;
            }
            let nl = (w + 1) as f64;
            let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let score = nl / n * gini(&left, nl) + (n - nl) / n * gini(&right, n - nl);
            if best.map_or(true, |(s, _)| score < s) {
                best = Some((score, v));
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.counts(idx);
        let pure = counts.iter().filter(|c| **c > 0.0).count() <= 1;
        let feature = rng.gen_range(0..self.x[0].len());
        if pure || depth >= self.cfg.max_depth || idx.len() < self.cfg.min_samples_split {
            return self.leaf(idx);
        }
        let Some((_, threshold)) = self.best_split(idx, feature) else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { dist: Vec::new() });
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

/// Fits a forest on feature rows `x` with class indices `y` into `classes`.
pub fn train_forest(x: &[Vec<f64>], y: &[usize], classes: Vec<String>, cfg: &ForestConfig) -> Result<RandomForest> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InsufficientData("need one label per nonempty feature row".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Schema("feature rows must share a nonzero width".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forest features".into()));
    }
    if cfg.trees == 0 || cfg.max_depth == 0 {
        return Err(Error::InvalidParameter("trees and max_depth must be >= 1".into()));
    }
    let k = classes.len();
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidParameter(format!("label {bad} out of range")));
    }
    let mut seen = vec![false; k];
    y.iter().for_each(|&c| seen[c] = true);
    if seen.iter().filter(|s| **s).count() < 2 {
        return Err(Error::Degenerate("training data must contain >= 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trees = (0..cfg.trees)
        .map(|_| {
            let idx: Vec<usize> = if cfg.bootstrap {
                (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
            } else {
                (0..x.len()).collect()
            };
            let mut b = Builder {
                x,
                y,
                k,
                cfg,
                nodes: Vec::new(),
            };
            b.grow(&idx, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(RandomForest {
        classes,
        n_features: d,
        config: *cfg,
        trees,
    })
}

impl RandomForest {
    /// Mean of the leaf class distributions across trees.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::Schema(format!("expected {} features, got {}", self.n_features, x.len())));
        }
        let mut p = vec![0.0; self.classes.len()];
        for t in &self.trees {
            p.iter_mut().zip(t.predict(x)).for_each(|(a, b)| *a += b);
        }
        let n = self.trees.len() as f64;
        p.iter_mut().for_each(|v| *v /= n);
        Ok(p)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn blobs(seed: u64, per_class: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..3 {
            for _ in 0..per_class {
                let m = 50.0 * (c + 1) as f64;
                x.push((0..3).map(|j| m + j as f64 * 5.0 + rng.gen_range(-spread..spread)).collect());
                y.push(c);
            }
        }
        (x, y)
    }

    #[test]
    fn disjoint_ranges_fit_perfectly() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { i as f64 } else { 100.0 + i as f64 }, 0.0, 0.0]).collect();
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let f = train_forest(&x, &y, names(2), &ForestConfig::default()).unwrap();
        assert!(x.iter().zip(&y).all(|(r, c)| f.predict(r).unwrap() == *c));
    }

    #[test]
    fn identical_features_fall_back_to_the_majority() {
        let x = vec![vec![1.0, 2.0, 3.0]; 30];
        let y: Vec<usize> = (0..30).map(|i| usize::from(i % 3 == 0)).collect();
        let f = train_forest(&x, &y, names(2), &ForestConfig::default()).unwrap();
        assert_eq!(f.predict(&x[0]).unwrap(), 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = blobs(1, 20, 20.0);
        let a = train_forest(&x, &y, names(3), &ForestConfig::default()).unwrap();
        let b = train_forest(&x, &y, names(3), &ForestConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(train_forest(&[], &[], names(2), &ForestConfig::default()).is_err());
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(train_forest(&x, &[0, 0], names(2), &ForestConfig::default()), Err(Error::Degenerate(_))));
        let ragged = vec![vec![1.0], vec![2.0, 3.0]];
        assert!(train_forest(&ragged, &[0, 1], names(2), &ForestConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn monotone_feature_transform_keeps_predictions(seed in 0u64..1000, feature in 0usize..3, kind in 0usize..3) {
            let (x, y) = blobs(seed, 15, 40.0);
            let (test, _) = blobs(seed + 1, 10, 60.0);
            let f = |v: f64| match kind {
                0 => (v / 40.0).exp(),
                1 => v.powi(3),
                _ => 3.0 * v - 7.0,
            };
            let warp = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
                rows.iter().map(|r| { let mut r = r.clone(); r[feature] = f(r[feature]); r }).collect()
            };
            let cfg = ForestConfig { trees: 15, seed, ..ForestConfig::default() };
            let plain = train_forest(&x, &y, names(3), &cfg).unwrap();
            let warped = train_forest(&warp(&x), &y, names(3), &cfg).unwrap();
            for (a, b) in test.iter().zip(warp(&test)) {
                prop_assert_eq!(plain.predict(a).unwrap(), warped.predict(&b).unwrap());
            }
        }
    }
}
