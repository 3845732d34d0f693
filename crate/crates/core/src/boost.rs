//! Gradient-boosted decision trees with logistic loss.
//!
//! Trees are grown depth-wise with exact greedy splits on second-order
//! statistics. Sample weights come from class balancing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_child_weight: f64,
    pub l2_lambda: f64,
    pub class_balanced: bool,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_rounds: 200,
            max_depth: 3,
            learning_rate: 0.1,
            min_child_weight: 1.0,
            l2_lambda: 1.0,
            class_balanced: true,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rounds == 0 || self.max_depth == 0 || !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("invalid boosting configuration {self:?}")));
        }
        if self.l2_lambda < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::Config(format!("invalid boosting regularization {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn collect_features(&self, out: &mut Vec<usize>) {
        if let TreeNode::Split { feature, left, right, .. } = self {
            out.push(*feature);
            left.collect_features(out);
            right.collect_features(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub n_features: usize,
    /// Log-odds of the weighted class prior.
    pub base_score: f64,
    pub trees: Vec<TreeNode>,
}

impl GbdtModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    /// Feature indices used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for t in &self.trees {
            t.collect_features(&mut out);
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-35.0, 35.0);
    1.0 / (1.0 + (-z).exp())
}

fn check_labels(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{pos} positive, {neg} negative")));
    }
    Ok((pos, neg))
}

/// Balanced weights `N / (2 N_c)`; both classes then carry equal total weight.
pub fn class_weights(labels: &[bool]) -> Result<Vec<f64>> {
    let (pos, neg) = check_labels(labels)?;
    let n = labels.len() as f64;
    let w_pos = n / (2.0 * pos as f64);
    let w_neg = n / (2.0 * neg as f64);
    Ok(labels.iter().map(|&y| if y { w_pos } else { w_neg }).collect())
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    /// Row indices sorted by each feature's value.
    order: &'a [Vec<usize>],
    cfg: &'a GbdtConfig,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    fn leaf(&self, g: f64, h: f64) -> TreeNode {
        TreeNode::Leaf { value: -g / (h + self.cfg.l2_lambda) * self.cfg.learning_rate }
    }

    fn grow(&self, member: &mut [bool], rows: &[usize], depth: usize) -> TreeNode {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        if depth >= self.cfg.max_depth || rows.len() < 2 {
            return self.leaf(g, h);
        }
        let Some(best) = self.best_split(member, g, h) else {
            return self.leaf(g, h);
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.x[i][best.feature] <= best.threshold);
        for &i in &right {
            member[i] = false;
        }
        let left_node = self.grow(member, &left, depth + 1);
        for &i in &right {
            member[i] = true;
        }
        for &i in &left {
            member[i] = false;
        }
        let right_node = self.grow(member, &right, depth + 1);
        for &i in &left {
            member[i] = true;
        }
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(left_node),
            right: Box::new(right_node),
        }
    }

    fn best_split(&self, member: &[bool], g: f64, h: f64) -> Option<BestSplit> {
        let lambda = self.cfg.l2_lambda;
        let parent = g * g / (h + lambda);
        let mut best: Option<BestSplit> = None;
        for (f, order) in self.order.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            let mut prev: Option<f64> = None;
            for &i in order.iter().filter(|&&i| member[i]) {
                let v = self.x[i][f];
                if let Some(p) = prev {
                    if v > p {
                        let (gr, hr) = (g - gl, h - hl);
                        if hl >= self.cfg.min_child_weight && hr >= self.cfg.min_child_weight {
                            let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent);
                            if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                                best = Some(BestSplit { gain, feature: f, threshold: 0.5 * (p + v) });
                            }
                        }
                    }
                }
                gl += self.grad[i];
                hl += self.hess[i];
                prev = Some(v);
            }
        }
        best
    }
}

fn validate_matrix(x: &[Vec<f64>], n_labels: usize) -> Result<usize> {
    if x.len() != n_labels {
        return Err(Error::Shape(format!("{} rows for {n_labels} labels", x.len())));
    }
    let p = x.first().map_or(0, Vec::len);
    for row in x {
        if row.len() != p {
            return Err(Error::Dimension { expected: p, got: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTrajectory("non-finite feature value".into()));
        }
    }
    Ok(p)
}

/// Weighted mean logistic loss of margins against labels.
pub fn weighted_log_loss(margins: &[f64], labels: &[bool], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut wsum = 0.0;
    for ((&m, &y), &w) in margins.iter().zip(labels).zip(weights) {
        // log(1 + e^m) - y m, computed stably
        let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
        total += w * (softplus - if y { m } else { 0.0 });
        wsum += w;
    }
    total / wsum
}

pub fn fit(x: &[Vec<f64>], labels: &[bool], cfg: &GbdtConfig) -> Result<GbdtModel> {
    fit_traced(x, labels, cfg).map(|(m, _)| m)
}

/// Fits the ensemble and returns the training loss before the first and after every round.
pub fn fit_traced(x: &[Vec<f64>], labels: &[bool], cfg: &GbdtConfig) -> Result<(GbdtModel, Vec<f64>)> {
    cfg.validate()?;
    check_labels(labels)?;
    let p = validate_matrix(x, labels.len())?;
    let n = x.len();
    let weights = if cfg.class_balanced { class_weights(labels)? } else { vec![1.0; n] };
    let wsum: f64 = weights.iter().sum();
    let wpos: f64 = labels.iter().zip(&weights).filter(|(&y, _)| y).map(|(_, w)| w).sum();
    let prior = wpos / wsum;
    let base_score = (prior / (1.0 - prior)).ln();

    let order: Vec<Vec<usize>> = (0..p)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut member = vec![true; n];
    let all: Vec<usize> = (0..n).collect();
    let mut trees = Vec::with_capacity(cfg.n_rounds);
    let mut losses = vec![weighted_log_loss(&margins, labels, &weights)];

    for _ in 0..cfg.n_rounds {
        for i in 0..n {
            let prob = sigmoid(margins[i]);
            grad[i] = weights[i] * (prob - if labels[i] { 1.0 } else { 0.0 });
            hess[i] = weights[i] * prob * (1.0 - prob);
        }
        let grower = Grower { x, grad: &grad, hess: &hess, order: &order, cfg };
        let tree = grower.grow(&mut member, &all, 0);
        if let TreeNode::Leaf { value } = tree {
            // No split with positive gain and nothing left to shift: further rounds are no-ops.
            if value.abs() < 1e-12 {
                break;
            }
        }
        for i in 0..n {
            margins[i] += tree.predict(&x[i]);
        }
        trees.push(tree);
        losses.push(weighted_log_loss(&margins, labels, &weights));
    }
    Ok((GbdtModel { n_features: p, base_score, trees }, losses))
}

pub fn predict_proba(model: &GbdtModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.iter()
        .map(|row| {
            if row.len() != model.n_features {
                return Err(Error::Dimension { expected: model.n_features, got: row.len() });
            }
            Ok(sigmoid(model.margin(row)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_examples() {
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        assert!(class_weights(&labels).unwrap().iter().all(|&w| w == 1.0));

        let labels: Vec<bool> = (0..896).map(|i| i < 652).collect();
        let w = class_weights(&labels).unwrap();
        assert!((w[0] - 0.687).abs() < 1e-3);
        assert!((w[895] - 1.836).abs() < 1e-3);
        let pos: f64 = w.iter().zip(&labels).filter(|(_, &y)| y).map(|(w, _)| w).sum();
        let neg: f64 = w.iter().zip(&labels).filter(|(_, &y)| !y).map(|(w, _)| w).sum();
        assert!((pos - neg).abs() < 1e-9);

        assert!(matches!(class_weights(&[true, true]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn identical_rows_give_prior_only() {
        let x = vec![vec![1.0, 2.0]; 10];
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let m = fit(&x, &labels, &GbdtConfig::default()).unwrap();
        assert!(m.trees.iter().all(|t| matches!(t, TreeNode::Leaf { .. })));
        let p = predict_proba(&m, &x).unwrap();
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 1e-9));
    }

    #[test]
    fn empty_ensemble_predicts_prior() {
        let m = GbdtModel { n_features: 1, base_score: 0.0, trees: vec![] };
        assert_eq!(predict_proba(&m, &[vec![3.0], vec![-1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(predict_proba(&m, &[vec![1.0, 2.0]]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn stump_orders_probabilities() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let cfg = GbdtConfig { n_rounds: 1, max_depth: 1, ..Default::default() };
        let m = fit(&x, &labels, &cfg).unwrap();
        let p = predict_proba(&m, &x).unwrap();
        assert!(p.windows(2).all(|w| w[1] >= w[0]));
        assert!(p[19] > p[0]);
        match &m.trees[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(*threshold, 9.5),
            other => panic!("expected split, got {other:?}"),
        }
    }

    #[test]
    fn respects_depth_and_rejects_bad_input() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i * 7 % 13) as f64, (i % 5) as f64]).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let m = fit(&x, &labels, &GbdtConfig { max_depth: 2, n_rounds: 10, ..Default::default() }).unwrap();
        assert!(m.trees.iter().all(|t| t.depth() <= 2));
        assert!(fit(&x, &[true; 40], &GbdtConfig::default()).is_err());
        let mut bad = x.clone();
        bad[0][0] = f64::NAN;
        assert!(fit(&bad, &labels, &GbdtConfig::default()).is_err());
        assert!(fit(&x, &labels, &GbdtConfig { learning_rate: 0.0, ..Default::default() }).is_err());
    }
}
