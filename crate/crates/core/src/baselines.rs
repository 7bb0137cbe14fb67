//! Classical comparison classifiers: multinomial logistic regression, a
//! linear softmax model trained by mini-batch SGD, Gaussian naive Bayes and a
//! random forest of CART trees.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::Dataset;
use crate::neuralnet::argmax;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("training data is empty")]
    EmptyData,
    #[error("training data contains a single class; need at least two")]
    SingleClass,
    #[error("feature dimension mismatch: model has {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class counts must not all be zero")]
    ZeroCounts,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Lr,
    Gnb,
    Sgd,
    Rf,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Lr,
        BaselineKind::Gnb,
        BaselineKind::Sgd,
        BaselineKind::Rf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Lr => "lr",
            BaselineKind::Gnb => "gnb",
            BaselineKind::Sgd => "sgd",
            BaselineKind::Rf => "rf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrParams {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for LrParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for SgdParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnbParams {
    pub var_floor: f64,
}

impl Default for GnbParams {
    fn default() -> Self {
        Self { var_floor: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Draw a bootstrap sample per tree; otherwise every tree sees all rows.
    pub bootstrap: bool,
}

impl Default for RfParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 12,
            min_samples_split: 2,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineHyperparams {
    pub lr: LrParams,
    pub sgd: SgdParams,
    pub gnb: GnbParams,
    pub rf: RfParams,
}

/// Softmax-linear classifier; `weights` is `[n_features x n_classes]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub n_features: usize,
    pub n_classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    fn zeros(n_features: usize, n_classes: usize) -> Self {
        Self {
            n_features,
            n_classes,
            weights: vec![0.0; n_features * n_classes],
            bias: vec![0.0; n_classes],
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (j, &xj) in x.iter().enumerate() {
            let w = &self.weights[j * self.n_classes..(j + 1) * self.n_classes];
            for (zc, &wc) in z.iter_mut().zip(w) {
                *zc += xj * wc;
            }
        }
        z
    }

    /// Mean cross-entropy over `rows`, and its gradient when `grad` is given.
    fn loss_grad(&self, data: &Dataset, rows: &[usize], mut grad: Option<&mut LinearModel>) -> f64 {
        let c = self.n_classes;
        let mut loss = 0.0;
        let inv = 1.0 / rows.len() as f64;
        for &i in rows {
            let x = data.row(i);
            let y = data.labels()[i];
            let z = self.logits(x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            loss += sum.ln() - (z[y] - m);
            if let Some(g) = grad.as_deref_mut() {
                for (k, &zk) in z.iter().enumerate() {
                    let d = ((zk - m).exp() / sum - if k == y { 1.0 } else { 0.0 }) * inv;
                    g.bias[k] += d;
                    for (j, &xj) in x.iter().enumerate() {
                        g.weights[j * c + k] += d * xj;
                    }
                }
            }
        }
        loss * inv
    }

    fn step(&mut self, grad: &LinearModel, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }

    /// Mean cross-entropy on `data`.
    pub fn loss(&self, data: &Dataset) -> f64 {
        let rows: Vec<usize> = (0..data.n_samples()).collect();
        self.loss_grad(data, &rows, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNb {
    pub n_features: usize,
    pub priors: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        class_counts: Vec<usize>,
    },
}

/// Nodes in creation order; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict_row(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                TreeNode::Leaf { class_counts } => return majority(class_counts),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, at: usize) -> usize {
            match &t.nodes[at] {
                TreeNode::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub n_features: usize,
    pub n_classes: usize,
    pub trees: Vec<DecisionTree>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaselineModel {
    Lr(LinearModel),
    Sgd(LinearModel),
    Gnb(GaussianNb),
    Rf(RandomForest),
}

impl BaselineModel {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineModel::Lr(_) => BaselineKind::Lr,
            BaselineModel::Sgd(_) => BaselineKind::Sgd,
            BaselineModel::Gnb(_) => BaselineKind::Gnb,
            BaselineModel::Rf(_) => BaselineKind::Rf,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            BaselineModel::Lr(m) | BaselineModel::Sgd(m) => m.n_features,
            BaselineModel::Gnb(m) => m.n_features,
            BaselineModel::Rf(m) => m.n_features,
        }
    }
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

/// `1 - sum (c_k / n)^2`.
pub fn gini_impurity(class_counts: &[usize]) -> Result<f64> {
    let n: usize = class_counts.iter().sum();
    if n == 0 {
        return Err(BaselineError::ZeroCounts);
    }
    let n = n as f64;
    Ok(1.0
        - class_counts
            .iter()
            .map(|&c| (c as f64 / n).powi(2))
            .sum::<f64>())
}

fn gini_unchecked(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

pub fn fit_baseline(
    kind: BaselineKind,
    train: &Dataset,
    hyper: &BaselineHyperparams,
    seed_value: u64,
) -> Result<BaselineModel> {
    if train.is_empty() {
        return Err(BaselineError::EmptyData);
    }
    if train.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(BaselineError::SingleClass);
    }
    let seed_value = seed::derive(seed_value, &[seed::stream::BASELINE, kind as u64]);
    Ok(match kind {
        BaselineKind::Lr => BaselineModel::Lr(fit_logistic(train, &hyper.lr)?),
        BaselineKind::Sgd => BaselineModel::Sgd(fit_sgd(train, &hyper.sgd, seed_value)?),
        BaselineKind::Gnb => BaselineModel::Gnb(fit_gnb(train, &hyper.gnb)),
        BaselineKind::Rf => BaselineModel::Rf(fit_forest(train, &hyper.rf, seed_value)?),
    })
}

fn positive_rate(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(BaselineError::InvalidHyperparameter(format!(
            "learning rate {lr}"
        )))
    }
}

fn fit_logistic(train: &Dataset, p: &LrParams) -> Result<LinearModel> {
    positive_rate(p.learning_rate)?;
    let mut model = LinearModel::zeros(train.n_features(), train.n_classes());
    let rows: Vec<usize> = (0..train.n_samples()).collect();
    for _ in 0..p.epochs {
        let mut g = LinearModel::zeros(model.n_features, model.n_classes);
        model.loss_grad(train, &rows, Some(&mut g));
        model.step(&g, p.learning_rate);
    }
    Ok(model)
}

fn fit_sgd(train: &Dataset, p: &SgdParams, seed_value: u64) -> Result<LinearModel> {
    positive_rate(p.learning_rate)?;
    if p.batch_size == 0 {
        return Err(BaselineError::InvalidHyperparameter("batch_size 0".into()));
    }
    let mut model = LinearModel::zeros(train.n_features(), train.n_classes());
    let mut rng = seed::rng(seed_value);
    let mut order: Vec<usize> = (0..train.n_samples()).collect();
    for _ in 0..p.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(p.batch_size) {
            let mut g = LinearModel::zeros(model.n_features, model.n_classes);
            model.loss_grad(train, chunk, Some(&mut g));
            model.step(&g, p.learning_rate);
        }
    }
    Ok(model)
}

fn fit_gnb(train: &Dataset, p: &GnbParams) -> GaussianNb {
    let (c, d) = (train.n_classes(), train.n_features());
    let counts = train.class_counts();
    let mut means = vec![vec![0.0; d]; c];
    for i in 0..train.n_samples() {
        let y = train.labels()[i];
        for (m, &x) in means[y].iter_mut().zip(train.row(i)) {
            *m += x;
        }
    }
    for (k, m) in means.iter_mut().enumerate() {
        if counts[k] > 0 {
            m.iter_mut().for_each(|v| *v /= counts[k] as f64);
        }
    }
    let mut variances = vec![vec![0.0; d]; c];
    for i in 0..train.n_samples() {
        let y = train.labels()[i];
        for ((v, &m), &x) in variances[y].iter_mut().zip(&means[y]).zip(train.row(i)) {
            *v += (x - m).powi(2);
        }
    }
    for (k, var) in variances.iter_mut().enumerate() {
        let n = counts[k].max(1) as f64;
        var.iter_mut().for_each(|v| *v = (*v / n).max(p.var_floor));
    }
    let total = train.n_samples() as f64;
    GaussianNb {
        n_features: d,
        priors: counts.iter().map(|&k| k as f64 / total).collect(),
        means,
        variances,
    }
}

impl GaussianNb {
    /// Unnormalised log posterior per class.
    pub fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        self.priors
            .iter()
            .enumerate()
            .map(|(k, &prior)| {
                if prior <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let ll: f64 = x
                    .iter()
                    .zip(&self.means[k])
                    .zip(&self.variances[k])
                    .map(|((&xi, &m), &v)| {
                        -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (xi - m).powi(2) / (2.0 * v)
                    })
                    .sum();
                prior.ln() + ll
            })
            .collect()
    }
}

struct TreeBuilder<'a> {
    data: &'a Dataset,
    params: &'a RfParams,
    mtry: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.data.n_classes()];
        for &i in rows {
            c[self.data.labels()[i]] += 1;
        }
        c
    }

    /// Best `(feature, threshold, weighted child gini)` among sampled features.
    fn best_split<R: Rng>(&self, rows: &[usize], rng: &mut R) -> Option<(usize, f64, f64)> {
        let d = self.data.n_features();
        let n_classes = self.data.n_classes();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for feature in index::sample(rng, d, self.mtry).into_iter() {
            pairs.clear();
            pairs.extend(
                rows.iter()
                    .map(|&i| (self.data.row(i)[feature], self.data.labels()[i])),
            );
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0usize; n_classes];
            let mut right = vec![0usize; n_classes];
            for &(_, y) in &pairs {
                right[y] += 1;
            }
            for s in 0..pairs.len() - 1 {
                let y = pairs[s].1;
                left[y] += 1;
                right[y] -= 1;
                if pairs[s].0 == pairs[s + 1].0 {
                    continue;
                }
                let nl = s + 1;
                let nr = pairs.len() - nl;
                let score = (nl as f64 * gini_unchecked(&left, nl)
                    + nr as f64 * gini_unchecked(&right, nr))
                    / pairs.len() as f64;
                if best.is_none_or(|b| score < b.2) {
                    best = Some((feature, 0.5 * (pairs[s].0 + pairs[s + 1].0), score));
                }
            }
        }
        best
    }

    fn build<R: Rng>(&mut self, rows: Vec<usize>, depth: usize, rng: &mut R) -> usize {
        let counts = self.counts(&rows);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            class_counts: counts,
        });
        if pure
            || depth >= self.params.max_depth
            || rows.len() < self.params.min_samples_split.max(2)
        {
            return id;
        }
        let Some((feature, threshold, _)) = self.best_split(&rows, rng) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.data.row(i)[feature] <= threshold);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn fit_tree(data: &Dataset, params: &RfParams, seed_value: u64) -> DecisionTree {
    let mut rng = seed::rng(seed_value);
    let n = data.n_samples();
    let rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let d = data.n_features();
    let mtry = ((d as f64).sqrt().floor() as usize).clamp(1, d);
    let mut builder = TreeBuilder {
        data,
        params,
        mtry,
        nodes: Vec::new(),
    };
    builder.build(rows, 0, &mut rng);
    DecisionTree {
        nodes: builder.nodes,
    }
}

fn fit_forest(train: &Dataset, p: &RfParams, seed_value: u64) -> Result<RandomForest> {
    if p.n_trees == 0 {
        return Err(BaselineError::InvalidHyperparameter("n_trees 0".into()));
    }
    let trees = (0..p.n_trees)
        .into_par_iter()
        .map(|t| fit_tree(train, p, seed::derive(seed_value, &[t as u64])))
        .collect();
    Ok(RandomForest {
        n_features: train.n_features(),
        n_classes: train.n_classes(),
        trees,
    })
}

pub fn predict_baseline(model: &BaselineModel, features: &[f64]) -> Result<Vec<usize>> {
    let d = model.n_features();
    if d == 0 || !features.len().is_multiple_of(d) {
        return Err(BaselineError::DimensionMismatch {
            expected: d,
            found: if d == 0 {
                features.len()
            } else {
                features.len() % d
            },
        });
    }
    let rows = features.chunks(d);
    Ok(match model {
        BaselineModel::Lr(m) | BaselineModel::Sgd(m) => {
            rows.map(|x| argmax(&m.logits(x))).collect()
        }
        BaselineModel::Gnb(m) => rows.map(|x| argmax(&m.log_joint(x))).collect(),
        BaselineModel::Rf(m) => rows
            .map(|x| {
                let mut votes = vec![0usize; m.n_classes];
                for t in &m.trees {
                    votes[t.predict_row(x)] += 1;
                }
                majority(&votes)
            })
            .collect(),
    })
}
