//! Parameter-free episodic decoders.
//!
//! Prototypes are per-class means of support embeddings. The prototype
//! decoder scores a query by a softmax over negative distances to the
//! prototypes. The transductive decoder runs soft k-means: each step
//! re-estimates every prototype as the mean of its support embeddings plus
//! the query embeddings weighted by their current class confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceMode {
    #[default]
    #[serde(rename = "squared")]
    SquaredEuclidean,
    #[serde(rename = "euclidean")]
    Euclidean,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" | "squared_euclidean" => Ok(DistanceMode::SquaredEuclidean),
            "euclidean" => Ok(DistanceMode::Euclidean),
            other => Err(Error::Argument(format!(
                "unknown distance {other:?}, expected squared or euclidean"
            ))),
        }
    }
}

pub fn distance(a: &[f64], b: &[f64], mode: DistanceMode) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(raw_distance(a, b, mode))
}

fn raw_distance(a: &[f64], b: &[f64], mode: DistanceMode) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match mode {
        DistanceMode::SquaredEuclidean => sq,
        DistanceMode::Euclidean => sq.sqrt(),
    }
}

/// Probability vector over the classes of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    /// Wraps a vector after checking it is a probability distribution.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Decode(format!("invalid probabilities {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Decode(format!("probabilities sum to {sum}")));
        }
        Ok(ClassDistribution(probs))
    }

    /// Softmax of `logits` with max subtraction.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        ClassDistribution(exps.into_iter().map(|e| e / sum).collect())
    }

    pub fn one_hot(way: usize, class: usize) -> Self {
        let mut p = vec![0.0; way];
        p[class] = 1.0;
        ClassDistribution(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn way(&self) -> usize {
        self.0.len()
    }

    /// Most probable class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One prototype per class, stored as the rows of a `way x dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: Matrix<f64>,
}

impl PrototypeSet {
    pub fn new(prototypes: Matrix<f64>) -> Result<Self> {
        if prototypes.rows() < 2 {
            return Err(Error::Decode(format!(
                "need at least 2 prototypes, got {}",
                prototypes.rows()
            )));
        }
        if !prototypes.all_finite() {
            return Err(Error::Numerical("non-finite prototype".into()));
        }
        Ok(PrototypeSet { prototypes })
    }

    pub fn way(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        &self.prototypes
    }

    /// Largest Euclidean distance between matching prototypes.
    pub fn max_displacement(&self, other: &PrototypeSet) -> f64 {
        self.prototypes
            .iter_rows()
            .zip(other.prototypes.iter_rows())
            .map(|(a, b)| raw_distance(a, b, DistanceMode::Euclidean))
            .fold(0.0, f64::max)
    }
}

fn check_support(support: &Matrix<f64>, labels: &[usize], way: usize) -> Result<()> {
    if support.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} support rows with {} labels",
            support.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= way) {
        return Err(Error::Shape(format!("support label {bad} outside 0..{way}")));
    }
    Ok(())
}

/// Per-class mean of the support embeddings.
pub fn compute_prototypes(support: &Matrix<f64>, labels: &[usize], way: usize) -> Result<PrototypeSet> {
    check_support(support, labels, way)?;
    let dim = support.cols();
    let mut sums = Matrix::zeros(way, dim);
    let mut counts = vec![0usize; way];
    for (row, &l) in support.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Decode(format!("class {empty} has no support embeddings")));
    }
    for (j, &n) in counts.iter().enumerate() {
        sums.row_mut(j).iter_mut().for_each(|v| *v /= n as f64);
    }
    PrototypeSet::new(sums)
}

/// Softmax over negative distances from one query to every prototype.
pub fn mct_confidence(prototypes: &PrototypeSet, query: &[f64], mode: DistanceMode) -> Result<ClassDistribution> {
    if query.len() != prototypes.dim() {
        return Err(Error::Shape(format!(
            "query has dim {}, prototypes have dim {}",
            query.len(),
            prototypes.dim()
        )));
    }
    let logits: Vec<f64> = prototypes
        .prototypes
        .iter_rows()
        .map(|c| -raw_distance(query, c, mode))
        .collect();
    Ok(ClassDistribution::softmax(&logits))
}

/// Prototype-softmax prediction for every query row.
pub fn protonet_predict(
    prototypes: &PrototypeSet,
    queries: &Matrix<f64>,
    mode: DistanceMode,
) -> Result<Vec<ClassDistribution>> {
    if queries.rows() > 0 && queries.cols() != prototypes.dim() {
        return Err(Error::Shape(format!(
            "queries have dim {}, prototypes have dim {}",
            queries.cols(),
            prototypes.dim()
        )));
    }
    queries
        .iter_rows()
        .map(|q| mct_confidence(prototypes, q, mode))
        .collect()
}

/// Soft k-means prototype update from support embeddings and
/// confidence-weighted query embeddings.
pub fn mct_update(
    support: &Matrix<f64>,
    labels: &[usize],
    queries: &Matrix<f64>,
    confidences: &[ClassDistribution],
    way: usize,
) -> Result<PrototypeSet> {
    check_support(support, labels, way)?;
    if confidences.len() != queries.rows() {
        return Err(Error::Shape(format!(
            "{} confidence rows for {} queries",
            confidences.len(),
            queries.rows()
        )));
    }
    if queries.rows() > 0 && queries.cols() != support.cols() {
        return Err(Error::Shape("query and support dims differ".into()));
    }
    if let Some(c) = confidences.iter().find(|c| c.way() != way) {
        return Err(Error::Shape(format!(
            "confidence over {} classes, episode has {way}",
            c.way()
        )));
    }
    let dim = support.cols();
    let mut sums = Matrix::zeros(way, dim);
    let mut weights = vec![0.0f64; way];
    for (row, &l) in support.iter_rows().zip(labels) {
        weights[l] += 1.0;
        for (s, &v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = weights.iter().position(|&w| w == 0.0) {
        return Err(Error::Decode(format!("class {empty} has no support embeddings")));
    }
    for (row, conf) in queries.iter_rows().zip(confidences) {
        for (j, &q) in conf.probs().iter().enumerate() {
            weights[j] += q;
            for (s, &v) in sums.row_mut(j).iter_mut().zip(row) {
                *s += q * v;
            }
        }
    }
    for (j, &w) in weights.iter().enumerate() {
        sums.row_mut(j).iter_mut().for_each(|v| *v /= w);
    }
    PrototypeSet::new(sums)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctConfig {
    pub iterations: usize,
    pub convergence_eps: f64,
    pub distance_mode: DistanceMode,
}

impl Default for MctConfig {
    fn default() -> Self {
        MctConfig {
            iterations: 10,
            convergence_eps: 1e-6,
            distance_mode: DistanceMode::SquaredEuclidean,
        }
    }
}

impl MctConfig {
    pub const MAX_ITERATIONS: usize = 1000;

    pub fn validate(&self) -> Result<()> {
        if self.iterations > Self::MAX_ITERATIONS {
            return Err(Error::Argument(format!(
                "mct iterations {} exceed {}",
                self.iterations,
                Self::MAX_ITERATIONS
            )));
        }
        if !(self.convergence_eps >= 0.0) {
            return Err(Error::Argument("convergence_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Transductive prediction: refine prototypes for up to `iterations` steps
/// (stopping early once no prototype moves by `convergence_eps` or more),
/// then score queries against the final prototypes.
pub fn mct_predict(
    support: &Matrix<f64>,
    labels: &[usize],
    queries: &Matrix<f64>,
    way: usize,
    cfg: &MctConfig,
) -> Result<Vec<ClassDistribution>> {
    cfg.validate()?;
    let mut protos = compute_prototypes(support, labels, way)?;
    for _ in 0..cfg.iterations {
        let conf = protonet_predict(&protos, queries, cfg.distance_mode)?;
        let next = mct_update(support, labels, queries, &conf, way)?;
        let moved = next.max_displacement(&protos);
        protos = next;
        if moved < cfg.convergence_eps {
            break;
        }
    }
    protonet_predict(&protos, queries, cfg.distance_mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub mean: f64,
    pub per_episode: Vec<f64>,
}

/// Fraction of queries whose argmax matches the true label, per episode,
/// and the unweighted mean over episodes.
pub fn episodic_accuracy(predictions: &[Vec<ClassDistribution>], labels: &[Vec<usize>]) -> Result<AccuracySummary> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets for {} episodes",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("no episodes to score".into()));
    }
    let per_episode = predictions
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(e, (preds, truth))| {
            if preds.len() != truth.len() || preds.is_empty() {
                return Err(Error::Shape(format!(
                    "episode {e}: {} predictions for {} queries",
                    preds.len(),
                    truth.len()
                )));
            }
            let hits = preds.iter().zip(truth).filter(|(p, &t)| p.argmax() == t).count();
            Ok(hits as f64 / truth.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_episode.iter().sum::<f64>() / per_episode.len() as f64;
    Ok(AccuracySummary { mean, per_episode })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows, rows[0].len()).unwrap()
    }

    #[test]
    fn prototypes_are_means() {
        let s = m(&[&[1.0, 0.0], &[0.0, 1.0], &[4.0, 4.0]]);
        let p = compute_prototypes(&s, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.prototype(0), &[0.5, 0.5]);
        assert_eq!(p.prototype(1), &[4.0, 4.0]);
        assert!(matches!(compute_prototypes(&s, &[0, 0, 0], 2), Err(Error::Decode(_))));
    }

    #[test]
    fn distance_345() {
        let d = |mode| distance(&[0.0, 0.0], &[3.0, 4.0], mode).unwrap();
        assert_eq!(d(DistanceMode::Euclidean), 5.0);
        assert_eq!(d(DistanceMode::SquaredEuclidean), 25.0);
        assert!(distance(&[0.0], &[0.0, 1.0], DistanceMode::Euclidean).is_err());
    }

    #[test]
    fn two_prototype_softmax() {
        let p = compute_prototypes(&m(&[&[0.0, 0.0], &[2.0, 0.0]]), &[0, 1], 2).unwrap();
        let out = protonet_predict(&p, &m(&[&[0.0, 0.0]]), DistanceMode::SquaredEuclidean).unwrap();
        let expected = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((out[0].probs()[0] - expected).abs() < 1e-15);
        assert!((out[0].probs()[0] - 0.98201).abs() < 1e-5);
        assert!((out[0].probs()[1] - 0.01799).abs() < 1e-5);
    }

    #[test]
    fn equidistant_is_uniform() {
        let p = compute_prototypes(&m(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]), &[0, 1, 2, 3], 4)
            .unwrap();
        let out = protonet_predict(&p, &m(&[&[0.0, 0.0]]), DistanceMode::Euclidean).unwrap();
        assert!(out[0].probs().iter().all(|&q| (q - 0.25).abs() < 1e-15));
        assert_eq!(out[0].argmax(), 0);
    }

    #[test]
    fn update_degenerates_to_means() {
        let s = m(&[&[0.0, 0.0], &[3.0, 1.0]]);
        let empty = Matrix::zeros(0, 2);
        let p = mct_update(&s, &[0, 1], &empty, &[], 2).unwrap();
        assert_eq!(p, compute_prototypes(&s, &[0, 1], 2).unwrap());

        let q = m(&[&[2.0, 0.0]]);
        let conf = [ClassDistribution::new(vec![1.0, 0.0]).unwrap()];
        let p = mct_update(&s, &[0, 1], &q, &conf, 2).unwrap();
        assert_eq!(p.prototype(0), &[1.0, 0.0]);
        assert_eq!(p.prototype(1), &[3.0, 1.0]);
    }

    #[test]
    fn accuracy_tie_rule_and_mean() {
        let uni = ClassDistribution::new(vec![0.5, 0.5]).unwrap();
        let acc = episodic_accuracy(&[vec![uni.clone(), uni.clone(), uni]], &[vec![0, 1, 0]]).unwrap();
        assert!((acc.mean - 2.0 / 3.0).abs() < 1e-15);

        let a = ClassDistribution::one_hot(2, 0);
        let b = ClassDistribution::one_hot(2, 1);
        let acc = episodic_accuracy(
            &[vec![a.clone(), b.clone()], vec![a.clone(), a]],
            &[vec![0, 1], vec![0, 1]],
        )
        .unwrap();
        assert_eq!(acc.per_episode, vec![1.0, 0.5]);
        assert_eq!(acc.mean, 0.75);
        assert!(episodic_accuracy(&[vec![b]], &[vec![0, 1]]).is_err());
    }

    #[test]
    fn config_limits() {
        let cfg = MctConfig {
            iterations: 1001,
            ..MctConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!("euclidean".parse::<DistanceMode>().unwrap(), DistanceMode::Euclidean);
        assert!("manhattan".parse::<DistanceMode>().is_err());
    }
}
