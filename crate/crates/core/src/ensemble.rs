//! Late-fusion meta-ensemble over per-learner class distributions.
//!
//! Each query is described by the concatenation of the `M` learners'
//! distributions (`M * K` features). Three candidate combiners are trained on
//! one set of episodes and the one with the best episodic accuracy on a
//! second set is kept.
//!
//! `ENS1` checkpoints are a variant tag byte (0 vote, 1 linear, 2 naive
//! Bayes), little-endian `u32` learner count `M` and `u32` way `K`, then the
//! variant's tensors as little-endian `f32`:
//!
//! * vote: nothing;
//! * linear: `K x (M*K + 1)` weights, row-major, bias in the last column;
//! * naive Bayes: `K x M*K` means, `K x M*K` variances, `K` priors.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::decoders::{argmax, episodic_accuracy, ClassDistribution};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const ENS_MAGIC: &[u8; 4] = b"ENS1";
pub const NB_VARIANCE_FLOOR: f64 = 1e-6;

/// Concatenated learner distributions for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleFeatures {
    learners: usize,
    way: usize,
    values: Vec<f64>,
}

impl EnsembleFeatures {
    pub fn new(learners: usize, way: usize, values: Vec<f64>) -> Result<Self> {
        if learners == 0 || way == 0 || values.len() != learners * way {
            return Err(Error::Shape(format!(
                "{} features for {learners} learners over {way} classes",
                values.len()
            )));
        }
        Ok(EnsembleFeatures {
            learners,
            way,
            values,
        })
    }

    pub fn learners(&self) -> usize {
        self.learners
    }

    pub fn way(&self) -> usize {
        self.way
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The `K`-block of learner `m`.
    pub fn block(&self, m: usize) -> &[f64] {
        &self.values[m * self.way..(m + 1) * self.way]
    }
}

/// Row `i` is the concatenation of every learner's `i`-th distribution, in
/// learner order.
pub fn build_features(distributions: &[Vec<ClassDistribution>]) -> Result<Vec<EnsembleFeatures>> {
    let Some(first) = distributions.first() else {
        return Err(Error::Shape("no learners".into()));
    };
    let n = first.len();
    let way = first.first().map_or(0, ClassDistribution::way);
    for (m, d) in distributions.iter().enumerate() {
        if d.len() != n {
            return Err(Error::Shape(format!(
                "learner {m} has {} predictions, learner 0 has {n}",
                d.len()
            )));
        }
        if let Some(bad) = d.iter().find(|p| p.way() != way) {
            return Err(Error::Shape(format!(
                "learner {m} predicts over {} classes, expected {way}",
                bad.way()
            )));
        }
    }
    let m = distributions.len();
    (0..n)
        .map(|i| {
            let values = distributions
                .iter()
                .flat_map(|d| d[i].probs().iter().copied())
                .collect();
            EnsembleFeatures::new(m, way, values)
        })
        .collect()
}

/// Features and true local labels of one episode's queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEpisode {
    pub features: Vec<EnsembleFeatures>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleVariant {
    MajorityVote,
    MultinomialLinear,
    GaussianNb,
}

impl EnsembleVariant {
    /// Candidate order, also the tie-break order in selection.
    pub const ORDER: [EnsembleVariant; 3] = [
        EnsembleVariant::MajorityVote,
        EnsembleVariant::MultinomialLinear,
        EnsembleVariant::GaussianNb,
    ];

    pub fn tag(self) -> u8 {
        match self {
            EnsembleVariant::MajorityVote => 0,
            EnsembleVariant::MultinomialLinear => 1,
            EnsembleVariant::GaussianNb => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnsembleVariant::MajorityVote => "majority_vote",
            EnsembleVariant::MultinomialLinear => "multinomial_linear",
            EnsembleVariant::GaussianNb => "gaussian_nb",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleModel {
    MajorityVote {
        learners: usize,
        way: usize,
    },
    /// `K x (M*K + 1)` weights; the last column is the bias.
    MultinomialLinear {
        learners: usize,
        way: usize,
        weights: Matrix<f64>,
    },
    GaussianNb {
        learners: usize,
        way: usize,
        means: Matrix<f64>,
        variances: Matrix<f64>,
        priors: Vec<f64>,
    },
}

impl EnsembleModel {
    pub fn variant(&self) -> EnsembleVariant {
        match self {
            EnsembleModel::MajorityVote { .. } => EnsembleVariant::MajorityVote,
            EnsembleModel::MultinomialLinear { .. } => EnsembleVariant::MultinomialLinear,
            EnsembleModel::GaussianNb { .. } => EnsembleVariant::GaussianNb,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            EnsembleModel::MajorityVote { learners, way }
            | EnsembleModel::MultinomialLinear { learners, way, .. }
            | EnsembleModel::GaussianNb { learners, way, .. } => (*learners, *way),
        }
    }

    pub fn predict(&self, features: &EnsembleFeatures) -> Result<ClassDistribution> {
        ensemble_predict(self, features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            iterations: 500,
            learning_rate: 0.1,
            l2: 1e-3,
        }
    }
}

fn training_shape(episodes: &[EnsembleEpisode]) -> Result<(usize, usize, usize)> {
    let first = episodes
        .iter()
        .flat_map(|e| e.features.first())
        .next()
        .ok_or_else(|| Error::Train("no training queries".into()))?;
    let (m, k) = (first.learners(), first.way());
    let mut total = 0;
    let mut seen = vec![false; k];
    for (e, ep) in episodes.iter().enumerate() {
        if ep.features.len() != ep.labels.len() {
            return Err(Error::Shape(format!(
                "episode {e}: {} feature rows for {} labels",
                ep.features.len(),
                ep.labels.len()
            )));
        }
        for (f, &l) in ep.features.iter().zip(&ep.labels) {
            if (f.learners(), f.way()) != (m, k) {
                return Err(Error::Shape(format!("episode {e} mixes feature shapes")));
            }
            if l >= k {
                return Err(Error::Train(format!("label {l} outside 0..{k}")));
            }
            seen[l] = true;
            total += 1;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Train(format!(
            "class {missing} is absent from every training episode"
        )));
    }
    Ok((m, k, total))
}

// Stored weights are rounded to f32 so a reloaded checkpoint predicts
// exactly like the model that was selected.
fn round_f32(m: &mut Matrix<f64>) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = f64::from(*v as f32));
}

/// Fits the candidates, returned in `EnsembleVariant::ORDER`.
pub fn train_candidates(episodes: &[EnsembleEpisode], cfg: &LinearConfig) -> Result<Vec<EnsembleModel>> {
    let (m, k, _) = training_shape(episodes)?;
    Ok(vec![
        EnsembleModel::MajorityVote { learners: m, way: k },
        fit_linear(episodes, cfg)?,
        fit_naive_bayes(episodes)?,
    ])
}

/// Full-batch gradient descent on mean cross-entropy plus
/// `l2 / 2 * ||W||^2` (bias column excluded), from zero weights.
pub fn fit_linear(episodes: &[EnsembleEpisode], cfg: &LinearConfig) -> Result<EnsembleModel> {
    let (m, k, n) = training_shape(episodes)?;
    let dim = m * k;
    let mut weights = Matrix::zeros(k, dim + 1);
    let rows: Vec<(&[f64], usize)> = episodes
        .iter()
        .flat_map(|e| e.features.iter().map(|f| f.values()).zip(e.labels.iter().copied()))
        .collect();
    let mut grad = Matrix::zeros(k, dim + 1);
    let mut logits = vec![0.0; k];
    for _ in 0..cfg.iterations {
        grad.as_mut_slice().iter_mut().for_each(|g| *g = 0.0);
        for &(x, y) in &rows {
            linear_logits(&weights, x, &mut logits);
            let p = ClassDistribution::softmax(&logits);
            for (j, &pj) in p.probs().iter().enumerate() {
                let d = (pj - if j == y { 1.0 } else { 0.0 }) / n as f64;
                let g = grad.row_mut(j);
                for (gi, &xi) in g.iter_mut().zip(x) {
                    *gi += d * xi;
                }
                g[dim] += d;
            }
        }
        for j in 0..k {
            let (w, g) = (weights.row_mut(j), grad.row(j));
            for i in 0..=dim {
                let reg = if i < dim { cfg.l2 * w[i] } else { 0.0 };
                w[i] -= cfg.learning_rate * (g[i] + reg);
            }
        }
    }
    if !weights.all_finite() {
        return Err(Error::Numerical("linear ensemble weights diverged".into()));
    }
    round_f32(&mut weights);
    Ok(EnsembleModel::MultinomialLinear {
        learners: m,
        way: k,
        weights,
    })
}

fn linear_logits(weights: &Matrix<f64>, x: &[f64], out: &mut [f64]) {
    let dim = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let w = weights.row(j);
        *o = w[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[dim];
    }
}

/// Per-class feature means and variances (floored) with count priors.
pub fn fit_naive_bayes(episodes: &[EnsembleEpisode]) -> Result<EnsembleModel> {
    let (m, k, n) = training_shape(episodes)?;
    let dim = m * k;
    let mut means = Matrix::zeros(k, dim);
    let mut variances = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    let rows = || {
        episodes
            .iter()
            .flat_map(|e| e.features.iter().map(|f| f.values()).zip(e.labels.iter().copied()))
    };
    for (x, y) in rows() {
        counts[y] += 1;
        for (s, &v) in means.row_mut(y).iter_mut().zip(x) {
            *s += v;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        means.row_mut(j).iter_mut().for_each(|v| *v /= c as f64);
    }
    for (x, y) in rows() {
        let mu = means.row(y).to_vec();
        for ((s, &v), u) in variances.row_mut(y).iter_mut().zip(x).zip(mu) {
            *s += (v - u) * (v - u);
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        variances
            .row_mut(j)
            .iter_mut()
            .for_each(|v: &mut f64| *v = (*v / c as f64).max(NB_VARIANCE_FLOOR));
    }
    round_f32(&mut means);
    round_f32(&mut variances);
    // keep the floor after rounding
    variances
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.max(f64::from(NB_VARIANCE_FLOOR as f32)));
    let priors = counts
        .iter()
        .map(|&c| f64::from((c as f64 / n as f64) as f32))
        .collect();
    Ok(EnsembleModel::GaussianNb {
        learners: m,
        way: k,
        means,
        variances,
        priors,
    })
}

pub fn ensemble_predict(model: &EnsembleModel, features: &EnsembleFeatures) -> Result<ClassDistribution> {
    let (m, k) = model.shape();
    if (features.learners(), features.way()) != (m, k) {
        return Err(Error::Shape(format!(
            "model expects {m} learners x {k} classes, features are {} x {}",
            features.learners(),
            features.way()
        )));
    }
    let x = features.values();
    match model {
        EnsembleModel::MajorityVote { .. } => {
            let mut votes = vec![0usize; k];
            let mut mass = vec![0.0f64; k];
            for l in 0..m {
                let block = features.block(l);
                votes[argmax(block)] += 1;
                for (s, &p) in mass.iter_mut().zip(block) {
                    *s += p;
                }
            }
            let top = *votes.iter().max().expect("k > 0");
            let mut winner = None::<usize>;
            for j in (0..k).filter(|&j| votes[j] == top) {
                match winner {
                    Some(w) if mass[j] <= mass[w] => {}
                    _ => winner = Some(j),
                }
            }
            Ok(ClassDistribution::one_hot(k, winner.expect("some class has top votes")))
        }
        EnsembleModel::MultinomialLinear { weights, .. } => {
            let mut logits = vec![0.0; k];
            linear_logits(weights, x, &mut logits);
            Ok(ClassDistribution::softmax(&logits))
        }
        EnsembleModel::GaussianNb {
            means,
            variances,
            priors,
            ..
        } => {
            let log_post: Vec<f64> = (0..k)
                .map(|j| {
                    let ll: f64 = x
                        .iter()
                        .zip(means.row(j))
                        .zip(variances.row(j))
                        .map(|((&v, &mu), &var)| {
                            -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (v - mu) * (v - mu) / var)
                        })
                        .sum();
                    priors[j].ln() + ll
                })
                .collect();
            Ok(ClassDistribution::softmax(&log_post))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSelection {
    pub best: EnsembleModel,
    /// Episodic accuracy of every candidate, in candidate order.
    pub accuracies: Vec<(EnsembleVariant, f64)>,
    pub episodes_evaluated: usize,
}

/// Mean episodic accuracy of `model` over `episodes`.
pub fn score_model(model: &EnsembleModel, episodes: &[EnsembleEpisode]) -> Result<f64> {
    let preds = episodes
        .iter()
        .map(|e| e.features.iter().map(|f| ensemble_predict(model, f)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let labels: Vec<Vec<usize>> = episodes.iter().map(|e| e.labels.clone()).collect();
    Ok(episodic_accuracy(&preds, &labels)?.mean)
}

/// Keeps the candidate with the highest accuracy; earlier candidates win ties.
pub fn select_best(candidates: Vec<EnsembleModel>, test_episodes: &[EnsembleEpisode]) -> Result<EnsembleSelection> {
    if candidates.is_empty() {
        return Err(Error::Train("no ensemble candidates".into()));
    }
    if test_episodes.is_empty() {
        return Err(Error::Train("no selection episodes".into()));
    }
    let mut accuracies = Vec::with_capacity(candidates.len());
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        let acc = score_model(c, test_episodes)?;
        if acc > accuracies.get(best).map_or(f64::NEG_INFINITY, |&(_, a)| a) {
            best = i;
        }
        accuracies.push((c.variant(), acc));
    }
    Ok(EnsembleSelection {
        best: candidates.into_iter().nth(best).expect("index in range"),
        accuracies,
        episodes_evaluated: test_episodes.len(),
    })
}

pub fn encode_ensemble(model: &EnsembleModel) -> Vec<u8> {
    let (m, k) = model.shape();
    let mut out = ENS_MAGIC.to_vec();
    out.push(model.variant().tag());
    out.write_u32::<LittleEndian>(m as u32).expect("vec write");
    out.write_u32::<LittleEndian>(k as u32).expect("vec write");
    let mut put = |vals: &[f64]| {
        for &v in vals {
            out.write_f32::<LittleEndian>(v as f32).expect("vec write");
        }
    };
    match model {
        EnsembleModel::MajorityVote { .. } => {}
        EnsembleModel::MultinomialLinear { weights, .. } => put(weights.as_slice()),
        EnsembleModel::GaussianNb {
            means,
            variances,
            priors,
            ..
        } => {
            put(means.as_slice());
            put(variances.as_slice());
            put(priors);
        }
    }
    out
}

pub fn decode_ensemble(bytes: &[u8]) -> std::result::Result<EnsembleModel, String> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| "missing magic")?;
    if &magic != ENS_MAGIC {
        return Err(format!("bad magic {magic:?}, expected ENS1"));
    }
    let tag = cur.read_u8().map_err(|_| "missing variant tag")?;
    let m = cur.read_u32::<LittleEndian>().map_err(|_| "truncated header")? as usize;
    let k = cur.read_u32::<LittleEndian>().map_err(|_| "truncated header")? as usize;
    if m == 0 || k == 0 {
        return Err(format!("degenerate shape {m} learners x {k} classes"));
    }
    let mut take = |len: usize| -> std::result::Result<Vec<f64>, String> {
        let mut buf = vec![0f32; len];
        cur.read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|_| "truncated tensor".to_string())?;
        Ok(buf.into_iter().map(f64::from).collect())
    };
    let model = match tag {
        0 => EnsembleModel::MajorityVote { learners: m, way: k },
        1 => EnsembleModel::MultinomialLinear {
            learners: m,
            way: k,
            weights: Matrix::from_vec(k, m * k + 1, take(k * (m * k + 1))?).map_err(|e| e.to_string())?,
        },
        2 => {
            let means = Matrix::from_vec(k, m * k, take(k * m * k)?).map_err(|e| e.to_string())?;
            let variances = Matrix::from_vec(k, m * k, take(k * m * k)?).map_err(|e| e.to_string())?;
            let priors = take(k)?;
            if variances.as_slice().iter().any(|&v| !(v > 0.0)) {
                return Err("non-positive variance".into());
            }
            EnsembleModel::GaussianNb {
                learners: m,
                way: k,
                means,
                variances,
                priors,
            }
        }
        other => return Err(format!("unknown variant tag {other}")),
    };
    if cur.position() as usize != bytes.len() {
        return Err("trailing bytes after tensors".into());
    }
    Ok(model)
}

pub fn save_ensemble(model: &EnsembleModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ensemble(model)).map_err(|e| Error::io(path, e))
}

pub fn load_ensemble(path: &Path) -> Result<EnsembleModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ensemble(&bytes).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> ClassDistribution {
        ClassDistribution::new(p.to_vec()).unwrap()
    }

    fn feats(blocks: &[&[f64]]) -> EnsembleFeatures {
        let k = blocks[0].len();
        EnsembleFeatures::new(blocks.len(), k, blocks.concat()).unwrap()
    }

    #[test]
    fn feature_dims() {
        let learner = vec![dist(&[0.2; 5]); 3];
        let f = build_features(&vec![learner.clone(); 4]).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].values().len(), 20);
        let single = build_features(&[learner.clone()]).unwrap();
        assert_eq!(single[0].values(), learner[0].probs());
        assert!(build_features(&[learner, vec![dist(&[0.5, 0.5])]]).is_err());
    }

    #[test]
    fn vote_rules() {
        let vote = EnsembleModel::MajorityVote { learners: 2, way: 2 };
        let tie = feats(&[&[0.9, 0.1], &[0.1, 0.9]]);
        assert_eq!(ensemble_predict(&vote, &tie).unwrap().probs(), &[1.0, 0.0]);
        let mass_tie = feats(&[&[0.6, 0.4], &[0.3, 0.7]]);
        // votes 1-1; mass (0.9, 1.1) -> class 1
        assert_eq!(ensemble_predict(&vote, &mass_tie).unwrap().argmax(), 1);
        let vote3 = EnsembleModel::MajorityVote { learners: 3, way: 3 };
        let agree = feats(&[&[0.1, 0.1, 0.8], &[0.2, 0.2, 0.6], &[0.0, 0.4, 0.6]]);
        assert_eq!(ensemble_predict(&vote3, &agree).unwrap().probs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_by_hand() {
        // K=2, M=1: logits = W x + b
        let weights = Matrix::from_vec(2, 3, vec![1.0, -1.0, 0.5, 0.0, 2.0, -0.5]).unwrap();
        let model = EnsembleModel::MultinomialLinear {
            learners: 1,
            way: 2,
            weights,
        };
        let x = feats(&[&[0.25, 0.75]]);
        let z0: f64 = 0.25 - 0.75 + 0.5;
        let z1: f64 = 1.5 - 0.5;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let out = ensemble_predict(&model, &x).unwrap();
        assert!((out.probs()[0] - p0).abs() < 1e-15);
    }

    fn onehot_episode(k: usize) -> EnsembleEpisode {
        EnsembleEpisode {
            features: (0..k)
                .map(|j| {
                    let mut v = vec![0.0; k];
                    v[j] = 1.0;
                    EnsembleFeatures::new(1, k, v).unwrap()
                })
                .collect(),
            labels: (0..k).collect(),
        }
    }

    #[test]
    fn zero_iteration_linear_is_uniform() {
        let cfg = LinearConfig {
            iterations: 0,
            ..LinearConfig::default()
        };
        let model = fit_linear(&[onehot_episode(3)], &cfg).unwrap();
        let p = ensemble_predict(&model, &onehot_episode(3).features[1]).unwrap();
        assert!(p.probs().iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
        let loss = -p.probs()[1].ln();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_train_error() {
        let mut ep = onehot_episode(3);
        ep.features.pop();
        ep.labels.pop();
        let err = train_candidates(&[ep], &LinearConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Train(ref m) if m.contains("class 2")), "{err}");
    }

    #[test]
    fn candidate_order_and_ties() {
        let eps = [onehot_episode(3)];
        let c = train_candidates(&eps, &LinearConfig::default()).unwrap();
        let order: Vec<_> = c.iter().map(EnsembleModel::variant).collect();
        assert_eq!(order, EnsembleVariant::ORDER);
        // every candidate is perfect on one-hot features: vote wins the tie
        let sel = select_best(c, &eps).unwrap();
        assert_eq!(sel.best.variant(), EnsembleVariant::MajorityVote);
        assert!(sel.accuracies.iter().all(|&(_, a)| a == 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let eps = [onehot_episode(3)];
        for model in train_candidates(&eps, &LinearConfig::default()).unwrap() {
            let bytes = encode_ensemble(&model);
            assert_eq!(bytes[4], model.variant().tag());
            assert_eq!(decode_ensemble(&bytes).unwrap(), model);
            assert!(decode_ensemble(&bytes[..bytes.len() - 1]).is_err() || bytes.len() == 13);
        }
    }
}
