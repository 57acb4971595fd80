//! Reference implementations used as test oracles. They are written
//! straight from the definitions, with no shared code paths: plain nested
//! `Vec`s, explicit loops, and a softmax in the `1 / sum exp(l_k - l_j)`
//! form instead of max subtraction.
#![allow(dead_code)]

use fewshot_core::controller::{ValidationSpec, WorkerSpec};
use fewshot_core::dataset::{write_image_dataset, LabeledDataset};
use fewshot_core::pipeline::{EpisodeSpec, RunConfig};
use fewshot_core::synthetic::{blob_rasters, BlobSpec};
use fewshot_core::Matrix;
use rand::Rng;

pub type Points = Vec<Vec<f64>>;

pub fn to_matrix(rows: &Points) -> Matrix<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    Matrix::from_vec(rows.len(), dim, rows.concat()).unwrap()
}

pub fn from_matrix(m: &Matrix<f64>) -> Points {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

pub fn oracle_distance(a: &[f64], b: &[f64], squared: bool) -> f64 {
    if squared {
        sq_dist(a, b)
    } else {
        sq_dist(a, b).sqrt()
    }
}

pub fn oracle_prototypes(support: &Points, labels: &[usize], way: usize) -> Points {
    let dim = support[0].len();
    let mut out = Vec::new();
    for j in 0..way {
        let mut c = vec![0.0; dim];
        let mut n = 0.0;
        for (x, &l) in support.iter().zip(labels) {
            if l == j {
                n += 1.0;
                for i in 0..dim {
                    c[i] += x[i];
                }
            }
        }
        out.push(c.into_iter().map(|v| v / n).collect());
    }
    out
}

/// `p_j = 1 / sum_k exp(d_j - d_k)`
pub fn oracle_probs(protos: &Points, q: &[f64], squared: bool) -> Vec<f64> {
    let d: Vec<f64> = protos.iter().map(|c| oracle_distance(q, c, squared)).collect();
    d.iter()
        .map(|dj| 1.0 / d.iter().map(|dk| (dj - dk).exp()).sum::<f64>())
        .collect()
}

pub fn oracle_protonet(protos: &Points, queries: &Points, squared: bool) -> Points {
    queries.iter().map(|q| oracle_probs(protos, q, squared)).collect()
}

/// Soft k-means refinement followed by prediction from the final
/// prototypes, with the same early stop as the library (largest Euclidean
/// prototype move below `eps`).
pub fn oracle_mct(
    support: &Points,
    labels: &[usize],
    queries: &Points,
    way: usize,
    steps: usize,
    eps: f64,
    squared: bool,
) -> Points {
    let dim = support[0].len();
    let mut protos = oracle_prototypes(support, labels, way);
    for _ in 0..steps {
        let conf = oracle_protonet(&protos, queries, squared);
        let mut next = Vec::new();
        for j in 0..way {
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for (x, &l) in support.iter().zip(labels) {
                if l == j {
                    den += 1.0;
                    for i in 0..dim {
                        num[i] += x[i];
                    }
                }
            }
            for (q, p) in queries.iter().zip(&conf) {
                den += p[j];
                for i in 0..dim {
                    num[i] += p[j] * q[i];
                }
            }
            next.push(num.into_iter().map(|v| v / den).collect::<Vec<f64>>());
        }
        let moved = (0..way)
            .map(|j| sq_dist(&next[j], &protos[j]).sqrt())
            .fold(0.0, f64::max);
        protos = next;
        if moved < eps {
            break;
        }
    }
    oracle_protonet(&protos, queries, squared)
}

pub fn oracle_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// A random decoder episode in embedding space: class-major support with
/// `shot` rows per class, and `query` rows per class.
#[derive(Debug, Clone)]
pub struct RawEpisode {
    pub way: usize,
    pub support: Points,
    pub labels: Vec<usize>,
    pub queries: Points,
    pub query_labels: Vec<usize>,
}

pub fn random_episode<R: Rng>(rng: &mut R, way: usize, shot: usize, query: usize, dim: usize) -> RawEpisode {
    let centres: Points = (0..way)
        .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let mut draw = |c: &[f64]| -> Vec<f64> { c.iter().map(|v| v + rng.random_range(-1.5..1.5)).collect() };
    let mut support = Vec::new();
    let mut labels = Vec::new();
    let mut queries = Vec::new();
    let mut query_labels = Vec::new();
    for (j, c) in centres.iter().enumerate() {
        for _ in 0..shot {
            support.push(draw(c));
            labels.push(j);
        }
        for _ in 0..query {
            queries.push(draw(c));
            query_labels.push(j);
        }
    }
    RawEpisode {
        way,
        support,
        labels,
        queries,
        query_labels,
    }
}

pub fn max_abs_diff(a: &Points, b: &Points) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(u, v)| (u - v).abs())
        })
        .fold(0.0, f64::max)
}

/// Mean episodic accuracy of nearest-centroid classification on raw
/// payload values.
pub fn nearest_centroid_accuracy(dataset: &LabeledDataset, episodes: &[fewshot_core::Episode]) -> f64 {
    let vals = |id: usize| -> Vec<f64> {
        dataset.item(id).payload.values().iter().map(|&v| f64::from(v)).collect()
    };
    let mut total = 0.0;
    for ep in episodes {
        let support: Points = ep.support.iter().map(|i| vals(i.item_id)).collect();
        let protos = oracle_prototypes(&support, &ep.support_labels(), ep.way);
        let mut hits = 0;
        for q in &ep.query {
            let x = vals(q.item_id);
            let d: Vec<f64> = protos.iter().map(|c| -sq_dist(&x, c)).collect();
            if oracle_argmax(&d) == q.label {
                hits += 1;
            }
        }
        total += hits as f64 / ep.query.len() as f64;
    }
    total / episodes.len() as f64
}

/// Small MLP worker suited to 12x12 ring images.
pub fn small_worker(batch_way: usize) -> WorkerSpec {
    let mut w = WorkerSpec {
        hidden: vec![32],
        embedding_dim: 16,
        ..WorkerSpec::default()
    };
    w.hyper.batch_way = batch_way;
    w.hyper.batch_shot = 4;
    w.hyper.batches_per_epoch = 10;
    w
}

/// Writes the ring corpus under `dir` and returns a config over it, with
/// the dataset as read back from disk (8-bit pixels).
pub fn ring_config(dir: &std::path::Path, spec: &BlobSpec) -> (RunConfig, LabeledDataset) {
    let (ds, _) = blob_rasters(spec).unwrap();
    let data = dir.join("rings");
    write_image_dataset(&ds, &data).unwrap();
    let cfg = RunConfig {
        dataset: data,
        split_ratios: [2, 3, 3],
        workers: vec![small_worker(2), small_worker(2)],
        validation: ValidationSpec {
            episodes: 20,
            way: 3,
            shot: 1,
            query: 5,
        },
        evaluation: EpisodeSpec {
            episodes: 200,
            way: 3,
            shot: 1,
            query: 19,
        },
        budget_seconds: 600.0,
        max_rounds: Some(3),
        ..RunConfig::default()
    };
    let loaded = fewshot_core::load_dataset(&cfg.dataset).unwrap();
    (cfg, loaded)
}
