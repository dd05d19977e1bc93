//! Error topic modeling: embed wrong predictions, cluster them with seeded
//! k-means, and pick the dominant cluster for analysis.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{PredictionOutcome, Sample};

pub use crate::agents::http::{EmbeddingConfig, HttpEmbedder};

pub const MAX_KMEANS_ITERATIONS: usize = 100;
/// Independent k-means++ starts; the lowest within-cluster sum of squares wins.
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("expected {expected} embeddings, got {got}")]
    Count { expected: usize, got: usize },
    #[error("embedding dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("embedding dimension {0} is below 2")]
    TooSmall(usize),
    #[error("nothing to embed")]
    Empty,
}

/// Maps texts to fixed-dimension vectors. Identical text must map to identical vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for &T {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed(texts)
    }
}

/// Local embedder: signed feature hashing of character bigrams and trigrams,
/// L2-normalized. Deterministic across platforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

impl HashEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let dim = self.dim.max(2);
        let mut v = vec![0.0; dim];
        let padded: Vec<char> = format!("  {} ", text.to_lowercase()).chars().collect();
        for n in [2usize, 3] {
            for gram in padded.windows(n) {
                let s: String = gram.iter().collect();
                let h = fnv1a(s.as_bytes());
                let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
                v[(h % dim as u64) as usize] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Which text of a wrong prediction gets embedded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedField {
    #[default]
    Gold,
    Question,
    Prediction,
}

impl fmt::Display for EmbedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedField::Gold => "gold",
            EmbedField::Question => "question",
            EmbedField::Prediction => "prediction",
        })
    }
}

/// One embedding per wrong prediction.
pub fn embed_errors<E: EmbeddingProvider + ?Sized>(
    wrong: &[(&Sample, &PredictionOutcome)],
    provider: &E,
    field: EmbedField,
) -> Result<Vec<Vec<f64>>, EmbedError> {
    if wrong.is_empty() {
        return Err(EmbedError::Empty);
    }
    let texts: Vec<String> = wrong
        .iter()
        .map(|(s, o)| match field {
            EmbedField::Gold => s.gold_answer.clone(),
            EmbedField::Question => s.question.clone(),
            EmbedField::Prediction => o.predicted_answer.clone(),
        })
        .collect();
    let vectors = provider.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbedError::Count { expected: texts.len(), got: vectors.len() });
    }
    let dim = vectors[0].len();
    if dim < 2 {
        return Err(EmbedError::TooSmall(dim));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(EmbedError::Dimension(dim, v.len()));
    }
    Ok(vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCluster {
    pub label: usize,
    /// Positions in the clustered input.
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
}

impl ErrorCluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding: first center uniform, then each next center drawn with
/// probability proportional to squared distance from the chosen ones. Stops
/// early when every point coincides with a center.
fn seed_centers(vectors: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![vectors[rng.random_range(0..vectors.len())].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.push(vectors[pick].clone());
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &vectors[pick]));
        }
    }
    centers
}

/// Seeded k-means with `k = min(num_clusters, n)`.
///
/// Each of [`KMEANS_RESTARTS`] starts runs Lloyd iterations until assignments
/// stop changing or [`MAX_KMEANS_ITERATIONS`] is reached; the start with the
/// lowest within-cluster sum of squares is kept, the earliest on ties.
/// Clusters that end up empty are dropped, so fewer than `k` clusters may come
/// back on degenerate input. Labels are contiguous from 0.
pub fn cluster_errors(vectors: &[Vec<f64>], num_clusters: usize, seed: u64) -> Vec<ErrorCluster> {
    assert!(!vectors.is_empty(), "cluster_errors needs at least one vector");
    let k = num_clusters.clamp(1, vectors.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<ErrorCluster>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let clusters = lloyd(vectors, k, &mut rng);
        let wcss = within_cluster_ss(vectors, &clusters);
        if best.as_ref().is_none_or(|(b, _)| wcss < *b) {
            best = Some((wcss, clusters));
        }
    }
    best.expect("at least one restart").1
}

fn lloyd(vectors: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<ErrorCluster> {
    let mut centers = seed_centers(vectors, k, rng);
    let dim = vectors[0].len();

    let mut assignment: Vec<usize> = vectors.iter().map(|v| nearest(v, &centers)).collect();
    for _ in 0..MAX_KMEANS_ITERATIONS {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (v, &a) in vectors.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        // Drop empty clusters and remap.
        let keep: Vec<usize> = (0..centers.len()).filter(|&j| counts[j] > 0).collect();
        centers = keep
            .iter()
            .map(|&j| sums[j].iter().map(|s| s / counts[j] as f64).collect())
            .collect();
        let next: Vec<usize> = vectors.iter().map(|v| nearest(v, &centers)).collect();
        let remapped: Vec<usize> =
            assignment.iter().map(|a| keep.iter().position(|j| j == a).expect("assigned cluster is non-empty")).collect();
        if next == remapped {
            assignment = next;
            break;
        }
        assignment = next;
    }

    let mut clusters: Vec<ErrorCluster> = centers
        .into_iter()
        .enumerate()
        .map(|(label, centroid)| ErrorCluster { label, members: Vec::new(), centroid })
        .collect();
    for (i, &a) in assignment.iter().enumerate() {
        clusters[a].members.push(i);
    }
    clusters.retain(|c| !c.members.is_empty());
    for (label, c) in clusters.iter_mut().enumerate() {
        c.label = label;
    }
    clusters
}

/// Within-cluster sum of squared distances to each cluster's mean.
pub fn within_cluster_ss(vectors: &[Vec<f64>], clusters: &[ErrorCluster]) -> f64 {
    clusters
        .iter()
        .map(|c| {
            let dim = vectors[c.members[0]].len();
            let mean: Vec<f64> = (0..dim)
                .map(|d| c.members.iter().map(|&i| vectors[i][d]).sum::<f64>() / c.len() as f64)
                .collect();
            c.members.iter().map(|&i| sq_dist(&vectors[i], &mean)).sum::<f64>()
        })
        .sum()
}

fn subsample(pool: &[usize], max_samples: usize, seed: u64) -> Vec<usize> {
    let mut out: Vec<usize> = if pool.len() <= max_samples {
        pool.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, pool.len(), max_samples).into_iter().map(|i| pool[i]).collect()
    };
    out.sort_unstable();
    out
}

/// Members of the largest cluster (ties go to the lowest label), subsampled
/// to at most `max_samples` with a seeded uniform draw. Returned positions are sorted.
pub fn select_major_cluster(clusters: &[ErrorCluster], max_samples: usize, seed: u64) -> Vec<usize> {
    let major = clusters
        .iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b.label.cmp(&a.label)))
        .expect("select_major_cluster needs at least one cluster");
    subsample(&major.members, max_samples.max(1), seed)
}

/// Seeded uniform subset of `min(max_samples, n_wrong)` positions, sorted.
pub fn select_random(n_wrong: usize, max_samples: usize, seed: u64) -> Vec<usize> {
    let pool: Vec<usize> = (0..n_wrong).collect();
    subsample(&pool, max_samples.max(1), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TaskKind;
    use proptest::prelude::*;

    fn blobs() -> Vec<Vec<f64>> {
        vec![
            vec![0.1, 0.0],
            vec![-0.1, 0.0],
            vec![0.0, 0.1],
            vec![10.1, 10.0],
            vec![9.9, 10.0],
        ]
    }

    /// Exhaustive minimum WCSS over all two-way partitions.
    fn brute_force_bipartition(vectors: &[Vec<f64>]) -> f64 {
        let n = vectors.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let a: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let b: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
            let cl = [
                ErrorCluster { label: 0, members: a, centroid: vec![] },
                ErrorCluster { label: 1, members: b, centroid: vec![] },
            ];
            best = best.min(within_cluster_ss(vectors, &cl));
        }
        best
    }

    #[test]
    fn single_vector_is_one_cluster() {
        let c = cluster_errors(&[vec![1.0, 2.0]], 3, 0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members, vec![0]);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let v = blobs();
        let oracle = brute_force_bipartition(&v);
        for seed in 0..20 {
            let c = cluster_errors(&v, 2, seed);
            let mut sizes: Vec<usize> = c.iter().map(ErrorCluster::len).collect();
            sizes.sort_unstable();
            assert_eq!(sizes, vec![2, 3]);
            assert!((within_cluster_ss(&v, &c) - oracle).abs() < 1e-9);
            let picked = select_major_cluster(&c, 5, seed);
            assert_eq!(picked, vec![0, 1, 2]);
        }
    }

    #[test]
    fn identical_vectors_collapse_into_one_cluster() {
        let v = vec![vec![0.5, 0.5]; 4];
        let c = cluster_errors(&v, 2, 3);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members, vec![0, 1, 2, 3]);
    }

    #[test]
    fn clusters_are_deterministic_per_seed() {
        let v: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 11) as f64, (i * 3 % 5) as f64]).collect();
        assert_eq!(cluster_errors(&v, 3, 42), cluster_errors(&v, 3, 42));
    }

    fn cluster(label: usize, members: Vec<usize>) -> ErrorCluster {
        ErrorCluster { label, members, centroid: vec![0.0, 0.0] }
    }

    #[test]
    fn major_cluster_rules() {
        assert_eq!(select_major_cluster(&[cluster(0, vec![0, 1, 2]), cluster(1, vec![3, 4])], 5, 0), vec![0, 1, 2]);
        assert_eq!(select_major_cluster(&[cluster(0, vec![0, 1]), cluster(1, vec![2, 3])], 5, 0), vec![0, 1]);
        let big = cluster(0, (0..10).collect());
        let a = select_major_cluster(std::slice::from_ref(&big), 4, 11);
        assert_eq!(a.len(), 4);
        assert_eq!(a, select_major_cluster(&[big], 4, 11));
    }

    #[test]
    fn random_selection_rules() {
        assert_eq!(select_random(3, 5, 1), vec![0, 1, 2]);
        let s = select_random(10, 4, 1);
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, select_random(10, 4, 1));
    }

    #[test]
    fn hash_embedder_is_deterministic_and_normalized() {
        let e = HashEmbedder::default();
        let a = e.embed_one("forty two");
        assert_eq!(a, e.embed_one("forty two"));
        assert_eq!(a.len(), 64);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(a, e.embed_one("seventeen"));
    }

    fn wrong(golds: &[&str]) -> Vec<(Sample, PredictionOutcome)> {
        golds
            .iter()
            .enumerate()
            .map(|(i, g)| {
                (
                    Sample::new(i as u64, format!("q{i}"), *g, TaskKind::FreeText).unwrap(),
                    PredictionOutcome {
                        sample_id: i as u64,
                        predicted_answer: "nope".into(),
                        extracted_answer: "nope".into(),
                        correct: false,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn embed_errors_shapes() {
        let e = HashEmbedder::default();
        let one = wrong(&["x"]);
        let refs: Vec<_> = one.iter().map(|(s, o)| (s, o)).collect();
        assert_eq!(embed_errors(&refs, &e, EmbedField::Gold).unwrap().len(), 1);

        let five = wrong(&["a", "b", "same", "same", "c"]);
        let refs: Vec<_> = five.iter().map(|(s, o)| (s, o)).collect();
        let v = embed_errors(&refs, &e, EmbedField::Gold).unwrap();
        assert_eq!(v.len(), 5);
        assert!(v.iter().all(|x| x.len() == 64));
        assert_eq!(v[2], v[3]);
        assert!(matches!(embed_errors(&[], &e, EmbedField::Gold), Err(EmbedError::Empty)));
    }

    struct Ragged;
    impl EmbeddingProvider for Ragged {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Ok(texts.iter().enumerate().map(|(i, _)| vec![0.0; 2 + i]).collect())
        }
    }

    #[test]
    fn ragged_embeddings_are_rejected() {
        let w = wrong(&["a", "b"]);
        let refs: Vec<_> = w.iter().map(|(s, o)| (s, o)).collect();
        assert!(matches!(embed_errors(&refs, &Ragged, EmbedField::Gold), Err(EmbedError::Dimension(2, 3))));
    }

    proptest! {
        #[test]
        fn clustering_partitions_the_input(
            points in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..25),
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            let c = cluster_errors(&points, k, seed);
            prop_assert!(c.len() <= k.min(points.len()));
            let mut all: Vec<usize> = c.iter().flat_map(|c| c.members.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..points.len()).collect::<Vec<_>>());
            // Converged assignments are nearest-centroid.
            for cl in &c {
                for &i in &cl.members {
                    let own = sq_dist(&points[i], &cl.centroid);
                    for other in &c {
                        prop_assert!(own <= sq_dist(&points[i], &other.centroid) + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn major_selection_comes_from_one_largest_cluster(
            sizes in proptest::collection::vec(1usize..12, 1..5),
            max in 1usize..8,
            seed in any::<u64>(),
        ) {
            let mut start = 0;
            let clusters: Vec<ErrorCluster> = sizes.iter().enumerate().map(|(l, &s)| {
                let c = cluster(l, (start..start + s).collect());
                start += s;
                c
            }).collect();
            let picked = select_major_cluster(&clusters, max, seed);
            let largest = *sizes.iter().max().unwrap();
            prop_assert_eq!(picked.len(), largest.min(max));
            prop_assert!(clusters.iter().any(|c| picked.iter().all(|i| c.members.contains(i))));
        }
    }
}
