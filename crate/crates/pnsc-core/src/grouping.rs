//! Speaker grouping: k-means over speaker embeddings (k-means++ seeding,
//! Lloyd iterations) plus a serialized cluster model that downstream decoder
//! banks bind to by content hash.

use crate::embed::{SpeakerEmbedding, EMBED_DIM};
use crate::nn::checkpoint::write_file_atomic;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

const CLUSTER_MAGIC: &[u8; 4] = b"PNSG";
const CLUSTER_VERSION: u16 = 1;
const MAX_ITERS: usize = 200;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic per seed.
/// Empty clusters are reseeded from the point farthest from its centroid.
pub fn kmeans_fit(points: &[Vec<f64>], c: usize, seed: u64) -> Result<KMeansResult> {
    if c < 1 {
        return Err(Error::InvalidArgument("need at least 1 cluster".into()));
    }
    if points.len() < c {
        return Err(Error::InvalidArgument(format!(
            "cannot form {} clusters from {} points",
            c,
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("inconsistent point dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(c);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < c {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|m| sq_dist(p, m)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass on existing centroids: pick uniformly
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(points[next].clone());
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut labels = Vec::with_capacity(points.len());
        let mut inertia = 0.0;
        for p in points {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, m) in centroids.iter().enumerate() {
                let d = sq_dist(p, m);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            labels.push(best);
            inertia += best_d;
        }
        (labels, inertia)
    };

    let (mut labels, mut inertia) = assign(&centroids);
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        // update step
        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (p, l) in points.iter().zip(&labels) {
            counts[*l] += 1;
            for (s, v) in sums[*l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..c {
            if counts[k] == 0 {
                // reseed from the point currently farthest from its centroid
                let far = (0..points.len())
                    .max_by(|a, b| {
                        sq_dist(&points[*a], &centroids[labels[*a]])
                            .partial_cmp(&sq_dist(&points[*b], &centroids[labels[*b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[k] = points[far].clone();
            } else {
                for (m, s) in centroids[k].iter_mut().zip(&sums[k]) {
                    *m = s / counts[k] as f64;
                }
            }
        }
        let (new_labels, new_inertia) = assign(&centroids);
        assert!(
            new_inertia <= inertia + 1e-9,
            "k-means inertia increased: {} -> {}",
            inertia,
            new_inertia
        );
        let converged = new_labels == labels;
        labels = new_labels;
        inertia = new_inertia;
        if converged {
            break;
        }
    }
    Ok(KMeansResult { centroids, assignments: labels, inertia, iterations })
}

/// Trained cluster model: centroids plus the speaker-to-group table from
/// fitting time.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// (speaker_id, group) pairs recorded at fit time, fit order.
    pub assignments: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub group: usize,
    /// softmax(-distance) over groups
    pub posterior: Vec<f64>,
}

impl ClusterModel {
    pub fn num_groups(&self) -> usize {
        self.centroids.len()
    }

    /// Fits k-means over per-speaker mean embeddings.
    pub fn fit(speakers: &[(String, SpeakerEmbedding)], c: usize, seed: u64) -> Result<Self> {
        let points: Vec<Vec<f64>> = speakers.iter().map(|(_, e)| e.values.to_vec()).collect();
        let km = kmeans_fit(&points, c, seed)?;
        let assignments = speakers
            .iter()
            .zip(&km.assignments)
            .map(|((id, _), g)| (id.clone(), *g))
            .collect();
        Ok(Self { centroids: km.centroids, assignments })
    }

    /// Nearest centroid; ties break to the lowest group index.
    pub fn classify(&self, embedding: &SpeakerEmbedding) -> Classification {
        let dists: Vec<f64> =
            self.centroids.iter().map(|m| sq_dist(&embedding.values, m)).collect();
        let mut group = 0;
        for (k, d) in dists.iter().enumerate() {
            if *d < dists[group] {
                group = k;
            }
        }
        let max_neg = dists.iter().map(|d| -d).fold(f64::NEG_INFINITY, f64::max);
        let mut posterior: Vec<f64> = dists.iter().map(|d| (-d - max_neg).exp()).collect();
        let sum: f64 = posterior.iter().sum();
        for p in posterior.iter_mut() {
            *p /= sum;
        }
        Classification { group, posterior }
    }

    pub fn group_of(&self, speaker_id: &str) -> Option<usize> {
        self.assignments.iter().find(|(id, _)| id == speaker_id).map(|(_, g)| *g)
    }

    /// Speakers per group, by fit-time assignment.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups()];
        for (_, g) in &self.assignments {
            sizes[*g] += 1;
        }
        sizes
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLUSTER_MAGIC);
        out.extend_from_slice(&CLUSTER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.centroids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(EMBED_DIM as u32).to_le_bytes());
        for m in &self.centroids {
            for v in m {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.assignments.len() as u32).to_le_bytes());
        for (id, g) in &self.assignments {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(*g as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("cluster model file truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CLUSTER_MAGIC {
            return Err(Error::Checkpoint("not a cluster model file".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CLUSTER_VERSION {
            return Err(Error::Checkpoint(format!("unsupported cluster model version {}", version)));
        }
        let c = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if d != EMBED_DIM {
            return Err(Error::Checkpoint(format!(
                "cluster model dimension {} does not match embedding dimension {}",
                d, EMBED_DIM
            )));
        }
        let mut centroids = Vec::with_capacity(c);
        for _ in 0..c {
            let mut m = Vec::with_capacity(d);
            for _ in 0..d {
                m.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64);
            }
            centroids.push(m);
        }
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut assignments = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(take(&mut pos, len)?.to_vec())
                .map_err(|_| Error::Checkpoint("speaker id is not utf-8".into()))?;
            let g = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            if g >= c {
                return Err(Error::Checkpoint(format!("assignment to nonexistent group {}", g)));
            }
            assignments.push((id, g));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after cluster model".into()));
        }
        Ok(Self { centroids, assignments })
    }

    /// Content hash; decoder banks record it to bind to the exact grouping.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_bytes());
        digest.into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Adjusted Rand index between two labelings of the same items.
/// 1.0 means identical partitions; ~0.0 is chance level.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (x, y) in a.iter().zip(b) {
        table[*x][*y] += 1;
    }
    let choose2 = |m: u64| -> f64 { (m * m.saturating_sub(1)) as f64 / 2.0 };
    let sum_ij: f64 = table.iter().flatten().map(|m| choose2(*m)).sum();
    let sum_a: f64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: &[f64], n: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| center.iter().map(|c| c + rng.gen_range(-spread..spread)).collect())
            .collect()
    }

    #[test]
    fn two_well_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = blob(&[0.0, 0.0], 20, 0.1, &mut rng);
        points.extend(blob(&[5.0, 5.0], 20, 0.1, &mut rng));
        let km = kmeans_fit(&points, 2, 7).unwrap();
        let truth: Vec<usize> = (0..40).map(|i| i / 20).collect();
        assert_eq!(adjusted_rand_index(&km.assignments, &truth), 1.0);
    }

    #[test]
    fn matches_brute_force_two_partition_oracle() {
        // 6 points in 1-D: enumerate every split point of the sorted order
        // (the optimal 2-means partition of 1-D data is an interval split)
        let points: Vec<Vec<f64>> = [0.1, 0.4, 0.5, 4.0, 4.2, 4.9].iter().map(|v| vec![*v]).collect();
        let km = kmeans_fit(&points, 2, 3).unwrap();

        let mut best = f64::INFINITY;
        for split in 1..points.len() {
            let cost = |seg: &[Vec<f64>]| -> f64 {
                let mean: f64 = seg.iter().map(|p| p[0]).sum::<f64>() / seg.len() as f64;
                seg.iter().map(|p| (p[0] - mean) * (p[0] - mean)).sum()
            };
            best = best.min(cost(&points[..split]) + cost(&points[split..]));
        }
        assert!((km.inertia - best).abs() < 1e-9, "inertia {} vs oracle {}", km.inertia, best);
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let points = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]];
        let km = kmeans_fit(&points, 1, 1).unwrap();
        assert!((km.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((km.centroids[0][1] - 2.0).abs() < 1e-12);
        assert!(km.assignments.iter().all(|a| *a == 0));
    }

    #[test]
    fn determinism_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut points = blob(&[0.0, 0.0], 15, 0.5, &mut rng);
        points.extend(blob(&[3.0, -2.0], 15, 0.5, &mut rng));
        points.extend(blob(&[-4.0, 4.0], 15, 0.5, &mut rng));
        let a = kmeans_fit(&points, 3, 42).unwrap();
        let b = kmeans_fit(&points, 3, 42).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn invalid_cluster_counts() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(kmeans_fit(&points, 0, 1).is_err());
        assert!(kmeans_fit(&points, 3, 1).is_err());
    }

    #[test]
    fn ari_properties() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_eq!(adjusted_rand_index(&a, &a), 1.0);
        // label permutation is still a perfect match
        let permuted = [2, 2, 0, 0, 1, 1];
        assert_eq!(adjusted_rand_index(&a, &permuted), 1.0);
        // a genuinely different partition scores below 1
        let other = [0, 1, 0, 1, 0, 1];
        assert!(adjusted_rand_index(&a, &other) < 0.5);
    }

    fn embedding(fill: &[f64]) -> SpeakerEmbedding {
        let mut v = [0.0; EMBED_DIM];
        v[..fill.len()].copy_from_slice(fill);
        SpeakerEmbedding { values: v }
    }

    fn toy_model() -> ClusterModel {
        let speakers = vec![
            ("spk_a".to_string(), embedding(&[0.0, 0.0])),
            ("spk_b".to_string(), embedding(&[0.1, 0.0])),
            ("spk_c".to_string(), embedding(&[4.0, 4.0])),
            ("spk_d".to_string(), embedding(&[4.1, 4.0])),
        ];
        ClusterModel::fit(&speakers, 2, 5).unwrap()
    }

    #[test]
    fn fit_and_classify() {
        let model = toy_model();
        assert_eq!(model.num_groups(), 2);
        assert_eq!(model.group_of("spk_a"), model.group_of("spk_b"));
        assert_ne!(model.group_of("spk_a"), model.group_of("spk_c"));
        assert_eq!(model.group_sizes(), vec![2, 2]);

        let near_a = model.classify(&embedding(&[0.05, 0.01]));
        assert_eq!(Some(near_a.group), model.group_of("spk_a"));
        let psum: f64 = near_a.posterior.iter().sum();
        assert!((psum - 1.0).abs() < 1e-12);
        assert!(near_a.posterior[near_a.group] > 0.9);
    }

    #[test]
    fn classify_tie_breaks_to_lowest_index() {
        let model = ClusterModel {
            centroids: vec![embedding(&[1.0]).values.to_vec(), embedding(&[-1.0]).values.to_vec()],
            assignments: vec![],
        };
        let c = model.classify(&embedding(&[0.0]));
        assert_eq!(c.group, 0);
        assert!((c.posterior[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip_and_hash() {
        let model = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.bin");
        model.save(&path).unwrap();
        let back = ClusterModel::load(&path).unwrap();
        assert_eq!(back.assignments, model.assignments);
        assert_eq!(back.hash(), back.hash());
        // centroids survive up to f32 precision
        for (a, b) in back.centroids.iter().flatten().zip(model.centroids.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
        // hash is sensitive to content
        let mut other = back.clone();
        other.assignments[0].1 ^= 1;
        assert_ne!(other.hash(), back.hash());
    }

    #[test]
    fn corrupt_files_rejected() {
        assert!(ClusterModel::from_bytes(b"XXXX").is_err());
        let model = toy_model();
        let mut bytes = model.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(ClusterModel::from_bytes(&bytes).is_err());
        let mut extra = model.to_bytes();
        extra.push(0);
        assert!(ClusterModel::from_bytes(&extra).is_err());
    }
}
