//! Representative sampling of `R` and its split into semantic chunks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingMatrix;
use crate::math::ceil_fraction;
use crate::{Error, Result};

/// A uniform sample of record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub proportion: f64,
    pub seed: u64,
    /// Sampled ids in their original input order.
    pub sampled_ids: Vec<String>,
}

/// Uniform sample without replacement of `ceil(proportion * ids.len())` ids.
pub fn sample_records(ids: &[String], proportion: f64, seed: u64) -> Result<SamplePlan> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::InvalidParameter(format!("sample proportion {proportion} not in (0, 1]")));
    }
    if ids.is_empty() {
        return Err(Error::Empty("id list"));
    }
    let amount = ceil_fraction(proportion, ids.len()).clamp(1, ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, ids.len(), amount).into_vec();
    picked.sort_unstable();
    Ok(SamplePlan {
        proportion,
        seed,
        sampled_ids: picked.into_iter().map(|i| ids[i].clone()).collect(),
    })
}

/// Number of chunks for a sample: `ceil(log10(sample_size))`, at least 1.
pub fn chunk_count(sample_size: usize) -> usize {
    let mut n = 0usize;
    let mut pow = 1u128;
    while pow < sample_size as u128 {
        pow *= 10;
        n += 1;
    }
    n.max(1)
}

/// A partition of the sample into chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSet {
    /// Member ids per chunk, in sample order.
    pub chunks: Vec<Vec<String>>,
    /// Unit-norm centroid per chunk.
    pub centroids: Vec<Vec<f32>>,
    /// Chunk index per sample row.
    pub assignment: Vec<usize>,
    /// Objective `Σ (1 - x·c)` after each assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Builds a chunk set from an external `(id, chunk)` assignment, e.g. a
    /// chunk file written by an earlier run. Centroids are recomputed.
    pub fn from_assignment(matrix: &EmbeddingMatrix, assignment: Vec<usize>) -> Result<Self> {
        if assignment.len() != matrix.len() {
            return Err(Error::LengthMismatch(assignment.len(), matrix.len()));
        }
        let n_chunks = assignment.iter().copied().max().map_or(0, |m| m + 1);
        let centroids = mean_centroids(matrix, &assignment, n_chunks);
        let mut chunks = vec![Vec::new(); n_chunks];
        for (row, &c) in assignment.iter().enumerate() {
            chunks[c].push(matrix.id(row).into());
        }
        if chunks.iter().any(Vec::is_empty) {
            return Err(Error::InvalidParameter("chunk assignment leaves a chunk empty".into()));
        }
        Ok(Self {
            chunks,
            centroids: centroids.iter().map(|c| c.iter().map(|&x| x as f32).collect()).collect(),
            assignment,
            inertia_history: Vec::new(),
            converged: true,
        })
    }
}

fn dot64(x: &[f32], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| f64::from(*a) * b).sum()
}

fn normalize64(v: &mut [f64]) {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn mean_centroids(matrix: &EmbeddingMatrix, assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; matrix.dim()]; k];
    for (row, &c) in assignment.iter().enumerate() {
        for (s, &x) in sums[c].iter_mut().zip(matrix.row(row)) {
            *s += f64::from(x);
        }
    }
    for s in &mut sums {
        normalize64(s);
    }
    sums
}

fn inertia(matrix: &EmbeddingMatrix, assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    assignment.iter().enumerate().map(|(row, &c)| 1.0 - dot64(matrix.row(row), &centroids[c])).sum()
}

/// k-means++ seeding with squared chord distance `2 - 2 x·c`.
fn seed_centroids(matrix: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = matrix.len();
    let to64 = |row: usize| matrix.row(row).iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
    let mut centroids = vec![to64(rng.random_range(0..n))];
    let mut dist: Vec<f64> =
        (0..n).map(|r| (2.0 - 2.0 * dot64(matrix.row(r), &centroids[0])).max(0.0)).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 && t < *d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = to64(pick);
        for (r, d) in dist.iter_mut().enumerate() {
            *d = d.min((2.0 - 2.0 * dot64(matrix.row(r), &c)).max(0.0));
        }
        centroids.push(c);
    }
    centroids
}

/// Spherical K-Means: Lloyd iterations on unit vectors with re-normalized
/// mean centroids. Empty clusters take the point of the largest cluster that
/// lies farthest from its centroid.
pub fn kmeans_partition(
    matrix: &EmbeddingMatrix,
    n_chunks: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ChunkSet> {
    if n_chunks == 0 {
        return Err(Error::InvalidParameter("chunk count must be positive".into()));
    }
    if n_chunks > matrix.len() {
        return Err(Error::InvalidParameter(format!(
            "chunk count {n_chunks} exceeds sample size {}",
            matrix.len()
        )));
    }
    if max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters must be positive".into()));
    }
    let n = matrix.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(matrix, n_chunks, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters {
        let mut changed = false;
        for (row, slot) in assignment.iter_mut().enumerate() {
            let x = matrix.row(row);
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let s = dot64(x, centroid);
                if s > best_sim {
                    best_sim = s;
                    best = c;
                }
            }
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        history.push(inertia(matrix, &assignment, &centroids));
        if !changed {
            converged = true;
            break;
        }
        centroids = mean_centroids(matrix, &assignment, n_chunks);
        repair_empty(matrix, &mut assignment, &mut centroids);
    }

    let mut chunks = vec![Vec::new(); n_chunks];
    for (row, &c) in assignment.iter().enumerate() {
        chunks[c].push(matrix.id(row).into());
    }
    Ok(ChunkSet {
        chunks,
        centroids: centroids.iter().map(|c| c.iter().map(|&x| x as f32).collect()).collect(),
        assignment,
        inertia_history: history,
        converged,
    })
}

fn repair_empty(matrix: &EmbeddingMatrix, assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // largest cluster, lowest index on ties
        let largest = (0..k).fold(0, |best, c| if sizes[c] > sizes[best] { c } else { best });
        let mut far = usize::MAX;
        let mut far_sim = f64::INFINITY;
        for (row, &c) in assignment.iter().enumerate() {
            if c == largest {
                let s = dot64(matrix.row(row), &centroids[largest]);
                if s < far_sim {
                    far_sim = s;
                    far = row;
                }
            }
        }
        assignment[far] = empty;
        centroids[empty] = matrix.row(far).iter().map(|&x| f64::from(x)).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn sample_sizes() {
        assert_eq!(sample_records(&ids(1000), 0.2, 1).unwrap().sampled_ids.len(), 200);
        let all = sample_records(&ids(37), 1.0, 5).unwrap();
        let a: BTreeSet<_> = all.sampled_ids.iter().collect();
        let b = ids(37);
        assert_eq!(a, b.iter().collect());
        assert_eq!(
            sample_records(&ids(500), 0.3, 9).unwrap(),
            sample_records(&ids(500), 0.3, 9).unwrap()
        );
        assert!(sample_records(&ids(5), 0.0, 1).is_err());
        assert!(sample_records(&ids(5), 1.5, 1).is_err());
        assert!(sample_records(&[], 0.5, 1).is_err());
    }

    #[test]
    fn chunk_counts() {
        assert_eq!(chunk_count(200), 3);
        assert_eq!(chunk_count(10), 1);
        assert_eq!(chunk_count(1_000_000), 6);
        assert_eq!(chunk_count(1), 1);
        assert_eq!(chunk_count(5), 1);
        assert_eq!(chunk_count(11), 2);
        assert_eq!(chunk_count(1000), 3);
        assert_eq!(chunk_count(1001), 4);
        let mut prev = 0;
        for n in 1..5000 {
            let c = chunk_count(n);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn separable_groups() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let e = 0.05 * (i as f32 % 5.0);
            rows.push((format!("a{i}"), vec![1.0, e, 0.0]));
            rows.push((format!("b{i}"), vec![0.0, e, 1.0]));
        }
        let m = EmbeddingMatrix::from_rows(3, rows).unwrap();
        let cs = kmeans_partition(&m, 2, 4, 100).unwrap();
        assert!(cs.converged);
        for chunk in &cs.chunks {
            assert_eq!(chunk.len(), 20);
            let first = chunk[0].as_bytes()[0];
            assert!(chunk.iter().all(|id| id.as_bytes()[0] == first));
        }
    }

    #[test]
    fn single_chunk_and_errors() {
        let m = EmbeddingMatrix::from_rows(2, (0..7).map(|i| (format!("x{i}"), vec![1.0, i as f32]))).unwrap();
        let cs = kmeans_partition(&m, 1, 0, 10).unwrap();
        assert_eq!(cs.chunks.len(), 1);
        assert_eq!(cs.chunks[0], m.ids().to_vec());
        assert!(kmeans_partition(&m, 8, 0, 10).is_err());
        assert!(kmeans_partition(&m, 0, 0, 10).is_err());
    }

    #[test]
    fn duplicate_points_do_not_leave_empty_chunks() {
        let m = EmbeddingMatrix::from_rows(2, (0..6).map(|i| (format!("d{i}"), vec![1.0, 1.0]))).unwrap();
        let cs = kmeans_partition(&m, 3, 0, 20).unwrap();
        assert!(cs.chunks.iter().all(|c| !c.is_empty()));
        assert_eq!(cs.chunks.iter().map(Vec::len).sum::<usize>(), 6);
    }
}
