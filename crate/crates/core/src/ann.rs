//! HNSW approximate nearest-neighbor index over unit vectors (inner-product
//! similarity), plus an exact brute-force search used as a test oracle.
//!
//! The index is built once from an [`EmbeddingMatrix`] and never mutated.
//! Level draws come from a seeded ChaCha stream, so a given matrix, parameter
//! set and seed always produce the same graph.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingMatrix;
use crate::math::dot;
use crate::{Error, Result};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    /// Max neighbors per node on layers above 0; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 200, ef_search: 64 }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParameter(format!("M must be >= 2, got {}", self.m)));
        }
        if self.ef_construction < self.m {
            return Err(Error::InvalidParameter(format!(
                "ef_construction ({}) must be >= M ({})",
                self.ef_construction, self.m
            )));
        }
        Ok(())
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// A search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f32,
}

#[derive(Clone, Copy, Debug)]
struct Scored {
    sim: f32,
    node: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    // Higher similarity first; lower node index wins ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.node.cmp(&self.node))
    }
}

/// Generation-stamped visited set, reused across searches.
struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self { marks: vec![0; n], epoch: 0 }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Returns true if `node` was not yet visited.
    fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.marks[node as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

/// Immutable layered proximity graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    params: HnswParams,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    levels: Vec<u8>,
    /// `links[node][layer]` for `layer <= levels[node]`.
    links: Vec<Vec<Vec<u32>>>,
    entry: u32,
}

impl AnnIndex {
    /// Builds the index by inserting rows in matrix order.
    pub fn build(matrix: &EmbeddingMatrix, params: HnswParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if matrix.is_empty() {
            return Err(Error::Empty("embedding matrix"));
        }
        let n = matrix.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let level_mult = 1.0 / libm::log(params.m as f64);
        let mut index = Self {
            params,
            dim: matrix.dim(),
            ids: matrix.ids().to_vec(),
            vectors: matrix.as_slice().to_vec(),
            levels: Vec::with_capacity(n),
            links: Vec::with_capacity(n),
            entry: 0,
        };
        let mut visited = Visited::new(n);
        for node in 0..n {
            let u = 1.0 - rng.random::<f64>();
            let level = (libm::floor(-libm::log(u) * level_mult) as usize).min(MAX_LEVEL);
            index.levels.push(level as u8);
            index.links.push(vec![Vec::new(); level + 1]);
            if node > 0 {
                index.insert(node as u32, &mut visited);
            } else {
                index.entry = 0;
            }
        }
        Ok(index)
    }

    fn insert(&mut self, node: u32, visited: &mut Visited) {
        let level = self.levels[node as usize] as usize;
        let top = self.levels[self.entry as usize] as usize;
        let q = self.vector(node as usize).to_vec();

        let mut ep = Scored { sim: dot(&q, self.vector(self.entry as usize)), node: self.entry };
        for layer in (level + 1..=top).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer, visited);
            let chosen = self.select_neighbors(&found, self.params.m);
            self.links[node as usize][layer] = chosen.iter().map(|s| s.node).collect();
            let cap = self.params.max_degree(layer);
            for s in &chosen {
                let other = s.node as usize;
                self.links[other][layer].push(node);
                if self.links[other][layer].len() > cap {
                    self.shrink(other, layer, cap);
                }
            }
            eps = found;
        }
        if level > top {
            self.entry = node;
        }
    }

    fn shrink(&mut self, node: usize, layer: usize, cap: usize) {
        let base = self.vector(node);
        let mut cands: Vec<Scored> = self.links[node][layer]
            .iter()
            .map(|&c| Scored { sim: dot(base, self.vector(c as usize)), node: c })
            .collect();
        cands.sort_unstable_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&cands, cap);
        self.links[node][layer] = kept.iter().map(|s| s.node).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the
    /// base point than to every neighbor already kept. `cands` must be sorted
    /// by descending similarity.
    fn select_neighbors(&self, cands: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        for c in cands {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.node as usize);
            if kept.iter().all(|k| dot(cv, self.vector(k.node as usize)) < c.sim) {
                kept.push(*c);
            }
        }
        kept
    }

    fn greedy(&self, q: &[f32], mut cur: Scored, layer: usize) -> Scored {
        loop {
            let mut changed = false;
            for &n in &self.links[cur.node as usize][layer] {
                let s = Scored { sim: dot(q, self.vector(n as usize)), node: n };
                if s > cur {
                    cur = s;
                    changed = true;
                }
            }
            if !changed {
                return cur;
            }
        }
    }

    /// Beam search on one layer; result sorted by descending similarity.
    fn search_layer(
        &self,
        q: &[f32],
        eps: &[Scored],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Scored> {
        visited.reset(self.ids.len());
        let mut cands: BinaryHeap<Scored> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in eps {
            if visited.insert(e.node) {
                cands.push(e);
                best.push(Reverse(e));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(c) = cands.pop() {
            let worst = best.peek().map(|r| r.0);
            if let Some(w) = worst {
                if c < w && best.len() >= ef {
                    break;
                }
            }
            for &n in &self.links[c.node as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored { sim: dot(q, self.vector(n as usize)), node: n };
                let admit = best.len() < ef || best.peek().is_some_and(|w| s > w.0);
                if admit {
                    cands.push(s);
                    best.push(Reverse(s));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = best.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Top-`k` neighbors of `v`, sorted by descending similarity with ties
    /// broken by ascending id. The beam width is `max(ef_search, k)`.
    pub fn query(&self, v: &[f32], k: usize, ef_search: usize) -> Result<Vec<Neighbor>> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: v.len() });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut visited = Visited::new(self.ids.len());
        let top = self.levels[self.entry as usize] as usize;
        let mut ep = Scored { sim: dot(v, self.vector(self.entry as usize)), node: self.entry };
        for layer in (1..=top).rev() {
            ep = self.greedy(v, ep, layer);
        }
        let found = self.search_layer(v, &[ep], ef_search.max(k), 0, &mut visited);
        let mut hits: Vec<Neighbor> = found
            .into_iter()
            .map(|s| Neighbor { id: self.ids[s.node as usize].clone(), similarity: s.sim })
            .collect();
        sort_neighbors(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn vector(&self, node: usize) -> &[f32] {
        &self.vectors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn level(&self, node: usize) -> usize {
        self.levels[node] as usize
    }

    pub fn neighbors(&self, node: usize, layer: usize) -> &[u32] {
        &self.links[node][layer]
    }

    pub fn entry_point(&self) -> usize {
        self.entry as usize
    }

    /// Reassembles an index from its serialized pieces, checking every
    /// structural invariant.
    pub fn from_parts(
        params: HnswParams,
        matrix: EmbeddingMatrix,
        levels: Vec<u8>,
        links: Vec<Vec<Vec<u32>>>,
        entry: u32,
    ) -> Result<Self> {
        params.validate()?;
        let index = Self {
            params,
            dim: matrix.dim(),
            ids: matrix.ids().to_vec(),
            vectors: matrix.as_slice().to_vec(),
            levels,
            links,
            entry,
        };
        index.validate()?;
        Ok(index)
    }

    /// Graph invariants: no dangling links, degree bounds per layer, entry
    /// point on the top level.
    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if n == 0 {
            return Err(Error::Empty("index"));
        }
        if self.levels.len() != n || self.links.len() != n || self.vectors.len() != n * self.dim {
            return Err(Error::CorruptIndex("node arrays disagree in length".into()));
        }
        if self.entry as usize >= n {
            return Err(Error::CorruptIndex("entry point out of range".into()));
        }
        let top = self.levels.iter().copied().max().unwrap_or(0);
        if self.levels[self.entry as usize] != top {
            return Err(Error::CorruptIndex("entry point is not on the top level".into()));
        }
        for (node, layers) in self.links.iter().enumerate() {
            if layers.len() != self.levels[node] as usize + 1 {
                return Err(Error::CorruptIndex(format!("node {node} has wrong layer count")));
            }
            for (layer, nbrs) in layers.iter().enumerate() {
                if nbrs.len() > self.params.max_degree(layer) {
                    return Err(Error::CorruptIndex(format!(
                        "node {node} exceeds degree bound on layer {layer}"
                    )));
                }
                for &o in nbrs {
                    let o = o as usize;
                    if o >= n || o == node || (self.levels[o] as usize) < layer {
                        return Err(Error::CorruptIndex(format!(
                            "node {node} has invalid link {o} on layer {layer}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn sort_neighbors(hits: &mut [Neighbor]) {
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id)));
}

/// Exact top-`k` by inner product over every row of `matrix`.
pub fn brute_force_knn(matrix: &EmbeddingMatrix, v: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    if v.len() != matrix.dim() {
        return Err(Error::DimMismatch { expected: matrix.dim(), got: v.len() });
    }
    let mut hits: Vec<Neighbor> = matrix
        .iter()
        .map(|(id, row)| Neighbor { id: id.into(), similarity: dot(v, row) })
        .collect();
    sort_neighbors(&mut hits);
    hits.truncate(k);
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use rand::Rng;

    fn random_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingMatrix::from_rows(
            dim,
            (0..n).map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
                (format!("v{i:05}"), v)
            }),
        )
        .unwrap()
    }

    #[test]
    fn singleton_corpus() {
        let m = EmbeddingMatrix::from_rows(3, vec![("only".to_string(), vec![1.0, 2.0, 3.0])]).unwrap();
        let idx = AnnIndex::build(&m, HnswParams::default(), 1).unwrap();
        let hits = idx.query(&[0.0, 1.0, 0.0], 5, 64).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "only");
    }

    #[test]
    fn k_capped_by_corpus_and_self_query() {
        let m = random_matrix(4, 8, 3);
        let idx = AnnIndex::build(&m, HnswParams::default(), 7).unwrap();
        assert_eq!(idx.query(m.row(0), 10, 64).unwrap().len(), 4);
        let top = idx.query(m.row(2), 1, 64).unwrap();
        assert_eq!(top[0].id, m.id(2));
        assert!((top[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_params_and_inputs() {
        let m = random_matrix(10, 4, 1);
        let bad_m = HnswParams { m: 1, ..HnswParams::default() };
        assert!(AnnIndex::build(&m, bad_m, 0).is_err());
        let bad_ef = HnswParams { m: 16, ef_construction: 8, ef_search: 64 };
        assert!(AnnIndex::build(&m, bad_ef, 0).is_err());
        let empty = EmbeddingMatrix::new(4).unwrap();
        assert_eq!(AnnIndex::build(&empty, HnswParams::default(), 0), Err(Error::Empty("embedding matrix")));
        let idx = AnnIndex::build(&m, HnswParams::default(), 0).unwrap();
        assert!(matches!(idx.query(&[1.0; 3], 1, 64), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn orthogonal_and_opposite() {
        let m = EmbeddingMatrix::from_rows(
            2,
            vec![("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![0.0, 1.0])],
        )
        .unwrap();
        let hits = brute_force_knn(&m, &[1.0, 0.0], 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.similarity).collect::<Vec<_>>(), vec![1.0, 0.0]);

        let m = random_matrix(20, 5, 9);
        let neg: Vec<f32> = m.row(4).iter().map(|x| -x).collect();
        let hits = brute_force_knn(&m, &neg, 20).unwrap();
        assert_eq!(hits.last().unwrap().id, m.id(4));
        assert!((hits.last().unwrap().similarity + 1.0).abs() < 1e-6);
    }

    #[test]
    fn brute_force_matches_full_sort() {
        let m = random_matrix(100, 8, 11);
        let q = m.row(17).to_vec();
        let got = brute_force_knn(&m, &q, 10).unwrap();
        // independent route: f64 similarities, full sort of every row
        let mut all: Vec<(f64, &str)> = m
            .iter()
            .map(|(id, r)| (r.iter().zip(&q).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum(), id))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let want: Vec<&str> = all.iter().take(10).map(|x| x.1).collect();
        assert_eq!(got.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), want);
    }

    #[test]
    fn graph_is_valid_and_deterministic() {
        let m = random_matrix(800, 16, 5);
        let params = HnswParams { m: 6, ef_construction: 40, ef_search: 32 };
        let a = AnnIndex::build(&m, params, 42).unwrap();
        let b = AnnIndex::build(&m, params, 42).unwrap();
        a.validate().unwrap();
        assert_eq!(a, b);
        for i in (0..800).step_by(37) {
            assert_eq!(a.query(m.row(i), 10, 32).unwrap(), b.query(m.row(i), 10, 32).unwrap());
        }
    }

    #[test]
    fn results_sorted_and_distinct() {
        let m = random_matrix(500, 12, 8);
        let idx = AnnIndex::build(&m, HnswParams::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let q: Vec<f32> = (0..12).map(|_| rng.random::<f32>() - 0.5).collect();
            let hits = idx.query(&q, 10, 64).unwrap();
            assert_eq!(hits.len(), 10);
            for w in hits.windows(2) {
                assert!(
                    w[0].similarity > w[1].similarity
                        || (w[0].similarity == w[1].similarity && w[0].id < w[1].id)
                );
            }
        }
    }

    #[test]
    fn from_parts_rejects_dangling_links() {
        let m = random_matrix(30, 4, 2);
        let idx = AnnIndex::build(&m, HnswParams::default(), 0).unwrap();
        let mut links = idx.links.clone();
        links[0][0].push(999);
        let err = AnnIndex::from_parts(idx.params, m.clone(), idx.levels.clone(), links, idx.entry);
        assert!(matches!(err, Err(Error::CorruptIndex(_))));
        let ok = AnnIndex::from_parts(idx.params, m, idx.levels.clone(), idx.links.clone(), idx.entry);
        assert_eq!(ok.unwrap(), idx);
    }
}
