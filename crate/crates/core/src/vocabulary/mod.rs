//! Hierarchical visual vocabulary, BIRCH clustering-feature tree and
//! bag-of-words scoring.

mod cftree;
mod kmeans;

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::features::FeatureSet;

pub use cftree::CfTree;
pub use kmeans::quantization_error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabularyError {
    #[error("no descriptors")]
    Empty,
    #[error("descriptor dimension {got} does not match vocabulary dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Count, linear sum and squared sum of a set of (weighted) points.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringFeature {
    pub n: f64,
    pub ls: Vec<f64>,
    pub ss: f64,
}

impl ClusteringFeature {
    pub fn zero(dim: usize) -> Self {
        Self {
            n: 0.0,
            ls: vec![0.0; dim],
            ss: 0.0,
        }
    }

    pub fn from_point(x: &[f64], weight: f64) -> Self {
        Self {
            n: weight,
            ls: x.iter().map(|v| v * weight).collect(),
            ss: weight * x.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    pub fn add(&mut self, other: &ClusteringFeature) {
        self.n += other.n;
        for (a, b) in self.ls.iter_mut().zip(&other.ls) {
            *a += b;
        }
        self.ss += other.ss;
    }

    pub fn merged(&self, other: &ClusteringFeature) -> ClusteringFeature {
        let mut m = self.clone();
        m.add(other);
        m
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.ls.iter().map(|v| v / self.n).collect()
    }

    /// Root-mean-square distance of the points to their centroid.
    pub fn radius(&self) -> f64 {
        let c2: f64 = self.ls.iter().map(|v| (v / self.n) * (v / self.n)).sum();
        (self.ss / self.n - c2).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabNode {
    pub centroid: Vec<f64>,
    pub children: Vec<usize>,
    pub word: Option<u32>,
    /// Weighted statistics of the training points below this node.
    pub cf: ClusteringFeature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyTree {
    pub dim: usize,
    pub branching: usize,
    pub depth: usize,
    /// Node 0 is the root.
    pub nodes: Vec<VocabNode>,
    /// Node index of each word.
    pub words: Vec<usize>,
    pub idf: Vec<f64>,
}

/// Sparse tf-idf vector, L2-normalized when nonempty.
pub type BowVector = BTreeMap<u32, f64>;

/// Merges exactly repeated points into one weighted point, keeping first-occurrence order.
fn merge_duplicates(points: &[&[f64]], weights: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for (p, &w) in points.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let key: Vec<u64> = p.iter().map(|v| (v + 0.0).to_bits()).collect();
        match index.get(&key) {
            Some(&i) => ws[i] += w,
            None => {
                index.insert(key, pts.len());
                pts.push(p.to_vec());
                ws.push(w);
            }
        }
    }
    (pts, ws)
}

fn node_seed(seed: u64, node: usize) -> u64 {
    seed ^ (node as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl VocabularyTree {
    /// Recursive k-means over unit-weight descriptors.
    pub fn build(descriptors: &[&[f64]], branching: usize, depth: usize, seed: u64) -> Result<Self, VocabularyError> {
        let w = vec![1.0; descriptors.len()];
        Self::build_weighted(descriptors, &w, branching, depth, seed)
    }

    /// Recursive weighted k-means. A node splits while it is above `depth`
    /// and holds more than `branching` distinct points; a node with at most
    /// `branching` distinct points gets one leaf per point.
    pub fn build_weighted(
        points: &[&[f64]],
        weights: &[f64],
        branching: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self, VocabularyError> {
        let (pts, ws) = merge_duplicates(points, weights);
        if pts.is_empty() {
            return Err(VocabularyError::Empty);
        }
        let dim = pts[0].len();
        if let Some(p) = pts.iter().find(|p| p.len() != dim) {
            return Err(VocabularyError::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        let branching = branching.max(1);
        let mut tree = Self {
            dim,
            branching,
            depth,
            nodes: Vec::new(),
            words: Vec::new(),
            idf: Vec::new(),
        };
        let items: Vec<usize> = (0..pts.len()).collect();
        tree.grow(&pts, &ws, &items, None, 0, seed);
        tree.idf = vec![1.0; tree.words.len()];
        Ok(tree)
    }

    /// `centroid` is the k-means center that claimed `items` at the parent
    /// level. Keeping it (rather than the items' mean) makes the greedy descent
    /// consistent with the partition that built the tree.
    fn grow(
        &mut self,
        pts: &[Vec<f64>],
        ws: &[f64],
        items: &[usize],
        centroid: Option<Vec<f64>>,
        level: usize,
        seed: u64,
    ) -> usize {
        let mut cf = ClusteringFeature::zero(self.dim);
        for &i in items {
            cf.add(&ClusteringFeature::from_point(&pts[i], ws[i]));
        }
        let id = self.nodes.len();
        self.nodes.push(VocabNode {
            centroid: centroid.unwrap_or_else(|| cf.centroid()),
            children: Vec::new(),
            word: None,
            cf,
        });
        if level >= self.depth {
            self.nodes[id].word = Some(self.words.len() as u32);
            self.words.push(id);
            return id;
        }
        let groups: Vec<(Vec<f64>, Vec<usize>)> = if items.len() <= self.branching {
            items.iter().map(|&i| (pts[i].clone(), vec![i])).collect()
        } else {
            let p: Vec<&[f64]> = items.iter().map(|&i| pts[i].as_slice()).collect();
            let w: Vec<f64> = items.iter().map(|&i| ws[i]).collect();
            let (centers, assign) = kmeans::weighted_kmeans(&p, &w, self.branching, node_seed(seed, id));
            let mut g: Vec<(Vec<f64>, Vec<usize>)> = centers.into_iter().map(|c| (c, Vec::new())).collect();
            for (slot, &a) in assign.iter().enumerate() {
                g[a].1.push(items[slot]);
            }
            g
        };
        for (center, g) in groups {
            // a single point needs no further splitting
            let child = if g.len() == 1 && level + 1 < self.depth {
                self.leaf(&pts[g[0]], ws[g[0]])
            } else {
                self.grow(pts, ws, &g, Some(center), level + 1, seed)
            };
            self.nodes[id].children.push(child);
        }
        id
    }

    fn leaf(&mut self, p: &[f64], w: f64) -> usize {
        let id = self.nodes.len();
        self.nodes.push(VocabNode {
            centroid: p.to_vec(),
            children: Vec::new(),
            word: Some(self.words.len() as u32),
            cf: ClusteringFeature::from_point(p, w),
        });
        self.words.push(id);
        id
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn word_centroid(&self, word: u32) -> &[f64] {
        &self.nodes[self.words[word as usize]].centroid
    }

    /// Greedy descent to the nearest child at each level, ties to the lower child.
    pub fn quantize(&self, x: &[f64]) -> u32 {
        let mut node = 0;
        loop {
            let n = &self.nodes[node];
            if let Some(w) = n.word {
                return w;
            }
            let mut best = (n.children[0], f64::INFINITY);
            for &c in &n.children {
                let d = kmeans::sq_dist(x, &self.nodes[c].centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            node = best.0;
        }
    }

    /// Sum of squared distances from each point to the centroid of its word.
    pub fn quantization_error(&self, points: &[&[f64]]) -> f64 {
        points
            .iter()
            .map(|p| kmeans::sq_dist(p, self.word_centroid(self.quantize(p))))
            .sum()
    }

    /// Sets `idf(w) = ln(N / n_w)` from the frames containing each word. Words
    /// that occur in no frame are treated as occurring in one.
    pub fn compute_idf<'a>(&mut self, frames: impl IntoIterator<Item = &'a FeatureSet>) {
        let mut doc_freq = vec![0usize; self.words.len()];
        let mut total = 0usize;
        for f in frames {
            total += 1;
            let mut seen: Vec<u32> = f.descriptor_rows().take(f.len()).map(|d| self.quantize(d)).collect();
            seen.sort_unstable();
            seen.dedup();
            for w in seen {
                doc_freq[w as usize] += 1;
            }
        }
        if total == 0 {
            return;
        }
        self.idf = doc_freq
            .iter()
            .map(|&n| (total as f64 / n.max(1) as f64).ln())
            .collect();
    }

    /// tf-idf bag of words with `tf = count / features`; zero weights are dropped.
    pub fn compute_bow(&self, features: &FeatureSet) -> BowVector {
        let mut bow = BowVector::new();
        if features.is_empty() {
            return bow;
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for d in features.descriptor_rows().take(features.len()) {
            *counts.entry(self.quantize(d)).or_default() += 1;
        }
        let total = features.len() as f64;
        for (w, c) in counts {
            let v = c as f64 / total * self.idf[w as usize];
            if v > 0.0 {
                bow.insert(w, v);
            }
        }
        let norm = bow.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            bow.values_mut().for_each(|v| *v /= norm);
        }
        bow
    }
}

/// Sparse inner product, clamped to `[0, 1]`.
pub fn similarity(a: &BowVector, b: &BowVector) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let s: f64 = small.iter().filter_map(|(w, v)| large.get(w).map(|u| u * v)).sum();
    s.clamp(0.0, 1.0)
}

/// Vocabulary from the leaves of a CF tree by weighted k-means on their
/// centroids, weighted by their counts.
pub fn cf_global_refine(tree: &CfTree, branching: usize, depth: usize, seed: u64) -> Result<VocabularyTree, VocabularyError> {
    let leaves = tree.leaves();
    let centroids: Vec<Vec<f64>> = leaves.iter().map(|c| c.centroid()).collect();
    let refs: Vec<&[f64]> = centroids.iter().map(|c| c.as_slice()).collect();
    let weights: Vec<f64> = leaves.iter().map(|c| c.n).collect();
    VocabularyTree::build_weighted(&refs, &weights, branching, depth, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Keypoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    fn features(desc: &[Vec<f64>]) -> FeatureSet {
        let dim = desc[0].len();
        let kps = (0..desc.len()).map(|i| Keypoint::new(i as f64, 0.0)).collect();
        FeatureSet::new(0, kps, dim, desc.concat()).unwrap()
    }

    #[test]
    fn two_clusters_split_like_a_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        for i in 0..100 {
            let base = if i < 50 { -3.0 } else { 3.0 };
            pts.push(vec![base + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        }
        let tree = VocabularyTree::build(&refs(&pts), 2, 1, 7).unwrap();
        assert_eq!(tree.num_words(), 2);
        // exhaustive 2-means on the first coordinate: best split of the sorted values
        let mut xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        let cost = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        let split = (1..xs.len())
            .min_by(|&a, &b| (cost(&xs[..a]) + cost(&xs[a..])).total_cmp(&(cost(&xs[..b]) + cost(&xs[b..]))))
            .unwrap();
        let threshold = 0.5 * (xs[split - 1] + xs[split]);
        let low_word = tree.quantize(&pts[0]);
        for p in &pts {
            assert_eq!(tree.quantize(p) == low_word, p[0] < threshold);
        }
    }

    #[test]
    fn single_descriptor_gives_one_word() {
        let tree = VocabularyTree::build(&[&[1.0, 0.0][..]], 3, 2, 0).unwrap();
        assert_eq!(tree.num_words(), 1);
        assert_eq!(tree.quantize(&[0.0, 5.0]), 0);
    }

    #[test]
    fn hierarchical_error_is_close_to_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..1000).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let r = refs(&pts);
        let tree = VocabularyTree::build(&r, 4, 2, 3).unwrap();
        assert!(tree.num_words() <= 16);
        let (flat, _) = kmeans::weighted_kmeans(&r, &vec![1.0; r.len()], 16, 3);
        let flat_err = quantization_error(&r, &vec![1.0; r.len()], &flat);
        assert!(tree.quantization_error(&r) <= 1.5 * flat_err);
        assert_eq!(tree, VocabularyTree::build(&r, 4, 2, 3).unwrap());
    }

    #[test]
    fn quantize_is_greedy_and_mostly_near_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..600).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let tree = VocabularyTree::build(&refs(&pts), 4, 2, 5).unwrap();
        for p in &pts[..50] {
            // per-level scan
            let mut node = 0;
            while tree.nodes[node].word.is_none() {
                let ch = &tree.nodes[node].children;
                node = *ch
                    .iter()
                    .min_by(|&&a, &&b| {
                        kmeans::sq_dist(p, &tree.nodes[a].centroid).total_cmp(&kmeans::sq_dist(p, &tree.nodes[b].centroid))
                    })
                    .unwrap();
            }
            assert_eq!(tree.nodes[node].word, Some(tree.quantize(p)));
        }
        let mut good = 0;
        for _ in 0..200 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut order: Vec<u32> = (0..tree.num_words() as u32).collect();
            order.sort_by(|&a, &b| kmeans::sq_dist(&q, tree.word_centroid(a)).total_cmp(&kmeans::sq_dist(&q, tree.word_centroid(b))));
            if order[..3].contains(&tree.quantize(&q)) {
                good += 1;
            }
        }
        assert!(good >= 190, "{good}");
    }

    #[test]
    fn leaf_centroid_quantizes_to_its_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec<f64>> = (0..300).map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let tree = VocabularyTree::build(&refs(&pts), 3, 3, 1).unwrap();
        for w in 0..tree.num_words() as u32 {
            assert_eq!(tree.quantize(tree.word_centroid(w)), w);
        }
    }

    #[test]
    fn bow_weights_follow_tf_idf() {
        let (e0, e1, e2) = (vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]);
        let pts = vec![e0.clone(), e1.clone(), e2.clone()];
        let mut tree = VocabularyTree::build(&refs(&pts), 3, 1, 0).unwrap();
        let all_one = features(&[vec![0.9, 0.1], vec![1.0, 0.0]]);
        let bow = tree.compute_bow(&all_one);
        assert_eq!(bow.len(), 1);
        assert!((bow.values().next().unwrap() - 1.0).abs() < 1e-12);
        assert!(tree.compute_bow(&FeatureSet::empty(0, 2)).is_empty());

        let f1 = features(&[e0.clone(), e1.clone(), e1.clone()]);
        let f2 = features(&[e0.clone(), e2.clone()]);
        let f3 = features(&[e0.clone()]);
        tree.compute_idf([&f1, &f2, &f3]);
        let (w0, w1, w2) = (tree.quantize(&e0), tree.quantize(&e1), tree.quantize(&e2));
        assert!((tree.idf[w0 as usize]).abs() < 1e-15);
        assert!((tree.idf[w1 as usize] - 3f64.ln()).abs() < 1e-15);
        let mixed = features(&[e0.clone(), e1.clone(), e1.clone(), e2.clone()]);
        let bow = tree.compute_bow(&mixed);
        // hand-computed: tf = (1/4, 2/4, 1/4), idf = (0, ln 3, ln 3)
        let raw = [(w1, 0.5 * 3f64.ln()), (w2, 0.25 * 3f64.ln())];
        let norm = raw.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        assert_eq!(bow.len(), 2);
        for (w, v) in raw {
            assert!((bow[&w] - v / norm).abs() < 1e-9);
        }
        assert!(!bow.contains_key(&w0));
    }

    #[test]
    fn similarity_matches_dense_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = BowVector::new();
        let mut b = BowVector::new();
        for _ in 0..30 {
            a.insert(rng.random_range(0..100), rng.random_range(0.1..1.0));
            b.insert(rng.random_range(0..100), rng.random_range(0.1..1.0));
        }
        for v in [&mut a, &mut b] {
            let n = v.values().map(|x| x * x).sum::<f64>().sqrt();
            v.values_mut().for_each(|x| *x /= n);
        }
        let dense = |v: &BowVector| (0..100u32).map(|i| *v.get(&i).unwrap_or(&0.0)).collect::<Vec<_>>();
        let (da, db) = (dense(&a), dense(&b));
        let oracle: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
        assert!((similarity(&a, &b) - oracle).abs() < 1e-12);
        assert!((similarity(&a, &a) - 1.0).abs() < 1e-12);
        let c: BowVector = [(1000u32, 1.0)].into_iter().collect();
        assert_eq!(similarity(&a, &c), 0.0);
    }

    #[test]
    fn cf_radius_is_rms_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut cf = ClusteringFeature::zero(3);
        for p in &pts {
            cf.add(&ClusteringFeature::from_point(p, 1.0));
        }
        let c = cf.centroid();
        let rms = (pts.iter().map(|p| kmeans::sq_dist(p, &c)).sum::<f64>() / 20.0).sqrt();
        assert!((cf.radius() - rms).abs() < 1e-9);
        let a = ClusteringFeature::from_point(&pts[0], 1.0);
        let b = ClusteringFeature::from_point(&pts[1], 2.0);
        assert_eq!(a.merged(&b), b.merged(&a));
    }

    #[test]
    fn refine_from_two_leaves_and_weighted_mean() {
        let mut t = CfTree::new(2, 0.1, 4);
        t.insert(&[0.0, 0.0]);
        t.insert(&[1.0, 0.0]);
        let v = cf_global_refine(&t, 4, 2, 0).unwrap();
        assert_eq!(v.num_words(), 2);
        assert_eq!(v.word_centroid(0), &[0.0, 0.0]);
        assert_eq!(v.word_centroid(1), &[1.0, 0.0]);

        let eps = 0.01;
        let c = [0.3, 0.7];
        let mut t = CfTree::new(2, 1e-6, 4);
        for _ in 0..99 {
            t.insert(&c);
        }
        t.insert(&[c[0] + eps, c[1]]);
        assert_eq!(t.leaves().len(), 2);
        let v = cf_global_refine(&t, 1, 1, 0).unwrap();
        assert_eq!(v.num_words(), 1);
        let got = v.word_centroid(0);
        assert!(((got[0] - c[0]).powi(2) + (got[1] - c[1]).powi(2)).sqrt() <= eps * 0.02);
    }

    #[test]
    fn weighted_refine_equals_duplicated_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut t = CfTree::new(3, 0.15, 4);
        let mut raw = Vec::new();
        for _ in 0..400 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            t.insert(&p);
            raw.push(p);
        }
        let weighted = cf_global_refine(&t, 3, 2, 4).unwrap();
        let leaves = t.leaves();
        let mut expanded = Vec::new();
        for l in &leaves {
            for _ in 0..l.n as usize {
                expanded.push(l.centroid());
            }
        }
        let unweighted = VocabularyTree::build(&refs(&expanded), 3, 2, 4).unwrap();
        let r = refs(&raw);
        assert!(weighted.quantization_error(&r) <= unweighted.quantization_error(&r) + 1e-9);
    }
}
