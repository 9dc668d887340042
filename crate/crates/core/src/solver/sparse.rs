//! Block-structured sparse normal equations and an up-looking sparse Cholesky.

use std::collections::BTreeMap;

/// Greedy minimum-degree elimination order on a graph given by adjacency sets.
///
/// Ties go to the lower vertex index, so the order is deterministic.
pub fn minimum_degree_order(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let words = n.div_ceil(64).max(1);
    let mut adj = vec![0u64; n * words];
    let set = |adj: &mut [u64], a: usize, b: usize| {
        adj[a * words + b / 64] |= 1u64 << (b % 64);
    };
    for &(a, b) in edges {
        if a != b {
            set(&mut adj, a, b);
            set(&mut adj, b, a);
        }
    }
    let mut eliminated = vec![false; n];
    let mut degree: Vec<u32> = (0..n)
        .map(|v| adj[v * words..(v + 1) * words].iter().map(|w| w.count_ones()).sum())
        .collect();
    let mut order = Vec::with_capacity(n);
    let mut neighbours = Vec::new();
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_deg = u32::MAX;
        for v in 0..n {
            if !eliminated[v] && degree[v] < best_deg {
                best = v;
                best_deg = degree[v];
            }
        }
        let v = best;
        eliminated[v] = true;
        order.push(v);
        neighbours.clear();
        for w in 0..words {
            let mut bits = adj[v * words + w];
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                neighbours.push(w * 64 + b);
                bits &= bits - 1;
            }
        }
        let row: Vec<u64> = adj[v * words..(v + 1) * words].to_vec();
        for &u in &neighbours {
            let base = u * words;
            for w in 0..words {
                adj[base + w] |= row[w];
            }
            // no self loops, and drop the eliminated vertex
            adj[base + u / 64] &= !(1u64 << (u % 64));
            adj[base + v / 64] &= !(1u64 << (v % 64));
            degree[u] = adj[base..base + words].iter().map(|w| w.count_ones()).sum();
        }
    }
    order
}

/// Upper-triangular CSC matrix (row index <= column index) with a fixed pattern.
#[derive(Debug, Clone)]
pub struct UpperCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl UpperCsc {
    /// Index of the diagonal entry of column `j` (last entry of the column).
    pub fn diag_index(&self, j: usize) -> usize {
        self.col_ptr[j + 1] - 1
    }
}

/// Layout of the reduced normal equations over free parameter blocks.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    /// Tangent dimension per free block (indexed by free-block id).
    pub dims: Vec<usize>,
    /// Scalar offset of each free block in the permuted ordering.
    pub offsets: Vec<usize>,
    /// Position of each free block in the elimination order.
    pub position: Vec<usize>,
    pub n: usize,
    /// For each stored upper block pair `(row_block, col_block)`, the value
    /// index where each column of `col_block` starts its run of `row_block` rows.
    pair_starts: BTreeMap<(usize, usize), Vec<usize>>,
    pub pattern: UpperCsc,
}

impl BlockLayout {
    /// `pairs` lists every co-occurring pair of free blocks (including `(a, a)`).
    pub fn new(dims: Vec<usize>, pairs: &[(usize, usize)]) -> Self {
        let nb = dims.len();
        let order = minimum_degree_order(nb, pairs);
        let mut position = vec![0; nb];
        for (p, &b) in order.iter().enumerate() {
            position[b] = p;
        }
        let mut offsets = vec![0; nb];
        let mut acc = 0;
        for &b in &order {
            offsets[b] = acc;
            acc += dims[b];
        }
        let n = acc;

        // row blocks per column block, upper orientation in permuted order
        let mut col_rows: Vec<Vec<usize>> = vec![Vec::new(); nb];
        for b in 0..nb {
            col_rows[b].push(b);
        }
        for &(a, b) in pairs {
            if a == b {
                continue;
            }
            let (r, c) = if position[a] <= position[b] { (a, b) } else { (b, a) };
            col_rows[c].push(r);
        }
        for rows in col_rows.iter_mut() {
            rows.sort_by_key(|&r| position[r]);
            rows.dedup();
        }

        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        let mut pair_starts: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for &c in &order {
            for q in 0..dims[c] {
                let col = offsets[c] + q;
                for &r in &col_rows[c] {
                    let start = row_idx.len();
                    pair_starts.entry((r, c)).or_default().push(start);
                    let len = if r == c { q + 1 } else { dims[r] };
                    for p in 0..len {
                        row_idx.push(offsets[r] + p);
                    }
                }
                col_ptr[col + 1] = row_idx.len();
            }
        }
        let nnz = row_idx.len();
        Self {
            dims,
            offsets,
            position,
            n,
            pair_starts,
            pattern: UpperCsc {
                n,
                col_ptr,
                row_idx,
                values: vec![0.0; nnz],
            },
        }
    }

    pub fn clear(&mut self) {
        self.pattern.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `block` (dims[a] x dims[b]) at block position `(a, b)` of the symmetric matrix.
    pub fn add_block(&mut self, a: usize, b: usize, block: &nalgebra::DMatrix<f64>) {
        if a == b {
            let starts = &self.pair_starts[&(a, a)];
            for q in 0..self.dims[a] {
                let s = starts[q];
                for p in 0..=q {
                    self.pattern.values[s + p] += block[(p, q)];
                }
            }
            return;
        }
        let transpose = self.position[a] > self.position[b];
        let (r, c) = if transpose { (b, a) } else { (a, b) };
        let starts = &self.pair_starts[&(r, c)];
        for q in 0..self.dims[c] {
            let s = starts[q];
            for p in 0..self.dims[r] {
                let v = if transpose { block[(q, p)] } else { block[(p, q)] };
                self.pattern.values[s + p] += v;
            }
        }
    }
}

/// Symbolic analysis (elimination tree and column pointers of L) for a fixed pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
}

const NONE: usize = usize::MAX;

fn ereach(a: &UpperCsc, k: usize, parent: &[usize], stack: &mut [usize], mark: &mut [bool]) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = true;
    for p in a.col_ptr[k]..a.col_ptr[k + 1] {
        let mut i = a.row_idx[p];
        if i > k {
            continue;
        }
        let mut len = 0;
        while !mark[i] {
            stack[len] = i;
            len += 1;
            mark[i] = true;
            i = parent[i];
            if i == NONE {
                break;
            }
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    for &i in &stack[top..n] {
        mark[i] = false;
    }
    mark[k] = false;
    top
}

impl SymbolicCholesky {
    pub fn analyze(a: &UpperCsc) -> Self {
        let n = a.n;
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let mut i = a.row_idx[p];
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];
        for k in 0..n {
            let top = ereach(a, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..n] {
                counts[i] += 1;
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + counts[j];
        }
        Self { n, parent, l_col_ptr }
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }
}

/// Numeric factor `A = L L^T`, stored column-wise with the diagonal first.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    /// Returns `None` when the matrix is not numerically positive definite.
    pub fn factor(a: &UpperCsc, sym: &SymbolicCholesky) -> Option<Self> {
        let n = a.n;
        let nnz = sym.factor_nnz();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0f64; nnz];
        let mut next: Vec<usize> = sym.l_col_ptr[..n].to_vec();
        let mut x = vec![0.0f64; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];
        for k in 0..n {
            let top = ereach(a, k, &sym.parent, &mut stack, &mut mark);
            x[k] = 0.0;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let i = a.row_idx[p];
                if i <= k {
                    x[i] = a.values[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / lx[sym.l_col_ptr[i]];
                x[i] = 0.0;
                for p in sym.l_col_ptr[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Some(Self {
            n,
            col_ptr: sym.l_col_ptr.clone(),
            row_idx: li,
            values: lx,
        })
    }

    /// Solves `L L^T x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let p0 = self.col_ptr[j];
            b[j] /= self.values[p0];
            let bj = b[j];
            for p in p0 + 1..self.col_ptr[j + 1] {
                b[self.row_idx[p]] -= self.values[p] * bj;
            }
        }
        for j in (0..n).rev() {
            let p0 = self.col_ptr[j];
            let mut s = b[j];
            for p in p0 + 1..self.col_ptr[j + 1] {
                s -= self.values[p] * b[self.row_idx[p]];
            }
            b[j] = s / self.values[p0];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sparse_cholesky_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = vec![3, 2, 6, 1, 3, 3];
        let pairs = vec![(0, 1), (1, 2), (2, 5), (3, 4), (0, 5), (4, 4)];
        let mut layout = BlockLayout::new(dims.clone(), &pairs);
        let n = layout.n;
        // build a random SPD matrix with this block pattern
        let mut dense = DMatrix::<f64>::zeros(n, n);
        let mut blocks = Vec::new();
        for &(a, b) in pairs.iter().chain([(0, 0), (1, 1), (2, 2), (3, 3), (5, 5)].iter()) {
            let m = DMatrix::from_fn(dims[a], dims[b], |_, _| rng.random_range(-1.0..1.0));
            let m = if a == b { &m * m.transpose() } else { m };
            blocks.push((a, b, m));
        }
        for (a, b, m) in &blocks {
            layout.add_block(*a, *b, m);
            let (oa, ob) = (layout.offsets[*a], layout.offsets[*b]);
            for p in 0..dims[*a] {
                for q in 0..dims[*b] {
                    dense[(oa + p, ob + q)] += m[(p, q)];
                    if a != b {
                        dense[(ob + q, oa + p)] += m[(p, q)];
                    }
                }
            }
        }
        for j in 0..n {
            let di = layout.pattern.diag_index(j);
            layout.pattern.values[di] += 10.0;
            dense[(j, j)] += 10.0;
        }
        let sym = SymbolicCholesky::analyze(&layout.pattern);
        let f = CholeskyFactor::factor(&layout.pattern, &sym).unwrap();
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mut x = b.as_slice().to_vec();
        f.solve_in_place(&mut x);
        let xd = dense.clone().cholesky().unwrap().solve(&b);
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn not_positive_definite_is_reported() {
        let mut layout = BlockLayout::new(vec![2], &[]);
        layout.add_block(0, 0, &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        let sym = SymbolicCholesky::analyze(&layout.pattern);
        assert!(CholeskyFactor::factor(&layout.pattern, &sym).is_none());
    }

    #[test]
    fn minimum_degree_eliminates_leaves_first() {
        // star: centre 0 with leaves 1..5
        let edges: Vec<_> = (1..6).map(|i| (0, i)).collect();
        let order = minimum_degree_order(6, &edges);
        assert!(!order[..4].contains(&0), "{order:?}");
    }
}
