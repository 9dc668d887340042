/// Static 3-d tree over point indices for fixed-radius queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Permutation of point indices; each subtree is a contiguous range
    /// whose median element splits on `depth % 3`.
    order: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::split(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    fn split(points: &[[f64; 3]], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let (left, right) = idx.split_at_mut(mid);
        Self::split(points, left, depth + 1);
        Self::split(points, &mut right[1..], depth + 1);
    }

    /// Indices of points within Euclidean distance `radius` (inclusive), ascending.
    pub fn within(&self, q: &[f64; 3], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.search(0, self.order.len(), 0, q, radius, &mut out);
        out.sort_unstable();
        out
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: &[f64; 3], r: f64, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let p = &self.points[i];
        let d2: f64 = (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum();
        if d2.sqrt() <= r {
            out.push(i);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        if diff - r <= 0.0 {
            self.search(lo, mid, depth + 1, q, r, out);
        }
        if diff + r >= 0.0 {
            self.search(mid + 1, hi, depth + 1, q, r, out);
        }
    }
}
