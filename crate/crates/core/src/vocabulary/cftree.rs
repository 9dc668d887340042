use super::kmeans::sq_dist;
use super::ClusteringFeature;

#[derive(Debug, Clone, PartialEq)]
struct CfNode {
    cf: ClusteringFeature,
    /// Child node indices; empty for subclusters.
    children: Vec<usize>,
    /// True for nodes whose children are subclusters.
    leaf_level: bool,
}

/// Incremental BIRCH tree. Subclusters (the leaves) keep only their CF, so
/// memory grows with the number of nodes and never with the raw stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CfTree {
    pub dim: usize,
    pub radius_threshold: f64,
    pub max_children: usize,
    nodes: Vec<CfNode>,
    root: Option<usize>,
}

impl CfTree {
    pub fn new(dim: usize, radius_threshold: f64, max_children: usize) -> Self {
        Self {
            dim,
            radius_threshold,
            max_children: max_children.max(2),
            nodes: Vec::new(),
            root: None,
        }
    }

    fn push(&mut self, node: CfNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn recompute(&mut self, id: usize) {
        let mut cf = ClusteringFeature::zero(self.dim);
        for &c in &self.nodes[id].children {
            cf.add(&self.nodes[c].cf);
        }
        self.nodes[id].cf = cf;
    }

    fn nearest_child(&self, id: usize, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (slot, &c) in self.nodes[id].children.iter().enumerate() {
            let d = sq_dist(x, &self.nodes[c].cf.centroid());
            if d < best.1 {
                best = (slot, d);
            }
        }
        best.0
    }

    /// Inserts one point: descend to the nearest subcluster, absorb it if the
    /// merged radius stays within the threshold, else start a new subcluster;
    /// overfull nodes are split around their two farthest children.
    pub fn insert(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "descriptor dimension");
        let point = ClusteringFeature::from_point(x, 1.0);
        let Some(root) = self.root else {
            let leaf = self.push(CfNode {
                cf: point,
                children: Vec::new(),
                leaf_level: false,
            });
            let root = self.push(CfNode {
                cf: ClusteringFeature::zero(self.dim),
                children: vec![leaf],
                leaf_level: true,
            });
            self.recompute(root);
            self.root = Some(root);
            return;
        };

        let mut path = vec![root];
        let mut node = root;
        while !self.nodes[node].leaf_level {
            node = self.nodes[node].children[self.nearest_child(node, x)];
            path.push(node);
        }
        let slot = self.nearest_child(node, x);
        let sub = self.nodes[node].children[slot];
        let merged = self.nodes[sub].cf.merged(&point);
        if merged.radius() <= self.radius_threshold {
            self.nodes[sub].cf = merged;
        } else {
            let leaf = self.push(CfNode {
                cf: point,
                children: Vec::new(),
                leaf_level: false,
            });
            self.nodes[node].children.push(leaf);
        }

        // bottom-up: recompute CFs and split overfull nodes
        let mut sibling: Option<usize> = None;
        for depth in (0..path.len()).rev() {
            let id = path[depth];
            if let Some(s) = sibling.take() {
                self.nodes[id].children.push(s);
            }
            if self.nodes[id].children.len() > self.max_children {
                sibling = Some(self.split(id));
            }
            self.recompute(id);
        }
        if let Some(s) = sibling {
            let new_root = self.push(CfNode {
                cf: ClusteringFeature::zero(self.dim),
                children: vec![root, s],
                leaf_level: false,
            });
            self.recompute(new_root);
            self.root = Some(new_root);
        }
    }

    /// Moves roughly half of the children of `id` into a new node seeded by
    /// the farthest pair of children. Returns the new node.
    fn split(&mut self, id: usize) -> usize {
        let children = std::mem::take(&mut self.nodes[id].children);
        let cents: Vec<Vec<f64>> = children.iter().map(|&c| self.nodes[c].cf.centroid()).collect();
        let mut far = (0, 1, -1.0);
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                let d = sq_dist(&cents[i], &cents[j]);
                if d > far.2 {
                    far = (i, j, d);
                }
            }
        }
        let (mut keep, mut moved) = (Vec::new(), Vec::new());
        for (k, &c) in children.iter().enumerate() {
            if k == far.0 {
                keep.push(c);
            } else if k == far.1 {
                moved.push(c);
            } else if sq_dist(&cents[k], &cents[far.0]) <= sq_dist(&cents[k], &cents[far.1]) {
                keep.push(c);
            } else {
                moved.push(c);
            }
        }
        let leaf_level = self.nodes[id].leaf_level;
        self.nodes[id].children = keep;
        let new = self.push(CfNode {
            cf: ClusteringFeature::zero(self.dim),
            children: moved,
            leaf_level,
        });
        self.recompute(new);
        new
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    /// Subcluster CFs in depth-first order.
    pub fn leaves(&self) -> Vec<&ClusteringFeature> {
        let mut out = Vec::new();
        if let Some(r) = self.root {
            self.collect(r, &mut out);
        }
        out
    }

    fn collect<'a>(&'a self, id: usize, out: &mut Vec<&'a ClusteringFeature>) {
        let n = &self.nodes[id];
        if n.children.is_empty() {
            out.push(&n.cf);
        }
        for &c in &n.children {
            self.collect(c, out);
        }
    }

    pub fn root_cf(&self) -> Option<&ClusteringFeature> {
        self.root.map(|r| &self.nodes[r].cf)
    }

    /// Checks that every internal CF is the in-order sum of its children and
    /// that no node has more than `max_children` children.
    pub fn check_additivity(&self) -> bool {
        self.nodes.iter().all(|n| {
            if n.children.is_empty() {
                return true;
            }
            let mut cf = ClusteringFeature::zero(self.dim);
            for &c in &n.children {
                cf.add(&self.nodes[c].cf);
            }
            cf == n.cf && n.children.len() <= self.max_children
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}
