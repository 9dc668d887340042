//! Selection of the image pairs to match.

mod kdtree;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::geometry::{pose_distance, Pose};
use crate::posegraph::PoseGraph;
use crate::FrameId;

pub use kdtree::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Sequential,
    Loop,
    Extrinsic,
    Radius,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Sequential => "sequential",
            Provenance::Loop => "loop",
            Provenance::Extrinsic => "extrinsic",
            Provenance::Radius => "radius",
        })
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Provenance::Sequential),
            "loop" => Ok(Provenance::Loop),
            "extrinsic" => Ok(Provenance::Extrinsic),
            "radius" => Ok(Provenance::Radius),
            other => Err(format!("unknown provenance '{other}'")),
        }
    }
}

/// Unordered frame pairs, each stored once as `(low, high)` with the
/// provenance of its first insertion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewGraph {
    pairs: BTreeMap<(FrameId, FrameId), Provenance>,
}

impl ViewGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false for self-pairs and pairs already present.
    pub fn insert(&mut self, a: FrameId, b: FrameId, provenance: Provenance) -> bool {
        if a == b {
            return false;
        }
        let key = (a.min(b), a.max(b));
        if self.pairs.contains_key(&key) {
            return false;
        }
        self.pairs.insert(key, provenance);
        true
    }

    pub fn contains(&self, a: FrameId, b: FrameId) -> bool {
        self.pairs.contains_key(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FrameId, FrameId, Provenance)> + '_ {
        self.pairs.iter().map(|(&(a, b), &p)| (a, b, p))
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.pairs.values().filter(|&&p| p == provenance).count()
    }

    /// One `a b provenance` line per pair, sorted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (a, b, p) in self.iter() {
            s.push_str(&format!("{a} {b} {p}\n"));
        }
        s
    }

    /// Parses the text form; errors carry the 1-based line number.
    pub fn from_text(text: &str) -> Result<Self, (usize, String)> {
        let mut g = ViewGraph::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err((i + 1, format!("expected 3 fields, got {}", parts.len())));
            }
            let a: FrameId = parts[0].parse().map_err(|e| (i + 1, format!("{e}")))?;
            let b: FrameId = parts[1].parse().map_err(|e| (i + 1, format!("{e}")))?;
            let p: Provenance = parts[2].parse().map_err(|e| (i + 1, e))?;
            if a == b {
                return Err((i + 1, "self pair".into()));
            }
            g.insert(a, b, p);
        }
        Ok(g)
    }
}

/// Pairs whose camera centres are within `max_dist` and whose relative
/// rotation angle is at most `max_angle`. A k-d tree over the camera centres
/// provides the distance candidates.
pub fn pairs_by_radius(poses: &[(FrameId, Pose)], max_dist: f64, max_angle: f64) -> ViewGraph {
    let centers: Vec<[f64; 3]> = poses
        .iter()
        .map(|(_, p)| {
            let c = p.center();
            [c.x, c.y, c.z]
        })
        .collect();
    let tree = KdTree::build(&centers);
    let found: Vec<Vec<(FrameId, FrameId)>> = (0..poses.len())
        .into_par_iter()
        .map(|i| {
            tree.within(&centers[i], max_dist)
                .into_iter()
                .filter(|&j| j != i)
                .filter(|&j| {
                    let (d, a) = pose_distance(&poses[i].1, &poses[j].1);
                    d <= max_dist && a <= max_angle
                })
                .map(|j| (poses[i].0, poses[j].0))
                .collect()
        })
        .collect();
    let mut g = ViewGraph::new();
    for (a, b) in found.into_iter().flatten() {
        g.insert(a, b, Provenance::Radius);
    }
    g
}

/// One pair per image pair represented by a pose-graph edge.
pub fn pairs_from_pose_graph(graph: &PoseGraph) -> ViewGraph {
    let mut g = ViewGraph::new();
    for (a, b, p) in graph.frame_pairs() {
        g.insert(a, b, p);
    }
    g
}
