//! Pose graph over keyframes (camera-frame nodes) or rig timestamps
//! (vehicle nodes) with sequential, loop and extrinsic edges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6};
use thiserror::Error;

use crate::geometry::{se3_left_jacobian_inv, Pose, RigCalibration, Tangent};
use crate::solver::{CostFunction, Evaluation, Problem, RobustLoss, SolverError, SolverOptions, SolverReport};
use crate::viewgraph::Provenance;
use crate::{CameraId, FrameId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGraphError {
    #[error("multi-camera input needs a rig calibration")]
    MissingCalibration,
    #[error("camera {0} has no extrinsic in the rig calibration")]
    UnknownCamera(CameraId),
    #[error("frame {0} is not in the graph")]
    UnknownFrame(FrameId),
    #[error("no fixed node: the gauge is free")]
    NoFixedNode,
    #[error("edge information is not positive definite")]
    InvalidInformation,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// One image with its initial world-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: FrameId,
    pub camera: CameraId,
    pub timestamp: f64,
    /// Index of the rig capture this image belongs to.
    pub sequence: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    CameraFrame,
    VehicleRig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    Sequential,
    Loop,
    Extrinsic,
}

impl EdgeKind {
    pub fn provenance(self) -> Provenance {
        match self {
            EdgeKind::Sequential => Provenance::Sequential,
            EdgeKind::Loop => Provenance::Loop,
            EdgeKind::Extrinsic => Provenance::Extrinsic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNode {
    pub id: usize,
    /// World-to-camera pose (camera nodes) or world-to-vehicle pose (rig nodes).
    pub pose: Pose,
    pub fixed: bool,
    /// Images represented by this node.
    pub frames: Vec<(CameraId, FrameId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub kind: EdgeKind,
    pub from: usize,
    pub to: usize,
    /// Measured `T_from * T_to^-1`.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    /// Image pairs this edge links.
    pub frame_pairs: Vec<(FrameId, FrameId)>,
}

/// Measured relative pose between two images, `T_from * T_to^-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopEdge {
    pub from: FrameId,
    pub to: FrameId,
    pub measurement: Pose,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeWeights {
    pub sequential: f64,
    pub extrinsic: f64,
    /// Loop weight is `min(inliers / min_inliers, loop_cap)`.
    pub loop_cap: f64,
    pub min_inliers: usize,
}

impl Default for EdgeWeights {
    fn default() -> Self {
        Self {
            sequential: 1.0,
            extrinsic: 100.0,
            loop_cap: 10.0,
            min_inliers: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub kind: NodeKind,
    pub nodes: Vec<PoseNode>,
    pub edges: Vec<PoseEdge>,
    pub rig: Option<RigCalibration>,
    frame_node: BTreeMap<FrameId, usize>,
}

/// `log(T_hat^-1 * T_from * T_to^-1)`.
pub fn edge_residual(measurement: &Pose, from: &Pose, to: &Pose) -> Tangent {
    measurement.inverse().compose(from).compose(&to.inverse()).log()
}

/// Edge residual on two se3 blocks with left-perturbation Jacobians.
#[derive(Debug, Clone)]
pub struct RelativePoseCost {
    pub measurement: Pose,
}

impl CostFunction for RelativePoseCost {
    fn num_residuals(&self) -> usize {
        6
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation> {
        let a = Pose::from_params(params[0]);
        let b = Pose::from_params(params[1]);
        let m_inv = self.measurement.inverse();
        let err = m_inv.compose(&a).compose(&b.inverse());
        let r = err.log();
        let mut jac = Vec::new();
        if jacobians {
            let jl_inv = se3_left_jacobian_inv(&r);
            let ja = jl_inv * m_inv.adjoint();
            let jb = -(jl_inv * err.adjoint());
            jac.push(DMatrix::from_column_slice(6, 6, ja.as_slice()));
            jac.push(DMatrix::from_column_slice(6, 6, jb.as_slice()));
        }
        Some(Evaluation {
            residuals: DVector::from_column_slice(r.as_slice()),
            jacobians: jac,
        })
    }
}

/// `log(T * target^-1)` on one se3 block.
#[derive(Debug, Clone)]
pub struct PosePriorCost {
    pub target: Pose,
}

impl CostFunction for PosePriorCost {
    fn num_residuals(&self) -> usize {
        6
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation> {
        let r = Pose::from_params(params[0]).compose(&self.target.inverse()).log();
        let mut jac = Vec::new();
        if jacobians {
            jac.push(DMatrix::from_column_slice(6, 6, se3_left_jacobian_inv(&r).as_slice()));
        }
        Some(Evaluation {
            residuals: DVector::from_column_slice(r.as_slice()),
            jacobians: jac,
        })
    }
}

fn group_by_sequence(keyframes: &[Keyframe]) -> BTreeMap<usize, Vec<&Keyframe>> {
    let mut by_seq: BTreeMap<usize, Vec<&Keyframe>> = BTreeMap::new();
    for k in keyframes {
        by_seq.entry(k.sequence).or_default().push(k);
    }
    for v in by_seq.values_mut() {
        v.sort_by_key(|k| k.camera);
    }
    by_seq
}

impl PoseGraph {
    /// Builds the graph. Sequential edges link each image to the next `k`
    /// images of the same camera; extrinsic edges (camera-frame mode) link
    /// every ordered camera pair of a rig capture; in vehicle mode each rig
    /// capture is one node and the extrinsics are part of the node model.
    /// The first node is fixed.
    pub fn build(
        keyframes: &[Keyframe],
        k: usize,
        loops: &[LoopEdge],
        rig: Option<&RigCalibration>,
        kind: NodeKind,
        weights: &EdgeWeights,
    ) -> Result<Self, PoseGraphError> {
        let cameras: BTreeSet<CameraId> = keyframes.iter().map(|f| f.camera).collect();
        if cameras.len() > 1 && rig.is_none() {
            return Err(PoseGraphError::MissingCalibration);
        }
        if let Some(r) = rig {
            if let Some(&c) = cameras.iter().find(|c| r.extrinsic(**c).is_none()) {
                return Err(PoseGraphError::UnknownCamera(c));
            }
        }
        let mut g = PoseGraph {
            kind,
            nodes: Vec::new(),
            edges: Vec::new(),
            rig: rig.cloned(),
            frame_node: BTreeMap::new(),
        };
        let by_seq = group_by_sequence(keyframes);
        let info = |w: f64| Matrix6::identity() * w;

        // per-camera image sequences, in capture order
        let mut per_camera: BTreeMap<CameraId, Vec<&Keyframe>> = BTreeMap::new();
        for frames in by_seq.values() {
            for f in frames {
                per_camera.entry(f.camera).or_default().push(f);
            }
        }

        match kind {
            NodeKind::CameraFrame => {
                for frames in by_seq.values() {
                    for f in frames {
                        let id = g.nodes.len();
                        g.frame_node.insert(f.id, id);
                        g.nodes.push(PoseNode {
                            id,
                            pose: f.pose.clone(),
                            fixed: false,
                            frames: vec![(f.camera, f.id)],
                        });
                    }
                }
                for seq in per_camera.values() {
                    for off in 1..=k {
                        for w in seq.windows(off + 1) {
                            let (a, b) = (w[0], w[off]);
                            g.edges.push(PoseEdge {
                                kind: EdgeKind::Sequential,
                                from: g.frame_node[&a.id],
                                to: g.frame_node[&b.id],
                                measurement: a.pose.compose(&b.pose.inverse()),
                                information: info(weights.sequential),
                                frame_pairs: vec![(a.id, b.id)],
                            });
                        }
                    }
                }
                if let Some(r) = rig {
                    for frames in by_seq.values() {
                        for a in frames {
                            for b in frames {
                                if a.id == b.id {
                                    continue;
                                }
                                g.edges.push(PoseEdge {
                                    kind: EdgeKind::Extrinsic,
                                    from: g.frame_node[&a.id],
                                    to: g.frame_node[&b.id],
                                    measurement: r.relative(a.camera, b.camera).unwrap(),
                                    information: info(weights.extrinsic),
                                    frame_pairs: vec![(a.id, b.id)],
                                });
                            }
                        }
                    }
                }
            }
            NodeKind::VehicleRig => {
                let single;
                let r = match rig {
                    Some(r) => r,
                    None => {
                        single = RigCalibration::single(*cameras.iter().next().unwrap_or(&0));
                        g.rig = Some(single.clone());
                        &single
                    }
                };
                let mut seq_node = BTreeMap::new();
                for (&s, frames) in &by_seq {
                    let anchor = frames.iter().find(|f| f.camera == r.reference).unwrap_or(&frames[0]);
                    let pose = r.vehicle_pose(anchor.camera, &anchor.pose).unwrap();
                    let id = g.nodes.len();
                    seq_node.insert(s, id);
                    for f in frames {
                        g.frame_node.insert(f.id, id);
                    }
                    g.nodes.push(PoseNode {
                        id,
                        pose,
                        fixed: false,
                        frames: frames.iter().map(|f| (f.camera, f.id)).collect(),
                    });
                }
                let seqs: Vec<usize> = by_seq.keys().copied().collect();
                for off in 1..=k {
                    for w in seqs.windows(off + 1) {
                        let (a, b) = (seq_node[&w[0]], seq_node[&w[off]]);
                        let mut pairs = Vec::new();
                        for &(ca, fa) in &g.nodes[a].frames {
                            if let Some(&(_, fb)) = g.nodes[b].frames.iter().find(|(cb, _)| *cb == ca) {
                                pairs.push((fa, fb));
                            }
                        }
                        g.edges.push(PoseEdge {
                            kind: EdgeKind::Sequential,
                            from: a,
                            to: b,
                            measurement: g.nodes[a].pose.compose(&g.nodes[b].pose.inverse()),
                            information: info(weights.sequential),
                            frame_pairs: pairs,
                        });
                    }
                }
            }
        }

        for l in loops {
            g.add_loop(l, weights)?;
        }
        if let Some(first) = g.nodes.first_mut() {
            first.fixed = true;
        }
        Ok(g)
    }

    pub fn add_loop(&mut self, l: &LoopEdge, weights: &EdgeWeights) -> Result<(), PoseGraphError> {
        let from = *self.frame_node.get(&l.from).ok_or(PoseGraphError::UnknownFrame(l.from))?;
        let to = *self.frame_node.get(&l.to).ok_or(PoseGraphError::UnknownFrame(l.to))?;
        let measurement = match self.kind {
            NodeKind::CameraFrame => l.measurement.clone(),
            NodeKind::VehicleRig => {
                let rig = self.rig.as_ref().ok_or(PoseGraphError::MissingCalibration)?;
                let cam_of = |node: usize, frame: FrameId| self.nodes[node].frames.iter().find(|(_, f)| *f == frame).unwrap().0;
                let ei = rig.extrinsic(cam_of(from, l.from)).unwrap();
                let ej = rig.extrinsic(cam_of(to, l.to)).unwrap();
                ei.inverse().compose(&l.measurement).compose(ej)
            }
        };
        let w = (l.inlier_count as f64 / weights.min_inliers.max(1) as f64).min(weights.loop_cap);
        self.edges.push(PoseEdge {
            kind: EdgeKind::Loop,
            from,
            to,
            measurement,
            information: Matrix6::identity() * w,
            frame_pairs: vec![(l.from, l.to)],
        });
        Ok(())
    }

    pub fn node_of(&self, frame: FrameId) -> Option<usize> {
        self.frame_node.get(&frame).copied()
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    /// World-to-camera pose of every image.
    pub fn camera_poses(&self) -> BTreeMap<FrameId, Pose> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            for &(c, f) in &n.frames {
                let pose = match (self.kind, &self.rig) {
                    (NodeKind::VehicleRig, Some(rig)) => rig.camera_pose(c, &n.pose).unwrap(),
                    _ => n.pose.clone(),
                };
                out.insert(f, pose);
            }
        }
        out
    }

    /// Image pairs linked by edges, plus the intra-rig pairs of vehicle nodes.
    pub fn frame_pairs(&self) -> Vec<(FrameId, FrameId, Provenance)> {
        let mut out = Vec::new();
        for e in &self.edges {
            for &(a, b) in &e.frame_pairs {
                out.push((a, b, e.kind.provenance()));
            }
        }
        if self.kind == NodeKind::VehicleRig {
            for n in &self.nodes {
                for (i, &(_, a)) in n.frames.iter().enumerate() {
                    for &(_, b) in &n.frames[i + 1..] {
                        out.push((a, b, Provenance::Extrinsic));
                    }
                }
            }
        }
        out
    }

    pub fn residuals(&self) -> Vec<Tangent> {
        self.edges
            .iter()
            .map(|e| edge_residual(&e.measurement, &self.nodes[e.from].pose, &self.nodes[e.to].pose))
            .collect()
    }

    /// `sum r^T Omega r` over all edges.
    pub fn cost(&self) -> f64 {
        self.edges
            .iter()
            .zip(self.residuals())
            .map(|(e, r)| (r.transpose() * e.information * r)[0])
            .sum()
    }

    pub fn problem(&self) -> Result<Problem, PoseGraphError> {
        let mut p = Problem::new();
        for n in &self.nodes {
            let b = p.add_pose_block(&n.pose);
            p.set_fixed(b, n.fixed);
        }
        for e in &self.edges {
            let omega = DMatrix::from_column_slice(6, 6, e.information.as_slice());
            p.add_residual_block_with_information(
                Box::new(RelativePoseCost {
                    measurement: e.measurement.clone(),
                }),
                vec![e.from, e.to],
                RobustLoss::Trivial,
                &omega,
            )
            .map_err(|err| match err {
                SolverError::NotPositiveDefinite => PoseGraphError::InvalidInformation,
                other => other.into(),
            })?;
        }
        Ok(p)
    }

    /// Levenberg–Marquardt on the weighted edge residuals; fixed nodes are untouched.
    pub fn optimize(&mut self, options: &SolverOptions) -> Result<SolverReport, PoseGraphError> {
        if !self.nodes.iter().any(|n| n.fixed) {
            return Err(PoseGraphError::NoFixedNode);
        }
        let mut p = self.problem()?;
        let report = p.solve(options)?;
        for (i, n) in self.nodes.iter_mut().enumerate() {
            if !n.fixed {
                n.pose = p.pose(i);
            }
        }
        Ok(report)
    }

    /// One line per node and per edge.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let q = n.pose.quaternion_wxyz();
            let t = n.pose.translation_array();
            let frames: Vec<String> = n.frames.iter().map(|(c, f)| format!("{c}:{f}")).collect();
            let _ = writeln!(
                s,
                "node {} fixed={} q={:.9} {:.9} {:.9} {:.9} t={:.9} {:.9} {:.9} frames={}",
                n.id,
                n.fixed,
                q[0],
                q[1],
                q[2],
                q[3],
                t[0],
                t[1],
                t[2],
                frames.join(",")
            );
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "edge {:?} {} {} weight={:.6}",
                e.kind,
                e.from,
                e.to,
                e.information[(0, 0)]
            );
        }
        s
    }
}

pub fn build_pose_graph(
    keyframes: &[Keyframe],
    k_neighbors: usize,
    loops: &[LoopEdge],
    rig: Option<&RigCalibration>,
    kind: NodeKind,
) -> Result<PoseGraph, PoseGraphError> {
    PoseGraph::build(keyframes, k_neighbors, loops, rig, kind, &EdgeWeights::default())
}

pub fn optimize_pose_graph(graph: &mut PoseGraph, options: &SolverOptions) -> Result<SolverReport, PoseGraphError> {
    graph.optimize(options)
}
