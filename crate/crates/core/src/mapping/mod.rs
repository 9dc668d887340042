//! Tracks, triangulation and two-stage bundle adjustment into a sparse map.

mod costs;
mod triangulate;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{FeatureSet, Match};
use crate::geometry::{CameraModel, GeometryError, Pose, RigCalibration};
use crate::posegraph::{PosePriorCost, RelativePoseCost};
use crate::solver::{Manifold, Problem, RobustLoss, SolverError, SolverOptions, SolverReport};
use crate::{CameraId, FrameId};

pub use costs::{ReprojectionCost, RigReprojectionCost, RollingShutterCost};
pub use triangulate::{
    max_ray_angle, ransac_triangulate, reprojection_error, triangulate, triangulate_dlt, triangulate_midpoint,
    triangulation_count, PixelView, RayObservation, TriangulationMethod,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("need at least 2 observations, got {0}")]
    InsufficientObservations(usize),
    #[error("triangulation angle below the minimum")]
    InsufficientParallax,
    #[error("point behind an observing camera")]
    CheiralityViolation,
    #[error("rays are parallel")]
    ParallelRays,
    #[error("no fixed pose and no absolute prior: gauge freedom")]
    NoGauge,
    #[error("map has no landmarks")]
    EmptyMap,
    #[error("rig calibration required")]
    MissingCalibration,
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
    #[error("unknown frame {0}")]
    UnknownFrame(FrameId),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shutter {
    Global,
    /// Rows are exposed top to bottom over `exposure` seconds.
    Rolling { exposure: f64 },
}

/// Whether a keyframe comes from the current session or a prior map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    New,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFrame {
    pub id: FrameId,
    pub camera: CameraId,
    pub timestamp: f64,
    /// Rig capture index; frames of one capture share it.
    pub sequence: usize,
    pub pose: Pose,
    pub shutter: Shutter,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: FrameId,
    pub feature: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Pending,
    Triangulated,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub observations: Vec<Observation>,
    pub status: TrackStatus,
    /// Triangulation attempts so far.
    pub attempts: u32,
}

impl Track {
    pub fn new(observations: Vec<Observation>) -> Self {
        Self {
            observations,
            status: TrackStatus::Pending,
            attempts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub track: usize,
    /// Aligned with the track's observations.
    pub inliers: Vec<bool>,
}

impl Landmark {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&m| m).count()
    }
}

/// Tries a track this many times before giving up on it.
pub const MAX_TRACK_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    pub cameras: BTreeMap<CameraId, CameraModel>,
    pub rig: Option<RigCalibration>,
    pub keyframes: BTreeMap<FrameId, MapFrame>,
    pub tracks: Vec<Track>,
    pub landmarks: Vec<Landmark>,
    /// Keyframes held constant by bundle adjustment.
    pub fixed: BTreeSet<FrameId>,
}

impl SparseMap {
    /// Map without landmarks. The first keyframe is fixed.
    pub fn new(cameras: BTreeMap<CameraId, CameraModel>, rig: Option<RigCalibration>, keyframes: Vec<MapFrame>) -> Self {
        let keyframes: BTreeMap<FrameId, MapFrame> = keyframes.into_iter().map(|k| (k.id, k)).collect();
        let fixed = keyframes.keys().next().copied().into_iter().collect();
        Self {
            cameras,
            rig,
            keyframes,
            tracks: Vec::new(),
            landmarks: Vec::new(),
            fixed,
        }
    }

    pub fn camera_of(&self, frame: FrameId) -> Result<&CameraModel, MappingError> {
        let kf = self.keyframes.get(&frame).ok_or(MappingError::UnknownFrame(frame))?;
        self.cameras.get(&kf.camera).ok_or(MappingError::UnknownCamera(kf.camera))
    }

    /// Next keyframe of the same camera in time, for every keyframe that has one.
    pub fn successors(&self) -> BTreeMap<FrameId, FrameId> {
        let mut by_camera: BTreeMap<CameraId, Vec<&MapFrame>> = BTreeMap::new();
        for kf in self.keyframes.values() {
            by_camera.entry(kf.camera).or_default().push(kf);
        }
        let mut out = BTreeMap::new();
        for frames in by_camera.values_mut() {
            frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.id.cmp(&b.id)));
            for w in frames.windows(2) {
                out.insert(w[0].id, w[1].id);
            }
        }
        out
    }

    /// Interpolation partner and parameter for an observation on a
    /// rolling-shutter frame. `None` means the frame pose is used as is.
    fn shutter_interpolation(
        &self,
        successors: &BTreeMap<FrameId, FrameId>,
        frame: FrameId,
        pixel: &Vector2<f64>,
    ) -> Option<(FrameId, f64)> {
        let kf = self.keyframes.get(&frame)?;
        let Shutter::Rolling { exposure } = kf.shutter else {
            return None;
        };
        let next = *successors.get(&frame)?;
        let dt = self.keyframes[&next].timestamp - kf.timestamp;
        let height = self.cameras.get(&kf.camera)?.height;
        if dt <= 0.0 || height < 2 {
            return None;
        }
        let s = (pixel.y / (height - 1) as f64).clamp(0.0, 1.0);
        Some((next, s * exposure / dt))
    }

    /// Camera pose at the time the given pixel was exposed.
    pub fn observation_pose(&self, successors: &BTreeMap<FrameId, FrameId>, obs: &Observation) -> Result<Pose, MappingError> {
        let kf = self.keyframes.get(&obs.frame).ok_or(MappingError::UnknownFrame(obs.frame))?;
        Ok(match self.shutter_interpolation(successors, obs.frame, &obs.pixel) {
            Some((next, alpha)) => crate::geometry::interpolate_pose(&kf.pose, &self.keyframes[&next].pose, alpha),
            None => kf.pose,
        })
    }

    /// Reprojection error of every inlier observation, landmark by landmark.
    pub fn inlier_residuals(&self) -> Vec<f64> {
        let succ = self.successors();
        let mut out = Vec::new();
        for lm in &self.landmarks {
            for (o, _) in self.tracks[lm.track].observations.iter().zip(&lm.inliers).filter(|(_, &m)| m) {
                out.push(self.observation_error(&succ, o, &lm.position));
            }
        }
        out
    }

    pub fn mean_reprojection_error(&self) -> f64 {
        let r = self.inlier_residuals();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    fn observation_error(&self, succ: &BTreeMap<FrameId, FrameId>, o: &Observation, x: &Vector3<f64>) -> f64 {
        let (Ok(pose), Ok(cam)) = (self.observation_pose(succ, o), self.camera_of(o.frame)) else {
            return f64::INFINITY;
        };
        match cam.project(&pose, x) {
            Ok(p) => (p - o.pixel).norm(),
            Err(_) => f64::INFINITY,
        }
    }

    pub fn poses(&self) -> BTreeMap<FrameId, Pose> {
        self.keyframes.iter().map(|(&id, k)| (id, k.pose)).collect()
    }
}

/// Builds tracks from pairwise matches by depth-first search over the
/// feature graph. A node is skipped when its frame is already in the track
/// being grown, so conflicting components split into several tracks; the
/// skipped nodes seed their own tracks later. Tracks with fewer than 2
/// observations are dropped.
pub fn build_tracks(matches: &BTreeMap<(FrameId, FrameId), Vec<Match>>, features: &BTreeMap<FrameId, FeatureSet>) -> Vec<Track> {
    type Node = (FrameId, usize);
    let mut adj: BTreeMap<Node, BTreeSet<Node>> = BTreeMap::new();
    for (&(fa, fb), ms) in matches {
        if fa == fb {
            continue;
        }
        for m in ms {
            let (a, b) = ((fa, m.index_a), (fb, m.index_b));
            adj.entry(a).or_default().insert(b);
            adj.entry(b).or_default().insert(a);
        }
    }
    let pixel = |n: &Node| -> Option<Vector2<f64>> {
        let kp = features.get(&n.0)?.keypoints.get(n.1)?;
        Some(Vector2::new(kp.x, kp.y))
    };
    let mut visited: BTreeSet<Node> = BTreeSet::new();
    let mut tracks = Vec::new();
    for &start in adj.keys() {
        if visited.contains(&start) {
            continue;
        }
        let mut frames = BTreeSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            if visited.contains(&n) || frames.contains(&n.0) {
                continue;
            }
            visited.insert(n);
            frames.insert(n.0);
            nodes.push(n);
            for &next in adj[&n].iter().rev() {
                if !visited.contains(&next) && !frames.contains(&next.0) {
                    stack.push(next);
                }
            }
        }
        if nodes.len() < 2 {
            continue;
        }
        nodes.sort();
        let obs: Option<Vec<Observation>> = nodes
            .iter()
            .map(|n| {
                Some(Observation {
                    frame: n.0,
                    feature: n.1,
                    pixel: pixel(n)?,
                })
            })
            .collect();
        if let Some(obs) = obs {
            tracks.push(Track::new(obs));
        }
    }
    tracks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub outlier_px: f64,
    pub loss: RobustLoss,
    /// Weight of relative-pose terms between consecutive keyframes.
    pub lambda_c: f64,
    /// Weight of absolute priors on keyframe poses.
    pub lambda_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaMode {
    Pure,
    /// Prior keyframes held constant.
    LocalizationFixed,
    /// Prior keyframes free, held by absolute priors.
    LocalizationAdjust,
    /// Vehicle poses and camera extrinsics optimized.
    RigExtrinsic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub max_outer_iters: usize,
    /// Radians.
    pub min_triangulation_angle: f64,
    pub method: TriangulationMethod,
    pub mode: BaMode,
    /// Weight of the extrinsic priors and rigidity terms in rig mode.
    pub extrinsic_prior: f64,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig {
                outlier_px: 4.0,
                loss: RobustLoss::Huber(2.0),
                lambda_c: 1.0,
                lambda_a: 1.0,
            },
            stage2: StageConfig {
                outlier_px: 2.0,
                loss: RobustLoss::Trivial,
                lambda_c: 1.0,
                lambda_a: 1.0,
            },
            max_outer_iters: 10,
            min_triangulation_angle: 0.5f64.to_radians(),
            method: TriangulationMethod::Dlt,
            mode: BaMode::Pure,
            extrinsic_prior: 1e-3,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

impl MappingConfig {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaReport {
    pub solver: SolverReport,
    pub residual_blocks: usize,
    pub free_poses: usize,
}

enum PoseParam {
    Frame(BTreeMap<FrameId, usize>),
    Rig {
        vehicles: BTreeMap<usize, usize>,
        extrinsics: BTreeMap<CameraId, usize>,
    },
}

fn weight(lambda: f64) -> DMatrix<f64> {
    DMatrix::identity(6, 6) * lambda
}

/// Optimizes the map in place. Stage one uses its robust loss, stage two the
/// trivial loss; both add relative-pose terms between consecutive keyframes
/// of a camera (`lambda_c`) and absolute priors (`lambda_a`) on poses whose
/// entry value is trusted: every free keyframe in pure mode, the prior
/// keyframes in adjust mode, the vehicle poses in rig mode.
pub fn bundle_adjust(map: &mut SparseMap, config: &MappingConfig, stage: Stage, mode: BaMode) -> Result<BaReport, MappingError> {
    if map.landmarks.is_empty() {
        return Err(MappingError::EmptyMap);
    }
    let sc = *config.stage(stage);
    let succ = map.successors();
    let mut problem = Problem::new();

    // frames that carry at least one inlier observation
    let mut observed: BTreeSet<FrameId> = BTreeSet::new();
    for lm in &map.landmarks {
        for (o, _) in map.tracks[lm.track].observations.iter().zip(&lm.inliers).filter(|(_, &m)| m) {
            observed.insert(o.frame);
            if mode != BaMode::RigExtrinsic {
                if let Some((next, _)) = map.shutter_interpolation(&succ, o.frame, &o.pixel) {
                    observed.insert(next);
                }
            }
        }
    }

    let mut fixed_frames = map.fixed.clone();
    if mode == BaMode::LocalizationFixed {
        fixed_frames.extend(map.keyframes.values().filter(|k| k.origin == Origin::Prior).map(|k| k.id));
    }

    let mut anchors = 0usize;
    let mut priors = 0usize;
    let params = if mode == BaMode::RigExtrinsic {
        let rig = map.rig.clone().ok_or(MappingError::MissingCalibration)?;
        let mut vehicles = BTreeMap::new();
        let mut vehicle_fixed = BTreeSet::new();
        for kf in map.keyframes.values() {
            if !observed.contains(&kf.id) || vehicles.contains_key(&kf.sequence) {
                continue;
            }
            let v = rig.vehicle_pose(kf.camera, &kf.pose).ok_or(MappingError::UnknownCamera(kf.camera))?;
            vehicles.insert(kf.sequence, problem.add_pose_block(&v));
        }
        for f in &fixed_frames {
            if let Some(kf) = map.keyframes.get(f) {
                if let Some(&b) = vehicles.get(&kf.sequence) {
                    problem.set_fixed(b, true);
                    vehicle_fixed.insert(kf.sequence);
                }
            }
        }
        anchors += vehicle_fixed.len();
        let mut extrinsics = BTreeMap::new();
        for c in rig.camera_ids() {
            let b = problem.add_pose_block(rig.extrinsic(c).unwrap());
            if c == rig.reference {
                problem.set_fixed(b, true);
            }
            extrinsics.insert(c, b);
        }
        PoseParam::Rig { vehicles, extrinsics }
    } else {
        let mut frames = BTreeMap::new();
        for kf in map.keyframes.values() {
            if !observed.contains(&kf.id) {
                continue;
            }
            let b = problem.add_pose_block(&kf.pose);
            if fixed_frames.contains(&kf.id) {
                problem.set_fixed(b, true);
                anchors += 1;
            }
            frames.insert(kf.id, b);
        }
        PoseParam::Frame(frames)
    };

    // absolute priors and relative terms
    match &params {
        PoseParam::Frame(frames) => {
            if sc.lambda_a > 0.0 {
                for (&id, &b) in frames {
                    let kf = &map.keyframes[&id];
                    let trusted = match mode {
                        BaMode::Pure => true,
                        BaMode::LocalizationAdjust => kf.origin == Origin::Prior,
                        _ => false,
                    };
                    if trusted && !problem.is_fixed(b) {
                        problem.add_residual_block_with_information(
                            Box::new(PosePriorCost { target: kf.pose }),
                            vec![b],
                            RobustLoss::Trivial,
                            &weight(sc.lambda_a),
                        )?;
                        priors += 1;
                    }
                }
            }
            if sc.lambda_c > 0.0 {
                for (&a, &b) in &succ {
                    let (Some(&ba), Some(&bb)) = (frames.get(&a), frames.get(&b)) else {
                        continue;
                    };
                    if problem.is_fixed(ba) && problem.is_fixed(bb) {
                        continue;
                    }
                    let m = map.keyframes[&a].pose.compose(&map.keyframes[&b].pose.inverse());
                    problem.add_residual_block_with_information(
                        Box::new(RelativePoseCost { measurement: m }),
                        vec![ba, bb],
                        RobustLoss::Trivial,
                        &weight(sc.lambda_c),
                    )?;
                }
            }
        }
        PoseParam::Rig { vehicles, extrinsics } => {
            let rig = map.rig.as_ref().unwrap();
            let ids: Vec<(usize, usize)> = vehicles.iter().map(|(&s, &b)| (s, b)).collect();
            for &(_, b) in &ids {
                if sc.lambda_a > 0.0 && !problem.is_fixed(b) {
                    let target = problem.pose(b);
                    problem.add_residual_block_with_information(
                        Box::new(PosePriorCost { target }),
                        vec![b],
                        RobustLoss::Trivial,
                        &weight(sc.lambda_a),
                    )?;
                    priors += 1;
                }
            }
            if sc.lambda_c > 0.0 {
                for w in ids.windows(2) {
                    let (ba, bb) = (w[0].1, w[1].1);
                    if problem.is_fixed(ba) && problem.is_fixed(bb) {
                        continue;
                    }
                    let m = problem.pose(ba).compose(&problem.pose(bb).inverse());
                    problem.add_residual_block_with_information(
                        Box::new(RelativePoseCost { measurement: m }),
                        vec![ba, bb],
                        RobustLoss::Trivial,
                        &weight(sc.lambda_c),
                    )?;
                }
            }
            if config.extrinsic_prior > 0.0 {
                let cams: Vec<(CameraId, usize)> = extrinsics.iter().map(|(&c, &b)| (c, b)).collect();
                for &(c, b) in &cams {
                    if !problem.is_fixed(b) {
                        problem.add_residual_block_with_information(
                            Box::new(PosePriorCost {
                                target: *rig.extrinsic(c).unwrap(),
                            }),
                            vec![b],
                            RobustLoss::Trivial,
                            &weight(config.extrinsic_prior),
                        )?;
                    }
                }
                // rigidity between every camera pair of the rig
                for i in 0..cams.len() {
                    for j in i + 1..cams.len() {
                        let m = rig.relative(cams[i].0, cams[j].0).unwrap();
                        problem.add_residual_block_with_information(
                            Box::new(RelativePoseCost { measurement: m }),
                            vec![cams[i].1, cams[j].1],
                            RobustLoss::Trivial,
                            &weight(config.extrinsic_prior),
                        )?;
                    }
                }
            }
        }
    }

    if anchors == 0 && priors == 0 {
        return Err(MappingError::NoGauge);
    }

    // landmarks and reprojection terms
    let mut point_blocks = Vec::with_capacity(map.landmarks.len());
    for lm in &map.landmarks {
        let bx = problem.add_parameter_block(lm.position.as_slice().to_vec(), Manifold::Euclidean);
        point_blocks.push(bx);
        for (o, _) in map.tracks[lm.track].observations.iter().zip(&lm.inliers).filter(|(_, &m)| m) {
            let kf = &map.keyframes[&o.frame];
            let camera = map.cameras.get(&kf.camera).ok_or(MappingError::UnknownCamera(kf.camera))?.clone();
            match &params {
                PoseParam::Frame(frames) => match map.shutter_interpolation(&succ, o.frame, &o.pixel) {
                    Some((next, alpha)) => problem.add_residual_block(
                        Box::new(RollingShutterCost {
                            camera,
                            observed: o.pixel,
                            alpha,
                        }),
                        vec![frames[&o.frame], frames[&next], bx],
                        sc.loss,
                    )?,
                    None => problem.add_residual_block(
                        Box::new(ReprojectionCost { camera, observed: o.pixel }),
                        vec![frames[&o.frame], bx],
                        sc.loss,
                    )?,
                },
                PoseParam::Rig { vehicles, extrinsics } => problem.add_residual_block(
                    Box::new(RigReprojectionCost { camera, observed: o.pixel }),
                    vec![
                        *extrinsics.get(&kf.camera).ok_or(MappingError::UnknownCamera(kf.camera))?,
                        vehicles[&kf.sequence],
                        bx,
                    ],
                    sc.loss,
                )?,
            };
        }
    }

    let residual_blocks = problem.num_residual_blocks();
    let report = problem.solve(&config.solver)?;

    for (lm, &b) in map.landmarks.iter_mut().zip(&point_blocks) {
        lm.position = Vector3::from_column_slice(problem.values(b));
    }
    let free_poses;
    match &params {
        PoseParam::Frame(frames) => {
            free_poses = frames.values().filter(|&&b| !problem.is_fixed(b)).count();
            for (id, &b) in frames {
                if !problem.is_fixed(b) {
                    map.keyframes.get_mut(id).unwrap().pose = problem.pose(b);
                }
            }
        }
        PoseParam::Rig { vehicles, extrinsics } => {
            free_poses = vehicles.values().filter(|&&b| !problem.is_fixed(b)).count();
            let rig = map.rig.as_mut().unwrap();
            for (&c, &b) in extrinsics {
                if !problem.is_fixed(b) {
                    rig.extrinsics.insert(c, problem.pose(b));
                }
            }
            let rig = rig.clone();
            for kf in map.keyframes.values_mut() {
                if let Some(&b) = vehicles.get(&kf.sequence) {
                    kf.pose = rig.camera_pose(kf.camera, &problem.pose(b)).unwrap();
                }
            }
        }
    }
    Ok(BaReport {
        solver: report,
        residual_blocks,
        free_poses,
    })
}

/// Drops inlier observations reprojecting farther than `threshold_px`.
/// Landmarks left with fewer than 2 inliers are removed and their tracks go
/// back to pending (or failed once out of attempts). Returns the number of
/// removed observations.
pub fn remove_outliers(map: &mut SparseMap, threshold_px: f64) -> usize {
    let succ = map.successors();
    let mut removed = 0;
    let mut keep = Vec::with_capacity(map.landmarks.len());
    let landmarks = std::mem::take(&mut map.landmarks);
    for mut lm in landmarks {
        for (i, o) in map.tracks[lm.track].observations.iter().enumerate() {
            if lm.inliers[i] && !(map.observation_error(&succ, o, &lm.position) <= threshold_px) {
                lm.inliers[i] = false;
                removed += 1;
            }
        }
        if lm.inlier_count() >= 2 {
            keep.push(lm);
        } else {
            let t = &mut map.tracks[lm.track];
            t.status = if t.attempts >= MAX_TRACK_ATTEMPTS {
                TrackStatus::Failed
            } else {
                TrackStatus::Pending
            };
        }
    }
    map.landmarks = keep;
    removed
}

/// Runs robust triangulation on every pending track. Outlier observations of
/// a triangulated track are split off into a new pending track. Returns the
/// number of new landmarks.
pub fn triangulate_pending(map: &mut SparseMap, threshold_px: f64, config: &MappingConfig) -> usize {
    let succ = map.successors();
    let pending: Vec<usize> = (0..map.tracks.len())
        .filter(|&i| map.tracks[i].status == TrackStatus::Pending)
        .collect();
    let results: Vec<(usize, Option<(Vector3<f64>, Vec<bool>)>)> = {
        let m = &*map;
        pending
            .par_iter()
            .map(|&ti| {
                let track = &m.tracks[ti];
                let views: Option<Vec<PixelView>> = track
                    .observations
                    .iter()
                    .map(|o| {
                        let pose = m.observation_pose(&succ, o).ok()?;
                        let camera = m.camera_of(o.frame).ok()?;
                        Some(PixelView {
                            obs: RayObservation::from_pixel(camera, &pose, &o.pixel).ok()?,
                            camera,
                            pixel: o.pixel,
                        })
                    })
                    .collect();
                let seed = config.seed ^ (ti as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let res = views.and_then(|v| {
                    ransac_triangulate(&v, threshold_px, config.min_triangulation_angle, config.method, seed)
                });
                (ti, res)
            })
            .collect()
    };
    let mut added = 0;
    for (ti, res) in results {
        map.tracks[ti].attempts += 1;
        match res {
            None => map.tracks[ti].status = TrackStatus::Failed,
            Some((x, mask)) => {
                let track = &mut map.tracks[ti];
                let (inl, out): (Vec<_>, Vec<_>) = track.observations.iter().zip(&mask).partition(|(_, &m)| m);
                let inl: Vec<Observation> = inl.into_iter().map(|(o, _)| *o).collect();
                let out: Vec<Observation> = out.into_iter().map(|(o, _)| *o).collect();
                track.observations = inl;
                track.status = TrackStatus::Triangulated;
                let n = track.observations.len();
                map.landmarks.push(Landmark {
                    position: x,
                    track: ti,
                    inliers: vec![true; n],
                });
                added += 1;
                if out.len() >= 2 {
                    map.tracks.push(Track::new(out));
                }
            }
        }
    }
    added
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    pub stage: Stage,
    pub triangulated: usize,
    pub removed: usize,
    pub landmarks: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

impl RoundStats {
    /// One `key=value` line for the diagnostic stream.
    pub fn to_line(&self) -> String {
        format!(
            "round={} stage={} triangulated={} removed={} landmarks={} cost_initial={:.6e} cost_final={:.6e}",
            self.round,
            if self.stage == Stage::One { 1 } else { 2 },
            self.triangulated,
            self.removed,
            self.landmarks,
            self.initial_cost,
            self.final_cost
        )
    }
}

/// Alternates triangulation, bundle adjustment and outlier removal. Stage
/// one rounds run until a round adds no landmark and removes no observation
/// (or `max_outer_iters`); stage two then runs with its stricter threshold
/// until it removes nothing, and the map ends on an outlier pass so every
/// remaining inlier is within the stage-two threshold.
pub fn iterative_map(map: &mut SparseMap, config: &MappingConfig) -> Result<Vec<RoundStats>, MappingError> {
    let mut stats = Vec::new();
    let mut round = 0;
    let run = |map: &mut SparseMap, stage: Stage, triangulate: bool, round: usize| -> Result<RoundStats, MappingError> {
        let sc = *config.stage(stage);
        let triangulated = if triangulate {
            triangulate_pending(map, sc.outlier_px, config)
        } else {
            0
        };
        let (initial_cost, final_cost) = if map.landmarks.is_empty() {
            (0.0, 0.0)
        } else {
            let r = bundle_adjust(map, config, stage, config.mode)?;
            (r.solver.initial_cost, r.solver.final_cost)
        };
        let removed = remove_outliers(map, sc.outlier_px);
        let s = RoundStats {
            round,
            stage,
            triangulated,
            removed,
            landmarks: map.landmarks.len(),
            initial_cost,
            final_cost,
        };
        log::info!("{}", s.to_line());
        Ok(s)
    };
    for _ in 0..config.max_outer_iters.max(1) {
        let s = run(map, Stage::One, true, round)?;
        round += 1;
        let done = s.triangulated == 0 && s.removed == 0;
        stats.push(s);
        if done {
            break;
        }
    }
    for _ in 0..config.max_outer_iters.max(1) {
        let s = run(map, Stage::Two, false, round)?;
        round += 1;
        let done = s.removed == 0;
        stats.push(s);
        if done {
            break;
        }
    }
    Ok(stats)
}
