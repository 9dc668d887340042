//! Synthetic scenes with full ground truth: trajectory, landmarks,
//! observations, matches and injected outliers.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::HarnessError;
use crate::features::{descriptor_distance, FeatureSet, Keypoint, Match};
use crate::geometry::{so3_exp, CameraModel, Pose, RigCalibration};
use crate::io::{
    self, CameraEntry, DatasetManifest, ExtrinsicEntry, KeyframeEntry, MatchTable, PoseRecord, RigEntry, ShutterEntry,
    TrajectoryRecord,
};
use crate::{CameraId, FrameId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Line,
    Circle,
    FigureEight,
}

impl FromStr for Shape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "line" => Ok(Shape::Line),
            "circle" => Ok(Shape::Circle),
            "figure-eight" | "figure8" => Ok(Shape::FigureEight),
            _ => Err(format!("unknown shape '{s}' (line, circle, figure-eight)")),
        }
    }
}

impl Shape {
    fn closed(self) -> bool {
        !matches!(self, Shape::Line)
    }

    /// Unscaled planar curve in the x-z plane, `u` in [0, 1).
    fn curve(self, u: f64) -> Vector3<f64> {
        let a = 2.0 * PI * u;
        match self {
            Shape::Line => Vector3::new(0.0, 0.0, u),
            Shape::Circle => Vector3::new(1.0 - a.cos(), 0.0, a.sin()) / (2.0 * PI),
            Shape::FigureEight => Vector3::new(a.sin() * a.cos(), 0.0, a.sin()),
        }
    }
}

/// Per-step drift and measurement noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Keypoint noise standard deviation in pixels.
    pub pixel_sigma: f64,
    /// Relative odometry drift per step: a heading bias of `drift` radians,
    /// a translation scale error of `drift`, and isotropic jitter of
    /// `0.3 * drift` on both.
    pub drift: f64,
    /// Fraction of ground-truth matches replaced by wrong associations.
    pub outlier_fraction: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            pixel_sigma: 0.0,
            drift: 0.0,
            outlier_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    /// Path length in metres.
    pub length: f64,
    /// Number of rig captures along the path.
    pub frames: usize,
    pub landmarks: usize,
    /// Camera models with their extrinsics (reference camera to this
    /// camera); the first entry is the reference and should be the identity.
    pub cameras: Vec<(CameraModel, Pose)>,
    pub noise: NoiseSpec,
    pub descriptor_dim: usize,
    pub descriptor_sigma: f64,
    /// Ground-truth matches link captures at most this many steps apart.
    pub match_window: usize,
    /// Seconds between captures.
    pub timestep: f64,
    /// Lateral landmark offset from the path, metres.
    pub lateral: (f64, f64),
    /// Landmark height range (camera y axis points down).
    pub height: (f64, f64),
    pub max_depth: f64,
    /// Landmarks whose best ray angle within the match window is smaller are redrawn.
    pub min_parallax_deg: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Circle,
            length: 60.0,
            frames: 60,
            landmarks: 600,
            cameras: vec![(default_camera(), Pose::identity())],
            noise: NoiseSpec::none(),
            descriptor_dim: 32,
            descriptor_sigma: 0.05,
            match_window: 5,
            timestep: 0.1,
            lateral: (3.0, 10.0),
            height: (-3.0, 1.5),
            max_depth: 25.0,
            min_parallax_deg: 1.0,
        }
    }
}

pub fn default_camera() -> CameraModel {
    CameraModel::pinhole(500.0, 500.0, 320.0, 240.0, 640, 480)
}

/// Forward camera plus two cameras 0.5 m to each side, yawed outwards by 25 degrees.
pub fn three_camera_rig() -> Vec<(CameraModel, Pose)> {
    let side = |x: f64, yaw: f64| {
        let r = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
        let c = Vector3::new(x, 0.0, 0.0);
        Pose::new(r, -(r * c))
    };
    vec![
        (default_camera(), Pose::identity()),
        (default_camera(), side(0.5, 25f64.to_radians())),
        (default_camera(), side(-0.5, -25f64.to_radians())),
    ]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Usage(m.into()));
        if self.frames < 2 {
            return bad("a scene needs at least two frames");
        }
        if self.cameras.is_empty() {
            return bad("a scene needs at least one camera");
        }
        if !(self.length > 0.0) || !(self.timestep > 0.0) {
            return bad("length and timestep must be positive");
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor dimension must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise.outlier_fraction) || self.noise.pixel_sigma < 0.0 || self.noise.drift < 0.0 {
            return bad("noise parameters out of range");
        }
        if self.lateral.0 > self.lateral.1 || self.height.0 > self.height.1 {
            return bad("empty landmark band");
        }
        Ok(())
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn frame_id(&self, capture: usize, camera: usize) -> FrameId {
        (capture * self.cameras.len() + camera) as FrameId
    }
}

/// Generated scene. Poses are world-to-camera; vehicle poses are the
/// reference camera's.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub vehicle_truth: Vec<Pose>,
    pub vehicle_initial: Vec<Pose>,
    pub truth: BTreeMap<FrameId, Pose>,
    pub initial: BTreeMap<FrameId, Pose>,
    pub cameras: BTreeMap<CameraId, CameraModel>,
    pub rig: Option<RigCalibration>,
    pub landmarks: Vec<Vector3<f64>>,
    pub landmark_descriptors: Vec<Vec<f64>>,
    pub features: BTreeMap<FrameId, FeatureSet>,
    /// Ground-truth landmark of each feature.
    pub feature_landmarks: BTreeMap<FrameId, Vec<usize>>,
    /// Noise-free projection of each feature.
    pub exact_pixels: BTreeMap<FrameId, Vec<Vector2<f64>>>,
    /// Ground-truth matches with outliers injected.
    pub matches: MatchTable,
    /// `(pair, index into the pair's match list)` of every corrupted match.
    pub corrupt: BTreeSet<((FrameId, FrameId), usize)>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng))
}

/// Path sampler scaled so the path has the requested length.
struct Path3 {
    shape: Shape,
    scale: f64,
}

impl Path3 {
    fn new(shape: Shape, length: f64) -> Self {
        let n = 4096;
        let raw: f64 = (0..n)
            .map(|i| (shape.curve((i + 1) as f64 / n as f64) - shape.curve(i as f64 / n as f64)).norm())
            .sum();
        Self {
            shape,
            scale: length / raw,
        }
    }

    fn point(&self, u: f64) -> Vector3<f64> {
        self.shape.curve(u) * self.scale
    }

    fn tangent(&self, u: f64) -> Vector3<f64> {
        let h = 1e-6;
        (self.point(u + h) - self.point(u - h)).normalize()
    }

    /// World-to-camera pose at `u` looking along the path, y axis down.
    fn pose(&self, u: f64) -> Pose {
        let z = self.tangent(u);
        let y = Vector3::y();
        let x = y.cross(&z).normalize();
        let r_cw = Matrix3::from_columns(&[x, y, z]);
        let r = r_cw.transpose();
        Pose::from_matrix_parts(&r, -(r * self.point(u)))
    }
}

/// Odometry step `delta` with drift applied.
fn drift_step(delta: &Pose, drift: f64, sign: f64, rng: &mut ChaCha8Rng) -> Pose {
    let phi = Vector3::new(0.0, sign * drift, 0.0) + gaussian3(rng) * (0.3 * drift);
    let t = delta.translation();
    let dt = t * drift + gaussian3(rng) * (0.3 * drift * t.norm());
    let rot = so3_exp(&phi);
    Pose::new(rot * delta.rotation(), t + dt)
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = Path3::new(spec.shape, spec.length);
    let nf = spec.frames;
    let nc = spec.num_cameras();
    let u_of = |k: usize| {
        if spec.shape.closed() {
            k as f64 / nf as f64
        } else {
            k as f64 / (nf - 1) as f64
        }
    };
    let vehicle_truth: Vec<Pose> = (0..nf).map(|k| path.pose(u_of(k))).collect();

    // drift: compose perturbed odometry steps from the exact first pose
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut vehicle_initial = vec![vehicle_truth[0]];
    for k in 1..nf {
        let delta = vehicle_truth[k].compose(&vehicle_truth[k - 1].inverse());
        let step = if spec.noise.drift > 0.0 {
            drift_step(&delta, spec.noise.drift, sign, &mut rng)
        } else {
            delta
        };
        let prev = vehicle_initial[k - 1];
        vehicle_initial.push(step.compose(&prev));
    }

    let cameras: BTreeMap<CameraId, CameraModel> =
        spec.cameras.iter().enumerate().map(|(c, (m, _))| (c as CameraId, m.clone())).collect();
    let rig = if nc > 1 {
        let ex = spec.cameras.iter().enumerate().map(|(c, (_, e))| (c as CameraId, *e)).collect();
        Some(RigCalibration::new(0, ex).map_err(|e| HarnessError::Usage(e.to_string()))?)
    } else {
        None
    };
    let mut truth = BTreeMap::new();
    let mut initial = BTreeMap::new();
    for k in 0..nf {
        for (c, (_, e)) in spec.cameras.iter().enumerate() {
            let id = spec.frame_id(k, c);
            truth.insert(id, e.compose(&vehicle_truth[k]));
            initial.insert(id, e.compose(&vehicle_initial[k]));
        }
    }

    // landmarks in a band beside the path, redrawn until well observed
    let along = if spec.shape.closed() { 1.0 } else { 1.0 + spec.max_depth / spec.length };
    let min_angle = spec.min_parallax_deg.to_radians();
    let frame_list: Vec<(FrameId, usize, usize)> = (0..nf).flat_map(|k| (0..nc).map(move |c| (k, c))).map(|(k, c)| (spec.frame_id(k, c), k, c)).collect();
    let visible_in = |x: &Vector3<f64>| -> Vec<(FrameId, usize, Vector2<f64>)> {
        frame_list
            .iter()
            .filter_map(|&(id, k, c)| {
                let pose = &truth[&id];
                let depth = pose.transform_point(x).z;
                if !(0.3..=spec.max_depth).contains(&depth) {
                    return None;
                }
                let cam = &spec.cameras[c].0;
                let px = cam.project(pose, x).ok()?;
                cam.contains(&px).then_some((id, k, px))
            })
            .collect()
    };
    let mut landmarks = Vec::with_capacity(spec.landmarks);
    let mut visibility = Vec::with_capacity(spec.landmarks);
    let mut attempts = 0usize;
    while landmarks.len() < spec.landmarks && attempts < spec.landmarks * 200 {
        attempts += 1;
        let u = rng.random_range(0.0..along);
        let base = path.point(u);
        let t = path.tangent(u);
        let n = Vector3::y().cross(&t).normalize();
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x = base
            + t * rng.random_range(-2.0..2.0)
            + n * (side * rng.random_range(spec.lateral.0..=spec.lateral.1))
            + Vector3::y() * rng.random_range(spec.height.0..=spec.height.1);
        let vis = visible_in(&x);
        if vis.len() < 2 {
            continue;
        }
        let mut best = 0.0f64;
        for (i, a) in vis.iter().enumerate() {
            for b in &vis[i + 1..] {
                if a.1.abs_diff(b.1) <= spec.match_window {
                    let ra = x - truth[&a.0].center();
                    let rb = x - truth[&b.0].center();
                    best = best.max(ra.angle(&rb));
                }
            }
        }
        if best < min_angle {
            continue;
        }
        landmarks.push(x);
        visibility.push(vis);
    }
    if landmarks.len() < spec.landmarks {
        log::warn!("placed {} of {} landmarks", landmarks.len(), spec.landmarks);
    }

    let dim = spec.descriptor_dim;
    let landmark_descriptors: Vec<Vec<f64>> = (0..landmarks.len())
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect()
        })
        .collect();

    // observations per frame, ordered by landmark id
    let mut per_frame: BTreeMap<FrameId, Vec<(usize, Vector2<f64>)>> = truth.keys().map(|&id| (id, Vec::new())).collect();
    for (l, vis) in visibility.iter().enumerate() {
        for (id, _, px) in vis {
            per_frame.get_mut(id).expect("known frame").push((l, *px));
        }
    }
    let mut features = BTreeMap::new();
    let mut feature_landmarks = BTreeMap::new();
    let mut exact_pixels = BTreeMap::new();
    for (&id, obs) in &per_frame {
        let mut kps = Vec::with_capacity(obs.len());
        let mut desc = Vec::with_capacity(obs.len() * dim);
        for (l, px) in obs {
            let noisy = if spec.noise.pixel_sigma > 0.0 {
                px + Vector2::new(gaussian(&mut rng), gaussian(&mut rng)) * spec.noise.pixel_sigma
            } else {
                *px
            };
            kps.push(Keypoint::new(noisy.x, noisy.y));
            for v in &landmark_descriptors[*l] {
                desc.push(v + gaussian(&mut rng) * spec.descriptor_sigma);
            }
        }
        let fs = FeatureSet::new(id, kps, dim, desc).map_err(|e| HarnessError::Numerical(e.to_string()))?;
        features.insert(id, fs);
        feature_landmarks.insert(id, obs.iter().map(|o| o.0).collect::<Vec<_>>());
        exact_pixels.insert(id, obs.iter().map(|o| o.1).collect::<Vec<_>>());
    }

    // ground-truth matches within the window
    let capture = |id: FrameId| id as usize / nc;
    let ids: Vec<FrameId> = truth.keys().copied().collect();
    let mut matches: MatchTable = BTreeMap::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            if capture(a).abs_diff(capture(b)) > spec.match_window {
                continue;
            }
            let lb: BTreeMap<usize, usize> = feature_landmarks[&b].iter().enumerate().map(|(j, &l)| (l, j)).collect();
            let (fa, fb) = (&features[&a], &features[&b]);
            let list: Vec<Match> = feature_landmarks[&a]
                .iter()
                .enumerate()
                .filter_map(|(ia, l)| {
                    lb.get(l).map(|&ib| Match {
                        index_a: ia,
                        index_b: ib,
                        distance: descriptor_distance(fa.descriptor(ia), fb.descriptor(ib)),
                    })
                })
                .collect();
            if !list.is_empty() {
                matches.insert((a, b), list);
            }
        }
    }

    // outliers: exactly floor(fraction * total) matches point at a wrong feature
    let flat: Vec<((FrameId, FrameId), usize)> =
        matches.iter().flat_map(|(k, v)| (0..v.len()).map(move |i| (*k, i))).collect();
    let n_bad = (spec.noise.outlier_fraction * flat.len() as f64).floor() as usize;
    let mut corrupt = BTreeSet::new();
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, flat.len(), n_bad).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let (pair, k) = flat[i];
        let nb = features[&pair.1].len();
        if nb < 2 {
            continue;
        }
        let m = &mut matches.get_mut(&pair).expect("pair").get_mut(k).expect("match");
        let mut wrong = rng.random_range(0..nb - 1);
        if wrong >= m.index_b {
            wrong += 1;
        }
        m.index_b = wrong;
        m.distance = descriptor_distance(features[&pair.0].descriptor(m.index_a), features[&pair.1].descriptor(wrong));
        corrupt.insert((pair, k));
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        vehicle_truth,
        vehicle_initial,
        truth,
        initial,
        cameras,
        rig,
        landmarks,
        landmark_descriptors,
        features,
        feature_landmarks,
        exact_pixels,
        matches,
        corrupt,
    })
}

impl SyntheticScene {
    fn manifest_with(&self, poses: &BTreeMap<FrameId, Pose>) -> DatasetManifest {
        let nc = self.spec.num_cameras();
        DatasetManifest {
            cameras: self
                .cameras
                .iter()
                .map(|(&id, m)| CameraEntry { id, model: m.clone() })
                .collect(),
            rig: self.rig.as_ref().map(|r| RigEntry {
                reference: 0,
                extrinsics: r
                    .camera_ids()
                    .map(|c| ExtrinsicEntry {
                        camera: c,
                        pose: PoseRecord::from_pose(r.extrinsic(c).expect("rig camera")),
                    })
                    .collect(),
            }),
            keyframes: poses
                .iter()
                .map(|(&id, p)| {
                    let k = id as usize / nc;
                    KeyframeEntry {
                        frame_id: id,
                        timestamp: k as f64 * self.spec.timestep,
                        camera_id: (id as usize % nc) as CameraId,
                        image: format!("frame_{id:06}.pgm"),
                        pose: PoseRecord::from_pose(p),
                        shutter: ShutterEntry::Global,
                        sequence: Some(k),
                        prior: false,
                    }
                })
                .collect(),
        }
    }

    /// Manifest with the drifted initial poses.
    pub fn manifest(&self) -> DatasetManifest {
        self.manifest_with(&self.initial)
    }

    /// Manifest with ground-truth poses.
    pub fn truth_manifest(&self) -> DatasetManifest {
        self.manifest_with(&self.truth)
    }

    pub fn feature_list(&self) -> Vec<FeatureSet> {
        self.features.values().cloned().collect()
    }

    /// Reference-camera trajectory.
    pub fn trajectory(&self, poses: &BTreeMap<FrameId, Pose>) -> Vec<TrajectoryRecord> {
        (0..self.spec.frames)
            .filter_map(|k| {
                poses.get(&self.spec.frame_id(k, 0)).map(|p| TrajectoryRecord {
                    timestamp: k as f64 * self.spec.timestep,
                    pose: *p,
                })
            })
            .collect()
    }

    /// Whether the match at `index` of `pair` was corrupted.
    pub fn is_corrupt(&self, pair: (FrameId, FrameId), index: usize) -> bool {
        self.corrupt.contains(&(pair, index))
    }

    /// Landmarks none of whose ground-truth matches was corrupted and that
    /// appear in at least one match.
    pub fn clean_landmarks(&self) -> BTreeSet<usize> {
        let mut touched = BTreeSet::new();
        let mut dirty = BTreeSet::new();
        for (pair, list) in &self.matches {
            for (i, m) in list.iter().enumerate() {
                let la = self.feature_landmarks[&pair.0][m.index_a];
                if self.is_corrupt(*pair, i) {
                    dirty.insert(la);
                    // the wrong feature's landmark gains a spurious link
                    dirty.insert(self.feature_landmarks[&pair.1][m.index_b]);
                } else {
                    touched.insert(la);
                }
            }
        }
        touched.difference(&dirty).copied().collect()
    }

    /// Writes `manifest.json` (initial poses), `truth.json`, `features.bin`,
    /// `matches.bin`, and reference-camera `truth.tum` / `initial.tum`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        io::write_manifest(&self.manifest(), &dir.join("manifest.json"))?;
        io::write_manifest(&self.truth_manifest(), &dir.join("truth.json"))?;
        io::write_features(&self.feature_list(), &dir.join("features.bin"))?;
        io::write_matches(&self.matches, &dir.join("matches.bin"))?;
        io::write_tum(&self.trajectory(&self.truth), &dir.join("truth.tum"))?;
        io::write_tum(&self.trajectory(&self.initial), &dir.join("initial.tum"))?;
        Ok(())
    }
}
