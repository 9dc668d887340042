//! Stage functions shared by the CLI and the tests. Each stage consumes and
//! produces plain in-memory values that the io module can persist, so a run
//! split across several invocations reproduces a single orchestrated run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::HarnessError;
use crate::features::{extract_features, ExtractConfig, FeatureSet, GrayImage, Match, RansacConfig};
use crate::geometry::Pose;
use crate::io::{self, DatasetManifest, MatchTable};
use crate::mapping::{
    bundle_adjust, build_tracks, iterative_map, BaMode, MapFrame, MappingConfig, Origin, RoundStats, SparseMap, Stage,
    TriangulationMethod,
};
use crate::posegraph::{build_pose_graph, Keyframe, LoopEdge, NodeKind, PoseGraph};
use crate::relpose::{estimate_stereo_relative_pose, estimate_translation_scale, two_view_geometry, TwoViewParams, View};
use crate::retrieval::{detect_loops, verified_matches, KeyframeDatabase, LoopClosure, LoopParams};
use crate::solver::{RobustLoss, SolverOptions, SolverReport};
use crate::viewgraph::{pairs_by_radius, pairs_from_pose_graph, ViewGraph};
use crate::vocabulary::VocabularyTree;
use crate::{CameraId, FrameId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewGraphMode {
    PoseGraph,
    Radius,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub extract: ExtractConfig,
    pub match_ratio: f64,
    pub match_ransac: RansacConfig,
    /// Pairs with fewer verified matches are dropped.
    pub min_pair_matches: usize,
    pub vocab_branching: usize,
    pub vocab_depth: usize,
    /// Descriptors used for vocabulary training, taken at a fixed stride.
    pub vocab_max_descriptors: usize,
    pub vocab_seed: u64,
    pub loops: LoopParams,
    pub relpose: TwoViewParams,
    /// Temporal stereo partners are searched this many captures away.
    pub loop_partner_offset: usize,
    /// Radians; smaller angles between the left-map direction and the
    /// partner baseline are rejected.
    pub loop_min_triangle_angle: f64,
    /// Loop translations longer than this many partner baselines are rejected.
    pub loop_max_scale_ratio: f64,
    pub sequential_k: usize,
    pub node_kind: NodeKind,
    pub viewgraph: ViewGraphMode,
    pub radius_max_dist: f64,
    /// Radians.
    pub radius_max_angle: f64,
    pub mapping: MappingConfig,
    pub posegraph_solver: SolverOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            extract: ExtractConfig::default(),
            match_ratio: 0.8,
            match_ransac: RansacConfig::default(),
            min_pair_matches: 15,
            vocab_branching: 8,
            vocab_depth: 3,
            vocab_max_descriptors: 50_000,
            vocab_seed: 0,
            loops: LoopParams::default(),
            relpose: TwoViewParams::default(),
            loop_partner_offset: 3,
            loop_min_triangle_angle: 5f64.to_radians(),
            loop_max_scale_ratio: 50.0,
            sequential_k: 3,
            node_kind: NodeKind::CameraFrame,
            viewgraph: ViewGraphMode::PoseGraph,
            radius_max_dist: 20.0,
            radius_max_angle: 90f64.to_radians(),
            mapping: MappingConfig::default(),
            posegraph_solver: SolverOptions::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Usage(format!("invalid value '{value}' for config key '{key}'")))
}

impl PipelineConfig {
    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let m = &mut self.mapping;
        match key {
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.vocab_seed = s;
                m.seed = s;
                self.match_ransac.seed = s;
                self.loops.ransac.seed = s;
                self.relpose.ransac.seed = s;
            }
            "extract.max_features" => self.extract.max_features = parse(key, value)?,
            "extract.threshold" => self.extract.threshold = parse(key, value)?,
            "extract.nms_radius" => self.extract.nms_radius = parse(key, value)?,
            "extract.patch_size" => self.extract.patch_size = parse(key, value)?,
            "match.ratio" => self.match_ratio = parse(key, value)?,
            "match.ransac_px" => self.match_ransac.threshold_px = parse(key, value)?,
            "match.min_matches" => self.min_pair_matches = parse(key, value)?,
            "vocab.branching" => self.vocab_branching = parse(key, value)?,
            "vocab.depth" => self.vocab_depth = parse(key, value)?,
            "vocab.max_descriptors" => self.vocab_max_descriptors = parse(key, value)?,
            "loop.top_n" => self.loops.top_n = parse(key, value)?,
            "loop.min_score" => self.loops.min_score = parse(key, value)?,
            "loop.min_inliers" => self.loops.min_inliers = parse(key, value)?,
            "loop.exclusion" => self.loops.exclusion = parse(key, value)?,
            "loop.ratio" => self.loops.ratio = parse(key, value)?,
            "relpose.min_parallax_deg" => self.relpose.min_parallax_deg = parse(key, value)?,
            "loop.partner_offset" => self.loop_partner_offset = parse(key, value)?,
            "loop.max_scale_ratio" => self.loop_max_scale_ratio = parse(key, value)?,
            "loop.min_triangle_deg" => self.loop_min_triangle_angle = parse::<f64>(key, value)?.to_radians(),
            "posegraph.k" => self.sequential_k = parse(key, value)?,
            "posegraph.nodes" => {
                self.node_kind = match value {
                    "camera" => NodeKind::CameraFrame,
                    "vehicle" => NodeKind::VehicleRig,
                    _ => return Err(HarnessError::Usage(format!("posegraph.nodes must be camera or vehicle, got '{value}'"))),
                }
            }
            "posegraph.max_iters" => self.posegraph_solver.max_iters = parse(key, value)?,
            "viewgraph.mode" => {
                self.viewgraph = match value {
                    "posegraph" => ViewGraphMode::PoseGraph,
                    "radius" => ViewGraphMode::Radius,
                    _ => return Err(HarnessError::Usage(format!("viewgraph.mode must be posegraph or radius, got '{value}'"))),
                }
            }
            "viewgraph.radius" => self.radius_max_dist = parse(key, value)?,
            "viewgraph.max_angle_deg" => self.radius_max_angle = parse::<f64>(key, value)?.to_radians(),
            "map.max_outer_iters" => m.max_outer_iters = parse(key, value)?,
            "map.stage1_outlier_px" => m.stage1.outlier_px = parse(key, value)?,
            "map.stage2_outlier_px" => m.stage2.outlier_px = parse(key, value)?,
            "map.stage1_huber_px" => m.stage1.loss = RobustLoss::Huber(parse(key, value)?),
            "map.lambda_c" => {
                let v = parse(key, value)?;
                m.stage1.lambda_c = v;
                m.stage2.lambda_c = v;
            }
            "map.lambda_a" => {
                let v = parse(key, value)?;
                m.stage1.lambda_a = v;
                m.stage2.lambda_a = v;
            }
            "map.min_angle_deg" => m.min_triangulation_angle = parse::<f64>(key, value)?.to_radians(),
            "map.method" => {
                m.method = match value {
                    "dlt" => TriangulationMethod::Dlt,
                    "midpoint" => TriangulationMethod::Midpoint,
                    _ => return Err(HarnessError::Usage(format!("map.method must be dlt or midpoint, got '{value}'"))),
                }
            }
            "map.mode" => {
                m.mode = match value {
                    "pure" => BaMode::Pure,
                    "localization_fixed" => BaMode::LocalizationFixed,
                    "localization_adjust" => BaMode::LocalizationAdjust,
                    "rig_extrinsic" => BaMode::RigExtrinsic,
                    _ => return Err(HarnessError::Usage(format!("unknown map.mode '{value}'"))),
                }
            }
            "map.extrinsic_prior" => m.extrinsic_prior = parse(key, value)?,
            "solver.max_iters" => m.solver.max_iters = parse(key, value)?,
            _ => return Err(HarnessError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<(), HarnessError> {
        // the seed fans out to several fields; let explicit keys win over it
        if let Some(v) = entries.get("seed") {
            self.set("seed", v)?;
        }
        for (k, v) in entries.iter().filter(|(k, _)| k.as_str() != "seed") {
            self.set(k, v)?;
        }
        Ok(())
    }
}

/// Features for every keyframe of the manifest; image paths are relative to `base`.
pub fn extract_all(manifest: &DatasetManifest, base: &Path, config: &ExtractConfig) -> Result<Vec<FeatureSet>, HarnessError> {
    manifest
        .keyframes
        .par_iter()
        .map(|k| {
            let path = base.join(&k.image);
            if !path.exists() {
                return Err(HarnessError::Data(format!("{}: image not found", path.display())));
            }
            let img = GrayImage::load(&path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
            Ok(extract_features(k.frame_id, &img, config))
        })
        .collect()
}

/// Vocabulary over the descriptors of every frame, with idf weights.
pub fn build_vocabulary(features: &BTreeMap<FrameId, FeatureSet>, config: &PipelineConfig) -> Result<VocabularyTree, HarnessError> {
    let all: Vec<&[f64]> = features.values().flat_map(|f| f.descriptor_rows()).collect();
    let stride = all.len().div_ceil(config.vocab_max_descriptors.max(1)).max(1);
    let sample: Vec<&[f64]> = all.into_iter().step_by(stride).collect();
    let mut vocab = VocabularyTree::build(&sample, config.vocab_branching, config.vocab_depth, config.vocab_seed)?;
    vocab.compute_idf(features.values());
    Ok(vocab)
}

/// Other cameras of the frame's capture with their calibrated `T_frame^other`.
fn rig_partners(frame: &MapFrame, frames: &BTreeMap<FrameId, MapFrame>, rig: Option<&crate::RigCalibration>) -> Vec<(FrameId, Pose)> {
    let Some(rig) = rig else { return Vec::new() };
    frames
        .values()
        .filter(|f| f.sequence == frame.sequence && f.camera != frame.camera)
        .filter_map(|f| Some((f.id, rig.relative(frame.camera, f.camera)?)))
        .collect()
}

/// Same camera at nearby captures, nearest first, with `T_frame^other` from
/// the initial odometry.
fn temporal_partners(frame: &MapFrame, frames: &BTreeMap<FrameId, MapFrame>, max_offset: usize) -> Vec<(FrameId, Pose)> {
    let mut out = Vec::new();
    for d in 1..=max_offset {
        for seq in [frame.sequence.checked_add(d), frame.sequence.checked_sub(d)].into_iter().flatten() {
            if let Some(f) = frames.values().find(|f| f.sequence == seq && f.camera == frame.camera) {
                out.push((f.id, frame.pose.compose(&f.pose.inverse())));
            }
        }
    }
    out
}

/// Angle between the left-map direction and a partner baseline; the scale
/// fit solves the triangle they span and degenerates as it closes.
fn triangle_angle(dir: &nalgebra::Vector3<f64>, calib: &Pose) -> f64 {
    dir.dot(&calib.translation().normalize()).abs().min(1.0).acos()
}

/// Metric `T_query^map` for a verified closure. A rig partner gives the
/// full stereo estimate. Otherwise a nearby frame of the same camera closes
/// the scale triangle, and the rotation and direction come from the
/// two-view geometry alone: the odometry baseline is only approximately
/// known, and refining against it would bend the rotation.
fn loop_edge(
    c: &LoopClosure,
    frames: &BTreeMap<FrameId, MapFrame>,
    features: &BTreeMap<FrameId, FeatureSet>,
    cameras: &BTreeMap<CameraId, crate::CameraModel>,
    rig: Option<&crate::RigCalibration>,
    config: &PipelineConfig,
) -> Option<LoopEdge> {
    let q = frames.get(&c.query_frame)?;
    let m = frames.get(&c.map_frame)?;
    let view = |f: &MapFrame| -> Option<View> {
        Some(View {
            camera: cameras.get(&f.camera)?,
            features: features.get(&f.id)?,
        })
    };
    let (vm, vq) = (view(m)?, view(q)?);
    let lm = two_view_geometry(&vq, &vm, &config.relpose).ok()?;
    // a scale far beyond the baseline means the triangle was nearly flat after all
    let edge = |measurement: Pose, calib: &Pose| {
        let ratio = measurement.translation().norm() / calib.translation().norm();
        if ratio > config.loop_max_scale_ratio {
            log::debug!("loop {} -> {}: scale {ratio:.1} baselines rejected", q.id, m.id);
            return None;
        }
        Some(LoopEdge {
            from: q.id,
            to: m.id,
            measurement,
            inlier_count: c.inlier_count,
        })
    };

    let mut rigs: Vec<(f64, FrameId, Pose)> = rig_partners(q, frames, rig)
        .into_iter()
        .map(|(p, calib)| (triangle_angle(&lm.direction, &calib), p, calib))
        .filter(|(a, p, _)| *a >= config.loop_min_triangle_angle && *p != m.id)
        .collect();
    rigs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, p, calib) in rigs {
        let Some(vp) = frames.get(&p).and_then(view) else {
            continue;
        };
        match estimate_stereo_relative_pose(&vm, &vq, &vp, &calib, &config.relpose, &config.posegraph_solver) {
            Ok(est) => return edge(est.pose, &calib),
            Err(e) => log::debug!("loop {} -> {} with rig partner {p}: {e}", q.id, m.id),
        }
    }

    for (p, calib) in temporal_partners(q, frames, config.loop_partner_offset) {
        if p == m.id || triangle_angle(&lm.direction, &calib) < config.loop_min_triangle_angle {
            continue;
        }
        let Some(vp) = frames.get(&p).and_then(view) else {
            continue;
        };
        let Ok(mr) = two_view_geometry(&vm, &vp, &config.relpose) else {
            continue;
        };
        match estimate_translation_scale(&lm, &mr, &calib) {
            Ok((s1, _)) => return edge(Pose::from_matrix_parts(&lm.rotation, lm.direction * s1), &calib),
            Err(e) => log::debug!("loop {} -> {} with temporal partner {p}: {e}", q.id, m.id),
        }
    }
    None
}

/// Retrieval-based loop detection followed by a metric relative pose for
/// every verified closure. Closures whose pose cannot be estimated are dropped.
pub fn detect_loop_edges(
    manifest: &DatasetManifest,
    features: &BTreeMap<FrameId, FeatureSet>,
    vocab: VocabularyTree,
    config: &PipelineConfig,
) -> Result<Vec<LoopEdge>, HarnessError> {
    let mut db = KeyframeDatabase::new(Arc::new(vocab));
    let mut frames = Vec::new();
    for k in &manifest.keyframes {
        let f = features
            .get(&k.frame_id)
            .ok_or_else(|| HarnessError::Data(format!("no features for frame {}", k.frame_id)))?;
        let f = Arc::new(f.clone());
        db.add(f.clone()).map_err(|e| HarnessError::Data(e.to_string()))?;
        frames.push(f);
    }
    // the exclusion window is configured in captures; frame ids advance per camera
    let n_cameras = manifest.keyframes.iter().map(|k| k.camera_id).collect::<BTreeSet<_>>().len().max(1) as u32;
    let mut params = config.loops;
    params.exclusion = params.exclusion.saturating_mul(n_cameras);
    let closures = detect_loops(&db, &frames, &params);
    let map_frames: BTreeMap<FrameId, MapFrame> = manifest.map_frames().into_iter().map(|f| (f.id, f)).collect();
    let cameras = manifest.camera_models();
    let rig = manifest.rig_calibration()?;
    let edges: Vec<Option<LoopEdge>> = closures
        .par_iter()
        .map(|c| loop_edge(c, &map_frames, features, &cameras, rig.as_ref(), config))
        .collect();
    log::info!("loops: {} closures verified, {} with metric pose", closures.len(), edges.iter().flatten().count());
    Ok(edges.into_iter().flatten().collect())
}

pub fn loops_to_string(loops: &[LoopEdge]) -> String {
    let mut s = String::from("# from to inliers qw qx qy qz tx ty tz\n");
    for l in loops {
        let q = l.measurement.quaternion_wxyz();
        let t = l.measurement.translation_array();
        let _ = write!(s, "{} {} {}", l.from, l.to, l.inlier_count);
        for v in q.iter().chain(&t) {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn loops_from_str(text: &str) -> Result<Vec<LoopEdge>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || HarnessError::Data(format!("loops line {}: expected 10 fields", i + 1));
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|_| HarnessError::Data(format!("loops line {}: bad number '{}'", i + 1, f[j])));
        out.push(LoopEdge {
            from: f[0].parse().map_err(|_| bad())?,
            to: f[1].parse().map_err(|_| bad())?,
            inlier_count: f[2].parse().map_err(|_| bad())?,
            measurement: Pose::from_wxyz([num(3)?, num(4)?, num(5)?, num(6)?], [num(7)?, num(8)?, num(9)?]),
        });
    }
    Ok(out)
}

pub fn write_loops(loops: &[LoopEdge], path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, loops_to_string(loops)).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

pub fn read_loops(path: &Path) -> Result<Vec<LoopEdge>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    loops_from_str(&text)
}

fn keyframes(manifest: &DatasetManifest) -> Vec<Keyframe> {
    manifest
        .map_frames()
        .into_iter()
        .map(|f| Keyframe {
            id: f.id,
            camera: f.camera,
            timestamp: f.timestamp,
            sequence: f.sequence,
            pose: f.pose,
        })
        .collect()
}

/// Pose graph over the manifest's initial poses and the loop edges, before optimization.
pub fn pose_graph(manifest: &DatasetManifest, loops: &[LoopEdge], config: &PipelineConfig) -> Result<PoseGraph, HarnessError> {
    let rig = manifest.rig_calibration()?;
    Ok(build_pose_graph(&keyframes(manifest), config.sequential_k, loops, rig.as_ref(), config.node_kind)?)
}

/// Optimized pose graph; `manifest` poses are the initial values.
pub fn optimize_poses(
    manifest: &DatasetManifest,
    loops: &[LoopEdge],
    config: &PipelineConfig,
) -> Result<(PoseGraph, SolverReport), HarnessError> {
    let mut graph = pose_graph(manifest, loops, config)?;
    let report = graph.optimize(&config.posegraph_solver)?;
    log::info!("posegraph: cost {:e} -> {:e} in {} iterations", report.initial_cost, report.final_cost, report.iterations);
    Ok((graph, report))
}

/// Copy of `manifest` with the keyframe poses replaced.
pub fn with_poses(manifest: &DatasetManifest, poses: &BTreeMap<FrameId, Pose>) -> DatasetManifest {
    let mut m = manifest.clone();
    for k in &mut m.keyframes {
        if let Some(p) = poses.get(&k.frame_id) {
            k.pose = io::PoseRecord::from_pose(p);
        }
    }
    m
}

/// Image pairs to match: the pose-graph edges, or every pair within the
/// distance and angle limits of the given poses.
pub fn select_pairs(graph: &PoseGraph, poses: &BTreeMap<FrameId, Pose>, config: &PipelineConfig) -> ViewGraph {
    match config.viewgraph {
        ViewGraphMode::PoseGraph => pairs_from_pose_graph(graph),
        ViewGraphMode::Radius => {
            let list: Vec<(FrameId, Pose)> = poses.iter().map(|(&k, &p)| (k, p)).collect();
            pairs_by_radius(&list, config.radius_max_dist, config.radius_max_angle)
        }
    }
}

/// Descriptor matching with fundamental-matrix verification on every pair.
pub fn match_pairs(pairs: &ViewGraph, features: &BTreeMap<FrameId, FeatureSet>, config: &PipelineConfig) -> Result<MatchTable, HarnessError> {
    let list: Vec<(FrameId, FrameId)> = pairs.iter().map(|(a, b, _)| (a, b)).collect();
    for (a, b) in &list {
        for f in [a, b] {
            if !features.contains_key(f) {
                return Err(HarnessError::Data(format!("no features for frame {f}")));
            }
        }
    }
    let found: Vec<Option<((FrameId, FrameId), Vec<Match>)>> = list
        .par_iter()
        .map(|&(a, b)| {
            let m = verified_matches(&features[&a], &features[&b], config.match_ratio, &config.match_ransac)?;
            (m.len() >= config.min_pair_matches).then_some(((a, b), m))
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}

/// Sparse map from matches: tracks, then alternating triangulation and bundle adjustment.
pub fn build_map(
    manifest: &DatasetManifest,
    matches: &MatchTable,
    features: &BTreeMap<FrameId, FeatureSet>,
    config: &MappingConfig,
) -> Result<(SparseMap, Vec<RoundStats>), HarnessError> {
    let mut map = SparseMap::new(manifest.camera_models(), manifest.rig_calibration()?, manifest.map_frames());
    map.tracks = build_tracks(matches, features);
    log::info!("map: {} keyframes, {} tracks", map.keyframes.len(), map.tracks.len());
    let rounds = iterative_map(&mut map, config)?;
    Ok((map, rounds))
}

/// Every intermediate product of a full run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub vocabulary: VocabularyTree,
    pub loops: Vec<LoopEdge>,
    pub graph: PoseGraph,
    pub optimized: DatasetManifest,
    pub pairs: ViewGraph,
    pub matches: MatchTable,
    pub map: SparseMap,
    pub rounds: Vec<RoundStats>,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(&'static str, f64)>,
}

/// Vocabulary, loops, pose graph, view graph, matching and mapping in sequence.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    features: &BTreeMap<FrameId, FeatureSet>,
    config: &PipelineConfig,
) -> Result<PipelineOutput, HarnessError> {
    manifest.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, f64)>| {
        let t = clock.elapsed().as_secs_f64();
        log::info!("stage {name}: {t:.3} s");
        timings.push((name, t));
        clock = Instant::now();
    };
    let vocabulary = build_vocabulary(features, config)?;
    lap("build-vocab", &mut timings);
    let loops = detect_loop_edges(manifest, features, vocabulary.clone(), config)?;
    lap("detect-loops", &mut timings);
    let (graph, _) = optimize_poses(manifest, &loops, config)?;
    let optimized = with_poses(manifest, &graph.camera_poses());
    lap("optimize-posegraph", &mut timings);
    // downstream stages see the poses exactly as a reader of `optimized` would
    let poses = optimized.map_frames().into_iter().map(|f| (f.id, f.pose)).collect();
    let pairs = select_pairs(&graph, &poses, config);
    lap("build-viewgraph", &mut timings);
    let matches = match_pairs(&pairs, features, config)?;
    lap("match", &mut timings);
    let (map, rounds) = build_map(&optimized, &matches, features, &config.mapping)?;
    lap("map", &mut timings);
    Ok(PipelineOutput {
        vocabulary,
        loops,
        graph,
        optimized,
        pairs,
        matches,
        map,
        rounds,
        timings,
    })
}

/// Registers new keyframes against a prior map. Prior tracks are kept as
/// chained matches, new pairs come from the radius rule over all poses
/// (at least one frame new), and the map is rebuilt with the configured
/// localization mode.
pub fn localize(
    prior: &SparseMap,
    new_frames: &DatasetManifest,
    features: &BTreeMap<FrameId, FeatureSet>,
    config: &PipelineConfig,
) -> Result<(SparseMap, Vec<RoundStats>), HarnessError> {
    new_frames.validate()?;
    let mut frames: Vec<MapFrame> = prior
        .keyframes
        .values()
        .cloned()
        .map(|mut f| {
            f.origin = Origin::Prior;
            f
        })
        .collect();
    let prior_ids: BTreeSet<FrameId> = prior.keyframes.keys().copied().collect();
    for f in new_frames.map_frames() {
        if prior_ids.contains(&f.id) {
            return Err(HarnessError::Data(format!("frame {} is already in the prior map", f.id)));
        }
        frames.push(MapFrame { origin: Origin::New, ..f });
    }
    let mut cameras = prior.cameras.clone();
    for (id, c) in new_frames.camera_models() {
        cameras.entry(id).or_insert(c);
    }
    let rig = prior.rig.clone().or(new_frames.rig_calibration()?);

    let poses: Vec<(FrameId, Pose)> = frames.iter().map(|f| (f.id, f.pose)).collect();
    let mut pairs = ViewGraph::new();
    for (a, b, p) in pairs_by_radius(&poses, config.radius_max_dist, config.radius_max_angle).iter() {
        if !(prior_ids.contains(&a) && prior_ids.contains(&b)) {
            pairs.insert(a, b, p);
        }
    }
    let mut matches = match_pairs(&pairs, features, config)?;
    // prior tracks as star-shaped match chains from their first observation
    for t in &prior.tracks {
        let Some(first) = t.observations.first() else { continue };
        for o in &t.observations[1..] {
            matches.entry((first.frame, o.frame)).or_default().push(Match {
                index_a: first.feature,
                index_b: o.feature,
                distance: 0.0,
            });
        }
    }

    let mut map = SparseMap::new(cameras, rig, frames);
    map.fixed = prior_ids.iter().take(1).copied().collect();
    map.tracks = build_tracks(&matches, features);
    let mut mapping = config.mapping;
    if mapping.mode == BaMode::Pure {
        mapping.mode = BaMode::LocalizationFixed;
    }
    let rounds = iterative_map(&mut map, &mapping)?;
    Ok((map, rounds))
}

/// One stage-two bundle adjustment in rig mode, updating the extrinsics.
pub fn refine_extrinsics(map: &mut SparseMap, config: &MappingConfig) -> Result<SolverReport, HarnessError> {
    if map.rig.is_none() {
        return Err(HarnessError::Data("map has no rig calibration".into()));
    }
    Ok(bundle_adjust(map, config, Stage::Two, BaMode::RigExtrinsic)?.solver)
}
