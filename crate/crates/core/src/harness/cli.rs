//! Command-line front end. Every subcommand reads and writes io-module
//! formats; diagnostics go to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::pipeline::{pose_graph, with_poses};
use super::*;
use crate::features::FeatureSet;
use crate::io::{self, TrajectoryRecord};
use crate::mapping::SparseMap;
use crate::viewgraph::ViewGraph;
use crate::FrameId;

#[derive(Parser, Debug)]
#[command(name = "trajmap", version, about = "Trajectory refinement and sparse mapping from keyframes with initial poses")]
struct Cli {
    /// Text file of `key = value` lines overriding pipeline defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportFormat {
    Tum,
    Colmap,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignArg {
    None,
    Se3,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect and describe features in the manifest's images.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match and verify features on every view-graph pair.
    Match {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        viewgraph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a vocabulary tree on all descriptors.
    BuildVocab {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve, verify and measure loop closures.
    DetectLoops {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select image pairs from the pose graph or by radius.
    BuildViewgraph {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        loops: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize the pose graph; writes the manifest with refined poses.
    OptimizePosegraph {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        loops: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a sparse map. Without --matches the whole pipeline runs.
    Map {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to `features.bin` next to the manifest.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        matches: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for intermediate products of a full run.
        #[arg(long)]
        keep: Option<PathBuf>,
    },
    /// Register new keyframes against a prior map.
    Localize {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Features of both the prior and the new frames.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rig bundle adjustment refining camera extrinsics.
    RefineExtrinsics {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a map as a TUM trajectory or COLMAP sparse text model.
    Export {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
        /// Camera whose trajectory is exported (TUM); defaults to the rig reference.
        #[arg(long)]
        camera: Option<u32>,
        /// Manifest providing image names (COLMAP).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM trajectories.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value = "se3")]
        align: AlignArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long, default_value = "circle")]
        shape: String,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path length in metres; defaults to one metre per frame.
        #[arg(long)]
        length: Option<f64>,
        /// Defaults to ten per frame.
        #[arg(long)]
        landmarks: Option<usize>,
        /// 1 (monocular) or 3 (rig).
        #[arg(long, default_value_t = 1)]
        cameras: usize,
        /// Keypoint noise in pixels.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Odometry drift per step.
        #[arg(long, default_value_t = 0.01)]
        drift: f64,
        /// Fraction of corrupted ground-truth matches.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, HarnessError> {
    let mut config = PipelineConfig::default();
    let mut entries = match &cli.config {
        Some(p) => io::read_config(p)?,
        None => BTreeMap::new(),
    };
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("--set expects key=value, got '{s}'")))?;
        entries.insert(k.trim().to_string(), v.trim().to_string());
    }
    config.apply(&entries)?;
    Ok(config)
}

fn read_features(path: &Path) -> Result<BTreeMap<FrameId, FeatureSet>, HarnessError> {
    Ok(io::read_features(path)?.into_iter().map(|f| (f.frame_id, f)).collect())
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn read_loops_opt(path: &Option<PathBuf>) -> Result<Vec<crate::posegraph::LoopEdge>, HarnessError> {
    path.as_deref().map(read_loops).transpose().map(Option::unwrap_or_default)
}

/// Keyframes of one camera as a trajectory.
fn map_trajectory(map: &SparseMap, camera: Option<u32>) -> Vec<TrajectoryRecord> {
    let cam = camera
        .or_else(|| map.rig.as_ref().map(|r| r.reference))
        .or_else(|| map.keyframes.values().map(|k| k.camera).min())
        .unwrap_or(0);
    map.keyframes
        .values()
        .filter(|k| k.camera == cam)
        .map(|k| TrajectoryRecord {
            timestamp: k.timestamp,
            pose: k.pose,
        })
        .collect()
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Extract { manifest, out } => {
            let m = io::read_manifest(&manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let sets = extract_all(&m, base, &config.extract)?;
            io::write_features(&sets, &out)?;
        }
        Command::Match { features, viewgraph, out } => {
            let f = read_features(&features)?;
            let vg = ViewGraph::from_text(&read_text(&viewgraph)?)
                .map_err(|(line, msg)| HarnessError::Data(format!("{}: line {line}: {msg}", viewgraph.display())))?;
            let matches = match_pairs(&vg, &f, &config)?;
            io::write_matches(&matches, &out)?;
        }
        Command::BuildVocab { features, out } => {
            let f = read_features(&features)?;
            io::write_vocab(&build_vocabulary(&f, &config)?, &out)?;
        }
        Command::DetectLoops {
            manifest,
            features,
            vocab,
            out,
        } => {
            let m = io::read_manifest(&manifest)?;
            let f = read_features(&features)?;
            let v = io::read_vocab(&vocab)?;
            write_loops(&detect_loop_edges(&m, &f, v, &config)?, &out)?;
        }
        Command::BuildViewgraph { manifest, loops, out } => {
            let m = io::read_manifest(&manifest)?;
            let loops = read_loops_opt(&loops)?;
            let graph = pose_graph(&m, &loops, &config)?;
            let poses = m.map_frames().into_iter().map(|f| (f.id, f.pose)).collect();
            write_text(&out, &select_pairs(&graph, &poses, &config).to_text())?;
        }
        Command::OptimizePosegraph { manifest, loops, out } => {
            let m = io::read_manifest(&manifest)?;
            let loops = read_loops_opt(&loops)?;
            let (graph, _) = optimize_poses(&m, &loops, &config)?;
            io::write_manifest(&with_poses(&m, &graph.camera_poses()), &out)?;
        }
        Command::Map {
            manifest,
            features,
            matches,
            out,
            keep,
        } => {
            let m = io::read_manifest(&manifest)?;
            let features = features.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("features.bin"));
            let f = read_features(&features)?;
            let map = match matches {
                Some(p) => build_map(&m, &io::read_matches(&p)?, &f, &config.mapping)?.0,
                None => {
                    let o = run_pipeline(&m, &f, &config)?;
                    if let Some(dir) = keep {
                        io::write_vocab(&o.vocabulary, &dir.join("vocab.bin"))?;
                        write_loops(&o.loops, &dir.join("loops.txt"))?;
                        io::write_manifest(&o.optimized, &dir.join("optimized.json"))?;
                        write_text(&dir.join("viewgraph.txt"), &o.pairs.to_text())?;
                        io::write_matches(&o.matches, &dir.join("matches.bin"))?;
                    }
                    o.map
                }
            };
            log::info!("map: {} landmarks, mean reprojection {:.4} px", map.landmarks.len(), map.mean_reprojection_error());
            io::write_map(&map, &out)?;
        }
        Command::Localize {
            map,
            manifest,
            features,
            out,
        } => {
            let prior = io::read_map(&map)?;
            let m = io::read_manifest(&manifest)?;
            let f = read_features(&features)?;
            let (result, _) = localize(&prior, &m, &f, &config)?;
            io::write_map(&result, &out)?;
        }
        Command::RefineExtrinsics { map, out } => {
            let mut m = io::read_map(&map)?;
            refine_extrinsics(&mut m, &config.mapping)?;
            io::write_map(&m, &out)?;
        }
        Command::Export {
            map,
            format,
            out,
            camera,
            manifest,
        } => {
            let m = io::read_map(&map)?;
            match format {
                ExportFormat::Tum => io::write_tum(&map_trajectory(&m, camera), &out)?,
                ExportFormat::Colmap => {
                    let names = match manifest {
                        Some(p) => io::read_manifest(&p)?.keyframes.into_iter().map(|k| (k.frame_id, k.image)).collect(),
                        None => BTreeMap::new(),
                    };
                    io::write_colmap_sparse(&m, &out, &names)?;
                }
            }
        }
        Command::Evaluate {
            estimate,
            reference,
            align,
            out,
        } => {
            let est = io::read_tum(&estimate)?;
            let reference = io::read_tum(&reference)?;
            let align = match align {
                AlignArg::None => Alignment::None,
                AlignArg::Se3 => Alignment::Se3,
            };
            let report = evaluate_ate(&est, &reference, align)?;
            log::info!("ate rmse {:.6} m over {} poses", report.rmse, report.pairs);
            write_text(&out, &report.to_text())?;
        }
        Command::Synth {
            shape,
            frames,
            seed,
            length,
            landmarks,
            cameras,
            noise,
            drift,
            outliers,
            out,
        } => {
            let shape: Shape = shape.parse().map_err(HarnessError::Usage)?;
            let cams = match cameras {
                1 => vec![(default_camera(), crate::Pose::identity())],
                3 => three_camera_rig(),
                n => return Err(HarnessError::Usage(format!("--cameras must be 1 or 3, got {n}"))),
            };
            let spec = SceneSpec {
                shape,
                frames,
                length: length.unwrap_or(frames as f64),
                landmarks: landmarks.unwrap_or(frames * 10),
                cameras: cams,
                noise: NoiseSpec {
                    pixel_sigma: noise,
                    drift,
                    outlier_fraction: outliers,
                },
                ..SceneSpec::default()
            };
            let scene = generate_scene(&spec, seed)?;
            scene.write(&out)?;
            log::info!("synth: {} keyframes, {} landmarks", scene.truth.len(), scene.landmarks.len());
        }
    }
    Ok(())
}
