//! Keyframe database with an inverted index and loop detection.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::features::{match_features, verify_fundamental, FeatureSet, Match, RansacConfig};
use crate::vocabulary::{similarity, BowVector, VocabularyTree};
use crate::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("frame {0} is already in the database")]
    DuplicateFrame(FrameId),
}

#[derive(Debug, Clone)]
pub struct KeyframeDatabase {
    vocabulary: Arc<VocabularyTree>,
    bows: BTreeMap<FrameId, BowVector>,
    /// word -> frames containing it, ascending.
    index: BTreeMap<u32, Vec<FrameId>>,
    features: BTreeMap<FrameId, Arc<FeatureSet>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosure {
    pub query_frame: FrameId,
    pub map_frame: FrameId,
    /// Inlier matches with `index_a` in the query frame and `index_b` in the map frame.
    pub inlier_matches: Vec<Match>,
    pub inlier_count: usize,
    pub bow_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopParams {
    pub top_n: usize,
    pub min_score: f64,
    pub min_inliers: usize,
    /// Frames whose ids differ from the query by less than this are skipped.
    pub exclusion: u32,
    pub ratio: f64,
    pub ransac: RansacConfig,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            top_n: 5,
            min_score: 0.05,
            min_inliers: 25,
            exclusion: 30,
            ratio: 0.8,
            ransac: RansacConfig::default(),
        }
    }
}

impl KeyframeDatabase {
    pub fn new(vocabulary: Arc<VocabularyTree>) -> Self {
        Self {
            vocabulary,
            bows: BTreeMap::new(),
            index: BTreeMap::new(),
            features: BTreeMap::new(),
        }
    }

    pub fn vocabulary(&self) -> &VocabularyTree {
        &self.vocabulary
    }

    pub fn add(&mut self, features: Arc<FeatureSet>) -> Result<(), RetrievalError> {
        let id = features.frame_id;
        if self.bows.contains_key(&id) {
            return Err(RetrievalError::DuplicateFrame(id));
        }
        let bow = self.vocabulary.compute_bow(&features);
        for &w in bow.keys() {
            let list = self.index.entry(w).or_default();
            let pos = list.partition_point(|&f| f < id);
            list.insert(pos, id);
        }
        self.bows.insert(id, bow);
        self.features.insert(id, features);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bows.is_empty()
    }

    pub fn bow(&self, frame: FrameId) -> Option<&BowVector> {
        self.bows.get(&frame)
    }

    pub fn features(&self, frame: FrameId) -> Option<&Arc<FeatureSet>> {
        self.features.get(&frame)
    }

    pub fn inverted_index(&self) -> &BTreeMap<u32, Vec<FrameId>> {
        &self.index
    }

    /// Frames sharing at least one word with `bow`, scored by inner product,
    /// best first with ties to the lower frame id.
    pub fn query_bow(&self, query: FrameId, bow: &BowVector, top_n: usize, exclusion: u32) -> Vec<(FrameId, f64)> {
        let mut scores: BTreeMap<FrameId, f64> = BTreeMap::new();
        for (w, v) in bow {
            let Some(frames) = self.index.get(w) else {
                continue;
            };
            for &f in frames {
                if query.abs_diff(f) < exclusion {
                    continue;
                }
                *scores.entry(f).or_default() += v * self.bows[&f][w];
            }
        }
        let mut ranked: Vec<(FrameId, f64)> = scores.into_iter().map(|(f, s)| (f, s.clamp(0.0, 1.0))).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_n);
        ranked
    }

    pub fn query_candidates(&self, features: &FeatureSet, top_n: usize, exclusion: u32) -> Vec<(FrameId, f64)> {
        let bow = self.vocabulary.compute_bow(features);
        self.query_bow(features.frame_id, &bow, top_n, exclusion)
    }

    /// Dense scoring against every stored frame; used to check the index.
    pub fn query_dense(&self, query: FrameId, bow: &BowVector, top_n: usize, exclusion: u32) -> Vec<(FrameId, f64)> {
        let mut ranked: Vec<(FrameId, f64)> = self
            .bows
            .iter()
            .filter(|(&f, _)| query.abs_diff(f) >= exclusion)
            .map(|(&f, b)| (f, similarity(bow, b)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_n);
        ranked
    }
}

/// Matches and fundamental-matrix inliers between two frames, or `None`
/// when there are too few matches or no consensus.
pub fn verified_matches(a: &FeatureSet, b: &FeatureSet, ratio: f64, ransac: &RansacConfig) -> Option<Vec<Match>> {
    let matches = match_features(a, b, ratio).ok()?;
    let (mask, _) = verify_fundamental(&matches, &a.keypoints, &b.keypoints, ransac).ok()?;
    Some(matches.into_iter().zip(mask).filter(|(_, m)| *m).map(|(x, _)| x).collect())
}

/// Retrieval, matching and geometric verification for every frame in
/// `frames`, against the frames stored in `db`. Each unordered frame pair
/// yields at most one closure, attributed to the earlier query.
pub fn detect_loops(db: &KeyframeDatabase, frames: &[Arc<FeatureSet>], params: &LoopParams) -> Vec<LoopClosure> {
    let per_query: Vec<Vec<LoopClosure>> = frames
        .par_iter()
        .map(|q| {
            let mut out = Vec::new();
            for (cand, score) in db.query_candidates(q, params.top_n, params.exclusion) {
                if score < params.min_score || cand == q.frame_id {
                    continue;
                }
                let Some(other) = db.features(cand) else {
                    continue;
                };
                let Some(inliers) = verified_matches(q, other, params.ratio, &params.ransac) else {
                    continue;
                };
                if inliers.len() >= params.min_inliers {
                    out.push(LoopClosure {
                        query_frame: q.frame_id,
                        map_frame: cand,
                        inlier_count: inliers.len(),
                        inlier_matches: inliers,
                        bow_score: score,
                    });
                }
            }
            out
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut closures = Vec::new();
    for c in per_query.into_iter().flatten() {
        let key = (c.query_frame.min(c.map_frame), c.query_frame.max(c.map_frame));
        if seen.insert(key) {
            closures.push(c);
        }
    }
    closures
}
