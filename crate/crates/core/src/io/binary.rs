//! Checksummed little-endian container for maps, features, matches and
//! vocabularies.
//!
//! Layout: magic `TRJMBIN\0`, `u32` version, `u32` kind, `u32` section
//! count, then a table of `(tag [u8; 4], offset u64, length u64)` entries,
//! the section payloads, and a CRC32 of everything before it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::IoError;
use crate::features::{FeatureSet, Keypoint, Match};
use crate::geometry::{CameraKind, CameraModel, Pose, RigCalibration};
use crate::mapping::{Landmark, MapFrame, Observation, Origin, Shutter, SparseMap, Track, TrackStatus};
use crate::vocabulary::{ClusteringFeature, VocabNode, VocabularyTree};
use crate::FrameId;

pub const MAGIC: &[u8; 8] = b"TRJMBIN\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Map = 1,
    Features = 2,
    Matches = 3,
    Vocabulary = 4,
}

const HEADER: usize = 8 + 4 + 4 + 4;
const ENTRY: usize = 4 + 8 + 8;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn pose(&mut self, p: &Pose) {
        for x in p.to_params() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

fn malformed(what: &str) -> IoError {
    IoError::InvariantViolation(format!("malformed binary section: {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// A length that must fit in what is left, at `unit` bytes per element.
    fn len(&mut self, unit: usize) -> Result<usize, IoError> {
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(unit.max(1) as u64) > left {
            return Err(malformed("length exceeds section"));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, IoError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn pose(&mut self) -> Result<Pose, IoError> {
        let mut p = [0.0; 7];
        for v in p.iter_mut() {
            *v = self.f64()?;
        }
        Ok(Pose::from_params(&p))
    }
    fn done(&self) -> Result<(), IoError> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(malformed("trailing bytes"))
        }
    }
}

fn encode(kind: Kind, sections: &[(&[u8; 4], Vec<u8>)]) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(kind as u32);
    w.u32(sections.len() as u32);
    let mut offset = (HEADER + ENTRY * sections.len()) as u64;
    for (tag, body) in sections {
        w.0.extend_from_slice(*tag);
        w.u64(offset);
        w.u64(body.len() as u64);
        offset += body.len() as u64;
    }
    for (_, body) in sections {
        w.0.extend_from_slice(body);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Checks magic, checksum and version; returns the sections by tag.
fn decode(data: &[u8], kind: Kind) -> Result<BTreeMap<[u8; 4], &[u8]>, IoError> {
    if data.len() < MAGIC.len() || &data[..MAGIC.len()] != MAGIC {
        return Err(IoError::BadMagic);
    }
    if data.len() < HEADER + 4 {
        return Err(IoError::ChecksumMismatch);
    }
    let (body, crc) = data.split_at(data.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(IoError::ChecksumMismatch);
    }
    let mut r = Reader { data: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(IoError::VersionUnsupported(version));
    }
    let k = r.u32()?;
    if k != kind as u32 {
        return Err(IoError::InvariantViolation(format!("file holds kind {k}, expected {}", kind as u32)));
    }
    let n = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let off = r.u64()? as usize;
        let len = r.u64()? as usize;
        let end = off.checked_add(len).filter(|&e| e <= body.len()).ok_or_else(|| malformed("section bounds"))?;
        out.insert(tag, &body[off..end]);
    }
    Ok(out)
}

fn section<'a>(s: &BTreeMap<[u8; 4], &'a [u8]>, tag: &[u8; 4]) -> Result<Reader<'a>, IoError> {
    let data = s
        .get(tag)
        .ok_or_else(|| malformed(&format!("missing section {}", String::from_utf8_lossy(tag))))?;
    Ok(Reader { data, pos: 0 })
}

// ---- features

pub fn encode_features(sets: &[FeatureSet]) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(sets.len());
    for s in sets {
        w.u32(s.frame_id);
        w.len(s.dim);
        w.len(s.keypoints.len());
        for k in &s.keypoints {
            w.f64(k.x);
            w.f64(k.y);
            w.f64(k.response);
        }
        w.f64s(&s.descriptors);
    }
    encode(Kind::Features, &[(b"FEAT", w.0)])
}

pub fn decode_features(data: &[u8]) -> Result<Vec<FeatureSet>, IoError> {
    let s = decode(data, Kind::Features)?;
    let mut r = section(&s, b"FEAT")?;
    let n = r.len(16)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let frame_id = r.u32()?;
        let dim = r.u64()? as usize;
        let nk = r.len(24)?;
        let keypoints = (0..nk)
            .map(|_| {
                Ok(Keypoint {
                    x: r.f64()?,
                    y: r.f64()?,
                    response: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        let descriptors = r.f64s()?;
        if descriptors.len() != nk * dim {
            return Err(malformed("descriptor count"));
        }
        out.push(FeatureSet {
            frame_id,
            keypoints,
            dim,
            descriptors,
        });
    }
    r.done()?;
    Ok(out)
}

// ---- matches

pub type MatchTable = BTreeMap<(FrameId, FrameId), Vec<Match>>;

pub fn encode_matches(m: &MatchTable) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(m.len());
    for (&(a, b), ms) in m {
        w.u32(a);
        w.u32(b);
        w.len(ms.len());
        for x in ms {
            w.len(x.index_a);
            w.len(x.index_b);
            w.f64(x.distance);
        }
    }
    encode(Kind::Matches, &[(b"MTCH", w.0)])
}

pub fn decode_matches(data: &[u8]) -> Result<MatchTable, IoError> {
    let s = decode(data, Kind::Matches)?;
    let mut r = section(&s, b"MTCH")?;
    let n = r.len(16)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let key = (r.u32()?, r.u32()?);
        let k = r.len(24)?;
        let ms = (0..k)
            .map(|_| {
                Ok(Match {
                    index_a: r.u64()? as usize,
                    index_b: r.u64()? as usize,
                    distance: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        out.insert(key, ms);
    }
    r.done()?;
    Ok(out)
}

// ---- vocabulary

pub fn encode_vocabulary(v: &VocabularyTree) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(v.dim);
    w.len(v.branching);
    w.len(v.depth);
    w.len(v.nodes.len());
    for n in &v.nodes {
        w.f64s(&n.centroid);
        w.len(n.children.len());
        for &c in &n.children {
            w.len(c);
        }
        match n.word {
            Some(x) => {
                w.u8(1);
                w.u32(x);
            }
            None => w.u8(0),
        }
        w.f64(n.cf.n);
        w.f64s(&n.cf.ls);
        w.f64(n.cf.ss);
    }
    w.len(v.words.len());
    for &x in &v.words {
        w.len(x);
    }
    w.f64s(&v.idf);
    encode(Kind::Vocabulary, &[(b"VOCB", w.0)])
}

pub fn decode_vocabulary(data: &[u8]) -> Result<VocabularyTree, IoError> {
    let s = decode(data, Kind::Vocabulary)?;
    let mut r = section(&s, b"VOCB")?;
    let dim = r.u64()? as usize;
    let branching = r.u64()? as usize;
    let depth = r.u64()? as usize;
    let nn = r.len(8)?;
    let mut nodes = Vec::with_capacity(nn);
    for _ in 0..nn {
        let centroid = r.f64s()?;
        let nc = r.len(8)?;
        let children = (0..nc).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>, IoError>>()?;
        let word = match r.u8()? {
            0 => None,
            1 => Some(r.u32()?),
            _ => return Err(malformed("word flag")),
        };
        let cf = ClusteringFeature {
            n: r.f64()?,
            ls: r.f64s()?,
            ss: r.f64()?,
        };
        if children.iter().any(|&c| c >= nn) {
            return Err(malformed("child index"));
        }
        nodes.push(VocabNode {
            centroid,
            children,
            word,
            cf,
        });
    }
    let nw = r.len(8)?;
    let words = (0..nw).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>, IoError>>()?;
    let idf = r.f64s()?;
    r.done()?;
    if words.iter().any(|&x| x >= nn) {
        return Err(malformed("word node index"));
    }
    Ok(VocabularyTree {
        dim,
        branching,
        depth,
        nodes,
        words,
        idf,
    })
}

// ---- map

fn kind_code(k: CameraKind) -> u8 {
    match k {
        CameraKind::Pinhole => 0,
        CameraKind::PinholeRadial => 1,
        CameraKind::EquidistantFisheye => 2,
    }
}

pub fn encode_map(map: &SparseMap) -> Vec<u8> {
    let mut cams = Writer::default();
    cams.len(map.cameras.len());
    for (&id, c) in &map.cameras {
        cams.u32(id);
        cams.u8(kind_code(c.kind));
        for v in [c.fx, c.fy, c.cx, c.cy] {
            cams.f64(v);
        }
        cams.u32(c.width);
        cams.u32(c.height);
        cams.f64s(&c.distortion);
    }

    let mut rig = Writer::default();
    match &map.rig {
        None => rig.u8(0),
        Some(r) => {
            rig.u8(1);
            rig.u32(r.reference);
            rig.len(r.extrinsics.len());
            for (&c, p) in &r.extrinsics {
                rig.u32(c);
                rig.pose(p);
            }
        }
    }

    let mut kfs = Writer::default();
    kfs.len(map.keyframes.len());
    for k in map.keyframes.values() {
        kfs.u32(k.id);
        kfs.u32(k.camera);
        kfs.f64(k.timestamp);
        kfs.len(k.sequence);
        kfs.pose(&k.pose);
        match k.shutter {
            Shutter::Global => kfs.u8(0),
            Shutter::Rolling { exposure } => {
                kfs.u8(1);
                kfs.f64(exposure);
            }
        }
        kfs.u8(match k.origin {
            Origin::New => 0,
            Origin::Prior => 1,
        });
    }

    let mut trk = Writer::default();
    trk.len(map.tracks.len());
    for t in &map.tracks {
        trk.u8(match t.status {
            TrackStatus::Pending => 0,
            TrackStatus::Triangulated => 1,
            TrackStatus::Failed => 2,
        });
        trk.u32(t.attempts);
        trk.len(t.observations.len());
        for o in &t.observations {
            trk.u32(o.frame);
            trk.len(o.feature);
            trk.f64(o.pixel.x);
            trk.f64(o.pixel.y);
        }
    }

    let mut lms = Writer::default();
    lms.len(map.landmarks.len());
    for l in &map.landmarks {
        for v in l.position.iter() {
            lms.f64(*v);
        }
        lms.len(l.track);
        lms.len(l.inliers.len());
        for &m in &l.inliers {
            lms.u8(m as u8);
        }
    }

    let mut fixed = Writer::default();
    fixed.len(map.fixed.len());
    for &f in &map.fixed {
        fixed.u32(f);
    }

    encode(
        Kind::Map,
        &[
            (b"CAMS", cams.0),
            (b"RIG_", rig.0),
            (b"KFRM", kfs.0),
            (b"TRKS", trk.0),
            (b"LMKS", lms.0),
            (b"FIXD", fixed.0),
        ],
    )
}

pub fn decode_map(data: &[u8]) -> Result<SparseMap, IoError> {
    let s = decode(data, Kind::Map)?;

    let mut r = section(&s, b"CAMS")?;
    let mut cameras = BTreeMap::new();
    for _ in 0..r.len(4)? {
        let id = r.u32()?;
        let kind = match r.u8()? {
            0 => CameraKind::Pinhole,
            1 => CameraKind::PinholeRadial,
            2 => CameraKind::EquidistantFisheye,
            _ => return Err(malformed("camera kind")),
        };
        let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (width, height) = (r.u32()?, r.u32()?);
        let distortion = r.f64s()?;
        cameras.insert(
            id,
            CameraModel {
                kind,
                fx,
                fy,
                cx,
                cy,
                width,
                height,
                distortion,
            },
        );
    }
    r.done()?;

    let mut r = section(&s, b"RIG_")?;
    let rig = match r.u8()? {
        0 => None,
        1 => {
            let reference = r.u32()?;
            let mut ext = BTreeMap::new();
            for _ in 0..r.len(60)? {
                let c = r.u32()?;
                ext.insert(c, r.pose()?);
            }
            Some(RigCalibration::new(reference, ext).map_err(|e| IoError::InvariantViolation(e.to_string()))?)
        }
        _ => return Err(malformed("rig flag")),
    };
    r.done()?;

    let mut r = section(&s, b"KFRM")?;
    let mut keyframes = BTreeMap::new();
    for _ in 0..r.len(82)? {
        let id = r.u32()?;
        let camera = r.u32()?;
        let timestamp = r.f64()?;
        let sequence = r.u64()? as usize;
        let pose = r.pose()?;
        let shutter = match r.u8()? {
            0 => Shutter::Global,
            1 => Shutter::Rolling { exposure: r.f64()? },
            _ => return Err(malformed("shutter")),
        };
        let origin = match r.u8()? {
            0 => Origin::New,
            1 => Origin::Prior,
            _ => return Err(malformed("origin")),
        };
        keyframes.insert(
            id,
            MapFrame {
                id,
                camera,
                timestamp,
                sequence,
                pose,
                shutter,
                origin,
            },
        );
    }
    r.done()?;

    let mut r = section(&s, b"TRKS")?;
    let mut tracks = Vec::new();
    for _ in 0..r.len(13)? {
        let status = match r.u8()? {
            0 => TrackStatus::Pending,
            1 => TrackStatus::Triangulated,
            2 => TrackStatus::Failed,
            _ => return Err(malformed("track status")),
        };
        let attempts = r.u32()?;
        let mut observations = Vec::new();
        for _ in 0..r.len(28)? {
            let frame = r.u32()?;
            let feature = r.u64()? as usize;
            let pixel = Vector2::new(r.f64()?, r.f64()?);
            if !keyframes.contains_key(&frame) {
                return Err(IoError::InvariantViolation(format!("observation of unknown frame {frame}")));
            }
            observations.push(Observation { frame, feature, pixel });
        }
        tracks.push(Track {
            observations,
            status,
            attempts,
        });
    }
    r.done()?;

    let mut r = section(&s, b"LMKS")?;
    let mut landmarks = Vec::new();
    for _ in 0..r.len(40)? {
        let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let track = r.u64()? as usize;
        let n = r.len(1)?;
        let inliers = (0..n).map(|_| Ok(r.u8()? != 0)).collect::<Result<Vec<_>, IoError>>()?;
        if tracks.get(track).map(|t| t.observations.len()) != Some(n) {
            return Err(IoError::InvariantViolation(format!("landmark references invalid track {track}")));
        }
        landmarks.push(Landmark { position, track, inliers });
    }
    r.done()?;

    let mut r = section(&s, b"FIXD")?;
    let mut fixed = BTreeSet::new();
    for _ in 0..r.len(4)? {
        fixed.insert(r.u32()?);
    }
    r.done()?;

    Ok(SparseMap {
        cameras,
        rig,
        keyframes,
        tracks,
        landmarks,
        fixed,
    })
}

pub fn write_map(map: &SparseMap, path: &Path) -> Result<(), IoError> {
    super::write_bytes(path, &encode_map(map))
}

pub fn read_map(path: &Path) -> Result<SparseMap, IoError> {
    decode_map(&super::read_bytes(path)?)
}

pub fn write_features(sets: &[FeatureSet], path: &Path) -> Result<(), IoError> {
    super::write_bytes(path, &encode_features(sets))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSet>, IoError> {
    decode_features(&super::read_bytes(path)?)
}

pub fn write_matches(m: &MatchTable, path: &Path) -> Result<(), IoError> {
    super::write_bytes(path, &encode_matches(m))
}

pub fn read_matches(path: &Path) -> Result<MatchTable, IoError> {
    decode_matches(&super::read_bytes(path)?)
}

pub fn write_vocab(v: &VocabularyTree, path: &Path) -> Result<(), IoError> {
    super::write_bytes(path, &encode_vocabulary(v))
}

pub fn read_vocab(path: &Path) -> Result<VocabularyTree, IoError> {
    decode_vocabulary(&super::read_bytes(path)?)
}
