// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frame-to-frame association of faces into per-participant tracks.
//!
//! Meeting layouts are mostly static grids, so a frame whose faces all line
//! up one-to-one with the previous positions is attached by IOU alone. Any
//! disagreement (grid reshuffle, someone joining or leaving) sends the whole
//! frame to an [`IdentityMatcher`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

pub const EMBEDDING_DIM: usize = 128;
pub const EXPRESSION_DIM: usize = 7;
pub const DEFAULT_TRACK_IOU: f64 = 0.5;
pub const DEFAULT_STALENESS_HORIZON: u64 = 30;
pub const DEFAULT_MATCH_DISTANCE: f64 = 0.6;

/// The seven canonical facial expressions, in the fixed order used for
/// expression vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionLabel {
    Happiness,
    Anger,
    Sadness,
    Disgust,
    Surprise,
    Fear,
    Neutral,
}

impl ExpressionLabel {
    pub const ALL: [ExpressionLabel; EXPRESSION_DIM] = [
        ExpressionLabel::Happiness,
        ExpressionLabel::Anger,
        ExpressionLabel::Sadness,
        ExpressionLabel::Disgust,
        ExpressionLabel::Surprise,
        ExpressionLabel::Fear,
        ExpressionLabel::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Happiness => "happiness",
            Self::Anger => "anger",
            Self::Sadness => "sadness",
            Self::Disgust => "disgust",
            Self::Surprise => "surprise",
            Self::Fear => "fear",
            Self::Neutral => "neutral",
        }
    }

    /// Case-insensitive lookup by name.
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(name))
    }

    /// Dominant category of an expression vector; ties go to the category
    /// listed first.
    pub fn argmax(vector: &[f64]) -> Option<Self> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in vector.iter().enumerate().take(EXPRESSION_DIM) {
            if !v.is_finite() {
                continue;
            }
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.and_then(|(i, _)| Self::from_index(i))
    }
}

/// Participant identifier, stable for the lifetime of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u32);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// One face in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub frame_index: u64,
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_label: Option<ExpressionLabel>,
}

impl FaceObservation {
    pub fn new(frame_index: u64, bbox: BoundingBox) -> Self {
        Self {
            frame_index,
            bbox,
            embedding: None,
            expression: None,
            expression_label: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn with_expression(mut self, expression: Vec<f64>) -> Self {
        self.expression = Some(expression);
        self
    }

    pub fn with_label(mut self, label: ExpressionLabel) -> Self {
        self.expression_label = Some(label);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: TrackId,
    /// Strictly increasing in `frame_index`; never empty.
    pub observations: Vec<FaceObservation>,
}

impl Track {
    fn start(id: TrackId, first: FaceObservation) -> Self {
        Self {
            id,
            observations: vec![first],
        }
    }

    pub fn last(&self) -> &FaceObservation {
        self.observations.last().expect("tracks are never empty")
    }

    pub fn last_frame(&self) -> u64 {
        self.last().frame_index
    }

    /// Most recent embedding carried by this track, if any.
    pub fn last_embedding(&self) -> Option<&[f64]> {
        self.observations
            .iter()
            .rev()
            .find_map(|o| o.embedding.as_deref())
    }
}

/// Fallback identity association used when IOU alone cannot attach a frame.
pub trait IdentityMatcher {
    /// Returns the id of one of `candidates`, or `None` for an unknown face.
    fn match_face(&mut self, query: &FaceObservation, candidates: &[&Track]) -> Option<TrackId>;
}

/// Nearest-neighbour matching on the last known embedding of each track.
#[derive(Clone, Debug)]
pub struct EmbeddingMatcher {
    distance_threshold: f64,
}

impl EmbeddingMatcher {
    pub fn distance_threshold(&self) -> f64 {
        self.distance_threshold
    }
}

pub fn default_matcher(distance_threshold: f64) -> Result<EmbeddingMatcher> {
    if !(distance_threshold.is_finite() && distance_threshold > 0.0) {
        return Err(Error::config(format!(
            "matcher distance threshold must be positive, got {distance_threshold}"
        )));
    }
    Ok(EmbeddingMatcher { distance_threshold })
}

impl IdentityMatcher for EmbeddingMatcher {
    fn match_face(&mut self, query: &FaceObservation, candidates: &[&Track]) -> Option<TrackId> {
        let q = query.embedding.as_deref()?;
        let mut best: Option<(TrackId, f64)> = None;
        for track in candidates {
            let Some(e) = track.last_embedding() else {
                continue;
            };
            if e.len() != q.len() {
                continue;
            }
            let d = euclidean(q, e);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((track.id, d));
            }
        }
        best.filter(|&(_, d)| d < self.distance_threshold)
            .map(|(id, _)| id)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub iou_threshold: f64,
    /// Tracks unseen for more than this many frames leave the active set.
    pub staleness_horizon: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_TRACK_IOU,
            staleness_horizon: DEFAULT_STALENESS_HORIZON,
        }
    }
}

/// What happened to one frame.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameAssociation {
    pub used_matcher: bool,
    pub extended: Vec<TrackId>,
    pub created: Vec<TrackId>,
}

/// Association state for one video. Frames must be pushed in order.
#[derive(Debug)]
pub struct Tracker {
    config: TrackerConfig,
    active: Vec<Track>,
    retired: Vec<Track>,
    next_id: u32,
    last_frame: Option<u64>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            active: Vec::new(),
            retired: Vec::new(),
            next_id: 0,
            last_frame: None,
        }
    }

    pub fn active(&self) -> &[Track] {
        &self.active
    }

    pub fn track_count(&self) -> usize {
        self.active.len() + self.retired.len()
    }

    /// All tracks seen so far, ordered by id.
    pub fn finish(mut self) -> Vec<Track> {
        self.retired.append(&mut self.active);
        self.retired.sort_by_key(|t| t.id);
        self.retired
    }

    /// Attach the faces of one frame to the active tracks.
    pub fn associate_frame(
        &mut self,
        faces: Vec<FaceObservation>,
        matcher: &mut dyn IdentityMatcher,
    ) -> Result<FrameAssociation> {
        let Some(frame) = faces.first().map(|f| f.frame_index) else {
            return Ok(FrameAssociation::default());
        };
        if faces.iter().any(|f| f.frame_index != frame) {
            return Err(Error::invalid_input(
                "faces passed to one association step span several frames",
            ));
        }
        if self.last_frame.is_some_and(|last| frame <= last) {
            return Err(Error::invalid_input(format!(
                "frame {frame} does not advance past frame {}",
                self.last_frame.unwrap_or_default()
            )));
        }
        self.last_frame = Some(frame);
        self.retire_stale(frame);

        let mut result = FrameAssociation::default();
        if let Some(assignment) = self.iou_assignment(&faces) {
            for (face, track_idx) in faces.into_iter().zip(assignment) {
                result.extended.push(self.active[track_idx].id);
                self.active[track_idx].observations.push(face);
            }
            return Ok(result);
        }

        let mut claimed = vec![false; self.active.len()];
        let mut updates: Vec<(Option<usize>, FaceObservation)> = Vec::with_capacity(faces.len());
        for face in faces {
            let candidates: Vec<&Track> = self
                .active
                .iter()
                .zip(&claimed)
                .filter(|(_, c)| !**c)
                .map(|(t, _)| t)
                .collect();
            let hit = if candidates.is_empty() {
                None
            } else {
                result.used_matcher = true;
                matcher
                    .match_face(&face, &candidates)
                    .and_then(|id| self.active.iter().position(|t| t.id == id))
                    .filter(|&idx| !claimed[idx])
            };
            if let Some(idx) = hit {
                claimed[idx] = true;
            }
            updates.push((hit, face));
        }
        for (hit, face) in updates {
            match hit {
                Some(idx) => {
                    result.extended.push(self.active[idx].id);
                    self.active[idx].observations.push(face);
                }
                None => {
                    let id = TrackId(self.next_id);
                    self.next_id += 1;
                    result.created.push(id);
                    self.active.push(Track::start(id, face));
                }
            }
        }
        Ok(result)
    }

    fn retire_stale(&mut self, frame: u64) {
        let horizon = self.config.staleness_horizon;
        let (keep, gone): (Vec<Track>, Vec<Track>) = std::mem::take(&mut self.active)
            .into_iter()
            .partition(|t| frame - t.last_frame() <= horizon);
        self.active = keep;
        self.retired.extend(gone);
    }

    /// A perfect one-to-one matching of faces to active tracks in which every
    /// pair exceeds the IOU threshold, if one exists.
    fn iou_assignment(&self, faces: &[FaceObservation]) -> Option<Vec<usize>> {
        if faces.len() != self.active.len() {
            return None;
        }
        let threshold = self.config.iou_threshold;
        let edges: Vec<Vec<usize>> = faces
            .iter()
            .map(|f| {
                let mut e: Vec<(usize, f64)> = self
                    .active
                    .iter()
                    .enumerate()
                    .map(|(j, t)| (j, iou(&f.bbox, &t.last().bbox)))
                    .filter(|&(_, v)| v > threshold)
                    .collect();
                e.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                e.into_iter().map(|(j, _)| j).collect()
            })
            .collect();
        if edges.iter().any(Vec::is_empty) {
            return None;
        }

        let mut track_owner: Vec<Option<usize>> = vec![None; self.active.len()];
        for face in 0..faces.len() {
            let mut seen = vec![false; self.active.len()];
            if !augment(face, &edges, &mut track_owner, &mut seen) {
                return None;
            }
        }
        let mut assignment = vec![0; faces.len()];
        for (track, owner) in track_owner.iter().enumerate() {
            assignment[owner.expect("perfect matching")] = track;
        }
        Some(assignment)
    }
}

// Kuhn's augmenting path step.
fn augment(
    face: usize,
    edges: &[Vec<usize>],
    track_owner: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &track in &edges[face] {
        if seen[track] {
            continue;
        }
        seen[track] = true;
        let free = match track_owner[track] {
            None => true,
            Some(other) => augment(other, edges, track_owner, seen),
        };
        if free {
            track_owner[track] = Some(face);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    struct CountingMatcher<M> {
        inner: M,
        calls: usize,
    }

    impl<M: IdentityMatcher> IdentityMatcher for CountingMatcher<M> {
        fn match_face(&mut self, q: &FaceObservation, c: &[&Track]) -> Option<TrackId> {
            self.calls += 1;
            self.inner.match_face(q, c)
        }
    }

    struct NeverMatch;
    impl IdentityMatcher for NeverMatch {
        fn match_face(&mut self, _: &FaceObservation, _: &[&Track]) -> Option<TrackId> {
            None
        }
    }

    fn tile(col: u32, row: u32) -> BoundingBox {
        let (x, y) = (f64::from(col) * 100.0, f64::from(row) * 100.0);
        BoundingBox::new(x + 10.0, y + 10.0, x + 90.0, y + 90.0).unwrap()
    }

    fn identity_embedding(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[k] = 1.0;
        v
    }

    #[test]
    fn argmax_breaks_ties_by_category_order() {
        let mut v = vec![0.0; 7];
        v[ExpressionLabel::Neutral.index()] = 1.0;
        assert_eq!(ExpressionLabel::argmax(&v), Some(ExpressionLabel::Neutral));
        // every pair of tied positions resolves to the lower index
        for i in 0..7 {
            for j in (i + 1)..7 {
                let mut v = vec![0.0; 7];
                v[i] = 0.5;
                v[j] = 0.5;
                assert_eq!(ExpressionLabel::argmax(&v), ExpressionLabel::from_index(i));
            }
        }
    }

    #[test]
    fn default_matcher_examples() {
        let mut m = default_matcher(0.6).unwrap();
        let t0 = Track::start(
            TrackId(0),
            FaceObservation::new(0, tile(0, 0)).with_embedding(vec![0.2, 0.0]),
        );
        let t1 = Track::start(
            TrackId(1),
            FaceObservation::new(0, tile(1, 0)).with_embedding(vec![1.0, 0.0]),
        );
        let q = |e: Vec<f64>| FaceObservation::new(1, tile(0, 0)).with_embedding(e);

        assert_eq!(
            m.match_face(&q(vec![1.0, 0.0]), &[&t0, &t1]),
            Some(TrackId(1))
        );
        // distances 0.5 (t0) and 0.3 (t1)
        assert_eq!(
            m.match_face(&q(vec![0.7, 0.0]), &[&t0, &t1]),
            Some(TrackId(1))
        );
        assert_eq!(m.match_face(&q(vec![0.5, 5.0]), &[&t0, &t1]), None);
        assert_eq!(
            m.match_face(&FaceObservation::new(1, tile(0, 0)), &[&t0, &t1]),
            None
        );
        assert!(default_matcher(0.0).is_err());
    }

    #[test]
    fn static_grid_never_calls_matcher() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let mut matcher = CountingMatcher {
            inner: NeverMatch,
            calls: 0,
        };
        for frame in 0..50u64 {
            let faces = (0..4)
                .map(|k| FaceObservation::new(frame, tile(k % 2, k / 2)))
                .collect();
            tracker.associate_frame(faces, &mut matcher).unwrap();
        }
        assert_eq!(matcher.calls, 0);
        let tracks = tracker.finish();
        assert_eq!(tracks.len(), 4);
        assert!(tracks.iter().all(|t| t.observations.len() == 50));
    }

    #[test]
    fn empty_frame_leaves_tracks_unchanged() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let mut m = NeverMatch;
        tracker
            .associate_frame(vec![FaceObservation::new(0, tile(0, 0))], &mut m)
            .unwrap();
        let before = tracker.active().to_vec();
        let r = tracker.associate_frame(Vec::new(), &mut m).unwrap();
        assert_eq!(r, FrameAssociation::default());
        assert_eq!(tracker.active(), &before[..]);
    }

    #[test]
    fn mixed_frames_rejected() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let faces = vec![
            FaceObservation::new(0, tile(0, 0)),
            FaceObservation::new(1, tile(1, 0)),
        ];
        assert!(tracker.associate_frame(faces, &mut NeverMatch).is_err());
        tracker
            .associate_frame(vec![FaceObservation::new(3, tile(0, 0))], &mut NeverMatch)
            .unwrap();
        assert!(tracker
            .associate_frame(vec![FaceObservation::new(3, tile(0, 0))], &mut NeverMatch)
            .is_err());
    }

    #[test]
    fn reshuffled_grid_reattached_by_embedding() {
        // four identities on unit axes: inter-identity distance sqrt(2), intra noise 0.01
        let mut tracker = Tracker::new(TrackerConfig::default());
        let mut matcher = CountingMatcher {
            inner: default_matcher(0.6).unwrap(),
            calls: 0,
        };
        let layout0 = [tile(0, 0), tile(1, 0), tile(0, 1), tile(1, 1)];
        let faces = (0..4)
            .map(|k| FaceObservation::new(0, layout0[k]).with_embedding(identity_embedding(k)))
            .collect();
        tracker.associate_frame(faces, &mut matcher).unwrap();
        let ids: Vec<TrackId> = tracker.active().iter().map(|t| t.id).collect();

        // the 2x2 grid becomes one shuffled row; every old/new IOU is below 0.5
        let layout1: Vec<BoundingBox> = (0..4)
            .map(|k| {
                let x = 50.0 + 100.0 * k as f64;
                BoundingBox::new(x, 300.0, x + 80.0, 380.0).unwrap()
            })
            .collect();
        let perm = [2usize, 3, 1, 0];
        let faces = (0..4)
            .map(|k| {
                let mut e = identity_embedding(k);
                e[100 + k] = 0.01;
                FaceObservation::new(1, layout1[perm[k]]).with_embedding(e)
            })
            .collect();
        let r = tracker.associate_frame(faces, &mut matcher).unwrap();
        assert!(r.used_matcher);
        assert!(r.created.is_empty());
        assert_eq!(matcher.calls, 4);

        // exhaustive nearest-neighbour check: identity k stays on track ids[k]
        for (k, id) in ids.iter().enumerate() {
            let track = tracker.active().iter().find(|t| t.id == *id).unwrap();
            assert_eq!(track.observations.len(), 2);
            assert_eq!(track.last().bbox, layout1[perm[k]]);
        }
    }

    #[test]
    fn matcher_failure_opens_new_track_and_count_never_drops() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let mut m = NeverMatch;
        tracker
            .associate_frame(vec![FaceObservation::new(0, tile(0, 0))], &mut m)
            .unwrap();
        // a second face appears: counts differ, matcher path, both unmatched
        let r = tracker
            .associate_frame(
                vec![
                    FaceObservation::new(1, tile(0, 0)),
                    FaceObservation::new(1, tile(1, 0)),
                ],
                &mut m,
            )
            .unwrap();
        assert!(r.used_matcher);
        assert_eq!(r.created.len(), 2);
        assert_eq!(tracker.track_count(), 3);
    }

    #[test]
    fn stale_tracks_leave_active_set() {
        let mut tracker = Tracker::new(TrackerConfig {
            staleness_horizon: 5,
            ..TrackerConfig::default()
        });
        let mut m = NeverMatch;
        tracker
            .associate_frame(vec![FaceObservation::new(0, tile(0, 0))], &mut m)
            .unwrap();
        tracker
            .associate_frame(vec![FaceObservation::new(5, tile(0, 0))], &mut m)
            .unwrap();
        assert_eq!(tracker.track_count(), 1);
        tracker
            .associate_frame(vec![FaceObservation::new(11, tile(0, 0))], &mut m)
            .unwrap();
        assert_eq!(tracker.active().len(), 1);
        assert_eq!(tracker.track_count(), 2);
    }
}
