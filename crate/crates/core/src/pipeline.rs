// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end run over one meeting: merge detector channels, track faces,
//! derive change signals, flag per-participant anomalies and cluster them
//! into group events.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationConfig, GroupEvent};
use crate::detectors::{
    detect_arima, detect_statistical, detect_transitions, AnomalyPoint, DetectionMethod,
    DetectorConfig,
};
use crate::error::{Error, Result};
use crate::features::{change_series, label_series, ChangeSeries, FeatureSource, LabelSeries};
use crate::geometry::{merge_frame_detailed, MergeSource, DEFAULT_MERGE_THRESHOLD};
use crate::io::{FeatureStream, FrameRecord};
use crate::tracking::{
    default_matcher, FaceObservation, TrackId, Tracker, TrackerConfig, DEFAULT_MATCH_DISTANCE,
};

/// Everything one run needs besides the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: DetectionMethod,
    pub feature: FeatureSource,
    pub detector: DetectorConfig,
    pub aggregation: AggregationConfig,
    pub tracker: TrackerConfig,
    pub merge_threshold: f64,
    pub match_distance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: DetectionMethod::StatProfile,
            feature: FeatureSource::Expression7,
            detector: DetectorConfig::default(),
            aggregation: AggregationConfig::default(),
            tracker: TrackerConfig::default(),
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            match_distance: DEFAULT_MATCH_DISTANCE,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.aggregation.validate()?;
        if !(self.merge_threshold > 0.0 && self.merge_threshold <= 1.0) {
            return Err(Error::config(format!(
                "merge_threshold must lie in (0, 1], got {}",
                self.merge_threshold
            )));
        }
        if !(self.tracker.iou_threshold >= 0.0 && self.tracker.iou_threshold < 1.0) {
            return Err(Error::config(format!(
                "track_iou_threshold must lie in [0, 1), got {}",
                self.tracker.iou_threshold
            )));
        }
        if !(self.match_distance.is_finite() && self.match_distance > 0.0) {
            return Err(Error::config("match_distance must be positive"));
        }
        Ok(())
    }
}

/// Signals of one tracked participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedTrack {
    pub id: TrackId,
    pub series: ChangeSeries,
    pub labels: LabelSeries,
    /// Observations carrying the configured feature vector.
    pub vector_count: usize,
}

/// A meeting after tracking and feature extraction, ready for any detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedMeeting {
    pub tracks: Vec<PreparedTrack>,
    /// Largest number of faces seen in a single frame.
    pub meeting_size: usize,
    pub frame_count: u64,
    pub fps: f64,
    pub feature: FeatureSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackDiagnostics {
    pub track_id: TrackId,
    pub series: ChangeSeries,
    pub labels: LabelSeries,
    pub points: Vec<AnomalyPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub events: Vec<GroupEvent>,
    pub diagnostics: Vec<TrackDiagnostics>,
    pub meeting_size: usize,
    pub frame_count: u64,
    pub fps: f64,
}

/// Faces of one frame with the two detector channels fused.
///
/// A fused pair keeps the features of whichever detection supplied the
/// surviving box; an overlap box takes the first channel's features. Missing
/// fields are filled in from the partner detection.
pub fn merge_channels(frame: &FrameRecord, threshold: f64) -> Vec<FaceObservation> {
    let first: Vec<&FaceObservation> = frame
        .faces
        .iter()
        .filter(|f| f.channel == 0)
        .map(|f| &f.observation)
        .collect();
    let second: Vec<&FaceObservation> = frame
        .faces
        .iter()
        .filter(|f| f.channel != 0)
        .map(|f| &f.observation)
        .collect();
    if first.is_empty() || second.is_empty() {
        return frame.faces.iter().map(|f| f.observation.clone()).collect();
    }
    let boxes = |v: &[&FaceObservation]| v.iter().map(|o| o.bbox).collect::<Vec<_>>();
    merge_frame_detailed(&boxes(&first), &boxes(&second), threshold)
        .into_iter()
        .map(|m| match m.source {
            MergeSource::First(i) => first[i].clone(),
            MergeSource::Second(j) => second[j].clone(),
            MergeSource::Pair(i, j) => {
                let (primary, partner) = if m.bbox == second[j].bbox && m.bbox != first[i].bbox {
                    (second[j], first[i])
                } else {
                    (first[i], second[j])
                };
                FaceObservation {
                    frame_index: frame.frame_index,
                    bbox: m.bbox,
                    embedding: primary
                        .embedding
                        .clone()
                        .or_else(|| partner.embedding.clone()),
                    expression: primary
                        .expression
                        .clone()
                        .or_else(|| partner.expression.clone()),
                    expression_label: primary.expression_label.or(partner.expression_label),
                }
            }
        })
        .collect()
}

/// Merge, track and extract features; detector independent.
pub fn prepare(stream: &FeatureStream, cfg: &RunConfig) -> Result<PreparedMeeting> {
    cfg.validate()?;
    let two_channels = stream.channels().len() > 1;
    let mut matcher = default_matcher(cfg.match_distance)?;
    let mut tracker = Tracker::new(cfg.tracker);
    let mut meeting_size = 0;
    for frame in &stream.frames {
        let faces = if two_channels {
            merge_channels(frame, cfg.merge_threshold)
        } else {
            frame.faces.iter().map(|f| f.observation.clone()).collect()
        };
        meeting_size = meeting_size.max(faces.len());
        tracker.associate_frame(faces, &mut matcher)?;
    }
    let tracks = tracker
        .finish()
        .into_iter()
        .map(|t| PreparedTrack {
            id: t.id,
            series: change_series(&t, cfg.feature),
            labels: label_series(&t),
            vector_count: t
                .observations
                .iter()
                .filter(|o| cfg.feature.vector(o).is_some())
                .count(),
        })
        .collect();
    Ok(PreparedMeeting {
        tracks,
        meeting_size,
        frame_count: stream.meta.frame_count,
        fps: stream.meta.fps,
        feature: cfg.feature,
    })
}

fn feature_name(f: FeatureSource) -> &'static str {
    match f {
        FeatureSource::Embedding128 => "embedding",
        FeatureSource::Expression7 => "expression",
    }
}

/// Refuse to run a detector on a meeting that has faces but none of the
/// inputs that detector reads.
pub fn check_usable(prepared: &PreparedMeeting, method: DetectionMethod) -> Result<()> {
    if prepared.tracks.is_empty() {
        return Ok(());
    }
    match method {
        DetectionMethod::StatProfile | DetectionMethod::ArimaError => {
            if prepared.tracks.iter().all(|t| t.vector_count == 0) {
                let name = feature_name(prepared.feature);
                return Err(Error::config(format!(
                    "no face in the stream carries an {name} vector, so the `{}` detector has nothing to read; \
                     set `feature` to the vector the stream provides or use `method = \"transitions\"` with labels",
                    method.short_name()
                )));
            }
        }
        DetectionMethod::TransitionDensity => {
            if prepared.tracks.iter().all(|t| t.labels.is_empty()) {
                return Err(Error::config(
                    "no face in the stream carries an expression label or expression vector, \
                     so the `transitions` detector has nothing to read; use an embedding-based method",
                ));
            }
        }
    }
    Ok(())
}

/// Anomaly points per prepared track, in track order. Tracks run in
/// parallel.
pub fn detect(
    prepared: &PreparedMeeting,
    method: DetectionMethod,
    cfg: &DetectorConfig,
) -> Result<Vec<Vec<AnomalyPoint>>> {
    cfg.validate()?;
    check_usable(prepared, method)?;
    let profile = cfg.stat_profile();
    prepared
        .tracks
        .par_iter()
        .map(|t| match method {
            DetectionMethod::StatProfile => detect_statistical(&t.series, &profile),
            DetectionMethod::ArimaError => detect_arima(&t.series, cfg),
            DetectionMethod::TransitionDensity => {
                detect_transitions(&t.labels, cfg.transition_window, cfg.transition_fraction)
            }
        })
        .collect()
}

pub fn run_pipeline(stream: &FeatureStream, cfg: &RunConfig) -> Result<PipelineOutput> {
    let prepared = prepare(stream, cfg)?;
    run_prepared(&prepared, cfg)
}

pub fn run_prepared(prepared: &PreparedMeeting, cfg: &RunConfig) -> Result<PipelineOutput> {
    let per_track = detect(prepared, cfg.method, &cfg.detector)?;
    let all: Vec<AnomalyPoint> = per_track.iter().flatten().cloned().collect();
    let events = if prepared.meeting_size == 0 {
        Vec::new()
    } else {
        aggregate(&all, prepared.meeting_size, &cfg.aggregation)?
    };
    let diagnostics = prepared
        .tracks
        .iter()
        .zip(per_track)
        .map(|(t, points)| TrackDiagnostics {
            track_id: t.id,
            series: t.series.clone(),
            labels: t.labels.clone(),
            points,
        })
        .collect();
    Ok(PipelineOutput {
        events,
        diagnostics,
        meeting_size: prepared.meeting_size,
        frame_count: prepared.frame_count,
        fps: prepared.fps,
    })
}
