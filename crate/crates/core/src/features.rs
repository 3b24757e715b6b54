// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-track change signals derived from face feature vectors.

use serde::{Deserialize, Serialize};

use crate::tracking::{euclidean, ExpressionLabel, FaceObservation, Track, TrackId};

/// Which feature vector a change series is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Embedding128,
    Expression7,
}

impl FeatureSource {
    pub fn vector<'a>(&self, obs: &'a FaceObservation) -> Option<&'a [f64]> {
        match self {
            FeatureSource::Embedding128 => obs.embedding.as_deref(),
            FeatureSource::Expression7 => obs.expression.as_deref(),
        }
    }
}

/// Frame-to-frame distance between consecutive feature vectors of one track.
///
/// Sample `i` sits at `frames[i]` and measures the change from the previous
/// usable observation to this one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeSeries {
    pub track_id: TrackId,
    pub source: FeatureSource,
    pub frames: Vec<u64>,
    pub values: Vec<f64>,
}

impl ChangeSeries {
    pub fn new(
        track_id: TrackId,
        source: FeatureSource,
        frames: Vec<u64>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(frames.len(), values.len());
        Self {
            track_id,
            source,
            frames,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSeries {
    pub track_id: TrackId,
    pub frames: Vec<u64>,
    pub labels: Vec<ExpressionLabel>,
}

impl LabelSeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Euclidean change between consecutive observations carrying the requested
/// vector. Observations without it are skipped, so a change spans the gap.
/// Fewer than two usable observations yield an empty series.
pub fn change_series(track: &Track, source: FeatureSource) -> ChangeSeries {
    let mut frames = Vec::new();
    let mut values = Vec::new();
    let mut prev: Option<&[f64]> = None;
    for obs in &track.observations {
        let Some(v) = source.vector(obs) else {
            continue;
        };
        if let Some(p) = prev {
            if p.len() == v.len() {
                frames.push(obs.frame_index);
                values.push(euclidean(p, v));
            }
        }
        prev = Some(v);
    }
    ChangeSeries::new(track.id, source, frames, values)
}

/// Dominant expression per observation: the stored label when present,
/// otherwise the argmax of the expression vector.
pub fn label_series(track: &Track) -> LabelSeries {
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for obs in &track.observations {
        let label = obs
            .expression_label
            .or_else(|| obs.expression.as_deref().and_then(ExpressionLabel::argmax));
        if let Some(label) = label {
            frames.push(obs.frame_index);
            labels.push(label);
        }
    }
    LabelSeries {
        track_id: track.id,
        frames,
        labels,
    }
}
