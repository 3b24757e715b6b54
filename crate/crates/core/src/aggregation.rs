// SPDX-License-Identifier: MIT OR Apache-2.0

//! Time-axis density clustering of per-participant anomalies into
//! meeting-level events.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detectors::AnomalyPoint;
use crate::error::{Error, Result};
use crate::tracking::TrackId;

pub const DEFAULT_EPSILON: u64 = 9;
pub const DEFAULT_PARTICIPANT_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    /// Neighbourhood radius in frames.
    pub epsilon: u64,
    /// Share of the meeting that must react for a cluster to count.
    pub participant_ratio: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            participant_ratio: DEFAULT_PARTICIPANT_RATIO,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 1 {
            return Err(Error::config("epsilon must be at least 1 frame"));
        }
        if !(self.participant_ratio > 0.0 && self.participant_ratio <= 1.0) {
            return Err(Error::config(format!(
                "participant_ratio must lie in (0, 1], got {}",
                self.participant_ratio
            )));
        }
        Ok(())
    }
}

/// A meeting-level abnormal event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEvent {
    pub start_frame: u64,
    pub end_frame: u64,
    pub participant_ids: BTreeSet<TrackId>,
    pub point_count: usize,
}

impl GroupEvent {
    pub fn overlaps(&self, start: u64, end: u64) -> bool {
        self.start_frame <= end && start <= self.end_frame
    }
}

/// Indices into the clustered point list, sorted by frame then index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cluster {
    pub members: Vec<usize>,
    /// Border points attached to a neighbouring cluster that also lie within
    /// `epsilon` of one of this cluster's cores.
    pub shared_borders: Vec<usize>,
}

/// DBSCAN on the frame axis.
///
/// A point is core when at least `min_points` points (itself included) lie
/// within `epsilon` frames. Cores closer than `epsilon` share a cluster;
/// every other point within `epsilon` of a core joins the cluster of its
/// nearest core (the earlier one on a tie) and the rest is noise. Clusters
/// come back in time order.
///
/// In one dimension a border can be in reach of at most two clusters; the
/// one it is not attached to records it in `shared_borders`.
pub fn dbscan_1d(
    points: &[(u64, TrackId)],
    epsilon: u64,
    min_points: usize,
) -> Result<Vec<Cluster>> {
    if min_points < 1 {
        return Err(Error::invalid_input("min_points must be at least 1"));
    }
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (points[i].0, i));
    let frame = |k: usize| points[order[k]].0;

    // neighbour counts with two pointers over the sorted frames
    let mut is_core = vec![false; n];
    let (mut lo, mut hi) = (0usize, 0usize);
    for (k, core) in is_core.iter_mut().enumerate() {
        let f = frame(k);
        while frame(lo) + epsilon < f {
            lo += 1;
        }
        if hi < k {
            hi = k;
        }
        while hi + 1 < n && frame(hi + 1) <= f + epsilon {
            hi += 1;
        }
        *core = hi - lo + 1 >= min_points;
    }

    // consecutive cores within epsilon chain into one cluster
    let mut cluster_of = vec![usize::MAX; n];
    let mut clusters = 0usize;
    let mut prev_core: Option<usize> = None;
    for k in (0..n).filter(|&k| is_core[k]) {
        match prev_core {
            Some(p) if frame(k) - frame(p) <= epsilon => cluster_of[k] = cluster_of[p],
            _ => {
                cluster_of[k] = clusters;
                clusters += 1;
            }
        }
        prev_core = Some(k);
    }

    // borders: nearest core on either side, earlier wins ties
    let mut last_core_before: Option<usize> = None;
    let mut shared: Vec<(usize, usize)> = Vec::new();
    let mut next_core_after = vec![None; n];
    let mut next: Option<usize> = None;
    for k in (0..n).rev() {
        if is_core[k] {
            next = Some(k);
        }
        next_core_after[k] = next;
    }
    for k in 0..n {
        if is_core[k] {
            last_core_before = Some(k);
            continue;
        }
        let f = frame(k);
        let left = last_core_before
            .map(|c| (f - frame(c), c))
            .filter(|(d, _)| *d <= epsilon);
        let right = next_core_after[k]
            .map(|c| (frame(c) - f, c))
            .filter(|(d, _)| *d <= epsilon);
        let (pick, other) = match (left, right) {
            (Some(l), Some(r)) if r.0 < l.0 => (Some(r.1), Some(l.1)),
            (Some(l), Some(r)) => (Some(l.1), Some(r.1)),
            (Some(l), None) => (Some(l.1), None),
            (None, Some(r)) => (Some(r.1), None),
            (None, None) => (None, None),
        };
        if let Some(c) = pick {
            cluster_of[k] = cluster_of[c];
        }
        if let Some(c) = other.filter(|&c| cluster_of[c] != cluster_of[k]) {
            shared.push((cluster_of[c], order[k]));
        }
    }

    let mut out = vec![Cluster::default(); clusters];
    for k in 0..n {
        if cluster_of[k] != usize::MAX {
            out[cluster_of[k]].members.push(order[k]);
        }
    }
    for (c, i) in shared {
        out[c].shared_borders.push(i);
    }
    Ok(out)
}

/// Participants required for a group event: `ceil(ratio * meeting_size)`,
/// never fewer than two.
pub fn min_points_for(meeting_size: usize, ratio: f64) -> Result<usize> {
    if meeting_size < 1 {
        return Err(Error::invalid_input("meeting size must be at least 1"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid_input(format!(
            "ratio must lie in (0, 1], got {ratio}"
        )));
    }
    // the small slack keeps e.g. 0.3 * 10 from rounding up to 4
    let raw = (ratio * meeting_size as f64 - 1e-9).ceil() as usize;
    Ok(raw.max(2))
}

/// Cluster anomaly points and keep clusters that involve enough distinct
/// participants. Events come back sorted and disjoint.
///
/// Participants are counted over every point in reach of the cluster's
/// cores, shared borders included. Counting attached members only would let
/// the deletion of a core hand a border to a neighbouring cluster and create
/// an event that did not exist before.
pub fn aggregate(
    points: &[AnomalyPoint],
    meeting_size: usize,
    cfg: &AggregationConfig,
) -> Result<Vec<GroupEvent>> {
    cfg.validate()?;
    let required = min_points_for(meeting_size, cfg.participant_ratio)?;
    let keyed: Vec<(u64, TrackId)> = points.iter().map(|p| (p.frame_index, p.track_id)).collect();
    let clusters = dbscan_1d(&keyed, cfg.epsilon, required)?;
    Ok(clusters
        .into_iter()
        .filter_map(|c| {
            let participant_ids: BTreeSet<TrackId> = c
                .members
                .iter()
                .chain(&c.shared_borders)
                .map(|&i| keyed[i].1)
                .collect();
            if participant_ids.len() < required {
                return None;
            }
            let frames = c.members.iter().map(|&i| keyed[i].0);
            Some(GroupEvent {
                start_frame: frames.clone().min().expect("clusters are non-empty"),
                end_frame: frames.max().expect("clusters are non-empty"),
                participant_ids,
                point_count: c.members.len(),
            })
        })
        .collect())
}
