// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat key/value configuration file (TOML). Every key is optional and
//! defaults to the engine default.
//!
//! ```toml
//! method = "stat"
//! window_w = 7
//! std_threshold = 1.8
//! epsilon = 9
//! participant_ratio = 0.5
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationConfig;
use crate::detectors::{DetectionMethod, DetectorConfig, ProfileRule};
use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::forecast::ArimaOrder;
use crate::pipeline::RunConfig;
use crate::tracking::TrackerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub method: DetectionMethod,
    pub feature: FeatureSource,
    pub window_w: usize,
    pub std_threshold: f64,
    pub profile_rule: ProfileRule,
    pub mean_floor: f64,
    pub std_floor_ratio: f64,
    pub arima_threshold: f64,
    pub arima_window: usize,
    pub arima_p: usize,
    pub arima_d: usize,
    pub arima_q: usize,
    pub arima_epsilon: f64,
    pub transition_window: usize,
    pub transition_fraction: f64,
    pub epsilon: u64,
    pub participant_ratio: f64,
    pub merge_threshold: f64,
    pub track_iou_threshold: f64,
    pub staleness_horizon: u64,
    pub match_distance: f64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from(&RunConfig::default())
    }
}

impl From<&RunConfig> for ConfigFile {
    fn from(c: &RunConfig) -> Self {
        let d = &c.detector;
        Self {
            method: c.method,
            feature: c.feature,
            window_w: d.window_w,
            std_threshold: d.std_threshold,
            profile_rule: d.profile_rule,
            mean_floor: d.mean_floor,
            std_floor_ratio: d.std_floor_ratio,
            arima_threshold: d.arima_threshold,
            arima_window: d.arima_window,
            arima_p: d.arima_order.p,
            arima_d: d.arima_order.d,
            arima_q: d.arima_order.q,
            arima_epsilon: d.arima_epsilon,
            transition_window: d.transition_window,
            transition_fraction: d.transition_fraction,
            epsilon: c.aggregation.epsilon,
            participant_ratio: c.aggregation.participant_ratio,
            merge_threshold: c.merge_threshold,
            track_iou_threshold: c.tracker.iou_threshold,
            staleness_horizon: c.tracker.staleness_horizon,
            match_distance: c.match_distance,
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Checked conversion into a run configuration.
    pub fn into_run_config(self) -> Result<RunConfig> {
        let cfg = RunConfig {
            method: self.method,
            feature: self.feature,
            detector: DetectorConfig {
                window_w: self.window_w,
                std_threshold: self.std_threshold,
                profile_rule: self.profile_rule,
                mean_floor: self.mean_floor,
                std_floor_ratio: self.std_floor_ratio,
                arima_threshold: self.arima_threshold,
                arima_window: self.arima_window,
                arima_order: ArimaOrder {
                    p: self.arima_p,
                    d: self.arima_d,
                    q: self.arima_q,
                },
                arima_epsilon: self.arima_epsilon,
                transition_window: self.transition_window,
                transition_fraction: self.transition_fraction,
            },
            aggregation: AggregationConfig {
                epsilon: self.epsilon,
                participant_ratio: self.participant_ratio,
            },
            tracker: TrackerConfig {
                iou_threshold: self.track_iou_threshold,
                staleness_horizon: self.staleness_horizon,
            },
            merge_threshold: self.merge_threshold,
            match_distance: self.match_distance,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
