// SPDX-License-Identifier: MIT OR Apache-2.0

//! Group-level abnormal event detection for video-conference recordings.
//!
//! The engine consumes per-frame face detections with identity embeddings
//! and expression posteriors, follows every participant through the meeting,
//! flags moments where a participant's facial features change abnormally and
//! reports the moments where enough participants react together.
//!
//! Stages, in pipeline order: [`geometry`] (fusing two face detectors),
//! [`tracking`], [`features`], [`detectors`] with [`forecast`],
//! [`aggregation`]. [`evaluation`] scores results against annotations and
//! runs cross-validated parameter sweeps; [`synth`] builds meetings with
//! planted events for testing.

pub mod aggregation;
pub mod config;
pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod forecast;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod synth;
pub mod tracking;

pub use aggregation::{aggregate, dbscan_1d, min_points_for, AggregationConfig, GroupEvent};
pub use config::ConfigFile;
pub use detectors::{AnomalyPoint, DetectionMethod, DetectorConfig};
pub use error::{Error, Result};
pub use evaluation::{
    score, sweep, EvalReport, GroundTruthWindow, LabeledMeeting, ParameterGrid, SweepOptions,
};
pub use features::FeatureSource;
pub use io::{read_dataset, read_stream, write_stream, FeatureStream};
pub use pipeline::{run_pipeline, PipelineOutput, RunConfig};
pub use synth::{generate, load_scenarios, SyntheticScenario};
