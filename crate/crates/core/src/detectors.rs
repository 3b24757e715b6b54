// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-participant anomaly flagging.
//!
//! Three detectors share one output type:
//!
//! * statistical profiling compares each change value against the mean and
//!   standard deviation of the `w` samples before it;
//! * the ARIMA detector fits a model on a trailing window, forecasts one step
//!   and flags large relative forecast errors;
//! * the transition-density detector looks for windows where the dominant
//!   expression keeps flipping.
//!
//! No detector flags a sample it has insufficient history for.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ChangeSeries, LabelSeries};
use crate::forecast::{fit, forecast_one, ArimaOrder};
use crate::tracking::TrackId;

pub const DEFAULT_WINDOW: usize = 7;
pub const DEFAULT_STD_THRESHOLD: f64 = 1.8;
pub const DEFAULT_ARIMA_WINDOW: usize = 20;
pub const DEFAULT_ARIMA_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TRANSITION_WINDOW: usize = 5;
pub const DEFAULT_TRANSITION_FRACTION: f64 = 0.5;
pub const DEFAULT_MEAN_FLOOR: f64 = 1e-9;
pub const DEFAULT_STD_FLOOR_RATIO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMethod {
    #[serde(alias = "stat")]
    StatProfile,
    #[serde(alias = "arima")]
    ArimaError,
    #[serde(alias = "transitions")]
    TransitionDensity,
}

impl DetectionMethod {
    pub fn short_name(self) -> &'static str {
        match self {
            Self::StatProfile => "stat",
            Self::ArimaError => "arima",
            Self::TransitionDensity => "transitions",
        }
    }
}

impl std::str::FromStr for DetectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stat" | "stat_profile" => Ok(Self::StatProfile),
            "arima" | "arima_error" => Ok(Self::ArimaError),
            "transitions" | "transition_density" => Ok(Self::TransitionDensity),
            other => Err(Error::config(format!("unknown detection method `{other}`"))),
        }
    }
}

/// One flagged sample of one participant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyPoint {
    pub track_id: TrackId,
    pub frame_index: u64,
    /// Triggering statistic; at least the method's threshold.
    pub score: f64,
    pub method: DetectionMethod,
}

/// How the statistical profile compares a value with its trailing window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileRule {
    /// `value - mean > threshold * std`.
    #[default]
    ClassicZscore,
    /// `value / mean > threshold * std`, the ratio form.
    Ratio,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatProfile {
    pub window: usize,
    pub threshold: f64,
    pub rule: ProfileRule,
    /// Lower bound applied to the rolling mean.
    pub mean_floor: f64,
    /// The rolling std is raised to at least this fraction of the rolling mean.
    pub std_floor_ratio: f64,
}

impl StatProfile {
    pub fn new(window: usize, threshold: f64) -> Self {
        Self {
            window,
            threshold,
            rule: ProfileRule::default(),
            mean_floor: DEFAULT_MEAN_FLOOR,
            std_floor_ratio: DEFAULT_STD_FLOOR_RATIO,
        }
    }

    pub fn with_rule(mut self, rule: ProfileRule) -> Self {
        self.rule = rule;
        self
    }
}

impl Default for StatProfile {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW, DEFAULT_STD_THRESHOLD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub window_w: usize,
    pub std_threshold: f64,
    pub profile_rule: ProfileRule,
    pub mean_floor: f64,
    pub std_floor_ratio: f64,
    pub arima_threshold: f64,
    pub arima_window: usize,
    pub arima_order: ArimaOrder,
    /// Denominator floor for the relative forecast error.
    pub arima_epsilon: f64,
    pub transition_window: usize,
    pub transition_fraction: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_w: DEFAULT_WINDOW,
            std_threshold: DEFAULT_STD_THRESHOLD,
            profile_rule: ProfileRule::default(),
            mean_floor: DEFAULT_MEAN_FLOOR,
            std_floor_ratio: DEFAULT_STD_FLOOR_RATIO,
            arima_threshold: DEFAULT_ARIMA_THRESHOLD,
            arima_window: DEFAULT_ARIMA_WINDOW,
            arima_order: ArimaOrder::DEFAULT,
            arima_epsilon: DEFAULT_MEAN_FLOOR,
            transition_window: DEFAULT_TRANSITION_WINDOW,
            transition_fraction: DEFAULT_TRANSITION_FRACTION,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_w < 2 {
            return Err(Error::config("window_w must be at least 2"));
        }
        for (name, v) in [
            ("std_threshold", self.std_threshold),
            ("arima_threshold", self.arima_threshold),
            ("mean_floor", self.mean_floor),
            ("arima_epsilon", self.arima_epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.std_floor_ratio.is_finite() && self.std_floor_ratio >= 0.0) {
            return Err(Error::config("std_floor_ratio must be non-negative"));
        }
        if self.transition_window < 3 || self.transition_window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "transition_window must be odd and at least 3, got {}",
                self.transition_window
            )));
        }
        if !(0.0..=1.0).contains(&self.transition_fraction) {
            return Err(Error::config("transition_fraction must lie in [0, 1]"));
        }
        self.arima_order.validate()?;
        if self.arima_window < self.arima_order.min_fit_len() {
            return Err(Error::config(format!(
                "arima_window {} is too short for ARIMA{}",
                self.arima_window, self.arima_order
            )));
        }
        Ok(())
    }

    pub fn stat_profile(&self) -> StatProfile {
        StatProfile {
            window: self.window_w,
            threshold: self.std_threshold,
            rule: self.profile_rule,
            mean_floor: self.mean_floor,
            std_floor_ratio: self.std_floor_ratio,
        }
    }
}

/// Mean and population standard deviation of a trailing window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics over the `w` samples strictly before each index; the first `w`
/// entries are `None`.
pub fn rolling_stats(values: &[f64], w: usize) -> Result<Vec<Option<WindowStats>>> {
    if w < 2 {
        return Err(Error::invalid_input("rolling window must be at least 2"));
    }
    let mut out = vec![None; values.len()];
    if values.len() <= w {
        return Ok(out);
    }
    let wf = w as f64;
    let mut mean = values[..w].iter().sum::<f64>() / wf;
    let mut m2: f64 = values[..w].iter().map(|v| (v - mean).powi(2)).sum();
    for i in w..values.len() {
        out[i] = Some(WindowStats {
            mean,
            std: (m2.max(0.0) / wf).sqrt(),
        });
        if i + 1 == values.len() {
            break;
        }
        // slide: drop values[i - w], add values[i]; re-anchor every w steps
        // so rounding cannot accumulate along long series
        if (i + 1 - w).is_multiple_of(w) {
            let win = &values[i + 1 - w..=i];
            mean = win.iter().sum::<f64>() / wf;
            m2 = win.iter().map(|v| (v - mean).powi(2)).sum();
        } else {
            let (old, new) = (values[i - w], values[i]);
            let new_mean = mean + (new - old) / wf;
            m2 += (new - old) * (new - new_mean + old - mean);
            mean = new_mean;
        }
    }
    Ok(out)
}

pub fn detect_statistical(
    series: &ChangeSeries,
    profile: &StatProfile,
) -> Result<Vec<AnomalyPoint>> {
    let stats = rolling_stats(&series.values, profile.window)?;
    let mut points = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        let Some(s) = s else { continue };
        let value = series.values[i];
        let mean = s.mean.max(profile.mean_floor);
        let std = s
            .std
            .max(profile.std_floor_ratio * mean)
            .max(f64::MIN_POSITIVE);
        let (hit, score) = match profile.rule {
            ProfileRule::ClassicZscore => {
                let z = (value - s.mean) / std;
                (value - s.mean > profile.threshold * std, z)
            }
            ProfileRule::Ratio => {
                let ratio = value / mean;
                (ratio > profile.threshold * std, ratio / std)
            }
        };
        if hit {
            points.push(AnomalyPoint {
                track_id: series.track_id,
                frame_index: series.frames[i],
                score,
                method: DetectionMethod::StatProfile,
            });
        }
    }
    Ok(points)
}

/// Relative one-step forecast error for every sample after the first
/// `arima_window`; `None` where the window could not be fitted.
pub fn arima_errors(values: &[f64], cfg: &DetectorConfig) -> Vec<Option<f64>> {
    let w = cfg.arima_window;
    let mut out = vec![None; values.len()];
    for i in w..values.len() {
        let window = &values[i - w..i];
        let Ok(model) = fit(window, cfg.arima_order) else {
            continue;
        };
        let Ok(pred) = forecast_one(&model, window) else {
            continue;
        };
        if !pred.is_finite() {
            continue;
        }
        let actual = values[i];
        out[i] = Some((pred - actual).abs() / actual.abs().max(cfg.arima_epsilon));
    }
    out
}

pub fn detect_arima(series: &ChangeSeries, cfg: &DetectorConfig) -> Result<Vec<AnomalyPoint>> {
    cfg.validate()?;
    let errors = arima_errors(&series.values, cfg);
    Ok(arima_points(series, &errors, cfg.arima_threshold))
}

/// Threshold precomputed forecast errors, so one fit serves many thresholds.
pub fn arima_points(
    series: &ChangeSeries,
    errors: &[Option<f64>],
    threshold: f64,
) -> Vec<AnomalyPoint> {
    errors
        .iter()
        .enumerate()
        .filter_map(|(i, err)| {
            let err = (*err)?;
            (err > threshold).then_some(AnomalyPoint {
                track_id: series.track_id,
                frame_index: series.frames[i],
                score: err,
                method: DetectionMethod::ArimaError,
            })
        })
        .collect()
}

/// Flag samples whose centred window has a share of label changes above
/// `fraction`. Samples without a full window are never flagged.
pub fn detect_transitions(
    labels: &LabelSeries,
    window: usize,
    fraction: f64,
) -> Result<Vec<AnomalyPoint>> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid_input(format!(
            "transition window must be odd and at least 3, got {window}"
        )));
    }
    let n = labels.len();
    let half = window / 2;
    // changes[j] = number of label changes among samples 1..=j
    let mut changes = vec![0usize; n];
    for j in 1..n {
        changes[j] = changes[j - 1] + usize::from(labels.labels[j] != labels.labels[j - 1]);
    }
    let pairs = (window - 1) as f64;
    let mut points = Vec::new();
    for i in half..n.saturating_sub(half) {
        let count = changes[i + half] - changes[i - half];
        let share = count as f64 / pairs;
        if share > fraction {
            points.push(AnomalyPoint {
                track_id: labels.track_id,
                frame_index: labels.frames[i],
                score: share,
                method: DetectionMethod::TransitionDensity,
            });
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSource;
    use crate::tracking::ExpressionLabel::{self, Happiness, Neutral, Surprise};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(values: Vec<f64>) -> ChangeSeries {
        let frames = (1..=values.len() as u64).collect();
        ChangeSeries::new(TrackId(0), FeatureSource::Expression7, frames, values)
    }

    fn labels(ls: Vec<ExpressionLabel>) -> LabelSeries {
        LabelSeries {
            track_id: TrackId(0),
            frames: (0..ls.len() as u64).collect(),
            labels: ls,
        }
    }

    fn naive_stats(values: &[f64], w: usize, i: usize) -> WindowStats {
        let win = &values[i - w..i];
        let mean = win.iter().sum::<f64>() / w as f64;
        let var = win.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
        WindowStats {
            mean,
            std: var.sqrt(),
        }
    }

    #[test]
    fn rolling_examples() {
        let s = rolling_stats(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap();
        assert!(s[0].is_none() && s[1].is_none());
        let at2 = s[2].unwrap();
        assert!((at2.mean - 1.5).abs() < 1e-12);
        assert!((at2.std - 0.5).abs() < 1e-12);

        let c = rolling_stats(&[4.0; 12], 5).unwrap();
        for st in c.iter().skip(5) {
            let st = st.unwrap();
            assert!((st.mean - 4.0).abs() < 1e-12);
            assert!(st.std.abs() < 1e-12);
        }
        assert!(rolling_stats(&[1.0], 1).is_err());
    }

    #[test]
    fn constant_and_zero_series_never_flag() {
        for rule in [ProfileRule::ClassicZscore, ProfileRule::Ratio] {
            let p = StatProfile::default().with_rule(rule);
            assert!(detect_statistical(&series(vec![0.0; 40]), &p)
                .unwrap()
                .is_empty());
        }
        let p = StatProfile::default();
        assert!(detect_statistical(&series(vec![2.5; 40]), &p)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ratio_rule_is_literal() {
        // constant 10: ratio 1 against 1.8 * max(0, 0.1 * 10) = 1.8 -> quiet
        let p = StatProfile::default().with_rule(ProfileRule::Ratio);
        assert!(detect_statistical(&series(vec![10.0; 30]), &p)
            .unwrap()
            .is_empty());
        // constant 1: ratio 1 against 1.8 * 0.1 = 0.18 -> every post-warm-up sample
        let hits = detect_statistical(&series(vec![1.0; 30]), &p).unwrap();
        assert_eq!(hits.len(), 30 - 7);
        assert!(hits.iter().all(|h| h.score > 1.8));
    }

    #[test]
    fn spike_after_calm_noise_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v: Vec<f64> = (0..60)
            .map(|_| 1.0 + rng.random_range(-0.05..0.05))
            .collect();
        v[40] *= 10.0;
        let hits = detect_statistical(&series(v), &StatProfile::new(7, 1.8)).unwrap();
        assert_eq!(
            hits.iter().map(|h| h.frame_index).collect::<Vec<_>>(),
            vec![41]
        );
        assert!(hits[0].score > 1.8);
    }

    #[test]
    fn transition_examples() {
        assert!(detect_transitions(&labels(vec![Neutral; 12]), 5, 0.5)
            .unwrap()
            .is_empty());

        let alt: Vec<_> = (0..12)
            .map(|i| if i % 2 == 0 { Happiness } else { Neutral })
            .collect();
        let hits = detect_transitions(&labels(alt), 5, 0.5).unwrap();
        assert_eq!(
            hits.iter().map(|h| h.frame_index).collect::<Vec<_>>(),
            (2..10).collect::<Vec<_>>()
        );

        // window around index 2 holds exactly two changes: share 0.5, not above 0.5
        let two = labels(vec![Neutral, Neutral, Surprise, Neutral, Neutral]);
        assert!(detect_transitions(&two, 5, 0.5).unwrap().is_empty());
        assert_eq!(detect_transitions(&two, 5, 0.49).unwrap().len(), 1);

        assert!(detect_transitions(&labels(vec![Neutral; 5]), 4, 0.5).is_err());
    }

    #[test]
    fn arima_warm_up_and_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v: Vec<f64> = (0..80)
            .map(|_| 1.0 + rng.random_range(-0.05..0.05))
            .collect();
        v[50] *= 8.0;
        let cfg = DetectorConfig::default();
        let hits = detect_arima(&series(v), &cfg).unwrap();
        assert!(hits.iter().all(|h| h.frame_index > cfg.arima_window as u64));
        assert!(hits.iter().any(|h| h.frame_index == 51));
    }

    proptest! {
        #[test]
        fn rolling_matches_naive(values in prop::collection::vec(0.0..10.0f64, 0..200), w in 2usize..16) {
            let fast = rolling_stats(&values, w).unwrap();
            for (i, s) in fast.iter().enumerate() {
                if i < w {
                    prop_assert!(s.is_none());
                } else {
                    let n = naive_stats(&values, w, i);
                    let s = s.unwrap();
                    prop_assert!((s.mean - n.mean).abs() < 1e-9);
                    prop_assert!((s.std - n.std).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn stat_flags_are_scale_free(
            values in prop::collection::vec(0.1..5.0f64, 10..120),
            c in 0.01..100.0f64,
            w in 2usize..12,
        ) {
            let p = StatProfile::new(w, 1.8);
            let a = detect_statistical(&series(values.clone()), &p).unwrap();
            let b = detect_statistical(&series(values).scaled(c), &p).unwrap();
            // ratios within rounding of the threshold may flip; require agreement elsewhere
            let fa: Vec<u64> = a.iter().filter(|x| (x.score - 1.8).abs() > 1e-6).map(|x| x.frame_index).collect();
            let fb: Vec<u64> = b.iter().filter(|x| (x.score - 1.8).abs() > 1e-6).map(|x| x.frame_index).collect();
            prop_assert_eq!(fa, fb);
        }

        #[test]
        fn outputs_respect_warm_up_and_order(values in prop::collection::vec(0.0..5.0f64, 0..80), w in 2usize..10) {
            let hits = detect_statistical(&series(values), &StatProfile::new(w, 1.5)).unwrap();
            prop_assert!(hits.iter().all(|h| h.frame_index > w as u64));
            prop_assert!(hits.windows(2).all(|p| p[0].frame_index < p[1].frame_index));
        }

        #[test]
        fn transitions_ignore_category_names(
            raw in prop::collection::vec(0usize..7, 0..60),
            shift in 1usize..7,
            window in prop::sample::select(vec![3usize, 5, 7, 9]),
        ) {
            let a: Vec<_> = raw.iter().map(|&i| ExpressionLabel::from_index(i).unwrap()).collect();
            let b: Vec<_> = raw.iter().map(|&i| ExpressionLabel::from_index((i + shift) % 7).unwrap()).collect();
            let fa = detect_transitions(&labels(a), window, 0.5).unwrap();
            let fb = detect_transitions(&labels(b), window, 0.5).unwrap();
            prop_assert_eq!(fa, fb);
        }
    }
}
