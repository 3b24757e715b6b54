// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frame-level scoring against annotated windows and k-fold parameter
//! sweeps partitioned by meeting.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationConfig, GroupEvent};
use crate::detectors::{
    arima_errors, arima_points, detect_statistical, detect_transitions, AnomalyPoint,
    DetectionMethod, StatProfile,
};
use crate::error::{Error, Result};
use crate::io::FeatureStream;
use crate::pipeline::{check_usable, prepare, PreparedMeeting, RunConfig};

/// An annotated disruption, inclusive on both ends.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthWindow {
    pub start_frame: u64,
    pub end_frame: u64,
    pub label: String,
}

/// Frame counts of a binary prediction against the truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalReport {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn add(&mut self, other: &EvalReport) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn mark(frames: &mut [bool], start: u64, end: u64, total: u64, what: &str) -> Result<()> {
    if start > end || end >= total {
        return Err(Error::invalid_input(format!(
            "{what} window [{start}, {end}] does not fit in {total} frames"
        )));
    }
    frames[start as usize..=end as usize]
        .iter_mut()
        .for_each(|f| *f = true);
    Ok(())
}

/// Binarize both sides onto `[0, total_frames)` and count per frame.
pub fn score(
    events: &[GroupEvent],
    truth: &[GroundTruthWindow],
    total_frames: u64,
) -> Result<EvalReport> {
    let n = total_frames as usize;
    let mut predicted = vec![false; n];
    let mut actual = vec![false; n];
    for e in events {
        mark(
            &mut predicted,
            e.start_frame,
            e.end_frame,
            total_frames,
            "event",
        )?;
    }
    for t in truth {
        mark(
            &mut actual,
            t.start_frame,
            t.end_frame,
            total_frames,
            "ground-truth",
        )?;
    }
    let mut r = EvalReport::default();
    for (p, a) in predicted.iter().zip(&actual) {
        match (p, a) {
            (true, true) => r.tp += 1,
            (true, false) => r.fp += 1,
            (false, true) => r.fn_ += 1,
            (false, false) => r.tn += 1,
        }
    }
    Ok(r)
}

/// Event-level agreement: a window is hit when any window on the other side
/// overlaps it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMatch {
    pub truth_hit: usize,
    pub truth_total: usize,
    pub predicted_hit: usize,
    pub predicted_total: usize,
}

impl EventMatch {
    pub fn recall(&self) -> Option<f64> {
        ratio(self.truth_hit as u64, self.truth_total as u64)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.predicted_hit as u64, self.predicted_total as u64)
    }

    pub fn add(&mut self, other: &EventMatch) {
        self.truth_hit += other.truth_hit;
        self.truth_total += other.truth_total;
        self.predicted_hit += other.predicted_hit;
        self.predicted_total += other.predicted_total;
    }
}

pub fn match_events(events: &[GroupEvent], truth: &[GroundTruthWindow]) -> EventMatch {
    EventMatch {
        truth_hit: truth
            .iter()
            .filter(|t| {
                events
                    .iter()
                    .any(|e| e.overlaps(t.start_frame, t.end_frame))
            })
            .count(),
        truth_total: truth.len(),
        predicted_hit: events
            .iter()
            .filter(|e| truth.iter().any(|t| e.overlaps(t.start_frame, t.end_frame)))
            .count(),
        predicted_total: events.len(),
    }
}

/// What a sweep optimizes on the training meetings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Precision,
    Recall,
    F1,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Self::Precision => "precision",
            Self::Recall => "recall",
            Self::F1 => "f1",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precision" => Ok(Self::Precision),
            "recall" => Ok(Self::Recall),
            "f1" => Ok(Self::F1),
            other => Err(Error::config(format!("unknown objective `{other}`"))),
        }
    }
}

/// Candidate values for a sweep.
///
/// `windows` and `thresholds` mean different things per method: the rolling
/// window and std multiplier for statistical profiling, the fitting window
/// and relative-error threshold for ARIMA, and the centred window and change
/// share for transition density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub method: DetectionMethod,
    pub windows: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub epsilons: Vec<u64>,
    pub participant_ratios: Vec<f64>,
}

fn default_epsilons() -> Vec<u64> {
    (5..=21).step_by(2).collect()
}

impl ParameterGrid {
    /// Windows 5..=15 step 2, thresholds 1.5..=3.0 step 0.1, epsilon 5..=21
    /// step 2.
    pub fn statistical() -> Self {
        Self {
            method: DetectionMethod::StatProfile,
            windows: (5..=15).step_by(2).collect(),
            // built from integers so 2.3 is exactly the literal 2.3
            thresholds: (15..=30).map(|t| t as f64 / 10.0).collect(),
            epsilons: default_epsilons(),
            participant_ratios: vec![AggregationConfig::default().participant_ratio],
        }
    }

    pub fn arima() -> Self {
        Self {
            method: DetectionMethod::ArimaError,
            windows: vec![crate::detectors::DEFAULT_ARIMA_WINDOW],
            thresholds: vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
            epsilons: default_epsilons(),
            participant_ratios: vec![AggregationConfig::default().participant_ratio],
        }
    }

    pub fn transitions() -> Self {
        Self {
            method: DetectionMethod::TransitionDensity,
            windows: (3..=9).step_by(2).collect(),
            thresholds: vec![crate::detectors::DEFAULT_TRANSITION_FRACTION],
            epsilons: default_epsilons(),
            participant_ratios: vec![AggregationConfig::default().participant_ratio],
        }
    }

    pub fn for_method(method: DetectionMethod) -> Self {
        match method {
            DetectionMethod::StatProfile => Self::statistical(),
            DetectionMethod::ArimaError => Self::arima(),
            DetectionMethod::TransitionDensity => Self::transitions(),
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
            * self.thresholds.len()
            * self.epsilons.len()
            * self.participant_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination; windows vary slowest, ratios fastest.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &window in &self.windows {
            for &threshold in &self.thresholds {
                for &epsilon in &self.epsilons {
                    for &participant_ratio in &self.participant_ratios {
                        out.push(GridPoint {
                            window,
                            threshold,
                            epsilon,
                            participant_ratio,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub window: usize,
    pub threshold: f64,
    pub epsilon: u64,
    pub participant_ratio: f64,
}

impl GridPoint {
    /// `base` with this point's values written into the fields `method` reads.
    pub fn apply(&self, method: DetectionMethod, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.method = method;
        match method {
            DetectionMethod::StatProfile => {
                cfg.detector.window_w = self.window;
                cfg.detector.std_threshold = self.threshold;
            }
            DetectionMethod::ArimaError => {
                cfg.detector.arima_window = self.window;
                cfg.detector.arima_threshold = self.threshold;
            }
            DetectionMethod::TransitionDensity => {
                cfg.detector.transition_window = self.window;
                cfg.detector.transition_fraction = self.threshold;
            }
        }
        cfg.aggregation = AggregationConfig {
            epsilon: self.epsilon,
            participant_ratio: self.participant_ratio,
        };
        cfg
    }
}

/// One meeting of a labelled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMeeting {
    pub name: String,
    pub stream: FeatureStream,
    pub truth: Vec<GroundTruthWindow>,
}

/// Frame-level counts for every meeting at every grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method: DetectionMethod,
    pub points: Vec<GridPoint>,
    /// `reports[meeting][point]`.
    pub reports: Vec<Vec<EvalReport>>,
}

/// Score one meeting on the whole grid. Tracking and features are computed
/// once, detection once per (window, threshold) pair.
pub fn score_meeting(
    meeting: &LabeledMeeting,
    grid: &ParameterGrid,
    base: &RunConfig,
) -> Result<Vec<EvalReport>> {
    let prepared = prepare(&meeting.stream, base)?;
    check_usable(&prepared, grid.method)?;
    let total = meeting.stream.meta.frame_count;
    let mut reports = Vec::with_capacity(grid.len());
    for &window in &grid.windows {
        let per_threshold = detect_for_window(&prepared, grid, window, base)?;
        for points in per_threshold {
            for &epsilon in &grid.epsilons {
                for &participant_ratio in &grid.participant_ratios {
                    let events = if prepared.meeting_size == 0 {
                        Vec::new()
                    } else {
                        aggregate(
                            &points,
                            prepared.meeting_size,
                            &AggregationConfig {
                                epsilon,
                                participant_ratio,
                            },
                        )?
                    };
                    reports.push(score(&events, &meeting.truth, total)?);
                }
            }
        }
    }
    Ok(reports)
}

/// All tracks' points for each threshold of the grid at one window.
fn detect_for_window(
    prepared: &PreparedMeeting,
    grid: &ParameterGrid,
    window: usize,
    base: &RunConfig,
) -> Result<Vec<Vec<AnomalyPoint>>> {
    let probe = GridPoint {
        window,
        threshold: grid.thresholds.first().copied().unwrap_or(1.0),
        epsilon: 1,
        participant_ratio: 1.0,
    };
    let cfg = probe.apply(grid.method, base);
    cfg.detector.validate()?;
    match grid.method {
        DetectionMethod::ArimaError => {
            // the expensive part is fitting, which the threshold does not touch
            let errors: Vec<Vec<Option<f64>>> = prepared
                .tracks
                .iter()
                .map(|t| arima_errors(&t.series.values, &cfg.detector))
                .collect();
            Ok(grid
                .thresholds
                .iter()
                .map(|&thr| {
                    prepared
                        .tracks
                        .iter()
                        .zip(&errors)
                        .flat_map(|(t, e)| arima_points(&t.series, e, thr))
                        .collect()
                })
                .collect())
        }
        DetectionMethod::StatProfile => grid
            .thresholds
            .iter()
            .map(|&thr| {
                let profile = StatProfile {
                    threshold: thr,
                    ..cfg.detector.stat_profile()
                };
                let mut all = Vec::new();
                for t in &prepared.tracks {
                    all.extend(detect_statistical(&t.series, &profile)?);
                }
                Ok(all)
            })
            .collect(),
        DetectionMethod::TransitionDensity => grid
            .thresholds
            .iter()
            .map(|&thr| {
                let mut all = Vec::new();
                for t in &prepared.tracks {
                    all.extend(detect_transitions(&t.labels, window, thr)?);
                }
                Ok(all)
            })
            .collect(),
    }
}

/// Score every meeting on every grid point. Meetings are processed in
/// parallel; the table is assembled in input order.
pub fn score_table(
    meetings: &[LabeledMeeting],
    grid: &ParameterGrid,
    base: &RunConfig,
) -> Result<ScoreTable> {
    if grid.is_empty() {
        return Err(Error::config("parameter grid is empty"));
    }
    let reports = meetings
        .par_iter()
        .map(|m| score_meeting(m, grid, base))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable {
        method: grid.method,
        points: grid.points(),
        reports,
    })
}

/// Selection made on one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub selected_index: usize,
    pub selected: GridPoint,
    pub train_report: EvalReport,
    pub test_report: EvalReport,
}

fn pooled(table: &ScoreTable, meetings: &[usize], point: usize) -> EvalReport {
    let mut r = EvalReport::default();
    for &m in meetings {
        r.add(&table.reports[m][point]);
    }
    r
}

// undefined ratios rank below every defined one
fn rank_key(
    r: &EvalReport,
    objective: Objective,
    window: usize,
) -> (f64, f64, std::cmp::Reverse<usize>) {
    let v = |x: Option<f64>| x.unwrap_or(-1.0);
    let (primary, secondary) = match objective {
        Objective::Precision => (r.precision(), r.recall()),
        Objective::Recall => (r.recall(), r.precision()),
        Objective::F1 => (r.f1(), r.recall()),
    };
    (v(primary), v(secondary), std::cmp::Reverse(window))
}

/// Pick the grid point that is best on `train` (pooled counts) and report it
/// on `test`. Ties go to higher recall, then the smaller window, then the
/// earlier grid point.
pub fn evaluate_fold(
    table: &ScoreTable,
    train: &[usize],
    test: &[usize],
    objective: Objective,
) -> Result<FoldOutcome> {
    if table.points.is_empty() {
        return Err(Error::config("parameter grid is empty"));
    }
    if train.is_empty() {
        return Err(Error::invalid_input(
            "a fold needs at least one training meeting",
        ));
    }
    let mut best: Option<(usize, EvalReport)> = None;
    for (p, point) in table.points.iter().enumerate() {
        let r = pooled(table, train, p);
        let better = match &best {
            None => true,
            Some((bp, br)) => {
                let (a, b) = (
                    rank_key(&r, objective, point.window),
                    rank_key(br, objective, table.points[*bp].window),
                );
                a.0.total_cmp(&b.0)
                    .then(a.1.total_cmp(&b.1))
                    .then(a.2.cmp(&b.2))
                    .is_gt()
            }
        };
        if better {
            best = Some((p, r));
        }
    }
    let (p, train_report) = best.expect("grid is non-empty");
    Ok(FoldOutcome {
        selected_index: p,
        selected: table.points[p],
        train_report,
        test_report: pooled(table, test, p),
    })
}

/// Deterministic partition of `n` meetings into `folds` held-out sets.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::config("at least 2 folds are required"));
    }
    if n < folds {
        return Err(Error::config(format!(
            "{n} meetings cannot fill {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, m) in order.into_iter().enumerate() {
        out[pos % folds].push(m);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub folds: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            objective: Objective::Precision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_meetings: Vec<String>,
    #[serde(flatten)]
    pub outcome: FoldOutcome,
}

/// Across-fold means of held-out metrics; folds where a metric is undefined
/// are left out of its mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub tnr: Option<f64>,
    pub fpr: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MeanMetrics {
    pub fn of(reports: &[EvalReport]) -> Self {
        Self {
            recall: mean(reports.iter().map(EvalReport::recall)),
            precision: mean(reports.iter().map(EvalReport::precision)),
            tnr: mean(reports.iter().map(EvalReport::tnr)),
            fpr: mean(reports.iter().map(EvalReport::fpr)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: DetectionMethod,
    pub objective: Objective,
    pub grid_size: usize,
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

pub fn sweep(
    meetings: &[LabeledMeeting],
    grid: &ParameterGrid,
    base: &RunConfig,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    let assignment = fold_assignment(meetings.len(), opts.folds, opts.seed)?;
    let table = score_table(meetings, grid, base)?;
    let folds = assignment
        .iter()
        .enumerate()
        .map(|(k, test)| {
            let train: Vec<usize> = (0..meetings.len()).filter(|m| !test.contains(m)).collect();
            Ok(FoldResult {
                fold: k,
                test_meetings: test.iter().map(|&m| meetings[m].name.clone()).collect(),
                outcome: evaluate_fold(&table, &train, test, opts.objective)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tests: Vec<EvalReport> = folds.iter().map(|f| f.outcome.test_report).collect();
    Ok(SweepResult {
        method: grid.method,
        objective: opts.objective,
        grid_size: grid.len(),
        mean: MeanMetrics::of(&tests),
        folds,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Fixed-width table of a single report.
pub fn report_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8}", "TP", "FP", "TN", "FN");
    let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8}", r.tp, r.fp, r.tn, r.fn_);
    let _ = writeln!(
        s,
        "recall {}%  precision {}%  TNR {}%  FPR {}%",
        pct(r.recall()),
        pct(r.precision()),
        pct(r.tnr()),
        pct(r.fpr())
    );
    s
}

impl SweepResult {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "method {}  grid points {}  objective {}",
            self.method.short_name(),
            self.grid_size,
            self.objective.name()
        );
        let _ = writeln!(
            s,
            "{:>4} {:>6} {:>6} {:>4} {:>6} {:>8} {:>9} {:>7} {:>7}",
            "fold", "window", "thr", "eps", "ratio", "recall", "precision", "TNR", "FPR"
        );
        for f in &self.folds {
            let (p, r) = (&f.outcome.selected, &f.outcome.test_report);
            let _ = writeln!(
                s,
                "{:>4} {:>6} {:>6.2} {:>4} {:>6.2} {:>8} {:>9} {:>7} {:>7}",
                f.fold,
                p.window,
                p.threshold,
                p.epsilon,
                p.participant_ratio,
                pct(r.recall()),
                pct(r.precision()),
                pct(r.tnr()),
                pct(r.fpr())
            );
        }
        let _ = writeln!(
            s,
            "mean {:>31} {:>8} {:>9} {:>7} {:>7}",
            "",
            pct(self.mean.recall),
            pct(self.mean.precision),
            pct(self.mean.tnr),
            pct(self.mean.fpr)
        );
        s
    }
}
