// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sweeps checked against brute force: every grid point is run through the
//! plain pipeline and scored independently, and the selection rule is
//! re-applied here.

use vc_anomaly::evaluation::{fold_assignment, Objective};
use vc_anomaly::synth::MeetingSampler;
use vc_anomaly::{
    generate, run_pipeline, score, sweep, DetectionMethod, EvalReport, LabeledMeeting,
    ParameterGrid, RunConfig, SweepOptions,
};

fn meetings(n: u64) -> Vec<LabeledMeeting> {
    let sampler = MeetingSampler {
        participants: (5, 8),
        event_seconds: (3.0, 10.0),
        // faint, partial reactions so the objectives pull apart
        intensity_factor: (2.0, 5.0),
        affected_fraction: (0.3, 0.7),
        ..MeetingSampler::default()
    };
    (0..n)
        .map(|i| {
            let (stream, truth) = generate(&sampler.sample(700 + i)).unwrap();
            LabeledMeeting {
                name: format!("m{i}"),
                stream,
                truth,
            }
        })
        .collect()
}

fn brute_report(m: &LabeledMeeting, cfg: &RunConfig) -> EvalReport {
    let out = run_pipeline(&m.stream, cfg).unwrap();
    score(&out.events, &m.truth, m.stream.meta.frame_count).unwrap()
}

fn pooled(reports: &[EvalReport], idx: &[usize]) -> EvalReport {
    let mut r = EvalReport::default();
    for &i in idx {
        r.add(&reports[i]);
    }
    r
}

fn small_grid() -> ParameterGrid {
    ParameterGrid {
        method: DetectionMethod::StatProfile,
        windows: vec![5, 7, 9],
        thresholds: vec![1.2, 1.8, 2.6],
        epsilons: vec![3, 9, 15],
        participant_ratios: vec![0.5],
    }
}

#[test]
fn single_point_sweep_equals_plain_scoring() {
    let ms = meetings(4);
    let mut grid = small_grid();
    grid.windows = vec![7];
    grid.thresholds = vec![1.8];
    grid.epsilons = vec![9];
    let base = RunConfig::default();
    let reports: Vec<EvalReport> = ms.iter().map(|m| brute_report(m, &base)).collect();
    let opts = SweepOptions {
        folds: 2,
        ..SweepOptions::default()
    };
    let r = sweep(&ms, &grid, &base, &opts).unwrap();
    let folds = fold_assignment(ms.len(), 2, 0).unwrap();
    for (f, test) in r.folds.iter().zip(&folds) {
        let train: Vec<usize> = (0..ms.len()).filter(|m| !test.contains(m)).collect();
        assert_eq!(f.outcome.selected_index, 0);
        assert_eq!(f.outcome.test_report, pooled(&reports, test));
        assert_eq!(f.outcome.train_report, pooled(&reports, &train));
    }
}

#[test]
fn selection_matches_brute_force() {
    let ms = meetings(6);
    let grid = small_grid();
    let base = RunConfig::default();
    let points = grid.points();
    // reports[point][meeting]
    let reports: Vec<Vec<EvalReport>> = points
        .iter()
        .map(|p| {
            ms.iter()
                .map(|m| brute_report(m, &p.apply(grid.method, &base)))
                .collect()
        })
        .collect();

    // the points must score differently, or ties decide everything
    let all: Vec<usize> = (0..ms.len()).collect();
    let distinct: std::collections::BTreeSet<_> = reports
        .iter()
        .map(|r| {
            let t = pooled(r, &all);
            (t.tp, t.fp)
        })
        .collect();
    assert!(distinct.len() > 1, "{distinct:?}");

    for objective in [Objective::Precision, Objective::Recall, Objective::F1] {
        let opts = SweepOptions {
            folds: 3,
            seed: 5,
            objective,
        };
        let r = sweep(&ms, &grid, &base, &opts).unwrap();
        let folds = fold_assignment(ms.len(), 3, 5).unwrap();
        for (f, test) in r.folds.iter().zip(&folds) {
            let train: Vec<usize> = (0..ms.len()).filter(|m| !test.contains(m)).collect();
            // strict improvement in (objective, recall, smaller window) keeps the earlier point on full ties
            let key = |p: usize| {
                let t = pooled(&reports[p], &train);
                let v = |x: Option<f64>| x.unwrap_or(-1.0);
                let primary = match objective {
                    Objective::Precision => t.precision(),
                    Objective::Recall => t.recall(),
                    Objective::F1 => t.f1(),
                };
                let secondary = if objective == Objective::Recall {
                    t.precision()
                } else {
                    t.recall()
                };
                (v(primary), v(secondary), -(points[p].window as f64))
            };
            let mut best = 0;
            for p in 1..points.len() {
                if key(p).partial_cmp(&key(best)) == Some(std::cmp::Ordering::Greater) {
                    best = p;
                }
            }
            assert_eq!(
                f.outcome.selected_index, best,
                "{objective:?} fold {}",
                f.fold
            );
            assert_eq!(f.outcome.test_report, pooled(&reports[best], test));
        }
    }
}

#[test]
fn folds_partition_the_meetings() {
    let ms = meetings(5);
    let r = sweep(
        &ms,
        &small_grid(),
        &RunConfig::default(),
        &SweepOptions {
            folds: 5,
            ..SweepOptions::default()
        },
    )
    .unwrap();
    let mut seen: Vec<String> = r
        .folds
        .iter()
        .flat_map(|f| f.test_meetings.clone())
        .collect();
    seen.sort();
    assert_eq!(seen, ["m0", "m1", "m2", "m3", "m4"]);
    let mut total = EvalReport::default();
    r.folds
        .iter()
        .for_each(|f| total.add(&f.outcome.test_report));
    let frames: u64 = ms.iter().map(|m| m.stream.meta.frame_count).sum();
    assert_eq!(total.total(), frames);
}

#[test]
fn too_few_meetings_for_the_folds_is_rejected() {
    let ms = meetings(2);
    let err = sweep(
        &ms,
        &small_grid(),
        &RunConfig::default(),
        &SweepOptions::default(),
    )
    .unwrap_err();
    assert!(err.is_validation(), "{err}");
}
