use std::collections::{BTreeMap, BTreeSet};

use citycoord_core::reward::*;
use citycoord_core::tasks::{MetricKind, TaskId};
use proptest::prelude::*;

fn task(task: TaskId, values: &[f64]) -> TaskMetrics {
    TaskMetrics {
        task,
        values: task.metrics().iter().copied().zip(values.iter().copied()).collect(),
        empty: BTreeSet::new(),
    }
}

fn step(tasks: Vec<TaskMetrics>, tt: f64, tp: f64) -> StepMetrics {
    StepMetrics {
        tasks: tasks.into_iter().map(|m| (m.task, m)).collect(),
        global: GlobalMetrics {
            avg_travel_time: tt,
            throughput: tp,
            ..GlobalMetrics::default()
        },
    }
}

fn stub_breakdown(steps: &[StepReward], alpha: f64, beta: f64) -> RewardBreakdown {
    let mut ri: BTreeMap<TaskId, f64> = BTreeMap::new();
    for s in steps {
        for (t, v) in &s.task_ri {
            *ri.entry(*t).or_default() += v / steps.len() as f64;
        }
    }
    breakdown(steps, &stub_verdict(&ri), alpha, beta).unwrap()
}

#[test]
fn default_weights_by_hand() {
    use TaskId::*;
    // Signal: throughput 100→120, wait 50→40, travel 200→180.
    let base = step(vec![task(SignalTiming, &[100.0, 50.0, 200.0])], 200.0, 100.0);
    let run = step(vec![task(SignalTiming, &[120.0, 40.0, 180.0])], 180.0, 120.0);
    let r = step_reward(&run, &base, &[SignalTiming]).unwrap();
    // RI = (0.2 + 0.2 + 0.1) / 3
    assert!((r.f_ri - 1.0 / 6.0).abs() < 1e-15);
    assert!((r.f_tt - 0.1).abs() < 1e-15);
    assert_eq!(r.f_tp, 1.0);
    let b = stub_breakdown(&[r], 0.5, 0.5);
    // Stub judge: round(5·1 + 5·(1/6 + 1/2)) = round(8.33) = 8.
    assert_eq!(b.judge_score, 8);
    // 0.5·(0.1 + 1 + 1/6) + 0.5·0.8 = 31/30
    assert!((b.total - 31.0 / 30.0).abs() < 1e-12, "{}", b.total);
    assert!((b.r_env - 19.0 / 15.0).abs() < 1e-12);
}

#[test]
fn two_tasks_two_steps_by_hand() {
    use TaskId::*;
    let base = step(
        vec![
            task(SignalTiming, &[100.0, 50.0, 200.0]),
            task(TaxiDispatching, &[100.0, 10.0]),
        ],
        200.0,
        100.0,
    );
    // Step 1: signal RI (−0.1 + 0 + 0)/3, taxi RI (−0.1 + 0.2)/2 = 0.05.
    let run1 = step(
        vec![
            task(SignalTiming, &[90.0, 50.0, 200.0]),
            task(TaxiDispatching, &[90.0, 12.0]),
        ],
        250.0,
        90.0,
    );
    // Step 2: everything equal to the baseline.
    let run2 = base.clone();
    let tasks = [SignalTiming, TaxiDispatching];
    let (r_env, steps) = system_reward(&[run1, run2], &[base.clone(), base], &tasks).unwrap();
    let s1_ri = (-0.1 / 3.0 + 0.05) / 2.0;
    let s1 = 0.0 + 0.9 + s1_ri;
    let s2 = 0.0 + 1.0 + 0.0;
    assert!((r_env - (s1 + s2)).abs() < 1e-12);
    let b = stub_breakdown(&steps, 0.5, 0.5);
    // Mean task RI over steps: signal −1/60, taxi 0.025 → one of two improved,
    // mean 0.004166…: round(2.5 + 5·0.504166) = round(5.02) = 5.
    assert_eq!(b.judge_score, 5);
    assert!((b.total - (0.5 * (s1 + s2) + 0.25)).abs() < 1e-12);
    assert!((b.f_ri - s1_ri / 2.0).abs() < 1e-12);
    assert_eq!(b.steps, 2);
}

#[test]
fn weights_and_step_counts_are_checked() {
    assert!(matches!(
        total_reward(1.0, 5, 0.0, 0.5),
        Err(RewardError::NonPositiveWeight { .. })
    ));
    assert!(matches!(
        system_reward(&[], &[step(vec![], 1.0, 1.0)], &[]),
        Err(RewardError::StepMismatch { .. })
    ));
    let base = step(vec![], 1.0, 1.0);
    assert!(matches!(
        step_reward(&base, &base, &[TaskId::SignalTiming]),
        Err(RewardError::MissingTask(_))
    ));
}

fn signal_values() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(1.0f64..1000.0)
}

proptest! {
    #[test]
    fn self_comparison_is_neutral(v in signal_values(), tt in 1.0f64..1000.0, tp in 1.0f64..1000.0) {
        let m = step(vec![task(TaskId::SignalTiming, &v)], tt, tp);
        let r = step_reward(&m, &m, &[TaskId::SignalTiming]).unwrap();
        prop_assert_eq!(r.f_ri, 0.0);
        prop_assert_eq!(r.f_tt, 0.0);
        prop_assert_eq!(r.f_tp, 1.0);
    }

    #[test]
    fn f_ri_sign_follows_direction(v in signal_values(), k in 0.05f64..0.9) {
        let base = step(vec![task(TaskId::SignalTiming, &v)], 100.0, 100.0);
        // Better: more throughput, less waiting and travel.
        let better = step(vec![task(TaskId::SignalTiming, &[v[0] * (1.0 + k), v[1] * (1.0 - k), v[2] * (1.0 - k)])], 100.0, 100.0);
        let worse = step(vec![task(TaskId::SignalTiming, &[v[0] * (1.0 - k), v[1] * (1.0 + k), v[2] * (1.0 + k)])], 100.0, 100.0);
        let t = [TaskId::SignalTiming];
        prop_assert!(step_reward(&better, &base, &t).unwrap().f_ri > 0.0);
        prop_assert!(step_reward(&worse, &base, &t).unwrap().f_ri < 0.0);
    }

    #[test]
    fn normalized_terms_stay_in_range(tt in 0.0f64..1e4, r in 0.0f64..1e4, tp in 0.0f64..1e4, q in 0.0f64..1e4) {
        prop_assert!((0.0..=1.0).contains(&f_tt(tt, r)));
        prop_assert!((0.0..=1.0).contains(&f_tp(tp, q)));
    }

    #[test]
    fn relative_improvement_is_clipped(v in 0.0f64..1e6, b in 0.0f64..1e6) {
        for kind in [MetricKind::Throughput, MetricKind::AvgWaiting] {
            let ri = relative_improvement(kind, v, b);
            prop_assert!((-1.0..=1.0).contains(&ri));
        }
    }
}

#[test]
fn stub_score_formula() {
    assert_eq!(stub_score(0.0, 0.0), 3); // 2.5 rounds up
    assert_eq!(stub_score(1.0, 0.5), 10);
    assert_eq!(stub_score(0.0, -0.5), 0);
    assert_eq!(stub_score(0.5, 0.1), 6);
    let v = stub_verdict(&BTreeMap::new());
    assert_eq!(v.score, 3);
    assert_eq!(v.source, JudgeSource::Stub);
}

struct Canned(&'static str);

impl Judge for Canned {
    fn complete(&self, prompt: &str) -> Result<String, JudgeError> {
        assert!(prompt.contains("signal_timing"));
        Ok(self.0.to_owned())
    }
}

#[test]
fn external_judge_and_fallback() {
    let ri = BTreeMap::from([(TaskId::SignalTiming, 0.2)]);
    let good = Canned("Score: 7\nBrief Comment: fine");
    let v = coordination_score("t", &[TaskId::SignalTiming], &ri, Some((&good, DEFAULT_RUBRIC)));
    assert_eq!((v.score, v.source, v.fallback), (7, JudgeSource::External, false));
    let bad = Canned("seven out of ten");
    let v = coordination_score("t", &[TaskId::SignalTiming], &ri, Some((&bad, DEFAULT_RUBRIC)));
    assert_eq!((v.source, v.fallback), (JudgeSource::Stub, true));
    assert_eq!(v.score, stub_verdict(&ri).score);
}
