use dagger_charge::dataset::{RolloutConfig, SamplingConfig};
use dagger_charge::eval::{
    bench_timing, evaluate_policies, single_scenario_trace, ErrorStats, EvalReport, EvalSetup, Evaluated,
    Scenario, ViolationStats, HIST_BIN, HIST_RANGE,
};
use dagger_charge::expert::ExpertConfig;
use dagger_charge::par::Exec;
use dagger_charge::policy::{Architecture, PolicyModel, Preprocess};
use dagger_charge::Error;
use proptest::prelude::*;

const N_STEPS: usize = 20;

fn setup() -> EvalSetup {
    EvalSetup {
        sampling: SamplingConfig {
            n_steps: N_STEPS,
            ..Default::default()
        },
        expert: ExpertConfig::default(),
        rollout: RolloutConfig::default(),
        exec: Exec::Parallel,
    }
}

fn random_policy(seed: u64) -> PolicyModel {
    let arch = Architecture {
        n_w: 20,
        lstm: vec![5],
        dense: vec![4],
        i_min: -10.0,
        i_max: 10.0,
    };
    let mut m = PolicyModel::init(arch, Preprocess::default(), seed).unwrap();
    // Push the head towards the upper bound so that constraints get exercised.
    m.set_output_prior(9.5);
    m
}

/// Population mean and standard deviation, two-pass.
fn oracle_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt())
}

#[test]
fn expert_against_itself_has_zero_error() {
    let report = evaluate_policies(&setup(), &[("expert", Evaluated::Expert)], 3, 9).unwrap();
    let e = report.policy("expert").unwrap();
    assert_eq!(e.steps, 3 * N_STEPS);
    assert_eq!(e.current_error.count, 3 * N_STEPS);
    assert_eq!(e.current_error.mean, 0.0);
    assert_eq!(e.current_error.std, 0.0);
    assert_eq!(e.current_error.mean_abs, 0.0);
    assert_eq!(e.terminal_soc_error.len(), 3);
}

#[test]
fn violation_statistics_recompute_from_raw_exceedances() {
    let model = random_policy(4);
    let report = evaluate_policies(
        &setup(),
        &[("expert", Evaluated::Expert), ("random", Evaluated::Policy(&model))],
        4,
        2,
    )
    .unwrap();
    let mut violated = 0;
    for p in &report.policies {
        for v in [&p.core_temperature, &p.surface_temperature, &p.voltage] {
            assert!(v.count <= v.steps);
            assert_eq!(v.steps, p.steps);
            assert_eq!(v.exceedances.len(), v.count);
            assert!(v.exceedances.iter().all(|&e| e > 0.0));
            if v.count > 0 {
                violated += 1;
                let (mean, std) = oracle_mean_std(&v.exceedances);
                assert!((mean - v.mean).abs() <= 1e-12);
                assert!((std - v.std).abs() <= 1e-12);
            }
        }
    }
    assert!(violated > 0, "no violations to check");
}

#[test]
fn evaluation_is_seeded_and_executor_independent() {
    let model = random_policy(1);
    let policies = [("expert", Evaluated::Expert), ("random", Evaluated::Policy(&model))];
    let a = evaluate_policies(&setup(), &policies, 3, 5).unwrap();
    let b = evaluate_policies(&setup(), &policies, 3, 5).unwrap();
    let seq = EvalSetup {
        exec: Exec::Sequential,
        ..setup()
    };
    let c = evaluate_policies(&seq, &policies, 3, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = evaluate_policies(&setup(), &policies, 3, 6).unwrap();
    assert_ne!(a.policies[1].terminal_soc_error, d.policies[1].terminal_soc_error);

    let text = serde_json::to_string(&a).unwrap();
    let back: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, a);
}

#[test]
fn mismatched_models_rejected() {
    let mut arch = random_policy(0).arch().clone();
    arch.n_w = 10;
    let short = PolicyModel::init(arch, Preprocess::default(), 0).unwrap();
    assert!(matches!(
        evaluate_policies(&setup(), &[("p", Evaluated::Policy(&short))], 1, 0),
        Err(Error::WindowMismatch(10, 20))
    ));
    let mut arch = random_policy(0).arch().clone();
    arch.i_max = 5.0;
    let narrow = PolicyModel::init(arch, Preprocess::default(), 0).unwrap();
    assert!(evaluate_policies(&setup(), &[("p", Evaluated::Policy(&narrow))], 1, 0).is_err());
    assert!(evaluate_policies(&setup(), &[("e", Evaluated::Expert)], 0, 0).is_err());
}

#[test]
fn showcase_scenario_traces() {
    let model = random_policy(3);
    let scenario = Scenario::default();
    let (expert, policy) =
        single_scenario_trace(Some(&model), &ExpertConfig::default(), &RolloutConfig::default(), &scenario).unwrap();
    let policy = policy.unwrap();
    assert_eq!(expert.records.len(), 430);
    assert_eq!(policy.records.len(), 430);
    assert_eq!(expert.records.iter().filter(|r| r.resting).count(), 30);
    let last = expert.records.last().unwrap();
    assert!((last.soc - 0.9).abs() <= 0.01, "terminal soc {}", last.soc);
    assert_eq!(expert.records[0].t_core, 302.5);
    assert_eq!(expert.records[0].t_surf, 302.5);

    let mut csv = Vec::new();
    policy.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "step,time_s,soc,t_core_k,t_surf_k,voltage_v,current_a,expert_current_a"
    );
    assert_eq!(text.lines().count(), 431);
}

#[test]
fn timing_table_shape() {
    let sampling = SamplingConfig::default();
    let horizons = [1, 2, 4, 8, 16];
    let a = bench_timing(&ExpertConfig::default(), &horizons, &random_policy(0), 30, 1, &sampling).unwrap();
    let b = bench_timing(&ExpertConfig::default(), &horizons[..2], &random_policy(9), 30, 1, &sampling).unwrap();
    assert_eq!(a.rows.len(), 10);
    for &h in &horizons {
        for method in ["expert", "policy"] {
            let r = a.row(method, h).unwrap();
            assert_eq!(r.calls, 30);
            assert!(r.mean_s > 0.0 && r.median_s > 0.0);
        }
    }
    assert_eq!(a.n_states, b.n_states);
    assert!(bench_timing(&ExpertConfig::default(), &horizons, &random_policy(0), 29, 1, &sampling).is_err());
    assert!(bench_timing(&ExpertConfig::default(), &[0], &random_policy(0), 30, 1, &sampling).is_err());
}

proptest! {
    #[test]
    fn conditional_means_match_oracle(
        values in prop::collection::vec(300.0f64..320.0, 1..200),
        bound in 305.0f64..315.0,
    ) {
        let s = ViolationStats::from_values(bound, &values);
        let over: Vec<f64> = values.iter().filter(|&&v| v > bound).map(|v| v - bound).collect();
        prop_assert_eq!(s.count, over.len());
        prop_assert_eq!(s.steps, values.len());
        if over.is_empty() {
            prop_assert_eq!((s.mean, s.std), (0.0, 0.0));
        } else {
            let (m, sd) = oracle_mean_std(&over);
            prop_assert!((s.mean - m).abs() <= 1e-12);
            prop_assert!((s.std - sd).abs() <= 1e-12);
            prop_assert!(s.max >= s.mean);
        }
    }

    #[test]
    fn error_histogram_accounts_for_every_sample(errors in prop::collection::vec(-30.0f64..30.0, 0..300)) {
        let s = ErrorStats::from_errors(&errors);
        prop_assert_eq!(s.count, errors.len());
        prop_assert_eq!(s.histogram.total(), errors.len());
        let n_bins = ((HIST_RANGE.1 - HIST_RANGE.0) / HIST_BIN).round() as usize;
        prop_assert_eq!(s.histogram.counts.len(), n_bins);
        let inside = errors.iter().filter(|&&e| (HIST_RANGE.0..HIST_RANGE.1).contains(&e)).count();
        prop_assert_eq!(s.histogram.counts.iter().sum::<usize>(), inside);
        if !errors.is_empty() {
            prop_assert!((s.variance - s.std * s.std).abs() <= 1e-9 * s.variance.max(1.0));
        }
    }
}
