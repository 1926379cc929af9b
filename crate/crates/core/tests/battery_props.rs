use dagger_charge::battery::*;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = BatteryParams> {
    (5.5f64..8.0, 0.014f64..0.019).prop_map(|(c, r)| BatteryParams {
        capacity_ah: c,
        r_sei_ohm: r,
        ..BatteryParams::default()
    })
}

/// Steady state of the two-node network with constant core heat `q`:
/// all heat crosses both resistances in series.
fn analytic_steady_state(p: &BatteryParams, q: f64) -> (f64, f64) {
    let ts = p.t_env + q * p.r_surf_env;
    (ts + q * p.r_core_surf, ts)
}

proptest! {
    #[test]
    fn soc_matches_closed_form_integral(
        p in params(),
        soc0 in 0.0f64..1.0,
        currents in prop::collection::vec(-10.0f64..10.0, 1..40),
    ) {
        let dt = 10.0;
        let mut x = BatteryState::at_rest(soc0, 300.0, 300.0);
        let mut expected = soc0;
        for &i in &currents {
            let out = step_checked(&x, &p, i, dt).unwrap();
            expected = (expected + i * dt / (3600.0 * p.capacity_ah)).clamp(0.0, 1.0);
            if !out.soc_saturated {
                let scale = expected.abs().max(1e-300);
                prop_assert!((out.state.soc - expected).abs() / scale <= 1e-12 || (out.state.soc - expected).abs() < 1e-15);
            }
            // resynchronise after clamping, as the simulator does
            expected = out.state.soc;
            x = out.state;
        }
    }

    #[test]
    fn soc_stays_in_unit_interval(
        p in params(),
        soc0 in 0.0f64..1.0,
        currents in prop::collection::vec(-10.0f64..10.0, 1..100),
    ) {
        let mut x = BatteryState::at_rest(soc0, 300.0, 300.0);
        for &i in &currents {
            x = step(&x, &p, i, 10.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&x.soc));
        }
    }

    #[test]
    fn voltage_increases_with_current(p in params(), soc in 0.0f64..1.0, a in -10.0f64..10.0, d in 1e-3f64..5.0) {
        let x = BatteryState::at_rest(soc, 300.0, 300.0);
        let v1 = terminal_voltage(&x, &p, a).unwrap();
        let v2 = terminal_voltage(&x, &p, a + d).unwrap();
        prop_assert!(v2 > v1);
    }

    #[test]
    fn ocv_increases_with_soc(p in params(), s in 0.0f64..0.99, d in 1e-4f64..0.01) {
        prop_assert!(p.ocv(s + d) > p.ocv(s));
    }

    #[test]
    fn heat_is_nonnegative(p in params(), soc in 0.0f64..1.0, i in -10.0f64..10.0) {
        let x = BatteryState::at_rest(soc, 300.0, 300.0);
        prop_assert!(heat_generation(&x, &p, i).unwrap() >= 0.0);
    }

    #[test]
    fn stepping_is_deterministic(p in params(), soc in 0.0f64..1.0, tc in 298.0f64..313.0, ts in 298.0f64..313.0, i in -10.0f64..10.0) {
        let x = BatteryState::at_rest(soc, tc, ts);
        prop_assert_eq!(step(&x, &p, i, 10.0).unwrap(), step(&x, &p, i, 10.0).unwrap());
    }

    #[test]
    fn thermal_steady_state_matches_analytic(q in 0.0f64..5.0, tc0 in 295.0f64..320.0, ts0 in 295.0f64..320.0) {
        let p = BatteryParams::default();
        let (tc_ss, ts_ss) = analytic_steady_state(&p, q);
        let (mut tc, mut ts) = (tc0, ts0);
        // slowest time constant is a few hundred seconds; 40000 s is ample
        for _ in 0..4000 {
            (tc, ts) = thermal_step(&p, tc, ts, q, 10.0);
        }
        prop_assert!((tc - tc_ss).abs() < 0.01, "core {} vs {}", tc, tc_ss);
        prop_assert!((ts - ts_ss).abs() < 0.01, "surface {} vs {}", ts, ts_ss);
    }
}

#[test]
fn zero_input_at_ambient_is_an_exact_fixed_point() {
    let p = BatteryParams::default();
    let x0 = BatteryState::at_rest(0.42, p.t_env, p.t_env);
    let mut x = x0;
    for _ in 0..1000 {
        x = step(&x, &p, 0.0, 10.0).unwrap();
    }
    assert_eq!(x, x0);
}

#[test]
fn single_step_thermal_matches_matrix_exponential() {
    // Independent oracle: exact solution of the linear 2x2 system via its
    // eigen-decomposition, compared against the RK4 step.
    let p = BatteryParams::default();
    let q = 2.5;
    let (tc0, ts0) = (305.0, 301.0);
    let (a11, a12) = (-1.0 / (p.r_core_surf * p.c_core), 1.0 / (p.r_core_surf * p.c_core));
    let (a21, a22) = (
        1.0 / (p.r_core_surf * p.c_surf),
        -(1.0 / p.r_core_surf + 1.0 / p.r_surf_env) / p.c_surf,
    );
    let (tc_ss, ts_ss) = analytic_steady_state(&p, q);
    let (e1, e2) = (tc0 - tc_ss, ts0 - ts_ss);
    let tr = a11 + a22;
    let det = a11 * a22 - a12 * a21;
    let disc = (tr * tr / 4.0 - det).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    let dt = 10.0;
    // e(t) = [(A - l2 I) e^{l1 t} - (A - l1 I) e^{l2 t}] e0 / (l1 - l2)
    let apply = |l: f64| (((a11 - l) * e1 + a12 * e2), (a21 * e1 + (a22 - l) * e2));
    let (m1, n1) = apply(l2);
    let (m2, n2) = apply(l1);
    let tc = tc_ss + (m1 * (l1 * dt).exp() - m2 * (l2 * dt).exp()) / (l1 - l2);
    let ts = ts_ss + (n1 * (l1 * dt).exp() - n2 * (l2 * dt).exp()) / (l1 - l2);
    let (tc_rk, ts_rk) = thermal_step(&p, tc0, ts0, q, dt);
    assert!((tc - tc_rk).abs() < 2e-5, "{tc} vs {tc_rk}");
    assert!((ts - ts_rk).abs() < 2e-5, "{ts} vs {ts_rk}");
}
