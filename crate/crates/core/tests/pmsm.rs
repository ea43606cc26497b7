use nalgebra::{DMatrix, DVector};
use persidskii::model::{rhs, verify_sector_in};
use persidskii::pmsm::*;
use proptest::prelude::*;

fn params() -> PmsmParams {
    PmsmParams::default()
}

fn close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn state_in_box() -> impl Strategy<Value = (DVector<f64>, DVector<f64>, f64)> {
    let wm_max = params().omega_e_max() / params().p_pairs;
    (-15.0..15.0f64, -15.0..15.0f64, -wm_max..wm_max, -200.0..200.0f64, -200.0..200.0f64, 0.0..9.5f64)
        .prop_map(|(id, iq, wm, ud, uq, tl)| (DVector::from_vec(vec![id, iq, wm]), DVector::from_vec(vec![ud, uq]), tl))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn scheduled_cast_matches_machine_on_box((x, u, tl) in state_in_box()) {
        let p = params();
        let sys = to_persidskii(&p, p.omega_e_max(), 0.0).unwrap();
        let w = cast_input(CastMode::Scheduled, &p, &x, &u, tl).unwrap();
        let f_cast = rhs(&sys, &x, &x, &w).unwrap();
        let f_true = pmsm_rhs(&p, &x, &u, tl).unwrap();
        prop_assert!(close(&f_cast, &f_true, 1e-10), "{f_cast} vs {f_true}");
    }

    #[test]
    fn bounded_disturbance_cast_matches_machine((x, u, tl) in state_in_box()) {
        let p = params();
        let sys = to_persidskii_with(&p, p.omega_e_max(), 0.0, CastMode::BoundedDisturbance).unwrap();
        let w = cast_input(CastMode::BoundedDisturbance, &p, &x, &u, tl).unwrap();
        let f_cast = rhs(&sys, &x, &x, &w).unwrap();
        prop_assert!(close(&f_cast, &pmsm_rhs(&p, &x, &u, tl).unwrap(), 1e-10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unforced_energy_never_increases(id in -10.0..10.0f64, iq in -10.0..10.0f64, wm in -150.0..150.0f64) {
        let p = params();
        let u = DVector::zeros(2);
        let load = LoadProfile::default();
        let mut x = DVector::from_vec(vec![id, iq, wm]);
        let mut e = p.energy(&x);
        for k in 0..2000 {
            x = plant_rk4(&p, &x, &u, &load, k as f64 * 1e-5, 1e-5).unwrap();
            let e_next = p.energy(&x);
            prop_assert!(e_next <= e + 1e-9 * (1.0 + e), "energy rose from {e} to {e_next}");
            e = e_next;
        }
    }
}

#[test]
fn zero_state_is_an_equilibrium_of_both_models() {
    let p = params();
    let z = DVector::zeros(3);
    assert_eq!(pmsm_rhs(&p, &z, &DVector::zeros(2), 0.0).unwrap(), z);
    let sys = to_persidskii(&p, p.omega_e_max(), 0.0).unwrap();
    assert_eq!(rhs(&sys, &z, &z, &DVector::zeros(3)).unwrap(), z);
}

#[test]
fn machine_derivative_by_hand() {
    let p = params();
    let x = DVector::from_vec(vec![1.0, 2.0, 10.0]);
    let u = DVector::from_vec(vec![5.0, 20.0]);
    let f = pmsm_rhs(&p, &x, &u, 0.5).unwrap();
    let we = 30.0;
    let want = [
        (-0.82 * 1.0 + we * 5.2e-3 * 2.0 + 5.0) / 5.2e-3,
        (-0.82 * 2.0 - we * 5.2e-3 * 1.0 - we * 0.175 + 20.0) / 5.2e-3,
        (1.5 * 3.0 * 0.175 * 2.0 - 1e-3 * 10.0 - 0.5) / 3e-3,
    ];
    for i in 0..3 {
        assert!((f[i] - want[i]).abs() < 1e-9 * want[i].abs().max(1.0), "{i}: {} vs {}", f[i], want[i]);
    }
}

#[test]
fn machine_rejects_wrong_dimensions() {
    assert!(pmsm_rhs(&params(), &DVector::zeros(2), &DVector::zeros(2), 0.0).is_err());
}

#[test]
fn scheduled_channels_stay_in_sector_over_the_speed_box() {
    let p = params();
    let sys = to_persidskii(&p, p.omega_e_max(), 0.0).unwrap();
    let wm_max = p.omega_e_max() / p.p_pairs;
    for nl in &sys.nonlinearities {
        assert!(nl.is_incrementally_sector_bounded() || nl.sigma > 0.0);
        for k in 0..=40 {
            // includes speeds outside the box, where the companion saturates
            let wm = -1.5 * wm_max + 3.0 * wm_max * k as f64 / 40.0;
            let chk = verify_sector_in(nl, (-20.0, 20.0), 201, &[0.0, 0.0, wm]).unwrap();
            assert!(chk.pass, "ω_m = {wm}: worst {}", chk.worst);
        }
    }
}

#[test]
fn holding_point_is_a_steady_state() {
    let p = params();
    let (x, u) = holding_point(&p, 100.0, 3.0);
    let f = pmsm_rhs(&p, &x, &u, 3.0).unwrap();
    assert!(f.amax() < 1e-9, "{f}");
}

#[test]
fn foc_at_reference_outputs_feedforward_only() {
    let p = params();
    let g = FocGains::from_bandwidths(&p, 500.0, 50.0).unwrap();
    let mut foc = FocController::new(g, p, 1e-3).unwrap();
    let wm = 80.0;
    let (u, iq_ref) = foc.step(&DVector::from_vec(vec![0.0, 0.0, wm]), wm).unwrap();
    assert_eq!(iq_ref, 0.0);
    assert!(u[0].abs() < 1e-12);
    assert!((u[1] - p.p_pairs * wm * p.psi_f).abs() < 1e-12);
}

#[test]
fn foc_pure_integrator_ramps_current_reference() {
    let p = params();
    let g = FocGains { kp_i: 1.0, ki_i: 0.0, kp_w: 0.0, ki_w: 0.4, i_max: 1e9, u_max: 1e9, decoupling: false };
    let dt = 1e-3;
    let mut foc = FocController::new(g, p, dt).unwrap();
    let e = 2.5;
    let n = 300;
    let x = DVector::from_vec(vec![0.0, 0.0, 10.0]);
    for _ in 0..n {
        foc.step(&x, 10.0 + e).unwrap();
    }
    let (_, iq_ref) = foc.step(&x, 10.0 + e).unwrap();
    let want = g.ki_w * e * n as f64 * dt;
    assert!((iq_ref - want).abs() < 1e-12 * want, "{iq_ref} vs {want}");
}

#[test]
fn foc_current_loop_is_a_decade_faster() {
    let p = params();
    let g = FocGains::from_bandwidths(&p, 500.0, 50.0).unwrap();
    let (bi, bs) = foc_bandwidths(&p, &g).unwrap();
    assert!(bi >= 10.0 * bs - 1e-6, "current {bi} Hz, speed {bs} Hz");
    assert!((bi - 500.0).abs() < 5.0, "current loop {bi} Hz");
}

#[test]
fn foc_delay_tuning_limits_bandwidth() {
    let p = params();
    let g = FocGains::delay_tuned(&p, 5e-3, 500.0).unwrap();
    assert!(!g.decoupling);
    let (bi, bs) = foc_bandwidths(&p, &g).unwrap();
    assert!(bi < 30.0 && bi >= 10.0 * bs - 1e-6, "current {bi} Hz, speed {bs} Hz");
    assert!(FocGains::delay_tuned(&p, 0.0, 500.0).unwrap().decoupling);
}

#[test]
fn foc_clamps_voltages() {
    let p = params();
    let g = FocGains::from_bandwidths(&p, 500.0, 50.0).unwrap();
    let mut foc = FocController::new(g, p, 1e-3).unwrap();
    let (u, iq_ref) = foc.step(&DVector::from_vec(vec![0.0, 0.0, 0.0]), 1e4).unwrap();
    assert!(u.amax() <= p.u_max);
    assert_eq!(iq_ref, p.i_max);
}

#[test]
fn load_profiles() {
    let step = LoadProfile::Step { time: 1.0, magnitude: 2.0 };
    assert_eq!(step.at(0.999), 0.0);
    assert_eq!(step.at(1.0), 2.0);
    let sum = LoadProfile::Composite(vec![step.clone(), LoadProfile::Step { time: 2.0, magnitude: 1.0 }]);
    assert_eq!(sum.at(2.5), 3.0);
    let sine = LoadProfile::Sinusoid { amp: 1.0, freq: 1.0, phase: 0.0 };
    assert!((sine.at(0.25) - 1.0).abs() < 1e-12);
    assert!(step.validate(9.5).is_ok());
    assert!(LoadProfile::Step { time: 1.0, magnitude: -1.0 }.validate(9.5).is_err());
    assert!(LoadProfile::Step { time: 1.0, magnitude: 20.0 }.validate(9.5).is_err());
}

#[test]
fn control_ratio_requires_integer_multiple() {
    assert_eq!(control_ratio(1e-4, 1e-3).unwrap(), 10);
    let err = control_ratio(1e-4, 1.5e-4).unwrap_err().to_string();
    assert!(err.contains("dt_control_multiple_of_dt_sim"), "{err}");
    assert!(control_ratio(0.0, 1e-3).is_err());
}

#[test]
fn config_validation_names_the_rule() {
    let mut cfg = ExperimentConfig::new(Scenario::ObserverComparison);
    assert!(cfg.validate().is_ok());
    cfg.dt_control = 2.5e-4 * 1.1;
    assert!(cfg.validate().unwrap_err().to_string().contains("dt_control_multiple_of_dt_sim"));
    let mut cfg = ExperimentConfig::new(Scenario::DelaySweep);
    cfg.sweep.tau_grid = vec![10e-3, 5e-3];
    assert!(cfg.validate().unwrap_err().to_string().contains("tau_grid_ascending"));
    cfg.sweep.tau_grid = vec![5.5e-3];
    assert!(cfg.validate().unwrap_err().to_string().contains("tau_grid_multiple_of_dt_control"));
}

#[test]
fn transport_delay_line_shifts_commands() {
    let u0 = DVector::from_vec(vec![0.0, 0.0]);
    let mut line = DelayLine::new(DelayMode::Transport, 3e-4, 1e-4, &u0);
    let outs: Vec<f64> = (1..=6).map(|k| line.advance(&DVector::from_vec(vec![k as f64, 0.0]), 1e-4)[0]).collect();
    assert_eq!(outs, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn pade_delay_line_settles_to_the_command() {
    let u0 = DVector::from_vec(vec![0.0, 0.0]);
    let mut line = DelayLine::new(DelayMode::Pade, 5e-3, 1e-4, &u0);
    let cmd = DVector::from_vec(vec![1.0, -2.0]);
    let mut out = u0;
    for _ in 0..2000 {
        out = line.advance(&cmd, 1e-4);
    }
    assert!((&out - &cmd).amax() < 1e-6, "{out}");
}

#[test]
fn foc_regulates_constant_reference() {
    let mut cfg = ExperimentConfig::new(Scenario::TrackingComparison);
    cfg.reference = SpeedReference::Constant { rpm: 900.0 };
    let run = run_controller(&cfg, None, ControllerKind::Foc, cfg.tau_injected, 0, 2.0, &LoadProfile::default()).unwrap();
    let w = rpm_to_rad(900.0);
    assert!(run.diverged_at.is_none());
    assert!((run.states.last().unwrap()[2] - w).abs() < 0.01 * w);
}

#[test]
fn certified_loop_cast_and_simulation_agree_on_decay() {
    let p = params();
    let cl = CertifiedLoop::default();
    assert!(cl.decays(&p, 1e-3, 1.0).unwrap());
    assert!(!cl.decays(&p, 0.04, 1.0).unwrap());
    let sys = cl.system(&p, 0.0).unwrap();
    assert_eq!(sys.a.nrows(), sys.c.ncols());
}

#[test]
fn normalization_round_trips() {
    let p = params();
    let norm = Normalization::centered(&p, 100.0);
    let u = DVector::from_vec(vec![3.0, 60.0]);
    assert!((norm.input_back(&norm.input(&u)) - &u).amax() < 1e-12);
    let (lo, hi) = norm.input_bounds(p.u_max);
    for i in 0..2 {
        assert!(lo[i] < hi[i]);
        assert!((norm.input_back(&DVector::from_vec(vec![hi[0], hi[1]]))[i] - p.u_max).abs() < 1e-9);
    }
}

#[test]
fn observer_scenario_is_deterministic_and_recomputable() {
    let mut cfg = ExperimentConfig::new(Scenario::ObserverComparison);
    cfg.observer.n_seeds = 2;
    let setup = observer_setup(&cfg).unwrap();
    let a = run_observer_with(&cfg, &setup).unwrap();
    let b = run_observer_with(&cfg, &setup).unwrap();
    assert_eq!(a, b);
    assert!(!a.rmse_sources.is_empty());
    for src in &a.rmse_sources {
        let v = recompute_rmse(&a, src).unwrap();
        assert!((v - a.metric(&src.key).unwrap()).abs() <= 1e-12, "{}", src.key);
    }
    let t = a.table("observer_seed0").unwrap();
    assert_eq!(t.columns[..4], ["t", "true_1", "true_2", "true_3"]);
}

#[test]
fn noiseless_exact_start_estimators_track() {
    let mut cfg = ExperimentConfig::new(Scenario::ObserverComparison);
    cfg.observer.n_seeds = 1;
    cfg.observer.noise_var = 0.0;
    cfg.observer.omega_init_error = 0.0;
    let rep = run_observer_experiment(&cfg).unwrap();
    for est in ["persidskii", "ekf"] {
        let r = rep.metric(&format!("rmse_speed.{est}.seed0")).unwrap();
        assert!(r < 0.5, "{est}: {r} rad/s");
    }
}

#[test]
fn estimator_model_keeps_only_the_load_input() {
    let p = params();
    let m = estimator_model(&p, p.omega_e_max()).unwrap();
    assert_eq!(m.d.ncols(), 1);
    assert_eq!(m.d, DMatrix::from_column_slice(3, 1, &[0.0, 0.0, -1.0 / p.j]));
}
