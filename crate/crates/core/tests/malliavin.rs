use approx::{assert_abs_diff_eq, assert_relative_eq};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mws::dynamics::{simulate_trajectory, ForceField, InitialCondition, SimConfig, Simulator};
use mws::malliavin::{
    samples_along, sensitivity_ensemble, weights_along, Observable, Perturbation,
    PerturbationLift, RecordGrid, SensitivityTarget, TermSelection,
};
use mws::noise::{calibrate, FamilySpec, NoiseSpec, RealizationForm};
use mws::stats::Welford;

fn model(family: FamilySpec, xi0: f64, temperature: f64, tau_c: f64) -> mws::noise::SpectrumModel {
    calibrate(&NoiseSpec {
        xi0,
        temperature,
        tau_c,
        family,
    })
    .unwrap()
}

fn harmonic_cfg(
    family: FamilySpec,
    xi0: f64,
    temperature: f64,
    tau_c: f64,
    k: f64,
    dt: f64,
    n_particles: usize,
    burn_in: Option<f64>,
) -> SimConfig {
    SimConfig {
        model: model(family, xi0, temperature, tau_c),
        force: ForceField::Harmonic { k },
        n_particles,
        dim: 1,
        dt,
        burn_in,
        initial: InitialCondition::Origin,
    }
}

/// Sums the recorded increments for one component channel over steps 1..=s.
fn increment_sum(traj: &mws::dynamics::Trajectory, p0: usize, c: usize, w: usize, s: usize) -> f64 {
    (1..=s).map(|i| traj.dw_into(i)[c * p0 + w]).sum()
}

#[test]
fn constant_perturbation_weights_are_explicit_increment_sums() {
    let dt = 0.01;
    let steps = 300;

    // First-order family at xi0 != 1: weights must not pick up any friction
    // factor, only the calibrated noise scale.
    let (xi0, temperature, tau_c) = (1.7, 0.8, 0.7);
    let cfg = harmonic_cfg(
        FamilySpec::OrnsteinUhlenbeck,
        xi0,
        temperature,
        tau_c,
        1.3,
        dt,
        2,
        Some(1.0),
    );
    let sim = Simulator::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let traj = simulate_trajectory(&cfg, steps, &mut rng).unwrap();
    let ws = weights_along(&sim, &traj, Perturbation::Constant).unwrap();
    let tau_p = tau_c / std::f64::consts::SQRT_2;
    let sigma = (2.0 * xi0 * temperature).sqrt();
    for c in 0..2 {
        for s in [1, 57, steps] {
            let w1 = increment_sum(&traj, 1, c, 0, s);
            assert_relative_eq!(ws.get(s, c, 0, 0).unwrap(), w1 / sigma, max_relative = 1e-12);
            assert_relative_eq!(
                ws.get(s, c, 1, 1).unwrap(),
                tau_p * w1 / sigma,
                max_relative = 1e-12
            );
            assert_eq!(ws.get(s, c, 1, 0).unwrap(), 0.0);
        }
    }

    // Two-dimensional full-rank block: both channels enter the zeroth-order
    // weight, only the first channel enters the first-order one.
    let cfg = harmonic_cfg(
        FamilySpec::Rational { gamma: 0.5 },
        1.0,
        1.0,
        std::f64::consts::SQRT_2,
        1.0,
        dt,
        1,
        Some(1.0),
    );
    let sim = Simulator::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let traj = simulate_trajectory(&cfg, steps, &mut rng).unwrap();
    let ws = weights_along(&sim, &traj, Perturbation::Constant).unwrap();
    let (ell, omega, sigma1) = (0.4, 0.2, 2.5f64.sqrt());
    for s in [1, 57, steps] {
        let w1 = increment_sum(&traj, 2, 0, 0, s);
        let w2 = increment_sum(&traj, 2, 0, 1, s);
        assert_relative_eq!(
            ws.get(s, 0, 0, 0).unwrap(),
            (w1 + omega / ell * w2) / sigma1,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            ws.get(s, 0, 1, 1).unwrap(),
            w1 / (ell * sigma1),
            max_relative = 1e-12
        );
        assert_eq!(ws.get(s, 0, 1, 0).unwrap(), 0.0);
    }

    // Chain of order two: a constant perturbation climbs the chain with the
    // channel coefficients binom(2,j) / ell^j and kills every j > k weight.
    let cfg = harmonic_cfg(
        FamilySpec::Matern { nu: 1.5 },
        1.0,
        1.0,
        std::f64::consts::SQRT_2,
        1.0,
        dt,
        1,
        Some(1.0),
    );
    let sim = Simulator::new(&cfg).unwrap();
    let block = &sim.realization().block;
    let RealizationForm::Chain { order, ell } = block.form else {
        panic!("expected a chain realization");
    };
    assert_eq!(order, 2);
    let sigma_out = block.c[0];
    assert_relative_eq!(sigma_out, std::f64::consts::SQRT_2, max_relative = 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let traj = simulate_trajectory(&cfg, steps, &mut rng).unwrap();
    let ws = weights_along(&sim, &traj, Perturbation::Constant).unwrap();
    let binom2 = [1.0, 2.0, 1.0];
    for s in [1, 57, steps] {
        let w = increment_sum(&traj, 1, 0, 0, s);
        for j in 0..=2 {
            assert_relative_eq!(
                ws.get(s, 0, j, j).unwrap(),
                binom2[j] / ell.powi(j as i32) * w / sigma_out,
                max_relative = 1e-12
            );
            for k in 0..j {
                assert_eq!(ws.get(s, 0, j, k).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn linear_perturbation_weights_match_direct_sums() {
    let dt = 0.005;
    let steps = 400;

    // Full-rank route: anchor at the pre-step position, advection from the
    // deterministic position update.
    let cfg = harmonic_cfg(
        FamilySpec::Rational { gamma: 0.5 },
        1.0,
        1.0,
        std::f64::consts::SQRT_2,
        1.0,
        dt,
        1,
        Some(2.0),
    );
    let sim = Simulator::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let traj = simulate_trajectory(&cfg, steps, &mut rng).unwrap();
    let ws = weights_along(&sim, &traj, Perturbation::Linear).unwrap();
    let (ell, omega, sigma1) = (0.4, 0.2, 2.5f64.sqrt());
    let (mut p00, mut p10, mut p11) = (0.0, 0.0, 0.0);
    for i in 1..=steps {
        let x_prev = traj.x_at(i - 1)[0];
        let v_prev = (traj.x_at(i)[0] - x_prev) / dt;
        let dw = traj.dw_into(i);
        let s00 = dw[0] + omega / ell * dw[1];
        let s1 = dw[0] / ell;
        p00 += x_prev / sigma1 * s00;
        p10 += v_prev / sigma1 * s1;
        p11 += x_prev / sigma1 * s1;
        if i % 97 == 0 || i == steps {
            assert_relative_eq!(ws.get(i, 0, 0, 0).unwrap(), p00, max_relative = 1e-12);
            assert_relative_eq!(ws.get(i, 0, 1, 0).unwrap(), p10, max_relative = 1e-12);
            assert_relative_eq!(ws.get(i, 0, 1, 1).unwrap(), p11, max_relative = 1e-12);
        }
    }

    // Chain route: anchor at the current position, backward differences of
    // the lifted perturbation.
    let cfg = harmonic_cfg(
        FamilySpec::Matern { nu: 1.5 },
        1.0,
        1.0,
        std::f64::consts::SQRT_2,
        1.0,
        dt,
        1,
        Some(2.0),
    );
    let sim = Simulator::new(&cfg).unwrap();
    let block = &sim.realization().block;
    let RealizationForm::Chain { ell, .. } = block.form else {
        panic!("expected a chain realization");
    };
    let sigma_out = block.c[0];
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let traj = simulate_trajectory(&cfg, steps, &mut rng).unwrap();
    let ws = weights_along(&sim, &traj, Perturbation::Linear).unwrap();
    let binom2 = [1.0, 2.0, 1.0];
    let ebar = |i: usize| traj.x_at(i)[0] / sigma_out;
    let mut p = [[0.0f64; 3]; 3]; // p[j][k]
    for i in 1..=steps {
        let dw = traj.dw_into(i)[0];
        for j in 0..=2usize {
            for k in 0..=j {
                let m = j - k;
                if i < m {
                    continue;
                }
                let diff = match m {
                    0 => ebar(i),
                    1 => ebar(i) - ebar(i - 1),
                    2 => ebar(i) - 2.0 * ebar(i - 1) + ebar(i - 2),
                    _ => unreachable!(),
                };
                p[j][k] += diff / dt.powi(m as i32) * binom2[j] / ell.powi(j as i32) * dw;
            }
        }
        // Second differences over dt^2 amplify rounding, so the independent
        // resummation agrees to 1e-9 rather than machine precision.
        if i % 97 == 0 || i == steps || i < 3 {
            for j in 0..=2usize {
                for k in 0..=j {
                    assert_relative_eq!(
                        ws.get(i, 0, j, k).unwrap(),
                        p[j][k],
                        max_relative = 1e-9,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }
    // Differences of order m cannot accumulate before step m.
    assert_eq!(ws.get(1, 0, 2, 0).unwrap(), 0.0);
}

#[test]
fn weights_are_mean_free_for_state_dependent_perturbations() {
    for (family, seed) in [
        (FamilySpec::Rational { gamma: 0.5 }, 31u64),
        (FamilySpec::Matern { nu: 1.5 }, 32),
    ] {
        let dt = 2e-3;
        let steps = 400;
        let cfg = harmonic_cfg(family, 1.0, 1.0, std::f64::consts::SQRT_2, 1.0, dt, 1, Some(1.0));
        let sim = Simulator::new(&cfg).unwrap();
        let lift = PerturbationLift::new(&sim.realization().block, dt).unwrap();
        let ids = lift.weight_ids().to_vec();
        let mut acc = vec![Welford::new(); ids.len()];
        let mut dw = vec![0.0; sim.noise_dim()];
        for tid in 0..3000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(tid);
            let mut st = sim.init_state(&mut rng);
            sim.advance(&mut st, &mut rng, sim.burn_in_steps()).unwrap();
            let mut wst = lift.new_state(1);
            let mut x_prev = st.x.clone();
            for _ in 0..steps {
                x_prev.copy_from_slice(&st.x);
                sim.step(&mut st, &mut rng, &mut dw).unwrap();
                lift.update(&mut wst, Perturbation::Linear, &x_prev, &st.x, &dw);
            }
            for (i, &(j, k)) in ids.iter().enumerate() {
                acc[i].push(lift.weight(&wst, 0, j, k).unwrap());
            }
        }
        for (i, &(j, k)) in ids.iter().enumerate() {
            let tol = 4.0 * acc[i].stderr() + 1e-12;
            assert!(
                acc[i].mean().abs() < tol,
                "weight p_{{{j},{k}}} has mean {} exceeding {tol}",
                acc[i].mean()
            );
        }
    }
}

#[test]
fn total_sample_is_the_sum_of_its_terms() {
    let dt = 0.005;
    let cfg = harmonic_cfg(
        FamilySpec::Matern { nu: 1.5 },
        1.0,
        1.0,
        std::f64::consts::SQRT_2,
        1.0,
        dt,
        1,
        Some(1.0),
    );
    let sim = Simulator::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let traj = simulate_trajectory(&cfg, 200, &mut rng).unwrap();
    let base = SensitivityTarget {
        perturbation: Perturbation::Linear,
        observable: Observable::PositionSquared,
        term: TermSelection::Total,
    };
    let total = samples_along(&sim, &traj, &base).unwrap();
    assert_eq!(total[0], 0.0);
    let mut summed = vec![0.0; total.len()];
    for j in 0..=2usize {
        for k in 0..=j {
            let part = samples_along(
                &sim,
                &traj,
                &SensitivityTarget {
                    term: TermSelection::Term { j, k },
                    ..base
                },
            )
            .unwrap();
            for (s, v) in summed.iter_mut().zip(&part) {
                *s += v;
            }
        }
    }
    for (t, s) in total.iter().zip(&summed) {
        assert_abs_diff_eq!(*t, *s, epsilon = 1e-12 * (1.0 + t.abs()));
    }
}

#[test]
fn harmonic_position_response_matches_closed_form_for_all_families() {
    // d<x>/d lambda for a constant force is (1 - exp(-k t / xi0)) / k for any
    // noise spectrum; only the approach statistics differ between families.
    let (xi0, temperature, tau_c, k) = (1.7, 0.8, 0.7, 2.3);
    let dt = 2e-3;
    let grid = RecordGrid::covering(dt, 2.5, 0.5).unwrap();
    let target = SensitivityTarget {
        perturbation: Perturbation::Constant,
        observable: Observable::Position,
        term: TermSelection::Total,
    };
    for (family, seed) in [
        (FamilySpec::OrnsteinUhlenbeck, 51u64),
        (FamilySpec::Rational { gamma: 0.5 }, 52),
        (FamilySpec::Matern { nu: 1.5 }, 53),
    ] {
        let cfg = harmonic_cfg(family.clone(), xi0, temperature, tau_c, k, dt, 1, Some(2.0));
        let series = sensitivity_ensemble(&cfg, &[target], &grid, 6000, seed).unwrap();
        let s = &series[0];
        assert_eq!(s.estimate(0), 0.0);
        for (i, &t) in s.times().iter().enumerate().skip(1) {
            let chi = (1.0 - (-k * t / xi0).exp()) / k;
            let tol = 4.0 * s.stderr(i) + dt * chi;
            assert!(
                (s.estimate(i) - chi).abs() < tol,
                "family {family:?} at t = {t}: estimate {} vs {chi} (tol {tol})",
                s.estimate(i)
            );
        }
    }
}

#[test]
fn stiffness_sensitivity_of_variance_matches_closed_form() {
    // For F = -k x + lambda x the long-time d<x^2>/d lambda equals
    // -d/dk of the stationary variance T / (k (1 + k tau_p / xi0)).
    let (xi0, temperature, tau_c, k) = (1.0, 1.0, std::f64::consts::SQRT_2, 1.0);
    let tau_p = tau_c / std::f64::consts::SQRT_2;
    let a = tau_p / xi0;
    let expected = temperature * (1.0 + 2.0 * k * a) / (k * (1.0 + k * a)).powi(2);
    let dt = 2e-3;
    let grid = RecordGrid::covering(dt, 10.0, 2.5).unwrap();
    let cfg = harmonic_cfg(
        FamilySpec::OrnsteinUhlenbeck,
        xi0,
        temperature,
        tau_c,
        k,
        dt,
        1,
        None,
    );
    let target = SensitivityTarget {
        perturbation: Perturbation::Linear,
        observable: Observable::PositionSquared,
        term: TermSelection::Total,
    };
    let series = sensitivity_ensemble(&cfg, &[target], &grid, 6000, 61).unwrap();
    let s = &series[0];
    let last = s.len() - 1;
    assert!(s.times()[last] >= 10.0 - 1e-9);
    let tol = 4.0 * s.stderr(last) + 0.01 * expected;
    assert!(
        (s.estimate(last) - expected).abs() < tol,
        "estimate {} vs {expected} (tol {tol})",
        s.estimate(last)
    );
}

#[test]
fn ensemble_is_deterministic_and_worker_count_invariant() {
    let dt = 0.01;
    let cfg = harmonic_cfg(
        FamilySpec::Rational { gamma: 0.3 },
        1.0,
        1.0,
        1.0,
        1.0,
        dt,
        1,
        Some(0.5),
    );
    let grid = RecordGrid { every: 25, count: 4 };
    let targets = [
        SensitivityTarget {
            perturbation: Perturbation::Constant,
            observable: Observable::Position,
            term: TermSelection::Total,
        },
        SensitivityTarget {
            perturbation: Perturbation::Linear,
            observable: Observable::PositionSquared,
            term: TermSelection::Term { j: 1, k: 1 },
        },
    ];
    // 70 trajectories cross the internal merge chunk boundary.
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| sensitivity_ensemble(&cfg, &targets, &grid, 70, 71).unwrap())
    };
    let a = run(1);
    let b = run(3);
    for (sa, sb) in a.iter().zip(&b) {
        for i in 0..sa.len() {
            assert_eq!(sa.estimate(i), sb.estimate(i));
            assert_eq!(sa.stderr(i), sb.stderr(i));
            assert_eq!(sa.n_samples(i), sb.n_samples(i));
        }
    }
}

#[test]
fn construction_rejects_mismatched_routes_and_terms() {
    let ou = model(FamilySpec::OrnsteinUhlenbeck, 1.0, 1.0, 1.0);
    let block = ou.realize(1).unwrap().block;
    let lift = PerturbationLift::new(&block, 0.01).unwrap();
    assert_eq!(lift.n_prime(), 1);
    assert!(lift.check_term(TermSelection::Term { j: 1, k: 1 }).is_ok());
    assert!(lift.check_term(TermSelection::Term { j: 2, k: 2 }).is_err());

    // A chain block drives only its last slot, so the full-rank construction
    // must refuse it.
    let matern = model(FamilySpec::Matern { nu: 1.5 }, 1.0, 1.0, 1.0);
    let chain_block = matern.realize(1).unwrap().block;
    assert!(PerturbationLift::full_rank(&chain_block, 0.01).is_err());

    // At half-integer order one the chain has a square invertible noise
    // matrix; both routes exist and must agree on the shared weight p_11 for
    // a constant perturbation.
    let m12 = model(FamilySpec::Matern { nu: 0.5 }, 1.0, 1.0, 1.0);
    let b12 = m12.realize(1).unwrap().block;
    assert!(matches!(b12.form, RealizationForm::Chain { order: 1, .. }));
    let chain_lift = PerturbationLift::new(&b12, 0.01).unwrap();
    let fr_lift = PerturbationLift::full_rank(&b12, 0.01).unwrap();
    let mut cs = chain_lift.new_state(1);
    let mut fs = fr_lift.new_state(1);
    let x = [0.3];
    let dw = [0.017];
    for _ in 0..5 {
        chain_lift.update(&mut cs, Perturbation::Constant, &x, &x, &dw);
        fr_lift.update(&mut fs, Perturbation::Constant, &x, &x, &dw);
    }
    assert_relative_eq!(
        chain_lift.weight(&cs, 0, 1, 1).unwrap(),
        fr_lift.weight(&fs, 0, 1, 1).unwrap(),
        max_relative = 1e-12
    );
    assert_relative_eq!(
        chain_lift.weight(&cs, 0, 0, 0).unwrap(),
        fr_lift.weight(&fs, 0, 0, 0).unwrap(),
        max_relative = 1e-12
    );
}

#[test]
fn record_grid_snaps_to_steps() {
    let g = RecordGrid::covering(1e-3, 2.0, 0.5).unwrap();
    assert_eq!(g.every, 500);
    assert_eq!(g.count, 4);
    assert_eq!(g.times(1e-3), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    assert_eq!(g.total_steps(), 2000);
    assert!(RecordGrid::covering(1e-3, -1.0, 0.5).is_err());
}
