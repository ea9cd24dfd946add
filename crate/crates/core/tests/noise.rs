//! Spectrum calibration and realization checks.
//!
//! Strategy: every family exposes three independent routes to the same
//! quantities (closed-form correlation, closed-form PSD, state-space
//! realization). The tests tie the routes together and pin the canonical
//! calibration values.

use approx::assert_relative_eq;
use mws::noise::{
    calibrate, half_integer_order, realization_correlation, realization_psd,
    stationary_covariance, FamilySpec, NoiseSpec, RationalPeak, SpectrumFamily, SpectrumModel,
};
use mws::numeric::composite_simpson;
use mws::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SQRT2: f64 = std::f64::consts::SQRT_2;

fn canonical(family: FamilySpec) -> SpectrumModel {
    calibrate(&NoiseSpec {
        xi0: 1.0,
        temperature: 1.0,
        tau_c: SQRT2,
        family,
    })
    .unwrap()
}

fn ou() -> SpectrumModel {
    canonical(FamilySpec::OrnsteinUhlenbeck)
}

fn rational() -> SpectrumModel {
    canonical(FamilySpec::Rational { gamma: 0.5 })
}

fn matern32() -> SpectrumModel {
    canonical(FamilySpec::Matern { nu: 1.5 })
}

#[test]
fn canonical_ornstein_uhlenbeck_parameters() {
    let m = ou();
    let SpectrumFamily::OrnsteinUhlenbeck { tau_p, sigma } = m.family else {
        panic!("wrong family");
    };
    assert_relative_eq!(tau_p, 1.0, max_relative = 1e-15);
    assert_relative_eq!(sigma * sigma, 2.0, max_relative = 1e-15);
    assert_relative_eq!(m.correlation(0.0), 1.0, max_relative = 1e-15);
}

#[test]
fn canonical_rational_parameters() {
    let m = rational();
    let SpectrumFamily::Rational { ref peaks } = m.family else {
        panic!("wrong family");
    };
    assert_eq!(peaks.len(), 1);
    assert_relative_eq!(peaks[0].ell, 0.4, max_relative = 1e-14);
    assert_relative_eq!(peaks[0].omega, 0.2, max_relative = 1e-14);
    assert_relative_eq!(peaks[0].sigma, 1.5811388300841898, max_relative = 1e-14);
    assert_relative_eq!(peaks[0].sigma * peaks[0].sigma, 2.5, max_relative = 1e-14);
    assert_relative_eq!(m.correlation(0.0), 0.5, max_relative = 1e-14);
}

#[test]
fn canonical_matern_parameters() {
    let m = matern32();
    let SpectrumFamily::Matern {
        nu,
        sigma_sq,
        tau_nu,
    } = m.family
    else {
        panic!("wrong family");
    };
    assert_eq!(nu, 1.5);
    assert_relative_eq!(sigma_sq, std::f64::consts::FRAC_1_SQRT_2, max_relative = 1e-14);
    assert_relative_eq!(tau_nu, 1.224744871391589, max_relative = 1e-14);
    assert_relative_eq!(m.correlation(0.0), sigma_sq, max_relative = 1e-14);
}

// Spectral shapes at the canonical point, written out as rational functions
// of (omega tau_c) so any convention drift in psd() is caught.
#[test]
fn canonical_psd_closed_forms() {
    let tc2 = 2.0;
    let rat = rational();
    let mat = matern32();
    let oum = ou();
    for &w in &[0.0, 0.1, 0.5, 1.0, 2.3, 7.0] {
        let w2 = w * w;
        let ou_expect = 2.0 / (1.0 + w2 * tc2 / 2.0);
        assert_relative_eq!(oum.psd(w), ou_expect, max_relative = 1e-12);
        let rat_expect = 2.0 * (1.0 + 2.5 * w2 * tc2)
            / (1.0 + 3.0 * w2 * tc2 + 6.25 * w2 * w2 * tc2 * tc2);
        assert_relative_eq!(rat.psd(w), rat_expect, max_relative = 1e-12);
        let mat_expect = 2.0 / (1.0 + w2 * tc2 / 4.0).powi(2);
        assert_relative_eq!(mat.psd(w), mat_expect, max_relative = 1e-12);
    }
}

#[test]
fn zero_frequency_weight_is_thermal_for_calibrated_families() {
    for spec in [
        FamilySpec::OrnsteinUhlenbeck,
        FamilySpec::Rational { gamma: 0.35 },
        FamilySpec::Matern { nu: 0.7 },
        FamilySpec::Matern { nu: 2.5 },
    ] {
        let m = calibrate(&NoiseSpec {
            xi0: 2.5,
            temperature: 0.7,
            tau_c: 0.9,
            family: spec,
        })
        .unwrap();
        assert_relative_eq!(m.psd(0.0), 2.0 * 2.5 * 0.7, max_relative = 1e-12);
    }
}

/// tau_c^2 = -chat''(0)/chat(0) via a five-point stencil on the closed-form
/// PSD; exercises every calibration branch.
fn check_curvature_time(m: &SpectrumModel) {
    let h = 1e-2 / m.tau_c;
    let f0 = m.psd(0.0);
    let f1 = m.psd(h);
    let f2 = m.psd(2.0 * h);
    let second = (-2.0 * f2 + 32.0 * f1 - 30.0 * f0) / (12.0 * h * h);
    let tau_sq = -second / f0;
    assert_relative_eq!(tau_sq.sqrt(), m.tau_c, max_relative = 1e-6);
}

#[test]
fn correlation_time_matches_psd_curvature() {
    check_curvature_time(&ou());
    check_curvature_time(&rational());
    check_curvature_time(&matern32());
    check_curvature_time(&canonical(FamilySpec::Matern { nu: 0.8 }));
    check_curvature_time(&canonical(FamilySpec::Matern { nu: 3.5 }));
    // Explicit peaks: tau_c is derived, the identity must still hold.
    let m = calibrate(&NoiseSpec {
        xi0: 1.0,
        temperature: 1.0,
        tau_c: 1.0,
        family: FamilySpec::RationalPeaks {
            peaks: vec![
                RationalPeak {
                    sigma: 1.3,
                    omega: 0.1,
                    ell: 0.7,
                },
                RationalPeak {
                    sigma: 0.6,
                    omega: 0.0,
                    ell: 2.0,
                },
            ],
        },
    })
    .unwrap();
    check_curvature_time(&m);
}

#[test]
fn explicit_canonical_peak_reproduces_canonical_tau_c() {
    let m = calibrate(&NoiseSpec {
        xi0: 1.0,
        temperature: 1.0,
        tau_c: 123.0, // ignored: derived from the peak
        family: FamilySpec::RationalPeaks {
            peaks: vec![RationalPeak {
                sigma: 2.5f64.sqrt(),
                omega: 0.2,
                ell: 0.4,
            }],
        },
    })
    .unwrap();
    assert_relative_eq!(m.tau_c, SQRT2, max_relative = 1e-12);
}

#[test]
fn explicit_peaks_without_curvature_fall_back_to_decay_time() {
    let m = calibrate(&NoiseSpec {
        xi0: 1.0,
        temperature: 1.0,
        tau_c: 1.0,
        family: FamilySpec::RationalPeaks {
            peaks: vec![RationalPeak {
                sigma: 1.0,
                omega: 2.0,
                ell: 0.5,
            }],
        },
    })
    .unwrap();
    assert_relative_eq!(m.tau_c, 2.0, max_relative = 1e-12);
}

/// Transform-pair conventions: int c(t) dt over the whole line equals
/// chat(0), and (1/pi) int_0^inf chat dw equals c(0). The second integral
/// gets an analytic tail correction K/Omega (or K/(3 Omega^3) for the
/// steeper Matern 3/2 decay).
#[test]
fn fourier_conventions_close() {
    for m in [ou(), rational(), matern32()] {
        let t_max = 80.0 * m.tau_c;
        let time_integral =
            2.0 * composite_simpson(|t| m.correlation(t), 0.0, t_max, 100_000);
        assert_relative_eq!(time_integral, m.psd(0.0), max_relative = 1e-8);
    }

    let omega_max = 3000.0;
    let m = ou();
    let head = composite_simpson(|w| m.psd(w), 0.0, omega_max, 400_000);
    let tail = 2.0 / 1.0 / omega_max; // K = sigma^2 / tau_p^2 = 2
    assert_relative_eq!(
        (head + tail) / std::f64::consts::PI,
        m.correlation(0.0),
        max_relative = 1e-6
    );

    let m = rational();
    let head = composite_simpson(|w| m.psd(w), 0.0, omega_max, 400_000);
    let tail = 2.5 * 0.4 * 0.4 / omega_max; // K = sigma^2 ell^2
    assert_relative_eq!(
        (head + tail) / std::f64::consts::PI,
        m.correlation(0.0),
        max_relative = 1e-6
    );

    let m = matern32();
    let head = composite_simpson(|w| m.psd(w), 0.0, 300.0, 400_000);
    let tail = 2.0 * 16.0 / 4.0 / (3.0 * 300.0f64.powi(3)); // K = 2 (2/tau_c)^4
    assert_relative_eq!(
        (head + tail) / std::f64::consts::PI,
        m.correlation(0.0),
        max_relative = 1e-6
    );
}

#[test]
fn realization_psd_matches_family_psd() {
    let two_peak = calibrate(&NoiseSpec {
        xi0: 1.0,
        temperature: 1.0,
        tau_c: 1.0,
        family: FamilySpec::RationalPeaks {
            peaks: vec![
                RationalPeak {
                    sigma: 1.3,
                    omega: 0.1,
                    ell: 0.7,
                },
                RationalPeak {
                    sigma: 0.6,
                    omega: 1.5,
                    ell: 2.0,
                },
            ],
        },
    })
    .unwrap();
    let models = [
        ou(),
        rational(),
        two_peak,
        canonical(FamilySpec::Matern { nu: 0.5 }),
        matern32(),
        canonical(FamilySpec::Matern { nu: 2.5 }),
    ];
    for m in &models {
        let block = m.realize(1).unwrap().block;
        for k in 0..20 {
            let w = 1e-2 * 10f64.powf(4.0 * k as f64 / 19.0);
            assert_relative_eq!(
                realization_psd(&block, w).unwrap(),
                m.psd(w),
                max_relative = 1e-10
            );
        }
        assert_relative_eq!(
            realization_psd(&block, 0.0).unwrap(),
            m.psd(0.0),
            max_relative = 1e-10
        );
    }
}

#[test]
fn realization_correlation_matches_family_correlation() {
    let models = [
        ou(),
        rational(),
        canonical(FamilySpec::Matern { nu: 0.5 }),
        matern32(),
        canonical(FamilySpec::Matern { nu: 2.5 }),
    ];
    for m in &models {
        let block = m.realize(1).unwrap().block;
        for &frac in &[0.0, 0.2, 1.0, 3.0] {
            let t = frac * m.tau_c;
            assert_relative_eq!(
                realization_correlation(&block, t),
                m.correlation(t),
                max_relative = 1e-9,
                epsilon = 1e-12
            );
        }
    }
}

#[test]
fn matern_half_integer_family_at_nu_one_half_is_ornstein_uhlenbeck() {
    let ou = ou();
    let half = canonical(FamilySpec::Matern { nu: 0.5 });
    for &w in &[0.0, 0.3, 1.0, 5.0] {
        assert_relative_eq!(half.psd(w), ou.psd(w), max_relative = 1e-12);
    }
    for &t in &[0.0, 0.5, 2.0] {
        assert_relative_eq!(half.correlation(t), ou.correlation(t), max_relative = 1e-12);
    }
}

#[test]
fn stationary_covariance_closed_blocks() {
    // Ornstein-Uhlenbeck: scalar sigma^2 / (2 tau_p).
    let block = ou().realize(1).unwrap().block;
    assert_relative_eq!(block.sigma_inf[(0, 0)], 1.0, max_relative = 1e-12);

    // Rational: (ell / 2) I per peak.
    let block = rational().realize(1).unwrap().block;
    let expect = DMatrix::from_diagonal_element(2, 2, 0.2);
    assert_relative_eq!(block.sigma_inf, expect, max_relative = 1e-12);

    // Matern 3/2 chain: (ell / 4) I with ell = sqrt(2).
    let block = matern32().realize(1).unwrap().block;
    let expect = DMatrix::from_diagonal_element(2, 2, SQRT2 / 4.0);
    assert_relative_eq!(block.sigma_inf, expect, max_relative = 1e-12);
}

/// c(0) = C Sigma_inf C^T closes the loop between the Lyapunov solve, the
/// output scaling, and the closed-form correlation.
#[test]
fn output_variance_equals_correlation_at_zero() {
    let models = [
        ou(),
        rational(),
        canonical(FamilySpec::Matern { nu: 0.5 }),
        matern32(),
        canonical(FamilySpec::Matern { nu: 2.5 }),
        canonical(FamilySpec::Matern { nu: 4.5 }),
    ];
    for m in &models {
        let block = m.realize(1).unwrap().block;
        let var = (block.c.transpose() * &block.sigma_inf * &block.c)[(0, 0)];
        assert_relative_eq!(var, m.correlation(0.0), max_relative = 1e-10);
    }
}

#[test]
fn full_system_assembles_block_diagonal() {
    let real = rational().realize(3).unwrap();
    assert_eq!(real.state_dim(), 6);
    assert_eq!(real.noise_dim(), 6);
    let a = real.full_a();
    let c = real.full_c();
    assert_eq!(a.nrows(), 6);
    assert_relative_eq!(a[(2, 3)], real.block.a[(0, 1)]);
    assert_eq!(a[(0, 2)], 0.0);
    assert_eq!(c[(1, 2)], real.block.c[0]);
    assert_eq!(c[(1, 0)], 0.0);
}

#[test]
fn stationary_samples_reproduce_covariance() {
    let real = rational().realize(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 200_000;
    let mut acc = [[0.0f64; 2]; 2];
    for _ in 0..n {
        let y = real.sample_stationary(&mut rng);
        for i in 0..2 {
            for j in 0..2 {
                acc[i][j] += y[i] * y[j];
            }
        }
    }
    for i in 0..2 {
        for j in 0..2 {
            let emp = acc[i][j] / n as f64;
            let expect = real.block.sigma_inf[(i, j)];
            assert!(
                (emp - expect).abs() < 5e-3,
                "covariance entry ({i},{j}): {emp} vs {expect}"
            );
        }
    }
}

#[test]
fn lyapunov_rejects_unstable_generator() {
    let a = DMatrix::from_row_slice(2, 2, &[-0.1, 0.0, 0.0, 1.0]);
    let b = DMatrix::identity(2, 2);
    assert!(matches!(
        stationary_covariance(&a, &b),
        Err(Error::Unstable(_))
    ));
}

#[test]
fn calibration_rejections() {
    let base = |family| NoiseSpec {
        xi0: 1.0,
        temperature: 1.0,
        tau_c: 1.0,
        family,
    };
    assert!(matches!(
        calibrate(&base(FamilySpec::Rational { gamma: 0.9 })),
        Err(Error::Calibration(_))
    ));
    assert!(matches!(
        calibrate(&base(FamilySpec::Matern { nu: -1.0 })),
        Err(Error::InvalidParameter(_))
    ));
    assert!(matches!(
        calibrate(&base(FamilySpec::RationalPeaks { peaks: vec![] })),
        Err(Error::InvalidParameter(_))
    ));
    assert!(matches!(
        calibrate(&base(FamilySpec::RationalPeaks {
            peaks: vec![RationalPeak {
                sigma: 1.0,
                omega: 0.0,
                ell: -0.5,
            }],
        })),
        Err(Error::InvalidParameter(_))
    ));
    let mut bad = base(FamilySpec::OrnsteinUhlenbeck);
    bad.tau_c = 0.0;
    assert!(matches!(calibrate(&bad), Err(Error::InvalidParameter(_))));
}

#[test]
fn realization_rejections() {
    let m = canonical(FamilySpec::Matern { nu: 1.0 });
    assert!(matches!(m.realize(1), Err(Error::Realization(_))));
    assert!(half_integer_order(1.0).is_none());
    assert!(matches!(
        ou().realize(0),
        Err(Error::InvalidParameter(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Calibration invariants hold across the parameter space, not just at
    /// the canonical point.
    #[test]
    fn calibration_invariants_hold(
        xi0 in 0.2f64..4.0,
        temperature in 0.2f64..3.0,
        tau_c in 0.3f64..3.0,
        gamma in 0.0f64..0.55,
        nu in prop::sample::select(vec![0.5f64, 1.5, 2.5, 3.5]),
    ) {
        for family in [
            FamilySpec::OrnsteinUhlenbeck,
            FamilySpec::Rational { gamma },
            FamilySpec::Matern { nu },
        ] {
            let m = calibrate(&NoiseSpec { xi0, temperature, tau_c, family }).unwrap();
            // Thermal zero-frequency weight.
            prop_assert!((m.psd(0.0) / (2.0 * xi0 * temperature) - 1.0).abs() < 1e-10);
            // Curvature correlation time.
            let h = 1e-2 / tau_c;
            let second = (-2.0 * m.psd(2.0 * h) + 32.0 * m.psd(h) - 30.0 * m.psd(0.0))
                / (12.0 * h * h);
            let tau_sq = -second / m.psd(0.0);
            prop_assert!((tau_sq.sqrt() / tau_c - 1.0).abs() < 1e-5);
            // Realization agrees with the family PSD at a probe frequency.
            let block = m.realize(1).unwrap().block;
            let w = 1.3 / tau_c;
            let rp = realization_psd(&block, w).unwrap();
            prop_assert!((rp / m.psd(w) - 1.0).abs() < 1e-9);
        }
    }
}
