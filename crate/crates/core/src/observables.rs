//! Transport observables and baselines: tracer diffusion, displacement
//! response from time origins, the Einstein-ratio effective temperature,
//! and common-random-number finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{ForceField, InitialCondition, Perturbation, SimConfig, Simulator};
use crate::error::{Error, Result};
use crate::malliavin::{
    run_trajectories, Observable, ObservableRing, PerturbationLift, RecordGrid,
};
use crate::noise::SpectrumModel;
use crate::stats::{EstimateSeries, Welford};

/// Tagged-particle measurement plan: every component of every particle
/// serves as a tracer, sampled from `n_origins` stationary time origins
/// spaced `origin_every` steps apart.
#[derive(Clone, Copy, Debug)]
pub struct TracerConfig {
    pub lags: RecordGrid,
    pub origin_every: usize,
    pub n_origins: usize,
}

/// Mean-square displacement and displacement response on a shared lag grid.
#[derive(Clone, Debug)]
pub struct TracerSeries {
    pub msd: EstimateSeries,
    pub response: EstimateSeries,
    pub warnings: Vec<String>,
}

/// Estimates, over an ensemble of unperturbed trajectories, the tracer
/// mean-square displacement and the displacement response
///
///     chi(t) = d<x_c(t_o + t)>/d lambda
///
/// to a constant unit force switched on at the origin t_o. The response
/// pairs the observable's backward differences with weight increments
/// accumulated since the origin; weights before the origin cancel.
pub fn tracer_ensemble(
    cfg: &SimConfig,
    tcfg: &TracerConfig,
    n_traj: u64,
    seed: u64,
) -> Result<TracerSeries> {
    if tcfg.n_origins == 0 || tcfg.origin_every == 0 {
        return Err(Error::InvalidParameter(
            "tracer sampling needs at least one origin and a positive origin spacing".into(),
        ));
    }
    if n_traj == 0 {
        return Err(Error::InvalidParameter("need at least one trajectory".into()));
    }
    let sim = Simulator::new(cfg)?;
    let lift = PerturbationLift::new(&sim.realization().block, sim.dt())?;
    let n = sim.n_components();
    let np = lift.n_prime();
    let width = np + 1;
    let n_lags = tcfg.lags.count + 1;
    let total_steps = (tcfg.n_origins - 1) * tcfg.origin_every + tcfg.lags.total_steps();
    let box_edge = cfg.force.box_edge();

    let mut warnings = Vec::new();
    let decorrelation = cfg
        .model
        .tau_c
        .max(cfg.force.relaxation_scale(cfg.model.xi0, cfg.model.temperature));
    if tcfg.n_origins > 1 && (tcfg.origin_every as f64) * cfg.dt < decorrelation {
        warnings.push(format!(
            "time origins are {} apart but the system decorrelates over {decorrelation}; \
             samples from neighbouring origins are strongly correlated",
            tcfg.origin_every as f64 * cfg.dt
        ));
    }

    let run_one = |tid: u64| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tid);
        let mut st = sim.init_state(&mut rng);
        sim.advance(&mut st, &mut rng, sim.burn_in_steps())?;
        let mut wst = lift.new_state(n);
        let mut ring = ObservableRing::new(n, np);
        ring.push(&st.x, Observable::Position);
        let mut w_now = vec![0.0; n * width];
        // Per origin: positions then combined weights at the origin.
        let mut org_x: Vec<Vec<f64>> = Vec::with_capacity(tcfg.n_origins);
        let mut org_w: Vec<Vec<f64>> = Vec::with_capacity(tcfg.n_origins);
        let mut sum_msd = vec![0.0; n_lags];
        let mut sum_rsp = vec![0.0; n_lags];
        let mut dw = vec![0.0; sim.noise_dim()];
        let mut x_prev = st.x.clone();
        for step in 0..=total_steps {
            if step > 0 {
                x_prev.copy_from_slice(&st.x);
                sim.step(&mut st, &mut rng, &mut dw)?;
                if let Some(l) = box_edge {
                    // A jump past half the box in one step means the input
                    // positions were wrapped; displacements would be wrong.
                    for c in 0..n {
                        if (st.x[c] - x_prev[c]).abs() > 0.5 * l {
                            return Err(Error::WrappedCoordinates(format!(
                                "component {c} moved {} in one step (box edge {l})",
                                (st.x[c] - x_prev[c]).abs()
                            )));
                        }
                    }
                }
                lift.update(&mut wst, Perturbation::Constant, &x_prev, &st.x, &dw);
                ring.push(&st.x, Observable::Position);
            }
            let snapshot = step % tcfg.origin_every == 0 && org_x.len() < tcfg.n_origins;
            let need_now = snapshot
                || org_x
                    .iter()
                    .enumerate()
                    .any(|(s, _)| lag_of(step, s, tcfg).is_some());
            if need_now {
                for c in 0..n {
                    lift.combined(&wst, c, &mut w_now[c * width..(c + 1) * width]);
                }
            }
            for s in 0..org_x.len() {
                let Some(l) = lag_of(step, s, tcfg) else { continue };
                for c in 0..n {
                    let d = st.x[c] - org_x[s][c];
                    sum_msd[l] += d * d;
                    let mut z = 0.0;
                    for k in 0..width {
                        let Some(dk) = ring.diff(c, k) else { continue };
                        z += dk / sim.dt().powi(k as i32)
                            * (w_now[c * width + k] - org_w[s][c * width + k]);
                    }
                    sum_rsp[l] += z;
                }
            }
            if snapshot {
                org_x.push(st.x.clone());
                org_w.push(w_now.clone());
                // The new origin's lag-zero sample is exact.
                sum_msd[0] += 0.0;
                sum_rsp[0] += 0.0;
            }
        }
        let norm = (tcfg.n_origins * n) as f64;
        for v in sum_msd.iter_mut().chain(sum_rsp.iter_mut()) {
            *v /= norm;
        }
        Ok((sum_msd, sum_rsp))
    };

    let times = tcfg.lags.times(sim.dt());
    let mut msd = EstimateSeries::new(times.clone());
    let mut response = EstimateSeries::new(times);
    run_trajectories(n_traj, run_one, |(row_m, row_r)| {
        msd.push_row(&row_m);
        response.push_row(&row_r);
    })?;
    Ok(TracerSeries {
        msd,
        response,
        warnings,
    })
}

/// Lag index at which origin `s` samples at `step`, if any.
fn lag_of(step: usize, s: usize, tcfg: &TracerConfig) -> Option<usize> {
    let o = s * tcfg.origin_every;
    if step < o {
        return None;
    }
    let rel = step - o;
    if rel % tcfg.lags.every == 0 && rel / tcfg.lags.every <= tcfg.lags.count {
        Some(rel / tcfg.lags.every)
    } else {
        None
    }
}

/// An Einstein-ratio effective temperature over a lag window.
#[derive(Clone, Debug)]
pub struct TemperatureEstimate {
    pub value: f64,
    pub stderr: f64,
    pub warnings: Vec<String>,
}

/// Effective temperature from the Einstein ratio MSD(t) / (2 dim chi(t)),
/// averaged over the lag window. The returned standard error is the mean of
/// the per-point propagated errors, not reduced by the point count, because
/// overlapping lags are strongly correlated.
pub fn einstein_temperature(
    msd: &EstimateSeries,
    response: &EstimateSeries,
    dim: usize,
    window: (f64, f64),
) -> Result<TemperatureEstimate> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    if !(window.0 >= 0.0) || !(window.1 > window.0) {
        return Err(Error::InvalidParameter(format!(
            "bad averaging window [{}, {}]",
            window.0, window.1
        )));
    }
    if msd.len() != response.len()
        || msd
            .times()
            .iter()
            .zip(response.times())
            .any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs()))
    {
        return Err(Error::DimensionMismatch(
            "mean-square displacement and response are on different lag grids".into(),
        ));
    }
    let mut ratios: Vec<(f64, f64)> = Vec::new();
    let mut msd_pts: Vec<(f64, f64, f64)> = Vec::new();
    let mut warnings = Vec::new();
    let mut in_window = 0usize;
    let mut nonpositive = 0usize;
    let mut weak = 0usize;
    let two_d = 2.0 * dim as f64;
    for (i, &t) in msd.times().iter().enumerate() {
        if t < window.0 || t > window.1 {
            continue;
        }
        in_window += 1;
        let m = msd.estimate(i);
        let sm = msd.stderr(i);
        msd_pts.push((t, m, sm));
        let r = response.estimate(i);
        let sr = response.stderr(i);
        if !(r > 0.0) {
            nonpositive += 1;
            continue;
        }
        if r < 3.0 * sr {
            weak += 1;
        }
        let ratio = m / (two_d * r);
        let se = ((sm / (two_d * r)).powi(2) + (m * sr / (two_d * r * r)).powi(2)).sqrt();
        ratios.push((ratio, se));
    }
    if nonpositive > 0 {
        warnings.push(format!(
            "response is not positive at {nonpositive} of {in_window} window \
             lags; those points were skipped"
        ));
    }
    if weak > 0 {
        warnings.push(format!(
            "response is within 3 standard errors of zero at {weak} of \
             {in_window} window lags"
        ));
    }
    if ratios.is_empty() {
        return Err(Error::ShortTrajectory(format!(
            "no usable lag points inside the window [{}, {}]",
            window.0, window.1
        )));
    }
    if ratios.len() < 2 {
        warnings.push("only one lag point in the averaging window".into());
    }
    if msd_pts.len() >= 3 {
        // Endpoint-segment slopes; the window should sit on the linear part
        // of the displacement curve. Noise allowance keeps clean but noisy
        // data from warning spuriously.
        let slope = |a: &(f64, f64, f64), b: &(f64, f64, f64)| {
            let dt = b.0 - a.0;
            ((b.1 - a.1) / dt, (a.2 * a.2 + b.2 * b.2).sqrt() / dt)
        };
        let (s0, e0) = slope(&msd_pts[0], &msd_pts[1]);
        let (s1, e1) = slope(&msd_pts[msd_pts.len() - 2], &msd_pts[msd_pts.len() - 1]);
        let (first, last) = (msd_pts[0], msd_pts[msd_pts.len() - 1]);
        let mean_slope = (last.1 - first.1) / (last.0 - first.0);
        if (s1 - s0).abs() > 0.1 * mean_slope.abs() + 3.0 * (e0 * e0 + e1 * e1).sqrt() {
            warnings.push(format!(
                "mean-square displacement is not linear across the window \
                 (slope {s0} at the start, {s1} at the end)"
            ));
        }
    }
    let value = ratios.iter().map(|(r, _)| r).sum::<f64>() / ratios.len() as f64;
    let stderr = ratios.iter().map(|(_, s)| s).sum::<f64>() / ratios.len() as f64;
    let (first, last) = (ratios[0].0, ratios[ratios.len() - 1].0);
    if (last - first).abs() > 0.1 * value.abs().max(f64::MIN_POSITIVE) {
        warnings.push(format!(
            "Einstein ratio drifts from {first} to {last} across the window; \
             the system may not be diffusive there"
        ));
    }
    Ok(TemperatureEstimate {
        value,
        stderr,
        warnings,
    })
}

/// Central finite-difference sensitivity plan.
#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub perturbation: Perturbation,
    pub observable: Observable,
    pub grid: RecordGrid,
    pub n_traj: u64,
    pub seed: u64,
    /// Initial perturbation strength; halved when the response is visibly
    /// nonlinear, at most `max_halvings` times.
    pub lambda: f64,
    pub max_halvings: usize,
}

/// A finite-difference estimate and the strength it was accepted at.
#[derive(Clone, Debug)]
pub struct FdEstimate {
    pub series: EstimateSeries,
    pub lambda: f64,
}

/// Central finite difference d<Phi>/d lambda with common random numbers:
/// the tilted systems at +/- lambda and +/- lambda/2 share the burn-in
/// state and every noise increment, so for linear dynamics the difference
/// quotient is deterministic. The two strengths must agree within five
/// combined standard errors everywhere; otherwise lambda is halved and the
/// ensemble rerun, and after `max_halvings` failures the response is
/// declared nonlinear.
pub fn finite_difference_sensitivity(cfg: &SimConfig, fd: &FdConfig) -> Result<FdEstimate> {
    if !(fd.lambda > 0.0) || !fd.lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "perturbation strength must be positive and finite, got {}",
            fd.lambda
        )));
    }
    if fd.n_traj == 0 {
        return Err(Error::InvalidParameter("need at least one trajectory".into()));
    }
    let mut lambda = fd.lambda;
    for _ in 0..=fd.max_halvings {
        let (full, half) = fd_pair(cfg, fd, lambda)?;
        let mut worst: (f64, f64) = (0.0, 0.0); // (excess, time)
        for i in 0..full.len() {
            let gap = (full.estimate(i) - half.estimate(i)).abs();
            let allowed = 5.0 * (full.stderr(i).powi(2) + half.stderr(i).powi(2)).sqrt()
                + 1e-12 * (1.0 + half.estimate(i).abs());
            if gap - allowed > worst.0 {
                worst = (gap - allowed, full.times()[i]);
            }
        }
        if worst.0 == 0.0 {
            return Ok(FdEstimate {
                series: half,
                lambda: 0.5 * lambda,
            });
        }
        log::info!(
            "finite difference at strength {lambda} disagrees with {0} (worst at t = {1}); halving",
            0.5 * lambda,
            worst.1
        );
        lambda *= 0.5;
    }
    Err(Error::Nonlinear(format!(
        "finite differences at strengths {lambda} and {} still disagree after {} halvings",
        0.5 * lambda,
        fd.max_halvings
    )))
}

/// One paired ensemble: estimates at strength `lambda` and `lambda / 2`
/// from the same trajectories and increments.
fn fd_pair(cfg: &SimConfig, fd: &FdConfig, lambda: f64) -> Result<(EstimateSeries, EstimateSeries)> {
    let base = Simulator::new(cfg)?;
    let strengths = [lambda, -lambda, 0.5 * lambda, -0.5 * lambda];
    let tilted: Vec<Simulator> = strengths
        .iter()
        .map(|&s| {
            let mut tcfg = cfg.clone();
            tcfg.force = ForceField::Perturbed {
                base: Box::new(cfg.force.clone()),
                shape: fd.perturbation,
                lambda: s,
            };
            Simulator::new(&tcfg)
        })
        .collect::<Result<_>>()?;
    let n = base.n_components();

    let run_one = |tid: u64| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(fd.seed);
        rng.set_stream(tid);
        let mut st = base.init_state(&mut rng);
        base.advance(&mut st, &mut rng, base.burn_in_steps())?;
        let mut branches = [st.clone(), st.clone(), st.clone(), st];
        let mut dw = vec![0.0; base.noise_dim()];
        let phi_mean = |b: &crate::dynamics::SimState| {
            b.x.iter().map(|&x| fd.observable.eval(x)).sum::<f64>() / n as f64
        };
        let mut row_full = Vec::with_capacity(fd.grid.count + 1);
        let mut row_half = Vec::with_capacity(fd.grid.count + 1);
        let mut record = |branches: &[crate::dynamics::SimState; 4]| {
            row_full.push((phi_mean(&branches[0]) - phi_mean(&branches[1])) / (2.0 * lambda));
            row_half.push((phi_mean(&branches[2]) - phi_mean(&branches[3])) / lambda);
        };
        record(&branches);
        for step in 1..=fd.grid.total_steps() {
            base.draw_increments(&mut rng, &mut dw);
            for (b, sim) in branches.iter_mut().zip(&tilted) {
                sim.step_given(b, &dw)?;
            }
            if step % fd.grid.every == 0 {
                record(&branches);
            }
        }
        Ok((row_full, row_half))
    };

    let times = fd.grid.times(base.dt());
    let mut full = EstimateSeries::new(times.clone());
    let mut half = EstimateSeries::new(times);
    run_trajectories(fd.n_traj, run_one, |(rf, rh)| {
        full.push_row(&rf);
        half.push_row(&rh);
    })?;
    Ok((full, half))
}

/// Scalar calibration summary extracted from an autocovariance curve: the
/// zero-frequency spectral weight and the correlation time defined through
/// the curvature ratio of the spectrum at zero frequency.
#[derive(Clone, Copy, Debug)]
pub struct SpectrumFit {
    pub psd0: f64,
    pub psd0_stderr: f64,
    pub tau_c: f64,
    pub tau_c_stderr: f64,
}

/// Empirical validation bundle for one noise model: the sampled
/// autocovariance curve and the spectral scalars fitted from it.
#[derive(Clone, Debug)]
pub struct NoiseValidation {
    pub autocov: EstimateSeries,
    pub fit: SpectrumFit,
}

// Trajectory batches behind the fit-level error bars. Batch means keep the
// strong cross-lag correlations of a single trajectory inside one fit.
const FIT_BATCHES: u64 = 32;

/// Samples the stationary autocovariance of one scalar noise output on the
/// lag grid in `study`, time-averaging over `study.n_origins` origins per
/// trajectory, and fits an amplitude and a time-scale factor against the
/// model curve: c_fit(t) = s * c_model(r * t). The reported scalars are the
/// zero-frequency weight and curvature ratio of that fitted spectrum,
/// (s / r) * psd(0) and tau_c / r, with errors from batch-to-batch spread.
///
/// `study.origin_every` must be a multiple of `study.lags.every` so that
/// every origin lies on the lag grid; the internal state starts in its
/// stationary law, so no burn-in is applied.
pub fn validate_noise(
    model: &SpectrumModel,
    dt: f64,
    study: &TracerConfig,
    n_traj: u64,
    seed: u64,
) -> Result<NoiseValidation> {
    if study.origin_every == 0 || study.n_origins == 0 {
        return Err(Error::InvalidParameter(
            "autocovariance sampling needs origin_every >= 1 and n_origins >= 1".into(),
        ));
    }
    if study.lags.every == 0 || study.lags.count < 2 {
        return Err(Error::InvalidParameter(
            "autocovariance sampling needs a lag grid with every >= 1 and count >= 2".into(),
        ));
    }
    if study.origin_every % study.lags.every != 0 {
        return Err(Error::InvalidParameter(format!(
            "origin spacing ({} steps) must be a multiple of the lag spacing ({} steps) \
             so origins stay on the lag grid",
            study.origin_every, study.lags.every
        )));
    }
    if n_traj < 2 {
        return Err(Error::InvalidParameter(
            "noise validation needs at least two trajectories".into(),
        ));
    }
    let cfg = SimConfig {
        model: model.clone(),
        force: ForceField::Free,
        n_particles: 1,
        dim: 1,
        dt,
        burn_in: Some(0.0),
        initial: InitialCondition::Origin,
    };
    let sim = Simulator::new(&cfg)?;
    let n_lags = study.lags.count + 1;
    // Origin spacing in lag-grid units; all products live on the lag grid.
    let stride = study.origin_every / study.lags.every;
    let last_grid = (study.n_origins - 1) * stride + study.lags.count;

    let run_one = |tid: u64| -> Result<(u64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tid);
        let mut st = sim.init_state(&mut rng);
        let mut dw = vec![0.0; sim.noise_dim()];
        let mut ring = vec![0.0; n_lags];
        let mut sums = vec![0.0; n_lags];
        for gi in 0..=last_grid {
            if gi > 0 {
                for _ in 0..study.lags.every {
                    sim.step(&mut st, &mut rng, &mut dw)?;
                }
            }
            let f = sim.noise_output(&st.y, 0);
            // The ring holds the last n_lags grid samples; every pairing
            // reaches back at most count points, so no slot is overwritten
            // before its final use.
            ring[gi % n_lags] = f;
            for l in 0..=study.lags.count.min(gi) {
                let oi = gi - l;
                if oi % stride == 0 && oi / stride < study.n_origins {
                    sums[l] += ring[oi % n_lags] * f;
                }
            }
        }
        let norm = study.n_origins as f64;
        for v in &mut sums {
            *v /= norm;
        }
        Ok((tid, sums))
    };

    let n_batches = FIT_BATCHES.min(n_traj) as usize;
    let mut series = EstimateSeries::new(study.lags.times(dt));
    let mut batch_sums = vec![vec![0.0; n_lags]; n_batches];
    let mut batch_counts = vec![0u64; n_batches];
    run_trajectories(n_traj, run_one, |(tid, row)| {
        series.push_row(&row);
        let b = (tid % n_batches as u64) as usize;
        batch_counts[b] += 1;
        for (acc, v) in batch_sums[b].iter_mut().zip(&row) {
            *acc += v;
        }
    })?;

    let times = series.times().to_vec();
    let c0 = series.estimate(0).abs().max(f64::MIN_POSITIVE);
    let weights: Vec<f64> = (0..series.len())
        .map(|i| {
            let se = series.stderr(i);
            1.0 / (se * se + (1e-8 * c0).powi(2))
        })
        .collect();

    let mean_curve: Vec<f64> = (0..series.len()).map(|i| series.estimate(i)).collect();
    let (s, r) = fit_shape_scale(&times, &mean_curve, &weights, model)?;
    let psd0_model = model.psd(0.0);
    let mut acc_psd0 = Welford::new();
    let mut acc_tau = Welford::new();
    for (sums, &count) in batch_sums.iter().zip(&batch_counts) {
        if count == 0 {
            continue;
        }
        let curve: Vec<f64> = sums.iter().map(|v| v / count as f64).collect();
        let (sb, rb) = fit_shape_scale(&times, &curve, &weights, model)?;
        acc_psd0.push(sb / rb * psd0_model);
        acc_tau.push(model.tau_c / rb);
    }
    let fit = SpectrumFit {
        psd0: s / r * psd0_model,
        psd0_stderr: acc_psd0.stderr(),
        tau_c: model.tau_c / r,
        tau_c_stderr: acc_tau.stderr(),
    };
    Ok(NoiseValidation {
        autocov: series,
        fit,
    })
}

// Weighted least squares of curve against s * c_model(r * t): s is closed
// form given r, r is minimized by a coarse scan plus golden-section refine.
fn fit_shape_scale(
    times: &[f64],
    curve: &[f64],
    weights: &[f64],
    model: &SpectrumModel,
) -> Result<(f64, f64)> {
    let amp = |r: f64| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((&t, &y), &w) in times.iter().zip(curve).zip(weights) {
            let c = model.correlation(r * t);
            num += w * y * c;
            den += w * c * c;
        }
        num / den
    };
    let loss = |r: f64| -> f64 {
        let s = amp(r);
        times
            .iter()
            .zip(curve)
            .zip(weights)
            .map(|((&t, &y), &w)| {
                let d = y - s * model.correlation(r * t);
                w * d * d
            })
            .sum()
    };

    let (r_lo, r_hi) = (0.25f64, 4.0f64);
    let n_scan = 96;
    let log_step = (r_hi / r_lo).ln() / n_scan as f64;
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..=n_scan {
        let r = r_lo * (log_step * i as f64).exp();
        let v = loss(r);
        if v < best.0 {
            best = (v, i);
        }
    }
    if best.1 == 0 || best.1 == n_scan {
        return Err(Error::Calibration(format!(
            "autocovariance time scale is off the model by more than {r_lo}x to {r_hi}x; \
             curve does not resemble the configured spectrum"
        )));
    }
    let mut a = r_lo * (log_step * (best.1 - 1) as f64).exp();
    let mut b = r_lo * (log_step * (best.1 + 1) as f64).exp();
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c1 = b - inv_phi * (b - a);
    let mut c2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (loss(c1), loss(c2));
    for _ in 0..80 {
        if f1 < f2 {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - inv_phi * (b - a);
            f1 = loss(c1);
        } else {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + inv_phi * (b - a);
            f2 = loss(c2);
        }
    }
    let r = 0.5 * (a + b);
    Ok((amp(r), r))
}

/// Fits the zero-frequency spectral weight and the correlation time from an
/// autocovariance curve via trapezoid moments: with
/// `I_m = integral of t^m c(t) dt` over the recorded window, the spectral
/// weight at zero frequency is `2 I_0` and the correlation time is
/// `sqrt(I_2 / I_0)`. The window must extend well past the decay of `c`,
/// otherwise both moments are biased low. The error propagation treats the
/// points as independent, which holds for exact or deeply averaged curves;
/// scalars for raw Monte Carlo curves come from `validate_noise` instead.
pub fn fit_spectrum_scalars(autocov: &EstimateSeries) -> Result<SpectrumFit> {
    let times = autocov.times();
    if times.len() < 3 {
        return Err(Error::ShortTrajectory(
            "spectrum fit needs at least three autocovariance points".into(),
        ));
    }
    // Trapezoid weights for I_0 and I_2 on the (possibly nonuniform) grid.
    let m = times.len();
    let mut w = vec![0.0; m];
    for i in 0..m - 1 {
        let h = times[i + 1] - times[i];
        if !(h > 0.0) {
            return Err(Error::InvalidParameter(
                "autocovariance grid must be strictly increasing".into(),
            ));
        }
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    let mut i0 = 0.0;
    let mut i2 = 0.0;
    let mut var_i0 = 0.0;
    let mut var_i2 = 0.0;
    let mut cov_02 = 0.0;
    for i in 0..m {
        let c = autocov.estimate(i);
        let se = autocov.stderr(i);
        let w0 = w[i];
        let w2 = w[i] * times[i] * times[i];
        i0 += w0 * c;
        i2 += w2 * c;
        var_i0 += (w0 * se).powi(2);
        var_i2 += (w2 * se).powi(2);
        cov_02 += w0 * w2 * se * se;
    }
    if !(i0 > 0.0) || !(i2 > 0.0) {
        return Err(Error::Calibration(format!(
            "autocovariance moments not positive (I0 = {i0}, I2 = {i2}); \
             window too short or statistics too noisy"
        )));
    }
    let tau_c = (i2 / i0).sqrt();
    // Delta method on tau_c = sqrt(I2/I0).
    let d_d2 = 0.5 / (tau_c * i0);
    let d_d0 = -0.5 * tau_c / i0;
    let var_tau =
        d_d2 * d_d2 * var_i2 + d_d0 * d_d0 * var_i0 + 2.0 * d_d0 * d_d2 * cov_02;
    Ok(SpectrumFit {
        psd0: 2.0 * i0,
        psd0_stderr: 2.0 * var_i0.sqrt(),
        tau_c,
        tau_c_stderr: var_tau.max(0.0).sqrt(),
    })
}
