//! Config-driven experiment runners: assemble a simulation from a resolved
//! config, run the requested estimator, and write CSV, summary, and
//! manifest artifacts. Summaries and CSVs are deterministic for a fixed
//! config and seed; only the manifest carries wall-clock data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{
    ExperimentConfig, ExperimentKind, ForceKind, ObservableKind, PerturbationKind, Resolved,
    TermsKind,
};
use crate::dynamics::{ForceField, InitialCondition, ScreenedCoulomb, SimConfig, Simulator};
use crate::error::{Error, Result};
use crate::harmonic::{HarmonicCase, MomentOracle};
use crate::malliavin::{
    sensitivity_ensemble, Observable, Perturbation, PerturbationLift, SensitivityTarget,
    TermSelection,
};
use crate::noise::calibrate;
use crate::observables::{
    einstein_temperature, tracer_ensemble, validate_noise, TracerConfig,
};
use crate::stats::EstimateSeries;

/// What a run produced: written files, the summary key/value pairs, and
/// non-fatal warnings gathered along the way.
#[derive(Debug)]
pub struct RunArtifacts {
    pub files: Vec<PathBuf>,
    pub summary: Vec<(String, SummaryValue)>,
    pub warnings: Vec<String>,
}

/// One summary entry; rendered as a JSON scalar.
#[derive(Clone, Debug)]
pub enum SummaryValue {
    Num(f64),
    Int(u64),
    Text(String),
}

impl SummaryValue {
    fn render(&self) -> String {
        match self {
            // JSON has no non-finite literals; report them as null.
            SummaryValue::Num(x) if x.is_finite() => format!("{x}"),
            SummaryValue::Num(_) => "null".into(),
            SummaryValue::Int(n) => format!("{n}"),
            SummaryValue::Text(s) => format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\"")),
        }
    }
}

/// Runs the configured experiment on a worker pool of the given size
/// (`None` = hardware parallelism) and writes all artifacts to the
/// configured output directory.
pub fn run(resolved: &Resolved, threads: Option<usize>) -> Result<RunArtifacts> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let started = Instant::now();
    let mut artifacts = pool.install(|| dispatch(resolved))?;
    write_manifest(resolved, started, &mut artifacts)?;
    Ok(artifacts)
}

/// Writes the analytic curves for the configured experiment without any
/// sampling: moment-oracle sensitivity curves for the harmonic kinds, the
/// model autocovariance for noise validation. Interacting-particle mobility
/// has no closed form.
pub fn oracle_curves(resolved: &Resolved) -> Result<RunArtifacts> {
    let cfg = &resolved.config;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let times = cfg.grid.times(cfg.dt);
    match cfg.kind {
        ExperimentKind::HarmonicSensitivity | ExperimentKind::OracleCompare => {
            let scfg = sim_config(cfg)?;
            let targets = build_targets(cfg, &scfg)?;
            let case = HarmonicCase {
                stiffness: cfg.stiffness.expect("harmonic"),
                model: scfg.model.clone(),
            };
            let oracle = MomentOracle::new(&case)?;
            let curves = oracle.series(&targets, &times, None)?;
            let mut files = Vec::new();
            for (target, exact) in targets.iter().zip(&curves) {
                let path = cfg.out_dir.join(format!("oracle_{}.csv", target_stem(target)));
                write_series_csv(&path, &EstimateSeries::from_exact(times.clone(), exact))?;
                files.push(path);
            }
            Ok(RunArtifacts {
                files,
                summary: Vec::new(),
                warnings: Vec::new(),
            })
        }
        ExperimentKind::NoiseValidation => {
            let model = calibrate(&cfg.spectrum)?;
            let mut csv = String::from("t,model\n");
            for &t in &times {
                writeln!(csv, "{},{}", t, model.correlation(t)).expect("string write");
            }
            let path = cfg.out_dir.join("autocov_model.csv");
            std::fs::write(&path, csv)?;
            Ok(RunArtifacts {
                files: vec![path],
                summary: Vec::new(),
                warnings: Vec::new(),
            })
        }
        ExperimentKind::IpsMobility => Err(Error::Config(
            "no analytic oracle for interacting-particle mobility; use run".into(),
        )),
    }
}

fn dispatch(resolved: &Resolved) -> Result<RunArtifacts> {
    let cfg = &resolved.config;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut artifacts = match cfg.kind {
        ExperimentKind::HarmonicSensitivity => run_harmonic_sensitivity(cfg),
        ExperimentKind::OracleCompare => run_oracle_compare(cfg),
        ExperimentKind::NoiseValidation => run_noise_validation(cfg),
        ExperimentKind::IpsMobility => run_ips_mobility(cfg),
    }?;
    artifacts
        .summary
        .insert(0, ("kind".into(), SummaryValue::Text(cfg.kind.to_string())));
    let summary_path = cfg.out_dir.join("summary.json");
    write_summary(&summary_path, &artifacts.summary)?;
    artifacts.files.push(summary_path);
    Ok(artifacts)
}

fn sim_config(cfg: &ExperimentConfig) -> Result<SimConfig> {
    let model = calibrate(&cfg.spectrum)?;
    let (force, initial) = match cfg.force {
        ForceKind::Free => (ForceField::Free, InitialCondition::Origin),
        ForceKind::Harmonic => (
            ForceField::Harmonic {
                k: cfg.stiffness.expect("stiffness resolved for harmonic"),
            },
            InitialCondition::Origin,
        ),
        ForceKind::ScreenedCoulomb => (
            ForceField::ScreenedCoulomb(ScreenedCoulomb::with_density(
                cfg.spectrum.temperature,
                cfg.sigma_v,
                cfg.n_particles,
                cfg.density,
            )?),
            InitialCondition::Lattice,
        ),
    };
    Ok(SimConfig {
        model,
        force,
        n_particles: cfg.n_particles,
        dim: cfg.dim,
        dt: cfg.dt,
        burn_in: cfg.burn_in,
        initial,
    })
}

fn perturbation_of(kind: PerturbationKind) -> Perturbation {
    match kind {
        PerturbationKind::Constant => Perturbation::Constant,
        PerturbationKind::Linear => Perturbation::Linear,
    }
}

fn observable_of(kind: ObservableKind) -> Observable {
    match kind {
        ObservableKind::Position => Observable::Position,
        ObservableKind::PositionSquared => Observable::PositionSquared,
    }
}

// Builds the target list: the total estimator first, then one target per
// weight component when the per-term decomposition is requested.
fn build_targets(cfg: &ExperimentConfig, scfg: &SimConfig) -> Result<Vec<SensitivityTarget>> {
    let pert = perturbation_of(cfg.perturbation);
    let obs = observable_of(cfg.observable);
    let mut targets = vec![SensitivityTarget {
        perturbation: pert,
        observable: obs,
        term: TermSelection::Total,
    }];
    if cfg.terms == TermsKind::All {
        let sim = Simulator::new(scfg)?;
        let lift = PerturbationLift::new(&sim.realization().block, sim.dt())?;
        for &(j, k) in lift.weight_ids() {
            targets.push(SensitivityTarget {
                perturbation: pert,
                observable: obs,
                term: TermSelection::Term { j, k },
            });
        }
    }
    Ok(targets)
}

fn target_stem(target: &SensitivityTarget) -> String {
    match target.term {
        TermSelection::Total => "total".into(),
        TermSelection::Term { j, k } => format!("p{j}{k}"),
    }
}

fn write_series_csv(path: &Path, series: &EstimateSeries) -> Result<()> {
    std::fs::write(path, series.to_csv())?;
    Ok(())
}

fn run_harmonic_sensitivity(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let scfg = sim_config(cfg)?;
    let targets = build_targets(cfg, &scfg)?;
    let series = sensitivity_ensemble(&scfg, &targets, &cfg.grid, cfg.n_trajectories, cfg.seed)?;

    let case = HarmonicCase {
        stiffness: cfg.stiffness.expect("harmonic"),
        model: scfg.model.clone(),
    };
    let oracle = MomentOracle::new(&case)?;

    let mut files = Vec::new();
    let mut summary = Vec::new();
    for (target, s) in targets.iter().zip(&series) {
        let stem = target_stem(target);
        let path = cfg.out_dir.join(format!("sensitivity_{stem}.csv"));
        write_series_csv(&path, s)?;
        files.push(path);

        let last = s.len() - 1;
        summary.push((format!("{stem}_final"), SummaryValue::Num(s.estimate(last))));
        summary.push((
            format!("{stem}_final_stderr"),
            SummaryValue::Num(s.stderr(last)),
        ));
        let limit = oracle.longtime(target)?;
        summary.push((format!("{stem}_longtime_oracle"), SummaryValue::Num(limit)));
    }
    summary.push((
        "t_final".into(),
        SummaryValue::Num(*cfg.grid.times(cfg.dt).last().expect("nonempty grid")),
    ));
    summary.push((
        "n_trajectories".into(),
        SummaryValue::Int(cfg.n_trajectories),
    ));
    Ok(RunArtifacts {
        files,
        summary,
        warnings: Vec::new(),
    })
}

fn run_oracle_compare(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let scfg = sim_config(cfg)?;
    let targets = build_targets(cfg, &scfg)?;
    let series = sensitivity_ensemble(&scfg, &targets, &cfg.grid, cfg.n_trajectories, cfg.seed)?;

    let case = HarmonicCase {
        stiffness: cfg.stiffness.expect("harmonic"),
        model: scfg.model.clone(),
    };
    let oracle = MomentOracle::new(&case)?;
    let times = cfg.grid.times(cfg.dt);
    let curves = oracle.series(&targets, &times, None)?;

    let mut files = Vec::new();
    let mut summary = Vec::new();
    for ((target, mc), exact) in targets.iter().zip(&series).zip(&curves) {
        let stem = target_stem(target);
        let mc_path = cfg.out_dir.join(format!("mc_{stem}.csv"));
        write_series_csv(&mc_path, mc)?;
        files.push(mc_path);
        let oracle_path = cfg.out_dir.join(format!("oracle_{stem}.csv"));
        write_series_csv(
            &oracle_path,
            &EstimateSeries::from_exact(times.clone(), exact),
        )?;
        files.push(oracle_path);

        // Worst standardized deviation between the two routes.
        let mut max_z = 0.0f64;
        for i in 0..mc.len() {
            let se = mc.stderr(i);
            if se > 0.0 {
                max_z = max_z.max((mc.estimate(i) - exact[i]).abs() / se);
            }
        }
        summary.push((format!("{stem}_max_abs_z"), SummaryValue::Num(max_z)));
        summary.push((
            format!("{stem}_longtime_oracle"),
            SummaryValue::Num(oracle.longtime(target)?),
        ));
    }
    summary.push((
        "n_trajectories".into(),
        SummaryValue::Int(cfg.n_trajectories),
    ));
    Ok(RunArtifacts {
        files,
        summary,
        warnings: Vec::new(),
    })
}

fn run_noise_validation(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let model = calibrate(&cfg.spectrum)?;
    let study = TracerConfig {
        lags: cfg.grid,
        origin_every: cfg.origin_every,
        n_origins: cfg.origins,
    };
    let out = validate_noise(&model, cfg.dt, &study, cfg.n_trajectories, cfg.seed)?;

    // The curve CSV carries the model correlation alongside the estimate.
    let mut csv = String::from("t,estimate,stderr,n_samples,model\n");
    for (i, &t) in out.autocov.times().iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{}",
            t,
            out.autocov.estimate(i),
            out.autocov.stderr(i),
            out.autocov.n_samples(i),
            model.correlation(t)
        )
        .expect("string write");
    }
    let path = cfg.out_dir.join("autocov.csv");
    std::fs::write(&path, csv)?;

    let psd0_expected = model.psd(0.0);
    let fit = out.fit;
    let summary = vec![
        ("psd0".into(), SummaryValue::Num(fit.psd0)),
        ("psd0_stderr".into(), SummaryValue::Num(fit.psd0_stderr)),
        ("psd0_expected".into(), SummaryValue::Num(psd0_expected)),
        (
            "psd0_rel_error".into(),
            SummaryValue::Num(fit.psd0 / psd0_expected - 1.0),
        ),
        ("tau_c".into(), SummaryValue::Num(fit.tau_c)),
        ("tau_c_stderr".into(), SummaryValue::Num(fit.tau_c_stderr)),
        ("tau_c_expected".into(), SummaryValue::Num(model.tau_c)),
        (
            "tau_c_rel_error".into(),
            SummaryValue::Num(fit.tau_c / model.tau_c - 1.0),
        ),
        (
            "n_trajectories".into(),
            SummaryValue::Int(cfg.n_trajectories),
        ),
    ];
    Ok(RunArtifacts {
        files: vec![path],
        summary,
        warnings: Vec::new(),
    })
}

fn run_ips_mobility(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let scfg = sim_config(cfg)?;
    let tcfg = TracerConfig {
        lags: cfg.grid,
        origin_every: cfg.origin_every,
        n_origins: cfg.origins,
    };
    let series = tracer_ensemble(&scfg, &tcfg, cfg.n_trajectories, cfg.seed)?;
    let mut warnings = series.warnings.clone();

    let chi_path = cfg.out_dir.join("chi.csv");
    write_series_csv(&chi_path, &series.response)?;
    let msd_path = cfg.out_dir.join("msd.csv");
    write_series_csv(&msd_path, &series.msd)?;

    // Default fit window sits past both the noise correlation time and the
    // interaction time xi0 sigma_v^2 / T.
    let model = &scfg.model;
    let t_max = *cfg.grid.times(cfg.dt).last().expect("nonempty grid");
    let window = cfg.window.unwrap_or_else(|| {
        let scale = model
            .tau_c
            .max(model.xi0 * cfg.sigma_v * cfg.sigma_v / model.temperature);
        (5.0 * scale, 10.0 * scale)
    });
    if window.1 > t_max * (1.0 + 1e-9) {
        warnings.push(format!(
            "fit window end {} exceeds the recorded horizon {t_max}; \
             raise estimator.t_max or set estimator.window",
            window.1
        ));
    }

    let (mu, mu_err) = window_ratio_mean(&series.response, window, |t| t)?;
    let dim = cfg.dim as f64;
    let (d_sd, d_sd_err) = window_ratio_mean(&series.msd, window, |t| 2.0 * dim * t)?;
    let teff = einstein_temperature(&series.msd, &series.response, cfg.dim, window)?;
    warnings.extend(teff.warnings.iter().cloned());

    let summary = vec![
        ("mu".into(), SummaryValue::Num(mu)),
        ("mu_stderr".into(), SummaryValue::Num(mu_err)),
        ("d_sd".into(), SummaryValue::Num(d_sd)),
        ("d_sd_stderr".into(), SummaryValue::Num(d_sd_err)),
        ("t_eff_einstein".into(), SummaryValue::Num(teff.value)),
        (
            "t_eff_einstein_stderr".into(),
            SummaryValue::Num(teff.stderr),
        ),
        (
            "t_eff_single_particle".into(),
            SummaryValue::Num(model.temperature),
        ),
        (
            "t_eff_ratio".into(),
            SummaryValue::Num(teff.value / model.temperature),
        ),
        ("window_start".into(), SummaryValue::Num(window.0)),
        ("window_end".into(), SummaryValue::Num(window.1)),
        (
            "n_trajectories".into(),
            SummaryValue::Int(cfg.n_trajectories),
        ),
    ];
    Ok(RunArtifacts {
        files: vec![chi_path, msd_path],
        summary,
        warnings,
    })
}

// Mean of series(t) / denom(t) over grid points inside the window, with the
// conservative error propagation used for correlated lag points.
fn window_ratio_mean(
    series: &EstimateSeries,
    window: (f64, f64),
    denom: impl Fn(f64) -> f64,
) -> Result<(f64, f64)> {
    let mut vals = Vec::new();
    let mut errs = Vec::new();
    for (i, &t) in series.times().iter().enumerate() {
        if t < window.0 || t > window.1 {
            continue;
        }
        let d = denom(t);
        if d <= 0.0 {
            continue;
        }
        vals.push(series.estimate(i) / d);
        errs.push(series.stderr(i) / d);
    }
    if vals.is_empty() {
        return Err(Error::ShortTrajectory(format!(
            "no recorded points inside the fit window [{}, {}]; raise \
             estimator.t_max or set estimator.window",
            window.0, window.1
        )));
    }
    let n = vals.len() as f64;
    Ok((
        vals.iter().sum::<f64>() / n,
        errs.iter().sum::<f64>() / n,
    ))
}

fn write_summary(path: &Path, entries: &[(String, SummaryValue)]) -> Result<()> {
    let mut out = String::from("{\n");
    for (i, (k, v)) in entries.iter().enumerate() {
        let sep = if i + 1 == entries.len() { "" } else { "," };
        writeln!(out, "  \"{k}\": {}{sep}", v.render()).expect("string write");
    }
    out.push_str("}\n");
    std::fs::write(path, out)?;
    Ok(())
}

fn write_manifest(resolved: &Resolved, started: Instant, artifacts: &mut RunArtifacts) -> Result<()> {
    let cfg = &resolved.config;
    let wall = started.elapsed().as_secs_f64();
    let entries = vec![
        (
            "config_hash".to_string(),
            SummaryValue::Text(resolved.hash.clone()),
        ),
        ("seed".to_string(), SummaryValue::Int(cfg.seed)),
        (
            "code_version".to_string(),
            SummaryValue::Text(env!("CARGO_PKG_VERSION").to_string()),
        ),
        ("wall_clock_seconds".to_string(), SummaryValue::Num(wall)),
    ];
    let path = cfg.out_dir.join("manifest.json");
    write_summary(&path, &entries)?;
    artifacts.files.push(path);
    Ok(())
}
