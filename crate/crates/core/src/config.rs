//! Experiment configuration: a flat sectioned key=value format, schema
//! resolution per experiment kind, and a canonical content hash.
//!
//! The hash covers every semantically meaningful key with its resolved
//! value (defaults filled in, the seed after any command-line override) and
//! excludes the output directory, so a rerun of the same physics hashes
//! identically no matter where its artifacts land.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::malliavin::RecordGrid;
use crate::noise::{calibrate, FamilySpec, NoiseSpec, RationalPeak};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    HarmonicSensitivity,
    IpsMobility,
    NoiseValidation,
    OracleCompare,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::HarmonicSensitivity => "harmonic-sensitivity",
            ExperimentKind::IpsMobility => "ips-mobility",
            ExperimentKind::NoiseValidation => "noise-validation",
            ExperimentKind::OracleCompare => "oracle-compare",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForceKind {
    Free,
    Harmonic,
    ScreenedCoulomb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationKind {
    Constant,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservableKind {
    Position,
    PositionSquared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermsKind {
    Total,
    All,
}

/// Fully resolved experiment description: every default filled in, every
/// time given in steps where the runner needs steps.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub spectrum: NoiseSpec,
    pub force: ForceKind,
    pub stiffness: Option<f64>,
    pub n_particles: usize,
    pub dim: usize,
    pub dt: f64,
    pub burn_in: Option<f64>,
    pub density: f64,
    pub sigma_v: f64,
    pub perturbation: PerturbationKind,
    pub observable: ObservableKind,
    pub terms: TermsKind,
    pub n_trajectories: u64,
    pub grid: RecordGrid,
    pub origins: usize,
    pub origin_every: usize,
    pub window: Option<(f64, f64)>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Resolution result: the typed config, non-fatal warnings, and the
/// canonical hash of the semantic content.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub hash: String,
}

#[derive(Clone, Debug)]
struct RawEntry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

/// A parsed but not yet interpreted config file.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: Vec<RawEntry>,
}

/// Parses the sectioned key=value text. Full-line comments start with `#`
/// or `;`; values keep internal punctuation (peak lists, windows).
pub fn parse(text: &str) -> Result<RawConfig> {
    let mut entries: Vec<RawEntry> = Vec::new();
    let mut section = String::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw_line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
            continue;
        }
        if let Some(name) = t.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                Error::Config(format!("line {line}: unterminated section header"))
            })?;
            section = name.trim().to_string();
            if section.is_empty() {
                return Err(Error::Config(format!("line {line}: empty section name")));
            }
            continue;
        }
        let (key, value) = t.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line}: expected key = value, got {t:?}"))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {line}: key {key:?} appears before any [section] header"
            )));
        }
        if let Some(prev) = entries
            .iter()
            .find(|e| e.section == section && e.key == key)
        {
            return Err(Error::Config(format!(
                "line {line}: duplicate key {}.{key} (first set on line {})",
                section, prev.line
            )));
        }
        entries.push(RawEntry {
            section: section.clone(),
            key,
            value,
            line,
        });
    }
    Ok(RawConfig { entries })
}

/// Reads and parses a config file.
pub fn load(path: &Path) -> Result<RawConfig> {
    parse(&std::fs::read_to_string(path)?)
}

// Every key the format knows, as section.key. Present-but-unused keys from
// this list downgrade to warnings; anything else is an error.
const VOCABULARY: &[&str] = &[
    "experiment.kind",
    "spectrum.family",
    "spectrum.tau_c",
    "spectrum.gamma",
    "spectrum.nu",
    "spectrum.peaks",
    "spectrum.xi0",
    "spectrum.temperature",
    "dynamics.force",
    "dynamics.stiffness",
    "dynamics.n_particles",
    "dynamics.dim",
    "dynamics.dt",
    "dynamics.burn_in",
    "dynamics.density",
    "dynamics.sigma_v",
    "malliavin.perturbation",
    "malliavin.observable",
    "malliavin.terms",
    "estimator.n_trajectories",
    "estimator.t_max",
    "estimator.spacing",
    "estimator.origins",
    "estimator.origin_spacing",
    "estimator.window",
    "rng.seed",
    "output.dir",
];

struct Reader<'a> {
    raw: &'a RawConfig,
    used: Vec<bool>,
    problems: Vec<String>,
    warnings: Vec<String>,
    canon: BTreeMap<String, String>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Reader {
            raw,
            used: vec![false; raw.entries.len()],
            problems: Vec::new(),
            warnings: Vec::new(),
            canon: BTreeMap::new(),
        }
    }

    fn problem(&mut self, msg: impl Into<String>) {
        self.problems.push(msg.into());
    }

    fn take(&mut self, section: &str, key: &str) -> Option<&'a str> {
        for (i, e) in self.raw.entries.iter().enumerate() {
            if e.section == section && e.key == key {
                self.used[i] = true;
                return Some(&e.value);
            }
        }
        None
    }

    fn record(&mut self, section: &str, key: &str, value: impl fmt::Display) {
        self.canon.insert(format!("{section}.{key}"), value.to_string());
    }

    fn require(&mut self, section: &str, key: &str) -> Option<&'a str> {
        let v = self.take(section, key);
        if v.is_none() {
            self.problem(format!("missing required key {section}.{key}"));
        }
        v
    }

    fn f64_req(&mut self, section: &str, key: &str) -> Option<f64> {
        let v = self.require(section, key)?;
        self.parse_f64(section, key, v)
    }

    fn f64_opt(&mut self, section: &str, key: &str, default: f64) -> f64 {
        match self.take(section, key) {
            Some(v) => self.parse_f64(section, key, v).unwrap_or(default),
            None => {
                self.record(section, key, default);
                default
            }
        }
    }

    fn parse_f64(&mut self, section: &str, key: &str, v: &str) -> Option<f64> {
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => {
                self.record(section, key, x);
                Some(x)
            }
            _ => {
                self.problem(format!("{section}.{key}: expected a finite number, got {v:?}"));
                None
            }
        }
    }

    fn usize_opt(&mut self, section: &str, key: &str, default: usize) -> usize {
        match self.take(section, key) {
            Some(v) => match v.parse::<usize>() {
                Ok(x) => {
                    self.record(section, key, x);
                    x
                }
                Err(_) => {
                    self.problem(format!(
                        "{section}.{key}: expected a non-negative integer, got {v:?}"
                    ));
                    default
                }
            },
            None => {
                self.record(section, key, default);
                default
            }
        }
    }

    fn choice(&mut self, section: &str, key: &str, v: &str, allowed: &[&str]) -> Option<usize> {
        match allowed.iter().position(|a| *a == v) {
            Some(i) => {
                self.record(section, key, v);
                Some(i)
            }
            None => {
                self.problem(format!(
                    "{section}.{key}: unknown value {v:?} (expected one of {})",
                    allowed.join(" | ")
                ));
                None
            }
        }
    }

    // Converts a time to a whole number of steps of dt, or records a problem.
    fn steps_of(&mut self, what: &str, time: f64, dt: f64) -> Option<usize> {
        let steps = (time / dt).round();
        if steps < 1.0 || !steps.is_finite() {
            self.problem(format!("{what} = {time} is below one time step (dt = {dt})"));
            return None;
        }
        if (steps * dt - time).abs() > 1e-6 * time.abs() {
            self.problem(format!(
                "{what} = {time} is not a whole multiple of dt = {dt}"
            ));
            return None;
        }
        Some(steps as usize)
    }

    fn finish(mut self, kind: Option<ExperimentKind>) -> (Vec<String>, Vec<String>, BTreeMap<String, String>) {
        for (i, e) in self.raw.entries.iter().enumerate() {
            if self.used[i] {
                continue;
            }
            let full = format!("{}.{}", e.section, e.key);
            if VOCABULARY.contains(&full.as_str()) {
                let kind = kind.map(|k| k.as_str()).unwrap_or("this experiment");
                self.warnings
                    .push(format!("line {}: {full} is ignored by {kind}", e.line));
            } else {
                self.problems
                    .push(format!("line {}: unknown key {full}", e.line));
            }
        }
        (self.problems, self.warnings, self.canon)
    }
}

impl RawConfig {
    /// Resolves the raw keys against the schema of the configured
    /// experiment kind. All problems are collected into one error; warnings
    /// (ignored keys, coarse time steps) never fail the resolution.
    pub fn resolve(
        &self,
        seed_override: Option<u64>,
        out_override: Option<&Path>,
    ) -> Result<Resolved> {
        let mut r = Reader::new(self);

        let kind = r.require("experiment", "kind").and_then(|v| {
            r.choice(
                "experiment",
                "kind",
                v,
                &[
                    "harmonic-sensitivity",
                    "ips-mobility",
                    "noise-validation",
                    "oracle-compare",
                ],
            )
            .map(|i| {
                [
                    ExperimentKind::HarmonicSensitivity,
                    ExperimentKind::IpsMobility,
                    ExperimentKind::NoiseValidation,
                    ExperimentKind::OracleCompare,
                ][i]
            })
        });

        let spectrum = resolve_spectrum(&mut r);

        // Dynamics: dt always, the rest depends on the experiment.
        let dt = r.f64_req("dynamics", "dt").filter(|&v| {
            if v > 0.0 {
                true
            } else {
                r.problem(format!("dynamics.dt must be positive, got {v}"));
                false
            }
        });

        let (force, stiffness, n_particles, dim, density, sigma_v) = match kind {
            Some(ExperimentKind::HarmonicSensitivity) | Some(ExperimentKind::OracleCompare) => {
                if let Some(v) = r.require("dynamics", "force") {
                    if r.choice("dynamics", "force", v, &["harmonic"]).is_none() {
                        r.problem(format!(
                            "{} needs dynamics.force = harmonic",
                            kind.unwrap()
                        ));
                    }
                }
                let k = r.f64_req("dynamics", "stiffness").filter(|&v| {
                    if v > 0.0 {
                        true
                    } else {
                        r.problem(format!("dynamics.stiffness must be positive, got {v}"));
                        false
                    }
                });
                let n = r.usize_opt("dynamics", "n_particles", 1);
                if n == 0 {
                    r.problem("dynamics.n_particles must be at least 1");
                }
                let dim = r.usize_opt("dynamics", "dim", 1);
                if dim != 1 {
                    r.problem(format!(
                        "harmonic experiments are one-dimensional, got dim = {dim}"
                    ));
                }
                (ForceKind::Harmonic, k, n.max(1), 1, 0.51, 1.0)
            }
            Some(ExperimentKind::IpsMobility) => {
                if let Some(v) = r.require("dynamics", "force") {
                    if r.choice("dynamics", "force", v, &["screened-coulomb"]).is_none() {
                        r.problem("ips-mobility needs dynamics.force = screened-coulomb");
                    }
                }
                let n = match r.require("dynamics", "n_particles") {
                    Some(v) => match v.parse::<usize>() {
                        Ok(x) if x >= 2 => {
                            r.record("dynamics", "n_particles", x);
                            x
                        }
                        _ => {
                            r.problem(format!(
                                "dynamics.n_particles: need an integer >= 2, got {v:?}"
                            ));
                            2
                        }
                    },
                    None => 2,
                };
                let dim = r.usize_opt("dynamics", "dim", 3);
                if dim != 3 {
                    r.problem(format!(
                        "the interacting-particle box is three-dimensional, got dim = {dim}"
                    ));
                }
                let density = r.f64_opt("dynamics", "density", 0.51);
                let sigma_v = r.f64_opt("dynamics", "sigma_v", 1.0);
                (ForceKind::ScreenedCoulomb, None, n, 3, density, sigma_v)
            }
            Some(ExperimentKind::NoiseValidation) => {
                // The noise runs force-free on a single internal component.
                (ForceKind::Free, None, 1, 1, 0.51, 1.0)
            }
            None => (ForceKind::Free, None, 1, 1, 0.51, 1.0),
        };

        let burn_in = match r.take("dynamics", "burn_in") {
            Some(v) => {
                let parsed = r.parse_f64("dynamics", "burn_in", v);
                if let Some(b) = parsed {
                    if b < 0.0 {
                        r.problem(format!("dynamics.burn_in must be non-negative, got {b}"));
                    }
                }
                parsed
            }
            None => {
                r.record("dynamics", "burn_in", "auto");
                None
            }
        };

        // Malliavin descriptor: consumed by the harmonic experiments.
        let harmonic_kind = matches!(
            kind,
            Some(ExperimentKind::HarmonicSensitivity) | Some(ExperimentKind::OracleCompare)
        );
        let (perturbation, observable, terms) = if harmonic_kind {
            let pert = r
                .require("malliavin", "perturbation")
                .and_then(|v| r.choice("malliavin", "perturbation", v, &["constant", "linear"]))
                .map(|i| [PerturbationKind::Constant, PerturbationKind::Linear][i])
                .unwrap_or(PerturbationKind::Constant);
            let obs = r
                .require("malliavin", "observable")
                .and_then(|v| {
                    r.choice("malliavin", "observable", v, &["position", "position-squared"])
                })
                .map(|i| [ObservableKind::Position, ObservableKind::PositionSquared][i])
                .unwrap_or(ObservableKind::Position);
            let default_terms = if kind == Some(ExperimentKind::OracleCompare) {
                TermsKind::All
            } else {
                TermsKind::Total
            };
            let terms = match r.take("malliavin", "terms") {
                Some(v) => r
                    .choice("malliavin", "terms", v, &["total", "all"])
                    .map(|i| [TermsKind::Total, TermsKind::All][i])
                    .unwrap_or(default_terms),
                None => {
                    let s = match default_terms {
                        TermsKind::Total => "total",
                        TermsKind::All => "all",
                    };
                    r.record("malliavin", "terms", s);
                    default_terms
                }
            };
            (pert, obs, terms)
        } else {
            (
                PerturbationKind::Constant,
                ObservableKind::Position,
                TermsKind::Total,
            )
        };

        // Estimator plan.
        let n_trajectories = match r.require("estimator", "n_trajectories") {
            Some(v) => match v.parse::<u64>() {
                Ok(x) if x >= 1 => {
                    r.record("estimator", "n_trajectories", x);
                    x
                }
                _ => {
                    r.problem(format!(
                        "estimator.n_trajectories: need an integer >= 1, got {v:?}"
                    ));
                    1
                }
            },
            None => 1,
        };
        let t_max = r.f64_req("estimator", "t_max");
        let spacing = r.f64_req("estimator", "spacing");
        let grid = match (dt, t_max, spacing) {
            (Some(dt), Some(t_max), Some(spacing)) => {
                let every = r.steps_of("estimator.spacing", spacing, dt);
                match every {
                    Some(every) => {
                        let count = r.steps_of("estimator.t_max", t_max, every as f64 * dt);
                        count.map(|count| RecordGrid { every, count })
                    }
                    None => None,
                }
            }
            _ => None,
        };

        let origin_kind = matches!(
            kind,
            Some(ExperimentKind::IpsMobility) | Some(ExperimentKind::NoiseValidation)
        );
        let (origins, origin_every) = if origin_kind {
            let origins = r.usize_opt("estimator", "origins", 1);
            if origins == 0 {
                r.problem("estimator.origins must be at least 1");
            }
            let origin_every = match r.take("estimator", "origin_spacing") {
                Some(v) => {
                    let t = r.parse_f64("estimator", "origin_spacing", v);
                    match (t, dt) {
                        (Some(t), Some(dt)) => {
                            r.steps_of("estimator.origin_spacing", t, dt).unwrap_or(1)
                        }
                        _ => 1,
                    }
                }
                None => {
                    if origins > 1 {
                        r.problem("estimator.origin_spacing is required when origins > 1");
                    }
                    r.record("estimator", "origin_spacing", "unset");
                    1
                }
            };
            (origins.max(1), origin_every)
        } else {
            (1, 1)
        };

        if kind == Some(ExperimentKind::NoiseValidation) {
            if let Some(g) = grid {
                if g.count < 2 {
                    r.problem(
                        "noise-validation needs at least two recorded lags \
                         (raise estimator.t_max or lower estimator.spacing)",
                    );
                }
                if origin_every % g.every != 0 {
                    r.problem(format!(
                        "estimator.origin_spacing must be a whole multiple of \
                         estimator.spacing ({origin_every} vs {} steps)",
                        g.every
                    ));
                }
            }
        }

        let window = if kind == Some(ExperimentKind::IpsMobility) {
            match r.take("estimator", "window") {
                Some(v) => match parse_pair(v) {
                    Some((a, b)) if a >= 0.0 && b > a => {
                        r.record("estimator", "window", format!("{a},{b}"));
                        Some((a, b))
                    }
                    _ => {
                        r.problem(format!(
                            "estimator.window: expected \"start,end\" with 0 <= start < end, got {v:?}"
                        ));
                        None
                    }
                },
                None => {
                    r.record("estimator", "window", "auto");
                    None
                }
            }
        } else {
            None
        };

        // Seed: config value, overridden by the command line; the canonical
        // hash always carries the value that actually runs.
        let seed = match seed_override {
            Some(s) => {
                r.take("rng", "seed");
                s
            }
            None => match r.require("rng", "seed") {
                Some(v) => match v.parse::<u64>() {
                    Ok(s) => s,
                    Err(_) => {
                        r.problem(format!("rng.seed: expected an unsigned integer, got {v:?}"));
                        0
                    }
                },
                None => 0,
            },
        };
        r.record("rng", "seed", seed);

        // Output location is excluded from the canonical hash.
        let out_dir = match out_override {
            Some(p) => {
                r.take("output", "dir");
                p.to_path_buf()
            }
            None => match r.require("output", "dir") {
                Some(v) => PathBuf::from(v),
                None => PathBuf::from("."),
            },
        };
        r.canon.remove("output.dir");

        // Physics sanity warnings (never fatal).
        if let (Some(spec), Some(dt)) = (spectrum.as_ref(), dt) {
            if let Ok(model) = calibrate(spec) {
                if dt >= 0.05 * model.tau_c {
                    r.warnings.push(format!(
                        "dt too coarse: dt = {dt} against tau_c = {}; colored-noise \
                         weights need dt well below the correlation time",
                        model.tau_c
                    ));
                }
            }
        }
        if let (Some(k), Some(dt), Some(spec)) = (stiffness, dt, spectrum.as_ref()) {
            if dt >= 0.1 * spec.xi0 / k {
                r.warnings.push(format!(
                    "dt = {dt} is close to the harmonic stability bound 2 xi0 / k = {}",
                    2.0 * spec.xi0 / k
                ));
            }
        }

        let (problems, warnings, canon) = r.finish(kind);
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("\n")));
        }

        let config = ExperimentConfig {
            kind: kind.expect("problems were empty"),
            spectrum: spectrum.expect("problems were empty"),
            force,
            stiffness,
            n_particles,
            dim,
            dt: dt.expect("problems were empty"),
            burn_in,
            density,
            sigma_v,
            perturbation,
            observable,
            terms,
            n_trajectories,
            grid: grid.expect("problems were empty"),
            origins,
            origin_every,
            window,
            seed,
            out_dir,
        };
        Ok(Resolved {
            config,
            warnings,
            hash: hash_canonical(&canon),
        })
    }
}

fn resolve_spectrum(r: &mut Reader) -> Option<NoiseSpec> {
    let xi0 = r.f64_opt("spectrum", "xi0", 1.0);
    let temperature = r.f64_opt("spectrum", "temperature", 1.0);
    let family_idx = r.require("spectrum", "family").and_then(|v| {
        r.choice(
            "spectrum",
            "family",
            v,
            &["ornstein-uhlenbeck", "rational", "matern", "rational-peaks"],
        )
    })?;
    let family = match family_idx {
        0 => Some(FamilySpec::OrnsteinUhlenbeck),
        1 => {
            let gamma = r.f64_req("spectrum", "gamma");
            gamma.map(|gamma| FamilySpec::Rational { gamma })
        }
        2 => {
            let nu = r.f64_req("spectrum", "nu");
            nu.map(|nu| FamilySpec::Matern { nu })
        }
        _ => {
            let peaks = r.require("spectrum", "peaks").and_then(|v| {
                match parse_peaks(v) {
                    Some(peaks) => {
                        let canon = peaks
                            .iter()
                            .map(|p| format!("{},{},{}", p.sigma, p.omega, p.ell))
                            .collect::<Vec<_>>()
                            .join(";");
                        r.record("spectrum", "peaks", canon);
                        Some(peaks)
                    }
                    None => {
                        r.problem(format!(
                            "spectrum.peaks: expected \"sigma,omega,ell\" triples \
                             separated by ';', got {v:?}"
                        ));
                        None
                    }
                }
            });
            if r.take("spectrum", "tau_c").is_some() {
                r.problem(
                    "spectrum.tau_c is derived from the peak list for rational-peaks; remove it",
                );
            }
            return peaks.map(|peaks| NoiseSpec {
                xi0,
                temperature,
                tau_c: 1.0,
                family: FamilySpec::RationalPeaks { peaks },
            });
        }
    }?;
    let tau_c = r.f64_req("spectrum", "tau_c").filter(|&v| {
        if v > 0.0 {
            true
        } else {
            r.problem(format!("spectrum.tau_c must be positive, got {v}"));
            false
        }
    })?;
    Some(NoiseSpec {
        xi0,
        temperature,
        tau_c,
        family,
    })
}

fn parse_pair(v: &str) -> Option<(f64, f64)> {
    let mut it = v.split(',').map(str::trim);
    let a = it.next()?.parse::<f64>().ok()?;
    let b = it.next()?.parse::<f64>().ok()?;
    if it.next().is_some() || !a.is_finite() || !b.is_finite() {
        return None;
    }
    Some((a, b))
}

fn parse_peaks(v: &str) -> Option<Vec<RationalPeak>> {
    let mut peaks = Vec::new();
    for triple in v.split(';') {
        let fields: Vec<f64> = triple
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .ok()?;
        if fields.len() != 3 || fields.iter().any(|f| !f.is_finite()) {
            return None;
        }
        peaks.push(RationalPeak {
            sigma: fields[0],
            omega: fields[1],
            ell: fields[2],
        });
    }
    if peaks.is_empty() {
        return None;
    }
    Some(peaks)
}

fn hash_canonical(canon: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in canon {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
