//! Overdamped particle dynamics driven by realized colored noise.
//!
//! Discretization: explicit Euler for both positions and noise states,
//!
//!     x_i = x_{i-1} + dt/xi0 (F(x_{i-1}) + C y_{i-1}),
//!     y_i = (I - dt A) y_{i-1} + B dW_i,
//!
//! with dW_i ~ N(0, dt I). The position update is deterministic given the
//! pre-step state; weight propagation relies on x_i being independent of
//! dW_i.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::noise::{SpectrumModel, StateSpaceRealization};

/// Screened Coulomb repulsion
///
///     V(r) = amplitude exp(-kappa (r - sigma)) / r
///
/// truncated at `cutoff`, in a cubic periodic box of edge `box_edge` with
/// minimum-image displacements. Positions themselves stay unwrapped so that
/// mean-square displacements remain meaningful.
#[derive(Clone, Debug)]
pub struct ScreenedCoulomb {
    pub amplitude: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub cutoff: f64,
    pub box_edge: f64,
}

/// Two particles closer than this fraction of sigma indicate a broken
/// configuration rather than physics.
const OVERLAP_FRACTION: f64 = 1e-9;

impl ScreenedCoulomb {
    /// Standard parameterization: amplitude 475 T sigma, screening
    /// kappa sigma = 24, cutoff sigma + 10/kappa, box edge fixed by the
    /// number density N sigma^3 / L^3.
    pub fn with_density(
        temperature: f64,
        sigma: f64,
        n_particles: usize,
        number_density: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) || !(temperature > 0.0) || !(number_density > 0.0) {
            return Err(Error::InvalidParameter(
                "screened Coulomb needs positive temperature, sigma and density".into(),
            ));
        }
        if n_particles < 2 {
            return Err(Error::InvalidParameter(
                "an interacting system needs at least two particles".into(),
            ));
        }
        let kappa = 24.0 / sigma;
        let box_edge = (n_particles as f64 * sigma.powi(3) / number_density).cbrt();
        Ok(Self {
            amplitude: 475.0 * temperature * sigma,
            kappa,
            sigma,
            cutoff: sigma + 10.0 / kappa,
            box_edge,
        })
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("kappa", self.kappa),
            ("sigma", self.sigma),
            ("cutoff", self.cutoff),
            ("box_edge", self.box_edge),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "screened Coulomb {name} must be positive, got {v}"
                )));
            }
        }
        // Minimum image sees one periodic copy only.
        if self.cutoff > 0.5 * self.box_edge {
            return Err(Error::InvalidParameter(format!(
                "cutoff {} exceeds half the box edge {}; raise n_particles \
                 or the density",
                self.cutoff,
                0.5 * self.box_edge
            )));
        }
        Ok(())
    }

    pub fn pair_potential(&self, r: f64) -> f64 {
        if r >= self.cutoff {
            0.0
        } else {
            self.amplitude * (-self.kappa * (r - self.sigma)).exp() / r
        }
    }

    /// Magnitude of the repulsive pair force, -dV/dr.
    pub fn pair_force_magnitude(&self, r: f64) -> f64 {
        if r >= self.cutoff {
            0.0
        } else {
            self.amplitude * (-self.kappa * (r - self.sigma)).exp() * (self.kappa * r + 1.0)
                / (r * r)
        }
    }

    /// Force on particle i from its pair with j, accumulated into out.
    /// Shared by the cell-list and all-pairs paths so their per-pair
    /// arithmetic is identical.
    #[inline]
    fn accumulate_pair(
        &self,
        x: &[f64],
        i: usize,
        j: usize,
        out: &mut [f64],
    ) -> Result<()> {
        let l = self.box_edge;
        let mut d = [0.0f64; 3];
        let mut r2 = 0.0;
        for k in 0..3 {
            let mut dk = x[3 * i + k] - x[3 * j + k];
            dk -= l * (dk / l).round();
            d[k] = dk;
            r2 += dk * dk;
        }
        if r2 >= self.cutoff * self.cutoff {
            return Ok(());
        }
        let r = r2.sqrt();
        if r < OVERLAP_FRACTION * self.sigma {
            return Err(Error::ParticleOverlap { i, j, r });
        }
        let mag = self.pair_force_magnitude(r) / r;
        for k in 0..3 {
            out[3 * i + k] += mag * d[k];
        }
        Ok(())
    }

    /// Total forces; uses a cell list when at least three cells fit per
    /// dimension, otherwise the all-pairs reference path. Both paths visit
    /// each particle's neighbors in ascending index order, so they agree
    /// bitwise.
    pub fn forces(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = x.len() / 3;
        let cells_per_dim = (self.box_edge / self.cutoff).floor() as usize;
        if cells_per_dim < 3 {
            return self.forces_reference(x, out);
        }
        out.fill(0.0);
        let m = cells_per_dim;
        let cell_size = self.box_edge / m as f64;
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); m * m * m];
        let mut cell_of = vec![0usize; n];
        for i in 0..n {
            let mut idx = 0;
            for k in 0..3 {
                let w = x[3 * i + k].rem_euclid(self.box_edge);
                let c = ((w / cell_size) as usize).min(m - 1);
                idx = idx * m + c;
            }
            cell_of[i] = idx;
            buckets[idx].push(i as u32);
        }
        let mut neighbors: Vec<u32> = Vec::with_capacity(64);
        for i in 0..n {
            let idx = cell_of[i];
            let (ci, rem) = (idx / (m * m), idx % (m * m));
            let (cj, ck) = (rem / m, rem % m);
            neighbors.clear();
            for di in [m - 1, 0, 1] {
                for dj in [m - 1, 0, 1] {
                    for dk in [m - 1, 0, 1] {
                        let b = ((ci + di) % m) * m * m + ((cj + dj) % m) * m + (ck + dk) % m;
                        neighbors.extend_from_slice(&buckets[b]);
                    }
                }
            }
            neighbors.sort_unstable();
            for &j in neighbors.iter() {
                let j = j as usize;
                if j != i {
                    self.accumulate_pair(x, i, j, out)?;
                }
            }
        }
        Ok(())
    }

    /// All-pairs force evaluation, kept as the validation reference for the
    /// cell-list path.
    pub fn forces_reference(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = x.len() / 3;
        out.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if j != i {
                    self.accumulate_pair(x, i, j, out)?;
                }
            }
        }
        Ok(())
    }
}

/// Drift perturbation shape, applied per spatial component. Sensitivities
/// are derivatives with respect to the strength of one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    /// Fhat_c(x) = 1: a constant unit force on the component.
    Constant,
    /// Fhat_c(x) = x_c: a linear (stiffness-type) force on the component.
    Linear,
}

impl Perturbation {
    #[inline]
    pub fn eval(&self, x: &[f64], c: usize) -> f64 {
        match self {
            Perturbation::Constant => 1.0,
            Perturbation::Linear => x[c],
        }
    }

    /// grad Fhat_c . v for the component velocity v_c.
    #[inline]
    pub fn grad_dot(&self, v_c: f64) -> f64 {
        match self {
            Perturbation::Constant => 0.0,
            Perturbation::Linear => v_c,
        }
    }
}

/// Deterministic part of the dynamics.
#[derive(Clone, Debug)]
pub enum ForceField {
    Free,
    /// F(x) = -k x per component.
    Harmonic { k: f64 },
    ScreenedCoulomb(ScreenedCoulomb),
    /// Base force plus lambda Fhat; the finite-difference baselines simulate
    /// these tilted systems directly.
    Perturbed {
        base: Box<ForceField>,
        shape: Perturbation,
        lambda: f64,
    },
}

impl ForceField {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ForceField::Free => {
                out.fill(0.0);
                Ok(())
            }
            ForceField::Harmonic { k } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -k * xi;
                }
                Ok(())
            }
            ForceField::ScreenedCoulomb(sc) => sc.forces(x, out),
            ForceField::Perturbed { base, shape, lambda } => {
                base.eval(x, out)?;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += lambda * shape.eval(x, c);
                }
                Ok(())
            }
        }
    }

    /// Periodic box edge, when the force field defines one.
    pub fn box_edge(&self) -> Option<f64> {
        match self {
            ForceField::ScreenedCoulomb(sc) => Some(sc.box_edge),
            ForceField::Perturbed { base, .. } => base.box_edge(),
            _ => None,
        }
    }

    /// Slowest deterministic relaxation scale, used for burn-in defaults.
    pub fn relaxation_scale(&self, xi0: f64, temperature: f64) -> f64 {
        match self {
            ForceField::Free => 0.0,
            ForceField::Harmonic { k } => xi0 / k,
            ForceField::ScreenedCoulomb(sc) => xi0 * sc.sigma * sc.sigma / temperature,
            ForceField::Perturbed { base, .. } => base.relaxation_scale(xi0, temperature),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ForceField::Free => Ok(()),
            ForceField::Harmonic { k } => {
                if !k.is_finite() || *k <= 0.0 {
                    Err(Error::InvalidParameter(format!(
                        "harmonic stiffness must be positive, got {k}"
                    )))
                } else {
                    Ok(())
                }
            }
            ForceField::ScreenedCoulomb(sc) => {
                if dim != 3 {
                    return Err(Error::InvalidParameter(format!(
                        "screened Coulomb runs in dimension 3, got {dim}"
                    )));
                }
                sc.validate()
            }
            ForceField::Perturbed { base, lambda, .. } => {
                if !lambda.is_finite() {
                    return Err(Error::InvalidParameter(
                        "perturbation strength must be finite".into(),
                    ));
                }
                base.validate(dim)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum InitialCondition {
    /// All positions at the origin.
    Origin,
    /// Simple cubic lattice filling the periodic box; interacting systems
    /// start here.
    Lattice,
    /// Explicit coordinates, length n_particles * dim.
    Positions(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub model: SpectrumModel,
    pub force: ForceField,
    pub n_particles: usize,
    pub dim: usize,
    pub dt: f64,
    /// Equilibration time before recording; None picks
    /// 20 max(tau_c, relaxation scale).
    pub burn_in: Option<f64>,
    pub initial: InitialCondition,
}

impl SimConfig {
    pub fn n_components(&self) -> usize {
        self.n_particles * self.dim
    }

    pub fn effective_burn_in(&self) -> f64 {
        self.burn_in.unwrap_or_else(|| {
            let relax = self
                .force
                .relaxation_scale(self.model.xi0, self.model.temperature);
            20.0 * self.model.tau_c.max(relax)
        })
    }
}

/// Per-trajectory mutable state.
#[derive(Clone, Debug)]
pub struct SimState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    f_buf: Vec<f64>,
    y_tmp: Vec<f64>,
    pub step_index: u64,
}

/// Immutable stepping kernel shared across an ensemble. The noise update
/// matrices are flattened row-major; the state layout is component-major as
/// in the realization.
#[derive(Clone, Debug)]
pub struct Simulator {
    n_components: usize,
    n_particles: usize,
    dim: usize,
    q0: usize,
    p0: usize,
    dt: f64,
    sqrt_dt: f64,
    xi0_inv: f64,
    m_step: Vec<f64>,
    b0: Vec<f64>,
    c0: Vec<f64>,
    force: ForceField,
    realization: StateSpaceRealization,
    initial: InitialCondition,
    burn_in_time: f64,
    burn_steps: u64,
    /// Displacement cap applied during burn-in steps only; infinite when
    /// the force field has no short-range wall.
    burn_cap: f64,
}

impl Simulator {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        if cfg.n_particles == 0 {
            return Err(Error::InvalidParameter("need at least one particle".into()));
        }
        if !(1..=3).contains(&cfg.dim) {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 1, 2 or 3, got {}",
                cfg.dim
            )));
        }
        if !cfg.dt.is_finite() || cfg.dt <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "time step must be positive, got {}",
                cfg.dt
            )));
        }
        cfg.force.validate(cfg.dim)?;
        if let InitialCondition::Positions(p) = &cfg.initial {
            if p.len() != cfg.n_components() {
                return Err(Error::DimensionMismatch(format!(
                    "initial positions have length {}, expected {}",
                    p.len(),
                    cfg.n_components()
                )));
            }
        }
        if matches!(cfg.force, ForceField::ScreenedCoulomb(_))
            && matches!(cfg.initial, InitialCondition::Origin)
        {
            return Err(Error::InvalidParameter(
                "interacting particles cannot all start at the origin".into(),
            ));
        }
        let initial = match (&cfg.initial, &cfg.force) {
            (InitialCondition::Lattice, ForceField::ScreenedCoulomb(sc)) => {
                let mut x = lattice_positions(cfg.n_particles, cfg.dim, sc.box_edge);
                relax_lattice(&cfg.force, sc, cfg.n_particles, &mut x)?;
                InitialCondition::Positions(x)
            }
            _ => cfg.initial.clone(),
        };
        let realization = cfg.model.realize(cfg.n_components())?;
        let q0 = realization.q0();
        let p0 = realization.p0();
        let block = &realization.block;
        let mut m_step = vec![0.0; q0 * q0];
        for s in 0..q0 {
            for u in 0..q0 {
                m_step[s * q0 + u] =
                    if s == u { 1.0 } else { 0.0 } - cfg.dt * block.a[(s, u)];
            }
        }
        if cfg.dt * block.a.amax() > 0.5 {
            log::warn!(
                "dt {} is large against the noise relaxation rates (max |A| = {}); \
                 the explicit update may be inaccurate or unstable",
                cfg.dt,
                block.a.amax()
            );
        }
        let mut b0 = vec![0.0; q0 * p0];
        for s in 0..q0 {
            for w in 0..p0 {
                b0[s * p0 + w] = block.b[(s, w)];
            }
        }
        let c0 = block.c.iter().copied().collect();
        let burn_in_time = cfg.effective_burn_in();
        Ok(Self {
            n_components: cfg.n_components(),
            n_particles: cfg.n_particles,
            dim: cfg.dim,
            q0,
            p0,
            dt: cfg.dt,
            sqrt_dt: cfg.dt.sqrt(),
            xi0_inv: 1.0 / cfg.model.xi0,
            m_step,
            b0,
            c0,
            force: cfg.force.clone(),
            realization,
            initial,
            burn_in_time,
            burn_steps: (burn_in_time / cfg.dt).round() as u64,
            burn_cap: match &cfg.force {
                ForceField::ScreenedCoulomb(sc) => 0.25 / sc.kappa,
                _ => f64::INFINITY,
            },
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn q0(&self) -> usize {
        self.q0
    }

    pub fn p0(&self) -> usize {
        self.p0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise_dim(&self) -> usize {
        self.n_components * self.p0
    }

    pub fn realization(&self) -> &StateSpaceRealization {
        &self.realization
    }

    pub fn force(&self) -> &ForceField {
        &self.force
    }

    pub fn burn_in_time(&self) -> f64 {
        self.burn_in_time
    }

    pub fn burn_in_steps(&self) -> u64 {
        self.burn_steps
    }

    /// Colored-noise value C y for one component of a state.
    pub fn noise_output(&self, y: &[f64], comp: usize) -> f64 {
        let o = comp * self.q0;
        let mut acc = 0.0;
        for s in 0..self.q0 {
            acc += self.c0[s] * y[o + s];
        }
        acc
    }

    /// Fresh state: positions from the initial condition, noise states drawn
    /// from their stationary law.
    pub fn init_state<R: Rng + ?Sized>(&self, rng: &mut R) -> SimState {
        let x = match &self.initial {
            InitialCondition::Origin => vec![0.0; self.n_components],
            InitialCondition::Positions(p) => p.clone(),
            InitialCondition::Lattice => {
                let l = match &self.force {
                    ForceField::ScreenedCoulomb(sc) => sc.box_edge,
                    // Without a box the lattice spacing is arbitrary.
                    _ => 1.0,
                };
                lattice_positions(self.n_particles, self.dim, l)
            }
        };
        let y = self.realization.sample_stationary(rng);
        SimState {
            x,
            y,
            f_buf: vec![0.0; self.n_components],
            y_tmp: vec![0.0; self.q0],
            step_index: 0,
        }
    }

    /// One explicit Euler step; fills `dw` with the N(0, dt) increments used.
    pub fn step<R: Rng + ?Sized>(
        &self,
        st: &mut SimState,
        rng: &mut R,
        dw: &mut [f64],
    ) -> Result<()> {
        self.draw_increments(rng, dw);
        self.step_given(st, dw)
    }

    /// Fills `dw` with N(0, dt) increments for one step.
    pub fn draw_increments<R: Rng + ?Sized>(&self, rng: &mut R, dw: &mut [f64]) {
        debug_assert_eq!(dw.len(), self.n_components * self.p0);
        for v in dw.iter_mut() {
            *v = self.sqrt_dt * rng.sample::<f64, _>(StandardNormal);
        }
    }

    /// One explicit Euler step driven by given increments; several systems
    /// can be advanced by the same noise for common-random-number baselines.
    pub fn step_given(&self, st: &mut SimState, dw: &[f64]) -> Result<()> {
        debug_assert_eq!(dw.len(), self.n_components * self.p0);
        self.force.eval(&st.x, &mut st.f_buf)?;
        // Burn-in steps cap the displacement to a fraction of the screening
        // length so a tight start relaxes instead of stepping through the
        // repulsive wall. Recorded dynamics always see the exact update.
        let clamped = st.step_index < self.burn_steps;
        let mut sum = 0.0;
        for comp in 0..self.n_components {
            let yo = comp * self.q0;
            let mut noise = 0.0;
            for s in 0..self.q0 {
                noise += self.c0[s] * st.y[yo + s];
            }
            let mut dx = self.dt * self.xi0_inv * (st.f_buf[comp] + noise);
            if clamped {
                dx = dx.clamp(-self.burn_cap, self.burn_cap);
            }
            st.x[comp] += dx;
            sum += st.x[comp];
        }
        st.step_index += 1;
        if !sum.is_finite() {
            return Err(Error::NonFinite {
                step: st.step_index,
                time: st.step_index as f64 * self.dt,
                what: "position".into(),
            });
        }
        for comp in 0..self.n_components {
            let yo = comp * self.q0;
            let wo = comp * self.p0;
            for s in 0..self.q0 {
                let mut acc = 0.0;
                for u in 0..self.q0 {
                    acc += self.m_step[s * self.q0 + u] * st.y[yo + u];
                }
                for w in 0..self.p0 {
                    acc += self.b0[s * self.p0 + w] * dw[wo + w];
                }
                st.y_tmp[s] = acc;
            }
            st.y[yo..yo + self.q0].copy_from_slice(&st.y_tmp);
        }
        Ok(())
    }

    /// Runs `steps` steps discarding the increments (burn-in, gaps).
    pub fn advance<R: Rng + ?Sized>(
        &self,
        st: &mut SimState,
        rng: &mut R,
        steps: u64,
    ) -> Result<()> {
        let mut dw = vec![0.0; self.n_components * self.p0];
        for _ in 0..steps {
            self.step(st, rng, &mut dw)?;
        }
        Ok(())
    }
}

/// Per-sweep displacement cap for lattice relaxation, in units of sigma;
/// half the screening length at kappa sigma = 24, so the descent resolves
/// the repulsive wall instead of stepping through it.
const RELAX_CAP: f64 = 0.02;
const RELAX_SWEEPS: usize = 400;

// Capped steepest descent taking a fresh lattice off the repulsive wall.
// Deterministic, so every trajectory still starts from the same point.
// Stops once the largest net force falls to the single-pair force at the
// mean interparticle distance; stochastic burn-in does the rest. Exact
// checkerboard fills start force-balanced and exit on the first sweep.
fn relax_lattice(
    force: &ForceField,
    sc: &ScreenedCoulomb,
    n_particles: usize,
    x: &mut [f64],
) -> Result<()> {
    let cap = RELAX_CAP * sc.sigma;
    let r = (sc.box_edge / (n_particles as f64).cbrt()).min(sc.cutoff);
    let settled =
        sc.amplitude * (-sc.kappa * (r - sc.sigma)).exp() * (sc.kappa / r + 1.0 / (r * r));
    let mut f = vec![0.0; x.len()];
    for _ in 0..RELAX_SWEEPS {
        force.eval(x, &mut f)?;
        let fmax = f.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if fmax <= settled {
            break;
        }
        let scale = cap / fmax;
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += scale * fi;
        }
    }
    Ok(())
}

fn lattice_positions(n_particles: usize, dim: usize, box_edge: f64) -> Vec<f64> {
    // Even-parity sublattice of an m^dim grid: nearest occupied neighbors
    // sit sqrt(2) spacings apart, so a dense start never begins on the
    // repulsive wall. Smallest m whose sublattice holds all particles.
    let mut m = 1usize;
    while m.pow(dim as u32).div_ceil(2) < n_particles {
        m += 1;
    }
    let spacing = box_edge / m as f64;
    let sites: Vec<usize> = (0..m.pow(dim as u32))
        .filter(|&site| {
            let mut s = site;
            let mut parity = 0;
            for _ in 0..dim {
                parity += s % m;
                s /= m;
            }
            parity % 2 == 0
        })
        .collect();
    // Stride across the available sites so partial fills stay spread out.
    let mut x = Vec::with_capacity(n_particles * dim);
    for t in 0..n_particles {
        let mut s = sites[t * sites.len() / n_particles];
        for _ in 0..dim {
            x.push((s % m) as f64 * spacing + 0.5 * spacing);
            s /= m;
        }
    }
    x
}

/// A fully recorded trajectory at step resolution. Row i of `x` and `y` is
/// the state after i steps; row i of `dw` holds the increments that carried
/// the state from row i to row i + 1.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub n_components: usize,
    pub q0: usize,
    pub p0: usize,
    pub steps: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dw: Vec<f64>,
}

impl Trajectory {
    pub fn x_at(&self, step: usize) -> &[f64] {
        &self.x[step * self.n_components..(step + 1) * self.n_components]
    }

    pub fn y_at(&self, step: usize) -> &[f64] {
        let w = self.n_components * self.q0;
        &self.y[step * w..(step + 1) * w]
    }

    /// Increments dW_{step}, driving the transition step-1 -> step; valid
    /// for step >= 1.
    pub fn dw_into(&self, step: usize) -> &[f64] {
        let w = self.n_components * self.p0;
        &self.dw[(step - 1) * w..step * w]
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }
}

/// Burns in and records `steps` further steps at full resolution.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    cfg: &SimConfig,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let sim = Simulator::new(cfg)?;
    let mut st = sim.init_state(rng);
    sim.advance(&mut st, rng, sim.burn_in_steps())?;
    let n = sim.n_components();
    let (q0, p0) = (sim.q0(), sim.p0());
    let mut x = Vec::with_capacity((steps + 1) * n);
    let mut y = Vec::with_capacity((steps + 1) * n * q0);
    let mut dw_all = Vec::with_capacity(steps * n * p0);
    x.extend_from_slice(&st.x);
    y.extend_from_slice(&st.y);
    let mut dw = vec![0.0; n * p0];
    for _ in 0..steps {
        sim.step(&mut st, rng, &mut dw)?;
        x.extend_from_slice(&st.x);
        y.extend_from_slice(&st.y);
        dw_all.extend_from_slice(&dw);
    }
    Ok(Trajectory {
        dt: sim.dt(),
        n_components: n,
        q0,
        p0,
        steps,
        x,
        y,
        dw: dw_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_fills_box_without_duplicates() {
        let pos = lattice_positions(8, 3, 2.0);
        assert_eq!(pos.len(), 24);
        for p in &pos {
            assert!(*p > 0.0 && *p < 2.0);
        }
        // All 8 sites of the 2x2x2 lattice are distinct.
        let mut sites: Vec<(u64, u64, u64)> = (0..8)
            .map(|i| {
                (
                    pos[3 * i].to_bits(),
                    pos[3 * i + 1].to_bits(),
                    pos[3 * i + 2].to_bits(),
                )
            })
            .collect();
        sites.sort();
        sites.dedup();
        assert_eq!(sites.len(), 8);
    }

    #[test]
    fn lattice_handles_non_cube_counts() {
        let pos = lattice_positions(5, 3, 3.0);
        assert_eq!(pos.len(), 15);
    }
}
