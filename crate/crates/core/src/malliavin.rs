//! Stochastic sensitivity weights.
//!
//! For a perturbed drift F + lambda Fhat the derivative of an ensemble
//! average at lambda = 0 is sampled from unperturbed trajectories as
//!
//!     d<Phi>/d lambda = sum_k (D_k Phi_i / dt^k) sum_{j>=k} binom(j,k) p_{j,k,i},
//!
//! where D_k is the k-th backward difference and the weights p_{j,k} are Ito
//! sums driven by the same increments as the trajectory. How the weights are
//! built depends on the realized noise block:
//!
//! * full-rank noise (B B^T invertible): the perturbation is lifted into the
//!   noise state through a right inverse of C, giving the three weights
//!   p_00, p_10, p_11;
//! * chain of order r (single channel driving the last slot): lifting climbs
//!   the chain, giving weights p_{j,k} for 0 <= k <= j <= r with channel
//!   coefficients binom(r,j) / ell^j.
//!
//! Every weight has zero mean, since each increment multiplies a factor
//! measurable before the increment (backward differences are anchored at the
//! current step, whose position does not depend on the current increment).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{SimConfig, Simulator};
use crate::error::{Error, Result};
use crate::noise::{ComponentRealization, RealizationForm};
use crate::numeric::binomial;
use crate::stats::EstimateSeries;

pub use crate::dynamics::Perturbation;

/// Scalar observable evaluated per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observable {
    Position,
    PositionSquared,
}

impl Observable {
    #[inline]
    pub fn eval(&self, x_c: f64) -> f64 {
        match self {
            Observable::Position => x_c,
            Observable::PositionSquared => x_c * x_c,
        }
    }
}

/// Which part of the estimator to report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermSelection {
    /// The full sensitivity sample.
    Total,
    /// The single contribution (D_k Phi / dt^k) binom(j,k) p_{j,k}.
    Term { j: usize, k: usize },
}

/// One requested estimate: a perturbation, an observable, and a term choice.
#[derive(Clone, Copy, Debug)]
pub struct SensitivityTarget {
    pub perturbation: Perturbation,
    pub observable: Observable,
    pub term: TermSelection,
}

enum Route {
    FullRank {
        /// Row 0 of A^T (B B^T)^{-1} B: pairs Fhat with the increments.
        k00: Vec<f64>,
        /// Row 0 of (B B^T)^{-1} B: pairs Fhat and its advection with the
        /// increments at derivative order one.
        k1: Vec<f64>,
        /// 1 / C_0: right-inverse scale placing Fhat in the output slot.
        e_scale: f64,
    },
    Chain {
        order: usize,
        /// binom(r, j) / ell^j for j = 0..=r.
        coeffs: Vec<f64>,
        /// 1 / C_0: the chain output scale.
        inv_sigma: f64,
    },
}

/// Weight constructor for one realized noise block at a fixed time step.
pub struct PerturbationLift {
    route: Route,
    p0: usize,
    dt: f64,
    /// dt^{-m} for m = 0..=n'.
    inv_dt_pow: Vec<f64>,
    /// All weight index pairs (j, k), k <= j <= n'.
    ids: Vec<(usize, usize)>,
}

impl PerturbationLift {
    /// Picks the weight construction matching the block's form.
    pub fn new(block: &ComponentRealization, dt: f64) -> Result<Self> {
        match block.form {
            RealizationForm::FullRankNoise => Self::full_rank(block, dt),
            RealizationForm::Chain { order, ell } => Self::chain(block, dt, order, ell),
        }
    }

    /// Full-rank construction; errors if B B^T is singular.
    pub fn full_rank(block: &ComponentRealization, dt: f64) -> Result<Self> {
        let (k00, k1) = full_rank_rows(block)?;
        let e_scale = right_inverse_scale(block)?;
        Ok(Self {
            route: Route::FullRank { k00, k1, e_scale },
            p0: block.noise_dim(),
            dt,
            inv_dt_pow: inv_dt_powers(dt, 1),
            ids: weight_ids(1),
        })
    }

    fn chain(block: &ComponentRealization, dt: f64, order: usize, ell: f64) -> Result<Self> {
        let inv_sigma = right_inverse_scale(block)?;
        let coeffs = (0..=order)
            .map(|j| binomial(order, j) / ell.powi(j as i32))
            .collect();
        Ok(Self {
            route: Route::Chain {
                order,
                coeffs,
                inv_sigma,
            },
            p0: block.noise_dim(),
            dt,
            inv_dt_pow: inv_dt_powers(dt, order),
            ids: weight_ids(order),
        })
    }

    /// Highest observable-derivative order n' in the estimator.
    pub fn n_prime(&self) -> usize {
        match &self.route {
            Route::FullRank { .. } => 1,
            Route::Chain { order, .. } => *order,
        }
    }

    pub fn weight_ids(&self) -> &[(usize, usize)] {
        &self.ids
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn id_index(&self, j: usize, k: usize) -> Option<usize> {
        self.ids.iter().position(|&(jj, kk)| jj == j && kk == k)
    }

    pub fn new_state(&self, n_components: usize) -> WeightState {
        let hist_width = self.n_prime() + 1;
        WeightState {
            n_components,
            n_weights: self.ids.len(),
            p: vec![0.0; n_components * self.ids.len()],
            hist: vec![0.0; n_components * hist_width],
            hist_width,
            pushed: 0,
        }
    }

    /// Advances the weights across one step x_prev -> x_curr driven by `dw`
    /// (layout: component-major, p0 channels each).
    pub fn update(
        &self,
        st: &mut WeightState,
        pert: Perturbation,
        x_prev: &[f64],
        x_curr: &[f64],
        dw: &[f64],
    ) {
        debug_assert_eq!(dw.len(), st.n_components * self.p0);
        match &self.route {
            Route::FullRank { k00, k1, e_scale } => {
                let inv_dt = self.inv_dt_pow[1];
                for c in 0..st.n_components {
                    let wo = c * self.p0;
                    let mut s00 = 0.0;
                    let mut s1 = 0.0;
                    for w in 0..self.p0 {
                        s00 += k00[w] * dw[wo + w];
                        s1 += k1[w] * dw[wo + w];
                    }
                    let fhat = e_scale * pert.eval(x_prev, c);
                    let gdot = e_scale * pert.grad_dot((x_curr[c] - x_prev[c]) * inv_dt);
                    let po = c * st.n_weights;
                    // ids are ordered (0,0), (1,0), (1,1).
                    st.p[po] += fhat * s00;
                    st.p[po + 1] += gdot * s1;
                    st.p[po + 2] += fhat * s1;
                }
                st.pushed += 1;
            }
            Route::Chain {
                order,
                coeffs,
                inv_sigma,
            } => {
                // Push the lifted perturbation at the current position; the
                // backward differences are anchored here, and x_curr is
                // independent of dw, keeping every weight mean-free.
                let width = st.hist_width;
                if st.pushed == 0 {
                    // Seed with the pre-step value so the order-m difference
                    // is defined from step m onward.
                    for c in 0..st.n_components {
                        st.hist[c * width] = inv_sigma * pert.eval(x_prev, c);
                    }
                    st.pushed = 1;
                }
                let slot = st.pushed % width;
                for c in 0..st.n_components {
                    st.hist[c * width + slot] = inv_sigma * pert.eval(x_curr, c);
                }
                st.pushed += 1;
                let avail = st.pushed - 1; // m-th difference needs m history points
                for c in 0..st.n_components {
                    let dw_c = dw[c * self.p0];
                    let po = c * st.n_weights;
                    for (idx, &(j, k)) in self.ids.iter().enumerate() {
                        let m = j - k;
                        if m > avail || m > *order {
                            continue;
                        }
                        let mut diff = 0.0;
                        for a in 0..=m {
                            let sign = if a % 2 == 0 { 1.0 } else { -1.0 };
                            let v = st.hist
                                [c * width + (st.pushed - 1 - a) % width];
                            diff += sign * binomial(m, a) * v;
                        }
                        st.p[po + idx] += diff * self.inv_dt_pow[m] * coeffs[j] * dw_c;
                    }
                }
            }
        }
    }

    /// Weight value p_{j,k} for one component.
    pub fn weight(&self, st: &WeightState, c: usize, j: usize, k: usize) -> Option<f64> {
        self.id_index(j, k).map(|i| st.p[c * st.n_weights + i])
    }

    /// Effective derivative-order weights w_k = sum_{j>=k} binom(j,k) p_{j,k},
    /// written into `out[0..=n']`.
    pub fn combined(&self, st: &WeightState, c: usize, out: &mut [f64]) {
        let np = self.n_prime();
        debug_assert!(out.len() >= np + 1);
        out[..np + 1].fill(0.0);
        let po = c * st.n_weights;
        for (idx, &(j, k)) in self.ids.iter().enumerate() {
            out[k] += binomial(j, k) * st.p[po + idx];
        }
    }

    /// Sensitivity sample for one component from the current weights and
    /// observable history; differences not yet defined contribute zero.
    pub fn sample(
        &self,
        st: &WeightState,
        ring: &ObservableRing,
        c: usize,
        term: TermSelection,
    ) -> f64 {
        match term {
            TermSelection::Total => {
                let np = self.n_prime();
                let mut acc = 0.0;
                let po = c * st.n_weights;
                for k in 0..=np {
                    let Some(dk) = ring.diff(c, k) else { continue };
                    let mut wk = 0.0;
                    for (idx, &(j, kk)) in self.ids.iter().enumerate() {
                        if kk == k {
                            wk += binomial(j, k) * st.p[po + idx];
                        }
                    }
                    acc += dk * self.inv_dt_pow[k] * wk;
                }
                acc
            }
            TermSelection::Term { j, k } => {
                let Some(idx) = self.id_index(j, k) else {
                    return 0.0;
                };
                let Some(dk) = ring.diff(c, k) else { return 0.0 };
                dk * self.inv_dt_pow[k] * binomial(j, k) * st.p[c * st.n_weights + idx]
            }
        }
    }

    /// Validates that a term selection exists for this construction.
    pub fn check_term(&self, term: TermSelection) -> Result<()> {
        match term {
            TermSelection::Total => Ok(()),
            TermSelection::Term { j, k } => {
                if self.id_index(j, k).is_some() {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "weight p_{{{j},{k}}} does not exist for this noise \
                         realization (orders up to {})",
                        self.n_prime()
                    )))
                }
            }
        }
    }
}

/// Ring buffer of observable values per component, for backward differences
/// up to order n'.
pub struct ObservableRing {
    width: usize,
    n_components: usize,
    vals: Vec<f64>,
    pushed: usize,
}

impl ObservableRing {
    pub fn new(n_components: usize, n_prime: usize) -> Self {
        Self {
            width: n_prime + 1,
            n_components,
            vals: vec![0.0; n_components * (n_prime + 1)],
            pushed: 0,
        }
    }

    pub fn push(&mut self, x: &[f64], obs: Observable) {
        let slot = self.pushed % self.width;
        for c in 0..self.n_components {
            self.vals[c * self.width + slot] = obs.eval(x[c]);
        }
        self.pushed += 1;
    }

    /// Backward difference D_k anchored at the latest pushed value; None
    /// until k + 1 values exist.
    pub fn diff(&self, c: usize, k: usize) -> Option<f64> {
        if k >= self.width || self.pushed < k + 1 {
            return None;
        }
        let mut acc = 0.0;
        for a in 0..=k {
            let sign = if a % 2 == 0 { 1.0 } else { -1.0 };
            let v = self.vals[c * self.width + (self.pushed - 1 - a) % self.width];
            acc += sign * binomial(k, a) * v;
        }
        Some(acc)
    }
}

/// Mutable weight storage for one trajectory.
pub struct WeightState {
    n_components: usize,
    n_weights: usize,
    p: Vec<f64>,
    hist: Vec<f64>,
    hist_width: usize,
    pushed: usize,
}

fn weight_ids(n_prime: usize) -> Vec<(usize, usize)> {
    let mut ids = Vec::new();
    for j in 0..=n_prime {
        for k in 0..=j {
            ids.push((j, k));
        }
    }
    ids
}

fn inv_dt_powers(dt: f64, n_prime: usize) -> Vec<f64> {
    (0..=n_prime).map(|m| dt.powi(-(m as i32))).collect()
}

fn right_inverse_scale(block: &ComponentRealization) -> Result<f64> {
    let c0 = block.c[0];
    if c0.abs() < 1e-300 {
        return Err(Error::Realization(
            "output row starts with a zero entry; the canonical right \
             inverse is undefined"
                .into(),
        ));
    }
    Ok(1.0 / c0)
}

fn full_rank_rows(block: &ComponentRealization) -> Result<(Vec<f64>, Vec<f64>)> {
    let bbt = &block.b * block.b.transpose();
    let inv = bbt.lu().try_inverse().ok_or_else(|| {
        Error::Realization(
            "noise covariance B B^T is singular; the full-rank weight \
             construction does not apply"
                .into(),
        )
    })?;
    let k1_full = &inv * &block.b;
    let k00_full = block.a.transpose() * &k1_full;
    let p0 = block.noise_dim();
    let k00 = (0..p0).map(|w| k00_full[(0, w)]).collect();
    let k1 = (0..p0).map(|w| k1_full[(0, w)]).collect();
    Ok((k00, k1))
}

/// Continuum description of one weight: its increment pairs the (j - k)-th
/// time derivative of the lifted perturbation u(t) = Fhat(x(t)) / C_0 with
/// the noise increments through the channel vector,
///
///     dp_{j,k} = (d^{j-k} u / dt^{j-k}) kappa . dW.
pub struct WeightChannel {
    pub j: usize,
    pub k: usize,
    pub kappa: Vec<f64>,
}

/// The channel vectors of every weight the block's construction produces,
/// together with the lift scale 1 / C_0. Exact moment calculations build
/// their integrands from these.
pub fn weight_channels(block: &ComponentRealization) -> Result<(f64, Vec<WeightChannel>)> {
    let scale = right_inverse_scale(block)?;
    let channels = match block.form {
        RealizationForm::FullRankNoise => {
            let (k00, k1) = full_rank_rows(block)?;
            vec![
                WeightChannel { j: 0, k: 0, kappa: k00 },
                WeightChannel { j: 1, k: 0, kappa: k1.clone() },
                WeightChannel { j: 1, k: 1, kappa: k1 },
            ]
        }
        RealizationForm::Chain { order, ell } => weight_ids(order)
            .into_iter()
            .map(|(j, k)| WeightChannel {
                j,
                k,
                kappa: vec![binomial(order, j) / ell.powi(j as i32)],
            })
            .collect(),
    };
    Ok((scale, channels))
}

/// Weights recorded along a full trajectory, for validation work.
pub struct WeightSeries {
    pub ids: Vec<(usize, usize)>,
    pub n_components: usize,
    /// Row per step (0..=steps), each row n_components * ids.len() values.
    pub data: Vec<f64>,
}

impl WeightSeries {
    pub fn get(&self, step: usize, c: usize, j: usize, k: usize) -> Option<f64> {
        let idx = self.ids.iter().position(|&(jj, kk)| jj == j && kk == k)?;
        let w = self.n_components * self.ids.len();
        Some(self.data[step * w + c * self.ids.len() + idx])
    }
}

/// Replays a recorded trajectory through the weight recursion.
pub fn weights_along(
    sim: &Simulator,
    traj: &crate::dynamics::Trajectory,
    pert: Perturbation,
) -> Result<WeightSeries> {
    let lift = PerturbationLift::new(&sim.realization().block, traj.dt)?;
    let n = traj.n_components;
    let mut st = lift.new_state(n);
    let row = n * lift.weight_ids().len();
    let mut data = vec![0.0; (traj.steps + 1) * row];
    for step in 1..=traj.steps {
        lift.update(
            &mut st,
            pert,
            traj.x_at(step - 1),
            traj.x_at(step),
            traj.dw_into(step),
        );
        data[step * row..(step + 1) * row].copy_from_slice(&st.p);
    }
    Ok(WeightSeries {
        ids: lift.weight_ids().to_vec(),
        n_components: n,
        data,
    })
}

/// Sensitivity samples along a recorded trajectory, component-averaged, one
/// value per step.
pub fn samples_along(
    sim: &Simulator,
    traj: &crate::dynamics::Trajectory,
    target: &SensitivityTarget,
) -> Result<Vec<f64>> {
    let lift = PerturbationLift::new(&sim.realization().block, traj.dt)?;
    lift.check_term(target.term)?;
    let n = traj.n_components;
    let mut st = lift.new_state(n);
    let mut ring = ObservableRing::new(n, lift.n_prime());
    ring.push(traj.x_at(0), target.observable);
    let mut out = Vec::with_capacity(traj.steps + 1);
    let average = |lift: &PerturbationLift, st: &WeightState, ring: &ObservableRing| {
        let mut acc = 0.0;
        for c in 0..n {
            acc += lift.sample(st, ring, c, target.term);
        }
        acc / n as f64
    };
    out.push(average(&lift, &st, &ring));
    for step in 1..=traj.steps {
        lift.update(
            &mut st,
            target.perturbation,
            traj.x_at(step - 1),
            traj.x_at(step),
            traj.dw_into(step),
        );
        ring.push(traj.x_at(step), target.observable);
        out.push(average(&lift, &st, &ring));
    }
    Ok(out)
}

/// Record grid: samples at steps 0, every, 2 every, ..., count * every.
#[derive(Clone, Copy, Debug)]
pub struct RecordGrid {
    pub every: usize,
    pub count: usize,
}

impl RecordGrid {
    /// Covers [0, t_max] with spacing close to `spacing`, snapped to steps.
    pub fn covering(dt: f64, t_max: f64, spacing: f64) -> Result<Self> {
        if !(t_max > 0.0) || !(spacing > 0.0) {
            return Err(Error::InvalidParameter(
                "record grid needs positive horizon and spacing".into(),
            ));
        }
        let every = (spacing / dt).round().max(1.0) as usize;
        let count = (t_max / (every as f64 * dt)).round().max(1.0) as usize;
        Ok(Self { every, count })
    }

    pub fn times(&self, dt: f64) -> Vec<f64> {
        (0..=self.count)
            .map(|i| (i * self.every) as f64 * dt)
            .collect()
    }

    pub fn total_steps(&self) -> usize {
        self.every * self.count
    }
}

/// Trajectories per parallel unit; results are merged in fixed chunk order
/// so estimates do not depend on the worker count.
const ENSEMBLE_CHUNK: u64 = 64;

/// Runs one closure per trajectory index in parallel and feeds the results
/// to `absorb` in index order, independent of the worker count.
pub(crate) fn run_trajectories<T: Send>(
    n_traj: u64,
    run_one: impl Fn(u64) -> Result<T> + Sync,
    mut absorb: impl FnMut(T),
) -> Result<()> {
    let mut start = 0u64;
    while start < n_traj {
        let end = (start + ENSEMBLE_CHUNK).min(n_traj);
        let chunk: Vec<T> = (start..end)
            .into_par_iter()
            .map(&run_one)
            .collect::<Result<_>>()?;
        for item in chunk {
            absorb(item);
        }
        start = end;
    }
    Ok(())
}

/// Monte Carlo sensitivity estimation over an ensemble of trajectories.
///
/// Every trajectory draws from its own counter-based RNG stream indexed by
/// the trajectory number, so results are reproducible for a given seed
/// independently of threading.
pub fn sensitivity_ensemble(
    cfg: &SimConfig,
    targets: &[SensitivityTarget],
    grid: &RecordGrid,
    n_traj: u64,
    seed: u64,
) -> Result<Vec<EstimateSeries>> {
    if targets.is_empty() {
        return Err(Error::InvalidParameter("no sensitivity targets given".into()));
    }
    if n_traj == 0 {
        return Err(Error::InvalidParameter("need at least one trajectory".into()));
    }
    let sim = Simulator::new(cfg)?;
    let lift = PerturbationLift::new(&sim.realization().block, sim.dt())?;
    for t in targets {
        lift.check_term(t.term)?;
    }
    // Deduplicated weight propagations and observable rings.
    let mut perts: Vec<Perturbation> = Vec::new();
    let mut obs: Vec<Observable> = Vec::new();
    let target_slots: Vec<(usize, usize)> = targets
        .iter()
        .map(|t| {
            let pi = perts
                .iter()
                .position(|p| *p == t.perturbation)
                .unwrap_or_else(|| {
                    perts.push(t.perturbation);
                    perts.len() - 1
                });
            let oi = obs
                .iter()
                .position(|o| *o == t.observable)
                .unwrap_or_else(|| {
                    obs.push(t.observable);
                    obs.len() - 1
                });
            (pi, oi)
        })
        .collect();

    let times = grid.times(sim.dt());
    let mut series: Vec<EstimateSeries> = targets
        .iter()
        .map(|_| EstimateSeries::new(times.clone()))
        .collect();

    let run_one = |tid: u64| -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tid);
        let mut st = sim.init_state(&mut rng);
        sim.advance(&mut st, &mut rng, sim.burn_in_steps())?;
        let n = sim.n_components();
        let mut wstates: Vec<WeightState> =
            perts.iter().map(|_| lift.new_state(n)).collect();
        let mut rings: Vec<ObservableRing> = obs
            .iter()
            .map(|_| ObservableRing::new(n, lift.n_prime()))
            .collect();
        for (ring, o) in rings.iter_mut().zip(&obs) {
            ring.push(&st.x, *o);
        }
        let mut rows: Vec<Vec<f64>> = targets
            .iter()
            .map(|_| Vec::with_capacity(grid.count + 1))
            .collect();
        let record =
            |rows: &mut Vec<Vec<f64>>, wstates: &[WeightState], rings: &[ObservableRing]| {
                for (ti, t) in targets.iter().enumerate() {
                    let (pi, oi) = target_slots[ti];
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += lift.sample(&wstates[pi], &rings[oi], c, t.term);
                    }
                    rows[ti].push(acc / n as f64);
                }
            };
        record(&mut rows, &wstates, &rings);
        let mut dw = vec![0.0; sim.noise_dim()];
        let mut x_prev = st.x.clone();
        for step in 1..=grid.total_steps() {
            x_prev.copy_from_slice(&st.x);
            sim.step(&mut st, &mut rng, &mut dw)?;
            for (ws, p) in wstates.iter_mut().zip(&perts) {
                lift.update(ws, *p, &x_prev, &st.x, &dw);
            }
            for (ring, o) in rings.iter_mut().zip(&obs) {
                ring.push(&st.x, *o);
            }
            if step % grid.every == 0 {
                record(&mut rows, &wstates, &rings);
            }
        }
        Ok(rows)
    };

    run_trajectories(n_traj, run_one, |rows| {
        for (ti, row) in rows.iter().enumerate() {
            series[ti].push_row(row);
        }
    })?;
    Ok(series)
}
