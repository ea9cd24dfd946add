//! Exact sensitivity moments for a harmonically confined particle.
//!
//! The joint state z = (x, y) of position and noise components is linear,
//! so cross-moments of z with each sensitivity weight close on themselves:
//! every weight increment is an affine function of z times a noise
//! increment, giving
//!
//!     d/dt E[z p]       = M E[z p] + W g0,
//!     d/dt E[z z^T p]   = M E[zz^T p] + E[zz^T p] M^T + W G S + (W G S)^T,
//!
//! with M the joint drift, W the joint noise input, S the stationary
//! covariance of z, and g(z) = G z + g0 the weight integrand. Both start
//! from zero. Estimator values follow by pairing these moments with the
//! derivative rows r_m = (M^T)^m e_0, because the backward differences used
//! by the sampler converge to d^m x / dt^m in the estimator's mean.
//!
//! This gives sensitivity curves to ODE accuracy without any Monte Carlo,
//! usable as an independent reference for the sampling estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::malliavin::{
    weight_channels, Observable, Perturbation, SensitivityTarget, TermSelection, WeightChannel,
};
use crate::noise::{lyapunov_solve, stationary_covariance, SpectrumModel};
use crate::numeric::binomial;

/// One particle in one dimension with restoring force -stiffness * x.
pub struct HarmonicCase {
    pub stiffness: f64,
    pub model: SpectrumModel,
}

/// Mean position response to a constant unit force switched on at t = 0:
/// (1 - exp(-stiffness t / xi0)) / stiffness, for every noise spectrum.
pub fn response_closed_form(stiffness: f64, xi0: f64, t: f64) -> f64 {
    (1.0 - (-stiffness * t / xi0).exp()) / stiffness
}

struct Channel {
    j: usize,
    k: usize,
    /// W kappa: noise input paired with this weight's increments.
    wk: DVector<f64>,
}

/// Moment integrator for one harmonic case.
pub struct MomentOracle {
    m: DMatrix<f64>,
    s: DMatrix<f64>,
    /// r_m = (M^T)^m e_0 for m = 0..=n'.
    rows: Vec<DVector<f64>>,
    lift_scale: f64,
    channels: Vec<Channel>,
    n_prime: usize,
    h: f64,
}

/// Cross-moments of one weight with the state, advanced in time.
#[derive(Clone)]
struct ChannelMoments {
    m1: DVector<f64>,
    m2: DMatrix<f64>,
}

impl MomentOracle {
    pub fn new(case: &HarmonicCase) -> Result<Self> {
        if !(case.stiffness > 0.0) {
            return Err(Error::InvalidParameter(
                "harmonic moment calculus needs a positive stiffness".into(),
            ));
        }
        let real = case.model.realize(1)?;
        let block = &real.block;
        let q0 = block.state_dim();
        let p0 = block.noise_dim();
        let d = 1 + q0;
        let xi0 = case.model.xi0;
        let mut m = DMatrix::zeros(d, d);
        m[(0, 0)] = -case.stiffness / xi0;
        for s in 0..q0 {
            m[(0, 1 + s)] = block.c[s] / xi0;
            for t in 0..q0 {
                m[(1 + s, 1 + t)] = -block.a[(s, t)];
            }
        }
        let mut w_in = DMatrix::zeros(d, p0);
        for s in 0..q0 {
            for w in 0..p0 {
                w_in[(1 + s, w)] = block.b[(s, w)];
            }
        }
        let s = stationary_covariance(&(-&m), &w_in)?;
        let (lift_scale, raw) = weight_channels(block)?;
        let n_prime = raw.iter().map(|c| c.j).max().unwrap_or(0);
        let channels = raw
            .into_iter()
            .map(|WeightChannel { j, k, kappa }| Channel {
                j,
                k,
                wk: &w_in * DVector::from_vec(kappa),
            })
            .collect();
        let mut rows = Vec::with_capacity(n_prime + 1);
        let mut r = DVector::zeros(d);
        r[0] = 1.0;
        rows.push(r.clone());
        for _ in 0..n_prime {
            r = m.transpose() * &r;
            rows.push(r.clone());
        }
        let m_norm = m.abs().column_sum().max();
        let h = (0.1 / m_norm).min(1e-3);
        Ok(Self {
            m,
            s,
            rows,
            lift_scale,
            channels,
            n_prime,
            h,
        })
    }

    /// Stationary variance of the position.
    pub fn position_variance(&self) -> f64 {
        self.s[(0, 0)]
    }

    pub fn n_prime(&self) -> usize {
        self.n_prime
    }

    /// Constant part of the integrand for one channel: W kappa u0.
    fn drive_const(&self, ch: &Channel, pert: Perturbation) -> Option<DVector<f64>> {
        match pert {
            Perturbation::Constant if ch.j == ch.k => Some(&ch.wk * self.lift_scale),
            _ => None,
        }
    }

    /// S times the state-dependent integrand row for one channel.
    fn drive_row(&self, ch: &Channel, pert: Perturbation) -> Option<DVector<f64>> {
        match pert {
            Perturbation::Linear => {
                let um = &self.rows[ch.j - ch.k] * self.lift_scale;
                Some(&self.s * um)
            }
            Perturbation::Constant => None,
        }
    }

    fn rhs(
        &self,
        st: &[ChannelMoments],
        g0: &[Option<DVector<f64>>],
        sv: &[Option<DVector<f64>>],
        out: &mut Vec<ChannelMoments>,
    ) {
        out.clear();
        for (i, cm) in st.iter().enumerate() {
            let mut m1 = &self.m * &cm.m1;
            if let Some(g) = &g0[i] {
                m1 += g;
            }
            let mut m2 = &self.m * &cm.m2 + &cm.m2 * self.m.transpose();
            if let Some(v) = &sv[i] {
                let cross = &self.channels[i].wk * v.transpose();
                m2 += &cross + cross.transpose();
            }
            out.push(ChannelMoments { m1, m2 });
        }
    }

    /// Integrates the moment equations for one perturbation, returning the
    /// moments at each requested time (which must be nondecreasing).
    fn integrate(
        &self,
        pert: Perturbation,
        times: &[f64],
        rk_step: Option<f64>,
    ) -> Result<Vec<Vec<ChannelMoments>>> {
        let h = rk_step.unwrap_or(self.h);
        if !(h > 0.0) {
            return Err(Error::InvalidParameter("step size must be positive".into()));
        }
        let d = self.m.nrows();
        let g0: Vec<_> = self
            .channels
            .iter()
            .map(|ch| self.drive_const(ch, pert))
            .collect();
        let sv: Vec<_> = self
            .channels
            .iter()
            .map(|ch| self.drive_row(ch, pert))
            .collect();
        let mut st: Vec<ChannelMoments> = self
            .channels
            .iter()
            .map(|_| ChannelMoments {
                m1: DVector::zeros(d),
                m2: DMatrix::zeros(d, d),
            })
            .collect();
        let mut t = 0.0;
        let mut out = Vec::with_capacity(times.len());
        let (mut k1, mut k2, mut k3, mut k4) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut tmp: Vec<ChannelMoments> = Vec::new();
        let mut step = |st: &mut Vec<ChannelMoments>, h: f64| {
            let blend = |st: &[ChannelMoments], k: &[ChannelMoments], f: f64, out: &mut Vec<ChannelMoments>| {
                out.clear();
                for (s, ki) in st.iter().zip(k) {
                    out.push(ChannelMoments {
                        m1: &s.m1 + &ki.m1 * f,
                        m2: &s.m2 + &ki.m2 * f,
                    });
                }
            };
            self.rhs(st, &g0, &sv, &mut k1);
            blend(st, &k1, 0.5 * h, &mut tmp);
            self.rhs(&tmp, &g0, &sv, &mut k2);
            blend(st, &k2, 0.5 * h, &mut tmp);
            self.rhs(&tmp, &g0, &sv, &mut k3);
            blend(st, &k3, h, &mut tmp);
            self.rhs(&tmp, &g0, &sv, &mut k4);
            for (i, s) in st.iter_mut().enumerate() {
                s.m1 += (&k1[i].m1 + &k2[i].m1 * 2.0 + &k3[i].m1 * 2.0 + &k4[i].m1) * (h / 6.0);
                s.m2 += (&k1[i].m2 + &k2[i].m2 * 2.0 + &k3[i].m2 * 2.0 + &k4[i].m2) * (h / 6.0);
            }
        };
        for &tt in times {
            if tt < t - 1e-12 {
                return Err(Error::InvalidParameter(
                    "oracle times must be nondecreasing".into(),
                ));
            }
            while t + h <= tt + 1e-12 {
                step(&mut st, h);
                t += h;
            }
            if tt - t > 1e-12 {
                step(&mut st, tt - t);
                t = tt;
            }
            out.push(st.clone());
        }
        Ok(out)
    }

    fn value_from(&self, cm: &ChannelMoments, obs: Observable, k: usize) -> f64 {
        match obs {
            Observable::Position => self.rows[k].dot(&cm.m1),
            Observable::PositionSquared => (0..=k)
                .map(|a| {
                    binomial(k, a) * (self.rows[a].transpose() * &cm.m2 * &self.rows[k - a])[(0, 0)]
                })
                .sum(),
        }
    }

    fn combine(&self, moments: &[ChannelMoments], target: &SensitivityTarget) -> f64 {
        let mut acc = 0.0;
        for (ch, cm) in self.channels.iter().zip(moments) {
            let selected = match target.term {
                TermSelection::Total => true,
                TermSelection::Term { j, k } => ch.j == j && ch.k == k,
            };
            if selected {
                acc += binomial(ch.j, ch.k) * self.value_from(cm, target.observable, ch.k);
            }
        }
        acc
    }

    fn check_target(&self, target: &SensitivityTarget) -> Result<()> {
        if let TermSelection::Term { j, k } = target.term {
            if !self.channels.iter().any(|c| c.j == j && c.k == k) {
                return Err(Error::InvalidParameter(format!(
                    "weight p_{{{j},{k}}} does not exist for this noise \
                     realization (orders up to {})",
                    self.n_prime
                )));
            }
        }
        Ok(())
    }

    /// Sensitivity curves on `times` for each target, exact to ODE accuracy.
    pub fn series(
        &self,
        targets: &[SensitivityTarget],
        times: &[f64],
        rk_step: Option<f64>,
    ) -> Result<Vec<Vec<f64>>> {
        for t in targets {
            self.check_target(t)?;
        }
        let mut out = vec![Vec::with_capacity(times.len()); targets.len()];
        for pert in [Perturbation::Constant, Perturbation::Linear] {
            if !targets.iter().any(|t| t.perturbation == pert) {
                continue;
            }
            let snaps = self.integrate(pert, times, rk_step)?;
            for (ti, target) in targets.iter().enumerate() {
                if target.perturbation != pert {
                    continue;
                }
                out[ti] = snaps.iter().map(|s| self.combine(s, target)).collect();
            }
        }
        Ok(out)
    }

    /// Long-time limit of a sensitivity, from the stationary moment balance:
    /// M m + W g0 = 0 and the Lyapunov equation for the second moments.
    pub fn longtime(&self, target: &SensitivityTarget) -> Result<f64> {
        self.check_target(target)?;
        let d = self.m.nrows();
        let lu = self.m.clone().lu();
        let mut moments = Vec::with_capacity(self.channels.len());
        for ch in &self.channels {
            let m1 = match self.drive_const(ch, target.perturbation) {
                Some(g0) => lu
                    .solve(&(-&g0))
                    .ok_or_else(|| Error::Unstable("joint drift is singular".into()))?,
                None => DVector::zeros(d),
            };
            let m2 = match self.drive_row(ch, target.perturbation) {
                Some(v) => {
                    let cross = &ch.wk * v.transpose();
                    lyapunov_solve(&(-&self.m), &(&cross + cross.transpose()))?
                }
                None => DMatrix::zeros(d, d),
            };
            moments.push(ChannelMoments { m1, m2 });
        }
        Ok(self.combine(&moments, target))
    }
}
