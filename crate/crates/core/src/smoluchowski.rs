//! Thermo-quantum Smoluchowski equation
//!
//! ```text
//! d rho/dt = d/dx [ rho d/dx (U + Q) / b + D d rho/dx ]
//! ```
//!
//! discretized by finite volumes. The face flux is of Scharfetter-Gummel type
//! for `T > 0`: with `Phi = U + Q` and `Delta = (Phi_b - Phi_a) / kB T`,
//!
//! ```text
//! J = (D / dx) [ B(Delta) rho_a - B(-Delta) rho_b ],   B(x) = x / (e^x - 1)
//! ```
//!
//! which is the exact flux of a linear potential across the face, so the
//! sampled Boltzmann density of `Phi` has zero flux. At `T = 0` the flux is
//! the upwinded advective one with a smooth (van Albada) limited slope.
//!
//! Two integrators are available. [`Scheme::Explicit`] is forward Euler under
//! the stability bound of [`stability_limit`]. The quantum term acts like a
//! fourth-order operator with coefficient `hbar^2 / 4 m b`, which makes that
//! bound scale as `dx^4`; [`Scheme::Rosenbrock`] is a linearly implicit
//! two-stage W-method (ROS2) on a banded finite-difference Jacobian with
//! embedded error control. Explicit steps conserve mass to rounding.
//!
//! Because `Q` depends on relative variations of `rho`, the far tails carry
//! no usable information once they drop below what the step control
//! resolves. The Rosenbrock scheme therefore evolves only nodes above
//! `1e-8` of the peak and sets the rest to the log-quadratic continuation of
//! the resolved profile after every step. The small flux leaving the resolved
//! region is restored by renormalization.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::fields::{
    fill_log_ghosts, live_mask, log_density_masked, quantum_potential_from_log, weighted_sum, Boundary, DensityField,
    Grid1D, Mode, ScalarField, DENSITY_FLOOR,
};
use crate::linalg::BandedMatrix;
use crate::params::PhysicalParams;

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub rho: DensityField,
    pub potential: ScalarField,
    pub t: f64,
    pub params: PhysicalParams,
    pub mode: Mode,
    /// Number of node values clamped from negative to zero so far.
    pub clamp_count: u64,
}

impl SimState {
    /// Normalizes `rho` and checks that the grids agree.
    pub fn new(rho: DensityField, potential: ScalarField, params: PhysicalParams, mode: Mode) -> Result<Self> {
        if rho.grid() != potential.grid() {
            return Err(Error::Configuration("density and potential grids differ".into()));
        }
        params.validate()?;
        Ok(Self { rho: crate::fields::normalize(&rho)?, potential, t: 0.0, params, mode, clamp_count: 0 })
    }

    /// Free particle (`U = 0`).
    pub fn free(rho: DensityField, params: PhysicalParams, mode: Mode) -> Result<Self> {
        let u = ScalarField::constant(*rho.grid(), 0.0);
        Self::new(rho, u, params, mode)
    }

    pub fn grid(&self) -> &Grid1D {
        self.rho.grid()
    }

    pub fn variance(&self) -> f64 {
        self.rho.variance()
    }

    pub fn mass(&self) -> f64 {
        self.rho.mass()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Explicit,
    Rosenbrock,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    /// Fixed step (explicit) or initial step (Rosenbrock).
    pub dt: f64,
    /// Fraction of the explicit stability bound that may be used.
    pub safety: f64,
    /// Time between recorded snapshots.
    pub output_interval: f64,
    pub scheme: Scheme,
    /// Local error tolerance of the Rosenbrock scheme, relative to the peak.
    pub tolerance: f64,
    pub max_steps: usize,
}

impl StepControl {
    pub fn explicit(dt: f64) -> Self {
        Self {
            dt,
            safety: 0.9,
            output_interval: f64::INFINITY,
            scheme: Scheme::Explicit,
            tolerance: 1e-4,
            max_steps: 10_000_000,
        }
    }

    pub fn rosenbrock(initial_dt: f64, tolerance: f64) -> Self {
        Self { scheme: Scheme::Rosenbrock, tolerance, ..Self::explicit(initial_dt) }
    }

    pub fn with_output_interval(self, output_interval: f64) -> Self {
        Self { output_interval, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Configuration(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::Configuration(format!("safety must lie in (0, 1], got {}", self.safety)));
        }
        if !(self.output_interval > 0.0) {
            return Err(Error::Configuration("output interval must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Configuration("tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub rho: DensityField,
    pub variance: f64,
    pub mass: f64,
    pub clamp_count: u64,
}

impl Snapshot {
    fn of(state: &SimState) -> Self {
        Self {
            t: state.t,
            rho: state.rho.clone(),
            variance: state.variance(),
            mass: state.mass(),
            clamp_count: state.clamp_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub final_state: SimState,
    pub steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    /// Density snapshots, columns `t,x,rho`.
    pub fn write_snapshots_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_snapshots_csv(&self.snapshots, w)
    }

    /// Columns `t,variance,mass,clamp_count`.
    pub fn write_series_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_series_csv(&self.snapshots, w)
    }
}

pub fn write_snapshots_csv<W: Write>(snapshots: &[Snapshot], mut w: W) -> io::Result<()> {
    writeln!(w, "t,x,rho")?;
    for s in snapshots {
        let g = s.rho.grid();
        for (i, r) in s.rho.values().iter().enumerate() {
            writeln!(w, "{:e},{:e},{:e}", s.t, g.x(i), r)?;
        }
    }
    Ok(())
}

pub fn write_series_csv<W: Write>(snapshots: &[Snapshot], mut w: W) -> io::Result<()> {
    writeln!(w, "t,variance,mass,clamp_count")?;
    for s in snapshots {
        writeln!(w, "{:e},{:e},{:e},{}", s.t, s.variance, s.mass, s.clamp_count)?;
    }
    Ok(())
}

/// `x / (e^x - 1)`, stable for all finite `x`.
pub(crate) fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 - 0.5 * x + x * x / 12.0
    } else if x > 0.0 {
        x * (-x).exp() / -(-x).exp_m1()
    } else {
        x / x.exp_m1()
    }
}

/// Relative density below which the Rosenbrock scheme stops evolving a node
/// and instead slaves it to the continued log-density of its resolved
/// neighbours.
const RESOLVED: f64 = 1e-8;

/// Absolute part of the Rosenbrock error norm, relative to the peak density.
const ERROR_FLOOR: f64 = 1e-6;

/// Discrete right-hand side shared by both integrators.
struct Operator<'a> {
    grid: Grid1D,
    potential: &'a [f64],
    diffusion: f64,
    kt: f64,
    friction: f64,
    /// `hbar^2 / 2m`, zero when the quantum term is off
    qcoef: f64,
    /// Nodes whose `ln rho` is sampled, fixed for the lifetime of the operator
    /// so that every evaluation within a step sees the same smooth map.
    live: Vec<bool>,
    /// Whether unresolved nodes carry `exp` of the continued log-density
    /// instead of their own value, and are not evolved.
    slaved: bool,
    weights: Vec<f64>,
}

impl<'a> Operator<'a> {
    fn new(state: &'a SimState) -> Result<Self> {
        Self::with_resolution(state, DENSITY_FLOOR, false)
    }

    fn with_resolution(state: &'a SimState, resolution: f64, slaved: bool) -> Result<Self> {
        let p = &state.params;
        let grid = *state.grid();
        let thermal = state.mode.has_thermal() && p.thermal_energy() > 0.0;
        let kt = if thermal { p.thermal_energy() } else { 0.0 };
        let qcoef = if state.mode.has_quantum() { p.hbar * p.hbar / (2.0 * p.mass) } else { 0.0 };
        let weights = (0..grid.n).map(|i| grid.weight(i)).collect();
        let live = live_mask(state.rho.values(), resolution)?;
        let slaved = slaved && qcoef > 0.0;
        Ok(Self {
            grid,
            potential: state.potential.values(),
            diffusion: kt / p.friction,
            kt,
            friction: p.friction,
            qcoef,
            live,
            slaved,
            weights,
        })
    }

    fn n_faces(&self) -> usize {
        self.grid.n + 1
    }

    /// Nodes on either side of face `k` (face `k` sits left of node `k`).
    fn face_nodes(&self, k: usize) -> Option<(usize, usize)> {
        let n = self.grid.n;
        match self.grid.boundary {
            Boundary::Periodic => Some(((k + n - 1) % n, k % n)),
            _ if k == 0 || k == n => None,
            _ => Some((k - 1, k)),
        }
    }

    fn total_potential(&self, rho: &[f64], phi: &mut [f64]) -> Result<()> {
        if self.qcoef > 0.0 {
            let l = log_density_masked(rho, &self.grid, &self.live);
            self.potential_from_log(&l, phi);
        } else {
            phi.copy_from_slice(self.potential);
        }
        Ok(())
    }

    fn potential_from_log(&self, l: &[f64], phi: &mut [f64]) {
        quantum_potential_from_log(l, self.grid.dx, self.qcoef, phi);
        phi.iter_mut().zip(self.potential).for_each(|(p, u)| *p += u);
    }

    /// Face fluxes into `work.faces`. With `frozen`, unresolved log-densities
    /// are taken from it rather than continued from `rho`, so that each node
    /// only influences its own stencil.
    fn fluxes(&self, rho: &[f64], frozen: Option<&[f64]>, work: &mut Work) {
        let Work { phi, faces, l, eff } = work;
        if self.qcoef == 0.0 {
            phi.copy_from_slice(self.potential);
            self.faces(rho, phi, faces);
            return;
        }
        match frozen {
            Some(base) => {
                l.copy_from_slice(base);
                for (i, r) in rho.iter().enumerate() {
                    if self.live[i] {
                        l[i + 1] = r.max(f64::MIN_POSITIVE).ln();
                    }
                }
                fill_log_ghosts(l, self.grid.boundary);
            }
            None => *l = log_density_masked(rho, &self.grid, &self.live),
        }
        self.potential_from_log(l, phi);
        if self.slaved {
            for i in 0..rho.len() {
                eff[i] = if self.live[i] { rho[i] } else { l[i + 1].exp() };
            }
            self.faces(eff, phi, faces);
        } else {
            self.faces(rho, phi, faces);
        }
    }

    /// Replaces unresolved values by the continuation of the resolved ones.
    fn slave(&self, rho: &mut [f64]) {
        if self.slaved {
            let l = log_density_masked(rho, &self.grid, &self.live);
            for (i, r) in rho.iter_mut().enumerate() {
                if !self.live[i] {
                    *r = l[i + 1].exp();
                }
            }
        }
    }

    /// Limited slope of `rho` at node `i` (zero at non-periodic ends).
    fn slope(&self, rho: &[f64], i: usize, eps: f64) -> f64 {
        let n = self.grid.n;
        let (l, r) = match self.grid.boundary {
            Boundary::Periodic => ((i + n - 1) % n, (i + 1) % n),
            _ if i == 0 || i + 1 == n => return 0.0,
            _ => (i - 1, i + 1),
        };
        let a = rho[i] - rho[l];
        let c = rho[r] - rho[i];
        if a * c <= 0.0 {
            return 0.0;
        }
        (a * (c * c + eps) + c * (a * a + eps)) / (a * a + c * c + 2.0 * eps)
    }

    fn faces(&self, rho: &[f64], phi: &[f64], faces: &mut [f64]) {
        let dx = self.grid.dx;
        let peak = rho.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let eps = (1e-12 * peak).powi(2);
        for k in 0..self.n_faces() {
            faces[k] = match self.face_nodes(k) {
                None => 0.0,
                Some((a, b)) => {
                    let dphi = phi[b] - phi[a];
                    if self.kt > 0.0 {
                        let delta = dphi / self.kt;
                        self.diffusion / dx * (bernoulli(delta) * rho[a] - bernoulli(-delta) * rho[b])
                    } else {
                        let v = -dphi / (self.friction * dx);
                        if v > 0.0 {
                            v * (rho[a] + 0.5 * self.slope(rho, a, eps))
                        } else {
                            v * (rho[b] - 0.5 * self.slope(rho, b, eps))
                        }
                    }
                }
            };
        }
    }

    fn divergence(&self, faces: &[f64], out: &mut [f64]) {
        for i in 0..self.grid.n {
            out[i] = -(faces[i + 1] - faces[i]) / self.weights[i];
        }
        if self.grid.boundary == Boundary::Periodic {
            let n = self.grid.n;
            out[n - 1] = -(faces[0] - faces[n - 1]) / self.weights[n - 1];
        }
    }

    fn rhs(&self, rho: &[f64], frozen: Option<&[f64]>, work: &mut Work, out: &mut [f64]) {
        self.fluxes(rho, frozen, work);
        self.divergence(&work.faces, out);
        if self.slaved {
            out.iter_mut().zip(&self.live).filter(|(_, &l)| !l).for_each(|(o, _)| *o = 0.0);
        }
    }

    /// Diagonal outflow rates plus the quantum fourth-order estimate.
    fn max_rate(&self, rho: &[f64], phi: &[f64]) -> f64 {
        let dx = self.grid.dx;
        let mut max = 0.0f64;
        for i in 0..self.grid.n {
            let mut out = 0.0;
            for (k, left) in [(i, true), (i + 1, false)] {
                if let Some((a, b)) = self.face_nodes(k) {
                    let dphi = phi[b] - phi[a];
                    out += if self.kt > 0.0 {
                        let delta = dphi / self.kt;
                        self.diffusion / dx * if left { bernoulli(-delta) } else { bernoulli(delta) }
                    } else {
                        (dphi / (self.friction * dx)).abs()
                    };
                }
            }
            max = max.max(out / self.weights[i]);
        }
        let _ = rho;
        let kappa = self.qcoef / (2.0 * self.friction);
        2.0 * max + 16.0 * kappa / dx.powi(4)
    }
}

struct Work {
    phi: Vec<f64>,
    faces: Vec<f64>,
    l: Vec<f64>,
    eff: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Self { phi: vec![0.0; n], faces: vec![0.0; n + 1], l: vec![0.0; n + 2], eff: vec![0.0; n] }
    }
}

/// Face fluxes `J = -[rho (U + Q)' / b + D rho']`, on the staggered grid of
/// interior faces (all `n` faces for periodic grids).
pub fn flux(state: &SimState) -> Result<ScalarField> {
    let op = Operator::new(state)?;
    let mut work = Work::new(op.grid.n);
    op.total_potential(state.rho.values(), &mut work.phi)?;
    op.faces(state.rho.values(), &work.phi, &mut work.faces);
    let g = op.grid;
    let (x0, values) = match g.boundary {
        Boundary::Periodic => (g.x0 - 0.5 * g.dx, work.faces[..g.n].to_vec()),
        _ => (g.x(0) + 0.5 * g.dx, work.faces[1..g.n].to_vec()),
    };
    let face_grid = Grid1D::new(x0, g.dx, values.len(), Boundary::Decay)?;
    ScalarField::new(face_grid, values)
}

/// `d rho / dt` at each node.
pub fn rate(state: &SimState) -> Result<ScalarField> {
    let op = Operator::new(state)?;
    let mut work = Work::new(op.grid.n);
    let mut out = vec![0.0; op.grid.n];
    op.rhs(state.rho.values(), None, &mut work, &mut out);
    ScalarField::new(op.grid, out)
}

/// Max-norm of the flux divergence.
pub fn stationary_residual(state: &SimState) -> Result<f64> {
    Ok(rate(state)?.max_abs())
}

/// Largest stable forward-Euler step, times `safety`.
pub fn stability_limit(state: &SimState, safety: f64) -> Result<f64> {
    let op = Operator::new(state)?;
    let mut phi = vec![0.0; op.grid.n];
    op.total_potential(state.rho.values(), &mut phi)?;
    Ok(safety * 2.0 / op.max_rate(state.rho.values(), &phi))
}

/// Clamps negatives, restores unit mass; returns the number of clamps.
///
/// Negative values smaller in magnitude than the vacuum floor are zeroed
/// without counting: they are rounding in the vacuum.
fn repair(grid: &Grid1D, rho: &mut [f64]) -> Result<u64> {
    let peak = rho.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Numerical("density lost positivity everywhere or overflowed".into()));
    }
    let floor = DENSITY_FLOOR * peak;
    let mut clamps = 0;
    for r in rho.iter_mut() {
        if !r.is_finite() {
            return Err(Error::Numerical("non-finite density".into()));
        }
        if *r < 0.0 {
            if *r < -floor {
                clamps += 1;
            }
            *r = 0.0;
        }
    }
    let mass = weighted_sum(grid, rho);
    if (mass - 1.0).abs() > 1e-12 {
        rho.iter_mut().for_each(|r| *r /= mass);
    }
    Ok(clamps)
}

fn mass_check(before: f64, after: f64, allowed: f64, dt: f64) -> Result<()> {
    if (after - before).abs() > allowed {
        return Err(Error::StepRejected {
            reason: format!("mass changed by {:e} in one step", after - before),
            suggested_dt: 0.5 * dt,
        });
    }
    Ok(())
}

/// One forward-Euler step of size `ctrl.dt`.
pub fn step(state: &SimState, ctrl: &StepControl) -> Result<SimState> {
    ctrl.validate()?;
    let op = Operator::new(state)?;
    let n = op.grid.n;
    let mut work = Work::new(n);
    let rho = state.rho.values();
    op.total_potential(rho, &mut work.phi)?;
    let limit = ctrl.safety * 2.0 / op.max_rate(rho, &work.phi);
    if ctrl.dt > limit {
        return Err(Error::StepRejected {
            reason: format!("dt = {:e} exceeds the stability bound", ctrl.dt),
            suggested_dt: limit,
        });
    }
    op.faces(rho, &work.phi, &mut work.faces);
    let mut f = vec![0.0; n];
    op.divergence(&work.faces, &mut f);
    let mut next: Vec<f64> = rho.iter().zip(&f).map(|(r, d)| r + ctrl.dt * d).collect();
    mass_check(1.0, weighted_sum(&op.grid, &next), 1e-6, ctrl.dt)?;
    let clamps = repair(&op.grid, &mut next)?;
    Ok(SimState {
        rho: DensityField::from_values_unchecked(op.grid, next),
        t: state.t + ctrl.dt,
        clamp_count: state.clamp_count + clamps,
        ..state.clone()
    })
}

const HALF_BAND: usize = 3;

/// Banded Jacobian of the right-hand side, assembled from finite-difference
/// derivatives of the face fluxes so that its weighted column sums vanish
/// exactly, as those of the divergence do.
fn jacobian(op: &Operator, rho: &[f64], work: &mut Work) -> Result<BandedMatrix> {
    let n = op.grid.n;
    let colors = 2 * HALF_BAND + 1;
    let peak = rho.iter().fold(0.0f64, |m, v| m.max(*v));
    let floor = DENSITY_FLOOR * peak;
    let delta: Vec<f64> = rho.iter().map(|&r| if r >= floor { 1e-7 * r } else { 0.5 * floor - r.min(0.0) }).collect();
    let frozen = (op.qcoef > 0.0).then(|| log_density_masked(rho, &op.grid, &op.live));
    let frozen = frozen.as_deref();
    op.fluxes(rho, frozen, work);
    let base = work.faces.clone();
    let mut jac = BandedMatrix::zeros(n, HALF_BAND, HALF_BAND);
    let mut pert = rho.to_vec();
    let active = |j: usize| !op.slaved || op.live[j];
    for c in 0..colors {
        for j in (c..n).step_by(colors).filter(|&j| active(j)) {
            pert[j] = rho[j] + delta[j];
        }
        op.fluxes(&pert, frozen, work);
        for j in (c..n).step_by(colors).filter(|&j| active(j)) {
            pert[j] = rho[j];
            let d = (rho[j] + delta[j]) - rho[j];
            // face k separates nodes k-1 and k
            for k in j.saturating_sub(2).max(1)..=(j + 3).min(n - 1) {
                let dj = (work.faces[k] - base[k]) / d;
                if active(k - 1) {
                    jac.add(k - 1, j, -dj / op.weights[k - 1]);
                }
                if active(k) {
                    jac.add(k, j, dj / op.weights[k]);
                }
            }
        }
    }
    Ok(jac)
}

/// Outcome of one Rosenbrock attempt.
struct Ros2Step {
    next: Vec<f64>,
    /// Embedded error in the mixed norm, divided by the tolerance.
    error: f64,
}

const GAMMA: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

fn ros2_attempt(
    op: &Operator,
    rho: &[f64],
    jac: &BandedMatrix,
    f0: &[f64],
    dt: f64,
    tolerance: f64,
    work: &mut Work,
) -> Result<Ros2Step> {
    let n = op.grid.n;
    let mut w = jac.clone();
    for i in 0..n {
        for j in i.saturating_sub(HALF_BAND)..=(i + HALF_BAND).min(n - 1) {
            let v = -GAMMA * dt * w.get(i, j);
            w.set(i, j, v + if i == j { 1.0 } else { 0.0 });
        }
    }
    let lu = w.factor()?;
    let mut k1 = f0.to_vec();
    lu.solve_in_place(&mut k1);
    let stage: Vec<f64> = rho.iter().zip(&k1).map(|(r, k)| r + dt * k).collect();
    let mut k2 = vec![0.0; n];
    op.rhs(&stage, None, work, &mut k2);
    k2.iter_mut().zip(&k1).for_each(|(b, a)| *b -= 2.0 * a);
    lu.solve_in_place(&mut k2);
    let peak = rho.iter().fold(0.0f64, |m, v| m.max(*v));
    let atol = ERROR_FLOOR * peak;
    // the raw embedded estimate is dominated by stiff modes; one more solve
    // with W damps them the way the method itself does
    let mut est: Vec<f64> = (0..n).map(|i| 0.5 * dt * (k1[i] + k2[i])).collect();
    lu.solve_in_place(&mut est);
    let mut error = 0.0f64;
    let next = (0..n)
        .map(|i| {
            let v = rho[i] + 1.5 * dt * k1[i] + 0.5 * dt * k2[i];
            error = error.max(est[i].abs() / rho[i].abs().max(v.abs()).max(atol));
            v
        })
        .collect();
    Ok(Ros2Step { next, error: error / tolerance })
}

/// One accepted Rosenbrock step of at most `dt`; returns the new state and
/// the step size proposed for the next step.
pub fn step_rosenbrock(state: &SimState, dt: f64, tolerance: f64) -> Result<(SimState, f64)> {
    let (s, next_dt, _) = rosenbrock_adaptive(state, dt, tolerance, 50)?;
    Ok((s, next_dt))
}

fn rosenbrock_adaptive(
    state: &SimState,
    mut dt: f64,
    tolerance: f64,
    max_tries: usize,
) -> Result<(SimState, f64, usize)> {
    if state.grid().boundary == Boundary::Periodic {
        return Err(Error::Configuration("the Rosenbrock scheme supports decay and reflecting boundaries only".into()));
    }
    let op = Operator::with_resolution(state, RESOLVED, true)?;
    let rho = state.rho.values();
    let mut work = Work::new(op.grid.n);
    let jac = jacobian(&op, rho, &mut work)?;
    let mut f0 = vec![0.0; op.grid.n];
    op.rhs(rho, None, &mut work, &mut f0);
    let mut rejected = 0;
    for _ in 0..max_tries {
        let attempt = ros2_attempt(&op, rho, &jac, &f0, dt, tolerance, &mut work);
        let (next, err) = match attempt {
            Ok(s) if s.error.is_finite() => (s.next, s.error),
            _ => {
                rejected += 1;
                dt *= 0.25;
                continue;
            }
        };
        let factor = (0.9 / err.max(1e-10).sqrt()).clamp(0.2, 2.0);
        if err <= 1.0 {
            let mut next = next;
            if mass_check(1.0, weighted_sum(&op.grid, &next), 1e-6, dt).is_err() {
                rejected += 1;
                dt *= 0.5;
                continue;
            }
            op.slave(&mut next);
            let clamps = repair(&op.grid, &mut next)?;
            let s = SimState {
                rho: DensityField::from_values_unchecked(op.grid, next),
                t: state.t + dt,
                clamp_count: state.clamp_count + clamps,
                ..state.clone()
            };
            return Ok((s, dt * factor, rejected));
        }
        rejected += 1;
        dt *= factor;
    }
    Err(Error::StepRejected {
        reason: format!("no acceptable Rosenbrock step after {max_tries} attempts"),
        suggested_dt: dt,
    })
}

/// Advances to `t_end`, recording snapshots at `t = state.t + k *
/// output_interval` and at `t_end`.
pub fn evolve(state: &SimState, t_end: f64, ctrl: &StepControl) -> Result<Trajectory> {
    ctrl.validate()?;
    if !(t_end > state.t) {
        return Err(Error::Domain(format!("t_end = {t_end} is not after t = {}", state.t)));
    }
    let mut s = state.clone();
    let mut snapshots = vec![Snapshot::of(&s)];
    let mut next_out = (state.t + ctrl.output_interval).min(t_end);
    let mut steps = 0;
    let mut rejected = 0;
    let mut dt = ctrl.dt;
    let time_eps = 1e-12 * t_end.abs().max(1.0);
    while s.t < t_end - time_eps {
        if steps >= ctrl.max_steps {
            return Err(Error::Convergence {
                what: "time integration exceeded the step budget".into(),
                iterations: steps,
                residuals: vec![t_end - s.t],
                last: Some(s.rho.values().to_vec()),
            });
        }
        let target = next_out - s.t;
        match ctrl.scheme {
            Scheme::Explicit => {
                let h = dt.min(target);
                match step(&s, &StepControl { dt: h, ..*ctrl }) {
                    Ok(ns) => s = ns,
                    Err(Error::StepRejected { suggested_dt, .. }) if suggested_dt < h => {
                        rejected += 1;
                        dt = suggested_dt;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            Scheme::Rosenbrock => {
                let h = dt.min(target);
                let clipped = h < dt;
                let (ns, proposal, rej) = rosenbrock_adaptive(&s, h, ctrl.tolerance, 50)?;
                rejected += rej;
                s = ns;
                if !clipped || proposal < dt {
                    dt = proposal;
                }
            }
        }
        steps += 1;
        if s.t >= next_out - time_eps {
            s.t = next_out;
            snapshots.push(Snapshot::of(&s));
            next_out = (next_out + ctrl.output_interval).min(t_end);
        }
    }
    Ok(Trajectory { snapshots, final_state: s, steps, rejected_steps: rejected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reduced(temp: f64) -> PhysicalParams {
        PhysicalParams::reduced(1.0, 1.0, temp, 2.0).unwrap()
    }

    fn harmonic_boltzmann(n: usize) -> SimState {
        let g = Grid1D::spanning(-8.0, 8.0, n, Boundary::Decay).unwrap();
        let rho = DensityField::normalized_from_fn(g, |x| (-0.5 * x * x).exp()).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.5 * x * x);
        SimState::new(rho, u, reduced(1.0), Mode::Classical).unwrap()
    }

    #[test]
    fn bernoulli_branches_agree() {
        for x in [-1e-5, -1e-6, 0.0, 1e-6, 1e-5] {
            let series = 1.0 - 0.5 * x + x * x / 12.0;
            assert!((bernoulli(x) - series).abs() < 1e-15);
        }
        assert!((bernoulli(1.0) - 1.0 / (1f64.exp() - 1.0)).abs() < 1e-15);
        assert!((bernoulli(-800.0) - 800.0).abs() < 1e-12);
        assert!(bernoulli(800.0) >= 0.0 && bernoulli(800.0) < 1e-300);
        for x in [0.3, 2.0, 40.0] {
            assert!((bernoulli(-x) - bernoulli(x) - x).abs() < 1e-12 * (1.0 + x));
        }
    }

    #[test]
    fn boltzmann_has_no_flux() {
        let s = harmonic_boltzmann(161);
        assert!(flux(&s).unwrap().max_abs() < 1e-14);
        assert!(stationary_residual(&s).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_free_density_has_no_flux() {
        for b in [Boundary::Decay, Boundary::Periodic, Boundary::Reflecting] {
            let g = Grid1D::spanning(0.0, 4.0, 32, b).unwrap();
            let rho = DensityField::new(ScalarField::constant(g, 1.0)).unwrap();
            for mode in [Mode::ThermoQuantum, Mode::Classical, Mode::PureQuantum] {
                let s = SimState::free(rho.clone(), reduced(1.0), mode).unwrap();
                assert!(flux(&s).unwrap().max_abs() < 1e-13, "{b:?} {mode:?}");
                assert!(stationary_residual(&s).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_quantum_flux_is_antisymmetric() {
        let g = Grid1D::spanning(-6.0, 6.0, 241, Boundary::Decay).unwrap();
        let rho = DensityField::gaussian(g, 0.0, 0.5).unwrap();
        let s = SimState::free(rho, reduced(0.0), Mode::PureQuantum).unwrap();
        let j = flux(&s).unwrap();
        let v = j.values();
        let scale = j.max_abs();
        assert!(scale > 0.0);
        for k in 0..v.len() {
            assert!((v[k] + v[v.len() - 1 - k]).abs() < 1e-10 * scale);
        }
        // outward on both sides
        assert!(v[v.len() / 2 + 10] > 0.0 && v[v.len() / 2 - 10] < 0.0);
    }

    #[test]
    fn tiny_step_is_identity() {
        let g = Grid1D::spanning(-6.0, 6.0, 121, Boundary::Decay).unwrap();
        let rho = DensityField::gaussian(g, 0.3, 1.0).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.1 * x * x * x);
        let s = SimState::new(rho, u, reduced(1.0), Mode::ThermoQuantum).unwrap();
        let next = step(&s, &StepControl::explicit(1e-15)).unwrap();
        for (a, b) in s.rho.values().iter().zip(next.rho.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (next, _) = step_rosenbrock(&s, 1e-15, 1e-4).unwrap();
        for (a, b) in s.rho.values().iter().zip(next.rho.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn boltzmann_fixed_point_explicit() {
        let s = harmonic_boltzmann(161);
        let dt = stability_limit(&s, 0.9).unwrap();
        let mut cur = s.clone();
        for _ in 0..1000 {
            cur = step(&cur, &StepControl::explicit(dt)).unwrap();
        }
        for (a, b) in s.rho.values().iter().zip(cur.rho.values()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(cur.clamp_count, 0);
    }

    #[test]
    fn oversized_step_is_rejected() {
        let s = harmonic_boltzmann(161);
        let dt = stability_limit(&s, 1.0).unwrap();
        match step(&s, &StepControl { safety: 0.5, ..StepControl::explicit(dt) }) {
            Err(Error::StepRejected { suggested_dt, .. }) => assert!(suggested_dt < dt),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn explicit_and_implicit_agree() {
        let g = Grid1D::spanning(-8.0, 8.0, 81, Boundary::Decay).unwrap();
        let rho = DensityField::gaussian(g, 0.5, 1.5).unwrap();
        let u = ScalarField::from_fn(g, |x| 0.25 * x * x);
        let s = SimState::new(rho, u, reduced(0.5), Mode::ThermoQuantum).unwrap();
        let dt = stability_limit(&s, 0.25).unwrap();
        let t_end = 800.0 * dt;
        let a = evolve(&s, t_end, &StepControl::explicit(dt)).unwrap().final_state;
        let b = evolve(&s, t_end, &StepControl::rosenbrock(dt, 1e-7)).unwrap().final_state;
        let diff = a.rho.l1_distance(&b.rho);
        assert!(diff < 1e-4, "{diff}");
        assert!((a.mass() - 1.0).abs() < 1e-12 && (b.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snapshots_on_cadence() {
        let s = harmonic_boltzmann(81);
        let ctrl = StepControl::rosenbrock(1e-3, 1e-5).with_output_interval(0.25);
        let tr = evolve(&s, 1.0, &ctrl).unwrap();
        let times: Vec<f64> = tr.snapshots.iter().map(|s| s.t).collect();
        assert_eq!(times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let mut buf = Vec::new();
        tr.write_series_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,variance,mass,clamp_count\n"));
    }

    #[test]
    fn rejects_mismatched_grids() {
        let g = Grid1D::spanning(0.0, 1.0, 16, Boundary::Decay).unwrap();
        let h = Grid1D::spanning(0.0, 2.0, 16, Boundary::Decay).unwrap();
        let rho = DensityField::new(ScalarField::constant(g, 1.0)).unwrap();
        assert!(SimState::new(rho, ScalarField::constant(h, 0.0), reduced(1.0), Mode::Classical).is_err());
    }
}
