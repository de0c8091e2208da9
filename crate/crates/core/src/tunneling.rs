//! Stationary flow through a potential at fixed total energy.
//!
//! A stationary current `rho V = const` with the Bohm velocity
//! `V = sqrt(2 (E - U - Q) / m)` gives the implicit density
//! `rho = C / sqrt(2 (E - U - Q[rho]) / m)`. Dropping `Q` gives the classical
//! ergodic density `C / sqrt(2 (E - U) / m)`; expanding `Q` once around it
//! gives the semiclassical correction
//!
//! ```text
//! rho = C / sqrt(2 (E - U) / m + hbar^2 U'' / 4 m^2 (E - U) + 5 hbar^2 U'^2 / 16 m^2 (E - U)^2)
//! ```
//!
//! The time-dependent problem `d rho/dt = -d/dx (rho V)` is advanced by
//! first-order upwinding. Through `Q` the equation picks up a dispersive term
//! of size `hbar^2 rho''' / 4 m^2 V`, which forward stepping only survives
//! while upwind diffusion dominates it at the grid scale, roughly
//! `dx > hbar / m V`.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::fields::{
    first_difference, normalize, quantum_potential, second_difference, DensityField, Grid1D, ScalarField,
};
use crate::params::PhysicalParams;
use crate::smoluchowski::Snapshot;

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelingScenario {
    pub potential: ScalarField,
    /// Total energy `E`.
    pub energy: f64,
    pub params: PhysicalParams,
    /// Smallest kinetic energy `E - U - Q` treated as allowed.
    pub epsilon: f64,
}

impl TunnelingScenario {
    /// Uses `epsilon = 1e-6 |E|`, or `1e-6` times the potential scale when
    /// `E = 0`.
    pub fn new(potential: ScalarField, energy: f64, params: PhysicalParams) -> Result<Self> {
        let scale = if energy != 0.0 { energy.abs() } else { potential.max_abs() };
        let epsilon = if scale > 0.0 { 1e-6 * scale } else { 1e-12 };
        Self { potential, energy, params, epsilon }.validated()
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        Self { epsilon, ..self }.validated()
    }

    fn validated(self) -> Result<Self> {
        self.params.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::ParameterDomain(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !self.energy.is_finite() || self.potential.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("energy and potential must be finite".into()));
        }
        if self.potential.grid().n < 4 {
            return Err(Error::Configuration("tunneling grids need at least 4 nodes".into()));
        }
        Ok(self)
    }

    pub fn grid(&self) -> &Grid1D {
        self.potential.grid()
    }

    /// Kinetic energy `E - U` at each node, floored at `epsilon`.
    fn kinetic(&self) -> Vec<f64> {
        self.potential.values().iter().map(|u| (self.energy - u).max(self.epsilon)).collect()
    }
}

fn normalized(grid: &Grid1D, values: Vec<f64>) -> Result<DensityField> {
    normalize(&DensityField::new(ScalarField::new(*grid, values)?)?)
}

/// `C / sqrt(2 (E - U) / m)`, normalized.
pub fn classical_ergodic_density(sc: &TunnelingScenario) -> Result<DensityField> {
    let allowed: usize = sc.potential.values().iter().filter(|u| sc.energy - **u > sc.epsilon).count();
    if allowed == 0 {
        return Err(Error::regime("no classically allowed node", (0..sc.grid().n).collect()));
    }
    let m = sc.params.mass;
    normalized(sc.grid(), sc.kinetic().iter().map(|k| (2.0 * k / m).sqrt().recip()).collect())
}

/// Semiclassical density with the `hbar^2` corrections from `U'` and `U''`.
pub fn semiclassical_density(sc: &TunnelingScenario) -> Result<DensityField> {
    let grid = sc.grid();
    let m = sc.params.mass;
    let h2 = sc.params.hbar * sc.params.hbar;
    let du = first_difference(sc.potential.values(), grid);
    let d2u = second_difference(sc.potential.values(), grid);
    let radicand: Vec<f64> = sc
        .kinetic()
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            2.0 * k / m + h2 * d2u[i] / (4.0 * m * m * k) + 5.0 * h2 * du[i] * du[i] / (16.0 * m * m * k * k)
        })
        .collect();
    let bad: Vec<usize> = (0..grid.n).filter(|&i| !(radicand[i] > 0.0)).collect();
    if !bad.is_empty() {
        return Err(Error::regime("semiclassical radicand is not positive", bad));
    }
    normalized(grid, radicand.iter().map(|r| r.sqrt().recip()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub rho: DensityField,
    pub iterations: usize,
    /// Max relative difference between `rho` and its image under the
    /// undamped map.
    pub residual: f64,
    /// Nodes where `E - U - Q` fell below `epsilon` in the final map.
    pub floored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { damping: 0.3, tolerance: 1e-8, max_iterations: 20_000 }
    }
}

/// One undamped application of `rho -> C / sqrt(2 (E - U - Q[rho]) / m)`.
fn picard_map(sc: &TunnelingScenario, rho: &DensityField) -> Result<(DensityField, usize)> {
    let q = quantum_potential(rho, sc.params.mass, sc.params.hbar)?;
    let m = sc.params.mass;
    let mut floored = 0;
    let values = sc
        .potential
        .values()
        .iter()
        .zip(q.values())
        .map(|(u, q)| {
            let mut k = sc.energy - u - q;
            if k <= sc.epsilon {
                floored += 1;
                k = sc.epsilon;
            }
            (2.0 * k / m).sqrt().recip()
        })
        .collect();
    Ok((normalized(sc.grid(), values)?, floored))
}

fn max_relative_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
}

/// Fixed point of the implicit stationary equation by damped Picard
/// iteration from `rho0`.
///
/// A grid-scale ripple in `rho` comes back through `Q` amplified by
/// `hbar^2 / (2 m (E - U) dx^2)`, so the iteration only converges on grids
/// coarse enough to keep that factor below one. This singles out the smooth
/// (adiabatic) solution; resolving `hbar`-scale structure needs a different
/// solver.
pub fn stationary_fixed_point(sc: &TunnelingScenario, rho0: &DensityField, opts: &PicardOptions) -> Result<FixedPoint> {
    if rho0.grid() != sc.grid() {
        return Err(Error::Configuration("initial density and potential grids differ".into()));
    }
    if rho0.values().iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Domain("initial density must be strictly positive".into()));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::ParameterDomain(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let a = opts.damping;
    let mut rho = normalize(rho0)?;
    let mut history = Vec::new();
    for it in 1..=opts.max_iterations {
        let (image, _) = picard_map(sc, &rho)?;
        let next: Vec<f64> = rho.values().iter().zip(image.values()).map(|(r, s)| (1.0 - a) * r + a * s).collect();
        let change = max_relative_change(rho.values(), &next);
        rho = normalized(sc.grid(), next)?;
        history.push(change);
        if change < opts.tolerance {
            let (image, floored) = picard_map(sc, &rho)?;
            let residual = max_relative_change(rho.values(), image.values());
            return Ok(FixedPoint { rho, iterations: it, residual, floored });
        }
    }
    Err(Error::Convergence {
        what: "stationary tunneling fixed point".into(),
        iterations: opts.max_iterations,
        residuals: history,
        last: Some(rho.values().to_vec()),
    })
}

/// Writes `x,rho_classical,rho_semiclassical,rho_fixed_point`.
pub fn write_densities_csv<W: Write>(
    classical: &DensityField,
    semiclassical: &DensityField,
    fixed_point: &DensityField,
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "x,rho_classical,rho_semiclassical,rho_fixed_point")?;
    let g = classical.grid();
    for i in 0..g.n {
        writeln!(
            w,
            "{:.12e},{:.12e},{:.12e},{:.12e}",
            g.x(i),
            classical.values()[i],
            semiclassical.values()[i],
            fixed_point.values()[i]
        )?;
    }
    Ok(())
}

/// Result of one upwind step.
#[derive(Debug, Clone, PartialEq)]
pub struct TunnelingStep {
    pub rho: Vec<f64>,
    /// Flux entering through the left edge.
    pub inflow: f64,
    /// Flux leaving through the right edge.
    pub outflow: f64,
    /// Nodes whose velocity was set to zero.
    pub floored: usize,
}

/// Bohm velocity `sqrt(2 (E - U - Q) / m)`, zero where the kinetic energy is
/// at most `epsilon`; also returns how many nodes were zeroed.
pub fn bohm_velocity(sc: &TunnelingScenario, rho: &DensityField) -> Result<(Vec<f64>, usize)> {
    let q = quantum_potential(rho, sc.params.mass, sc.params.hbar)?;
    let mut floored = 0;
    let v = sc
        .potential
        .values()
        .iter()
        .zip(q.values())
        .map(|(u, q)| {
            let k = sc.energy - u - q;
            if k <= sc.epsilon {
                floored += 1;
                0.0
            } else {
                (2.0 * k / sc.params.mass).sqrt()
            }
        })
        .collect();
    Ok((v, floored))
}

/// One upwind step. The left node is an inflow boundary and keeps its value;
/// the right edge is an outflow boundary.
pub fn tunneling_step(sc: &TunnelingScenario, rho: &DensityField, dt: f64) -> Result<TunnelingStep> {
    let grid = sc.grid();
    let (v, floored) = bohm_velocity(sc, rho)?;
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(*x));
    let courant = vmax * dt / grid.dx;
    if courant > 1.0 {
        return Err(Error::StepRejected {
            reason: format!("Courant number {courant} exceeds 1"),
            suggested_dt: grid.dx / vmax,
        });
    }
    let r = rho.values();
    let flux: Vec<f64> = r.iter().zip(&v).map(|(a, b)| a * b).collect();
    let mut next = r.to_vec();
    for i in 1..grid.n {
        next[i] = r[i] - dt / grid.dx * (flux[i] - flux[i - 1]);
    }
    Ok(TunnelingStep { rho: next, inflow: flux[0], outflow: flux[grid.n - 1], floored })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelingRun {
    pub snapshots: Vec<Snapshot>,
    pub steps: usize,
    /// Time-integrated boundary fluxes.
    pub inflow: f64,
    pub outflow: f64,
}

/// Advances `rho0` to `t_end` with fixed `dt` (the last step is shortened to
/// land on `t_end`), recording snapshots every `output_interval`.
pub fn evolve_tunneling(
    sc: &TunnelingScenario,
    rho0: &DensityField,
    dt: f64,
    t_end: f64,
    output_interval: f64,
) -> Result<TunnelingRun> {
    if rho0.grid() != sc.grid() {
        return Err(Error::Configuration("initial density and potential grids differ".into()));
    }
    if !rho0.is_normalized() {
        return Err(Error::Domain(format!("initial density has mass {}", rho0.mass())));
    }
    if !(dt > 0.0 && t_end > 0.0 && output_interval > 0.0) {
        return Err(Error::Configuration("dt, t_end and output interval must be positive".into()));
    }
    let grid = *sc.grid();
    let snap = |t: f64, rho: &DensityField, clamps: u64| Snapshot {
        t,
        rho: rho.clone(),
        variance: rho.variance(),
        mass: rho.mass(),
        clamp_count: clamps,
    };
    let mut rho = rho0.clone();
    let mut t = 0.0;
    let mut clamps = 0u64;
    let mut run = TunnelingRun { snapshots: vec![snap(0.0, &rho, 0)], steps: 0, inflow: 0.0, outflow: 0.0 };
    let mut next_out = output_interval.min(t_end);
    let eps = 1e-12 * t_end;
    while t < t_end - eps {
        let h = dt.min(next_out - t);
        let s = tunneling_step(sc, &rho, h)?;
        run.inflow += h * s.inflow;
        run.outflow += h * s.outflow;
        clamps += s.floored as u64;
        rho = DensityField::new(ScalarField::new(grid, s.rho)?)?;
        t += h;
        run.steps += 1;
        if t >= next_out - eps {
            run.snapshots.push(snap(t, &rho, clamps));
            next_out = (next_out + output_interval).min(t_end);
        }
    }
    Ok(run)
}
