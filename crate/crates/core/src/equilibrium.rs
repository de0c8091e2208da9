//! Stationary densities.
//!
//! With `g = ln rho_eq` the stationary Smoluchowski equation integrates once
//! to
//!
//! ```text
//! -hbar^2 g'' / 4m - hbar^2 g'^2 / 8m + kB T g = F - U
//! ```
//!
//! where the free energy `F` is fixed by normalization. [`solve_equilibrium`]
//! solves this by damped Newton. The closed forms of the classical, strong
//! barrier (WKB) and weak potential limits are also provided.
//!
//! At `T = 0` the equation is the Riccati form of the ground-state
//! Schrodinger problem for `psi = exp(g / 2)` with energy `F`.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::fields::{Boundary, DensityField, Grid1D, Mode, ScalarField};
use crate::linalg::{BandedMatrix, LowRankUpdated};
use crate::params::PhysicalParams;

/// Boltzmann weight at a decay edge, relative to the peak, above which the
/// density is considered not confined by the grid.
const CONFINEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub rho_eq: DensityField,
    /// Free energy `F`.
    pub free_energy: f64,
    /// `ln rho_eq`, which stays accurate where `rho_eq` underflows.
    pub log_density: Vec<f64>,
    pub potential: ScalarField,
    /// Max-norm residual of the equation after each Newton iteration, over
    /// all continuation stages.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl EquilibriumSolution {
    /// Writes `x,rho_eq,U`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,rho_eq,U")?;
        let g = self.rho_eq.grid();
        for (i, (r, u)) in self.rho_eq.values().iter().zip(self.potential.values()).enumerate() {
            writeln!(w, "{:.12e},{:.12e},{:.12e}", g.x(i), r, u)?;
        }
        Ok(())
    }

    /// Largest `|rho(x) - rho(-x)|` relative to the peak, pairing mirror
    /// nodes of the grid.
    pub fn asymmetry(&self) -> f64 {
        let v = self.rho_eq.values();
        let n = v.len();
        let peak = self.rho_eq.peak();
        (0..n / 2).map(|i| (v[i] - v[n - 1 - i]).abs()).fold(0.0, f64::max) / peak
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Bound on the max-norm residual, in units of the problem's energy
    /// scale (`kB T`, or `hbar^2 / 2 m L^2` at zero temperature).
    pub tolerance: f64,
    pub max_halvings: usize,
    /// Stages of the `hbar` continuation tried when the direct solve fails.
    pub continuation_steps: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iterations: 100, tolerance: 1e-8, max_halvings: 30, continuation_steps: 5 }
    }
}

/// Solves for the stationary density in `u` with default options.
pub fn solve_equilibrium(u: &ScalarField, p: &PhysicalParams, mode: Mode) -> Result<EquilibriumSolution> {
    solve_equilibrium_with(u, p, mode, &NewtonOptions::default())
}

pub fn solve_equilibrium_with(
    u: &ScalarField,
    p: &PhysicalParams,
    mode: Mode,
    opts: &NewtonOptions,
) -> Result<EquilibriumSolution> {
    p.validate()?;
    if u.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("potential must be finite on the grid".into()));
    }
    let kt = if mode.has_thermal() { p.thermal_energy() } else { 0.0 };
    let quantum = if mode.has_quantum() { p.hbar * p.hbar / (4.0 * p.mass) } else { 0.0 };
    if kt == 0.0 && quantum == 0.0 {
        return Err(Error::Configuration("classical equilibrium needs a positive temperature".into()));
    }
    let grid = *u.grid();
    if kt > 0.0 {
        check_confined(u, kt)?;
    }
    let scale = if kt > 0.0 { kt } else { p.hbar * p.hbar / (2.0 * p.mass * grid.extent() * grid.extent()) };
    let problem = |a: f64| Problem { grid, u: u.values(), kt, a, tol: opts.tolerance * scale };

    let start = if kt > 0.0 { boltzmann_start(u, kt) } else { ground_state_start(u, p)? };
    let mut history = Vec::new();
    let direct = problem(quantum).newton(start.clone(), opts, &mut history);
    let z = match direct {
        Ok(z) => z,
        Err(_) if kt > 0.0 && quantum > 0.0 && opts.continuation_steps > 1 => {
            let mut z = start;
            let k = opts.continuation_steps;
            for s in 1..=k {
                let a = quantum * (s as f64 / k as f64).powi(2);
                z = problem(a).newton(z, opts, &mut history)?;
            }
            z
        }
        Err(e) => return Err(e),
    };

    let n = grid.n;
    let log_density: Vec<f64> = (0..n).map(|i| z[3 * i]).collect();
    let rho = DensityField::new(ScalarField::new(grid, log_density.iter().map(|g| g.exp()).collect())?)?;
    Ok(EquilibriumSolution {
        rho_eq: rho,
        free_energy: z[1],
        log_density,
        potential: u.clone(),
        iterations: history.len(),
        residuals: history,
    })
}

/// Discrete equation. Unknowns are interleaved per node as `(g_i, F_i,
/// S_i)`, with `F_i` constant along the grid and `S_i` the running mass, so
/// that the normalization keeps the Jacobian banded.
struct Problem<'a> {
    grid: Grid1D,
    u: &'a [f64],
    kt: f64,
    /// `hbar^2 / 4m`
    a: f64,
    tol: f64,
}

impl Problem<'_> {
    /// Left and right neighbours of node `i`, reflecting `g' = 0` at
    /// non-periodic edges.
    fn neighbours(&self, i: usize) -> (usize, usize) {
        let n = self.grid.n;
        match self.grid.boundary {
            Boundary::Periodic => ((i + n - 1) % n, (i + 1) % n),
            Boundary::Reflecting => (i.saturating_sub(1), (i + 1).min(n - 1)),
            Boundary::Decay => (if i == 0 { 1 } else { i - 1 }, if i + 1 == n { n - 2 } else { i + 1 }),
        }
    }

    /// Returns the full residual and the max-norm of the equation rows.
    fn residual(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let n = self.grid.n;
        let dx = self.grid.dx;
        let mut r = vec![0.0; 3 * n];
        let mut eq = 0.0f64;
        let mut running = 0.0;
        for i in 0..n {
            let (l, rt) = self.neighbours(i);
            let g = z[3 * i];
            let (gl, gr) = (z[3 * l], z[3 * rt]);
            let d = (gr - gl) / (2.0 * dx);
            let v = -self.a * (gr - 2.0 * g + gl) / (dx * dx) - 0.5 * self.a * d * d + self.kt * g - z[3 * i + 1]
                + self.u[i];
            r[3 * i] = v;
            eq = eq.max(v.abs());
            r[3 * i + 1] = if i + 1 < n { z[3 * i + 4] - z[3 * i + 1] } else { z[3 * i + 2] - 1.0 };
            r[3 * i + 2] = z[3 * i + 2] - running - self.grid.weight(i) * g.exp();
            running = z[3 * i + 2];
        }
        (r, eq)
    }

    fn solve_linear(&self, z: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n;
        let dx = self.grid.dx;
        let m = 3 * n;
        let mut jac = BandedMatrix::zeros(m, 3, 3);
        let mut corners = Vec::new();
        for i in 0..n {
            let (l, rt) = self.neighbours(i);
            let d = (z[3 * rt] - z[3 * l]) / (2.0 * dx);
            let c = self.a / (dx * dx);
            let row = 3 * i;
            jac.add(row, row, 2.0 * c + self.kt);
            for (j, v) in [(l, -c + 0.5 * self.a * d / dx), (rt, -c - 0.5 * self.a * d / dx)] {
                if j.abs_diff(i) > 1 {
                    corners.push((row, 3 * j, v));
                } else {
                    jac.add(row, 3 * j, v);
                }
            }
            jac.add(row, row + 1, -1.0);
            if i + 1 < n {
                jac.add(row + 1, row + 4, 1.0);
                jac.add(row + 1, row + 1, -1.0);
            } else {
                jac.add(row + 1, row + 2, 1.0);
            }
            jac.add(row + 2, row + 2, 1.0);
            if i > 0 {
                jac.add(row + 2, row - 1, -1.0);
            }
            jac.add(row + 2, row, -self.grid.weight(i) * z[row].exp());
        }
        let lu = jac.factor()?;
        if corners.is_empty() {
            return Ok(lu.solve(rhs));
        }
        let (us, vs) = corners
            .into_iter()
            .map(|(r, c, v)| {
                let mut u = vec![0.0; m];
                let mut e = vec![0.0; m];
                u[r] = v;
                e[c] = 1.0;
                (u, e)
            })
            .unzip();
        Ok(LowRankUpdated::new(lu, us, vs)?.solve(rhs))
    }

    fn newton(&self, mut z: Vec<f64>, opts: &NewtonOptions, history: &mut Vec<f64>) -> Result<Vec<f64>> {
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (mut r, mut eq) = self.residual(&z);
        for it in 0..opts.max_iterations {
            if eq <= self.tol && r.iter().all(|v| v.abs() <= self.tol.max(1e-12)) {
                return Ok(z);
            }
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            let step = self.solve_linear(&z, &neg)?;
            let merit = norm(&r);
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                let trial: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + lambda * b).collect();
                let (tr, teq) = self.residual(&trial);
                let m = norm(&tr);
                if m.is_finite() && m <= (1.0 - 1e-4 * lambda) * merit {
                    z = trial;
                    r = tr;
                    eq = teq;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            history.push(eq);
            if !accepted {
                return Err(Error::Convergence {
                    what: format!("equilibrium Newton line search (iteration {it})"),
                    iterations: history.len(),
                    residuals: history.clone(),
                    last: Some(z.iter().step_by(3).copied().collect()),
                });
            }
        }
        if eq <= self.tol {
            return Ok(z);
        }
        Err(Error::Convergence {
            what: "equilibrium Newton iteration".into(),
            iterations: history.len(),
            residuals: history.clone(),
            last: Some(z.iter().step_by(3).copied().collect()),
        })
    }
}

/// Packs `g` and `F` into the interleaved unknown vector.
fn pack(grid: &Grid1D, g: &[f64], f: f64) -> Vec<f64> {
    let mut z = Vec::with_capacity(3 * g.len());
    let mut running = 0.0;
    for (i, gi) in g.iter().enumerate() {
        running += grid.weight(i) * gi.exp();
        z.extend([*gi, f, running]);
    }
    z
}

/// Normalizes `exp(g)` in log space; returns the shifted `g` and `ln` of
/// the removed normalization.
fn normalize_log(grid: &Grid1D, g: &mut [f64]) -> f64 {
    let top = g.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let z: f64 = g.iter().enumerate().map(|(i, v)| grid.weight(i) * (v - top).exp()).sum();
    let shift = top + z.ln();
    g.iter_mut().for_each(|v| *v -= shift);
    shift
}

fn boltzmann_start(u: &ScalarField, kt: f64) -> Vec<f64> {
    let grid = u.grid();
    let mut g: Vec<f64> = u.values().iter().map(|v| -v / kt).collect();
    let ln_z = normalize_log(grid, &mut g);
    pack(grid, &g, -kt * ln_z)
}

/// Ground state of `-hbar^2/2m psi'' + U psi` by shifted inverse iteration,
/// discretized with the same edge rules as the Newton problem.
fn ground_state_start(u: &ScalarField, p: &PhysicalParams) -> Result<Vec<f64>> {
    let grid = *u.grid();
    let n = grid.n;
    let k = p.hbar * p.hbar / (2.0 * p.mass * grid.dx * grid.dx);
    let umin = u.values().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let shift = umin - 1e-2 * p.hbar * p.hbar / (2.0 * p.mass * grid.extent() * grid.extent());
    let probe = Problem { grid, u: u.values(), kt: 0.0, a: 0.0, tol: 0.0 };
    let mut h = BandedMatrix::zeros(n, 1, 1);
    let mut corners = Vec::new();
    for i in 0..n {
        let (l, r) = probe.neighbours(i);
        h.add(i, i, 2.0 * k + u.values()[i] - shift);
        for j in [l, r] {
            if j.abs_diff(i) > 1 {
                corners.push((i, j));
            } else {
                h.add(i, j, -k);
            }
        }
    }
    let lu = h.factor()?;
    let (us, vs): (Vec<Vec<f64>>, Vec<Vec<f64>>) = corners
        .into_iter()
        .map(|(r, c)| {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            a[r] = -k;
            b[c] = 1.0;
            (a, b)
        })
        .unzip();
    let solver = LowRankUpdated::new(lu, us, vs)?;
    let mut psi = vec![1.0; n];
    for _ in 0..500 {
        let mut next = solver.solve(&psi);
        let top = next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        next.iter_mut().for_each(|v| *v /= top);
        let change = next.iter().zip(&psi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        psi = next;
        if change < 1e-13 {
            break;
        }
    }
    let floor = 1e-150;
    let mut g: Vec<f64> = psi.iter().map(|v| 2.0 * v.abs().max(floor).ln()).collect();
    normalize_log(&grid, &mut g);
    // Rayleigh quotient of the discrete Hamiltonian
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let (l, r) = probe.neighbours(i);
        let hpsi = k * (2.0 * psi[i] - psi[l] - psi[r]) + u.values()[i] * psi[i];
        num += grid.weight(i) * psi[i] * hpsi;
        den += grid.weight(i) * psi[i] * psi[i];
    }
    Ok(pack(&grid, &g, num / den))
}

fn check_confined(u: &ScalarField, kt: f64) -> Result<()> {
    let grid = u.grid();
    if grid.boundary != Boundary::Decay {
        return Ok(());
    }
    let v = u.values();
    let umin = v.iter().fold(f64::INFINITY, |m, x| m.min(*x));
    let n = v.len();
    let open: Vec<usize> = [0, n - 1].into_iter().filter(|&i| (-(v[i] - umin) / kt).exp() > CONFINEMENT).collect();
    if open.is_empty() {
        Ok(())
    } else {
        Err(Error::regime("potential does not confine the Boltzmann density on a decay grid", open))
    }
}

/// Boltzmann density `exp(-U / kB T)`, normalized.
pub fn boltzmann_density(u: &ScalarField, p: &PhysicalParams) -> Result<DensityField> {
    p.validate()?;
    let kt = p.thermal_energy();
    if !(kt > 0.0) {
        return Err(Error::ParameterDomain("Boltzmann density needs T > 0".into()));
    }
    check_confined(u, kt)?;
    let mut g: Vec<f64> = u.values().iter().map(|v| -v / kt).collect();
    normalize_log(u.grid(), &mut g);
    DensityField::new(ScalarField::new(*u.grid(), g.iter().map(|v| v.exp()).collect())?)
}

/// Free energy `-kB T ln Z` of the sampled Boltzmann density.
pub fn boltzmann_free_energy(u: &ScalarField, p: &PhysicalParams) -> Result<f64> {
    let kt = p.thermal_energy();
    if !(kt > 0.0) {
        return Err(Error::ParameterDomain("Boltzmann free energy needs T > 0".into()));
    }
    let mut g: Vec<f64> = u.values().iter().map(|v| -v / kt).collect();
    Ok(-kt * normalize_log(u.grid(), &mut g))
}

/// Trapezoid running integral starting at zero on the left edge.
fn cumulative(grid: &Grid1D, f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in f.windows(2) {
        acc += 0.5 * grid.dx * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

fn from_log(grid: &Grid1D, mut g: Vec<f64>) -> Result<DensityField> {
    normalize_log(grid, &mut g);
    DensityField::new(ScalarField::new(*grid, g.iter().map(|v| v.exp()).collect())?)
}

/// Strong-barrier density `C exp(-2/hbar int sqrt(2m (U - E)) dx)`, the
/// integral running from the left edge.
pub fn wkb_density(u: &ScalarField, energy: f64, p: &PhysicalParams) -> Result<DensityField> {
    p.validate()?;
    let below: Vec<usize> = (0..u.values().len()).filter(|&i| !(u.values()[i] > energy)).collect();
    if !below.is_empty() {
        return Err(Error::regime("WKB density needs U > E on the whole grid", below));
    }
    let k: Vec<f64> = u.values().iter().map(|v| (2.0 * p.mass * (v - energy)).sqrt()).collect();
    let g = cumulative(u.grid(), &k).into_iter().map(|s| -2.0 * s / p.hbar).collect();
    from_log(u.grid(), g)
}

/// Weak-potential density `C exp(4m/hbar^2 int int (U - E))`, both
/// integrals starting at zero on the left edge.
pub fn weak_potential_density(u: &ScalarField, energy: f64, p: &PhysicalParams) -> Result<DensityField> {
    p.validate()?;
    let above: Vec<usize> = (0..u.values().len()).filter(|&i| !(u.values()[i] < energy)).collect();
    if !above.is_empty() {
        return Err(Error::regime("weak-potential density needs U < E on the whole grid", above));
    }
    let c = 4.0 * p.mass / (p.hbar * p.hbar);
    let f: Vec<f64> = u.values().iter().map(|v| c * (v - energy)).collect();
    let once = cumulative(u.grid(), &f);
    from_log(u.grid(), cumulative(u.grid(), &once))
}
