//! Uniform 1-D grids, node-sampled fields and the Madelung/Bohm quantities
//! built on them.
//!
//! Node placement depends on the boundary kind. `Decay` and `Periodic` grids
//! put node `i` at `x0 + i dx`; `Reflecting` grids are cell-centred, node `i`
//! sits at `x0 + (i + 1/2) dx` and the walls are at `x0` and `x0 + n dx`.
//! With that convention the trapezoidal rule over the mirrored extension is
//! exactly the cell sum, so finite-volume mass and [`integrate`] agree.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::params::PhysicalParams;

/// Densities below this fraction of the peak are treated as vacuum when
/// evaluating the quantum potential.
pub const DENSITY_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Boundary {
    /// Mirror about walls half a cell outside the first and last nodes.
    Reflecting,
    /// Wrap around with period `n dx`.
    Periodic,
    /// Open boundary: exponential-tail continuation of densities, one-sided
    /// second-order stencils for derivatives.
    Decay,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflecting" => Ok(Boundary::Reflecting),
            "periodic" => Ok(Boundary::Periodic),
            "decay" => Ok(Boundary::Decay),
            other => Err(Error::Configuration(format!("unknown boundary `{other}`"))),
        }
    }
}

/// Which terms of the overdamped dynamics are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// External, quantum and thermal (entropic) terms.
    ThermoQuantum,
    /// Quantum potential suppressed.
    Classical,
    /// Thermal terms dropped (zero temperature).
    PureQuantum,
}

impl Mode {
    pub fn has_quantum(self) -> bool {
        !matches!(self, Mode::Classical)
    }

    pub fn has_thermal(self) -> bool {
        !matches!(self, Mode::PureQuantum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub x0: f64,
    pub dx: f64,
    pub n: usize,
    pub boundary: Boundary,
}

impl Grid1D {
    pub const MIN_NODES: usize = 8;

    pub fn new(x0: f64, dx: f64, n: usize, boundary: Boundary) -> Result<Self> {
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::Configuration(format!("grid spacing must be positive, got {dx}")));
        }
        if n < Self::MIN_NODES {
            return Err(Error::Configuration(format!("grid needs at least {} nodes, got {n}", Self::MIN_NODES)));
        }
        if !x0.is_finite() {
            return Err(Error::Configuration("grid origin must be finite".into()));
        }
        Ok(Self { x0, dx, n, boundary })
    }

    /// Grid covering `[a, b]`: end nodes on `a` and `b` for `Decay`, walls
    /// (or the period) at `a` and `b` otherwise.
    pub fn spanning(a: f64, b: f64, n: usize, boundary: Boundary) -> Result<Self> {
        if !(b > a) {
            return Err(Error::Configuration(format!("empty interval [{a}, {b}]")));
        }
        let cells = match boundary {
            Boundary::Decay => n.saturating_sub(1).max(1),
            Boundary::Periodic | Boundary::Reflecting => n,
        };
        Self::new(a, (b - a) / cells as f64, n, boundary)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        match self.boundary {
            Boundary::Reflecting => self.x0 + (i as f64 + 0.5) * self.dx,
            _ => self.x0 + i as f64 * self.dx,
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Length of the covered interval (the period for periodic grids).
    pub fn extent(&self) -> f64 {
        match self.boundary {
            Boundary::Decay => (self.n - 1) as f64 * self.dx,
            _ => self.n as f64 * self.dx,
        }
    }

    pub fn with_boundary(self, boundary: Boundary) -> Self {
        Self { boundary, ..self }
    }

    /// Trapezoid weights.
    pub(crate) fn weight(&self, i: usize) -> f64 {
        match self.boundary {
            Boundary::Decay if i == 0 || i + 1 == self.n => 0.5 * self.dx,
            _ => self.dx,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid1D,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n {
            return Err(Error::Configuration(format!("field has {} values for {} nodes", values.len(), grid.n)));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n).map(|i| f(grid.x(i))).collect();
        Self { grid, values }
    }

    pub fn constant(grid: Grid1D, c: f64) -> Self {
        Self { grid, values: vec![c; grid.n] }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn integrate(&self) -> f64 {
        integrate(self)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{:e},{:e}", self.grid.x(i), v)?;
        }
        Ok(())
    }
}

/// Trapezoidal rule over the grid (midpoint/cell sum for periodic and
/// reflecting grids).
pub fn integrate(f: &ScalarField) -> f64 {
    weighted_sum(&f.grid, &f.values)
}

pub(crate) fn weighted_sum(grid: &Grid1D, values: &[f64]) -> f64 {
    values.iter().enumerate().map(|(i, v)| grid.weight(i) * v).sum()
}

/// Second-order first derivative.
pub fn gradient(f: &ScalarField) -> ScalarField {
    ScalarField { grid: f.grid, values: first_difference(&f.values, &f.grid) }
}

/// Second-order second derivative.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    ScalarField { grid: f.grid, values: second_difference(&f.values, &f.grid) }
}

pub(crate) fn first_difference(v: &[f64], grid: &Grid1D) -> Vec<f64> {
    let n = v.len();
    let h = grid.dx;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
    }
    match grid.boundary {
        Boundary::Periodic => {
            out[0] = (v[1] - v[n - 1]) / (2.0 * h);
            out[n - 1] = (v[0] - v[n - 2]) / (2.0 * h);
        }
        Boundary::Reflecting => {
            out[0] = (v[1] - v[0]) / (2.0 * h);
            out[n - 1] = (v[n - 1] - v[n - 2]) / (2.0 * h);
        }
        Boundary::Decay => {
            out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
            out[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
        }
    }
    out
}

pub(crate) fn second_difference(v: &[f64], grid: &Grid1D) -> Vec<f64> {
    let n = v.len();
    let h2 = grid.dx * grid.dx;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / h2;
    }
    match grid.boundary {
        Boundary::Periodic => {
            out[0] = (v[1] - 2.0 * v[0] + v[n - 1]) / h2;
            out[n - 1] = (v[0] - 2.0 * v[n - 1] + v[n - 2]) / h2;
        }
        Boundary::Reflecting => {
            out[0] = (v[1] - v[0]) / h2;
            out[n - 1] = (v[n - 2] - v[n - 1]) / h2;
        }
        Boundary::Decay => {
            out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
            out[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
        }
    }
    out
}

/// Nonnegative field representing a probability density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    field: ScalarField,
    /// Accepted deviation of the total mass from 1.
    pub norm_tolerance: f64,
}

impl DensityField {
    pub const DEFAULT_NORM_TOLERANCE: f64 = 1e-8;

    /// Wraps nonnegative samples; does not normalize.
    pub fn new(field: ScalarField) -> Result<Self> {
        if let Some(i) = field.values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::DegenerateDensity(format!(
                "value {} at node {i} is negative or not finite",
                field.values[i]
            )));
        }
        Ok(Self { field, norm_tolerance: Self::DEFAULT_NORM_TOLERANCE })
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(ScalarField::from_fn(grid, f))
    }

    /// Samples `f` and normalizes.
    pub fn normalized_from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        normalize(&Self::from_fn(grid, f)?)
    }

    pub fn gaussian(grid: Grid1D, center: f64, variance: f64) -> Result<Self> {
        Self::normalized_from_fn(grid, |x| (-(x - center).powi(2) / (2.0 * variance)).exp())
    }

    pub(crate) fn from_values_unchecked(grid: Grid1D, values: Vec<f64>) -> Self {
        Self { field: ScalarField { grid, values }, norm_tolerance: Self::DEFAULT_NORM_TOLERANCE }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.field.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.field.values
    }

    pub fn as_field(&self) -> &ScalarField {
        &self.field
    }

    pub fn into_field(self) -> ScalarField {
        self.field
    }

    pub fn mass(&self) -> f64 {
        integrate(&self.field)
    }

    pub fn is_normalized(&self) -> bool {
        (self.mass() - 1.0).abs() <= self.norm_tolerance
    }

    pub fn peak(&self) -> f64 {
        self.field.values.iter().fold(0.0, |m: f64, v| m.max(*v))
    }

    pub fn mean(&self) -> f64 {
        let g = &self.field.grid;
        let first: f64 = self.field.values.iter().enumerate().map(|(i, v)| g.weight(i) * g.x(i) * v).sum();
        first / self.mass()
    }

    /// `int x^2 rho - (int x rho)^2`, relative to the current mass.
    pub fn variance(&self) -> f64 {
        let g = &self.field.grid;
        let mass = self.mass();
        let mu = self.mean();
        self.field.values.iter().enumerate().map(|(i, v)| g.weight(i) * (g.x(i) - mu).powi(2) * v).sum::<f64>() / mass
    }

    /// L1 distance to another density on the same grid.
    pub fn l1_distance(&self, other: &DensityField) -> f64 {
        let g = &self.field.grid;
        self.values().iter().zip(other.values()).enumerate().map(|(i, (a, b))| g.weight(i) * (a - b).abs()).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        self.field.write_csv(w)
    }
}

/// Divides by the integral; fails when the total is not positive.
pub fn normalize(rho: &DensityField) -> Result<DensityField> {
    let total = rho.mass();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::DegenerateDensity(format!("cannot normalize total mass {total}")));
    }
    Ok(DensityField { field: rho.field.map(|v| v / total), norm_tolerance: rho.norm_tolerance })
}

/// Bohm quantum potential `Q = -hbar^2 (sqrt rho)'' / (2 m sqrt rho)`.
///
/// Evaluated in the equivalent logarithmic form
/// `Q = -(hbar^2 / 8m) (2 L'' + L'^2)` with `L = ln rho` and central
/// differences, which is exact for Gaussians and stays well conditioned in
/// tails spanning hundreds of e-folds. See [`log_density`] for the treatment
/// of vacuum and of the grid ends.
pub fn quantum_potential(rho: &DensityField, mass: f64, hbar: f64) -> Result<ScalarField> {
    let grid = *rho.grid();
    let mut q = vec![0.0; grid.n];
    quantum_potential_into(rho.values(), &grid, hbar * hbar / (2.0 * mass), DENSITY_FLOOR, &mut q)?;
    Ok(ScalarField { grid, values: q })
}

/// `ln rho` with one ghost node on each side (`out[i + 1]` is node `i`).
///
/// Nodes below [`DENSITY_FLOOR`] times the peak are vacuum. There `L` is
/// continued from the nearest resolved edge by a Taylor polynomial built from
/// the last three resolved nodes, with slope and curvature clipped so the
/// continuation decreases away from the support. `Decay` ghosts use the same
/// continuation (quadratic extrapolation when the profile decays outward),
/// `Reflecting` ghosts mirror and `Periodic` ghosts wrap.
pub fn log_density(rho: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
    log_density_above(rho, grid, DENSITY_FLOOR)
}

/// [`log_density`] with vacuum below `floor * peak`.
pub(crate) fn log_density_above(rho: &[f64], grid: &Grid1D, floor: f64) -> Result<Vec<f64>> {
    let live = live_mask(rho, floor)?;
    Ok(log_density_masked(rho, grid, &live))
}

/// Nodes at or above `floor * peak`.
pub(crate) fn live_mask(rho: &[f64], floor: f64) -> Result<Vec<bool>> {
    let peak = rho.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::DegenerateDensity("density is identically zero".into()));
    }
    let floor = floor * peak;
    Ok(rho.iter().map(|&r| r >= floor).collect())
}

/// `ln rho` on the nodes of `live`, continued elsewhere; `live` must contain
/// at least one node. Live values that are not positive are treated as the
/// smallest positive double.
pub(crate) fn log_density_masked(rho: &[f64], grid: &Grid1D, live: &[bool]) -> Vec<f64> {
    let n = rho.len();
    let ln = |r: f64| r.max(f64::MIN_POSITIVE).ln();
    let mut l = vec![0.0; n + 2];
    for i in 0..n {
        if live[i] {
            l[i + 1] = ln(rho[i]);
        }
    }
    if live.iter().any(|v| !v) {
        // outward continuation from resolved edge `e` in direction `d`
        let continuation = |e: usize, d: isize| -> (f64, f64, f64) {
            let at = |k: isize| -> Option<f64> {
                let j = e as isize - d * k;
                (j >= 0 && (j as usize) < n && live[j as usize]).then(|| ln(rho[j as usize]))
            };
            let l0 = at(0).unwrap();
            let (slope, curv) = match (at(1), at(2)) {
                (Some(l1), Some(l2)) => (0.5 * (3.0 * l0 - 4.0 * l1 + l2), l0 - 2.0 * l1 + l2),
                (Some(l1), None) => (l0 - l1, 0.0),
                _ => (0.0, 0.0),
            };
            (l0, slope.min(0.0), curv.min(0.0))
        };
        let mut i = 0;
        while i < n {
            if live[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && !live[i] {
                i += 1;
            }
            let left = (start > 0).then(|| (start - 1, continuation(start - 1, 1)));
            let right = (i < n).then(|| (i, continuation(i, -1)));
            for k in start..i {
                let from = |edge: Option<(usize, (f64, f64, f64))>| {
                    edge.map(|(e, (l0, sl, c))| {
                        let m = (k as f64 - e as f64).abs();
                        l0 + m * sl + 0.5 * m * m * c
                    })
                };
                l[k + 1] = match (from(left), from(right)) {
                    (Some(a), Some(b)) => a.max(b),
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => unreachable!("a resolved node exists"),
                };
            }
        }
    }
    fill_log_ghosts(&mut l, grid.boundary);
    l
}

/// Sets `l[0]` and `l[n + 1]` around the node values `l[1..=n]`.
pub(crate) fn fill_log_ghosts(l: &mut [f64], boundary: Boundary) {
    let n = l.len() - 2;
    match boundary {
        Boundary::Periodic => {
            l[0] = l[n];
            l[n + 1] = l[1];
        }
        Boundary::Reflecting => {
            l[0] = l[1];
            l[n + 1] = l[n];
        }
        Boundary::Decay => {
            let ghost = |l0: f64, l1: f64, l2: f64| {
                let slope = (0.5 * (3.0 * l0 - 4.0 * l1 + l2)).min(0.0);
                let curv = (l0 - 2.0 * l1 + l2).min(0.0);
                l0 + slope + 0.5 * curv
            };
            l[0] = ghost(l[1], l[2], l[3]);
            l[n + 1] = ghost(l[n], l[n - 1], l[n - 2]);
        }
    }
}

/// `-coef (L''/2 + L'^2/4)` at the nodes of a ghosted log-density.
pub(crate) fn quantum_potential_from_log(l: &[f64], dx: f64, coef: f64, out: &mut [f64]) {
    let c = -0.25 * coef / (dx * dx);
    for (i, q) in out.iter_mut().enumerate() {
        let (a, b, d) = (l[i], l[i + 1], l[i + 2]);
        let slope = 0.5 * (d - a);
        *q = c * (2.0 * (d - 2.0 * b + a) + slope * slope);
    }
}

/// Writes `-coef * (sqrt rho)'' / sqrt rho` into `out`, treating values
/// below `floor * peak` as vacuum.
pub(crate) fn quantum_potential_into(rho: &[f64], grid: &Grid1D, coef: f64, floor: f64, out: &mut [f64]) -> Result<()> {
    let l = log_density_above(rho, grid, floor)?;
    quantum_potential_from_log(&l, grid.dx, coef, out);
    Ok(())
}

/// `d/dx P_Q - rho dQ/dx` with `P_Q = -(hbar^2 / 4m) rho (ln rho)''`.
///
/// Vanishes identically in the continuum; a diagnostic of discretization
/// error.
pub fn gibbs_duhem_residual(rho: &DensityField, mass: f64, hbar: f64) -> Result<ScalarField> {
    let q = quantum_potential(rho, mass, hbar)?;
    let grid = *rho.grid();
    let l = log_density(rho.values(), &grid)?;
    let h2 = grid.dx * grid.dx;
    let curv: Vec<f64> = (0..grid.n).map(|i| (l[i] - 2.0 * l[i + 1] + l[i + 2]) / h2).collect();
    let coef = hbar * hbar / (4.0 * mass);
    let pressure: Vec<f64> = rho.values().iter().zip(&curv).map(|(r, c)| -coef * r * c).collect();
    let dp = first_difference(&pressure, &grid);
    let dq = first_difference(q.values(), &grid);
    let values = dp.iter().zip(&dq).zip(rho.values()).map(|((p, qd), r)| p - r * qd).collect();
    Ok(ScalarField { grid, values })
}

/// Overdamped velocity `V = -d/dx (U + Q + kB T ln rho) / b`.
pub fn drift_velocity(
    rho: &DensityField,
    potential: &ScalarField,
    p: &PhysicalParams,
    mode: Mode,
) -> Result<ScalarField> {
    let grid = *rho.grid();
    if potential.grid().n != grid.n {
        return Err(Error::Configuration("potential and density grids differ".into()));
    }
    let peak = rho.peak();
    if peak <= 0.0 {
        return Err(Error::DegenerateDensity("density is identically zero".into()));
    }
    let mut total = potential.values().to_vec();
    if mode.has_quantum() {
        let q = quantum_potential(rho, p.mass, p.hbar)?;
        total.iter_mut().zip(q.values()).for_each(|(t, q)| *t += q);
    }
    let kt = p.thermal_energy();
    if mode.has_thermal() && kt > 0.0 {
        let floor = DENSITY_FLOOR * peak;
        total.iter_mut().zip(rho.values()).for_each(|(t, r)| *t += kt * r.max(floor).ln());
    }
    let grad = first_difference(&total, &grid);
    Ok(ScalarField { grid, values: grad.into_iter().map(|g| -g / p.friction).collect() })
}
