//! Sedimentation of a quantum Brownian particle in uniform gravity.
//!
//! In the reduced height `zeta = alpha_T z` and time `tau = D alpha_T^2 t`,
//! with `alpha_T = m g / kB T`, the density obeys
//!
//! ```text
//! d_tau rho = d_zeta { rho d_zeta [zeta - 2 kappa (sqrt rho)'' / sqrt rho] + d_zeta rho }
//! ```
//!
//! where `kappa = (alpha_T lambda_T)^2 = (T_g / T)^3`. The classical
//! barometric law `e^{-zeta}` has a constant quantum potential, so away from
//! the ground it is stationary for every `kappa`.
//!
//! A small correction `w` on top of `e^{-zeta}` follows a linear equation
//! with advection, diffusion and third/fourth-order quantum terms. Two sets of
//! quantum coefficients are available, see [`CorrectionOperator`].

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::fields::{Boundary, DensityField, Grid1D, Mode, ScalarField};
use crate::linalg::BandedMatrix;
use crate::params::{gravity_temperature, PhysicalParams};
use crate::smoluchowski::{evolve, SimState, Snapshot, StepControl, Trajectory};

/// Default height of the column in units of the barometric height.
pub const DEFAULT_ZETA_MAX: f64 = 30.0;

/// `T_g` from `alpha_T lambda_T = 1`, i.e. `(kB T_g)^3 = m g^2 hbar^2 / 4`.
pub fn characteristic_temperature(mass: f64, g: f64, hbar: f64, kb: f64) -> Result<f64> {
    for (name, v) in [("mass", mass), ("gravity", g), ("hbar", hbar), ("kb", kb)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::ParameterDomain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(gravity_temperature(mass, g, hbar, kb))
}

/// Conversion between physical `(z, t)` and reduced `(zeta, tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedVariables {
    /// Inverse barometric height `m g / kB T`.
    pub alpha: f64,
    /// `kB T / b`.
    pub diffusion: f64,
}

impl ReducedVariables {
    /// Needs gravity and `T > 0`.
    pub fn new(p: &PhysicalParams) -> Result<Self> {
        p.validate()?;
        let g = p.gravity.ok_or_else(|| Error::ParameterDomain("barometric scales need gravity".into()))?;
        let kt = p.thermal_energy();
        if kt <= 0.0 {
            return Err(Error::ParameterDomain("barometric scales need T > 0".into()));
        }
        Ok(Self { alpha: p.mass * g / kt, diffusion: kt / p.friction })
    }

    pub fn to_reduced(&self, z: f64, t: f64) -> (f64, f64) {
        (self.alpha * z, self.diffusion * self.alpha * self.alpha * t)
    }

    pub fn to_physical(&self, zeta: f64, tau: f64) -> (f64, f64) {
        (zeta / self.alpha, tau / (self.diffusion * self.alpha * self.alpha))
    }
}

/// A column of height `zeta_max` above impenetrable ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarometricScenario {
    pub temperature: f64,
    pub t_g: f64,
    /// `(T_g / T)^3`.
    pub kappa: f64,
    pub grid: Grid1D,
}

impl BarometricScenario {
    pub fn new(temperature: f64, t_g: f64, grid: Grid1D) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::ParameterDomain(format!("temperature must be positive, got {temperature}")));
        }
        if !(t_g.is_finite() && t_g >= 0.0) {
            return Err(Error::ParameterDomain(format!("T_g must be non-negative, got {t_g}")));
        }
        let mut sc = Self::from_kappa((t_g / temperature).powi(3), grid)?;
        sc.temperature = temperature;
        sc.t_g = t_g;
        Ok(sc)
    }

    /// Scenario in reduced form only; `temperature` is set to one and
    /// `t_g` to `kappa^(1/3)`.
    pub fn from_kappa(kappa: f64, grid: Grid1D) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::ParameterDomain(format!("kappa must be non-negative, got {kappa}")));
        }
        if grid.boundary != Boundary::Reflecting || grid.x0 != 0.0 {
            return Err(Error::Configuration("the column needs a reflecting grid starting at zeta = 0".into()));
        }
        Ok(Self { temperature: 1.0, t_g: kappa.cbrt(), kappa, grid })
    }

    /// Physical particle in gravity; `T_g` computed from the constants.
    pub fn from_params(p: &PhysicalParams, grid: Grid1D) -> Result<Self> {
        ReducedVariables::new(p)?;
        let g = p.gravity.expect("checked by ReducedVariables::new");
        let t_g = characteristic_temperature(p.mass, g, p.hbar, p.kb)?;
        Self::new(p.temperature, t_g, grid)
    }

    /// `n` cells on `[0, zeta_max]`.
    pub fn column(zeta_max: f64, n: usize) -> Result<Grid1D> {
        Grid1D::spanning(0.0, zeta_max, n, Boundary::Reflecting)
    }

    /// Reduced parameters with `D = kB T = m = b = 1` and
    /// `hbar^2 / 2m = 2 kappa`.
    pub fn reduced_params(&self) -> PhysicalParams {
        let hbar = if self.kappa > 0.0 { 2.0 * self.kappa.sqrt() } else { 1.0 };
        PhysicalParams::reduced(1.0, 1.0, 1.0, hbar).expect("reduced constants are valid")
    }

    pub fn mode(&self) -> Mode {
        if self.kappa > 0.0 {
            Mode::ThermoQuantum
        } else {
            Mode::Classical
        }
    }

    /// The gravitational potential `zeta` in units of `kB T`.
    pub fn potential(&self) -> ScalarField {
        ScalarField::from_fn(self.grid, |z| z)
    }

    /// Normalized `e^{-zeta}` on the column.
    pub fn classical_density(&self) -> Result<DensityField> {
        DensityField::normalized_from_fn(self.grid, |z| (-z).exp())
    }

    pub fn state(&self, rho0: &DensityField) -> Result<SimState> {
        if rho0.grid() != &self.grid {
            return Err(Error::Configuration("initial density is not on the column grid".into()));
        }
        if (rho0.mass() - 1.0).abs() > 1e-6 {
            return Err(Error::Configuration(format!("initial density must be normalized, mass is {}", rho0.mass())));
        }
        SimState::new(rho0.clone(), self.potential(), self.reduced_params(), self.mode())
    }
}

/// Evolves the full nonlinear column equation to `tau_end`.
pub fn evolve_barometric(
    sc: &BarometricScenario,
    rho0: &DensityField,
    tau_end: f64,
    ctrl: &StepControl,
) -> Result<Trajectory> {
    evolve(&sc.state(rho0)?, tau_end, ctrl)
}

/// `tau,zeta,rho`
pub fn write_density_csv<W: Write>(snapshots: &[Snapshot], mut w: W) -> io::Result<()> {
    writeln!(w, "tau,zeta,rho")?;
    for s in snapshots {
        let g = s.rho.grid();
        for (i, r) in s.rho.values().iter().enumerate() {
            writeln!(w, "{:e},{:e},{:e}", s.t, g.x(i), r)?;
        }
    }
    Ok(())
}

/// Quantum part of the linear correction equation,
/// `-kappa (a4 w'''' + a3 w''' + a2 w'')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrectionOperator {
    /// `(a4, a3, a2) = (1, 3/2, 1/2)`, the coefficients as usually quoted.
    #[default]
    Published,
    /// `(a4, a3, a2) = (1, 2, 1)`, obtained by linearizing the column
    /// equation about `e^{-zeta}` directly.
    Linearized,
}

impl CorrectionOperator {
    pub fn coefficients(self) -> [f64; 3] {
        match self {
            CorrectionOperator::Published => [1.0, 1.5, 0.5],
            CorrectionOperator::Linearized => [1.0, 2.0, 1.0],
        }
    }

    /// Decay rate of the amplitude of a mode `e^{i k zeta}`: minus the real
    /// part of the operator symbol.
    pub fn decay_rate(self, k: f64, kappa: f64) -> f64 {
        let [a4, _, a2] = self.coefficients();
        k * k + kappa * (a4 * k.powi(4) - a2 * k * k)
    }
}

impl std::str::FromStr for CorrectionOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "published" => Ok(CorrectionOperator::Published),
            "linearized" => Ok(CorrectionOperator::Linearized),
            other => Err(Error::Configuration(format!("unknown correction operator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionControl {
    pub dt: f64,
    pub output_interval: f64,
    pub operator: CorrectionOperator,
}

impl CorrectionControl {
    pub fn new(dt: f64) -> Self {
        Self { dt, output_interval: f64::INFINITY, operator: CorrectionOperator::default() }
    }

    pub fn with_output_interval(self, output_interval: f64) -> Self {
        Self { output_interval, ..self }
    }

    pub fn with_operator(self, operator: CorrectionOperator) -> Self {
        Self { operator, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Configuration(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.output_interval > 0.0) {
            return Err(Error::Configuration("output interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSnapshot {
    pub tau: f64,
    pub w: ScalarField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionRun {
    pub snapshots: Vec<CorrectionSnapshot>,
    pub steps: usize,
}

impl CorrectionRun {
    pub fn last(&self) -> &CorrectionSnapshot {
        self.snapshots.last().expect("a run has at least its initial snapshot")
    }

    /// `tau,zeta,w`
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "tau,zeta,w")?;
        for s in &self.snapshots {
            let g = s.w.grid();
            for (i, v) in s.w.values().iter().enumerate() {
                writeln!(w, "{:e},{:e},{:e}", s.tau, g.x(i), v)?;
            }
        }
        Ok(())
    }
}

/// Five-point centred stencils of `w' + w'' - kappa (a4 w'''' + a3 w''' + a2 w'')`
/// at an interior node, as weights of `w[i-2..=i+2]`.
fn stencil(dx: f64, kappa: f64, op: CorrectionOperator) -> [f64; 5] {
    let [a4, a3, a2] = op.coefficients();
    let d1 = [0.0, -0.5, 0.0, 0.5, 0.0].map(|c| c / dx);
    let d2 = [0.0, 1.0, -2.0, 1.0, 0.0].map(|c| c / (dx * dx));
    let d3 = [-0.5, 1.0, 0.0, -1.0, 0.5].map(|c| c / dx.powi(3));
    let d4 = [1.0, -4.0, 6.0, -4.0, 1.0].map(|c| c / dx.powi(4));
    std::array::from_fn(|k| d1[k] + d2[k] - kappa * (a4 * d4[k] + a3 * d3[k] + a2 * d2[k]))
}

/// Column index of neighbour `i + k - 2` with the odd reflection that keeps
/// `w = 0` on the end nodes, and the sign it picks up.
fn reflect(i: usize, k: usize, n: usize) -> (usize, f64) {
    let j = i as isize + k as isize - 2;
    if j < 0 {
        ((-j) as usize, -1.0)
    } else if j as usize >= n {
        (2 * (n - 1) - j as usize, -1.0)
    } else {
        (j as usize, 1.0)
    }
}

/// Right-hand side of the correction equation; zero on the end nodes.
pub fn correction_rhs(sc: &BarometricScenario, w: &[f64], op: CorrectionOperator) -> Vec<f64> {
    let n = w.len();
    let st = stencil(sc.grid.dx, sc.kappa, op);
    let mut out = vec![0.0; n];
    for i in 1..n.saturating_sub(1) {
        out[i] = (0..5)
            .map(|k| {
                let (j, s) = reflect(i, k, n);
                s * st[k] * w[j]
            })
            .sum();
    }
    out
}

/// Evolves the linear correction with backward Euler steps of `ctrl.dt`.
///
/// `w` is held at zero on the first and last nodes.
pub fn evolve_linear_correction(
    sc: &BarometricScenario,
    w0: &ScalarField,
    tau_end: f64,
    ctrl: &CorrectionControl,
) -> Result<CorrectionRun> {
    ctrl.validate()?;
    if w0.grid() != &sc.grid {
        return Err(Error::Configuration("correction is not on the column grid".into()));
    }
    if !(tau_end > 0.0) {
        return Err(Error::Domain(format!("tau_end must be positive, got {tau_end}")));
    }
    let n = sc.grid.n;
    let factor = |dt: f64| -> Result<_> {
        let st = stencil(sc.grid.dx, sc.kappa, ctrl.operator);
        let mut a = BandedMatrix::zeros(n, 2, 2);
        a.set(0, 0, 1.0);
        a.set(n - 1, n - 1, 1.0);
        for i in 1..n - 1 {
            a.add(i, i, 1.0);
            for (k, &c) in st.iter().enumerate() {
                let (j, s) = reflect(i, k, n);
                a.add(i, j, -dt * s * c);
            }
        }
        a.factor().map_err(|e| Error::Numerical(format!("correction step matrix: {e}")))
    };

    let mut w = w0.values().to_vec();
    w[0] = 0.0;
    w[n - 1] = 0.0;
    let mut tau = 0.0;
    let mut snapshots = vec![CorrectionSnapshot { tau, w: ScalarField::new(sc.grid, w.clone())? }];
    let full = factor(ctrl.dt)?;
    let mut partial: Option<(f64, _)> = None;
    let mut next_out = ctrl.output_interval.min(tau_end);
    let time_eps = 1e-12 * tau_end.max(1.0);
    let mut steps = 0;
    while tau < tau_end - time_eps {
        let h = ctrl.dt.min(next_out - tau);
        if h < ctrl.dt * (1.0 - 1e-12) {
            if partial.as_ref().is_none_or(|(dt, _)| (dt - h).abs() > 1e-15 * h) {
                partial = Some((h, factor(h)?));
            }
            partial.as_ref().unwrap().1.solve_in_place(&mut w);
        } else {
            full.solve_in_place(&mut w);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("correction blew up at tau = {tau}")));
        }
        tau += h;
        steps += 1;
        if tau >= next_out - time_eps {
            tau = next_out;
            snapshots.push(CorrectionSnapshot { tau, w: ScalarField::new(sc.grid, w.clone())? });
            next_out = (next_out + ctrl.output_interval).min(tau_end);
        }
    }
    Ok(CorrectionRun { snapshots, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::constants;
    use approx::assert_relative_eq;

    fn column(kappa: f64, n: usize) -> BarometricScenario {
        BarometricScenario::from_kappa(kappa, BarometricScenario::column(DEFAULT_ZETA_MAX, n).unwrap()).unwrap()
    }

    #[test]
    fn electron_characteristic_temperature() {
        let t_g = characteristic_temperature(
            constants::ELECTRON_MASS,
            constants::STANDARD_GRAVITY,
            constants::HBAR,
            constants::KB,
        )
        .unwrap();
        assert!((t_g / 0.45e-9 - 1.0).abs() < 0.02, "{t_g}");
    }

    #[test]
    fn temperature_scales_as_cube_root_of_mass() {
        let t = |m| characteristic_temperature(m, 9.81, constants::HBAR, constants::KB).unwrap();
        assert_relative_eq!(t(8.0e-27) / t(1.0e-27), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn kappa_is_unity_at_the_characteristic_temperature() {
        let p = PhysicalParams::si(constants::PROTON_MASS, 1e-12, 1.0)
            .unwrap()
            .with_gravity(constants::STANDARD_GRAVITY)
            .unwrap();
        let t_g = characteristic_temperature(p.mass, 9.806_65, p.hbar, p.kb).unwrap();
        let at = p.with_temperature(t_g).unwrap();
        let rv = ReducedVariables::new(&at).unwrap();
        let lambda = at.hbar / (2.0 * (at.mass * at.thermal_energy()).sqrt());
        assert_relative_eq!(rv.alpha * lambda, 1.0, max_relative = 1e-12);
        let sc = BarometricScenario::from_params(&at, BarometricScenario::column(30.0, 64).unwrap()).unwrap();
        assert_relative_eq!(sc.kappa, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn reduced_round_trip() {
        let p = PhysicalParams::si(constants::ELECTRON_MASS, 1e-20, 4.2).unwrap().with_gravity(9.81).unwrap();
        let rv = ReducedVariables::new(&p).unwrap();
        for (z, t) in [(0.0, 0.0), (1e-3, 2.0), (7.5, 1e-9), (1e4, 1e6)] {
            let (zeta, tau) = rv.to_reduced(z, t);
            let (z2, t2) = rv.to_physical(zeta, tau);
            assert!((z2 - z).abs() <= 1e-12 * z.abs().max(1e-300));
            assert!((t2 - t).abs() <= 1e-12 * t.abs().max(1e-300));
        }
    }

    #[test]
    fn quantum_coefficient_matches_kappa() {
        let sc = column(0.3, 64);
        let p = sc.reduced_params();
        assert_relative_eq!(p.hbar * p.hbar / (2.0 * p.mass), 2.0 * sc.kappa, max_relative = 1e-14);
        assert_eq!(column(0.0, 64).mode(), Mode::Classical);
    }

    #[test]
    fn column_must_start_on_reflecting_ground() {
        let decay = Grid1D::spanning(0.0, 30.0, 64, Boundary::Decay).unwrap();
        assert!(BarometricScenario::from_kappa(0.1, decay).is_err());
        let shifted = Grid1D::spanning(1.0, 30.0, 64, Boundary::Reflecting).unwrap();
        assert!(BarometricScenario::from_kappa(0.1, shifted).is_err());
        assert!(BarometricScenario::from_kappa(-1.0, BarometricScenario::column(30.0, 64).unwrap()).is_err());
    }

    #[test]
    fn quantum_terms_vanish_without_kappa() {
        let sc = column(0.0, 200);
        let w: Vec<f64> = sc.grid.coords().iter().map(|z| (z * 1.3).sin() * (-0.1 * z).exp() + z.cos()).collect();
        let dx = sc.grid.dx;
        for op in [CorrectionOperator::Published, CorrectionOperator::Linearized] {
            let r = correction_rhs(&sc, &w, op);
            for i in 2..w.len() - 2 {
                let ad = (w[i + 1] - w[i - 1]) / (2.0 * dx) + (w[i + 1] - 2.0 * w[i] + w[i - 1]) / (dx * dx);
                assert!((r[i] - ad).abs() <= 1e-12 * ad.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_stays_zero() {
        let sc = column(0.5, 300);
        let w0 = ScalarField::constant(sc.grid, 0.0);
        let run = evolve_linear_correction(&sc, &w0, 2.0, &CorrectionControl::new(0.01)).unwrap();
        assert!(run.last().w.values().iter().all(|&v| v == 0.0));
        assert_relative_eq!(run.last().tau, 2.0);
    }

    #[test]
    fn classical_pulse_drifts_to_the_ground() {
        let sc = column(0.0, 1200);
        let w0 = ScalarField::from_fn(sc.grid, |z| (-(z - 20.0).powi(2) / 2.0).exp());
        let run = evolve_linear_correction(&sc, &w0, 5.0, &CorrectionControl::new(1e-3)).unwrap();
        let centroid = |f: &ScalarField| {
            let c = f.grid().coords();
            let m: f64 = f.values().iter().sum();
            f.values().iter().zip(&c).map(|(v, z)| v * z).sum::<f64>() / m
        };
        let speed = (centroid(&w0) - centroid(&run.last().w)) / 5.0;
        assert!((speed - 1.0).abs() < 0.02, "speed {speed}");
    }

    #[test]
    fn output_times_are_hit_exactly() {
        let sc = column(0.1, 100);
        let w0 = ScalarField::from_fn(sc.grid, |z| (-(z - 10.0).powi(2)).exp());
        let ctrl = CorrectionControl::new(0.03).with_output_interval(0.25);
        let run = evolve_linear_correction(&sc, &w0, 1.0, &ctrl).unwrap();
        let taus: Vec<f64> = run.snapshots.iter().map(|s| s.tau).collect();
        assert_eq!(taus, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn classical_column_is_stationary() {
        let sc = column(0.0, 300);
        let rho0 = sc.classical_density().unwrap();
        let ctrl = StepControl::explicit(1e-3);
        let tr = evolve_barometric(&sc, &rho0, 1.0, &ctrl).unwrap();
        assert!(tr.steps >= 1000);
        let end = &tr.final_state.rho;
        let dev = end.values().iter().zip(rho0.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6, "{dev:e}");
    }

    #[test]
    fn unnormalized_start_rejected() {
        let sc = column(0.0, 64);
        let rho = DensityField::from_fn(sc.grid, |z| 2.0 * (-z).exp()).unwrap();
        assert!(sc.state(&rho).is_err());
    }

    #[test]
    fn csv_headers() {
        let sc = column(0.1, 16);
        let run =
            evolve_linear_correction(&sc, &ScalarField::constant(sc.grid, 0.0), 0.1, &CorrectionControl::new(0.1))
                .unwrap();
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("tau,zeta,w\n"));
    }
}
