//! Fixed workloads shared by the benchmarks, so that numbers stay comparable
//! across changes to the solvers.

use tqdiff_core::barometric::{BarometricScenario, DEFAULT_ZETA_MAX};
use tqdiff_core::params::PlasmaConstants;
use tqdiff_core::plasma::PlasmaParams;
use tqdiff_core::smoluchowski::SimState;
use tqdiff_core::tunneling::TunnelingScenario;
use tqdiff_core::{Boundary, DensityField, Grid1D, Mode, PhysicalParams, ScalarField};

/// `m = b = T = 1`, `hbar = 2`: thermal length and diffusion constant 1.
pub fn unit_params() -> PhysicalParams {
    PhysicalParams::reduced(1.0, 1.0, 1.0, 2.0).expect("valid constants")
}

/// Gaussian of variance 0.25 in a harmonic well on `n` nodes over [-8, 8].
pub fn harmonic_state(n: usize, mode: Mode) -> SimState {
    let g = Grid1D::spanning(-8.0, 8.0, n, Boundary::Decay).expect("valid grid");
    let u = ScalarField::from_fn(g, |x| 0.5 * x * x);
    let rho = DensityField::gaussian(g, 1.0, 0.25).expect("valid density");
    SimState::new(rho, u, unit_params(), mode).expect("consistent state")
}

/// Anharmonic well used for the equilibrium solver.
pub fn anharmonic_potential(n: usize) -> ScalarField {
    let g = Grid1D::spanning(-8.0, 8.0, n, Boundary::Decay).expect("valid grid");
    ScalarField::from_fn(g, |x| 0.5 * x * x + 0.05 * x.powi(4))
}

/// Smooth barrier below the energy on a grid coarse enough for the Picard
/// iteration (`dx = 2 hbar`).
pub fn tunneling_bump(hbar: f64) -> TunnelingScenario {
    let n = (12.0 / (2.0 * hbar)).round() as usize + 1;
    let g = Grid1D::spanning(-6.0, 6.0, n, Boundary::Decay).expect("valid grid");
    let u = ScalarField::from_fn(g, |x| 0.4 * (-x * x / 2.0).exp());
    let p = PhysicalParams::reduced(1.0, 1.0, 0.0, hbar).expect("valid constants");
    TunnelingScenario::new(u, 1.0, p).expect("valid scenario")
}

pub fn unit_plasma() -> PlasmaParams {
    let p = unit_params()
        .with_plasma(PlasmaConstants { permittivity: 16.0, charge: 1.0, density: 1.0 })
        .expect("valid plasma");
    PlasmaParams::new(p).expect("plasma constants set")
}

pub fn column(kappa: f64, n: usize) -> BarometricScenario {
    let grid = BarometricScenario::column(DEFAULT_ZETA_MAX, n).expect("valid column");
    BarometricScenario::from_kappa(kappa, grid).expect("valid kappa")
}
