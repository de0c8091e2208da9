//! Linearized quantum Smoluchowski-Poisson dynamics of electrons in a
//! jellium background.
//!
//! Around the uniform density `rho0` the density perturbation relaxes mode by
//! mode: a Fourier component with wave number `q` decays as
//! `exp(-D_q q^2 t)` with the effective diffusion coefficient
//!
//! ```text
//! D_q = D (1 / (lambda_D^2 q^2) + 1 + lambda_T^2 q^2)
//! ```
//!
//! Screening dominates at long wavelengths, quantum spreading at short ones,
//! and `D_q` has its minimum `D (1 + 2 lambda_T / lambda_D) = (kB T + hbar
//! omega0) / b` at `q^2 = 1 / (lambda_D lambda_T)`.
//!
//! Everything here is exact in time: no stepping is involved.
//!
//! The uniform component is kept apart from the `q > 0` modes. It is stored as
//! the fraction `rho_bar / rho0` of the background that the electrons fill,
//! and relaxes to one with rate `D / lambda_D^2`. Starting from zero at
//! `t = 0` gives the familiar `1 - exp(-D t / lambda_D^2)`.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fields::{Boundary, Grid1D, ScalarField};
use crate::params::{derive_scales, DerivedScales, PhysicalParams, PlasmaConstants};

/// Relative tolerance for the `D_min` identity and for deciding that a wave
/// number is a harmonic of the grid period.
const IDENTITY_TOLERANCE: f64 = 1e-10;
const COMMENSURATE_TOLERANCE: f64 = 1e-9;

/// Physical parameters of a plasma with both length scales defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasmaParams {
    pub p: PhysicalParams,
    pub scales: DerivedScales,
}

impl PlasmaParams {
    /// Needs plasma constants and `T > 0`.
    pub fn new(p: PhysicalParams) -> Result<Self> {
        if p.plasma.is_none() {
            return Err(Error::ParameterDomain("plasma constants are missing".into()));
        }
        let scales = derive_scales(&p)?;
        scales
            .thermal_length()
            .map_err(|_| Error::ParameterDomain("plasma relaxation needs T > 0 (thermal length undefined)".into()))?;
        scales
            .debye_length()
            .map_err(|_| Error::ParameterDomain("plasma relaxation needs T > 0 (Debye length undefined)".into()))?;
        Ok(Self { p, scales })
    }

    pub fn diffusion(&self) -> f64 {
        self.scales.diffusion
    }

    pub fn debye_length(&self) -> f64 {
        self.scales.debye_length.expect("checked in PlasmaParams::new")
    }

    pub fn thermal_length(&self) -> f64 {
        self.scales.thermal_length.expect("checked in PlasmaParams::new")
    }

    pub fn plasma_frequency(&self) -> f64 {
        self.scales.plasma_frequency.expect("checked in PlasmaParams::new")
    }

    pub fn constants(&self) -> PlasmaConstants {
        self.p.plasma.expect("checked in PlasmaParams::new")
    }

    /// Relaxation rate `D / lambda_D^2` of the uniform component.
    pub fn background_rate(&self) -> f64 {
        let ld = self.debye_length();
        self.diffusion() / (ld * ld)
    }
}

fn check_wavenumber(q: f64) -> Result<()> {
    if q.is_finite() && q > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("wave number must be positive, got {q}")))
    }
}

/// `D_q = D (1/(lambda_D^2 q^2) + 1 + lambda_T^2 q^2)`.
pub fn effective_diffusion(q: f64, pp: &PlasmaParams) -> Result<f64> {
    check_wavenumber(q)?;
    let (ld, lt) = (pp.debye_length(), pp.thermal_length());
    let q2 = q * q;
    Ok(pp.diffusion() * (1.0 / (ld * ld * q2) + 1.0 + lt * lt * q2))
}

/// Derivative of `D_q` with respect to `q^2`.
pub fn effective_diffusion_slope(q: f64, pp: &PlasmaParams) -> Result<f64> {
    check_wavenumber(q)?;
    let (ld, lt) = (pp.debye_length(), pp.thermal_length());
    let q2 = q * q;
    Ok(pp.diffusion() * (lt * lt - 1.0 / (ld * ld * q2 * q2)))
}

/// Decay rate `D_q q^2` of the mode `q`.
pub fn mode_rate(q: f64, pp: &PlasmaParams) -> Result<f64> {
    Ok(effective_diffusion(q, pp)? * q * q)
}

/// Location and value of the minimum of [`effective_diffusion`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DqMinimum {
    pub q_star: f64,
    /// `D (1 + 2 lambda_T / lambda_D)`.
    pub d_min: f64,
    /// The same minimum written as `(kB T + hbar omega0) / b`.
    pub d_min_energy: f64,
}

impl DqMinimum {
    /// Relative mismatch between the two forms of the minimum.
    pub fn identity_residual(&self) -> f64 {
        (self.d_min - self.d_min_energy).abs() / self.d_min_energy
    }
}

pub fn dq_minimum(pp: &PlasmaParams) -> DqMinimum {
    let (ld, lt) = (pp.debye_length(), pp.thermal_length());
    let p = &pp.p;
    let m = DqMinimum {
        q_star: 1.0 / (ld * lt).sqrt(),
        d_min: pp.diffusion() * (1.0 + 2.0 * lt / ld),
        d_min_energy: (p.thermal_energy() + p.hbar * pp.plasma_frequency()) / p.friction,
    };
    debug_assert!(m.identity_residual() <= IDENTITY_TOLERANCE, "D_min identity off by {:e}", m.identity_residual());
    m
}

/// Fourier representation of the density perturbation `delta rho`.
///
/// The mode with wave number `q` contributes `Re[a_q exp(i q x)]` to the
/// real-space profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    q: Vec<f64>,
    amplitudes: Vec<Complex64>,
    /// Fraction `rho_bar / rho0` of the background filled by the uniform
    /// electron density.
    pub zero_mode: f64,
    pub t: f64,
}

impl SpectralState {
    /// State at `t = 0` with the background already filled (`zero_mode = 1`).
    pub fn new(q: Vec<f64>, amplitudes: Vec<Complex64>) -> Result<Self> {
        if q.len() != amplitudes.len() {
            return Err(Error::Configuration(format!("{} wave numbers but {} amplitudes", q.len(), amplitudes.len())));
        }
        for &qi in &q {
            check_wavenumber(qi)?;
        }
        if q.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Configuration("wave numbers must be strictly increasing".into()));
        }
        if amplitudes.iter().any(|a| !(a.re.is_finite() && a.im.is_finite())) {
            return Err(Error::Configuration("mode amplitudes must be finite".into()));
        }
        Ok(Self { q, amplitudes, zero_mode: 1.0, t: 0.0 })
    }

    /// Same modes for a real spectrum.
    pub fn from_real(q: Vec<f64>, amplitudes: &[f64]) -> Result<Self> {
        Self::new(q, amplitudes.iter().map(|&a| Complex64::new(a, 0.0)).collect())
    }

    pub fn with_zero_mode(mut self, zero_mode: f64) -> Result<Self> {
        if !zero_mode.is_finite() {
            return Err(Error::Configuration("zero mode must be finite".into()));
        }
        self.zero_mode = zero_mode;
        Ok(self)
    }

    pub fn at_time(mut self, t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::Configuration("time must be finite".into()));
        }
        self.t = t;
        Ok(self)
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Uniform part of `delta rho`, `rho0 (zero_mode - 1)`.
    pub fn uniform_offset(&self, pp: &PlasmaParams) -> f64 {
        pp.constants().density * (self.zero_mode - 1.0)
    }

    /// `q,re_amp,im_amp,t`
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "q,re_amp,im_amp,t")?;
        for (q, a) in self.q.iter().zip(&self.amplitudes) {
            writeln!(w, "{q:e},{:e},{:e},{:e}", a.re, a.im, self.t)?;
        }
        Ok(())
    }
}

/// Advances every mode exactly to time `t`.
pub fn evolve_spectrum(st: &SpectralState, pp: &PlasmaParams, t: f64) -> Result<SpectralState> {
    let dt = t - st.t;
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("cannot evolve backwards from t = {} to {t}", st.t)));
    }
    let amplitudes =
        st.q.iter()
            .zip(&st.amplitudes)
            .map(|(&q, &a)| Ok(a * (-mode_rate(q, pp)? * dt).exp()))
            .collect::<Result<Vec<_>>>()?;
    let zero_mode = 1.0 - (1.0 - st.zero_mode) * (-pp.background_rate() * dt).exp();
    Ok(SpectralState { q: st.q.clone(), amplitudes, zero_mode, t })
}

/// Fourier amplitudes of the electric potential of a density perturbation.
///
/// The uniform component has no potential (it is fixed only up to a
/// constant), so there is no zero mode here.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSpectrum {
    pub q: Vec<f64>,
    pub amplitudes: Vec<Complex64>,
    pub t: f64,
}

/// Poisson potential of one mode, `phi_q = -e delta_rho_q / (eps q^2)`.
pub fn potential_mode(q: f64, delta_rho: Complex64, pp: &PlasmaParams) -> Result<Complex64> {
    if q == 0.0 {
        return Err(Error::Domain("the Poisson potential of the uniform mode is undefined".into()));
    }
    check_wavenumber(q)?;
    let c = pp.constants();
    Ok(-delta_rho * (c.charge / (c.permittivity * q * q)))
}

pub fn potential_from_density(st: &SpectralState, pp: &PlasmaParams) -> Result<PotentialSpectrum> {
    let amplitudes =
        st.q.iter().zip(&st.amplitudes).map(|(&q, &a)| potential_mode(q, a, pp)).collect::<Result<Vec<_>>>()?;
    Ok(PotentialSpectrum { q: st.q.clone(), amplitudes, t: st.t })
}

/// Advances the potential directly with its own relaxation law
/// `d_t phi = -D (phi / lambda_D^2 + lambda_T^2 d_x^4 phi - d_x^2 phi)`.
pub fn evolve_potential(ps: &PotentialSpectrum, pp: &PlasmaParams, t: f64) -> Result<PotentialSpectrum> {
    let dt = t - ps.t;
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("cannot evolve backwards from t = {} to {t}", ps.t)));
    }
    let (ld, lt) = (pp.debye_length(), pp.thermal_length());
    let d = pp.diffusion();
    let amplitudes =
        ps.q.iter()
            .zip(&ps.amplitudes)
            .map(|(&q, &a)| {
                check_wavenumber(q)?;
                let q2 = q * q;
                let rate = d * (1.0 / (ld * ld) + lt * lt * q2 * q2 + q2);
                Ok(a * (-rate * dt).exp())
            })
            .collect::<Result<Vec<_>>>()?;
    Ok(PotentialSpectrum { q: ps.q.clone(), amplitudes, t })
}

/// `n` log-spaced wave numbers from `q_min` to `q_max`.
pub fn log_spaced(q_min: f64, q_max: f64, n: usize) -> Result<Vec<f64>> {
    check_wavenumber(q_min)?;
    check_wavenumber(q_max)?;
    if !(q_max > q_min) || n < 2 {
        return Err(Error::Configuration(format!(
            "need q_max > q_min and at least two points, got [{q_min}, {q_max}] with {n}"
        )));
    }
    let r = (q_max / q_min).ln() / (n - 1) as f64;
    Ok((0..n).map(|i| q_min * (r * i as f64).exp()).collect())
}

/// The first `count` harmonics `2 pi k / period` of a periodic box.
pub fn harmonics(period: f64, count: usize) -> Result<Vec<f64>> {
    if !(period.is_finite() && period > 0.0) || count == 0 {
        return Err(Error::Configuration(format!(
            "need a positive period and at least one harmonic, got {period} and {count}"
        )));
    }
    Ok((1..=count).map(|k| 2.0 * PI * k as f64 / period).collect())
}

/// `q,D_q`
pub fn write_spectrum_csv<W: Write>(q: &[f64], pp: &PlasmaParams, mut w: W) -> Result<()> {
    let rows = q.iter().map(|&qi| Ok((qi, effective_diffusion(qi, pp)?))).collect::<Result<Vec<_>>>()?;
    let io = |e: io::Error| Error::Numerical(format!("writing spectrum: {e}"));
    writeln!(w, "q,D_q").map_err(io)?;
    for (qi, d) in rows {
        writeln!(w, "{qi:e},{d:e}").map_err(io)?;
    }
    Ok(())
}

/// Harmonic index of every mode on a box of length `period`.
fn harmonic_indices(q: &[f64], period: f64) -> Result<Vec<usize>> {
    q.iter()
        .map(|&qi| {
            let k = qi * period / (2.0 * PI);
            let kr = k.round();
            if kr < 1.0 || (k - kr).abs() > COMMENSURATE_TOLERANCE * k.max(1.0) {
                Err(Error::Configuration(format!("wave number {qi} is not a harmonic of the period {period}")))
            } else {
                Ok(kr as usize)
            }
        })
        .collect()
}

/// Synthesizes `delta rho(x)` on a periodic grid.
///
/// Every wave number must be a harmonic `2 pi k / L` of the grid period with
/// `k < n/2`, so that the samples resolve it.
pub fn real_space_profile(st: &SpectralState, grid: &Grid1D, pp: &PlasmaParams) -> Result<ScalarField> {
    if grid.boundary != Boundary::Periodic {
        return Err(Error::Configuration("real-space synthesis needs a periodic grid".into()));
    }
    let period = grid.extent();
    let ks = harmonic_indices(&st.q, period)?;
    if let Some(&k) = ks.iter().find(|&&k| 2 * k >= grid.n) {
        return Err(Error::Configuration(format!("harmonic {k} is not resolved by {} nodes", grid.n)));
    }
    let offset = st.uniform_offset(pp);
    let values = grid
        .coords()
        .into_iter()
        .map(|x| {
            offset
                + st.q.iter().zip(&st.amplitudes).map(|(&q, a)| (a * Complex64::from_polar(1.0, q * x)).re).sum::<f64>()
        })
        .collect();
    ScalarField::new(*grid, values)
}

/// `x,delta_rho`
pub fn write_profile_csv<W: Write>(profile: &ScalarField, mut w: W) -> io::Result<()> {
    writeln!(w, "x,delta_rho")?;
    for (x, v) in profile.grid().coords().iter().zip(profile.values()) {
        writeln!(w, "{x:e},{v:e}")?;
    }
    Ok(())
}
