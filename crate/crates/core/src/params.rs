//! Physical constants, derived characteristic scales and the reduced unit
//! system shared by every solver.

use crate::error::{Error, Result};

/// CODATA 2018 values in SI units.
pub mod constants {
    /// Reduced Planck constant, J s.
    pub const HBAR: f64 = 1.054_571_817e-34;
    /// Boltzmann constant, J/K.
    pub const KB: f64 = 1.380_649e-23;
    /// Elementary charge, C.
    pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
    /// Vacuum permittivity, F/m.
    pub const EPSILON_0: f64 = 8.854_187_812_8e-12;
    /// Electron rest mass, kg.
    pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;
    /// Proton rest mass, kg.
    pub const PROTON_MASS: f64 = 1.672_621_923_69e-27;
    /// Standard gravitational acceleration, m/s^2.
    pub const STANDARD_GRAVITY: f64 = 9.806_65;
}

/// Jellium constants for the Smoluchowski-Poisson problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasmaConstants {
    /// Dielectric permittivity of the medium (vacuum permittivity times the
    /// relative permittivity).
    pub permittivity: f64,
    /// Carrier charge magnitude.
    pub charge: f64,
    /// Background number density of the positive charge.
    pub density: f64,
}

/// Particle, bath and material constants.
///
/// The struct is unit-agnostic: the same fields hold SI values or values in
/// a [`UnitSystem`]'s reduced units, as long as the whole set is consistent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    pub mass: f64,
    pub friction: f64,
    pub temperature: f64,
    pub hbar: f64,
    pub kb: f64,
    pub plasma: Option<PlasmaConstants>,
    pub gravity: Option<f64>,
}

impl PhysicalParams {
    /// SI parameters with compiled-in CODATA values for `hbar` and `kb`.
    pub fn si(mass: f64, friction: f64, temperature: f64) -> Result<Self> {
        let p =
            Self { mass, friction, temperature, hbar: constants::HBAR, kb: constants::KB, plasma: None, gravity: None };
        p.validate()?;
        Ok(p)
    }

    /// Parameters in reduced units where `kb = 1`, so `temperature` is an
    /// energy.
    pub fn reduced(mass: f64, friction: f64, temperature: f64, hbar: f64) -> Result<Self> {
        let p = Self { mass, friction, temperature, hbar, kb: 1.0, plasma: None, gravity: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_hbar(mut self, hbar: f64) -> Result<Self> {
        self.hbar = hbar;
        self.validate()?;
        Ok(self)
    }

    pub fn with_kb(mut self, kb: f64) -> Result<Self> {
        self.kb = kb;
        self.validate()?;
        Ok(self)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn with_plasma(mut self, plasma: PlasmaConstants) -> Result<Self> {
        self.plasma = Some(plasma);
        self.validate()?;
        Ok(self)
    }

    pub fn with_gravity(mut self, g: f64) -> Result<Self> {
        self.gravity = Some(g);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("mass", self.mass), ("friction", self.friction), ("hbar", self.hbar), ("kb", self.kb)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ParameterDomain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::ParameterDomain(format!("temperature must be non-negative, got {}", self.temperature)));
        }
        if let Some(pl) = self.plasma {
            for (name, v) in [("permittivity", pl.permittivity), ("charge", pl.charge), ("density", pl.density)] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::ParameterDomain(format!("plasma {name} must be positive, got {v}")));
                }
            }
        }
        if let Some(g) = self.gravity {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::ParameterDomain(format!("gravity must be positive, got {g}")));
            }
        }
        Ok(())
    }

    /// Thermal energy `kB T`.
    pub fn thermal_energy(&self) -> f64 {
        self.kb * self.temperature
    }

    /// Diffusion constant `kB T / b`.
    pub fn diffusion(&self) -> f64 {
        self.thermal_energy() / self.friction
    }

    /// Coefficient `hbar^2 / (4 m b)` of the fourth-order quantum diffusion.
    pub fn quantum_diffusivity(&self) -> f64 {
        self.hbar * self.hbar / (4.0 * self.mass * self.friction)
    }

    /// Momentum relaxation time `m / b`.
    pub fn relaxation_time(&self) -> f64 {
        self.mass / self.friction
    }
}

/// Characteristic scales derived from [`PhysicalParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedScales {
    /// Einstein diffusion constant `kB T / b`.
    pub diffusion: f64,
    /// Thermal de Broglie length `hbar / (2 sqrt(m kB T))`; absent at `T = 0`.
    pub thermal_length: Option<f64>,
    /// Second Matsubara frequency `2 kB T / hbar`.
    pub matsubara_frequency: f64,
    /// Debye screening length; needs plasma constants and `T > 0`.
    pub debye_length: Option<f64>,
    /// Langmuir plasma frequency; needs plasma constants.
    pub plasma_frequency: Option<f64>,
    /// Inverse barometric height `m g / kB T`; needs gravity and `T > 0`.
    pub inverse_height: Option<f64>,
    /// Temperature at which the thermal length equals the barometric height.
    pub gravity_temperature: Option<f64>,
}

impl DerivedScales {
    pub fn thermal_length(&self) -> Result<f64> {
        self.thermal_length.ok_or_else(|| Error::Domain("thermal length is undefined at zero temperature".into()))
    }

    pub fn debye_length(&self) -> Result<f64> {
        self.debye_length.ok_or_else(|| Error::Domain("Debye length needs plasma constants and T > 0".into()))
    }

    pub fn plasma_frequency(&self) -> Result<f64> {
        self.plasma_frequency.ok_or_else(|| Error::Domain("plasma frequency needs plasma constants".into()))
    }
}

/// Computes every scale that the available inputs allow.
pub fn derive_scales(p: &PhysicalParams) -> Result<DerivedScales> {
    p.validate()?;
    let kt = p.thermal_energy();
    let warm = kt > 0.0;

    let thermal_length = warm.then(|| p.hbar / (2.0 * (p.mass * kt).sqrt()));
    let (debye_length, plasma_frequency) = match p.plasma {
        Some(pl) => {
            let q2n = pl.charge * pl.charge * pl.density;
            (warm.then(|| (pl.permittivity * kt / q2n).sqrt()), Some((q2n / (p.mass * pl.permittivity)).sqrt()))
        }
        None => (None, None),
    };
    let (inverse_height, gravity_temperature) = match p.gravity {
        Some(g) => (warm.then(|| p.mass * g / kt), Some(gravity_temperature(p.mass, g, p.hbar, p.kb))),
        None => (None, None),
    };

    Ok(DerivedScales {
        diffusion: kt / p.friction,
        thermal_length,
        matsubara_frequency: 2.0 * kt / p.hbar,
        debye_length,
        plasma_frequency,
        inverse_height,
        gravity_temperature,
    })
}

/// Temperature `T_g` defined by `alpha_T * lambda_T = 1`, i.e.
/// `(kB T_g)^3 = m g^2 hbar^2 / 4`.
pub fn gravity_temperature(mass: f64, g: f64, hbar: f64, kb: f64) -> f64 {
    (mass * g * g * hbar * hbar / 4.0).cbrt() / kb
}

/// Earliest time at which the classical Einstein law is compatible with the
/// Robertson-Schroedinger uncertainty relation: `lambda_T^2/(2D) + m/(2b)`.
pub fn consistency_time(s: &DerivedScales, p: &PhysicalParams) -> Result<f64> {
    let lt = s.thermal_length()?;
    if s.diffusion <= 0.0 {
        return Err(Error::Domain("consistency time needs D > 0".into()));
    }
    Ok(lt * lt / (2.0 * s.diffusion) + p.relaxation_time() / 2.0)
}

/// Bijective rescaling between SI and the solvers' O(1) internal units.
///
/// At `T > 0` lengths are measured in `lambda_T`, times in `lambda_T^2 / D`
/// and energies in `kB T`. At `T = 0` lengths are measured in
/// `sqrt(hbar / b)`, times in `m / b` and energies in `hbar b / m`. In both
/// cases the internal Boltzmann constant is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSystem {
    pub length: f64,
    pub time: f64,
    pub energy: f64,
    /// Boltzmann constant of the source system; converts temperatures.
    pub kb: f64,
    /// Charge unit; only meaningful when plasma constants were supplied.
    pub charge: f64,
}

pub fn make_unit_system(p: &PhysicalParams) -> UnitSystem {
    let kt = p.thermal_energy();
    let charge = p.plasma.map_or(1.0, |pl| pl.charge);
    if kt > 0.0 {
        let length = p.hbar / (2.0 * (p.mass * kt).sqrt());
        let d = kt / p.friction;
        UnitSystem { length, time: length * length / d, energy: kt, kb: p.kb, charge }
    } else {
        let time = p.mass / p.friction;
        UnitSystem { length: (p.hbar / p.friction).sqrt(), time, energy: p.hbar / time, kb: p.kb, charge }
    }
}

impl UnitSystem {
    pub fn mass(&self) -> f64 {
        self.energy * self.time * self.time / (self.length * self.length)
    }

    pub fn length_to_internal(&self, x: f64) -> f64 {
        x / self.length
    }
    pub fn length_from_internal(&self, x: f64) -> f64 {
        x * self.length
    }
    pub fn time_to_internal(&self, t: f64) -> f64 {
        t / self.time
    }
    pub fn time_from_internal(&self, t: f64) -> f64 {
        t * self.time
    }
    pub fn energy_to_internal(&self, e: f64) -> f64 {
        e / self.energy
    }
    pub fn energy_from_internal(&self, e: f64) -> f64 {
        e * self.energy
    }
    pub fn temperature_to_internal(&self, t: f64) -> f64 {
        self.kb * t / self.energy
    }
    pub fn temperature_from_internal(&self, t: f64) -> f64 {
        t * self.energy / self.kb
    }
    /// Number density (per volume, three dimensions).
    pub fn density_to_internal(&self, n: f64) -> f64 {
        n * self.length.powi(3)
    }
    pub fn density_from_internal(&self, n: f64) -> f64 {
        n / self.length.powi(3)
    }

    /// Expresses `p` in internal units (internal `kb = 1`).
    pub fn reduce(&self, p: &PhysicalParams) -> PhysicalParams {
        let mass_unit = self.mass();
        let friction_unit = mass_unit / self.time;
        let action_unit = self.energy * self.time;
        let permittivity_unit = self.charge * self.charge / (self.energy * self.length);
        PhysicalParams {
            mass: p.mass / mass_unit,
            friction: p.friction / friction_unit,
            temperature: self.temperature_to_internal(p.temperature),
            hbar: p.hbar / action_unit,
            kb: 1.0,
            plasma: p.plasma.map(|pl| PlasmaConstants {
                permittivity: pl.permittivity / permittivity_unit,
                charge: pl.charge / self.charge,
                density: self.density_to_internal(pl.density),
            }),
            gravity: p.gravity.map(|g| g * self.time * self.time / self.length),
        }
    }

    /// Inverse of [`UnitSystem::reduce`].
    pub fn expand(&self, p: &PhysicalParams) -> PhysicalParams {
        let mass_unit = self.mass();
        let friction_unit = mass_unit / self.time;
        let action_unit = self.energy * self.time;
        let permittivity_unit = self.charge * self.charge / (self.energy * self.length);
        PhysicalParams {
            mass: p.mass * mass_unit,
            friction: p.friction * friction_unit,
            temperature: self.temperature_from_internal(p.temperature),
            hbar: p.hbar * action_unit,
            kb: self.kb,
            plasma: p.plasma.map(|pl| PlasmaConstants {
                permittivity: pl.permittivity * permittivity_unit,
                charge: pl.charge * self.charge,
                density: self.density_from_internal(pl.density),
            }),
            gravity: p.gravity.map(|g| g * self.length / (self.time * self.time)),
        }
    }
}
