//! Dispersion laws of a free overdamped particle.
//!
//! The thermo-quantum law interpolates between the quantum spreading
//! `sigma^2 = hbar sqrt(t / m b)` at short times and Einstein's `2 D t`:
//!
//! ```text
//! sigma^2 - lambda_T^2 ln(1 + sigma^2 / lambda_T^2) = 2 D t
//! ```

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::params::{derive_scales, DerivedScales, PhysicalParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionPoint {
    pub t: f64,
    pub sigma_x2: f64,
    pub sigma_p2: f64,
    pub sigma_xp: f64,
}

impl DispersionPoint {
    /// Point on the thermo-quantum law, with the momentum dispersion from the
    /// Maxwell-Heisenberg relation and the cross-correlation from the virial
    /// theorem `sigma_p^2 = b sigma_xp`.
    pub fn from_law(t: f64, s: &DerivedScales, p: &PhysicalParams) -> Result<Self> {
        let sigma_x2 = solve_msd(t, s, p)?;
        let sigma_p2 = sigma_p2_maxwell_heisenberg(sigma_x2, p)?;
        Ok(Self { t, sigma_x2, sigma_p2, sigma_xp: sigma_p2 / p.friction })
    }
}

/// Time-ordered dispersion history.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionCurve {
    points: Vec<DispersionPoint>,
    params: PhysicalParams,
}

impl DispersionCurve {
    pub fn new(points: Vec<DispersionPoint>, params: PhysicalParams) -> Result<Self> {
        for w in points.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Domain(format!("times must increase strictly ({} then {})", w[0].t, w[1].t)));
            }
            if w[1].sigma_x2 < w[0].sigma_x2 {
                return Err(Error::Domain(format!("dispersion decreases at t = {}", w[1].t)));
            }
        }
        Ok(Self { points, params })
    }

    /// Evaluates the law at the given times (all must be positive).
    pub fn compute(times: &[f64], p: &PhysicalParams) -> Result<Self> {
        let s = derive_scales(p)?;
        let points = times
            .iter()
            .map(|&t| {
                if !(t > 0.0) {
                    return Err(Error::Domain(format!("dispersion times must be positive, got {t}")));
                }
                DispersionPoint::from_law(t, &s, p)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, *p)
    }

    pub fn points(&self) -> &[DispersionPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.params.diffusion();
        writeln!(w, "t,sigma_x2,sigma_x2_classical,sigma_x2_quantum,sigma_p2")?;
        for pt in &self.points {
            let quantum = self.params.hbar * (pt.t / (self.params.mass * self.params.friction)).sqrt();
            writeln!(w, "{:e},{:e},{:e},{:e},{:e}", pt.t, pt.sigma_x2, 2.0 * d * pt.t, quantum, pt.sigma_p2)?;
        }
        Ok(())
    }
}

/// `n` logarithmically spaced times in `[t_min, t_max]`.
pub fn log_times(t_min: f64, t_max: f64, n: usize) -> Result<Vec<f64>> {
    if !(t_min > 0.0 && t_max > t_min && n >= 2) {
        return Err(Error::Domain(format!("bad time range [{t_min}, {t_max}] with {n} points")));
    }
    let ratio = (t_max / t_min).ln() / (n - 1) as f64;
    Ok((0..n).map(|i| t_min * (ratio * i as f64).exp()).collect())
}

fn check_time(t: f64) -> Result<()> {
    if t >= 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("time must be finite and nonnegative, got {t}")))
    }
}

/// Einstein law `2 D t`.
pub fn classical_msd(t: f64, s: &DerivedScales) -> Result<f64> {
    check_time(t)?;
    Ok(2.0 * s.diffusion * t)
}

/// Zero-temperature spreading `hbar sqrt(t / m b)`.
pub fn quantum_msd(t: f64, p: &PhysicalParams) -> Result<f64> {
    check_time(t)?;
    Ok(p.hbar * (t / (p.mass * p.friction)).sqrt())
}

/// `m kB T + hbar^2 / (4 sigma_x^2)`.
pub fn sigma_p2_maxwell_heisenberg(sigma_x2: f64, p: &PhysicalParams) -> Result<f64> {
    if !(sigma_x2 > 0.0) {
        return Err(Error::Domain(format!("position dispersion must be positive, got {sigma_x2}")));
    }
    Ok(p.mass * p.thermal_energy() + p.hbar * p.hbar / (4.0 * sigma_x2))
}

/// `x - ln(1 + x)` without cancellation for small `x`.
fn x_minus_log1p(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        // alternating series x^2/2 - x^3/3 + ...
        let mut term = x * x;
        let mut acc = 0.0;
        for k in 2..14 {
            acc += term / k as f64 * if k % 2 == 0 { 1.0 } else { -1.0 };
            term *= x;
        }
        acc
    } else {
        x - x.ln_1p()
    }
}

/// Time at which the thermo-quantum law reaches `sigma_x2`.
pub fn msd_forward(sigma_x2: f64, s: &DerivedScales) -> Result<f64> {
    if !(sigma_x2 >= 0.0) {
        return Err(Error::Domain(format!("dispersion must be nonnegative, got {sigma_x2}")));
    }
    let lambda = s
        .thermal_length
        .ok_or_else(|| Error::Domain("the thermo-quantum law needs T > 0; invert quantum_msd instead".into()))?;
    let l2 = lambda * lambda;
    Ok(l2 * x_minus_log1p(sigma_x2 / l2) / (2.0 * s.diffusion))
}

/// Relative tolerance on the time residual of [`solve_msd`].
pub const MSD_TOLERANCE: f64 = 1e-10;

/// Inverts the thermo-quantum law (or returns [`quantum_msd`] at `T = 0`).
pub fn solve_msd(t: f64, s: &DerivedScales, p: &PhysicalParams) -> Result<f64> {
    check_time(t)?;
    let Some(lambda) = s.thermal_length else {
        return quantum_msd(t, p);
    };
    if t == 0.0 {
        return Ok(0.0);
    }
    let l2 = lambda * lambda;
    let y = 2.0 * s.diffusion * t / l2;
    // g(x) = x - ln(1 + x) is convex and increasing with g(x) <= x^2 / 2 and
    // g(x) < x, so the root lies above both y and sqrt(2 y)
    let mut lo = y.max((2.0 * y).sqrt());
    let mut hi = (2.0 * lo).max(lo + 1.0);
    while x_minus_log1p(hi) < y {
        lo = hi;
        hi *= 2.0;
    }
    let residual = |x: f64| x_minus_log1p(x) - y;
    let mut x = lo;
    for _ in 0..200 {
        let r = residual(x);
        if r.abs() <= 1e-3 * MSD_TOLERANCE * y {
            return Ok(x * l2);
        }
        if r < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        let slope = x / (1.0 + x);
        let mut next = x - r / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x {
            x = next;
            break;
        }
        x = next;
    }
    let r = residual(x);
    if r.abs() <= MSD_TOLERANCE * y {
        Ok(x * l2)
    } else {
        Err(Error::Convergence {
            what: format!("dispersion root at t = {t}"),
            iterations: 200,
            residuals: vec![r / y],
            last: Some(vec![x * l2]),
        })
    }
}

/// Robertson-Schroedinger product `sigma_x^2 sigma_p^2 - sigma_xp^2 - hbar^2/4`.
pub fn heisenberg_product(pt: &DispersionPoint, p: &PhysicalParams) -> f64 {
    pt.sigma_x2 * pt.sigma_p2 - pt.sigma_xp * pt.sigma_xp - 0.25 * p.hbar * p.hbar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::consistency_time;
    use proptest::prelude::*;

    /// lambda_T = 1, D = 1 with m = b = 1.
    fn unit() -> (DerivedScales, PhysicalParams) {
        let p = PhysicalParams::reduced(1.0, 1.0, 1.0, 2.0).unwrap();
        let s = derive_scales(&p).unwrap();
        assert!((s.thermal_length.unwrap() - 1.0).abs() < 1e-15);
        (s, p)
    }

    #[test]
    fn einstein_law() {
        let (s, _) = unit();
        assert_eq!(classical_msd(0.0, &s).unwrap(), 0.0);
        assert_eq!(classical_msd(3.0, &s).unwrap(), 6.0);
        assert!(classical_msd(-1.0, &s).is_err());
    }

    #[test]
    fn quantum_law() {
        let p = PhysicalParams::reduced(2.0, 3.0, 0.0, 0.7).unwrap();
        let tau = p.mass / p.friction;
        assert!((quantum_msd(tau, &p).unwrap() - p.hbar / p.friction).abs() < 1e-15);
        assert!((quantum_msd(4.0 * tau, &p).unwrap() - 2.0 * p.hbar / p.friction).abs() < 1e-15);
        assert_eq!(quantum_msd(0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn maxwell_heisenberg() {
        let (s, p) = unit();
        let l2 = s.thermal_length.unwrap().powi(2);
        let mkt = p.mass * p.thermal_energy();
        assert!((sigma_p2_maxwell_heisenberg(l2, &p).unwrap() - 2.0 * mkt).abs() < 1e-14);
        assert!((sigma_p2_maxwell_heisenberg(1e12, &p).unwrap() - mkt).abs() < 1e-11);
        let cold = p.with_temperature(0.0).unwrap();
        assert!((sigma_p2_maxwell_heisenberg(0.5, &cold).unwrap() - 2.0).abs() < 1e-15);
        assert!(sigma_p2_maxwell_heisenberg(0.0, &p).is_err());
    }

    #[test]
    fn forward_values() {
        let (s, _) = unit();
        assert_eq!(msd_forward(0.0, &s).unwrap(), 0.0);
        assert!((msd_forward(1.0, &s).unwrap() - 0.153_426_409_720_027_3).abs() < 1e-15);
        assert!((msd_forward(100.0, &s).unwrap() - 47.692_439_741_579_37).abs() < 1e-12);
        let cold = derive_scales(&PhysicalParams::reduced(1.0, 1.0, 0.0, 1.0).unwrap()).unwrap();
        assert!(msd_forward(1.0, &cold).is_err());
    }

    #[test]
    fn inverse_values() {
        let (s, p) = unit();
        assert_eq!(solve_msd(0.0, &s, &p).unwrap(), 0.0);
        assert!((solve_msd(0.153_426_4, &s, &p).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_temperature_uses_quantum_law() {
        let p = PhysicalParams::reduced(1.5, 0.5, 0.0, 1.0).unwrap();
        let s = derive_scales(&p).unwrap();
        assert_eq!(solve_msd(2.0, &s, &p).unwrap(), quantum_msd(2.0, &p).unwrap());
    }

    #[test]
    fn short_time_matches_quantum_law() {
        let (s, p) = unit();
        for t in [1e-5, 1e-6, 1e-8, 1e-11] {
            let sx = solve_msd(t, &s, &p).unwrap();
            assert!(sx <= 0.01);
            assert!((sx / quantum_msd(t, &p).unwrap() - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn consistency_time_saturates_heisenberg() {
        let (s, p) = unit();
        let tc = consistency_time(&s, &p).unwrap();
        let einstein = |t: f64| DispersionPoint {
            t,
            sigma_x2: 2.0 * s.diffusion * t,
            sigma_p2: p.mass * p.thermal_energy(),
            sigma_xp: p.mass * s.diffusion,
        };
        assert!(heisenberg_product(&einstein(tc), &p).abs() < 1e-9);
        assert!(heisenberg_product(&einstein(0.5 * tc), &p) < 0.0);
        let minimal = DispersionPoint { t: 1.0, sigma_x2: 0.3, sigma_p2: 1.0 / 0.3, sigma_xp: 0.0 };
        assert!(heisenberg_product(&minimal, &p).abs() < 1e-15);
    }

    #[test]
    fn curve_csv_header_and_rows() {
        let (_, p) = unit();
        let curve = DispersionCurve::compute(&log_times(0.01, 100.0, 5).unwrap(), &p).unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,sigma_x2,sigma_x2_classical,sigma_x2_quantum,sigma_p2");
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn curve_rejects_unordered_times() {
        let (_, p) = unit();
        assert!(DispersionCurve::compute(&[1.0, 0.5], &p).is_err());
        assert!(DispersionCurve::compute(&[0.0, 0.5], &p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(log_s in -6.0f64..6.0) {
            let (s, p) = unit();
            let sx = 10f64.powf(log_s);
            let t = msd_forward(sx, &s).unwrap();
            let back = solve_msd(t, &s, &p).unwrap();
            prop_assert!((back / sx - 1.0).abs() < 1e-8, "{sx} -> {t} -> {back}");
        }

        #[test]
        fn monotone_in_time(log_t in -8.0f64..8.0, f in 1.0001f64..3.0) {
            let (s, p) = unit();
            let t = 10f64.powf(log_t);
            prop_assert!(solve_msd(t * f, &s, &p).unwrap() > solve_msd(t, &s, &p).unwrap());
        }

        #[test]
        fn long_time_bound(log_t in 4.0f64..10.0) {
            let (s, p) = unit();
            let t = 10f64.powf(log_t);
            let e = 2.0 * s.diffusion * t;
            let rel = (solve_msd(t, &s, &p).unwrap() - e).abs() / e;
            // the excess over 2Dt is exactly ln(1 + sigma^2) in these units,
            // just above ln(1 + 2Dt)
            prop_assert!(rel >= (1.0 + e).ln() / e * (1.0 - 1e-6));
            prop_assert!(rel <= (1.0 + e + 2.0 * (1.0 + e).ln()).ln() / e * (1.0 + 1e-6));
            prop_assert!(rel < 2e-3);
        }

        #[test]
        fn simple_product_bound(log_s in -6.0f64..6.0, temp in 0.0f64..5.0) {
            let p = PhysicalParams::reduced(1.0, 1.0, temp, 2.0).unwrap();
            let sx = 10f64.powf(log_s);
            let sp = sigma_p2_maxwell_heisenberg(sx, &p).unwrap();
            let expected = p.mass * p.thermal_energy() * sx + 0.25 * p.hbar * p.hbar;
            prop_assert!((sx * sp - expected).abs() <= 1e-12 * expected);
            prop_assert!(sx * sp >= 0.25 * p.hbar * p.hbar * (1.0 - 1e-14));
        }

        #[test]
        fn cold_momentum_chain(log_t in -3.0f64..3.0) {
            let p = PhysicalParams::reduced(1.0, 2.0, 0.0, 1.0).unwrap();
            let t = 10f64.powf(log_t);
            let sp = sigma_p2_maxwell_heisenberg(quantum_msd(t, &p).unwrap(), &p).unwrap();
            let chain = p.hbar * (p.mass * p.friction / t).sqrt() / 4.0;
            prop_assert!((sp - chain).abs() <= 1e-12 * chain);
            if t > p.mass / p.friction {
                prop_assert!(sp < p.hbar * p.friction / 4.0);
            }
        }
    }
}
