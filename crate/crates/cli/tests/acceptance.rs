//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, with the
//! measured numbers and the wall time against its budget.
//!
//! Runs without the libtest harness so the report is always printed:
//! `cargo test -p tqdiff-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;
use tqdiff_core::barometric::{
    correction_rhs, evolve_barometric, evolve_linear_correction, BarometricScenario, CorrectionControl,
    CorrectionOperator, DEFAULT_ZETA_MAX,
};
use tqdiff_core::equilibrium::{boltzmann_density, solve_equilibrium, wkb_density};
use tqdiff_core::msd::{msd_forward, solve_msd};
use tqdiff_core::params::constants::ELECTRON_MASS;
use tqdiff_core::params::PlasmaConstants;
use tqdiff_core::plasma::{
    dq_minimum, evolve_potential, evolve_spectrum, mode_rate, potential_from_density, PlasmaParams, SpectralState,
};
use tqdiff_core::smoluchowski::{evolve, SimState, StepControl};
use tqdiff_core::tunneling::{
    classical_ergodic_density, semiclassical_density, stationary_fixed_point, PicardOptions, TunnelingScenario,
};
use tqdiff_core::{
    derive_scales, gibbs_duhem_residual, Boundary, DensityField, Grid1D, Mode, PhysicalParams, ScalarField,
};

type Check = Result<String, String>;

/// Name, runtime budget in seconds, check.
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reduced(temp: f64, hbar: f64) -> PhysicalParams {
    PhysicalParams::reduced(1.0, 1.0, temp, hbar).unwrap()
}

fn log2_slopes(d: &[f64]) -> Vec<f64> {
    d.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn free_gaussian(n: usize, dx: f64, var0: f64, params: PhysicalParams, mode: Mode) -> SimState {
    let g = Grid1D::new(-0.5 * n as f64 * dx, dx, n, Boundary::Decay).unwrap();
    SimState::free(DensityField::gaussian(g, 0.0, var0).unwrap(), params, mode).unwrap()
}

/// Variance growth at each of `times`, with mass and clamp counts checked on
/// the way.
fn growth(state: &SimState, times: &[f64], ctrl: &StepControl) -> Result<Vec<f64>, String> {
    let v0 = state.variance();
    let mut s = state.clone();
    let mut out = Vec::new();
    for &t in times {
        s = evolve(&s, t, ctrl).map_err(|e| e.to_string())?.final_state;
        if (s.mass() - 1.0).abs() > 1e-8 || s.clamp_count > 0 {
            return Err(format!("t = {t}: mass {} clamps {}", s.mass(), s.clamp_count));
        }
        out.push(s.variance() - v0);
    }
    Ok(out)
}

fn msd_crossover() -> Check {
    let p = reduced(1.0, 2.0);
    let s = derive_scales(&p).unwrap();
    let mut worst_long: f64 = 0.0;
    for k in 0..=40 {
        let t = 10f64.powf(4.0 + 0.1 * k as f64);
        worst_long = worst_long.max((solve_msd(t, &s, &p).unwrap() / (2.0 * t) - 1.0).abs());
    }
    let mut worst_short: f64 = 0.0;
    for k in 0..=40 {
        let t = 10f64.powf(-12.0 + 0.2 * k as f64);
        let sig = solve_msd(t, &s, &p).unwrap();
        if sig <= 0.01 {
            let law = p.hbar * (t / (p.mass * p.friction)).sqrt();
            worst_short = worst_short.max((sig / law - 1.0).abs());
        }
    }
    let mut worst_trip: f64 = 0.0;
    for k in 0..=120 {
        let s2 = 10f64.powf(-6.0 + 0.1 * k as f64);
        let back = solve_msd(msd_forward(s2, &s).unwrap(), &s, &p).unwrap();
        worst_trip = worst_trip.max((back / s2 - 1.0).abs());
    }
    ensure(
        worst_long < 2e-3 && worst_short < 1e-2 && worst_trip < 1e-8,
        format!("long-time {worst_long:.1e}, short-time {worst_short:.1e}, round trip {worst_trip:.1e}"),
    )
}

fn pde_matches_law() -> Check {
    let p = reduced(1.0, 2.0);
    let sc = derive_scales(&p).unwrap();
    let dx = 0.02;
    let state = free_gaussian(2048, dx, (4.0 * dx) * (4.0 * dx), p, Mode::ThermoQuantum);
    let times = [0.05, 0.15, 0.5, 1.5, 5.0];
    let grown = growth(&state, &times, &StepControl::rosenbrock(1e-6, 1e-3))?;
    let worst =
        times.iter().zip(&grown).map(|(t, g)| (g / solve_msd(*t, &sc, &p).unwrap() - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst < 0.03, format!("worst relative deviation {worst:.2e} over t in [0.05, 5]"))
}

fn classical_limits() -> Check {
    let g = Grid1D::spanning(-8.0, 8.0, 321, Boundary::Decay).unwrap();
    let u = ScalarField::from_fn(g, |x| 0.5 * x * x);
    let rho = DensityField::gaussian(g, 1.5, 0.3).unwrap();
    let s = SimState::new(rho, u, reduced(1.0, 2.0), Mode::Classical).unwrap();
    let end = evolve(&s, 25.0, &StepControl::rosenbrock(1e-3, 1e-5)).map_err(|e| e.to_string())?.final_state;
    let boltzmann = DensityField::normalized_from_fn(g, |x| (-0.5 * x * x).exp()).unwrap();
    let l1 = end.rho.l1_distance(&boltzmann);

    let free = free_gaussian(800, 0.05, 0.04, reduced(1.0, 2.0), Mode::Classical);
    let times = [0.5, 1.0, 2.0, 4.0];
    let grown = growth(&free, &times, &StepControl::rosenbrock(1e-4, 1e-4))?;
    let worst = times.iter().zip(&grown).map(|(t, g)| (g / (2.0 * t) - 1.0).abs()).fold(0.0, f64::max);
    ensure(l1 < 1e-4 && worst < 0.02, format!("trap L1 {l1:.1e}, free variance vs 2Dt {worst:.1e}"))
}

fn equilibrium_bvp() -> Check {
    // m = omega = hbar = 1: rho ~ exp(-x^2), F = 1/2
    let g = Grid1D::spanning(-8.0, 8.0, 801, Boundary::Decay).unwrap();
    let u = ScalarField::from_fn(g, |x| 0.5 * x * x);
    let sol = solve_equilibrium(&u, &reduced(0.0, 1.0), Mode::PureQuantum).map_err(|e| e.to_string())?;
    let exact = DensityField::normalized_from_fn(g, |x| (-x * x).exp()).unwrap();
    let l1 = sol.rho_eq.l1_distance(&exact);
    let f_err = (sol.free_energy / 0.5 - 1.0).abs();

    let g = Grid1D::spanning(-10.0, 10.0, 801, Boundary::Decay).unwrap();
    let u = ScalarField::from_fn(g, |x| 0.5 * x * x + 0.05 * x.powi(4));
    let base = reduced(1.0, 2.0);
    let boltzmann = boltzmann_density(&u, &base).unwrap();
    let (mut le, mut ld) = (Vec::new(), Vec::new());
    for e in [0.4, 0.2, 0.1, 0.05] {
        let sol =
            solve_equilibrium(&u, &base.with_hbar(2.0 * e).unwrap(), Mode::ThermoQuantum).map_err(|e| e.to_string())?;
        le.push(f64::ln(e));
        ld.push(sol.rho_eq.l1_distance(&boltzmann).ln());
    }
    let slope = fit_slope(&le, &ld);
    ensure(
        l1 < 1e-4 && f_err < 1e-6 && (slope - 2.0).abs() < 0.2,
        format!("ground state L1 {l1:.1e}, F error {f_err:.1e}, continuation slope {slope:.3}"),
    )
}

fn wkb_regime() -> Check {
    let p = reduced(0.0, 2.0);
    let g = Grid1D::spanning(-4.0, 6.0, 1001, Boundary::Decay).unwrap();
    let height = 20.0;
    let u = ScalarField::from_fn(g, |x| if x < 0.0 { 0.0 } else { height });
    let sol = solve_equilibrium(&u, &p, Mode::PureQuantum).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..g.n).filter(|&i| (0.5..=4.5).contains(&g.x(i))).collect();
    let sub = Grid1D::new(g.x(idx[0]), g.dx, idx.len(), Boundary::Decay).unwrap();
    let wkb = wkb_density(&ScalarField::constant(sub, height), sol.free_energy, &p).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = idx.iter().map(|&i| g.x(i)).collect();
    let solved: Vec<f64> = idx.iter().map(|&i| sol.log_density[i]).collect();
    let reference: Vec<f64> = wkb.values().iter().map(|r| r.ln()).collect();
    let rel = fit_slope(&xs, &solved) / fit_slope(&xs, &reference) - 1.0;
    ensure(rel.abs() < 0.05, format!("interior log-slope relative error {rel:.2e}"))
}

fn tunneling_stationary() -> Check {
    let params = |h: f64| reduced(0.0, h);
    let hbar: f64 = 0.1;
    let n = (12.0 / (2.0 * hbar)).round() as usize + 1;
    let g = Grid1D::spanning(-6.0, 6.0, n, Boundary::Decay).unwrap();
    let sc =
        TunnelingScenario::new(ScalarField::from_fn(g, |x| 0.4 * (-x * x / 2.0).exp()), 1.0, params(hbar)).unwrap();
    let start = classical_ergodic_density(&sc).unwrap();
    let fp = stationary_fixed_point(&sc, &start, &PicardOptions::default()).map_err(|e| e.to_string())?;

    let g = Grid1D::spanning(-6.0, 6.0, 1201, Boundary::Decay).unwrap();
    let u = ScalarField::from_fn(g, |x| 0.4 * (-x * x / 2.0).exp());
    let d: Vec<f64> = [0.4, 0.2, 0.1, 0.05]
        .iter()
        .map(|&h| {
            let sc = TunnelingScenario::new(u.clone(), 1.0, params(h)).unwrap();
            semiclassical_density(&sc).unwrap().l1_distance(&classical_ergodic_density(&sc).unwrap())
        })
        .collect();
    let slopes = log2_slopes(&d);

    let (amp, a) = (2.0, 1.8);
    let g = Grid1D::spanning(-a, a, 4001, Boundary::Decay).unwrap();
    let sc = TunnelingScenario::new(ScalarField::from_fn(g, |x| 0.5 * x * x), 0.5 * amp * amp, params(1.0)).unwrap();
    let norm = 2.0 * (a / amp).asin();
    let exact = DensityField::from_fn(g, |x| 1.0 / (norm * (amp * amp - x * x).sqrt())).unwrap();
    let l1 = classical_ergodic_density(&sc).unwrap().l1_distance(&exact);
    ensure(
        fp.residual < 1e-6 && slopes.iter().all(|s| (s - 2.0).abs() < 0.2) && l1 < 1e-4,
        format!("fixed-point residual {:.1e}, hbar slopes {slopes:.3?}, ergodic L1 {l1:.1e}", fp.residual),
    )
}

fn plasma_identities() -> Check {
    let mut rng = StdRng::seed_from_u64(7);
    let (mut worst_min, mut worst_q): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let p = reduced(rng.gen_range(0.01..100.0), rng.gen_range(0.01..10.0))
            .with_plasma(PlasmaConstants {
                permittivity: rng.gen_range(0.1..100.0),
                charge: rng.gen_range(0.1..10.0),
                density: rng.gen_range(0.01..100.0),
            })
            .unwrap();
        let pp = PlasmaParams::new(p).unwrap();
        let m = dq_minimum(&pp);
        let omega0 = pp.plasma_frequency();
        let energy_form = (p.kb * p.temperature + p.hbar * omega0) / p.friction;
        worst_min = worst_min.max((m.d_min / energy_form - 1.0).abs());
        let q2 = 1.0 / (pp.debye_length() * pp.thermal_length());
        worst_q = worst_q.max((m.q_star * m.q_star / q2 - 1.0).abs());
    }

    let pp = PlasmaParams::new(
        reduced(1.0, 2.0).with_plasma(PlasmaConstants { permittivity: 16.0, charge: 1.0, density: 1.0 }).unwrap(),
    )
    .unwrap();
    let q: Vec<f64> = (1..=40).map(|k| 0.05 * k as f64).collect();
    let amps: Vec<Complex64> = q.iter().map(|&x| Complex64::new(x.cos(), x.sin() - 0.5)).collect();
    let st = SpectralState::new(q.clone(), amps).unwrap().with_zero_mode(0.3).unwrap();
    let t = 0.7;
    let via_density = potential_from_density(&evolve_spectrum(&st, &pp, t).unwrap(), &pp).unwrap();
    let via_potential = evolve_potential(&potential_from_density(&st, &pp).unwrap(), &pp, t).unwrap();
    let route = via_density
        .amplitudes
        .iter()
        .zip(&via_potential.amplitudes)
        .map(|(a, b)| (a - b).norm() / a.norm().max(b.norm()))
        .fold(0.0, f64::max);

    let (t1, t2) = (0.3, 0.45);
    let split = evolve_spectrum(&evolve_spectrum(&st, &pp, t1).unwrap(), &pp, t1 + t2).unwrap();
    let whole = evolve_spectrum(&st, &pp, t1 + t2).unwrap();
    let semigroup = split
        .amplitudes()
        .iter()
        .zip(whole.amplitudes())
        .map(|(a, b)| (a - b).norm() / b.norm())
        .fold((split.zero_mode - whole.zero_mode).abs(), f64::max);
    let rates_positive = q.iter().all(|&x| mode_rate(x, &pp).unwrap() > 0.0);
    ensure(
        worst_min < 1e-10 && worst_q < 1e-10 && route < 1e-10 && semigroup < 1e-12 && rates_positive,
        format!("D_min {worst_min:.1e}, q*^2 {worst_q:.1e}, route {route:.1e}, semigroup {semigroup:.1e}"),
    )
}

fn electron_figures() -> Check {
    let p = PhysicalParams::si(ELECTRON_MASS, 1.0, 1.0).unwrap().with_gravity(9.81).unwrap();
    let t_g = derive_scales(&p).unwrap().gravity_temperature.unwrap();
    let at_tg = p.with_temperature(t_g).unwrap();
    let lambda = derive_scales(&at_tg).unwrap().thermal_length().unwrap();
    let (e_t, e_l) = (t_g / 0.45e-9 - 1.0, lambda / 0.7e-3 - 1.0);
    ensure(
        e_t.abs() < 0.02 && e_l.abs() < 0.02,
        format!("T_g = {:.4} nK ({e_t:+.2e}), lambda = {:.4} mm ({e_l:+.2e})", t_g * 1e9, lambda * 1e3),
    )
}

fn column(kappa: f64, n: usize) -> BarometricScenario {
    BarometricScenario::from_kappa(kappa, BarometricScenario::column(DEFAULT_ZETA_MAX, n).unwrap()).unwrap()
}

/// L1 distance between the full response to a zero-mass bump on the
/// classical column and the linear correction started from the same bump.
fn decomposition_discrepancy(kappa: f64, amplitude: f64, op: CorrectionOperator) -> Result<f64, String> {
    let sc = column(kappa, 1200);
    let grid = sc.grid;
    let tau = 0.5;
    let bump = |z: f64| -amplitude * (-6.0f64).exp() * (z - 6.0) * (-(z - 6.0f64).powi(2) / 0.5).exp();
    let rc = sc.classical_density().unwrap();
    let perturbed = DensityField::new(
        ScalarField::new(grid, rc.values().iter().zip(grid.coords()).map(|(r, z)| r + bump(z)).collect()).unwrap(),
    )
    .unwrap();
    let ctrl = StepControl::rosenbrock(1e-4, 1e-6);
    let base = evolve_barometric(&sc, &rc, tau, &ctrl).map_err(|e| e.to_string())?.final_state.rho;
    let full = evolve_barometric(&sc, &perturbed, tau, &ctrl).map_err(|e| e.to_string())?.final_state.rho;
    let w0 = ScalarField::from_fn(grid, bump);
    let lin = evolve_linear_correction(&sc, &w0, tau, &CorrectionControl::new(1e-4).with_operator(op))
        .map_err(|e| e.to_string())?;
    Ok(full
        .values()
        .iter()
        .zip(base.values())
        .zip(lin.last().w.values())
        .map(|((f, b), l)| (f - b - l).abs())
        .sum::<f64>()
        * grid.dx)
}

fn barometric() -> Check {
    let sc = column(0.0, 300);
    let rho0 = sc.classical_density().unwrap();
    let tr = evolve_barometric(&sc, &rho0, 1.0, &StepControl::explicit(1e-3)).map_err(|e| e.to_string())?;
    let drift = tr.final_state.rho.values().iter().zip(rho0.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // kappa = 0: the correction operator is w'' + w' on the same stencils
    let w: Vec<f64> = sc.grid.coords().iter().map(|z| (1.7 * z).sin() * (-0.2 * z).exp()).collect();
    let dx = sc.grid.dx;
    let reduction = [CorrectionOperator::Published, CorrectionOperator::Linearized]
        .iter()
        .flat_map(|&op| {
            let rhs = correction_rhs(&sc, &w, op);
            let w = &w;
            (1..w.len() - 1).map(move |i| {
                let ad = (w[i + 1] - 2.0 * w[i] + w[i - 1]) / (dx * dx) + (w[i + 1] - w[i - 1]) / (2.0 * dx);
                (rhs[i] - ad).abs() / (1.0 + ad.abs())
            })
        })
        .fold(0.0, f64::max);

    let kappas = [0.04, 0.02, 0.01, 0.005];
    let d = kappas
        .iter()
        .map(|&k| decomposition_discrepancy(k, 0.02 * k / 0.08, CorrectionOperator::Published))
        .collect::<Result<Vec<_>, _>>()?;
    let slopes = log2_slopes(&d);
    ensure(
        tr.steps >= 1000 && drift < 1e-6 && reduction < 1e-12 && slopes.iter().all(|s| (s - 2.0).abs() < 0.3),
        format!(
            "fixed point drift {drift:.1e} over {} steps, kappa = 0 mismatch {reduction:.1e}, consistency slopes {slopes:.2?}",
            tr.steps
        ),
    )
}

/// Not a criterion: the same discrepancy with the bump amplitude held fixed,
/// for both correction operators.
fn fixed_amplitude_diagnostic() -> String {
    let run =
        |op| -> Vec<f64> { [0.04, 0.02].iter().map(|&k| decomposition_discrepancy(k, 0.02, op).unwrap()).collect() };
    let (p, l) = (run(CorrectionOperator::Published), run(CorrectionOperator::Linearized));
    format!(
        "fixed amplitude: published slope {:.2} ({:.1e}), linearized slope {:.2} ({:.1e})",
        log2_slopes(&p)[0],
        p[0],
        log2_slopes(&l)[0],
        l[0]
    )
}

fn cli_bytes(dir: &Path, config: &Path, kind: &str) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_tqdiff"))
        .args([kind, config.to_str().unwrap(), "--output-dir", dir.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?
        .status;
    if !status.success() {
        return Err(format!("tqdiff exited with {status}"));
    }
    fs::read(dir.join("snapshots.csv")).map_err(|e| e.to_string())
}

fn structural_invariants() -> Check {
    let g = Grid1D::spanning(-8.0, 8.0, 401, Boundary::Decay).unwrap();
    let u = ScalarField::from_fn(g, |x| 0.5 * x * x + 0.1 * x.powi(3) / (1.0 + x * x));
    let rho = DensityField::gaussian(g, 1.0, 0.5).unwrap();
    let s = SimState::new(rho, u, reduced(0.5, 2.0), Mode::ThermoQuantum).unwrap();
    let tr =
        evolve(&s, 5.0, &StepControl::rosenbrock(1e-4, 1e-4).with_output_interval(0.5)).map_err(|e| e.to_string())?;
    let mass = tr.snapshots.iter().map(|s| (s.mass - 1.0).abs()).fold(0.0, f64::max);
    let clamps: u64 = tr.snapshots.iter().map(|s| s.clamp_count).max().unwrap_or(0);

    let errs: Vec<f64> = [201usize, 401, 801]
        .iter()
        .map(|&n| {
            let g = Grid1D::spanning(-6.0, 6.0, n, Boundary::Decay).unwrap();
            let rho = DensityField::normalized_from_fn(g, |x| (-(x * x) / 2.0).exp() * (1.0 + 0.3 * (1.3 * x).cos()))
                .unwrap();
            gibbs_duhem_residual(&rho, 1.0, 1.0).unwrap().max_abs()
        })
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();

    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/evolve_harmonic.conf");
    let a = cli_bytes(&tmp.path().join("a"), &config, "evolve")?;
    let b = cli_bytes(&tmp.path().join("b"), &config, "evolve")?;
    ensure(
        mass <= 1e-8 && clamps == 0 && ratios.iter().all(|&r| r >= 3.0) && a == b,
        format!(
            "mass drift {mass:.1e}, clamps {clamps}, Gibbs-Duhem ratios {ratios:.2?}, CLI output identical: {}",
            a == b
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("msd crossover and inverse", 1, msd_crossover),
        ("PDE variance follows the dispersion law", 60, pde_matches_law),
        ("classical limits", 30, classical_limits),
        ("equilibrium ground state and continuation", 10, equilibrium_bvp),
        ("strong-barrier tail against WKB", 10, wkb_regime),
        ("stationary tunneling", 10, tunneling_stationary),
        ("plasma identities", 1, plasma_identities),
        ("electron T_g and thermal length", 1, electron_figures),
        ("barometric column and correction", 60, barometric),
        ("structural invariants", 120, structural_invariants),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let (verdict, detail) = match &outcome {
            Ok(d) if in_time => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {budget} s budget")),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("[{verdict}] {:>2}. {name}: {detail} ({:.2} s / {budget} s)", i + 1, elapsed.as_secs_f64());
        if verdict == "FAIL" {
            failed.push(i + 1);
        }
        if i == 8 {
            println!("[INFO]  9. {}", fixed_amplitude_diagnostic());
        }
    }
    if failed.is_empty() {
        println!("all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
