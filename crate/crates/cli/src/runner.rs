//! Executes a parsed scenario and writes its artifacts.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;
use tqdiff_core::barometric::{
    evolve_barometric, evolve_linear_correction, write_density_csv, BarometricScenario, CorrectionControl,
};
use tqdiff_core::equilibrium::{solve_equilibrium_with, NewtonOptions};
use tqdiff_core::msd::{log_times, DispersionCurve};
use tqdiff_core::params::consistency_time;
use tqdiff_core::plasma::{
    dq_minimum, evolve_spectrum, harmonics, log_spaced, real_space_profile, write_profile_csv, write_spectrum_csv,
    PlasmaParams, SpectralState,
};
use tqdiff_core::smoluchowski::{
    evolve, write_series_csv, write_snapshots_csv, Scheme, SimState, Snapshot, StepControl,
};
use tqdiff_core::tunneling::{
    classical_ergodic_density, evolve_tunneling, semiclassical_density, stationary_fixed_point, write_densities_csv,
    PicardOptions, TunnelingScenario,
};
use tqdiff_core::{derive_scales, make_unit_system, Boundary, DensityField, Grid1D, PhysicalParams, ScalarField};

use crate::config::{
    parse_config_as, BarometricStart, ConfigErrors, GridSpec, KappaSource, PotentialSpec, Scenario, ScenarioConfig,
    ScenarioKind, UnitMode,
};

pub const META_FILE: &str = "run.meta";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Solver(#[from] tqdiff_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl RunError {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
        move |source| RunError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for solver failures, 3 for bad input, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 3,
            RunError::Solver(e) if e.is_convergence() => 2,
            RunError::Solver(tqdiff_core::Error::DegenerateDensity(_)) => 2,
            RunError::Solver(_) => 3,
            RunError::Io { .. } => 1,
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "convergence",
            3 => "configuration",
            _ => "io",
        }
    }
}

/// Summary of a finished run, in the order it is written to `run.meta`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub values: Vec<(String, String)>,
    pub outputs: Vec<String>,
}

impl RunReport {
    fn put(&mut self, key: &str, value: impl ToString) {
        self.values.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Conversion between the file's units and the solvers' internal units.
#[derive(Debug, Clone, Copy)]
struct Scaling {
    length: f64,
    time: f64,
    energy: f64,
}

impl Scaling {
    fn for_config(cfg: &ScenarioConfig) -> (Self, PhysicalParams) {
        match cfg.units {
            UnitMode::Reduced => (Self { length: 1.0, time: 1.0, energy: 1.0 }, cfg.params),
            UnitMode::Si => {
                let u = make_unit_system(&cfg.params);
                (Self { length: u.length, time: u.time, energy: u.energy }, u.reduce(&cfg.params))
            }
        }
    }

    fn grid(&self, g: &GridSpec) -> tqdiff_core::Result<Grid1D> {
        Grid1D::spanning(g.x_min / self.length, g.x_max / self.length, g.n, g.boundary)
    }

    /// The internal grid expressed in file units.
    fn outer_grid(&self, g: &Grid1D) -> Grid1D {
        Grid1D { x0: g.x0 * self.length, dx: g.dx * self.length, ..*g }
    }

    fn density(&self, rho: &DensityField) -> tqdiff_core::Result<DensityField> {
        let values = rho.values().iter().map(|r| r / self.length).collect();
        DensityField::new(ScalarField::new(self.outer_grid(rho.grid()), values)?)
    }

    fn snapshot(&self, s: &Snapshot) -> tqdiff_core::Result<Snapshot> {
        Ok(Snapshot {
            t: s.t * self.time,
            rho: self.density(&s.rho)?,
            variance: s.variance * self.length * self.length,
            mass: s.mass,
            clamp_count: s.clamp_count,
        })
    }
}

fn table_potential(path: &Path) -> Result<Vec<(f64, f64)>, RunError> {
    let text = fs::read_to_string(path).map_err(RunError::io(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        match (
            cols.len(),
            cols.first().and_then(|c| c.parse::<f64>().ok()),
            cols.get(1).and_then(|c| c.parse::<f64>().ok()),
        ) {
            (2, Some(x), Some(u)) => rows.push((x, u)),
            _ if i == 0 && rows.is_empty() => continue,
            _ => {
                return Err(tqdiff_core::Error::Configuration(format!(
                    "{}: line {}: expected `x,U`",
                    path.display(),
                    i + 1
                ))
                .into())
            }
        }
    }
    if rows.len() < 2 || rows.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(tqdiff_core::Error::Configuration(format!(
            "{}: need at least two rows with increasing x",
            path.display()
        ))
        .into());
    }
    Ok(rows)
}

fn interpolate(rows: &[(f64, f64)], x: f64) -> Option<f64> {
    let k = rows.partition_point(|r| r.0 < x);
    if k == 0 {
        return (x == rows[0].0).then_some(rows[0].1);
    }
    let (x1, u1) = *rows.get(k)?;
    let (x0, u0) = rows[k - 1];
    Some(u0 + (u1 - u0) * (x - x0) / (x1 - x0))
}

/// Samples the potential on the internal grid, in internal energy units.
fn potential_field(
    spec: &PotentialSpec,
    grid: &Grid1D,
    sc: &Scaling,
    p: &PhysicalParams,
    base: &Path,
) -> Result<ScalarField, RunError> {
    let mass = p.mass * sc.energy * sc.time * sc.time / (sc.length * sc.length);
    let outer = |x: f64| x * sc.length;
    let values: Vec<f64> = match spec {
        PotentialSpec::Free => vec![0.0; grid.n],
        PotentialSpec::Harmonic { omega, center } => {
            grid.coords().into_iter().map(|x| 0.5 * mass * omega * omega * (outer(x) - center).powi(2)).collect()
        }
        PotentialSpec::Linear { slope } => grid.coords().into_iter().map(|x| slope * outer(x)).collect(),
        PotentialSpec::Barrier { height, width, center } => grid
            .coords()
            .into_iter()
            .map(|x| if (outer(x) - center).abs() < 0.5 * width { *height } else { 0.0 })
            .collect(),
        PotentialSpec::Table { path } => {
            let path = base.join(path);
            let rows = table_potential(&path)?;
            grid.coords()
                .into_iter()
                .map(|x| {
                    interpolate(&rows, outer(x)).ok_or_else(|| {
                        tqdiff_core::Error::Configuration(format!(
                            "{}: grid point {} lies outside the table",
                            path.display(),
                            outer(x)
                        ))
                    })
                })
                .collect::<tqdiff_core::Result<_>>()?
        }
    };
    Ok(ScalarField::new(*grid, values.into_iter().map(|u| u / sc.energy).collect())?)
}

fn create(dir: &Path, name: &str, report: &mut RunReport) -> Result<(BufWriter<File>, PathBuf), RunError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(RunError::io(&path))?;
    report.outputs.push(name.to_string());
    Ok((BufWriter::new(f), path))
}

fn write_with(
    dir: &Path,
    name: &str,
    report: &mut RunReport,
    body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> Result<(), RunError> {
    let (mut w, path) = create(dir, name, report)?;
    body(&mut w).and_then(|_| w.flush()).map_err(RunError::io(&path))
}

fn put_scales(report: &mut RunReport, p: &PhysicalParams) {
    let Ok(s) = derive_scales(p) else { return };
    let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:e}"));
    report.put("derived.diffusion", format!("{:e}", s.diffusion));
    report.put("derived.thermal_length", opt(s.thermal_length));
    report.put("derived.matsubara_frequency", format!("{:e}", s.matsubara_frequency));
    report.put("derived.debye_length", opt(s.debye_length));
    report.put("derived.plasma_frequency", opt(s.plasma_frequency));
    report.put("derived.inverse_height", opt(s.inverse_height));
    report.put("derived.gravity_temperature", opt(s.gravity_temperature));
    if let Ok(t) = consistency_time(&s, p) {
        report.put("derived.consistency_time", format!("{t:e}"));
    }
}

/// Runs a validated scenario, writing CSVs into `dir`. Relative paths in the
/// config (potential tables) are resolved against `base`.
pub fn run(cfg: &ScenarioConfig, dir: &Path, base: &Path) -> Result<RunReport, RunError> {
    let mut report = RunReport::default();
    put_scales(&mut report, &cfg.params);
    match &cfg.scenario {
        Scenario::Msd { t_min, t_max, n } => {
            let curve = DispersionCurve::compute(&log_times(*t_min, *t_max, *n)?, &cfg.params)?;
            write_with(dir, "msd.csv", &mut report, |w| curve.write_csv(w))?;
            let last = curve.points().last().expect("at least two points");
            report.put("result.final_sigma_x2", format!("{:e}", last.sigma_x2));
        }
        Scenario::Evolve { grid, potential, center, sigma, mode, t_end, output_interval, scheme, dt, tolerance } => {
            let (sc, p) = Scaling::for_config(cfg);
            let g = sc.grid(grid)?;
            let u = potential_field(potential, &g, &sc, &cfg.params, base)?;
            let rho = DensityField::gaussian(g, center / sc.length, (sigma / sc.length).powi(2))?;
            let state = SimState::new(rho, u, p, *mode)?;
            let base_ctrl = match scheme {
                Scheme::Explicit => StepControl::explicit(dt / sc.time),
                Scheme::Rosenbrock => StepControl::rosenbrock(dt / sc.time, *tolerance),
            };
            let ctrl = base_ctrl.with_output_interval(output_interval / sc.time);
            let tr = evolve(&state, t_end / sc.time, &ctrl)?;
            let snaps = tr.snapshots.iter().map(|s| sc.snapshot(s)).collect::<tqdiff_core::Result<Vec<_>>>()?;
            write_with(dir, "snapshots.csv", &mut report, |w| write_snapshots_csv(&snaps, w))?;
            write_with(dir, "series.csv", &mut report, |w| write_series_csv(&snaps, w))?;
            let last = snaps.last().expect("a trajectory has snapshots");
            report.put("result.steps", tr.steps);
            report.put("result.rejected_steps", tr.rejected_steps);
            report.put("result.final_variance", format!("{:e}", last.variance));
            report.put("result.final_mass", format!("{:e}", last.mass));
            report.put("result.clamp_count", last.clamp_count);
        }
        Scenario::Equilibrium { grid, potential, mode, tolerance, max_iterations } => {
            let (sc, p) = Scaling::for_config(cfg);
            let g = sc.grid(grid)?;
            let u = potential_field(potential, &g, &sc, &cfg.params, base)?;
            let opts = NewtonOptions { tolerance: *tolerance, max_iterations: *max_iterations, ..Default::default() };
            let sol = solve_equilibrium_with(&u, &p, *mode, &opts)?;
            let rho = sc.density(&sol.rho_eq)?;
            write_with(dir, "equilibrium.csv", &mut report, |w| {
                writeln!(w, "x,rho_eq,U")?;
                for (i, (r, u)) in rho.values().iter().zip(sol.potential.values()).enumerate() {
                    writeln!(w, "{:.12e},{:.12e},{:.12e}", rho.grid().x(i), r, u * sc.energy)?;
                }
                Ok(())
            })?;
            report.put("result.free_energy", format!("{:.12e}", sol.free_energy * sc.energy));
            report.put("result.iterations", sol.iterations);
            report.put("result.residual", format!("{:e}", sol.residuals.last().copied().unwrap_or(0.0)));
        }
        Scenario::Tunnel { grid, potential, energy, damping, tolerance, max_iterations, evolution } => {
            let (sc, p) = Scaling::for_config(cfg);
            let g = sc.grid(grid)?;
            let u = potential_field(potential, &g, &sc, &cfg.params, base)?;
            let scenario = TunnelingScenario::new(u, energy / sc.energy, p)?;
            let classical = classical_ergodic_density(&scenario)?;
            let semi = semiclassical_density(&scenario)?;
            let opts = PicardOptions { damping: *damping, tolerance: *tolerance, max_iterations: *max_iterations };
            let fixed = stationary_fixed_point(&scenario, &semi, &opts)?;
            let (c, s, f) = (sc.density(&classical)?, sc.density(&semi)?, sc.density(&fixed.rho)?);
            write_with(dir, "densities.csv", &mut report, |w| write_densities_csv(&c, &s, &f, w))?;
            report.put("result.picard_iterations", fixed.iterations);
            report.put("result.picard_residual", format!("{:e}", fixed.residual));
            report.put("result.floored_nodes", fixed.floored);
            if let Some((dt, t_end, out)) = evolution {
                let run = evolve_tunneling(&scenario, &classical, dt / sc.time, t_end / sc.time, out / sc.time)?;
                let snaps = run.snapshots.iter().map(|s| sc.snapshot(s)).collect::<tqdiff_core::Result<Vec<_>>>()?;
                write_with(dir, "snapshots.csv", &mut report, |w| write_snapshots_csv(&snaps, w))?;
                write_with(dir, "series.csv", &mut report, |w| write_series_csv(&snaps, w))?;
                report.put("result.steps", run.steps);
                report.put("result.inflow", format!("{:e}", run.inflow));
                report.put("result.outflow", format!("{:e}", run.outflow));
                report.put("result.clamp_count", snaps.last().map_or(0, |s| s.clamp_count));
            }
        }
        Scenario::Plasma { q_min, q_max, n, t, profile } => {
            let pp = PlasmaParams::new(cfg.params)?;
            let m = dq_minimum(&pp);
            let mut q = log_spaced(*q_min, *q_max, *n)?;
            let k = q.partition_point(|&x| x < m.q_star);
            if q.get(k) != Some(&m.q_star) {
                q.insert(k, m.q_star);
            }
            write_with(dir, "spectrum.csv", &mut report, |w| {
                write_spectrum_csv(&q, &pp, w).map_err(|e| io::Error::other(e.to_string()))
            })?;
            let unit = SpectralState::from_real(q.clone(), &vec![1.0; q.len()])?.with_zero_mode(0.0)?;
            let state = evolve_spectrum(&unit, &pp, *t)?;
            write_with(dir, "state.csv", &mut report, |w| state.write_csv(w))?;
            if let Some(pr) = profile {
                let grid = Grid1D::new(-0.5 * pr.period, pr.period / pr.n as f64, pr.n, Boundary::Periodic)?;
                let qs = harmonics(pr.period, pr.modes)?;
                let amps: Vec<f64> = qs.iter().map(|q| (-0.5 * (q * pr.width).powi(2)).exp()).collect();
                let st = evolve_spectrum(&SpectralState::from_real(qs, &amps)?, &pp, *t)?;
                let prof = real_space_profile(&st, &grid, &pp)?;
                write_with(dir, "profile.csv", &mut report, |w| write_profile_csv(&prof, w))?;
            }
            report.put("result.q_star", format!("{:e}", m.q_star));
            report.put("result.d_min", format!("{:e}", m.d_min));
            report.put("result.d_min_energy_form", format!("{:e}", m.d_min_energy));
            report.put("result.identity_residual", format!("{:e}", m.identity_residual()));
            report.put("result.zero_mode", format!("{:e}", state.zero_mode));
        }
        Scenario::Barometric { kappa, zeta_max, n, tau_end, output_interval, tolerance, start, correction } => {
            let grid = BarometricScenario::column(*zeta_max, *n)?;
            let bs = match kappa {
                KappaSource::Given(k) => BarometricScenario::from_kappa(*k, grid)?,
                KappaSource::FromParams => BarometricScenario::from_params(&cfg.params, grid)?,
            };
            let rho0 = match start {
                BarometricStart::Classical => bs.classical_density()?,
                BarometricStart::Gaussian { center, sigma } => DensityField::gaussian(grid, *center, sigma * sigma)?,
            };
            let ctrl = StepControl::rosenbrock(1e-3, *tolerance).with_output_interval(*output_interval);
            let tr = evolve_barometric(&bs, &rho0, *tau_end, &ctrl)?;
            write_with(dir, "density.csv", &mut report, |w| write_density_csv(&tr.snapshots, w))?;
            report.put("result.kappa", format!("{:e}", bs.kappa));
            report.put("result.t_g", format!("{:e}", bs.t_g));
            report.put("result.steps", tr.steps);
            report.put("result.final_mass", format!("{:e}", tr.final_state.mass()));
            report.put("result.clamp_count", tr.final_state.clamp_count);
            if let Some(c) = correction {
                let w0 =
                    ScalarField::from_fn(grid, |z| c.amplitude * (-0.5 * ((z - c.center) / c.width).powi(2)).exp());
                let cc = CorrectionControl::new(c.dt).with_output_interval(*output_interval).with_operator(c.operator);
                let run = evolve_linear_correction(&bs, &w0, *tau_end, &cc)?;
                write_with(dir, "correction.csv", &mut report, |w| run.write_csv(w))?;
                report.put("result.correction_steps", run.steps);
            }
        }
    }
    Ok(report)
}

fn write_meta(
    dir: &Path,
    cfg: Option<&ScenarioConfig>,
    source: &Path,
    outcome: &Result<RunReport, RunError>,
    seconds: f64,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(META_FILE))?);
    writeln!(w, "config = {}", source.display())?;
    match outcome {
        Ok(_) => {
            writeln!(w, "status = ok")?;
            writeln!(w, "exit_code = 0")?;
        }
        Err(e) => {
            writeln!(w, "status = error")?;
            writeln!(w, "exit_code = {}", e.exit_code())?;
            writeln!(w, "error_category = {}", e.category())?;
            writeln!(w, "error = {}", e.to_string().replace('\n', " "))?;
        }
    }
    writeln!(w, "wall_time_s = {seconds:.3}")?;
    if let Some(cfg) = cfg {
        writeln!(w, "scenario = {}", cfg.kind)?;
        for (k, v) in &cfg.entries {
            writeln!(w, "input.{k} = {v}")?;
        }
        for warning in &cfg.warnings {
            writeln!(w, "warning = {warning}")?;
        }
    }
    if let Ok(report) = outcome {
        for (k, v) in &report.values {
            writeln!(w, "{k} = {v}")?;
        }
        writeln!(w, "outputs = {}", report.outputs.join(","))?;
    }
    w.flush()
}

/// Result of one config file run end to end.
#[derive(Debug)]
pub struct Outcome {
    pub config: PathBuf,
    pub dir: PathBuf,
    pub result: Result<RunReport, RunError>,
    pub warnings: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.result.as_ref().map_or_else(RunError::exit_code, |_| 0)
    }
}

/// Reads, validates and runs one config file. Artifacts go to `out_dir` if
/// given, else to the config's `output.dir`, else to the current directory;
/// `run.meta` is written in every case where the directory can be created.
pub fn run_file(kind: Option<ScenarioKind>, path: &Path, out_dir: Option<&Path>) -> Outcome {
    let started = Instant::now();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parsed = fs::read_to_string(path)
        .map_err(RunError::io(path))
        .and_then(|text| parse_config_as(&text, kind).map_err(RunError::from));
    let cfg = parsed.as_ref().ok();
    let dir = match (out_dir, cfg.and_then(|c| c.output_dir.as_deref())) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from("."),
    };
    let result = match fs::create_dir_all(&dir).map_err(RunError::io(&dir)) {
        Err(e) => Err(e),
        Ok(()) => match &parsed {
            Ok(cfg) => run(cfg, &dir, &base),
            Err(RunError::Config(e)) => Err(RunError::Config(e.clone())),
            Err(RunError::Io { path, source }) => {
                Err(RunError::Io { path: path.clone(), source: io::Error::new(source.kind(), source.to_string()) })
            }
            Err(RunError::Solver(e)) => Err(RunError::Solver(e.clone())),
        },
    };
    let result = match write_meta(&dir, cfg, path, &result, started.elapsed().as_secs_f64()) {
        Ok(()) => result,
        Err(source) if result.is_ok() => Err(RunError::Io { path: dir.join(META_FILE), source }),
        Err(_) => result,
    };
    let warnings = cfg.map(|c| c.warnings.clone()).unwrap_or_default();
    Outcome { config: path.to_path_buf(), dir, result, warnings }
}

/// Runs several configs on up to `jobs` threads. With more than one config
/// each gets its own subdirectory named after the file stem.
pub fn run_many(kind: Option<ScenarioKind>, paths: &[PathBuf], out_dir: Option<&Path>, jobs: usize) -> Vec<Outcome> {
    if paths.len() == 1 {
        return vec![run_file(kind, &paths[0], out_dir)];
    }
    let root = out_dir.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(paths.len()));
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, paths.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = paths.get(i) else { break };
                let stem = path.file_stem().map_or_else(|| format!("run{i}"), |s| s.to_string_lossy().into_owned());
                let outcome = run_file(kind, path, Some(&root.join(stem)));
                results.lock().expect("no thread panics while holding the lock").push((i, outcome));
            });
        }
    });
    let mut results = results.into_inner().expect("threads have finished");
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, o)| o).collect()
}
