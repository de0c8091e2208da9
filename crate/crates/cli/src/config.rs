//! Flat `section.key = value` scenario files.
//!
//! ```text
//! # free thermo-quantum electron
//! scenario.kind = evolve
//! params.m = 9.109e-31 kg
//! params.b = 1e-16 kg/s
//! params.T = 300 K
//! grid.x_min = -2e-8 m
//! ```
//!
//! A value is a number or word, optionally followed by a unit. Units are
//! only checked, never converted: SI values must already be in base units.
//! The word `reduced` marks a value as being in reduced units, and a file
//! may not mix it with SI units.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use tqdiff_core::barometric::CorrectionOperator;
use tqdiff_core::params::PlasmaConstants;
use tqdiff_core::smoluchowski::Scheme;
use tqdiff_core::{Boundary, Mode, PhysicalParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioKind {
    Msd,
    Evolve,
    Equilibrium,
    Tunnel,
    Plasma,
    Barometric,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Msd,
        ScenarioKind::Evolve,
        ScenarioKind::Equilibrium,
        ScenarioKind::Tunnel,
        ScenarioKind::Plasma,
        ScenarioKind::Barometric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Msd => "msd",
            ScenarioKind::Evolve => "evolve",
            ScenarioKind::Equilibrium => "equilibrium",
            ScenarioKind::Tunnel => "tunnel",
            ScenarioKind::Plasma => "plasma",
            ScenarioKind::Barometric => "barometric",
        }
    }

    /// Sections a scenario of this kind reads.
    fn sections(self) -> &'static [&'static str] {
        match self {
            ScenarioKind::Msd => &["scenario", "params", "time", "output"],
            ScenarioKind::Evolve => &["scenario", "params", "grid", "potential", "initial", "time", "solver", "output"],
            ScenarioKind::Equilibrium => &["scenario", "params", "grid", "potential", "solver", "output"],
            ScenarioKind::Tunnel => &["scenario", "params", "grid", "potential", "tunnel", "time", "solver", "output"],
            ScenarioKind::Plasma => &["scenario", "params", "plasma", "spectrum", "profile", "output"],
            ScenarioKind::Barometric => &["scenario", "params", "gravity", "barometric", "output"],
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown scenario kind `{s}`"))
    }
}

/// Physical dimension of a value, for unit-suffix checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    Count,
    Word,
    Pure,
    Mass,
    Friction,
    Temperature,
    Action,
    Entropy,
    Length,
    Time,
    Energy,
    Frequency,
    Force,
    Acceleration,
    NumberDensity,
    Permittivity,
    Charge,
    Wavenumber,
}

impl Dim {
    fn si_units(self) -> &'static [&'static str] {
        match self {
            Dim::Count | Dim::Word | Dim::Pure => &[],
            Dim::Mass => &["kg"],
            Dim::Friction => &["kg/s"],
            Dim::Temperature => &["K"],
            Dim::Action => &["J*s", "Js"],
            Dim::Entropy => &["J/K"],
            Dim::Length => &["m"],
            Dim::Time => &["s"],
            Dim::Energy => &["J"],
            Dim::Frequency => &["1/s", "Hz", "rad/s"],
            Dim::Force => &["N"],
            Dim::Acceleration => &["m/s^2", "m/s2"],
            Dim::NumberDensity => &["m^-3", "1/m^3"],
            Dim::Permittivity => &["F/m"],
            Dim::Charge => &["C"],
            Dim::Wavenumber => &["1/m", "m^-1"],
        }
    }

    fn physical(self) -> bool {
        !matches!(self, Dim::Count | Dim::Word | Dim::Pure)
    }
}

const KEYS: &[(&str, Dim)] = &[
    ("scenario.kind", Dim::Word),
    ("params.units", Dim::Word),
    ("params.m", Dim::Mass),
    ("params.b", Dim::Friction),
    ("params.T", Dim::Temperature),
    ("params.hbar", Dim::Action),
    ("params.kb", Dim::Entropy),
    ("plasma.permittivity", Dim::Permittivity),
    ("plasma.charge", Dim::Charge),
    ("plasma.density", Dim::NumberDensity),
    ("gravity.g", Dim::Acceleration),
    ("grid.x_min", Dim::Length),
    ("grid.x_max", Dim::Length),
    ("grid.n", Dim::Count),
    ("grid.boundary", Dim::Word),
    ("potential.kind", Dim::Word),
    ("potential.omega", Dim::Frequency),
    ("potential.center", Dim::Length),
    ("potential.slope", Dim::Force),
    ("potential.height", Dim::Energy),
    ("potential.width", Dim::Length),
    ("potential.table", Dim::Word),
    ("initial.center", Dim::Length),
    ("initial.sigma", Dim::Length),
    ("time.t_min", Dim::Time),
    ("time.t_max", Dim::Time),
    ("time.n", Dim::Count),
    ("time.t_end", Dim::Time),
    ("time.output_interval", Dim::Time),
    ("solver.mode", Dim::Word),
    ("solver.scheme", Dim::Word),
    ("solver.dt", Dim::Time),
    ("solver.tolerance", Dim::Pure),
    ("solver.max_iterations", Dim::Count),
    ("solver.damping", Dim::Pure),
    ("tunnel.energy", Dim::Energy),
    ("spectrum.q_min", Dim::Wavenumber),
    ("spectrum.q_max", Dim::Wavenumber),
    ("spectrum.n", Dim::Count),
    ("spectrum.t", Dim::Time),
    ("profile.period", Dim::Length),
    ("profile.n", Dim::Count),
    ("profile.modes", Dim::Count),
    ("profile.width", Dim::Length),
    ("barometric.kappa", Dim::Pure),
    ("barometric.zeta_max", Dim::Pure),
    ("barometric.n", Dim::Count),
    ("barometric.tau_end", Dim::Pure),
    ("barometric.output_interval", Dim::Pure),
    ("barometric.tolerance", Dim::Pure),
    ("barometric.start", Dim::Word),
    ("barometric.start_center", Dim::Pure),
    ("barometric.start_sigma", Dim::Pure),
    ("barometric.correction", Dim::Word),
    ("barometric.correction_amplitude", Dim::Pure),
    ("barometric.correction_center", Dim::Pure),
    ("barometric.correction_width", Dim::Pure),
    ("barometric.correction_dt", Dim::Pure),
    ("output.dir", Dim::Word),
];

fn dim_of(key: &str) -> Option<Dim> {
    KEYS.iter().find(|(k, _)| *k == key).map(|&(_, d)| d)
}

/// One problem found in a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every problem found, not just the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<Issue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&lines.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitMode {
    Si,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialSpec {
    Free,
    /// `m omega^2 (x - center)^2 / 2`
    Harmonic {
        omega: f64,
        center: f64,
    },
    /// `slope * x`
    Linear {
        slope: f64,
    },
    /// `height` on `|x - center| < width / 2`, zero elsewhere.
    Barrier {
        height: f64,
        width: f64,
        center: f64,
    },
    /// Two-column `x,U` CSV, linearly interpolated.
    Table {
        path: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSpec {
    pub period: f64,
    pub n: usize,
    pub modes: usize,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BarometricStart {
    Classical,
    Gaussian { center: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionSpec {
    pub operator: CorrectionOperator,
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaSource {
    Given(f64),
    FromParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Msd {
        t_min: f64,
        t_max: f64,
        n: usize,
    },
    Evolve {
        grid: GridSpec,
        potential: PotentialSpec,
        center: f64,
        sigma: f64,
        mode: Mode,
        t_end: f64,
        output_interval: f64,
        scheme: Scheme,
        dt: f64,
        tolerance: f64,
    },
    Equilibrium {
        grid: GridSpec,
        potential: PotentialSpec,
        mode: Mode,
        tolerance: f64,
        max_iterations: usize,
    },
    Tunnel {
        grid: GridSpec,
        potential: PotentialSpec,
        energy: f64,
        damping: f64,
        tolerance: f64,
        max_iterations: usize,
        /// `(dt, t_end, output_interval)` when the Bohm-velocity transport is
        /// to be run as well.
        evolution: Option<(f64, f64, f64)>,
    },
    Plasma {
        q_min: f64,
        q_max: f64,
        n: usize,
        t: f64,
        profile: Option<ProfileSpec>,
    },
    Barometric {
        kappa: KappaSource,
        zeta_max: f64,
        n: usize,
        tau_end: f64,
        output_interval: f64,
        tolerance: f64,
        start: BarometricStart,
        correction: Option<CorrectionSpec>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub units: UnitMode,
    pub params: PhysicalParams,
    pub scenario: Scenario,
    pub output_dir: Option<String>,
    /// Every `key = value` pair as written, sorted by key.
    pub entries: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

struct Entry {
    line: usize,
    number: Option<f64>,
    word: String,
    unit: Option<String>,
}

/// Typed access to the parsed entries, collecting problems as it goes.
struct Reader {
    entries: BTreeMap<String, Entry>,
    used: BTreeSet<String>,
    issues: Vec<Issue>,
}

impl Reader {
    fn issue(&mut self, line: Option<usize>, message: String) {
        self.issues.push(Issue { line, message });
    }

    fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn number(&mut self, key: &str) -> Option<f64> {
        self.used.insert(key.to_string());
        let e = self.entries.get(key)?;
        match e.number {
            Some(v) => Some(v),
            None => {
                let (line, word) = (e.line, e.word.clone());
                self.issue(Some(line), format!("`{key}` must be a number, got `{word}`"));
                None
            }
        }
    }

    fn required(&mut self, key: &str) -> Option<f64> {
        if !self.has(key) {
            self.used.insert(key.to_string());
            self.issue(None, format!("missing required key `{key}`"));
            return None;
        }
        self.number(key)
    }

    fn positive(&mut self, key: &str, default: Option<f64>) -> Option<f64> {
        let v = match default {
            Some(d) if !self.has(key) => return Some(d),
            _ => self.required(key)?,
        };
        if v.is_finite() && v > 0.0 {
            Some(v)
        } else {
            let line = self.entries.get(key).map(|e| e.line);
            self.issue(line, format!("`{key}` must be positive, got {v}"));
            None
        }
    }

    fn optional(&mut self, key: &str, default: f64) -> Option<f64> {
        if self.has(key) {
            self.number(key)
        } else {
            self.used.insert(key.to_string());
            Some(default)
        }
    }

    fn count(&mut self, key: &str, default: Option<usize>) -> Option<usize> {
        let v = match default {
            Some(d) if !self.has(key) => {
                self.used.insert(key.to_string());
                return Some(d);
            }
            _ => self.required(key)?,
        };
        if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
            Some(v as usize)
        } else {
            let line = self.entries.get(key).map(|e| e.line);
            self.issue(line, format!("`{key}` must be a positive integer, got {v}"));
            None
        }
    }

    fn word(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.entries.get(key).map(|e| e.word.clone())
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: T) -> Option<T>
    where
        T::Err: fmt::Display,
    {
        match self.word(key) {
            None => Some(default),
            Some(w) => match w.parse() {
                Ok(v) => Some(v),
                Err(e) => {
                    let line = self.entries.get(key).map(|e| e.line);
                    self.issue(line, format!("`{key}`: {e}"));
                    None
                }
            },
        }
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "thermo_quantum" => Ok(Mode::ThermoQuantum),
        "classical" => Ok(Mode::Classical),
        "pure_quantum" => Ok(Mode::PureQuantum),
        other => Err(format!("unknown mode `{other}` (thermo_quantum, classical, pure_quantum)")),
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "explicit" => Ok(Scheme::Explicit),
        "rosenbrock" => Ok(Scheme::Rosenbrock),
        other => Err(format!("unknown scheme `{other}` (explicit, rosenbrock)")),
    }
}

/// Splits the file into entries; syntax errors are reported with their line.
fn tokenize(text: &str, issues: &mut Vec<Issue>) -> BTreeMap<String, Entry> {
    let mut entries = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            issues.push(Issue { line: Some(line), message: format!("expected `key = value`, got `{content}`") });
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        let well_formed = key.split('.').count() == 2
            && key.split('.').all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        if !well_formed {
            issues.push(Issue { line: Some(line), message: format!("malformed key `{key}` (expected `section.key`)") });
            continue;
        }
        if value.is_empty() {
            issues.push(Issue { line: Some(line), message: format!("`{key}` has no value") });
            continue;
        }
        let mut parts = value.splitn(2, char::is_whitespace);
        let head = parts.next().unwrap_or("").to_string();
        let unit = parts.next().map(|u| u.split_whitespace().collect::<Vec<_>>().join("*"));
        let number = head.parse::<f64>().ok();
        if number.is_none() && unit.is_some() {
            issues.push(Issue { line: Some(line), message: format!("`{key}`: `{value}` is not a number with a unit") });
            continue;
        }
        let entry = Entry { line, number, word: head, unit };
        if let Some(prev) = entries.insert(key.to_string(), entry) {
            issues.push(Issue {
                line: Some(line),
                message: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
    }
    entries
}

/// Checks every unit suffix against the key's dimension and decides
/// between SI and reduced units.
fn unit_mode(entries: &BTreeMap<String, Entry>, issues: &mut Vec<Issue>) -> UnitMode {
    let declared = entries.get("params.units").map(|e| (e.line, e.word.as_str()));
    let mut si_line = None;
    let mut reduced_line = None;
    for (key, e) in entries {
        let Some(dim) = dim_of(key) else { continue };
        let Some(unit) = &e.unit else { continue };
        if unit == "reduced" && dim.physical() {
            reduced_line.get_or_insert(e.line);
        } else if dim.si_units().contains(&unit.as_str()) {
            si_line.get_or_insert(e.line);
        } else {
            let expected = if dim.physical() {
                format!("expected one of {:?} or `reduced`", dim.si_units())
            } else {
                "expected no unit".to_string()
            };
            issues.push(Issue {
                line: Some(e.line),
                message: format!("`{key}`: unit `{unit}` does not fit; {expected}"),
            });
        }
    }
    let mode = match declared {
        Some((_, "si")) => UnitMode::Si,
        Some((_, "reduced")) => UnitMode::Reduced,
        Some((line, other)) => {
            issues.push(Issue {
                line: Some(line),
                message: format!("`params.units` must be `si` or `reduced`, got `{other}`"),
            });
            UnitMode::Si
        }
        None if reduced_line.is_some() => UnitMode::Reduced,
        None => UnitMode::Si,
    };
    match mode {
        UnitMode::Si => {
            if let Some(l) = reduced_line {
                issues.push(Issue { line: Some(l), message: "`reduced` value in a file using SI units".into() });
            }
        }
        UnitMode::Reduced => {
            if let Some(l) = si_line {
                issues.push(Issue { line: Some(l), message: "SI unit in a file using reduced units".into() });
            }
        }
    }
    mode
}

fn read_params(r: &mut Reader, units: UnitMode) -> Option<PhysicalParams> {
    let m = r.positive("params.m", None);
    let b = r.positive("params.b", None);
    let t = r.required("params.T");
    let hbar = match units {
        UnitMode::Si => r.positive("params.hbar", Some(tqdiff_core::params::constants::HBAR)),
        UnitMode::Reduced => r.positive("params.hbar", None),
    };
    let kb = match units {
        UnitMode::Si => r.positive("params.kb", Some(tqdiff_core::params::constants::KB)),
        UnitMode::Reduced => r.positive("params.kb", Some(1.0)),
    };
    let (m, b, t, hbar, kb) = (m?, b?, t?, hbar?, kb?);
    let p = PhysicalParams::reduced(m, b, t, hbar).and_then(|p| p.with_kb(kb));
    match p {
        Ok(p) => Some(p),
        Err(e) => {
            r.issue(None, e.to_string());
            None
        }
    }
}

fn read_plasma(r: &mut Reader) -> Option<PlasmaConstants> {
    let permittivity = r.positive("plasma.permittivity", None);
    let charge = r.positive("plasma.charge", None);
    let density = r.positive("plasma.density", None);
    Some(PlasmaConstants { permittivity: permittivity?, charge: charge?, density: density? })
}

fn read_grid(r: &mut Reader) -> Option<GridSpec> {
    let x_min = r.required("grid.x_min");
    let x_max = r.required("grid.x_max");
    let n = r.count("grid.n", None);
    let boundary = r.parsed("grid.boundary", Boundary::Decay);
    let (x_min, x_max) = (x_min?, x_max?);
    if !(x_max > x_min) {
        r.issue(None, format!("`grid.x_max` ({x_max}) must exceed `grid.x_min` ({x_min})"));
        return None;
    }
    Some(GridSpec { x_min, x_max, n: n?, boundary: boundary? })
}

fn read_potential(r: &mut Reader) -> Option<PotentialSpec> {
    let kind = r.word("potential.kind").unwrap_or_else(|| "free".into());
    let center = r.optional("potential.center", 0.0);
    match kind.as_str() {
        "free" => Some(PotentialSpec::Free),
        "harmonic" => {
            let omega = r.positive("potential.omega", None);
            Some(PotentialSpec::Harmonic { omega: omega?, center: center? })
        }
        "linear" => Some(PotentialSpec::Linear { slope: r.required("potential.slope")? }),
        "barrier" => {
            let height = r.required("potential.height");
            let width = r.positive("potential.width", None);
            Some(PotentialSpec::Barrier { height: height?, width: width?, center: center? })
        }
        "table" => match r.word("potential.table") {
            Some(path) => Some(PotentialSpec::Table { path }),
            None => {
                r.issue(None, "missing required key `potential.table`".into());
                None
            }
        },
        other => {
            let line = r.entries.get("potential.kind").map(|e| e.line);
            r.issue(line, format!("unknown potential `{other}` (free, harmonic, linear, barrier, table)"));
            None
        }
    }
}

fn default_mode(p: &PhysicalParams) -> Mode {
    if p.temperature > 0.0 {
        Mode::ThermoQuantum
    } else {
        Mode::PureQuantum
    }
}

fn read_mode(r: &mut Reader, p: Option<&PhysicalParams>) -> Option<Mode> {
    match r.word("solver.mode") {
        Some(w) => match parse_mode(&w) {
            Ok(m) => Some(m),
            Err(e) => {
                let line = r.entries.get("solver.mode").map(|e| e.line);
                r.issue(line, e);
                None
            }
        },
        None => p.map(default_mode),
    }
}

fn read_scenario(r: &mut Reader, kind: ScenarioKind, p: Option<&PhysicalParams>) -> Option<Scenario> {
    match kind {
        ScenarioKind::Msd => {
            let t_min = r.positive("time.t_min", None);
            let t_max = r.positive("time.t_max", None);
            let n = r.count("time.n", Some(50));
            let (t_min, t_max, n) = (t_min?, t_max?, n?);
            if !(t_max > t_min) || n < 2 {
                r.issue(None, "need `time.t_max` > `time.t_min` and `time.n` >= 2".into());
                return None;
            }
            Some(Scenario::Msd { t_min, t_max, n })
        }
        ScenarioKind::Evolve => {
            let grid = read_grid(r);
            let potential = read_potential(r);
            let center = r.optional("initial.center", 0.0);
            let sigma = r.positive("initial.sigma", None);
            let mode = read_mode(r, p);
            let t_end = r.positive("time.t_end", None);
            let output_interval = r.positive("time.output_interval", Some(f64::INFINITY));
            let scheme = match r.word("solver.scheme") {
                None => Some(Scheme::Rosenbrock),
                Some(w) => parse_scheme(&w).map_err(|e| r.issue(None, e)).ok(),
            };
            let dt = r.positive("solver.dt", None);
            let tolerance = r.positive("solver.tolerance", Some(1e-3));
            Some(Scenario::Evolve {
                grid: grid?,
                potential: potential?,
                center: center?,
                sigma: sigma?,
                mode: mode?,
                t_end: t_end?,
                output_interval: output_interval?,
                scheme: scheme?,
                dt: dt?,
                tolerance: tolerance?,
            })
        }
        ScenarioKind::Equilibrium => {
            let grid = read_grid(r);
            let potential = read_potential(r);
            let mode = read_mode(r, p);
            let tolerance = r.positive("solver.tolerance", Some(1e-8));
            let max_iterations = r.count("solver.max_iterations", Some(100));
            Some(Scenario::Equilibrium {
                grid: grid?,
                potential: potential?,
                mode: mode?,
                tolerance: tolerance?,
                max_iterations: max_iterations?,
            })
        }
        ScenarioKind::Tunnel => {
            let grid = read_grid(r);
            let potential = read_potential(r);
            let energy = r.required("tunnel.energy");
            let damping = r.positive("solver.damping", Some(0.3));
            let tolerance = r.positive("solver.tolerance", Some(1e-8));
            let max_iterations = r.count("solver.max_iterations", Some(20_000));
            let evolution = if r.has("time.t_end") {
                let dt = r.positive("solver.dt", None);
                let t_end = r.positive("time.t_end", None);
                let out = r.positive("time.output_interval", Some(f64::INFINITY));
                Some((dt?, t_end?, out?))
            } else {
                None
            };
            Some(Scenario::Tunnel {
                grid: grid?,
                potential: potential?,
                energy: energy?,
                damping: damping?,
                tolerance: tolerance?,
                max_iterations: max_iterations?,
                evolution,
            })
        }
        ScenarioKind::Plasma => {
            let q_min = r.positive("spectrum.q_min", None);
            let q_max = r.positive("spectrum.q_max", None);
            let n = r.count("spectrum.n", Some(200));
            let t = r.optional("spectrum.t", 0.0);
            let profile = if ["profile.period", "profile.n", "profile.modes", "profile.width"].iter().any(|k| r.has(k))
            {
                let period = r.positive("profile.period", None);
                let pn = r.count("profile.n", None);
                let modes = r.count("profile.modes", None);
                let width = r.positive("profile.width", None);
                Some(ProfileSpec { period: period?, n: pn?, modes: modes?, width: width? })
            } else {
                None
            };
            let (q_min, q_max, n, t) = (q_min?, q_max?, n?, t?);
            if !(q_max > q_min) || n < 2 || t < 0.0 {
                r.issue(
                    None,
                    "need `spectrum.q_max` > `spectrum.q_min`, `spectrum.n` >= 2 and `spectrum.t` >= 0".into(),
                );
                return None;
            }
            Some(Scenario::Plasma { q_min, q_max, n, t, profile })
        }
        ScenarioKind::Barometric => {
            let kappa = if r.has("barometric.kappa") {
                let k = r.required("barometric.kappa")?;
                if !(k >= 0.0) {
                    r.issue(None, format!("`barometric.kappa` must be non-negative, got {k}"));
                    return None;
                }
                KappaSource::Given(k)
            } else {
                KappaSource::FromParams
            };
            let zeta_max = r.positive("barometric.zeta_max", Some(tqdiff_core::barometric::DEFAULT_ZETA_MAX));
            let n = r.count("barometric.n", Some(600));
            let tau_end = r.positive("barometric.tau_end", None);
            let output_interval = r.positive("barometric.output_interval", Some(f64::INFINITY));
            let tolerance = r.positive("barometric.tolerance", Some(1e-4));
            let start = match r.word("barometric.start").as_deref() {
                None | Some("classical") => Some(BarometricStart::Classical),
                Some("gaussian") => {
                    let center = r.positive("barometric.start_center", None);
                    let sigma = r.positive("barometric.start_sigma", None);
                    Some(BarometricStart::Gaussian { center: center?, sigma: sigma? })
                }
                Some(other) => {
                    r.issue(None, format!("unknown `barometric.start` `{other}` (classical, gaussian)"));
                    None
                }
            };
            let correction = match r.word("barometric.correction").as_deref() {
                None | Some("none") => None,
                Some(op) => {
                    let operator = op.parse::<CorrectionOperator>().map_err(|e| r.issue(None, e.to_string())).ok();
                    let amplitude = r.required("barometric.correction_amplitude");
                    let center = r.positive("barometric.correction_center", None);
                    let width = r.positive("barometric.correction_width", None);
                    let dt = r.positive("barometric.correction_dt", Some(1e-3));
                    Some(CorrectionSpec {
                        operator: operator?,
                        amplitude: amplitude?,
                        center: center?,
                        width: width?,
                        dt: dt?,
                    })
                }
            };
            Some(Scenario::Barometric {
                kappa,
                zeta_max: zeta_max?,
                n: n?,
                tau_end: tau_end?,
                output_interval: output_interval?,
                tolerance: tolerance?,
                start: start?,
                correction,
            })
        }
    }
}

/// Parses a config whose `scenario.kind` names the scenario.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigErrors> {
    parse_config_as(text, None)
}

/// Parses a config for a scenario kind chosen by the caller; a
/// `scenario.kind` in the file must then agree with it.
pub fn parse_config_as(text: &str, kind: Option<ScenarioKind>) -> Result<ScenarioConfig, ConfigErrors> {
    let mut issues = Vec::new();
    let entries = tokenize(text, &mut issues);
    for (key, e) in &entries {
        if dim_of(key).is_none() {
            issues.push(Issue { line: Some(e.line), message: format!("unknown key `{key}`") });
        }
    }
    let units = unit_mode(&entries, &mut issues);
    let echo: BTreeMap<String, String> = entries
        .iter()
        .map(|(k, e)| {
            let v = match &e.unit {
                Some(u) => format!("{} {u}", e.word),
                None => e.word.clone(),
            };
            (k.clone(), v)
        })
        .collect();

    let mut r = Reader { entries, used: BTreeSet::new(), issues };
    r.used.insert("params.units".into());
    let declared = r.word("scenario.kind");
    let kind = match (kind, declared) {
        (Some(k), None) => Some(k),
        (Some(k), Some(d)) if d == k.name() => Some(k),
        (Some(k), Some(d)) => {
            let line = r.entries.get("scenario.kind").map(|e| e.line);
            r.issue(line, format!("file declares `scenario.kind = {d}` but was run as `{k}`"));
            None
        }
        (None, Some(d)) => match d.parse() {
            Ok(k) => Some(k),
            Err(e) => {
                let line = r.entries.get("scenario.kind").map(|e| e.line);
                r.issue(line, e);
                None
            }
        },
        (None, None) => {
            r.issue(None, "missing required key `scenario.kind`".into());
            None
        }
    };
    let Some(kind) = kind else {
        return Err(ConfigErrors(r.issues));
    };

    let barometric_kappa = kind == ScenarioKind::Barometric && r.has("barometric.kappa");
    let params = if barometric_kappa {
        // the column runs in reduced form; parameters are informational
        PhysicalParams::reduced(1.0, 1.0, 1.0, 1.0).ok()
    } else {
        read_params(&mut r, units)
    };
    let params = match kind {
        ScenarioKind::Plasma => params.and_then(|p| {
            let pl = read_plasma(&mut r)?;
            p.with_plasma(pl).map_err(|e| r.issue(None, e.to_string())).ok()
        }),
        ScenarioKind::Barometric if !barometric_kappa => params.and_then(|p| {
            let g = r.positive("gravity.g", None)?;
            p.with_gravity(g).map_err(|e| r.issue(None, e.to_string())).ok()
        }),
        _ => params,
    };
    let scenario = read_scenario(&mut r, kind, params.as_ref());
    let output_dir = r.word("output.dir");

    let mut warnings = Vec::new();
    let mut unused_sections = BTreeSet::new();
    for (key, e) in &r.entries {
        if r.used.contains(key) || dim_of(key).is_none() {
            continue;
        }
        let section = key.split('.').next().unwrap_or_default();
        if kind.sections().contains(&section) && !(barometric_kappa && section == "params") {
            warnings.push(format!("line {}: `{key}` is not used by this {kind} scenario", e.line));
        } else {
            unused_sections.insert(section.to_string());
        }
    }
    for s in unused_sections {
        warnings.push(format!("block `{s}` is not used by {kind} scenarios"));
    }

    if !r.issues.is_empty() {
        r.issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
        return Err(ConfigErrors(r.issues));
    }
    Ok(ScenarioConfig {
        kind,
        units,
        params: params.expect("no issues means parameters were read"),
        scenario: scenario.expect("no issues means the scenario was read"),
        output_dir,
        entries: echo,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MSD: &str = "scenario.kind = msd\nparams.m = 9.109e-31 kg\nparams.b = 1e-16 kg/s\nparams.T = 300 K\ntime.t_min = 1e-15 s\ntime.t_max = 1e-9 s\n";

    #[test]
    fn minimal_msd() {
        let c = parse_config(MSD).unwrap();
        assert_eq!(c.kind, ScenarioKind::Msd);
        assert_eq!(c.units, UnitMode::Si);
        assert_eq!(c.params.temperature, 300.0);
        assert_eq!(c.scenario, Scenario::Msd { t_min: 1e-15, t_max: 1e-9, n: 50 });
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn missing_key_is_named() {
        let text = MSD.replace("params.m = 9.109e-31 kg\n", "");
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.iter().any(|i| i.message.contains("`params.m`")), "{err}");
    }

    #[test]
    fn all_errors_are_reported() {
        let text = "scenario.kind = msd\nparams.m = 1 K\nbogus.key = 3\nparams.b = -1 kg/s\nparams.T = 1 K\nthis is not a pair\n";
        let err = parse_config(text).unwrap_err();
        let msgs = err.to_string();
        assert!(msgs.contains("line 2"), "{msgs}");
        assert!(msgs.contains("unknown key `bogus.key`"), "{msgs}");
        assert!(msgs.contains("`params.b` must be positive"), "{msgs}");
        assert!(msgs.contains("line 6: expected `key = value`"), "{msgs}");
        assert!(msgs.contains("`time.t_min`"), "{msgs}");
    }

    #[test]
    fn unused_blocks_warn() {
        let text = format!("{MSD}plasma.density = 8.5e28 m^-3\ngravity.g = 9.81 m/s^2\n");
        let c = parse_config(&text).unwrap();
        assert_eq!(c.warnings.len(), 2, "{:?}", c.warnings);
        assert!(c.warnings.iter().any(|w| w.contains("`gravity`")));
        assert!(c.warnings.iter().any(|w| w.contains("`plasma`")));
    }

    #[test]
    fn mixing_unit_systems_rejected() {
        let text = MSD.replace("params.T = 300 K", "params.T = 1 reduced");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("SI unit in a file using reduced units"), "{err}");
    }

    #[test]
    fn reduced_file() {
        let text = "scenario.kind = msd\nparams.units = reduced\nparams.m = 1\nparams.b = 1\nparams.T = 1\nparams.hbar = 2\ntime.t_min = 1e-3\ntime.t_max = 1e3\ntime.n = 7\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.units, UnitMode::Reduced);
        assert_eq!(c.params.kb, 1.0);
        let no_hbar = text.replace("params.hbar = 2\n", "");
        assert!(parse_config(&no_hbar).is_err());
    }

    #[test]
    fn kind_from_caller_must_match_file() {
        assert!(parse_config_as(MSD, Some(ScenarioKind::Msd)).is_ok());
        assert!(parse_config_as(MSD, Some(ScenarioKind::Plasma)).is_err());
        let no_kind = MSD.replace("scenario.kind = msd\n", "");
        assert!(parse_config(&no_kind).is_err());
        assert!(parse_config_as(&no_kind, Some(ScenarioKind::Msd)).is_ok());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let text = format!("{MSD}params.T = 4 K\n");
        assert!(parse_config(&text).unwrap_err().to_string().contains("duplicate key"));
    }

    #[test]
    fn evolve_defaults() {
        let text = "scenario.kind = evolve\nparams.units = reduced\nparams.m = 1\nparams.b = 1\nparams.T = 1\nparams.hbar = 2\ngrid.x_min = -10\ngrid.x_max = 10\ngrid.n = 201\npotential.kind = harmonic\npotential.omega = 1\ninitial.sigma = 0.5\ntime.t_end = 1\nsolver.dt = 1e-3\n";
        let c = parse_config(text).unwrap();
        match c.scenario {
            Scenario::Evolve { mode, scheme, grid, potential, .. } => {
                assert_eq!(mode, Mode::ThermoQuantum);
                assert_eq!(scheme, Scheme::Rosenbrock);
                assert_eq!(grid.boundary, Boundary::Decay);
                assert_eq!(potential, PotentialSpec::Harmonic { omega: 1.0, center: 0.0 });
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn barometric_with_kappa_needs_no_params() {
        let text = "scenario.kind = barometric\nbarometric.kappa = 0.1\nbarometric.tau_end = 1\n";
        let c = parse_config(text).unwrap();
        assert!(matches!(c.scenario, Scenario::Barometric { kappa: KappaSource::Given(k), .. } if k == 0.1));
        let from_params = "scenario.kind = barometric\nparams.m = 9.1e-31 kg\nparams.b = 1e-16 kg/s\nparams.T = 1e-9 K\nbarometric.tau_end = 1\n";
        let err = parse_config(from_params).unwrap_err();
        assert!(err.to_string().contains("`gravity.g`"), "{err}");
    }
}
