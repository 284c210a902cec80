//! Experiment configuration files.
//!
//! A config is a small TOML document with flat sections:
//!
//! ```toml
//! kind = "linear-oracle"
//! seed = 7
//!
//! [grid]
//! horizon = 1.0
//! steps = 50
//!
//! [batch]
//! scenarios = 10000
//!
//! [levy]
//! atoms = [[1.0, 1.0]]        # (size, mass) pairs
//!
//! [driver]
//! name = "linear"
//! a = 0.3
//! ```
//!
//! Every problem in a file is reported at once, each with its line number.

use std::collections::BTreeMap;
use std::path::PathBuf;

use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::error::{ConfigIssue, Error, Result};
use crate::intensity::{ComponentModel, IntensityModel};
use crate::levy::LevyMeasure;
use crate::regression::{Filtration, PhiEstimator, RegressionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExperimentKind {
    SimulateNoise,
    Isometry,
    CharFunction,
    SolveBsde,
    LinearOracle,
    Comparison,
    MeanVariance,
    Utility,
    MaxPrinciple,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::SimulateNoise,
        ExperimentKind::Isometry,
        ExperimentKind::CharFunction,
        ExperimentKind::SolveBsde,
        ExperimentKind::LinearOracle,
        ExperimentKind::Comparison,
        ExperimentKind::MeanVariance,
        ExperimentKind::Utility,
        ExperimentKind::MaxPrinciple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SimulateNoise => "simulate-noise",
            ExperimentKind::Isometry => "isometry",
            ExperimentKind::CharFunction => "char-function",
            ExperimentKind::SolveBsde => "solve-bsde",
            ExperimentKind::LinearOracle => "linear-oracle",
            ExperimentKind::Comparison => "comparison",
            ExperimentKind::MeanVariance => "mean-variance",
            ExperimentKind::Utility => "utility",
            ExperimentKind::MaxPrinciple => "max-principle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A registered driver or terminal condition and its numeric parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub name: String,
    pub params: BTreeMap<String, Vec<f64>>,
}

impl Selection {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            params: BTreeMap::new(),
        }
    }

    /// Scalar parameter (first entry), or `default` when absent.
    pub fn scalar(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).and_then(|v| v.first().copied()).unwrap_or(default)
    }

    pub fn list(&self, key: &str) -> Option<&[f64]> {
        self.params.get(key).map(Vec::as_slice)
    }
}

/// Registered drivers with their parameter names. Lists are marked `[]`.
pub const DRIVERS: &[(&str, &[&str])] = &[
    ("zero", &[]),
    ("linear", &["a", "c", "e0", "e[]"]),
    ("scaled-y", &["a"]),
    ("sine", &["a", "b"]),
    ("mean-variance-adjoint", &[]),
    ("exp-utility", &[]),
];

/// Registered terminal conditions with their parameter names.
pub const TERMINALS: &[(&str, &[&str])] = &[
    ("zero", &[]),
    ("constant", &["c"]),
    ("brownian", &["a"]),
    ("affine", &["a", "b", "c"]),
    ("square", &["a"]),
    ("mean-variance", &[]),
    ("exp-utility", &["gamma"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlChoice {
    Optimal,
    Zero,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub rho: f64,
    pub alpha: f64,
    pub psi0: f64,
    /// `ψ(z_j)` per atom.
    pub psi: Vec<f64>,
    pub k: f64,
    pub x0: f64,
    pub inner_paths: usize,
    pub inner_budget: u64,
    pub filtration: Filtration,
    pub control: ControlChoice,
    pub constant: f64,
    pub gamma: f64,
}

/// Acceptance thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checks {
    pub se_multiplier: f64,
    pub char_floor: f64,
    pub char_c: Vec<f64>,
    /// Empty means `{T/2, T}`.
    pub char_t: Vec<f64>,
    pub factor_rel: f64,
    pub oracle_rms: f64,
    pub contraction_kt: f64,
    pub contraction_final: f64,
    pub contraction_iters: usize,
    pub fixed_point_gap: f64,
    pub violation_fraction: f64,
    pub foc_rel: f64,
    pub affine_rel: f64,
    pub expected_mean: Option<f64>,
    pub expected_variance: Option<f64>,
}

impl Default for Checks {
    fn default() -> Self {
        Self {
            se_multiplier: 3.0,
            char_floor: 0.01,
            char_c: vec![0.5, 1.0, 2.0],
            char_t: Vec::new(),
            factor_rel: 1e-12,
            oracle_rms: 0.02,
            contraction_kt: 0.5,
            contraction_final: 1e-8,
            contraction_iters: 20,
            fixed_point_gap: 1e-6,
            violation_fraction: 0.001,
            foc_rel: 0.05,
            affine_rel: 0.02,
            expected_mean: None,
            expected_variance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub horizon: f64,
    pub steps: usize,
    pub scenarios: usize,
    pub intensity: IntensityModel,
    pub levy: LevyMeasure,
    pub driver: Selection,
    pub terminal: Selection,
    pub regression: RegressionSpec,
    pub solver: SolverConfig,
    pub control: ControlConfig,
    pub checks: Checks,
    /// Scenarios written to per-path CSV artifacts.
    pub csv_scenarios: usize,
}

/// Parses and validates a config; `kind` supplies the experiment kind (as a
/// CLI subcommand does) and `seed` overrides the file's seed.
pub fn parse_config_for(
    text: &str,
    kind: Option<ExperimentKind>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let (doc, errors) = DeTable::parse_recoverable(text);
    let mut r = Reader {
        text,
        issues: Vec::new(),
    };
    for e in errors {
        let line = e.span().map(|s| r.line(s.start));
        r.issues.push(ConfigIssue {
            line,
            message: e.message().to_string(),
        });
    }
    if !r.issues.is_empty() {
        return Err(Error::Config(r.issues));
    }
    let doc = doc.into_inner();
    let cfg = r.read(&doc, kind, seed);
    match cfg {
        Some(c) if r.issues.is_empty() => Ok(c),
        _ => {
            r.issues.sort_by_key(|i| i.line.unwrap_or(0));
            Err(Error::Config(r.issues))
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_for(text, None, None)
}

pub fn load_config(
    path: &std::path::Path,
    kind: Option<ExperimentKind>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(vec![ConfigIssue {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        }])
    })?;
    parse_config_for(&text, kind, seed)
}

struct Reader<'t> {
    text: &'t str,
    issues: Vec<ConfigIssue>,
}

/// One table with bookkeeping of the keys that were read.
struct Section<'a, 'i> {
    name: String,
    table: Option<&'a DeTable<'i>>,
    line: Option<usize>,
    known: Vec<&'static str>,
}

type Val<'a, 'i> = &'a Spanned<DeValue<'i>>;

impl<'t> Reader<'t> {
    fn line(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    fn issue(&mut self, line: Option<usize>, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            line,
            message: message.into(),
        });
    }

    fn value_line(&self, v: Val<'_, '_>) -> Option<usize> {
        Some(self.line(v.span().start))
    }

    fn section<'a, 'i>(
        &mut self,
        parent: &'a DeTable<'i>,
        name: &str,
        known: &[&'static str],
    ) -> Section<'a, 'i> {
        let mut sec = Section {
            name: name.to_string(),
            table: None,
            line: None,
            known: known.to_vec(),
        };
        if let Some(v) = parent.get(name) {
            match v.get_ref() {
                DeValue::Table(t) => {
                    sec.table = Some(t);
                    sec.line = self.value_line(v);
                }
                _ => self.issue(self.value_line(v), format!("'{name}' must be a section")),
            }
        }
        sec
    }

    /// Reports keys of `sec` that were not declared.
    fn finish(&mut self, sec: &Section<'_, '_>) {
        let Some(t) = sec.table else { return };
        for (k, v) in t.iter() {
            let key: &str = k.get_ref();
            if !sec.known.contains(&key) {
                let at = Some(self.line(k.span().start));
                let _ = v;
                self.issue(at, format!("unknown key '{key}' in [{}]", sec.name));
            }
        }
    }

    fn get<'a, 'i>(&self, sec: &Section<'a, 'i>, key: &str) -> Option<Val<'a, 'i>> {
        sec.table.and_then(|t| t.get(key))
    }

    /// Line of `key`, else of the section header.
    fn key_line(&self, sec: &Section<'_, '_>, key: &str) -> Option<usize> {
        self.get(sec, key).and_then(|v| self.value_line(v)).or(sec.line)
    }

    fn number(&mut self, v: Val<'_, '_>, what: &str) -> Option<f64> {
        let parsed = match v.get_ref() {
            DeValue::Integer(i) => {
                let digits: String = i.as_str().chars().filter(|c| *c != '_').collect();
                i64::from_str_radix(&digits, i.radix()).ok().map(|x| x as f64)
            }
            DeValue::Float(f) => {
                let s: String = f.as_str().chars().filter(|c| *c != '_').collect();
                s.parse::<f64>().ok()
            }
            _ => None,
        };
        match parsed {
            Some(x) if x.is_finite() => Some(x),
            Some(_) => {
                self.issue(self.value_line(v), format!("'{what}' must be finite"));
                None
            }
            None => {
                self.issue(self.value_line(v), format!("'{what}' must be a number"));
                None
            }
        }
    }

    fn f64_key(&mut self, sec: &Section<'_, '_>, key: &str, default: f64) -> f64 {
        match self.get(sec, key) {
            Some(v) => self.number(v, key).unwrap_or(default),
            None => default,
        }
    }

    fn opt_f64(&mut self, sec: &Section<'_, '_>, key: &str) -> Option<f64> {
        self.get(sec, key).and_then(|v| self.number(v, key))
    }

    fn integer(&mut self, v: Val<'_, '_>, what: &str) -> Option<u64> {
        if let DeValue::Integer(i) = v.get_ref() {
            let digits: String = i.as_str().chars().filter(|c| *c != '_').collect();
            if let Ok(x) = u64::from_str_radix(&digits, i.radix()) {
                return Some(x);
            }
        }
        self.issue(self.value_line(v), format!("'{what}' must be a nonnegative integer"));
        None
    }

    fn usize_key(&mut self, sec: &Section<'_, '_>, key: &str, default: usize) -> usize {
        match self.get(sec, key) {
            Some(v) => self.integer(v, key).map_or(default, |x| x as usize),
            None => default,
        }
    }

    fn string(&mut self, v: Val<'_, '_>, what: &str) -> Option<String> {
        match v.get_ref() {
            DeValue::String(s) => Some(s.to_string()),
            _ => {
                self.issue(self.value_line(v), format!("'{what}' must be a string"));
                None
            }
        }
    }

    fn str_key(&mut self, sec: &Section<'_, '_>, key: &str) -> Option<(String, Option<usize>)> {
        let v = self.get(sec, key)?;
        let line = self.value_line(v);
        self.string(v, key).map(|s| (s, line))
    }

    fn list(&mut self, v: Val<'_, '_>, what: &str) -> Option<Vec<f64>> {
        match v.get_ref() {
            DeValue::Array(a) => {
                let mut out = Vec::with_capacity(a.len());
                for e in a.iter() {
                    out.push(self.number(e, what)?);
                }
                Some(out)
            }
            DeValue::Integer(_) | DeValue::Float(_) => self.number(v, what).map(|x| vec![x]),
            _ => {
                self.issue(self.value_line(v), format!("'{what}' must be a number or a list of numbers"));
                None
            }
        }
    }

    fn list_key(&mut self, sec: &Section<'_, '_>, key: &str) -> Option<Vec<f64>> {
        self.get(sec, key).and_then(|v| self.list(v, key))
    }

    fn read(
        &mut self,
        doc: &DeTable<'_>,
        kind_override: Option<ExperimentKind>,
        seed_override: Option<u64>,
    ) -> Option<ExperimentConfig> {
        let top_known = [
            "kind", "seed", "threads", "out", "grid", "batch", "intensity", "levy", "driver",
            "terminal", "regression", "solver", "control", "checks", "output",
        ];
        let top = Section {
            name: "top level".to_string(),
            table: Some(doc),
            line: Some(1),
            known: top_known.to_vec(),
        };
        self.finish(&top);

        let file_kind = match self.str_key(&top, "kind") {
            Some((s, line)) => match ExperimentKind::from_name(&s) {
                Some(k) => Some(k),
                None => {
                    let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                    self.issue(line, format!("unknown experiment kind '{s}' (expected one of {})", names.join(", ")));
                    None
                }
            },
            None => None,
        };
        let kind = match (kind_override, file_kind) {
            (Some(k), Some(f)) if k != f => {
                self.issue(None, format!("config declares kind '{f}' but '{k}' was requested"));
                Some(k)
            }
            (Some(k), _) => Some(k),
            (None, Some(f)) => Some(f),
            (None, None) => {
                if self.get(&top, "kind").is_none() {
                    self.issue(None, "missing required key 'kind'");
                }
                None
            }
        };
        let seed = match (self.get(&top, "seed"), seed_override) {
            (Some(v), over) => {
                let parsed = self.integer(v, "seed");
                over.or(parsed)
            }
            (None, Some(s)) => Some(s),
            (None, None) => {
                self.issue(None, "missing required key 'seed' (no wall-clock default)");
                None
            }
        };
        let threads = match self.get(&top, "threads") {
            Some(v) => match self.integer(v, "threads") {
                Some(0) => {
                    self.issue(self.value_line(v), "'threads' must be at least 1");
                    None
                }
                t => t.map(|x| x as usize),
            },
            None => None,
        };
        let out = self.str_key(&top, "out").map_or_else(|| PathBuf::from("out"), |(s, _)| PathBuf::from(s));

        let grid = self.section(doc, "grid", &["horizon", "steps"]);
        let horizon = self.f64_key(&grid, "horizon", 1.0);
        if !(horizon > 0.0) {
            self.issue(self.key_line(&grid, "horizon"), "grid horizon must be positive");
        }
        let steps = self.usize_key(&grid, "steps", 50);
        if steps < 1 {
            self.issue(self.key_line(&grid, "steps"), "grid steps N must be at least 1");
        }
        self.finish(&grid);

        let batch = self.section(doc, "batch", &["scenarios"]);
        let scenarios = self.usize_key(&batch, "scenarios", 10_000);
        if scenarios < 2 {
            let line = self.get(&batch, "scenarios").and_then(|v| self.value_line(v));
            self.issue(line, "batch scenarios M must be at least 2 (variance undefined)");
        }
        self.finish(&batch);

        let intensity = self.read_intensity(doc);
        let levy = self.read_levy(doc);
        let default_driver = match kind {
            Some(ExperimentKind::LinearOracle | ExperimentKind::Comparison) => "linear",
            _ => "zero",
        };
        let driver = self.read_selection(doc, "driver", DRIVERS, default_driver);
        let default_terminal = match kind {
            Some(ExperimentKind::Utility) => "mean-variance",
            _ => "zero",
        };
        let terminal = self.read_selection(doc, "terminal", TERMINALS, default_terminal);
        let regression = self.read_regression(doc);

        let solver_sec = self.section(doc, "solver", &["tol", "max_iter"]);
        let solver = SolverConfig {
            tol: self.f64_key(&solver_sec, "tol", 1e-10),
            max_iter: self.usize_key(&solver_sec, "max_iter", 50),
        };
        if !(solver.tol > 0.0) {
            self.issue(self.key_line(&solver_sec, "tol"), "solver tol must be positive");
        }
        if solver.max_iter == 0 {
            self.issue(self.key_line(&solver_sec, "max_iter"), "solver max_iter must be at least 1");
        }
        self.finish(&solver_sec);

        let control = self.read_control(doc, levy.as_ref().map_or(1, LevyMeasure::len));
        let checks = self.read_checks(doc);

        let output = self.section(doc, "output", &["csv_scenarios"]);
        let csv_scenarios = self.usize_key(&output, "csv_scenarios", 200);
        self.finish(&output);

        Some(ExperimentConfig {
            kind: kind?,
            seed: seed?,
            threads,
            out,
            horizon,
            steps,
            scenarios,
            intensity: intensity?,
            levy: levy?,
            driver: driver?,
            terminal: terminal?,
            regression: regression?,
            solver,
            control,
            checks,
            csv_scenarios,
        })
    }

    fn read_intensity(&mut self, doc: &DeTable<'_>) -> Option<IntensityModel> {
        let sec = self.section(doc, "intensity", &["brownian", "jump"]);
        self.finish(&sec);
        let mut parts = Vec::new();
        for comp in ["brownian", "jump"] {
            let Some(t) = sec.table else {
                parts.push(Some(ComponentModel::constant(1.0)));
                continue;
            };
            let c = self.section(
                t,
                comp,
                &["kind", "level", "levels", "breaks", "switch_rates", "initial_prob", "x0", "kappa", "theta", "sigma"],
            );
            let c = Section {
                name: format!("intensity.{comp}"),
                ..c
            };
            if c.table.is_none() {
                parts.push(Some(ComponentModel::constant(1.0)));
                continue;
            }
            let (kind, kline) = self.str_key(&c, "kind").unwrap_or(("constant".to_string(), c.line));
            let model = match kind.as_str() {
                "constant" => Some(ComponentModel::constant(self.f64_key(&c, "level", 1.0))),
                "piecewise" => {
                    let levels = self.list_key(&c, "levels").unwrap_or_default();
                    let breaks = self.list_key(&c, "breaks").unwrap_or_default();
                    Some(ComponentModel::Piecewise { levels, breaks })
                }
                "two-state" => {
                    let levels = self.list_key(&c, "levels").unwrap_or_else(|| vec![1.0, 3.0]);
                    let rates = self.list_key(&c, "switch_rates").unwrap_or_else(|| vec![0.0, 0.0]);
                    if levels.len() != 2 || rates.len() != 2 {
                        let key = if levels.len() != 2 { "levels" } else { "switch_rates" };
                        self.issue(self.key_line(&c, key), format!("[{}] two-state needs two levels and two switch rates", c.name));
                        None
                    } else {
                        Some(ComponentModel::TwoState {
                            levels: [levels[0], levels[1]],
                            switch_rates: [rates[0], rates[1]],
                            initial_prob: self.f64_key(&c, "initial_prob", 0.5),
                        })
                    }
                }
                "cir" => Some(ComponentModel::Cir {
                    kappa: self.f64_key(&c, "kappa", 1.0),
                    theta: self.f64_key(&c, "theta", 1.0),
                    sigma: self.f64_key(&c, "sigma", 0.5),
                    x0: self.f64_key(&c, "x0", 1.0),
                }),
                other => {
                    self.issue(kline, format!("unknown intensity kind '{other}' (constant, piecewise, two-state, cir)"));
                    None
                }
            };
            if let Some(m) = &model {
                if let Err(e) = m.validate() {
                    self.issue(c.line, format!("[{}] {e}", c.name));
                }
            }
            self.finish(&c);
            parts.push(model);
        }
        let (b, h) = (parts[0].clone()?, parts[1].clone()?);
        IntensityModel::new(b, h).ok()
    }

    fn read_levy(&mut self, doc: &DeTable<'_>) -> Option<LevyMeasure> {
        let sec = self.section(doc, "levy", &["atoms"]);
        self.finish(&sec);
        let Some(v) = self.get(&sec, "atoms") else {
            return Some(LevyMeasure::from_pairs(&[(1.0, 1.0)]).expect("default atom"));
        };
        let line = self.value_line(v);
        let DeValue::Array(items) = v.get_ref() else {
            self.issue(line, "'atoms' must be a list of [size, mass] pairs");
            return None;
        };
        let mut pairs = Vec::new();
        for item in items.iter() {
            let p = self.list(item, "atoms")?;
            if p.len() != 2 {
                self.issue(self.value_line(item), "each atom is a [size, mass] pair");
                return None;
            }
            pairs.push((p[0], p[1]));
        }
        match LevyMeasure::from_pairs(&pairs) {
            Ok(l) => Some(l),
            Err(e) => {
                self.issue(line, e.to_string());
                None
            }
        }
    }

    fn read_selection(
        &mut self,
        doc: &DeTable<'_>,
        name: &str,
        registry: &[(&str, &[&str])],
        default: &str,
    ) -> Option<Selection> {
        let sec = self.section(doc, name, &[]);
        let Some(t) = sec.table else {
            return Some(Selection::named(default));
        };
        let (sel, line) = self.str_key(&sec, "name").unwrap_or((default.to_string(), sec.line));
        let Some((_, params)) = registry.iter().find(|(n, _)| *n == sel) else {
            let names: Vec<_> = registry.iter().map(|(n, _)| *n).collect();
            self.issue(line, format!("unknown {name} '{sel}' (registered: {})", names.join(", ")));
            return None;
        };
        let mut out = Selection::named(&sel);
        for (k, v) in t.iter() {
            let key: &str = k.get_ref();
            if key == "name" {
                continue;
            }
            let list_ok = params.contains(&format!("{key}[]").as_str());
            if !params.contains(&key) && !list_ok {
                let at = Some(self.line(k.span().start));
                self.issue(at, format!("unknown parameter '{key}' for {name} '{sel}'"));
                continue;
            }
            let values = if list_ok { self.list(v, key) } else { self.number(v, key).map(|x| vec![x]) };
            if let Some(vals) = values {
                out.params.insert(key.to_string(), vals);
            }
        }
        Some(out)
    }

    fn read_regression(&mut self, doc: &DeTable<'_>) -> Option<RegressionSpec> {
        let sec = self.section(doc, "regression", &["degree", "ridge", "filtration", "phi"]);
        let filtration = match self.str_key(&sec, "filtration") {
            None => Filtration::G,
            Some((s, line)) => match s.as_str() {
                "G" | "g" => Filtration::G,
                "F" | "f" => Filtration::F,
                _ => {
                    self.issue(line, "filtration must be \"G\" or \"F\"");
                    Filtration::G
                }
            },
        };
        let mut spec = RegressionSpec::for_filtration(filtration);
        spec.degree = self.usize_key(&sec, "degree", 2);
        spec.ridge = self.f64_key(&sec, "ridge", 1e-8);
        if let Some((s, line)) = self.str_key(&sec, "phi") {
            spec.phi = match s.as_str() {
                "joint" => PhiEstimator::Joint,
                "covariation" => PhiEstimator::Covariation,
                _ => {
                    self.issue(line, "phi must be \"joint\" or \"covariation\"");
                    spec.phi
                }
            };
        }
        if spec.degree > 6 {
            self.issue(self.key_line(&sec, "degree"), "regression degree above 6 is not supported");
        }
        if spec.ridge < 0.0 {
            self.issue(self.key_line(&sec, "ridge"), "ridge must be nonnegative");
        }
        self.finish(&sec);
        Some(spec)
    }

    fn read_control(&mut self, doc: &DeTable<'_>, atoms: usize) -> ControlConfig {
        let sec = self.section(
            doc,
            "control",
            &[
                "rho", "alpha", "psi0", "psi", "k", "x0", "inner_paths", "inner_budget",
                "filtration", "control", "constant", "gamma",
            ],
        );
        let psi = self.list_key(&sec, "psi").unwrap_or_else(|| vec![0.0; atoms]);
        if psi.len() != atoms {
            self.issue(self.key_line(&sec, "psi"), format!("[control] psi needs one value per atom ({atoms})"));
        }
        let filtration = match self.str_key(&sec, "filtration") {
            None => Filtration::G,
            Some((s, line)) => match s.as_str() {
                "G" | "g" => Filtration::G,
                "F" | "f" => Filtration::F,
                _ => {
                    self.issue(line, "control filtration must be \"G\" or \"F\"");
                    Filtration::G
                }
            },
        };
        let control = match self.str_key(&sec, "control") {
            None => ControlChoice::Optimal,
            Some((s, line)) => match s.as_str() {
                "optimal" => ControlChoice::Optimal,
                "zero" => ControlChoice::Zero,
                "constant" => ControlChoice::Constant,
                _ => {
                    self.issue(line, "control must be \"optimal\", \"zero\" or \"constant\"");
                    ControlChoice::Optimal
                }
            },
        };
        let cfg = ControlConfig {
            rho: self.f64_key(&sec, "rho", 0.0),
            alpha: self.f64_key(&sec, "alpha", 0.1),
            psi0: self.f64_key(&sec, "psi0", 0.2),
            psi,
            k: self.f64_key(&sec, "k", 1.2),
            x0: self.f64_key(&sec, "x0", 1.0),
            inner_paths: self.usize_key(&sec, "inner_paths", 256),
            inner_budget: self.usize_key(&sec, "inner_budget", crate::control::DEFAULT_INNER_BUDGET as usize) as u64,
            filtration,
            control,
            constant: self.f64_key(&sec, "constant", 0.5),
            gamma: self.f64_key(&sec, "gamma", 1.0),
        };
        if cfg.inner_paths == 0 {
            self.issue(self.key_line(&sec, "inner_paths"), "[control] inner_paths must be positive");
        }
        self.finish(&sec);
        cfg
    }

    fn read_checks(&mut self, doc: &DeTable<'_>) -> Checks {
        let sec = self.section(
            doc,
            "checks",
            &[
                "se_multiplier", "char_floor", "char_c", "char_t", "factor_rel", "oracle_rms",
                "contraction_kt", "contraction_final", "contraction_iters", "fixed_point_gap",
                "violation_fraction", "foc_rel", "affine_rel", "expected_mean", "expected_variance",
            ],
        );
        let d = Checks::default();
        let checks = Checks {
            se_multiplier: self.f64_key(&sec, "se_multiplier", d.se_multiplier),
            char_floor: self.f64_key(&sec, "char_floor", d.char_floor),
            char_c: self.list_key(&sec, "char_c").unwrap_or(d.char_c),
            char_t: self.list_key(&sec, "char_t").unwrap_or(d.char_t),
            factor_rel: self.f64_key(&sec, "factor_rel", d.factor_rel),
            oracle_rms: self.f64_key(&sec, "oracle_rms", d.oracle_rms),
            contraction_kt: self.f64_key(&sec, "contraction_kt", d.contraction_kt),
            contraction_final: self.f64_key(&sec, "contraction_final", d.contraction_final),
            contraction_iters: self.usize_key(&sec, "contraction_iters", d.contraction_iters),
            fixed_point_gap: self.f64_key(&sec, "fixed_point_gap", d.fixed_point_gap),
            violation_fraction: self.f64_key(&sec, "violation_fraction", d.violation_fraction),
            foc_rel: self.f64_key(&sec, "foc_rel", d.foc_rel),
            affine_rel: self.f64_key(&sec, "affine_rel", d.affine_rel),
            expected_mean: self.opt_f64(&sec, "expected_mean"),
            expected_variance: self.opt_f64(&sec, "expected_variance"),
        };
        self.finish(&sec);
        checks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("kind = \"simulate-noise\"\nseed = 5\n").unwrap();
        assert_eq!(cfg.kind, ExperimentKind::SimulateNoise);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.regression.degree, 2);
        assert_eq!(cfg.regression.ridge, 1e-8);
        assert_eq!(cfg.control.inner_paths, 256);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.levy.len(), 1);
        assert!(cfg.intensity.is_deterministic());
    }

    #[test]
    fn missing_seed_is_named() {
        let err = parse_config("kind = \"isometry\"\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn all_errors_are_collected_with_lines() {
        let text = "kind = \"isometry\"\nseed = 1\n[batch]\nscenarios = 1\n[grid]\nsteps = \"ten\"\nbogus = 3\n";
        let Err(Error::Config(issues)) = parse_config(text) else {
            panic!("expected config error")
        };
        assert!(issues.iter().any(|i| i.line == Some(4) && i.message.contains("at least 2")));
        assert!(issues.iter().any(|i| i.line == Some(6) && i.message.contains("integer")));
        assert!(issues.iter().any(|i| i.line == Some(7) && i.message.contains("bogus")));
    }

    #[test]
    fn sections_and_registry() {
        let text = r#"
kind = "linear-oracle"
seed = 11
threads = 2
[grid]
horizon = 2.0
steps = 20
[intensity.jump]
kind = "two-state"
levels = [1.0, 3.0]
switch_rates = [0.5, 0.5]
[levy]
atoms = [[1.0, 0.5], [-0.5, 2.0]]
[driver]
name = "linear"
a = 0.1
e = [0.2, 0.3]
[terminal]
name = "affine"
b = 0.5
[regression]
filtration = "G"
phi = "covariation"
"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.threads, Some(2));
        assert_eq!(cfg.levy.len(), 2);
        assert!(!cfg.intensity.is_deterministic());
        assert_eq!(cfg.driver.name, "linear");
        assert_eq!(cfg.driver.list("e"), Some(&[0.2, 0.3][..]));
        assert_eq!(cfg.terminal.scalar("b", 0.0), 0.5);
        assert_eq!(cfg.regression.phi, PhiEstimator::Covariation);

        let bad = "kind = \"solve-bsde\"\nseed = 1\n[driver]\nname = \"nope\"\n[terminal]\nname = \"affine\"\nq = 1\n";
        let Err(Error::Config(issues)) = parse_config(bad) else { panic!() };
        assert!(issues.iter().any(|i| i.line == Some(4) && i.message.contains("nope")));
        assert!(issues.iter().any(|i| i.line == Some(7) && i.message.contains("'q'")));
    }

    #[test]
    fn kind_override() {
        let cfg = parse_config_for("seed = 1\n", Some(ExperimentKind::Utility), None).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Utility);
        assert!(parse_config_for("kind = \"isometry\"\nseed = 1\n", Some(ExperimentKind::Utility), None).is_err());
        let cfg = parse_config_for("kind = \"isometry\"\n", None, Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(parse_config_for("kind = \"isometry\"\nseed = 2\n", None, Some(9)).unwrap().seed, 9);
        assert!(parse_config("seed = 1\n").is_err());
    }

    #[test]
    fn syntax_errors_have_lines() {
        let Err(Error::Config(issues)) = parse_config("kind = \"isometry\"\nseed = = 1\n") else {
            panic!()
        };
        assert_eq!(issues[0].line, Some(2));
    }
}
