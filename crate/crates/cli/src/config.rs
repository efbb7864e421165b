//! Flat `key = value` experiment configuration.
//!
//! Grammar: one `key = value` pair per line; blank lines and lines starting
//! with `#` are ignored; a trailing `# ...` comment is stripped. Keys are
//! unique. Values are resolved with precedence flags > file > defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    Generate,
    Excess,
    Height,
    Lipapprox,
    Lipen,
    Decay,
    CatenoidAsymptotics,
    Validators,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Generate,
        Experiment::Excess,
        Experiment::Height,
        Experiment::Lipapprox,
        Experiment::Lipen,
        Experiment::Decay,
        Experiment::CatenoidAsymptotics,
        Experiment::Validators,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Generate => "generate",
            Experiment::Excess => "excess",
            Experiment::Height => "height",
            Experiment::Lipapprox => "lipapprox",
            Experiment::Lipen => "lipen",
            Experiment::Decay => "decay",
            Experiment::CatenoidAsymptotics => "catenoid-asymptotics",
            Experiment::Validators => "validators",
        }
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = if s == "catenoid" { "catenoid-asymptotics" } else { s };
        Experiment::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                format!("unknown experiment `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Plane,
    Tilted,
    Sheets,
    Saddle,
    Bumps,
    Catenoid,
    Cone,
}

impl FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "plane" => Model::Plane,
            "tilted" => Model::Tilted,
            "sheets" => Model::Sheets,
            "saddle" => Model::Saddle,
            "bumps" => Model::Bumps,
            "catenoid" => Model::Catenoid,
            "cone" => Model::Cone,
            _ => {
                return Err(format!(
                    "unknown model `{s}` (expected plane, tilted, sheets, saddle, bumps, catenoid or cone)"
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Experiment,
    Model,
    Int { min: u64, max: u64 },
    /// Open or closed interval; `None` for unbounded.
    Real { lo: Option<(f64, bool)>, hi: Option<(f64, bool)> },
    RealList { lo: f64, hi: f64 },
    Bool,
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
    help: &'static str,
}

const fn open(lo: f64, hi: f64) -> Kind {
    Kind::Real {
        lo: Some((lo, false)),
        hi: Some((hi, false)),
    }
}

const KEYS: &[Key] = &[
    Key { name: "experiment", kind: Kind::Experiment, default: "", help: "experiment to run" },
    Key { name: "model", kind: Kind::Model, default: "", help: "generator; default depends on the experiment" },
    Key { name: "m", kind: Kind::Int { min: 1, max: 4 }, default: "2", help: "dimension of the varifold" },
    Key { name: "n", kind: Kind::Int { min: 1, max: 3 }, default: "1", help: "codimension" },
    Key { name: "q", kind: Kind::Int { min: 1, max: 6 }, default: "1", help: "number of sheets Q" },
    Key {
        name: "sheets",
        kind: Kind::Int { min: 0, max: 6 },
        default: "0",
        help: "sheets generated by the sheets model; 0 means Q",
    },
    Key {
        name: "epsilon",
        kind: Kind::Real { lo: Some((0.0, true)), hi: Some((0.5, true)) },
        default: "0.05",
        help: "tilt or amplitude of the graph models",
    },
    Key {
        name: "theta",
        kind: Kind::Real { lo: Some((0.0, true)), hi: Some((1.5, true)) },
        default: "0.2",
        help: "tilt angle (tilted plane, cone)",
    },
    Key {
        name: "r",
        kind: Kind::Real { lo: Some((1.0, false)), hi: Some((1e7, true)) },
        default: "100",
        help: "catenoid truncation radius R",
    },
    Key { name: "h", kind: open(0.0, 1.0), default: "0.03125", help: "mesh scale" },
    Key {
        name: "extent",
        kind: Kind::Real { lo: Some((0.0, false)), hi: Some((64.0, true)) },
        default: "4",
        help: "half side of the sampled parameter cube",
    },
    Key { name: "lambda", kind: open(0.0, 1.0), default: "0.02", help: "good-set threshold λ" },
    Key { name: "threshold", kind: open(0.0, 1.0), default: "0.1", help: "largest admissible E₄" },
    Key { name: "delta", kind: open(0.0, 1.0), default: "0.25", help: "decay loss δ" },
    Key { name: "eta", kind: Kind::RealList { lo: 0.0, hi: 1.0 }, default: "0.05,0.1,0.2", help: "η grid" },
    Key {
        name: "r0",
        kind: Kind::Real { lo: Some((0.0, false)), hi: None },
        default: "1",
        help: "outer decay radius",
    },
    Key { name: "levels", kind: Kind::Int { min: 1, max: 16 }, default: "5", help: "dyadic decay levels" },
    Key { name: "predecay", kind: Kind::Bool, default: "true", help: "run the decay step on B₅" },
    Key {
        name: "radius",
        kind: Kind::RealList { lo: 0.0, hi: 1.0 },
        default: "0.5",
        help: "radii for excess and height sweeps",
    },
    Key { name: "beta", kind: open(0.0, 0.5), default: "0.25", help: "catenoid scale exponent β" },
    Key {
        name: "p",
        kind: Kind::Real { lo: Some((2.0, true)), hi: Some((64.0, true)) },
        default: "4",
        help: "integrability exponent",
    },
    Key { name: "bumps", kind: Kind::Int { min: 1, max: 64 }, default: "4", help: "bump count" },
    Key { name: "seed", kind: Kind::Int { min: 0, max: u64::MAX }, default: "0", help: "random seed" },
];

fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Where a value came from, for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    File { line: usize },
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::File { line } => write!(f, "line {line}"),
            Source::Flag => write!(f, "--set"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source: Source,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}: {}", self.source, self.message)
        } else {
            write!(f, "{}: `{}`: {}", self.source, self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(source: Source, field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        source,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses the file body into `(line, key, value)` triples.
pub fn parse_text(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(err(Source::File { line }, "", format!("expected `key = value`, got `{body}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err(Source::File { line }, "", "missing key"));
        }
        if let Some((first, ..)) = out.iter().find(|(_, kk, _)| kk == k) {
            return Err(err(Source::File { line }, k, format!("duplicate key (first set on line {first})")));
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses a `--set key=value` flag.
pub fn parse_flag(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| err(Source::Flag, "", format!("expected `key=value`, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn check(k: &Key, value: &str, source: &Source) -> Result<(), ConfigError> {
    let bad = |msg: String| err(source.clone(), k.name, msg);
    let in_range = |x: f64, lo: Option<(f64, bool)>, hi: Option<(f64, bool)>| {
        lo.is_none_or(|(l, closed)| if closed { x >= l } else { x > l })
            && hi.is_none_or(|(h, closed)| if closed { x <= h } else { x < h })
    };
    let range_text = |lo: Option<(f64, bool)>, hi: Option<(f64, bool)>| {
        let l = lo.map_or("(-∞".to_string(), |(v, c)| format!("{}{v}", if c { '[' } else { '(' }));
        let h = hi.map_or("∞)".to_string(), |(v, c)| format!("{v}{}", if c { ']' } else { ')' }));
        format!("{l},{h}")
    };
    match k.kind {
        Kind::Experiment => value.parse::<Experiment>().map(|_| ()).map_err(bad),
        Kind::Model => value.parse::<Model>().map(|_| ()).map_err(bad),
        Kind::Int { min, max } => {
            let x: u64 = value.parse().map_err(|_| bad(format!("expected an integer, got `{value}`")))?;
            if x < min || x > max {
                return Err(bad(format!("must lie in [{min},{max}], got {x}")));
            }
            Ok(())
        }
        Kind::Real { lo, hi } => {
            let x: f64 = value.parse().map_err(|_| bad(format!("expected a number, got `{value}`")))?;
            if !x.is_finite() || !in_range(x, lo, hi) {
                let sym = if k.name == "lambda" { "λ" } else if k.name == "delta" { "δ" } else if k.name == "beta" { "β" } else { k.name };
                return Err(bad(format!("{sym} ∈ {} required, got {value}", range_text(lo, hi))));
            }
            Ok(())
        }
        Kind::RealList { lo, hi } => {
            let items: Vec<&str> = value.split(',').map(str::trim).collect();
            if items.iter().any(|s| s.is_empty()) {
                return Err(bad("empty entry in list".into()));
            }
            for s in items {
                let x: f64 = s.parse().map_err(|_| bad(format!("expected a number, got `{s}`")))?;
                if !(x > lo && x < hi) {
                    return Err(bad(format!("entries must lie in ({lo},{hi}), got {s}")));
                }
            }
            Ok(())
        }
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(bad(format!("expected true or false, got `{value}`"))),
        },
    }
}

/// Validated configuration with the source of every value.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, (String, Source)>,
}

impl ExperimentConfig {
    /// Merges defaults, file entries and flag overrides, validating each.
    pub fn resolve(
        experiment: Option<Experiment>,
        file: &[(usize, String, String)],
        flags: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut layered: Vec<(String, String, Source)> = Vec::new();
        for (line, k, v) in file {
            let src = Source::File { line: *line };
            let spec = key(k).ok_or_else(|| err(src.clone(), k, "unknown key"))?;
            check(spec, v, &src)?;
            layered.push((k.clone(), v.clone(), src));
        }
        for (k, v) in flags {
            let spec = key(k).ok_or_else(|| err(Source::Flag, k, "unknown key"))?;
            check(spec, v, &Source::Flag)?;
            layered.push((k.clone(), v.clone(), Source::Flag));
        }
        let named = layered.iter().rev().find(|(k, ..)| k == "experiment");
        let exp = match (experiment, named) {
            (Some(e), Some((_, v, src))) if v.parse::<Experiment>().ok() != Some(e) => {
                return Err(err(
                    src.clone(),
                    "experiment",
                    format!("`{v}` conflicts with the `{}` subcommand", e.name()),
                ));
            }
            (Some(e), _) => e,
            (None, Some((_, v, _))) => v.parse().expect("validated"),
            (None, None) => return Err(err(Source::Default, "experiment", "no experiment given")),
        };
        let mut values = BTreeMap::new();
        for k in KEYS {
            if !k.default.is_empty() {
                values.insert(k.name.to_string(), (k.default.to_string(), Source::Default));
            }
        }
        for (k, v) in experiment_defaults(exp) {
            values.insert(k.to_string(), (v.to_string(), Source::Default));
        }
        values.insert("experiment".into(), (exp.name().to_string(), Source::Default));
        for (k, v, src) in layered {
            if k == "experiment" {
                continue;
            }
            values.insert(k, (v, src));
        }
        let cfg = Self { values };
        cfg.cross_check()?;
        Ok(cfg)
    }

    fn cross_check(&self) -> Result<(), ConfigError> {
        let src = |k: &str| self.values[k].1.clone();
        let model = self.model();
        if model == Model::Catenoid && self.usize("n") != 1 {
            return Err(err(src("n"), "n", "catenoids have codimension 1"));
        }
        if model == Model::Catenoid && self.usize("m") < 2 {
            return Err(err(src("m"), "m", "catenoids need m ≥ 2"));
        }
        if model == Model::Saddle && self.usize("m") < 2 {
            return Err(err(src("m"), "m", "the saddle model needs m ≥ 2"));
        }
        if model == Model::Sheets && self.sheet_count() > 2 * self.usize("m") {
            let k = if self.usize("sheets") == 0 { "q" } else { "sheets" };
            return Err(err(src(k), k, "the sheets model supports at most 2m sheets"));
        }
        Ok(())
    }

    pub fn experiment(&self) -> Experiment {
        self.values["experiment"].0.parse().expect("validated")
    }

    pub fn model(&self) -> Model {
        self.values["model"].0.parse().expect("validated")
    }

    /// Sheets of the sheets model.
    pub fn sheet_count(&self) -> usize {
        match self.usize("sheets") {
            0 => self.usize("q"),
            k => k,
        }
    }

    pub fn raw(&self, k: &str) -> &str {
        &self.values[k].0
    }

    pub fn f64(&self, k: &str) -> f64 {
        self.raw(k).parse().expect("validated")
    }

    pub fn usize(&self, k: &str) -> usize {
        self.raw(k).parse().expect("validated")
    }

    pub fn u64(&self, k: &str) -> u64 {
        self.raw(k).parse().expect("validated")
    }

    pub fn bool(&self, k: &str) -> bool {
        self.raw(k) == "true"
    }

    pub fn list(&self, k: &str) -> Vec<f64> {
        self.raw(k).split(',').map(|s| s.trim().parse().expect("validated")).collect()
    }

    /// Resolved values in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, (v, _))| (k.as_str(), v.as_str()))
    }
}

fn experiment_defaults(e: Experiment) -> &'static [(&'static str, &'static str)] {
    match e {
        Experiment::Generate | Experiment::Excess | Experiment::Validators => &[("model", "plane")],
        Experiment::Height | Experiment::Lipapprox | Experiment::Lipen => &[("model", "sheets")],
        Experiment::Decay => &[("model", "saddle"), ("h", "0.00390625"), ("extent", "6")],
        Experiment::CatenoidAsymptotics => &[("model", "catenoid")],
    }
}

/// Key reference for `--help`.
pub fn key_help() -> String {
    let mut s = String::from("configuration keys (precedence: --set > --config file > defaults):\n");
    for k in KEYS {
        let d = if k.default.is_empty() { "-" } else { k.default };
        s.push_str(&format!("  {:<11} {:<14} {}\n", k.name, d, k.help));
    }
    s
}
