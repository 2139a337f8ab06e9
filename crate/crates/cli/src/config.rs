//! Run configuration files.
//!
//! A run file is TOML. Top-level keys describe the physics, `[params]`
//! replaces preset parameters, `[vqs]` tunes the variational solver,
//! `[[expansion]]` freezes the bath modes and `[output]` controls what is
//! written where. Parsing is strict: every unknown key and every ill-typed
//! value is reported, with its line when the source is a file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nmsse_core::ensemble::{Backend, EnsembleConfig, RateMode};
use nmsse_core::reference::Closure;
use nmsse_core::vqs::VqsOptions;
use nmsse_core::{Complex64, Mode, ModeExpansion, Preset, PresetOverrides};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

const TOP_KEYS: &[&str] = &[
    "preset", "backend", "n_traj", "dt", "t_end", "steps", "seed", "first_index", "n_max", "modes", "stride", "closure",
    "depth", "rate_mode", "zero_noise", "params", "vqs", "expansion", "output",
];
const PARAM_KEYS: &[&str] = &["epsilon", "delta", "j", "b", "eta", "temperature", "coupling", "gamma"];
const VQS_KEYS: &[&str] = &["regularization", "svd_cutoff", "abort_residual", "check_invariants"];
const MODE_KEYS: &[&str] = &["d", "nu"];
const OUTPUT_KEYS: &[&str] = &["dir", "verbose", "dump_noise", "dump_states", "dump_limit", "oracles"];

/// One problem found while reading a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: `{}`: {}", self.key, self.message),
            None if self.key.is_empty() => write!(f, "{}", self.message),
            None => write!(f, "`{}`: {}", self.key, self.message),
        }
    }
}

/// Output settings; they never change the observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub verbose: bool,
    pub dump_noise: bool,
    pub dump_states: bool,
    pub dump_limit: usize,
    /// Extra backends run on the same configuration and compared against the main run.
    pub oracles: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, verbose: false, dump_noise: false, dump_states: false, dump_limit: 10, oracles: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqsTable {
    pub regularization: f64,
    pub svd_cutoff: f64,
    pub abort_residual: f64,
    pub check_invariants: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub d: [f64; 2],
    pub nu: [f64; 2],
}

/// Fully resolved configuration, as written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub preset: String,
    pub backend: String,
    pub n_traj: usize,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub first_index: u64,
    pub n_max: usize,
    pub modes: usize,
    pub stride: usize,
    pub closure: String,
    pub depth: usize,
    pub rate_mode: String,
    pub zero_noise: bool,
    pub params: PresetOverrides,
    pub vqs: VqsTable,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expansion: Vec<ModeRow>,
    pub output: OutputConfig,
}

impl ResolvedConfig {
    pub fn ensemble(&self) -> EnsembleConfig {
        let preset = Preset::from_name(&self.preset).expect("checked during parsing");
        let mut e = EnsembleConfig::preset(preset);
        e.backend = Backend::from_name(&self.backend).expect("checked during parsing");
        e.n_traj = self.n_traj;
        e.dt = self.dt;
        e.steps = self.steps;
        e.master_seed = self.seed;
        e.first_index = self.first_index;
        e.n_max = self.n_max;
        e.modes = self.modes;
        e.stride = self.stride;
        e.closure = closure_from(&self.closure).expect("checked during parsing");
        e.depth = self.depth;
        e.rate_mode = rate_mode_from(&self.rate_mode).expect("checked during parsing");
        e.zero_noise = self.zero_noise;
        e.overrides = self.params;
        e.vqs = VqsOptions {
            regularization: self.vqs.regularization,
            svd_cutoff: self.vqs.svd_cutoff,
            abort_residual: self.vqs.abort_residual,
            check_invariants: self.vqs.check_invariants,
        };
        if !self.expansion.is_empty() {
            e.expansion = Some(ModeExpansion {
                modes: self
                    .expansion
                    .iter()
                    .map(|m| Mode { d: Complex64::new(m.d[0], m.d[1]), nu: Complex64::new(m.nu[0], m.nu[1]) })
                    .collect(),
            });
        }
        if self.output.dump_noise || self.output.dump_states {
            e.keep_trajectories = self.output.dump_limit.min(self.n_traj);
        }
        e
    }

    /// SHA-256 of everything except `[output]`, written into every observable file.
    pub fn hash(&self) -> String {
        let mut p = serde_json::to_value(self).expect("serializable");
        p.as_object_mut().expect("object").remove("output");
        let digest = Sha256::digest(p.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved configs serialize")
    }
}

fn closure_from(s: &str) -> Option<Closure> {
    match s {
        "truncate" => Some(Closure::Truncate),
        "markovian-terminator" => Some(Closure::MarkovianTerminator),
        _ => None,
    }
}

fn closure_name(c: Closure) -> &'static str {
    match c {
        Closure::Truncate => "truncate",
        Closure::MarkovianTerminator => "markovian-terminator",
    }
}

fn rate_mode_from(s: &str) -> Option<RateMode> {
    match s {
        "trajectory" => Some(RateMode::Trajectory),
        "fidelity" => Some(RateMode::Fidelity),
        _ => None,
    }
}

fn rate_mode_name(r: RateMode) -> &'static str {
    match r {
        RateMode::Trajectory => "trajectory",
        RateMode::Fidelity => "fidelity",
    }
}

/// Source text of a configuration and where its keys sit.
#[derive(Debug, Clone)]
pub struct ConfigSource {
    pub table: Table,
    lines: BTreeMap<String, usize>,
    set_keys: Vec<String>,
}

impl ConfigSource {
    pub fn parse(text: &str) -> Result<Self, Vec<ConfigIssue>> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            vec![ConfigIssue { key: String::new(), line, message: e.message().to_string() }]
        })?;
        Ok(Self { table, lines: locate_keys(text), set_keys: Vec::new() })
    }

    /// Read a TOML run file, or the resolved config embedded in a manifest.
    pub fn load(path: &Path) -> Result<Self, Vec<ConfigIssue>> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            vec![ConfigIssue { key: String::new(), line: None, message: format!("cannot read config {}: {e}", path.display()) }]
        })?;
        if path.extension().is_some_and(|x| x == "json") {
            let issue = |m: String| vec![ConfigIssue { key: String::new(), line: None, message: m }];
            let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| issue(format!("{}: {e}", path.display())))?;
            let config = json.get("config").ok_or_else(|| issue(format!("{}: manifest has no `config` entry", path.display())))?;
            let table = Table::try_from(config).map_err(|e| issue(format!("{}: {e}", path.display())))?;
            return Ok(Self { table, lines: BTreeMap::new(), set_keys: Vec::new() });
        }
        Self::parse(&text)
    }

    /// Apply a `key=value` override; dotted keys address tables. Values
    /// that are not TOML literals are taken as strings.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigIssue> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigIssue {
            key: assignment.to_string(),
            line: None,
            message: "expected key=value".into(),
        })?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set_value(key.trim(), value)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<(), ConfigIssue> {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigIssue {
            key: key.to_string(),
            line: None,
            message: "empty key".into(),
        })?;
        let mut table = &mut self.table;
        for p in parts {
            let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            table = entry.as_table_mut().ok_or_else(|| ConfigIssue {
                key: key.to_string(),
                line: None,
                message: format!("`{p}` is not a table"),
            })?;
        }
        table.insert(last.to_string(), value);
        self.set_keys.push(key.to_string());
        Ok(())
    }

    fn issue(&self, key: &str, message: impl Into<String>) -> ConfigIssue {
        let line = if self.set_keys.iter().any(|k| k == key) { None } else { self.lines.get(key).copied() };
        let message = message.into();
        let message = if line.is_none() && self.set_keys.iter().any(|k| k == key) { format!("{message} (from --set)") } else { message };
        ConfigIssue { key: key.to_string(), line, message }
    }

    /// Resolve against preset defaults, collecting every issue.
    pub fn resolve(&self) -> Result<ResolvedConfig, Vec<ConfigIssue>> {
        let mut issues = Vec::new();
        check_keys(self, &self.table, "", TOP_KEYS, &mut issues);
        let mut r = Reader { src: self, issues: &mut issues, section: String::new() };

        let preset = match r.string(&self.table, "preset") {
            Some(name) => match Preset::from_name(&name) {
                Some(p) => Some(p),
                None => {
                    r.push("preset", format!("unknown preset `{name}` (expected spin-boson-fig2 or tfim-dqpt)"));
                    None
                }
            },
            None => {
                if !self.table.contains_key("preset") {
                    r.issues.push(ConfigIssue { key: "preset".into(), line: None, message: "missing required key".into() });
                }
                None
            }
        };
        let base = EnsembleConfig::preset(preset.unwrap_or(Preset::SpinBosonFig2));
        let backend = r.string(&self.table, "backend").unwrap_or_else(|| base.backend.name().to_string());
        if Backend::from_name(&backend).is_none() {
            r.push("backend", format!("unknown backend `{backend}` (expected exact, hops, vqs or lindblad)"));
        }
        let closure = r.string(&self.table, "closure").unwrap_or_else(|| closure_name(base.closure).to_string());
        if closure_from(&closure).is_none() {
            r.push("closure", format!("unknown closure `{closure}` (expected truncate or markovian-terminator)"));
        }
        let rate_mode = r.string(&self.table, "rate_mode").unwrap_or_else(|| rate_mode_name(base.rate_mode).to_string());
        if rate_mode_from(&rate_mode).is_none() {
            r.push("rate_mode", format!("unknown rate mode `{rate_mode}` (expected trajectory or fidelity)"));
        }
        let dt = r.float(&self.table, "dt").unwrap_or(base.dt);
        let t_end = r.float(&self.table, "t_end");
        let steps = r.uint(&self.table, "steps");
        let steps = match (t_end, steps) {
            (Some(_), Some(_)) => {
                r.push("steps", "give either t_end or steps, not both");
                base.steps
            }
            (Some(t), None) => {
                let n = (t / dt).round();
                if dt > 0.0 && (n * dt - t).abs() > 1e-9 * t.abs().max(1.0) {
                    r.push("t_end", format!("t_end = {t} is not a whole number of steps dt = {dt}"));
                }
                if n.is_finite() && n >= 0.0 { n as usize } else { 0 }
            }
            (None, Some(n)) => n as usize,
            (None, None) => {
                if dt > 0.0 {
                    (base.window() / dt).round() as usize
                } else {
                    0
                }
            }
        };

        let mut params = PresetOverrides::default();
        if let Some(t) = r.table(&self.table, "params") {
            check_keys(self, t, "params", PARAM_KEYS, r.issues);
            r.section = "params".into();
            params.epsilon = r.float(t, "epsilon");
            params.delta = r.float(t, "delta");
            params.j = r.float(t, "j");
            params.b = r.float(t, "b");
            params.eta = r.float(t, "eta");
            params.temperature = r.float(t, "temperature");
            params.coupling = r.float(t, "coupling");
            params.gamma = r.float(t, "gamma");
            r.section.clear();
        }

        let d = VqsOptions::default();
        let mut vqs = VqsTable {
            regularization: d.regularization,
            svd_cutoff: d.svd_cutoff,
            abort_residual: d.abort_residual,
            check_invariants: d.check_invariants,
        };
        if let Some(t) = r.table(&self.table, "vqs") {
            check_keys(self, t, "vqs", VQS_KEYS, r.issues);
            r.section = "vqs".into();
            vqs.regularization = r.float(t, "regularization").unwrap_or(vqs.regularization);
            vqs.svd_cutoff = r.float(t, "svd_cutoff").unwrap_or(vqs.svd_cutoff);
            vqs.abort_residual = r.float(t, "abort_residual").unwrap_or(vqs.abort_residual);
            vqs.check_invariants = r.boolean(t, "check_invariants").unwrap_or(vqs.check_invariants);
            r.section.clear();
        }

        let mut expansion = Vec::new();
        match self.table.get("expansion") {
            None => {}
            Some(Value::Array(rows)) => {
                for (i, row) in rows.iter().enumerate() {
                    let prefix = format!("expansion[{i}]");
                    match row.as_table() {
                        Some(t) => {
                            check_keys(self, t, &prefix, MODE_KEYS, r.issues);
                            let d = r.pair(t, &prefix, "d");
                            let nu = r.pair(t, &prefix, "nu");
                            if let (Some(d), Some(nu)) = (d, nu) {
                                expansion.push(ModeRow { d, nu });
                            }
                        }
                        None => r.push("expansion", "each entry must be a table with `d` and `nu`"),
                    }
                }
            }
            Some(_) => r.push("expansion", "expected an array of tables ([[expansion]])"),
        }

        let mut output = OutputConfig::default();
        if let Some(t) = r.table(&self.table, "output") {
            check_keys(self, t, "output", OUTPUT_KEYS, r.issues);
            r.section = "output".into();
            output.dir = r.string(t, "dir").map(PathBuf::from);
            output.verbose = r.boolean(t, "verbose").unwrap_or(false);
            output.dump_noise = r.boolean(t, "dump_noise").unwrap_or(false);
            output.dump_states = r.boolean(t, "dump_states").unwrap_or(false);
            output.dump_limit = r.uint(t, "dump_limit").map(|v| v as usize).unwrap_or(output.dump_limit);
            if let Some(v) = t.get("oracles") {
                match v.as_array().map(|a| a.iter().map(|x| x.as_str().map(str::to_string)).collect::<Option<Vec<_>>>()) {
                    Some(Some(list)) => {
                        for o in &list {
                            if Backend::from_name(o).is_none() {
                                r.push("output.oracles", format!("unknown oracle backend `{o}`"));
                            }
                        }
                        output.oracles = list;
                    }
                    _ => r.push("output.oracles", "expected an array of backend names"),
                }
            }
            r.section.clear();
        }

        let resolved = ResolvedConfig {
            preset: preset.map(|p| p.name().to_string()).unwrap_or_default(),
            backend,
            n_traj: r.uint(&self.table, "n_traj").map(|v| v as usize).unwrap_or(base.n_traj),
            dt,
            steps,
            seed: r.uint(&self.table, "seed").unwrap_or(base.master_seed),
            first_index: r.uint(&self.table, "first_index").unwrap_or(base.first_index),
            n_max: r.uint(&self.table, "n_max").map(|v| v as usize).unwrap_or(base.n_max),
            modes: r.uint(&self.table, "modes").map(|v| v as usize).unwrap_or(base.modes),
            stride: r.uint(&self.table, "stride").map(|v| v as usize).unwrap_or(base.stride),
            closure,
            depth: r.uint(&self.table, "depth").map(|v| v as usize).unwrap_or(base.depth),
            rate_mode,
            zero_noise: r.boolean(&self.table, "zero_noise").unwrap_or(false),
            params,
            vqs,
            expansion,
            output,
        };
        if issues.is_empty() {
            for p in resolved.ensemble().problems() {
                issues.push(ConfigIssue { key: String::new(), line: None, message: p });
            }
        }
        if issues.is_empty() {
            Ok(resolved)
        } else {
            Err(issues)
        }
    }
}

struct Reader<'a> {
    src: &'a ConfigSource,
    issues: &'a mut Vec<ConfigIssue>,
    section: String,
}

impl Reader<'_> {
    fn push(&mut self, key: &str, message: impl Into<String>) {
        let i = self.src.issue(key, message);
        self.issues.push(i);
    }

    fn get<'t>(&self, t: &'t Table, key: &str) -> Option<(&'t Value, String)> {
        let path = if self.section.is_empty() { key.to_string() } else { format!("{}.{key}", self.section) };
        t.get(key).map(|v| (v, path))
    }

    fn string(&mut self, t: &Table, key: &str) -> Option<String> {
        let (v, path) = self.get(t, key)?;
        match v.as_str() {
            Some(s) => Some(s.to_string()),
            None => {
                self.push(&path, format!("expected a string, found {}", v.type_str()));
                None
            }
        }
    }

    fn float(&mut self, t: &Table, key: &str) -> Option<f64> {
        let (v, path) = self.get(t, key)?;
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.push(&path, format!("expected a number, found {}", v.type_str()));
                None
            }
        }
    }

    fn uint(&mut self, t: &Table, key: &str) -> Option<u64> {
        let (v, path) = self.get(t, key)?;
        match v {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => {
                self.push(&path, format!("expected a non-negative integer, found {v}"));
                None
            }
        }
    }

    fn boolean(&mut self, t: &Table, key: &str) -> Option<bool> {
        let (v, path) = self.get(t, key)?;
        match v.as_bool() {
            Some(b) => Some(b),
            None => {
                self.push(&path, format!("expected true or false, found {v}"));
                None
            }
        }
    }

    fn table<'t>(&mut self, t: &'t Table, key: &str) -> Option<&'t Table> {
        let (v, path) = self.get(t, key)?;
        match v.as_table() {
            Some(x) => Some(x),
            None => {
                self.push(&path, format!("expected a table, found {}", v.type_str()));
                None
            }
        }
    }

    fn pair(&mut self, t: &Table, prefix: &str, key: &str) -> Option<[f64; 2]> {
        let path = format!("{prefix}.{key}");
        let Some(v) = t.get(key) else {
            self.push(&path, "missing [re, im] pair");
            return None;
        };
        let nums: Option<Vec<f64>> = v.as_array().map(|a| {
            a.iter()
                .filter_map(|x| match x {
                    Value::Float(f) => Some(*f),
                    Value::Integer(i) => Some(*i as f64),
                    _ => None,
                })
                .collect()
        });
        match nums {
            Some(n) if n.len() == 2 && v.as_array().map(|a| a.len()) == Some(2) => Some([n[0], n[1]]),
            _ => {
                self.push(&path, format!("expected [re, im], found {v}"));
                None
            }
        }
    }
}

fn check_keys(src: &ConfigSource, t: &Table, prefix: &str, known: &[&str], issues: &mut Vec<ConfigIssue>) {
    for k in t.keys() {
        if !known.contains(&k.as_str()) {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            issues.push(src.issue(&path, "unknown key"));
        }
    }
}

/// Map dotted key paths to their 1-based source lines.
fn locate_keys(text: &str) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    let mut array_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with("[[") {
            let name = line.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            let c = array_counts.entry(name.clone()).or_insert(0);
            section = format!("{name}[{c}]");
            *c += 1;
            out.entry(name).or_insert(n + 1);
            continue;
        }
        if line.starts_with('[') {
            section = line.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            out.entry(section.clone()).or_insert(n + 1);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim().trim_matches('"');
            if k.is_empty() {
                continue;
            }
            let path = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            out.entry(path).or_insert(n + 1);
        }
    }
    out
}
