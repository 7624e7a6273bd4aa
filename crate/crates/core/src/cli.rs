//! Command-line front end: TOML configuration, subcommands and reports.
//!
//! Exit codes: 0 pass, 1 fail, 2 configuration error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coverings::{pi1_linear_part, preimages, Construction};
use crate::error::{Error, Result};
use crate::expansion::{run_constants, run_pipeline, Grid, PipelineConfig};
use crate::fields::{TrigDisplacementField, TrigTerm};
use crate::linalg::{reduce_mod_one, Vector};
use crate::manifolds::{check_seams, map_point, MTPoint, Piece};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const MIN_RESOLUTION: usize = 4;

fn default_base() -> i64 {
    3
}
fn default_nu_target() -> f64 {
    2.0
}
fn default_k_max() -> usize {
    12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "GridConfig::default_fiber")]
    pub fiber: usize,
    #[serde(default = "GridConfig::default_time")]
    pub time: usize,
    #[serde(default = "GridConfig::default_directions")]
    pub directions: usize,
    #[serde(default = "GridConfig::default_adapted_samples")]
    pub adapted_samples: usize,
    #[serde(default = "GridConfig::default_seam_samples")]
    pub seam_samples: usize,
}

impl GridConfig {
    fn default_fiber() -> usize {
        32
    }
    fn default_time() -> usize {
        16
    }
    fn default_directions() -> usize {
        16
    }
    fn default_adapted_samples() -> usize {
        1000
    }
    fn default_seam_samples() -> usize {
        100
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            fiber: Self::default_fiber(),
            time: Self::default_time(),
            directions: Self::default_directions(),
            adapted_samples: Self::default_adapted_samples(),
            seam_samples: Self::default_seam_samples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "Tolerances::default_newton")]
    pub newton_tol: f64,
    #[serde(default = "Tolerances::default_seam")]
    pub seam_tol: f64,
    #[serde(default = "Tolerances::default_fd")]
    pub fd_rel_tol: f64,
    #[serde(default = "Tolerances::default_rel")]
    pub tol_rel: f64,
}

impl Tolerances {
    fn default_newton() -> f64 {
        1e-12
    }
    fn default_seam() -> f64 {
        1e-9
    }
    fn default_fd() -> f64 {
        1e-5
    }
    fn default_rel() -> f64 {
        1e-3
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            newton_tol: Self::default_newton(),
            seam_tol: Self::default_seam(),
            fd_rel_tol: Self::default_fd(),
            tol_rel: Self::default_rel(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub json: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

/// The run configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub epsilon: f64,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_base")]
    pub base: i64,
    #[serde(default = "default_nu_target")]
    pub nu_target: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    pub field: Vec<TrigTerm>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 1 {
            return bad("`n` must be at least 1".into());
        }
        if self.m < 1 {
            return bad("`m` must be at least 1".into());
        }
        if self.k == Some(0) {
            return bad("`k` must be at least 1".into());
        }
        if self.base < 2 {
            return bad("`base` must be at least 2".into());
        }
        if !self.epsilon.is_finite() {
            return bad("`epsilon` must be finite".into());
        }
        if !(self.nu_target > 0.0) {
            return bad("`nu_target` must be positive".into());
        }
        let g = &self.grid;
        for (key, value) in [
            ("grid.fiber", g.fiber),
            ("grid.time", g.time),
            ("grid.directions", g.directions),
            ("grid.seam_samples", g.seam_samples),
            ("grid.adapted_samples", g.adapted_samples),
        ] {
            if value < MIN_RESOLUTION {
                return bad(format!("`{key}` must be at least {MIN_RESOLUTION}"));
            }
        }
        let t = &self.tolerances;
        for (key, value) in [
            ("tolerances.newton_tol", t.newton_tol),
            ("tolerances.seam_tol", t.seam_tol),
            ("tolerances.fd_rel_tol", t.fd_rel_tol),
            ("tolerances.tol_rel", t.tol_rel),
        ] {
            if !(value > 0.0) {
                return bad(format!("`{key}` must be positive"));
            }
        }
        for (i, term) in self.field.iter().enumerate() {
            if term.coeff.len() != self.n || term.freq.len() != self.n {
                return bad(format!("`field[{i}]` must have {} coefficients and frequencies", self.n));
            }
        }
        Ok(())
    }

    /// The displacement field `ε · Σ terms`.
    pub fn displacement(&self) -> Result<TrigDisplacementField> {
        Ok(TrigDisplacementField::new(self.n, self.field.clone())?.scaled(self.epsilon))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            field: self.displacement()?,
            m: self.m,
            k: self.k,
            base: self.base,
            nu_target: self.nu_target,
            k_max: self.k_max,
            grid: Grid::new(self.grid.fiber, self.grid.time)?,
            directions: self.grid.directions,
            adapted_samples: self.grid.adapted_samples,
            tol_rel: self.tolerances.tol_rel,
            fd_rel_tol: self.tolerances.fd_rel_tol,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "mtorus", about = "Expanding self-covers of mapping tori", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path (default: `output.json` from the config, else stdout).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Include wall-clock timings in the report.
    #[arg(long, global = true)]
    pub timings: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the metric and expansion constants.
    Constants,
    /// Run the full expansion verification.
    Verify,
    /// Linear part and preimage count of the expanding map.
    Degree {
        #[arg(long, allow_hyphen_values = true)]
        t: Option<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
    },
    /// Iterate the expanding map from a point, as CSV.
    Orbit {
        #[arg(long, allow_hyphen_values = true)]
        t: f64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Largest seam discrepancy of every stage and composite.
    Seams,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    let result = (|| -> Result<i32> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("missing --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(Error::Config("`--threads` must be at least 1".into()));
            }
            pool = pool.num_threads(n);
        }
        let pool = pool
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(cli, &cfg))
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_NUMERIC
            }
        }
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<i32> {
    let start = Instant::now();
    let (mut report, pass, text) = match &cli.command {
        Command::Constants => cmd_constants(cfg)?,
        Command::Verify => cmd_verify(cfg)?,
        Command::Degree { t, x } => cmd_degree(cfg, *t, x.as_deref())?,
        Command::Orbit { t, x, steps } => cmd_orbit(cfg, *t, x, *steps)?,
        Command::Seams => cmd_seams(cfg)?,
    };
    let body = match text {
        Some(csv) => csv,
        None => {
            if let Value::Object(map) = &mut report {
                let timings = if cli.timings {
                    json!({ "total_seconds": start.elapsed().as_secs_f64() })
                } else {
                    Value::Null
                };
                map.insert("timings".into(), timings);
            }
            let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
            s.push('\n');
            s
        }
    };
    let target = cli.out.clone().or_else(|| match &cli.command {
        Command::Orbit { .. } => None,
        _ => cfg.output.json.clone(),
    });
    match target {
        Some(path) => std::fs::write(&path, body)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{body}"),
    }
    Ok(if pass { EXIT_PASS } else { EXIT_FAIL })
}

type Outcome = (Value, bool, Option<String>);

fn echo(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn construction(cfg: &RunConfig) -> Result<Construction> {
    let pipeline = cfg.pipeline()?;
    let k = match cfg.k {
        Some(k) => k,
        None => run_constants(&pipeline)?.constants.k,
    };
    Construction::from_field(&pipeline.field, k, cfg.m, cfg.base)
}

pub fn cmd_constants(cfg: &RunConfig) -> Result<Outcome> {
    let run = run_constants(&cfg.pipeline()?)?;
    let c = &run.constants;
    let pass = c.c_eq > 0.0 && c.c_fiber > 0.0 && c.c_q > 0.0 && c.c_fiber >= c.c_uniform_bound;
    let report = json!({
        "config_echo": echo(cfg),
        "constants": c,
        "expansion": Value::Null,
        "pass": pass,
    });
    Ok((report, pass, None))
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome> {
    let out = run_pipeline(&cfg.pipeline()?)?;
    if let Some(path) = &cfg.output.csv {
        std::fs::write(path, conorm_csv(cfg.n, &out.local_conorms))
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    }
    let pass = out.expansion.pass;
    let report = json!({
        "config_echo": echo(cfg),
        "constants": out.constants,
        "expansion": out.expansion,
        "pass": pass,
    });
    Ok((report, pass, None))
}

/// 17 significant digits.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn conorm_csv(dim: usize, rows: &[(MTPoint, f64)]) -> String {
    let mut s = String::from("t");
    for i in 1..=dim {
        let _ = write!(s, ",x_{i}");
    }
    s.push_str(",local_conorm\n");
    for (p, c) in rows {
        s.push_str(&fmt_f64(p.t));
        for xi in p.x.iter() {
            s.push(',');
            s.push_str(&fmt_f64(*xi));
        }
        s.push(',');
        s.push_str(&fmt_f64(*c));
        s.push('\n');
    }
    s
}

fn point_from(cfg: &RunConfig, t: f64, x: &[f64]) -> Result<MTPoint> {
    if x.len() != cfg.n {
        return Err(Error::DimensionMismatch {
            expected: cfg.n,
            found: x.len(),
        });
    }
    Ok(MTPoint::new(
        0,
        t.rem_euclid(1.0),
        reduce_mod_one(&Vector::from_column_slice(x)),
    ))
}

pub fn cmd_degree(cfg: &RunConfig, t: Option<f64>, x: Option<&[f64]>) -> Result<Outcome> {
    let c = construction(cfg)?;
    let linear = pi1_linear_part(c.f())?;
    let det: i64 = (0..linear.nrows()).map(|i| linear[(i, i)]).product();
    let offdiag = (0..linear.nrows())
        .any(|r| (0..linear.ncols()).any(|col| r != col && linear[(r, col)] != 0));
    let q = match (t, x) {
        (Some(t), Some(x)) => point_from(cfg, t, x)?,
        (None, None) => crate::expansion::random_points(cfg.n, 1, cfg.seed).remove(0),
        _ => return Err(Error::Config("`--t` and `--x` must be given together".into())),
    };
    let pre = preimages(c.f(), &q, cfg.tolerances.newton_tol)?;
    let mut separation = f64::INFINITY;
    for (i, a) in pre.iter().enumerate() {
        for b in &pre[i + 1..] {
            separation = separation.min(c.space().distance(a, b)?);
        }
    }
    let expected = det.unsigned_abs() as usize;
    let pass = !offdiag && pre.len() == expected;
    let rows: Vec<Vec<i64>> = (0..linear.nrows())
        .map(|r| (0..linear.ncols()).map(|col| linear[(r, col)]).collect())
        .collect();
    let report = json!({
        "config_echo": echo(cfg),
        "k": c.k(),
        "m": c.m(),
        "linear_part": rows,
        "determinant": det,
        "target": { "t": q.t, "x": q.x.as_slice() },
        "preimages": pre.len(),
        "expected": expected,
        "min_separation": if separation.is_finite() { json!(separation) } else { Value::Null },
        "pass": pass,
    });
    Ok((report, pass, None))
}

pub fn cmd_orbit(cfg: &RunConfig, t: f64, x: &[f64], steps: usize) -> Result<Outcome> {
    let c = construction(cfg)?;
    let mut p = point_from(cfg, t, x)?;
    let mut rows = vec![p.clone()];
    for _ in 0..steps {
        p = map_point(c.f(), &p, Piece::Upper, true)?;
        rows.push(p.clone());
    }
    let mut s = String::from("step,t");
    for i in 1..=cfg.n {
        let _ = write!(s, ",x_{i}");
    }
    s.push('\n');
    for (step, p) in rows.iter().enumerate() {
        let _ = write!(s, "{step},{}", fmt_f64(p.t));
        for xi in p.x.iter() {
            let _ = write!(s, ",{}", fmt_f64(*xi));
        }
        s.push('\n');
    }
    Ok((Value::Null, true, Some(s)))
}

pub fn cmd_seams(cfg: &RunConfig) -> Result<Outcome> {
    let c = construction(cfg)?;
    let mut maps = Vec::new();
    let mut worst = 0.0f64;
    for map in c.all_maps() {
        let d = check_seams(&*map, cfg.grid.seam_samples, cfg.seed)?;
        worst = worst.max(d);
        maps.push(json!({ "map": map.name(), "discrepancy": d }));
    }
    let pass = worst < cfg.tolerances.seam_tol;
    let report = json!({
        "config_echo": echo(cfg),
        "k": c.k(),
        "m": c.m(),
        "maps": maps,
        "max_discrepancy": worst,
        "pass": pass,
    });
    Ok((report, pass, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
n = 2
epsilon = 0.0
m = 1
k = 1
[[field]]
coeff = [1.0, 0.0]
freq = [0, 1]
phase = "sin"
[grid]
fiber = 8
time = 5
directions = 8
adapted_samples = 16
"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.base, 3);
        assert_eq!(cfg.nu_target, 2.0);
        assert_eq!(cfg.grid.seam_samples, 100);
        assert_eq!(cfg.tolerances.seam_tol, 1e-9);
    }

    #[test]
    fn missing_field_names_the_key() {
        let text = BASE.replace("epsilon = 0.0\n", "");
        match RunConfig::from_toml(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("epsilon"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let text = BASE.split("[[field]]").next().unwrap().to_string();
        match RunConfig::from_toml(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("field"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(RunConfig::from_toml(&format!("bogus = 1\n{BASE}")).is_err());
        let text = BASE.replace("fiber = 8", "fiber = 2");
        match RunConfig::from_toml(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("grid.fiber")),
            other => panic!("{other:?}"),
        }
        let text = BASE.replace("coeff = [1.0, 0.0]", "coeff = [1.0]");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn csv_has_seventeen_digits() {
        let rows = vec![(MTPoint::new(0, 0.1, Vector::from_vec(vec![0.5, 0.25])), 3.0)];
        let csv = conorm_csv(2, &rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,x_2,local_conorm");
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0], "1.0000000000000001e-1");
        assert_eq!(fields[0].parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn orbit_of_linear_model() {
        let cfg = RunConfig::from_toml(BASE).unwrap();
        let (_, _, csv) = cmd_orbit(&cfg, 0.1, &[0.1, 0.1], 3).unwrap();
        let ts: Vec<f64> = csv
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        for (got, want) in ts.iter().zip([0.1, 0.3, 0.9, 0.7]) {
            assert!((got - want).abs() < 1e-12, "{ts:?}");
        }
    }
}
