//! Run configuration (flat `key = value` text), diagnostics CSV and legacy
//! VTK snapshots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fem::{CompatibilityPolicy, Discretization, FemError};
use crate::manufactured::manufactured_params;
use crate::model::{DiagnosticsRecord, ModelError, Params};
use crate::scenarios::{by_name, ScenarioError};
use crate::scheme::{Level, PotentialBc, SchemeOptions};
use crate::sparse::SolverChoice;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{key}: {reason}")]
    Range { key: String, reason: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed diagnostics line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// What a run simulates.
#[derive(Clone, Debug, PartialEq)]
pub enum Problem {
    /// A preset by CLI name (`energy-decay`, `steric:<i>`, `exponent-k:<k>`).
    Scenario(String),
    /// The manufactured-solution problem with its exact sources.
    Manufactured,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub problem: Problem,
    pub params: Params,
    pub nx: usize,
    pub ny: usize,
    pub solver: SolverChoice,
    pub clamp_viscosity: bool,
    pub sigma_diffusion_coeff_one: bool,
    pub strict_energy: bool,
    pub xi_scales_dirichlet_potential: bool,
    pub potential_bc: PotentialBc,
    pub charge_policy: CompatibilityPolicy,
    pub out_dir: PathBuf,
    pub snapshot_times: Vec<f64>,
}

const KEYS: &[&str] = &[
    "scenario",
    "Re",
    "Pe",
    "Co",
    "lambda",
    "mu0",
    "mu_inf",
    "lambda1",
    "k",
    "z",
    "W",
    "B",
    "dt",
    "T",
    "nx",
    "ny",
    "solver",
    "solver_tol",
    "solver_maxit",
    "clamp_viscosity",
    "sigma_diffusion_coeff_one",
    "strict_energy",
    "xi_scales_dirichlet_potential",
    "potential_bc",
    "charge_policy",
    "out",
    "snapshots",
];

impl RunConfig {
    /// Defaults of a problem before any override.
    pub fn defaults(problem: Problem) -> Result<Self, ConfigError> {
        let (params, n, opts, snapshots) = match &problem {
            Problem::Manufactured => (manufactured_params(), 64, SchemeOptions::default(), vec![]),
            Problem::Scenario(name) => {
                let s = by_name(name)?;
                (s.params, s.n_cells, s.opts, s.snapshot_times)
            }
        };
        Ok(Self {
            problem,
            params,
            nx: n,
            ny: n,
            solver: opts.solver,
            clamp_viscosity: opts.clamp_viscosity,
            sigma_diffusion_coeff_one: opts.sigma_diffusion_coeff_one,
            strict_energy: opts.strict_energy,
            xi_scales_dirichlet_potential: opts.xi_scales_dirichlet_potential,
            potential_bc: opts.potential_bc,
            charge_policy: opts.charge_policy,
            out_dir: PathBuf::from("out"),
            snapshot_times: snapshots,
        })
    }

    /// Scheme options carried by this configuration on top of the problem's.
    pub fn scheme_options(&self, base: SchemeOptions) -> SchemeOptions {
        SchemeOptions {
            clamp_viscosity: self.clamp_viscosity,
            sigma_diffusion_coeff_one: self.sigma_diffusion_coeff_one,
            strict_energy: self.strict_energy,
            xi_scales_dirichlet_potential: self.xi_scales_dirichlet_potential,
            potential_bc: self.potential_bc,
            charge_policy: self.charge_policy,
            solver: self.solver,
            ..base
        }
    }

    /// Every key written explicitly; `parse_config(emit())` reproduces `self`.
    pub fn emit(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(
            "scenario",
            match &self.problem {
                Problem::Manufactured => "manufactured".into(),
                Problem::Scenario(n) => n.clone(),
            },
        );
        for (k, v) in [
            ("Re", p.re),
            ("Pe", p.pe),
            ("Co", p.co),
            ("lambda", p.lambda),
            ("mu0", p.mu0),
            ("mu_inf", p.mu_inf),
            ("lambda1", p.lambda1),
            ("k", p.k),
        ] {
            kv(k, format!("{v:?}"));
        }
        kv("z", p.z.iter().map(|z| z.to_string()).collect::<Vec<_>>().join(", "));
        kv("W", p.w.iter().map(|r| join_f64(r)).collect::<Vec<_>>().join("; "));
        kv("B", p.b.map_or("auto".into(), |b| format!("{b:?}")));
        kv("dt", format!("{:?}", p.dt));
        kv("T", format!("{:?}", p.t_final));
        kv("nx", self.nx.to_string());
        kv("ny", self.ny.to_string());
        match self.solver {
            SolverChoice::Direct => kv("solver", "direct".into()),
            SolverChoice::Iterative { tol, maxit } => {
                kv("solver", "iterative".into());
                kv("solver_tol", format!("{tol:?}"));
                kv("solver_maxit", maxit.to_string());
            }
        }
        kv("clamp_viscosity", self.clamp_viscosity.to_string());
        kv("sigma_diffusion_coeff_one", self.sigma_diffusion_coeff_one.to_string());
        kv("strict_energy", self.strict_energy.to_string());
        kv("xi_scales_dirichlet_potential", self.xi_scales_dirichlet_potential.to_string());
        kv(
            "potential_bc",
            match self.potential_bc {
                PotentialBc::ZeroMean => "zero-mean",
                PotentialBc::DirichletLr => "dirichlet-lr",
            }
            .into(),
        );
        kv(
            "charge_policy",
            match self.charge_policy {
                CompatibilityPolicy::Strict => "strict",
                CompatibilityPolicy::SubtractMean => "subtract-mean",
            }
            .into(),
        );
        kv("out", self.out_dir.display().to_string());
        kv("snapshots", join_f64(&self.snapshot_times));
        s
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

struct Entry<'a> {
    line: usize,
    value: &'a str,
}

fn parse_err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Parse { line, message: message.into() }
}

fn num<T: std::str::FromStr>(e: &Entry, key: &str) -> Result<T, ConfigError> {
    e.value.parse().map_err(|_| parse_err(e.line, format!("{key}: cannot parse `{}`", e.value)))
}

fn list<T: std::str::FromStr>(e: &Entry, key: &str, text: &str) -> Result<Vec<T>, ConfigError> {
    if text.trim().is_empty() {
        return Ok(vec![]);
    }
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| parse_err(e.line, format!("{key}: cannot parse `{}`", t.trim()))))
        .collect()
}

fn boolean(e: &Entry, key: &str) -> Result<bool, ConfigError> {
    match e.value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(parse_err(e.line, format!("{key}: expected true/false, got `{v}`"))),
    }
}

fn range(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Range { key: key.into(), reason: reason.into() }
}

/// Parses a `key = value` document (`#` starts a comment). Defaults come
/// from the selected problem (`scenario`, default `energy-decay`); every
/// override is type- and range-checked.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries: BTreeMap<&str, Entry> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| parse_err(line, format!("expected `key = value`, got `{content}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let key = *KEYS.iter().find(|&&known| known == k).ok_or_else(|| parse_err(line, format!("unknown key `{k}`")))?;
        if entries.insert(key, Entry { line, value: v }).is_some() {
            return Err(parse_err(line, format!("duplicate key `{k}`")));
        }
    }
    let problem = match entries.get("scenario").map(|e| e.value) {
        None => Problem::Scenario("energy-decay".into()),
        Some("manufactured") => Problem::Manufactured,
        Some(name) => Problem::Scenario(name.into()),
    };
    let mut cfg = RunConfig::defaults(problem)?;
    let p = &mut cfg.params;
    for (key, slot) in [
        ("Re", &mut p.re),
        ("Pe", &mut p.pe),
        ("Co", &mut p.co),
        ("lambda", &mut p.lambda),
        ("mu0", &mut p.mu0),
        ("mu_inf", &mut p.mu_inf),
        ("lambda1", &mut p.lambda1),
        ("k", &mut p.k),
        ("dt", &mut p.dt),
        ("T", &mut p.t_final),
    ] {
        if let Some(e) = entries.get(key) {
            *slot = num(e, key)?;
        }
    }
    if let Some(e) = entries.get("z") {
        p.z = list(e, "z", e.value)?;
    }
    if let Some(e) = entries.get("W") {
        p.w = e.value.split(';').map(|row| list(e, "W", row)).collect::<Result<_, _>>()?;
    }
    if let Some(e) = entries.get("B") {
        p.b = if e.value == "auto" { None } else { Some(num(e, "B")?) };
        if p.b.is_some_and(|b| !(b > 0.0)) {
            return Err(range("B", "must be positive"));
        }
    }
    for (key, slot) in [("nx", &mut cfg.nx), ("ny", &mut cfg.ny)] {
        if let Some(e) = entries.get(key) {
            *slot = num(e, key)?;
        }
        if *slot == 0 {
            return Err(range(key, "must be at least 1"));
        }
    }
    let tol = entries.get("solver_tol").map(|e| num::<f64>(e, "solver_tol")).transpose()?;
    let maxit = entries.get("solver_maxit").map(|e| num::<usize>(e, "solver_maxit")).transpose()?;
    if let Some(e) = entries.get("solver") {
        cfg.solver = match e.value {
            "direct" => SolverChoice::Direct,
            "iterative" => SolverChoice::Iterative { tol: tol.unwrap_or(1e-12), maxit: maxit.unwrap_or(10_000) },
            v => return Err(parse_err(e.line, format!("solver: expected direct/iterative, got `{v}`"))),
        };
    }
    if let SolverChoice::Iterative { tol, maxit } = cfg.solver {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(range("solver_tol", "must lie in (0, 1)"));
        }
        if maxit == 0 {
            return Err(range("solver_maxit", "must be at least 1"));
        }
    }
    for (key, slot) in [
        ("clamp_viscosity", &mut cfg.clamp_viscosity),
        ("sigma_diffusion_coeff_one", &mut cfg.sigma_diffusion_coeff_one),
        ("strict_energy", &mut cfg.strict_energy),
        ("xi_scales_dirichlet_potential", &mut cfg.xi_scales_dirichlet_potential),
    ] {
        if let Some(e) = entries.get(key) {
            *slot = boolean(e, key)?;
        }
    }
    if let Some(e) = entries.get("potential_bc") {
        cfg.potential_bc = match e.value {
            "zero-mean" => PotentialBc::ZeroMean,
            "dirichlet-lr" => PotentialBc::DirichletLr,
            v => return Err(parse_err(e.line, format!("potential_bc: expected zero-mean/dirichlet-lr, got `{v}`"))),
        };
    }
    if let Some(e) = entries.get("charge_policy") {
        cfg.charge_policy = match e.value {
            "strict" => CompatibilityPolicy::Strict,
            "subtract-mean" => CompatibilityPolicy::SubtractMean,
            v => return Err(parse_err(e.line, format!("charge_policy: expected strict/subtract-mean, got `{v}`"))),
        };
    }
    if let Some(e) = entries.get("out") {
        cfg.out_dir = PathBuf::from(e.value);
    }
    if let Some(e) = entries.get("snapshots") {
        cfg.snapshot_times = list(e, "snapshots", e.value)?;
        if cfg.snapshot_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(range("snapshots", "times must be finite and nonnegative"));
        }
    }
    cfg.params.validate().map_err(|e| match e {
        ModelError::Range { name, reason } => range(name, reason),
        other => range("params", other.to_string()),
    })?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(0, format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub const DIAGNOSTICS_HEADER: &str = "t,E_h,E_spnp,mass_p,mass_n,min_cp,min_cn,xi,r,visc_dissip,ionic_dissip";

/// One header line and one row per record, 17 significant digits. Two
/// species are assumed (cation first).
pub fn write_diagnostics_csv(records: &[DiagnosticsRecord], mut w: impl Write) -> Result<(), OutputError> {
    writeln!(w, "{DIAGNOSTICS_HEADER}")?;
    for r in records {
        let vals = [
            r.t,
            r.e_h,
            r.e_spnp,
            r.mass.first().copied().unwrap_or(f64::NAN),
            r.mass.get(1).copied().unwrap_or(f64::NAN),
            r.min_c.first().copied().unwrap_or(f64::NAN),
            r.min_c.get(1).copied().unwrap_or(f64::NAN),
            r.xi,
            r.r,
            r.visc_dissip,
            r.ionic_dissip,
        ];
        let row: Vec<String> = vals.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Parses a file written by [`write_diagnostics_csv`].
pub fn read_diagnostics_csv(text: &str) -> Result<Vec<DiagnosticsRecord>, OutputError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DIAGNOSTICS_HEADER => {}
        _ => return Err(OutputError::Malformed { line: 1, message: "missing header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| OutputError::Malformed { line: i + 1, message: e.to_string() })?;
            if v.len() != 11 {
                return Err(OutputError::Malformed { line: i + 1, message: format!("{} columns", v.len()) });
            }
            Ok(DiagnosticsRecord {
                t: v[0],
                e_h: v[1],
                e_spnp: v[2],
                mass: vec![v[3], v[4]],
                min_c: vec![v[5], v[6]],
                xi: v[7],
                r: v[8],
                visc_dissip: v[9],
                ionic_dissip: v[10],
            })
        })
        .collect()
}

/// Data arrays of a snapshot, sampled at the P2 nodes.
pub struct SnapshotData {
    pub scalars: Vec<(String, Vec<f64>)>,
    pub vectors: Vec<(String, Vec<[f64; 2]>)>,
}

impl SnapshotData {
    /// `c_p`, `c_n`, `V`, `p` and `u` of a time level. The pressure is
    /// interpolated linearly to edge midpoints; the cellwise velocity
    /// correction is averaged over the cells touching each node.
    pub fn from_level(disc: &Discretization, lv: &Level) -> Self {
        let n = disc.p2.dofmap.n_dofs;
        let n_nodes = disc.mesh.n_nodes();
        let mut scalars = Vec::new();
        for i in 0..lv.sigma.len() {
            let name = match i {
                0 => "c_p".to_string(),
                1 => "c_n".to_string(),
                _ => format!("c_{i}"),
            };
            scalars.push((name, lv.c_nodal(i)));
        }
        scalars.push(("V".into(), lv.v.coeffs.clone()));
        let mut p = vec![0.0; n];
        p[..n_nodes].copy_from_slice(&lv.p.coeffs[..n_nodes]);
        for (e, edge) in disc.mesh.edges.iter().enumerate() {
            p[n_nodes + e] = 0.5 * (lv.p.coeffs[edge.vertices.0] + lv.p.coeffs[edge.vertices.1]);
        }
        scalars.push(("p".into(), p));
        let mut corr = vec![[0.0; 2]; n];
        let mut count = vec![0usize; n];
        for (cell, dofs) in disc.p2.dofmap.cell_to_dofs.iter().enumerate() {
            for &d in dofs {
                corr[d][0] += lv.u.correction[cell][0];
                corr[d][1] += lv.u.correction[cell][1];
                count[d] += 1;
            }
        }
        let u = (0..n)
            .map(|d| {
                let m = count[d].max(1) as f64;
                [lv.u.nodal.coeffs[d] + corr[d][0] / m, lv.u.nodal.coeffs[n + d] + corr[d][1] / m]
            })
            .collect();
        Self { scalars, vectors: vec![("u".into(), u)] }
    }
}

/// Legacy VTK unstructured grid: every P2 triangle split into four linear
/// triangles through its edge midpoints.
pub fn write_snapshot(disc: &Discretization, data: &SnapshotData, t: f64, mut w: impl Write) -> Result<(), OutputError> {
    let dm = &disc.p2.dofmap;
    let points = dm.dof_points(&disc.mesh);
    for (name, v) in &data.scalars {
        if v.len() != points.len() {
            return Err(FemError::InvalidArgument(format!("array {name} has {} values, expected {}", v.len(), points.len())).into());
        }
    }
    for (name, v) in &data.vectors {
        if v.len() != points.len() {
            return Err(FemError::InvalidArgument(format!("array {name} has {} values, expected {}", v.len(), points.len())).into());
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0\nspnp snapshot t={t:.16e}\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(out, "POINTS {} double", points.len());
    for p in &points {
        let _ = writeln!(out, "{:.16e} {:.16e} 0", p[0], p[1]);
    }
    let n_cells = 4 * dm.cell_to_dofs.len();
    let _ = writeln!(out, "CELLS {} {}", n_cells, 4 * n_cells);
    for d in &dm.cell_to_dofs {
        // vertices 0..3, midpoints of edges (0,1), (1,2), (2,0)
        for tri in [[d[0], d[3], d[5]], [d[3], d[1], d[4]], [d[5], d[4], d[2]], [d[3], d[4], d[5]]] {
            let _ = writeln!(out, "3 {} {} {}", tri[0], tri[1], tri[2]);
        }
    }
    let _ = writeln!(out, "CELL_TYPES {n_cells}");
    for _ in 0..n_cells {
        out.push_str("5\n");
    }
    let _ = writeln!(out, "POINT_DATA {}", points.len());
    for (name, v) in &data.scalars {
        let _ = writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for x in v {
            let _ = writeln!(out, "{x:.16e}");
        }
    }
    for (name, v) in &data.vectors {
        let _ = writeln!(out, "VECTORS {name} double");
        for x in v {
            let _ = writeln!(out, "{:.16e} {:.16e} 0", x[0], x[1]);
        }
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Writes `data` to `dir/snapshot_<index>.vtk` and returns the path.
pub fn write_snapshot_file(
    dir: &Path,
    index: usize,
    disc: &Discretization,
    data: &SnapshotData,
    t: f64,
) -> Result<PathBuf, OutputError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("snapshot_{index:04}.vtk"));
    let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_snapshot(disc, data, t, f)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::SpaceKind;
    use crate::mesh::build_rect_mesh;

    #[test]
    fn empty_document_gives_scenario_defaults() {
        let cfg = parse_config("scenario = energy-decay\n").unwrap();
        assert_eq!(cfg.params, crate::scenarios::scenario_energy_decay().params);
        assert_eq!(parse_config("").unwrap(), cfg);
        assert_eq!((cfg.nx, cfg.ny), (40, 40));
        assert!(cfg.clamp_viscosity && !cfg.sigma_diffusion_coeff_one && !cfg.strict_energy);
        assert!(cfg.xi_scales_dirichlet_potential);
    }

    #[test]
    fn range_errors_name_the_key() {
        let e = parse_config("Re = -1").unwrap_err();
        assert!(matches!(&e, ConfigError::Range { key, .. } if key == "Re"), "{e}");
        assert!(e.to_string().contains("Re"));
        let e = parse_config("nx = 0").unwrap_err();
        assert!(matches!(&e, ConfigError::Range { key, .. } if key == "nx"));
        let e = parse_config("mu0 = 0.1").unwrap_err();
        assert!(matches!(&e, ConfigError::Range { key, .. } if key == "mu0"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse_config("# comment\n\nRe = 2\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 4, .. }), "{e}");
        let e = parse_config("Re = 2\nPe = fast").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }));
        let e = parse_config("Re = 2\nRe = 3").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }));
        let e = parse_config("just words").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 1, .. }));
        assert!(matches!(parse_config("scenario = nope"), Err(ConfigError::Scenario(_))));
    }

    #[test]
    fn overrides_apply() {
        let cfg = parse_config(
            "scenario = steric:2 # comment\nRe = 7.5\nW = 3, 1; 1, 3\nz = 2, -2\nsolver = iterative\nsolver_tol = 1e-10\n\
             snapshots = 0.1, 0.2\ncharge_policy = strict\nB = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.params.re, 7.5);
        assert_eq!(cfg.params.w, vec![vec![3.0, 1.0], vec![1.0, 3.0]]);
        assert_eq!(cfg.params.z, vec![2, -2]);
        assert_eq!(cfg.params.b, Some(4.0));
        assert_eq!(cfg.solver, SolverChoice::Iterative { tol: 1e-10, maxit: 10_000 });
        assert_eq!(cfg.snapshot_times, vec![0.1, 0.2]);
        assert_eq!(cfg.charge_policy, CompatibilityPolicy::Strict);
        assert!(parse_config("W = 1, 2; 0, 1").is_err());
    }

    #[test]
    fn emit_parse_round_trip() {
        for text in ["", "scenario = exponent-k:0.4\nsolver = iterative\nsolver_maxit = 77", "scenario = manufactured\ndt = 0.1"] {
            let cfg = parse_config(text).unwrap();
            let again = parse_config(&cfg.emit()).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(again.emit(), cfg.emit());
        }
    }

    fn record(t: f64) -> DiagnosticsRecord {
        DiagnosticsRecord {
            t,
            e_h: 1.0 / 3.0 + t,
            e_spnp: -0.1 * std::f64::consts::PI,
            mass: vec![12.000000000000002, 11.999999999999998],
            min_c: vec![1e-300, 2.5],
            xi: 1.0 - 1e-17,
            r: 7.0f64.sqrt(),
            visc_dissip: 0.0,
            ionic_dissip: f64::MIN_POSITIVE,
        }
    }

    #[test]
    fn diagnostics_round_trip_bit_exact() {
        let recs: Vec<_> = (0..5).map(|i| record(i as f64 * 0.1)).collect();
        let mut buf = Vec::new();
        write_diagnostics_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back = read_diagnostics_csv(&text).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.e_h.to_bits(), b.e_h.to_bits());
            assert_eq!(a.r.to_bits(), b.r.to_bits());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_records_gives_header_only() {
        let mut buf = Vec::new();
        write_diagnostics_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{DIAGNOSTICS_HEADER}\n"));
    }

    fn two_triangle_disc() -> Discretization {
        Discretization::new(build_rect_mesh(0.0, 1.0, 0.0, 1.0, 1, 1).unwrap()).unwrap()
    }

    #[test]
    fn snapshot_of_two_triangles() {
        let disc = two_triangle_disc();
        let n = disc.n_dofs(SpaceKind::P2);
        let data = SnapshotData { scalars: vec![("c_p".into(), vec![2.5; n])], vectors: vec![("u".into(), vec![[1.0, -1.0]; n])] };
        let mut buf = Vec::new();
        write_snapshot(&disc, &data, 0.5, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("POINTS 9 double"));
        assert!(text.contains("CELLS 8 32"));
        let start = text.find("LOOKUP_TABLE default\n").unwrap() + "LOOKUP_TABLE default\n".len();
        let vals: Vec<f64> = text[start..].lines().take(9).map(|l| l.parse().unwrap()).collect();
        assert!(vals.iter().all(|v| *v == 2.5));
        let bad = SnapshotData { scalars: vec![("c_p".into(), vec![1.0; 3])], vectors: vec![] };
        assert!(write_snapshot(&disc, &bad, 0.0, Vec::new()).is_err());
    }
}
