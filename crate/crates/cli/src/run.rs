//! Stage orchestration and the run directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use weakmfg::bsde::{
    basis_registry, bmo_estimate, solve_backward_with, BsdeOptions, BsdeSolution, RegressionBasis, Truncation,
};
use weakmfg::forward::{
    field_registry, simulate_forward, tangent_flow, Drift, InitialLaw, PathEnsemble, Retention, TimeGrid,
    VectorFieldSet,
};
use weakmfg::master::{
    check_malliavin_representations, check_z_representation, density_diagnostic, estimate_master_field,
    master_equation_residual, solve_tangent_bsde, tangent_bump_oracle, DensityOptions, MalliavinProbes,
    MasterFieldEstimate, ResidualOptions, SecondCopy, SECOND_COPY_SAMPLE,
};
use weakmfg::mfg::{initial_guess_registry, run_picard, EquilibriumConfig, EquilibriumResult, MeasureMode};
use weakmfg::model::{model_registry, verify_assumptions, Driver, LagrangianModel, ModelDriver, SampleSpec, ZeroDriver};
use weakmfg::terminal::{terminal_registry, TerminalCost};
use weakmfg::Error;

use crate::config::{line_of, ConfigInvalid, ScenarioConfig, TruncationSetting, MEMORY_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    SolveBsde,
    SolveMfg,
    Diagnose,
    VerifyAssumptions,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveBsde => "solve-bsde",
            Command::SolveMfg => "solve-mfg",
            Command::Diagnose => "diagnose",
            Command::VerifyAssumptions => "verify-assumptions",
        }
    }
}

/// Why a run stopped; maps one-to-one onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigInvalid),
    NoConvergence(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::NoConvergence(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(c) => write!(f, "{c}"),
            Failure::NoConvergence(m) => write!(f, "no convergence: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

/// Setup mistakes are configuration errors; everything that goes wrong
/// while computing is numerical.
pub fn classify(e: Error) -> Failure {
    match e {
        Error::InvalidParameter(_)
        | Error::UnknownStrategy { .. }
        | Error::ShapeMismatch(_)
        | Error::InvalidInput(_)
        | Error::MissingEvaluator(_)
        | Error::InsufficientNodes { .. }
        | Error::BandwidthInvalid(_)
        | Error::DepthUnsupported { .. }
        | Error::ModeUnsupported { .. } => Failure::Config(ConfigInvalid {
            line: None,
            message: e.to_string(),
        }),
        Error::NoConvergence { .. } => Failure::NoConvergence(e.to_string()),
        _ => Failure::Numerical(e.to_string()),
    }
}

#[derive(Debug, Serialize)]
struct StageRecord {
    name: &'static str,
    status: &'static str,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct FileRecord {
    path: String,
    bytes: u64,
    sha256: String,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub exit_code: i32,
    pub message: Option<String>,
}

struct Scenario {
    vfs: Box<dyn VectorFieldSet>,
    drift: Drift,
    model: Arc<dyn LagrangianModel>,
    terminal: Box<dyn TerminalCost>,
    basis: Arc<dyn RegressionBasis>,
    initial: InitialLaw,
    grid: TimeGrid,
    truncation: Truncation,
}

fn build(cfg: &ScenarioConfig, text: &str) -> Result<Scenario, Failure> {
    let at = |section: &str, key: &str, e: Error| {
        Failure::Config(ConfigInvalid {
            line: line_of(text, section, key),
            message: e.to_string(),
        })
    };
    let vfs = field_registry()
        .build(&cfg.fields.kind, &weakmfg::registry::Params::from_map(cfg.fields.params.clone()))
        .map_err(|e| at("fields", "kind", e))?;
    let drift = Drift::from_name(&cfg.fields.drift).map_err(|e| at("fields", "drift", e))?;
    let model: Arc<dyn LagrangianModel> = model_registry()
        .build(&cfg.model.kind, &cfg.model.params())
        .map_err(|e| at("model", "kind", e))?
        .into();
    let terminal = terminal_registry()
        .build(&cfg.terminal.kind, &cfg.terminal.params())
        .map_err(|e| at("terminal", "kind", e))?;
    let basis: Arc<dyn RegressionBasis> = basis_registry()
        .build(&cfg.solver.basis.kind, &cfg.solver.basis.params())
        .map_err(|e| at("solver.basis", "kind", e))?
        .into();
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    let e = &cfg.ensemble;
    let initial = match e.initial.as_str() {
        "point" => InitialLaw::Point(e.point.clone().unwrap_or_default()),
        _ => InitialLaw::Gaussian {
            mean: e.mean.clone().unwrap_or_default(),
            std: e.std.unwrap_or(1.0),
        },
    };
    let mismatch = |section: &str, key: &str, msg: String| {
        Failure::Config(ConfigInvalid {
            line: line_of(text, section, key),
            message: msg,
        })
    };
    if initial.dim() != Some(d) {
        return Err(mismatch("ensemble", "initial", format!("initial law must have dimension {d}")));
    }
    if model.dim_state() != d || model.dim_control() != m {
        return Err(mismatch(
            "model",
            "kind",
            format!("model dimensions ({}, {}) do not match the fields ({d}, {m})", model.dim_state(), model.dim_control()),
        ));
    }
    if terminal.dim() != d {
        return Err(mismatch("terminal", "kind", format!("terminal cost has dimension {}, fields {d}", terminal.dim())));
    }
    let grid = TimeGrid::new(cfg.grid.t0, cfg.grid.t_end, cfg.grid.steps).map_err(|e| at("grid", "steps", e))?;
    let truncation = match &cfg.solver.truncation {
        TruncationSetting::Named(n) if n == "off" => Truncation::Off,
        TruncationSetting::Named(_) => Truncation::Auto,
        TruncationSetting::Radius(r) => Truncation::Radius(*r),
    };
    if let Ok(cap) = std::env::var(MEMORY_ENV) {
        let cap: f64 = cap.parse().map_err(|_| {
            Failure::Config(ConfigInvalid {
                line: None,
                message: format!("{MEMORY_ENV} must be a number of MiB, got '{cap}'"),
            })
        })?;
        let need = cfg.estimated_memory_mb(d, m);
        if need > cap {
            return Err(mismatch(
                "ensemble",
                "particles",
                format!("estimated working set {need:.0} MiB exceeds {MEMORY_ENV}={cap}"),
            ));
        }
    }
    Ok(Scenario {
        vfs,
        drift,
        model,
        terminal,
        basis,
        initial,
        grid,
        truncation,
    })
}

struct Run<'a> {
    dir: PathBuf,
    stages: Vec<StageRecord>,
    files: Vec<String>,
    cfg: &'a ScenarioConfig,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&Path) -> weakmfg::Result<T>) -> Result<T, Failure> {
        let start = Instant::now();
        let out = f(&self.dir);
        self.stages.push(StageRecord {
            name,
            status: if out.is_ok() { "ok" } else { "failed" },
            seconds: start.elapsed().as_secs_f64(),
        });
        out.map_err(classify)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numerical(e.to_string()))?;
        std::fs::write(self.dir.join(name), text).map_err(|e| Failure::Numerical(e.to_string()))?;
        self.files.push(name.into());
        Ok(())
    }
}

pub fn run_scenario(command: Command, cfg: &ScenarioConfig, text: &str, dir: &Path) -> RunOutcome {
    let started = Instant::now();
    let mut run = Run {
        dir: dir.to_path_buf(),
        stages: Vec::new(),
        files: Vec::new(),
        cfg,
    };
    let mut convergence = serde_json::Value::Null;
    let result = std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Numerical(format!("cannot create {}: {e}", dir.display())))
        .and_then(|_| execute(command, &mut run, text, &mut convergence));
    let (exit_code, message) = match &result {
        Ok(()) => (0, None),
        Err(f) => (f.exit_code(), Some(f.to_string())),
    };
    if let Err(e) = write_manifest(&run, command, text, started, exit_code, &message, convergence) {
        return RunOutcome {
            dir: run.dir,
            exit_code: 3,
            message: Some(format!("writing manifest: {e}")),
        };
    }
    RunOutcome {
        dir: run.dir,
        exit_code,
        message,
    }
}

fn execute(command: Command, run: &mut Run<'_>, text: &str, convergence: &mut serde_json::Value) -> Result<(), Failure> {
    let cfg = run.cfg;
    let sc = build(cfg, text)?;
    if command == Command::VerifyAssumptions {
        let d = sc.model.dim_state();
        let spec = SampleSpec::new(d, cfg.diagnostics.x_radius, cfg.diagnostics.a_radius);
        let report = run.stage("verify-assumptions", |_| verify_assumptions(sc.model.as_ref(), &spec))?;
        run.json("assumptions.json", &report)?;
        return Ok(());
    }

    let paths = run.stage("simulate", |dir| {
        let p = simulate_forward(sc.vfs.as_ref(), &sc.drift, &sc.initial, sc.grid, cfg.ensemble.particles, cfg.seed)?;
        p.write_csv(&dir.join("paths.csv"))?;
        Ok(p)
    })?;
    run.files.push("paths.csv".into());
    if command == Command::Simulate {
        let files = run.stage("flow", |dir| paths.law_flow().write_dir(&dir.join("flow")))?;
        run.files.extend(files.into_iter().map(|f| format!("flow/{f}")));
        return Ok(());
    }

    if command == Command::SolveBsde {
        // L ≡ 0 has no unique minimizer, but F = L(α̂) ≡ 0 regardless
        let driver: Box<dyn Driver> = if cfg.model.kind == "zero" {
            Box::new(ZeroDriver::new(sc.vfs.dim_state(), sc.vfs.dim_noise()))
        } else {
            Box::new(ModelDriver::new(sc.model.clone()))
        };
        let opts = BsdeOptions {
            truncation: sc.truncation,
            diffusion: Some(sc.vfs.as_ref()),
            ..Default::default()
        };
        let flow = paths.law_flow();
        let sol = run.stage("solve-bsde", |_| {
            solve_backward_with(&paths, driver.as_ref(), &flow, sc.terminal.as_ref(), sc.basis.as_ref(), &opts)
        })?;
        let bmo = if cfg.diagnostics.bmo {
            Some(run.stage("bmo", |_| bmo_estimate(&sol, &paths, sc.basis.as_ref()))?)
        } else {
            None
        };
        run.stage("write-solution", |dir| {
            sol.write_csv(&dir.join("solution.csv"))?;
            sol.write_diagnostics(&dir.join("solution.json"), bmo)
        })?;
        run.files.extend(["solution.csv".into(), "solution.json".into()]);
        diagnose(run, &sc, driver.as_ref(), &paths, &sol, None)?;
        return Ok(());
    }

    let eq_config = EquilibriumConfig {
        particles: cfg.ensemble.particles,
        seed: cfg.seed,
        damping: cfg.solver.damping,
        tol: cfg.solver.tol,
        max_iter: cfg.solver.max_iter,
        measure_mode: MeasureMode::from_name(&cfg.solver.measure_mode).map_err(|e| {
            Failure::Config(ConfigInvalid {
                line: line_of(text, "solver", "measure_mode"),
                message: e.to_string(),
            })
        })?,
        basis: sc.basis.clone(),
        initial_guess: initial_guess_registry()
            .build(&cfg.solver.initial_guess.kind, &cfg.solver.initial_guess.params())
            .map_err(|e| {
                Failure::Config(ConfigInvalid {
                    line: line_of(text, "solver.initial_guess", "kind"),
                    message: e.to_string(),
                })
            })?
            .into(),
        truncation: sc.truncation,
    };
    let result = run.stage("solve-mfg", |_| {
        run_picard(paths.clone(), sc.model.clone(), sc.terminal.as_ref(), Some(sc.vfs.as_ref()), &eq_config)
    })?;
    let files = run.stage("write-equilibrium", |dir| result.write_artifacts(dir))?;
    run.files.extend(files);
    *convergence = json!({
        "converged": result.converged,
        "iterations": result.iterations,
        "final_residual": result.residual_history.last(),
        "residual_history": result.residual_history,
    });
    if cfg.diagnostics.bmo {
        let b = run.stage("bmo", |_| bmo_estimate(&result.solution, &paths, sc.basis.as_ref()))?;
        run.json("bmo.json", &json!({ "bmo_estimate": b }))?;
    }
    if command == Command::Diagnose {
        let driver = ModelDriver::new(sc.model.clone());
        diagnose(run, &sc, &driver, &paths, &result.solution, Some(&result))?;
    }
    if !result.converged {
        return Err(Failure::NoConvergence(format!(
            "{} iterations, last residual {:e}",
            result.iterations,
            result.residual_history.last().copied().unwrap_or(f64::NAN)
        )));
    }
    Ok(())
}

/// Evaluation points for u-field tables: 41 points over mean ± 3 sd of the
/// terminal coordinate in d = 1, otherwise 41 strided ensemble points.
fn table_points(paths: &PathEnsemble) -> Vec<f64> {
    let (d, p, n) = (paths.dim(), paths.particles(), paths.steps());
    if d == 1 {
        let xs: Vec<f64> = (0..p).map(|i| paths.state(i, n)[0]).collect();
        let mean = xs.iter().sum::<f64>() / p as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p as f64).sqrt().max(1e-3);
        (0..41).map(|k| mean + sd * (-3.0 + 6.0 * k as f64 / 40.0)).collect()
    } else {
        (0..41.min(p)).flat_map(|k| paths.state(k * p / 41.min(p), n).to_vec()).collect()
    }
}

fn diagnose(
    run: &mut Run<'_>,
    sc: &Scenario,
    driver: &dyn Driver,
    paths: &PathEnsemble,
    sol: &BsdeSolution,
    eq: Option<&EquilibriumResult>,
) -> Result<(), Failure> {
    let cfg = run.cfg.diagnostics.clone();
    let vfs = sc.vfs.as_ref();
    let mut mf: MasterFieldEstimate = run.stage("master-field", |_| estimate_master_field(sol, paths, sc.basis.as_ref()))?;
    if let Some(eq) = eq {
        mf = mf.with_flow(eq.flow.clone()).map_err(classify)?;
    }
    if cfg.master_field {
        let pts = table_points(paths);
        run.stage("u-field", |dir| mf.write_csv(&dir.join("u_field.csv"), &pts))?;
        run.files.push("u_field.csv".into());
    }
    if cfg.z_representation {
        let r = run.stage("z-representation", |_| check_z_representation(sol, &mf, vfs, paths))?;
        run.json("z_representation.json", &r)?;
    }
    if cfg.malliavin || cfg.tangent {
        let tf = run.stage("tangent-flow", |_| tangent_flow(vfs, &sc.drift, paths, &Retention::All))?;
        if cfg.malliavin {
            let probes = MalliavinProbes::spread(paths.steps(), cfg.malliavin_probes);
            let r = run.stage("malliavin", |_| {
                check_malliavin_representations(sol, &tf, vfs, &sc.drift, paths, &mf, &probes)
            })?;
            run.json("malliavin.json", &r)?;
        }
        if cfg.tangent {
            let flow = mf.flow().clone();
            let r = run.stage("tangent-bsde", |_| {
                let copy = SecondCopy::simulate(
                    vfs,
                    &sc.drift,
                    &sc.initial,
                    sc.grid,
                    paths.particles(),
                    paths.seed(),
                    SECOND_COPY_SAMPLE,
                )?;
                let t = solve_tangent_bsde(paths, &tf, sol, driver, &flow, sc.terminal.as_ref(), sc.basis.as_ref(), &copy)?;
                let oracle = tangent_bump_oracle(vfs, &sc.drift, paths, driver, sc.terminal.as_ref(), sc.basis.as_ref(), 1e-3)?;
                let d = paths.dim();
                let mut mean = vec![0.0; d];
                for (k, v) in oracle.iter().enumerate() {
                    mean[k % d] += v / paths.particles() as f64;
                }
                Ok(json!({
                    "grad_y0_mean": t.grad_y0_mean(),
                    "bump_oracle_mean": mean,
                    "y_residuals": t.y_residuals,
                    "z_residuals": t.z_residuals,
                }))
            })?;
            run.json("tangent.json", &r)?;
        }
    }
    if cfg.residual {
        let r = run.stage("master-residual", |_| {
            master_equation_residual(&mf, sc.model.as_ref(), vfs, &sc.drift, &ResidualOptions::default())
        })?;
        run.json("residual.json", &r)?;
    }
    if cfg.density {
        let node = cfg.density_node.unwrap_or(paths.steps());
        let opts = DensityOptions {
            coordinate: cfg.density_coordinate,
            ..Default::default()
        };
        let r = run.stage("density", |dir| {
            let r = density_diagnostic(paths, node, &opts)?;
            let mut text = String::from("x,density\n");
            for (x, f) in r.grid.iter().zip(&r.density) {
                text.push_str(&format!("{x},{f}\n"));
            }
            std::fs::write(dir.join("density.csv"), text)?;
            Ok(r)
        })?;
        run.files.push("density.csv".into());
        run.json("density.json", &r)?;
    }
    if cfg.assumptions {
        let spec = SampleSpec::new(sc.model.dim_state(), cfg.x_radius, cfg.a_radius);
        let r = run.stage("verify-assumptions", |_| verify_assumptions(sc.model.as_ref(), &spec))?;
        run.json("assumptions.json", &r)?;
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(
    run: &Run<'_>,
    command: Command,
    text: &str,
    started: Instant,
    exit_code: i32,
    message: &Option<String>,
    convergence: serde_json::Value,
) -> std::io::Result<()> {
    let mut names = run.files.clone();
    names.sort();
    names.dedup();
    let mut files = Vec::with_capacity(names.len());
    for name in names {
        let bytes = std::fs::read(run.dir.join(&name))?;
        files.push(FileRecord {
            path: name,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = json!({
        "scenario": run.cfg.scenario,
        "command": command.name(),
        "seed": run.cfg.seed,
        "config": run.cfg,
        "config_text": text,
        "code_version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "stages": run.stages,
        "convergence": convergence,
        "exit_code": exit_code,
        "message": message,
        "files": files,
    });
    let tmp = run.dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(tmp, run.dir.join("manifest.json"))
}
