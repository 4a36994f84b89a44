//! Damped Picard iteration on the law flow.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::girsanov::{girsanov_weights, GirsanovWeights};
use crate::bsde::{solve_backward_with, BsdeOptions, BsdeSolution, PolynomialBasis, RegressionBasis, Truncation};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward, Drift, InitialLaw, PathEnsemble, TimeGrid, VectorFieldSet};
use crate::measure::{wasserstein2_subsampled, EmpiricalMeasure, LawFlow};
use crate::model::{monotonicity_check, LagrangianModel, ModelDriver};
use crate::registry::{Params, Registry};
use crate::terminal::TerminalCost;

/// Support points per measure used for the monotonicity evidence.
const MONOTONICITY_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureMode {
    /// Laws reweighted by the Girsanov density (the population under the
    /// controlled measure).
    #[default]
    Tilted,
    /// Plain empirical laws of the control-free ensemble.
    Untilted,
}

impl MeasureMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tilted" => Ok(Self::Tilted),
            "untilted" => Ok(Self::Untilted),
            other => Err(Error::UnknownStrategy {
                kind: "measure mode",
                name: other.into(),
                known: "tilted, untilted".into(),
            }),
        }
    }
}

/// Initial weights μ⁰ on the fixed support of the ensemble.
pub trait InitialGuess: Send + Sync {
    fn name(&self) -> String;
    /// Unnormalized weights of the particles at node n.
    fn weights(&self, paths: &PathEnsemble, n: usize) -> Vec<f64>;
}

/// μ⁰ = unweighted empirical flow.
#[derive(Debug, Clone, Default)]
pub struct UniformGuess;

impl InitialGuess for UniformGuess {
    fn name(&self) -> String {
        "uniform".into()
    }
    fn weights(&self, paths: &PathEnsemble, _n: usize) -> Vec<f64> {
        vec![1.0; paths.particles()]
    }
}

/// μ⁰ ∝ N(mean, std²·I) density evaluated at the particles of each node.
#[derive(Debug, Clone)]
pub struct GaussianGuess {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl InitialGuess for GaussianGuess {
    fn name(&self) -> String {
        format!("gaussian({:?}, {})", self.mean, self.std)
    }
    fn weights(&self, paths: &PathEnsemble, n: usize) -> Vec<f64> {
        let log: Vec<f64> = (0..paths.particles())
            .map(|i| {
                let x = paths.state(i, n);
                -0.5 * x.iter().zip(&self.mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (self.std * self.std)
            })
            .collect();
        // shift by the max so that far-away nodes do not underflow
        let top = log.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        log.iter().map(|v| (v - top).exp()).collect()
    }
}

pub fn initial_guess_registry() -> Registry<dyn InitialGuess> {
    let mut reg: Registry<dyn InitialGuess> = Registry::new("initial guess");
    reg.register("uniform", "unweighted empirical flow", |_| Ok(Box::new(UniformGuess)));
    reg.register("gaussian", "weights ∝ N(mean, std²) density at the particles", |p: &Params| {
        let std = p.f64_or("std", 1.0)?;
        if !(std > 0.0) {
            return Err(Error::InvalidParameter(format!("std must be positive, got {std}")));
        }
        Ok(Box::new(GaussianGuess {
            mean: p.list_or("mean", &[0.0])?,
            std,
        }))
    });
    reg
}

#[derive(Clone)]
pub struct EquilibriumConfig {
    pub particles: usize,
    pub seed: u64,
    /// θ ∈ (0, 1]: μᵏ⁺¹ = (1 − θ)μᵏ + θνᵏ on the weights.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub measure_mode: MeasureMode,
    pub basis: Arc<dyn RegressionBasis>,
    pub initial_guess: Arc<dyn InitialGuess>,
    pub truncation: Truncation,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self {
            particles: 10_000,
            seed: 0,
            damping: 1.0,
            tol: 1e-3,
            max_iter: 50,
            measure_mode: MeasureMode::Tilted,
            basis: Arc::new(PolynomialBasis::new(2)),
            initial_guess: Arc::new(UniformGuess),
            truncation: Truncation::Auto,
        }
    }
}

impl EquilibriumConfig {
    fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 || self.particles == 0 {
            return Err(Error::InvalidParameter("max_iter and particles must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonotonicityEvidence {
    /// min over encountered flow pairs of ∫(g(·,μ) − g(·,μ'))d(μ − μ').
    pub terminal: f64,
    /// Same for L(·, a, ·) at the probe controls and the middle node.
    pub running: f64,
    pub pairs: usize,
}

impl MonotonicityEvidence {
    pub fn holds(&self) -> bool {
        self.terminal >= -1e-9 && self.running >= -1e-9
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub paths: PathEnsemble,
    pub flow: LawFlow,
    pub solution: BsdeSolution,
    pub weights: GirsanovWeights,
    pub iterations: usize,
    /// sup_n W₂(μᵏ_n, μᵏ⁺¹_n) per iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub measure_mode: MeasureMode,
    pub monotonicity: MonotonicityEvidence,
    /// max over iterations of max_n |mean M_n − 1|/se_n.
    pub worst_martingale_deviation: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    iterations: usize,
    converged: bool,
    measure_mode: MeasureMode,
    residual_history: &'a [f64],
    monotonicity: MonotonicityEvidence,
    worst_martingale_deviation: f64,
    novikov_stat: f64,
    y0_mean: f64,
}

impl EquilibriumResult {
    /// flow/, solution.csv, solution.json, weights.csv and equilibrium.json.
    /// Returns the written paths relative to `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut files: Vec<String> = self
            .flow
            .write_dir(&dir.join("flow"))?
            .into_iter()
            .map(|f| format!("flow/{f}"))
            .collect();
        self.solution.write_csv(&dir.join("solution.csv"))?;
        self.solution.write_diagnostics(&dir.join("solution.json"), None)?;
        self.weights.write_csv(&dir.join("weights.csv"))?;
        let summary = Summary {
            iterations: self.iterations,
            converged: self.converged,
            measure_mode: self.measure_mode,
            residual_history: &self.residual_history,
            monotonicity: self.monotonicity,
            worst_martingale_deviation: self.worst_martingale_deviation,
            novikov_stat: self.weights.novikov_stat,
            y0_mean: self.solution.y0_mean(),
        };
        std::fs::write(dir.join("equilibrium.json"), serde_json::to_string_pretty(&summary)?)?;
        files.extend(["solution.csv", "solution.json", "weights.csv", "equilibrium.json"].map(String::from));
        Ok(files)
    }
}

/// Simulates the control-free ensemble and runs the Picard iteration;
/// non-convergence is an error carrying the residual history.
#[allow(clippy::too_many_arguments)]
pub fn solve_equilibrium(
    model: Arc<dyn LagrangianModel>,
    g: &dyn TerminalCost,
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    initial: &InitialLaw,
    grid: TimeGrid,
    config: &EquilibriumConfig,
) -> Result<EquilibriumResult> {
    config.validate()?;
    let paths = simulate_forward(vfs, drift, initial, grid, config.particles, config.seed)?;
    let result = run_picard(paths, model, g, Some(vfs), config)?;
    if result.converged {
        Ok(result)
    } else {
        Err(Error::NoConvergence {
            max_iter: config.max_iter,
            last: result.residual_history.last().copied().unwrap_or(f64::NAN),
            residual_history: result.residual_history,
        })
    }
}

/// Picard iteration on a given ensemble. Returns the last iterate with
/// `converged = false` instead of failing when `max_iter` is exhausted.
/// `diffusion` is the σ that generated `paths`, if known (it sharpens the
/// last-step Z estimate).
pub fn run_picard(
    paths: PathEnsemble,
    model: Arc<dyn LagrangianModel>,
    g: &dyn TerminalCost,
    diffusion: Option<&dyn VectorFieldSet>,
    config: &EquilibriumConfig,
) -> Result<EquilibriumResult> {
    config.validate()?;
    let driver = ModelDriver::new(model.clone());
    let steps = paths.steps();
    let nodes = steps + 1;
    let p = paths.particles();
    let coupled = model.depends_on_measure() || g.depends_on_measure();

    let mut weights: Vec<Vec<f64>> = (0..nodes).map(|n| normalize(config.initial_guess.weights(&paths, n))).collect::<Result<_>>()?;
    let mut flow = flow_from(&paths, &weights)?;
    let mut warm: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    let mut evidence = MonotonicityEvidence {
        terminal: f64::INFINITY,
        running: f64::INFINITY,
        pairs: 0,
    };
    let mut worst_dev: f64 = 0.0;

    for k in 1..=config.max_iter {
        let opts = BsdeOptions {
            truncation: config.truncation,
            warm_controls: warm.as_deref(),
            diffusion,
        };
        let solution = solve_backward_with(&paths, &driver, &flow, g, config.basis.as_ref(), &opts)?;
        let gw = girsanov_weights(&paths, solution.controls())?;
        worst_dev = worst_dev.max(gw.martingale_deviation());
        let candidate: Vec<Vec<f64>> = match config.measure_mode {
            MeasureMode::Tilted => (0..nodes).map(|n| normalize(gw.node_weights(n))).collect::<Result<_>>()?,
            MeasureMode::Untilted => vec![vec![1.0 / p as f64; p]; nodes],
        };

        if !coupled {
            // the backward solve ignores μ: one pass is already the fixed point
            let flow = flow_from(&paths, &candidate)?;
            return Ok(EquilibriumResult {
                paths,
                flow,
                solution,
                weights: gw,
                iterations: 1,
                residual_history: vec![0.0],
                converged: true,
                measure_mode: config.measure_mode,
                monotonicity: MonotonicityEvidence {
                    terminal: 0.0,
                    running: 0.0,
                    pairs: 0,
                },
                worst_martingale_deviation: worst_dev,
            });
        }

        let theta = config.damping;
        let next: Vec<Vec<f64>> = weights
            .iter()
            .zip(&candidate)
            .map(|(w, c)| w.iter().zip(c).map(|(a, b)| (1.0 - theta) * a + theta * b).collect())
            .collect();
        let next_flow = flow_from(&paths, &next)?;
        let residual = sup_w2(&flow, &next_flow, config.seed)?;
        history.push(residual);
        record_monotonicity(&mut evidence, model.as_ref(), g, &flow, &next_flow)?;

        weights = next;
        flow = next_flow;
        warm = Some(solution.controls().to_vec());
        if residual < config.tol || k == config.max_iter {
            return Ok(EquilibriumResult {
                paths,
                flow,
                solution,
                weights: gw,
                iterations: k,
                converged: residual < config.tol,
                residual_history: history,
                measure_mode: config.measure_mode,
                monotonicity: evidence,
                worst_martingale_deviation: worst_dev,
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn normalize(w: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid(format!("weights sum to {total}")));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

fn flow_from(paths: &PathEnsemble, weights: &[Vec<f64>]) -> Result<LawFlow> {
    let measures = (0..weights.len())
        .into_par_iter()
        .map(|n| EmpiricalMeasure::weighted(paths.node_points(n), weights[n].clone(), paths.dim()))
        .collect::<Result<Vec<_>>>()?;
    LawFlow::new(measures)
}

/// sup_n W₂(μ_n, ν_n); exact in one dimension, sliced otherwise.
pub fn sup_w2(a: &LawFlow, b: &LawFlow, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("flows with {} and {} nodes", a.len(), b.len())));
    }
    let per_node = (0..a.len())
        .into_par_iter()
        .map(|n| wasserstein2_subsampled(a.at(n), b.at(n), seed).map(|e| e.distance))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_node.into_iter().fold(0.0, f64::max))
}

fn thin(mu: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
    let n = mu.len();
    if n <= MONOTONICITY_POINTS {
        return Ok(mu.clone());
    }
    let idx: Vec<usize> = (0..MONOTONICITY_POINTS).map(|j| j * n / MONOTONICITY_POINTS).collect();
    let pts = idx.iter().flat_map(|&i| mu.point(i).to_vec()).collect();
    EmpiricalMeasure::weighted(pts, idx.iter().map(|&i| mu.weight(i)).collect(), mu.dim())
}

fn record_monotonicity(
    ev: &mut MonotonicityEvidence,
    model: &dyn LagrangianModel,
    g: &dyn TerminalCost,
    before: &LawFlow,
    after: &LawFlow,
) -> Result<()> {
    let last = before.len() - 1;
    // both sides thinned to a strided subsample, which is itself a valid pair
    let (ta, tb) = (thin(before.at(last))?, thin(after.at(last))?);
    ev.terminal = ev.terminal.min(monotonicity_check(|x, mu| g.value(x, mu), &ta, &tb)?);
    let mid = last / 2;
    let (ma, mb) = (thin(before.at(mid))?, thin(after.at(mid))?);
    for probe in [-1.0, 0.0, 1.0] {
        let a = vec![probe; model.dim_control()];
        ev.running = ev.running.min(monotonicity_check(|x, mu| model.value(x, &a, mu), &ma, &mb)?);
    }
    ev.pairs += 1;
    Ok(())
}
