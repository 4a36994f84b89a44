//! Change of measure between the control-free ensemble and controlled laws.
//!
//! The simulated increments are the Brownian motion W̃ under which the state
//! is control-free. A control α moves the law to the one with
//! density exp(∫α·dW̃ − ½∫|α|²dt), under which W = W̃ − ∫α dt is Brownian and
//! dX = (b + σα)dt + σdW, i.e. the controlled equation of the strong problem.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{Drift, InitialLaw, PathEnsemble, TimeGrid, VectorFieldSet};
use crate::measure::{EmpiricalMeasure, LawFlow};
use crate::model::LagrangianModel;
use crate::reduce;
use crate::registry::Registry;
use crate::rng::{StreamKey, STRONG};
use crate::terminal::TerminalCost;

/// novikov_stat above this triggers a warning.
pub const NOVIKOV_WARN: f64 = 1e6;

#[derive(Debug, Clone, Serialize)]
pub struct GirsanovWeights {
    particles: usize,
    steps: usize,
    /// log_m[n·P + i] = Σ_{k<n} α_k·ΔW_k − ½|α_k|²dt.
    log_m: Vec<f64>,
    /// Sample mean of exp(½Σ|α_k|²dt).
    pub novikov_stat: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NodeMoment {
    pub mean: f64,
    pub standard_error: f64,
}

impl GirsanovWeights {
    /// Unit weights (α ≡ 0).
    pub fn unit(particles: usize, steps: usize) -> Self {
        Self {
            particles,
            steps,
            log_m: vec![0.0; particles * (steps + 1)],
            novikov_stat: 1.0,
            warnings: Vec::new(),
        }
    }

    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn log_weight(&self, i: usize, n: usize) -> f64 {
        self.log_m[n * self.particles + i]
    }

    pub fn weight(&self, i: usize, n: usize) -> f64 {
        self.log_weight(i, n).exp()
    }

    pub fn node_weights(&self, n: usize) -> Vec<f64> {
        self.log_m[n * self.particles..(n + 1) * self.particles].iter().map(|v| v.exp()).collect()
    }

    /// Sample mean and standard error of M at node n.
    pub fn moment(&self, n: usize) -> NodeMoment {
        let p = self.particles;
        let mean = reduce::sum(p, |i| self.weight(i, n)) / p as f64;
        let var = reduce::sum(p, |i| (self.weight(i, n) - mean).powi(2)) / (p.max(2) - 1) as f64;
        NodeMoment {
            mean,
            standard_error: (var / p as f64).sqrt(),
        }
    }

    /// max_n |mean M_n − 1| / se_n (0 where se vanishes and the mean is 1).
    pub fn martingale_deviation(&self) -> f64 {
        (0..=self.steps)
            .map(|n| {
                let m = self.moment(n);
                let gap = (m.mean - 1.0).abs();
                if m.standard_error > 0.0 {
                    gap / m.standard_error
                } else if gap < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    /// Effective sample size (Σw)²/Σw² at node n.
    pub fn effective_sample_size(&self, n: usize) -> f64 {
        let w = self.node_weights(n);
        let s: f64 = w.iter().sum();
        let s2: f64 = w.iter().map(|v| v * v).sum();
        s * s / s2
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "particle,step,log_m")?;
        for i in 0..self.particles {
            for n in 0..=self.steps {
                writeln!(w, "{i},{n},{}", self.log_weight(i, n))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Left-endpoint discretization of log M. `controls[(n·P + i)·m + l]`.
pub fn girsanov_weights(paths: &PathEnsemble, controls: &[f64]) -> Result<GirsanovWeights> {
    let (p, steps, m) = (paths.particles(), paths.steps(), paths.noise_dim());
    if controls.len() != p * steps * m {
        return Err(Error::ShapeMismatch(format!(
            "{} controls for {p} particles × {steps} steps × {m}",
            controls.len()
        )));
    }
    if let Some(k) = controls.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            particle: (k / m) % p,
            step: k / (m * p),
        });
    }
    let dt = paths.grid().dt();
    let per_particle: Vec<(Vec<f64>, f64)> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            let mut quad = 0.0;
            let mut col = Vec::with_capacity(steps + 1);
            col.push(0.0);
            for n in 0..steps {
                let a = &controls[(n * p + i) * m..][..m];
                let dw = paths.increment(i, n);
                let a2: f64 = a.iter().map(|v| v * v).sum();
                acc += a.iter().zip(dw).map(|(x, y)| x * y).sum::<f64>() - 0.5 * a2 * dt;
                quad += 0.5 * a2 * dt;
                col.push(acc);
            }
            (col, quad)
        })
        .collect();
    let mut log_m = vec![0.0; p * (steps + 1)];
    for (i, (col, _)) in per_particle.iter().enumerate() {
        for (n, v) in col.iter().enumerate() {
            log_m[n * p + i] = *v;
        }
    }
    let novikov_stat = reduce::sum(p, |i| per_particle[i].1.exp()) / p as f64;
    let mut warnings = Vec::new();
    if !novikov_stat.is_finite() || novikov_stat > NOVIKOV_WARN {
        warnings.push(format!("Novikov statistic {novikov_stat:e} is not moderate"));
    }
    Ok(GirsanovWeights {
        particles: p,
        steps,
        log_m,
        novikov_stat,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    pub standard_error: f64,
}

fn mean_and_se(samples: &[f64]) -> CostEstimate {
    let p = samples.len();
    let mean = reduce::sum(p, |i| samples[i]) / p as f64;
    let var = reduce::sum(p, |i| (samples[i] - mean).powi(2)) / (p.max(2) - 1) as f64;
    CostEstimate {
        value: mean,
        standard_error: (var / p as f64).sqrt(),
    }
}

/// Σ_i M_N^i {g(X_N^i, μ_N) + Σ_n L(X_n^i, α_n^i, μ_n)dt} / P.
pub fn weak_cost(
    paths: &PathEnsemble,
    weights: &GirsanovWeights,
    controls: &[f64],
    flow: &LawFlow,
    model: &dyn LagrangianModel,
    g: &dyn TerminalCost,
) -> Result<CostEstimate> {
    let (p, steps, m) = (paths.particles(), paths.steps(), paths.noise_dim());
    if weights.particles() != p || weights.steps() != steps || controls.len() != p * steps * m {
        return Err(Error::ShapeMismatch("weak_cost inputs disagree".into()));
    }
    if flow.len() != steps + 1 {
        return Err(Error::ShapeMismatch(format!("flow with {} nodes", flow.len())));
    }
    let dt = paths.grid().dt();
    let samples: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut c = g.value(paths.state(i, steps), flow.at(steps));
            for n in 0..steps {
                c += model.value(paths.state(i, n), &controls[(n * p + i) * m..][..m], flow.at(n)) * dt;
            }
            weights.weight(i, steps) * c
        })
        .collect();
    Ok(mean_and_se(&samples))
}

/// A feedback control α(t, x).
pub trait ControlRule: Send + Sync {
    fn name(&self) -> String;
    fn dim_noise(&self) -> usize;
    fn control(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// sup|α| if known.
    fn bound(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct ConstantControl(pub Vec<f64>);

impl ControlRule for ConstantControl {
    fn name(&self) -> String {
        format!("constant {:?}", self.0)
    }
    fn dim_noise(&self) -> usize {
        self.0.len()
    }
    fn control(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
    fn bound(&self) -> Option<f64> {
        Some(self.0.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// α = clip(−gain·x, ±limit) componentwise (requires m = d).
#[derive(Debug, Clone)]
pub struct ClippedLinearControl {
    pub dim: usize,
    pub gain: f64,
    pub limit: f64,
}

impl ControlRule for ClippedLinearControl {
    fn name(&self) -> String {
        format!("clip(−{}·x, ±{})", self.gain, self.limit)
    }
    fn dim_noise(&self) -> usize {
        self.dim
    }
    fn control(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = (-self.gain * xi).clamp(-self.limit, self.limit);
        }
    }
    fn bound(&self) -> Option<f64> {
        Some(self.limit * (self.dim as f64).sqrt())
    }
}

pub fn control_registry() -> Registry<dyn ControlRule> {
    let mut reg: Registry<dyn ControlRule> = Registry::new("control rule");
    reg.register("zero", "α ≡ 0", |p| {
        Ok(Box::new(ConstantControl(vec![0.0; p.usize_or("noise_dim", 1)?])))
    });
    reg.register("constant", "α ≡ value (list)", |p| {
        Ok(Box::new(ConstantControl(p.list_or("value", &[0.0])?)))
    });
    reg.register("clipped-linear", "α = clip(−gain·x, ±limit)", |p| {
        let limit = p.f64_or("limit", 1.0)?;
        if !(limit > 0.0) {
            return Err(Error::InvalidParameter("limit must be positive".into()));
        }
        Ok(Box::new(ClippedLinearControl {
            dim: p.usize_or("dim", 1)?,
            gain: p.f64_or("gain", 1.0)?,
            limit,
        }))
    });
    reg
}

/// Controls of `rule` along every path of the ensemble, in solver layout.
pub fn rule_controls(paths: &PathEnsemble, rule: &dyn ControlRule) -> Vec<f64> {
    let (p, steps, m) = (paths.particles(), paths.steps(), paths.noise_dim());
    let mut out = vec![0.0; p * steps * m];
    out.par_chunks_mut(p * m).enumerate().for_each(|(n, chunk)| {
        let t = paths.grid().time(n);
        for (i, a) in chunk.chunks_mut(m).enumerate() {
            rule.control(t, paths.state(i, n), a);
        }
    });
    out
}

/// Euler ensemble of the controlled equation dX = (b + σα)dt + σdW on the
/// "strong" stream (independent of the control-free ensemble).
pub fn simulate_controlled(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    rule: &dyn ControlRule,
    initial: &InitialLaw,
    grid: TimeGrid,
    particles: usize,
    seed: u64,
) -> Result<(PathEnsemble, Vec<f64>)> {
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    if rule.dim_noise() != m {
        return Err(Error::ShapeMismatch(format!(
            "control of dimension {} for {m} noise components",
            rule.dim_noise()
        )));
    }
    if particles == 0 {
        return Err(Error::InvalidParameter("need at least one particle".into()));
    }
    // initial positions drawn exactly as for the control-free ensemble
    let x0 = initial.fill(seed, particles, d)?;
    let (nodes, steps, dt) = (grid.nodes(), grid.steps(), grid.dt());
    let key = StreamKey::new(seed, STRONG);
    let mut states = vec![0.0; particles * nodes * d];
    let mut increments = vec![0.0; particles * steps * m];
    let failures: Vec<(usize, usize)> = states
        .par_chunks_mut(nodes * d)
        .zip(increments.par_chunks_mut(steps * m))
        .enumerate()
        .filter_map(|(i, (path, inc))| {
            let mut rng = key.rng(i as u64);
            for v in inc.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = dt.sqrt() * z;
            }
            path[..d].copy_from_slice(&x0[i * d..(i + 1) * d]);
            let (mut sig, mut b, mut a) = (vec![0.0; d * m], vec![0.0; d], vec![0.0; m]);
            for n in 0..steps {
                let (done, rest) = path.split_at_mut((n + 1) * d);
                let x = &done[n * d..];
                rule.control(grid.time(n), x, &mut a);
                vfs.sigma(x, &mut sig);
                drift.eval(vfs, x, &mut b);
                for k in 0..d {
                    let mut v = x[k] + b[k] * dt;
                    for l in 0..m {
                        v += sig[k * m + l] * (a[l] * dt + inc[n * m + l]);
                    }
                    rest[k] = v;
                }
                if rest[..d].iter().any(|v| !v.is_finite()) {
                    return Some((i, n + 1));
                }
            }
            None
        })
        .collect();
    if let Some(&(particle, step)) = failures.first() {
        return Err(Error::NonFinite { particle, step });
    }
    let ensemble = PathEnsemble::from_parts(d, m, grid, states, increments, seed)?;
    let controls = rule_controls(&ensemble, rule);
    Ok((ensemble, controls))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub rule: String,
    pub j_strong: CostEstimate,
    pub j_weak: CostEstimate,
    pub diff: f64,
    /// √(se_strong² + se_weak²)
    pub pooled_se: f64,
    pub within_3se: bool,
}

/// Cost of a feedback rule computed twice: on a directly simulated
/// controlled ensemble, and as a Girsanov-weighted average over the
/// control-free ensemble. Each side evaluates μ-dependence on its own
/// (weighted) empirical law of the controlled state.
#[allow(clippy::too_many_arguments)]
pub fn strong_weak_consistency(
    model: &dyn LagrangianModel,
    g: &dyn TerminalCost,
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    rule: &dyn ControlRule,
    initial: &InitialLaw,
    grid: TimeGrid,
    particles: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    let weak_paths = crate::forward::simulate_forward(vfs, drift, initial, grid.clone(), particles, seed)?;
    let weak_controls = rule_controls(&weak_paths, rule);
    let weights = girsanov_weights(&weak_paths, &weak_controls)?;
    let weak_flow = tilted_flow(&weak_paths, &weights)?;
    let j_weak = weak_cost(&weak_paths, &weights, &weak_controls, &weak_flow, model, g)?;

    let (strong_paths, strong_controls) = simulate_controlled(vfs, drift, rule, initial, grid, particles, seed)?;
    let unit = GirsanovWeights::unit(particles, strong_paths.steps());
    let j_strong = weak_cost(
        &strong_paths,
        &unit,
        &strong_controls,
        &strong_paths.law_flow(),
        model,
        g,
    )?;
    let diff = (j_strong.value - j_weak.value).abs();
    let pooled_se = j_strong.standard_error.hypot(j_weak.standard_error);
    Ok(ConsistencyReport {
        rule: rule.name(),
        j_strong,
        j_weak,
        diff,
        pooled_se,
        within_3se: diff <= 3.0 * pooled_se,
    })
}

/// Empirical laws of the ensemble reweighted by M_n at each node.
pub fn tilted_flow(paths: &PathEnsemble, weights: &GirsanovWeights) -> Result<LawFlow> {
    let measures = (0..=paths.steps())
        .map(|n| EmpiricalMeasure::weighted(paths.node_points(n), weights.node_weights(n), paths.dim()))
        .collect::<Result<Vec<_>>>()?;
    LawFlow::new(measures)
}
