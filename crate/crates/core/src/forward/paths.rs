use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Drift, VectorFieldSet};
use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, LawFlow};
use crate::reduce;
use crate::rng::{StreamKey, FORWARD, INITIAL};

/// Uniform grid t0 < t1 < … < t_N = T.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite() && t0 < t_end) {
            return Err(Error::InvalidParameter(format!("time grid needs t0 < T, got [{t0}, {t_end}]")));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }
    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }
    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.t_end
        } else {
            self.t0 + n as f64 * self.dt()
        }
    }
    /// Remaining horizon T − t_n.
    pub fn remaining(&self, n: usize) -> f64 {
        (self.steps - n) as f64 * self.dt()
    }
}

/// Law of X at t0.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent N(mean, std²) coordinates.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// One given point per particle, N_p × d row-major.
    Samples(Vec<f64>),
}

impl InitialLaw {
    pub fn dim(&self) -> Option<usize> {
        match self {
            InitialLaw::Point(p) => Some(p.len()),
            InitialLaw::Gaussian { mean, .. } => Some(mean.len()),
            InitialLaw::Samples(_) => None,
        }
    }

    pub(crate) fn fill(&self, seed: u64, particles: usize, d: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; particles * d];
        match self {
            InitialLaw::Point(p) => {
                check_dim(p.len(), d)?;
                for row in out.chunks_mut(d) {
                    row.copy_from_slice(p);
                }
            }
            InitialLaw::Gaussian { mean, std } => {
                check_dim(mean.len(), d)?;
                if !(*std >= 0.0) {
                    return Err(Error::InvalidParameter(format!("initial std {std} must be ≥ 0")));
                }
                let key = StreamKey::new(seed, INITIAL);
                out.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
                    let mut rng = key.rng(i as u64);
                    for (k, v) in row.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = mean[k] + std * z;
                    }
                });
            }
            InitialLaw::Samples(s) => {
                if s.len() != particles * d {
                    return Err(Error::ShapeMismatch(format!(
                        "initial samples hold {} values, need {particles}×{d}",
                        s.len()
                    )));
                }
                out.copy_from_slice(s);
            }
        }
        Ok(out)
    }
}

fn check_dim(found: usize, d: usize) -> Result<()> {
    if found != d {
        return Err(Error::ShapeMismatch(format!("initial point has dimension {found}, fields {d}")));
    }
    Ok(())
}

/// Particle paths with the Brownian increments that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    dim: usize,
    noise_dim: usize,
    grid: TimeGrid,
    particles: usize,
    /// [particle][node][component]
    states: Vec<f64>,
    /// [particle][step][noise component]
    increments: Vec<f64>,
    seed: u64,
}

impl PathEnsemble {
    pub fn from_parts(
        dim: usize,
        noise_dim: usize,
        grid: TimeGrid,
        states: Vec<f64>,
        increments: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let per = grid.nodes() * dim;
        if dim == 0 || per == 0 || states.is_empty() || states.len() % per != 0 {
            return Err(Error::ShapeMismatch("state buffer does not match the grid".into()));
        }
        let particles = states.len() / per;
        if increments.len() != particles * grid.steps() * noise_dim {
            return Err(Error::ShapeMismatch("increment buffer does not match the grid".into()));
        }
        Ok(Self {
            dim,
            noise_dim,
            grid,
            particles,
            states,
            increments,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * self.grid.nodes() + n) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn increment(&self, i: usize, n: usize) -> &[f64] {
        let o = (i * self.grid.steps() + n) * self.noise_dim;
        &self.increments[o..o + self.noise_dim]
    }

    /// All states of particle i, (N+1) × d.
    pub fn path(&self, i: usize) -> &[f64] {
        let per = self.grid.nodes() * self.dim;
        &self.states[i * per..(i + 1) * per]
    }

    /// All increments of particle i, N × m.
    pub fn path_increments(&self, i: usize) -> &[f64] {
        let per = self.grid.steps() * self.noise_dim;
        &self.increments[i * per..(i + 1) * per]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// States at node n, N_p × d.
    pub fn node_points(&self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.particles * self.dim);
        for i in 0..self.particles {
            out.extend_from_slice(self.state(i, n));
        }
        out
    }

    pub fn node_measure(&self, n: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.node_points(n), self.dim).expect("ensemble is nonempty")
    }

    /// Unweighted empirical laws at every node.
    pub fn law_flow(&self) -> LawFlow {
        LawFlow::new((0..self.grid.nodes()).map(|n| self.node_measure(n)).collect())
            .expect("nodes share a dimension")
    }

    /// CSV with one row per (particle, node): `particle,step,t,x0,…`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "particle,step,t")?;
        for k in 0..self.dim {
            write!(w, ",x{k}")?;
        }
        writeln!(w)?;
        for i in 0..self.particles {
            for n in 0..self.grid.nodes() {
                write!(w, "{i},{n},{}", self.grid.time(n))?;
                for v in self.state(i, n) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    const MAGIC: &'static [u8; 8] = b"WMFGPTH1";

    /// Little-endian binary snapshot, exact for resuming or replaying.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(Self::MAGIC)?;
        for v in [self.dim, self.noise_dim, self.grid.steps, self.particles] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.grid.t0.to_le_bytes())?;
        w.write_all(&self.grid.t_end.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in self.states.iter().chain(&self.increments) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::invalid(format!("{} is not a path snapshot", path.display()));
        if bytes.len() < 64 || &bytes[..8] != Self::MAGIC {
            return Err(bad());
        }
        let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
        let (dim, noise_dim, steps, particles) =
            (word(0) as usize, word(1) as usize, word(2) as usize, word(3) as usize);
        let t0 = f64::from_bits(word(4));
        let t_end = f64::from_bits(word(5));
        let seed = word(6);
        let grid = TimeGrid::new(t0, t_end, steps)?;
        let ns = particles * grid.nodes() * dim;
        let ni = particles * steps * noise_dim;
        let body = &bytes[64..];
        if body.len() != 8 * (ns + ni) {
            return Err(bad());
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let states: Vec<f64> = vals.by_ref().take(ns).collect();
        let increments: Vec<f64> = vals.collect();
        Self::from_parts(dim, noise_dim, grid, states, increments, seed)
    }
}

/// Draws the N×m Gaussian increments of particle i.
fn draw_increments(key: &StreamKey, i: usize, dt: f64, out: &mut [f64]) {
    let mut rng = key.rng(i as u64);
    let s = dt.sqrt();
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = s * z;
    }
}

fn validate(vfs: &dyn VectorFieldSet, particles: usize) -> Result<()> {
    if particles == 0 {
        return Err(Error::InvalidParameter("need at least one particle".into()));
    }
    if vfs.dim_state() == 0 || vfs.dim_noise() == 0 {
        return Err(Error::InvalidParameter("vector fields need positive dimensions".into()));
    }
    Ok(())
}

/// Euler–Maruyama step buffers for one particle.
pub(crate) struct EulerScratch {
    sig: Vec<f64>,
    b: Vec<f64>,
}

impl EulerScratch {
    pub(crate) fn new(d: usize, m: usize) -> Self {
        Self {
            sig: vec![0.0; d * m],
            b: vec![0.0; d],
        }
    }
}

/// x_{n+1} = x_n + b(x_n)dt + σ(x_n)ΔW.
pub(crate) fn euler_step(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    x: &[f64],
    dw: &[f64],
    dt: f64,
    next: &mut [f64],
    s: &mut EulerScratch,
) {
    let (d, m) = (x.len(), dw.len());
    vfs.sigma(x, &mut s.sig);
    drift.eval(vfs, x, &mut s.b);
    for i in 0..d {
        let mut v = x[i] + s.b[i] * dt;
        for l in 0..m {
            v += s.sig[i * m + l] * dw[l];
        }
        next[i] = v;
    }
}

/// Re-runs the Euler scheme of one particle from `x0` with the given
/// increments, writing all (N+1)×d states. Returns the first non-finite step.
pub fn replay_path(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    x0: &[f64],
    increments: &[f64],
    dt: f64,
    out: &mut [f64],
) -> Option<usize> {
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    let steps = increments.len() / m;
    out[..d].copy_from_slice(x0);
    let mut s = EulerScratch::new(d, m);
    for n in 0..steps {
        let (done, rest) = out.split_at_mut((n + 1) * d);
        euler_step(vfs, drift, &done[n * d..], &increments[n * m..(n + 1) * m], dt, &mut rest[..d], &mut s);
        if rest[..d].iter().any(|v| !v.is_finite()) {
            return Some(n + 1);
        }
    }
    None
}

/// Euler–Maruyama ensemble of dX = b(X)dt + σ(X)dW.
///
/// Particle i draws its increments from its own stream of the run seed, so
/// the ensemble is bitwise reproducible for any thread count.
pub fn simulate_forward(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    initial: &InitialLaw,
    grid: TimeGrid,
    particles: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    validate(vfs, particles)?;
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    let x0 = initial.fill(seed, particles, d)?;
    let (nodes, steps, dt) = (grid.nodes(), grid.steps(), grid.dt());
    let mut states = vec![0.0; particles * nodes * d];
    let mut increments = vec![0.0; particles * steps * m];
    let key = StreamKey::new(seed, FORWARD);
    let failures: Vec<(usize, usize)> = states
        .par_chunks_mut(nodes * d)
        .zip(increments.par_chunks_mut(steps * m))
        .enumerate()
        .filter_map(|(i, (path, inc))| {
            draw_increments(&key, i, dt, inc);
            replay_path(vfs, drift, &x0[i * d..(i + 1) * d], inc, dt, path).map(|n| (i, n))
        })
        .collect();
    if let Some(&(particle, step)) = failures.first() {
        return Err(Error::NonFinite { particle, step });
    }
    PathEnsemble::from_parts(d, m, grid, states, increments, seed)
}

/// Heun (predictor–corrector) scheme for the Stratonovich equation
/// dX = σ(X)∘dW, driven by the same increments as [`simulate_forward`]
/// for the same seed:
/// X̃ = X + σ(X)ΔW, X' = X + ½[σ(X) + σ(X̃)]ΔW.
pub fn heun_stratonovich(
    vfs: &dyn VectorFieldSet,
    initial: &InitialLaw,
    grid: TimeGrid,
    particles: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    validate(vfs, particles)?;
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    let x0 = initial.fill(seed, particles, d)?;
    let (nodes, steps, dt) = (grid.nodes(), grid.steps(), grid.dt());
    let mut states = vec![0.0; particles * nodes * d];
    let mut increments = vec![0.0; particles * steps * m];
    let key = StreamKey::new(seed, FORWARD);
    let failures: Vec<(usize, usize)> = states
        .par_chunks_mut(nodes * d)
        .zip(increments.par_chunks_mut(steps * m))
        .enumerate()
        .filter_map(|(i, (path, inc))| {
            draw_increments(&key, i, dt, inc);
            path[..d].copy_from_slice(&x0[i * d..(i + 1) * d]);
            let mut s0 = vec![0.0; d * m];
            let mut s1 = vec![0.0; d * m];
            let mut pred = vec![0.0; d];
            for n in 0..steps {
                let (done, rest) = path.split_at_mut((n + 1) * d);
                let x = &done[n * d..];
                let dw = &inc[n * m..(n + 1) * m];
                vfs.sigma(x, &mut s0);
                for k in 0..d {
                    pred[k] = x[k] + (0..m).map(|l| s0[k * m + l] * dw[l]).sum::<f64>();
                }
                vfs.sigma(&pred, &mut s1);
                for k in 0..d {
                    rest[k] = x[k] + 0.5 * (0..m).map(|l| (s0[k * m + l] + s1[k * m + l]) * dw[l]).sum::<f64>();
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
    PathEnsemble::from_parts(d, m, grid, states, increments, seed)
}

/// E[sup_n |X_n|²] over the ensemble.
pub fn sup_second_moment(paths: &PathEnsemble) -> f64 {
    let d = paths.dim();
    let s = reduce::sum(paths.particles(), |i| {
        paths
            .path(i)
            .chunks(d)
            .map(|x| x.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max)
    });
    s / paths.particles() as f64
}

/// E[sup_n |X_n − X'_n|²] for two ensembles on common noise.
pub fn coupled_sup_msd(a: &PathEnsemble, b: &PathEnsemble) -> Result<f64> {
    if a.particles() != b.particles() || a.dim() != b.dim() || a.grid() != b.grid() {
        return Err(Error::ShapeMismatch("coupled ensembles differ in shape".into()));
    }
    let d = a.dim();
    let s = reduce::sum(a.particles(), |i| {
        a.path(i)
            .chunks(d)
            .zip(b.path(i).chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .fold(0.0, f64::max)
    });
    Ok(s / a.particles() as f64)
}
