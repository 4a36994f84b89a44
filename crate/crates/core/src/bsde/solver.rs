use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::regression::{fit, fit_with_map, Fit, RegressionBasis};
use crate::error::{Error, Result};
use crate::forward::{PathEnsemble, TimeGrid, VectorFieldSet};
use crate::linalg::norm;
use crate::measure::LawFlow;
use crate::model::Driver;
use crate::reduce;
use crate::terminal::TerminalCost;

/// Radius R₀ switched on when an untruncated pass blows up.
pub const AUTO_TRUNCATION_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub enum Truncation {
    Off,
    /// Off, retried with R₀ = 10 if the untruncated pass is non-finite.
    #[default]
    Auto,
    /// |Z_n| ≤ R₀·√log(1 + N − n).
    Radius(f64),
}

#[derive(Clone, Default)]
pub struct BsdeOptions<'a> {
    pub truncation: Truncation,
    /// Controls of a previous solve (same layout as `BsdeSolution::controls`)
    /// used to warm-start the inner minimizations.
    pub warm_controls: Option<&'a [f64]>,
    /// Diffusion of the forward paths. When given, ∇ₓg·σ serves as the
    /// control variate for Z on the last step; otherwise that step has none.
    pub diffusion: Option<&'a dyn VectorFieldSet>,
}

/// Y and Z on every particle and node of a path ensemble.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeGrid,
    particles: usize,
    dim_noise: usize,
    /// y[n·P + i]
    y: Vec<f64>,
    /// z[(n·P + i)·m + l], n < N
    z: Vec<f64>,
    controls: Vec<f64>,
    driver_values: Vec<f64>,
    /// RMS residual of the Y regression at each step n < N.
    pub y_residuals: Vec<f64>,
    /// RMS residual of the Z regression at each step n < N.
    pub z_residuals: Vec<f64>,
    /// R₀ when truncation was active.
    pub truncation: Option<f64>,
    /// R_n per step (∞ when inactive).
    pub radii: Vec<f64>,
    /// Number of (particle, step) pairs whose Z was clipped.
    pub clipped: usize,
    /// Set when Auto truncation had to be switched on.
    pub truncation_retry: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BsdeDiagnostics {
    pub y_residuals: Vec<f64>,
    pub z_residuals: Vec<f64>,
    pub truncation_radius: Option<f64>,
    pub truncation_retry: bool,
    pub clipped: usize,
    pub bmo_estimate: Option<f64>,
    pub y0_mean: f64,
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn y(&self, i: usize, n: usize) -> f64 {
        self.y[n * self.particles + i]
    }

    /// Y at all particles of node n.
    pub fn y_node(&self, n: usize) -> &[f64] {
        &self.y[n * self.particles..(n + 1) * self.particles]
    }

    /// Z at (i, n) for n < N.
    pub fn z(&self, i: usize, n: usize) -> &[f64] {
        let m = self.dim_noise;
        &self.z[(n * self.particles + i) * m..][..m]
    }

    /// Z at all particles of step n, row-major P × m.
    pub fn z_node(&self, n: usize) -> &[f64] {
        let w = self.particles * self.dim_noise;
        &self.z[n * w..(n + 1) * w]
    }

    /// α̂(X_n, Z_n, μ_n) at (i, n) for n < N.
    pub fn control(&self, i: usize, n: usize) -> &[f64] {
        let m = self.dim_noise;
        &self.controls[(n * self.particles + i) * m..][..m]
    }

    /// All controls, layout matching `BsdeOptions::warm_controls`.
    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    /// F(X_n, Z_n, μ_n) at (i, n) for n < N.
    pub fn driver_value(&self, i: usize, n: usize) -> f64 {
        self.driver_values[n * self.particles + i]
    }

    pub fn y0_mean(&self) -> f64 {
        reduce::sum(self.particles, |i| self.y(i, 0)) / self.particles as f64
    }

    pub fn diagnostics(&self, bmo_estimate: Option<f64>) -> BsdeDiagnostics {
        BsdeDiagnostics {
            y_residuals: self.y_residuals.clone(),
            z_residuals: self.z_residuals.clone(),
            truncation_radius: self.truncation,
            truncation_retry: self.truncation_retry,
            clipped: self.clipped,
            bmo_estimate,
            y0_mean: self.y0_mean(),
        }
    }

    /// `particle,step,t,Y,Z0,…`; Z is left empty at the terminal node.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "particle,step,t,Y")?;
        for l in 0..self.dim_noise {
            write!(w, ",Z{l}")?;
        }
        writeln!(w)?;
        let steps = self.steps();
        for i in 0..self.particles {
            for n in 0..=steps {
                write!(w, "{i},{n},{},{}", self.grid.time(n), self.y(i, n))?;
                for l in 0..self.dim_noise {
                    if n < steps {
                        write!(w, ",{}", self.z(i, n)[l])?;
                    } else {
                        write!(w, ",")?;
                    }
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_diagnostics(&self, path: &Path, bmo_estimate: Option<f64>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.diagnostics(bmo_estimate))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Least-squares Monte Carlo for dY = −F(X, Z, μ)ds + Z·dW on a frozen flow.
///
/// Backward from Y_N = g(X_N, μ_N), with Φ the features of X_n:
/// ŷ = E[Y_{n+1} | Φ], Z_n = E[(Y_{n+1} − ŷ)ΔW_n | Φ]/dt and
/// Y_n = E[Y_{n+1} − Z_n·ΔW_n | Φ] + F(X_n, Z_n, μ_n)dt. Subtracting ŷ and
/// Z_n·ΔW_n leaves the conditional means unchanged and removes most of the
/// Monte Carlo noise of the plain estimators.
pub fn solve_backward(
    paths: &PathEnsemble,
    driver: &dyn Driver,
    flow: &LawFlow,
    g: &dyn TerminalCost,
    basis: &dyn RegressionBasis,
) -> Result<BsdeSolution> {
    solve_backward_with(paths, driver, flow, g, basis, &BsdeOptions::default())
}

pub fn solve_backward_with(
    paths: &PathEnsemble,
    driver: &dyn Driver,
    flow: &LawFlow,
    g: &dyn TerminalCost,
    basis: &dyn RegressionBasis,
    opts: &BsdeOptions<'_>,
) -> Result<BsdeSolution> {
    check_shapes(paths, driver, flow, g, opts)?;
    match opts.truncation {
        Truncation::Off => backward_pass(paths, driver, flow, g, basis, opts, None),
        Truncation::Radius(r) => {
            if !(r > 0.0) {
                return Err(Error::InvalidParameter(format!("truncation radius must be positive, got {r}")));
            }
            backward_pass(paths, driver, flow, g, basis, opts, Some(r))
        }
        Truncation::Auto => match backward_pass(paths, driver, flow, g, basis, opts, None) {
            Err(Error::NonFinite { .. }) => {
                let mut sol = backward_pass(paths, driver, flow, g, basis, opts, Some(AUTO_TRUNCATION_RADIUS))?;
                sol.truncation_retry = true;
                Ok(sol)
            }
            other => other,
        },
    }
}

fn check_shapes(
    paths: &PathEnsemble,
    driver: &dyn Driver,
    flow: &LawFlow,
    g: &dyn TerminalCost,
    opts: &BsdeOptions<'_>,
) -> Result<()> {
    let (d, m) = (paths.dim(), paths.noise_dim());
    if driver.dim_state() != d || driver.dim_noise() != m || g.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "paths ({d}, {m}), driver ({}, {}), terminal cost {}",
            driver.dim_state(),
            driver.dim_noise(),
            g.dim()
        )));
    }
    if flow.len() != paths.grid().nodes() || flow.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "flow with {} nodes in R^{} for a grid of {} nodes in R^{d}",
            flow.len(),
            flow.dim(),
            paths.grid().nodes()
        )));
    }
    if let Some(w) = opts.warm_controls {
        if w.len() != paths.particles() * paths.steps() * m {
            return Err(Error::ShapeMismatch(format!("{} warm controls", w.len())));
        }
    }
    if let Some(v) = opts.diffusion {
        if v.dim_state() != d || v.dim_noise() != m {
            return Err(Error::ShapeMismatch(format!(
                "diffusion ({}, {}) for paths ({d}, {m})",
                v.dim_state(),
                v.dim_noise()
            )));
        }
    }
    Ok(())
}

fn backward_pass(
    paths: &PathEnsemble,
    driver: &dyn Driver,
    flow: &LawFlow,
    g: &dyn TerminalCost,
    basis: &dyn RegressionBasis,
    opts: &BsdeOptions<'_>,
    radius: Option<f64>,
) -> Result<BsdeSolution> {
    let warm = opts.warm_controls;
    let (p, d, m) = (paths.particles(), paths.dim(), paths.noise_dim());
    let grid = paths.grid().clone();
    let steps = grid.steps();
    let dt = grid.dt();
    let mut y = vec![0.0; p * (steps + 1)];
    let mut z = vec![0.0; p * steps * m];
    let mut controls = vec![0.0; p * steps * m];
    let mut driver_values = vec![0.0; p * steps];
    let mut y_residuals = vec![0.0; steps];
    let mut z_residuals = vec![0.0; steps];
    let mut radii = vec![f64::INFINITY; steps];
    let mut clipped = 0;

    let mu_n = flow.at(steps);
    y[steps * p..].par_iter_mut().enumerate().for_each(|(i, yi)| {
        *yi = g.value(paths.state(i, steps), mu_n);
    });
    if let Some(i) = y[steps * p..].iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { particle: i, step: steps });
    }

    // Z̃: the previous step's Z regression, a control variate for the next one
    let mut prev_z: Option<Fit> = None;
    for n in (0..steps).rev() {
        let points = paths.node_points(n);
        let next = &y[(n + 1) * p..(n + 2) * p];
        let map = basis.prepare(&points, d)?;
        let ridge = basis.ridge();
        let yhat = fit_with_map(map.clone(), ridge, &points, d, next, 1, n)?.fitted;

        let mut base = vec![0.0; p * m];
        if let Some(f) = &prev_z {
            base.par_chunks_mut(m).enumerate().for_each(|(i, zi)| f.predict(&points[i * d..][..d], zi));
        } else if let Some(vfs) = opts.diffusion {
            base.par_chunks_mut(m).enumerate().for_each(|(i, zi)| {
                let x = &points[i * d..][..d];
                let mut grad = vec![0.0; d];
                let mut sigma = vec![0.0; d * m];
                g.grad_x(x, mu_n, &mut grad);
                vfs.sigma(x, &mut sigma);
                for (l, z) in zi.iter_mut().enumerate() {
                    *z = (0..d).map(|k| grad[k] * sigma[k * m + l]).sum();
                }
            });
        }
        let mut ztarget = vec![0.0; p * m];
        ztarget.par_chunks_mut(m).enumerate().for_each(|(i, t)| {
            let dw = paths.increment(i, n);
            let zw: f64 = base[i * m..][..m].iter().zip(dw).map(|(a, b)| a * b).sum();
            let c = (next[i] - yhat[i] - zw) / dt;
            for (t, w) in t.iter_mut().zip(dw) {
                *t = c * w;
            }
        });
        let zfit = fit_with_map(map.clone(), ridge, &points, d, &ztarget, m, n)?;
        z_residuals[n] = norm(&zfit.residuals) * dt.sqrt();
        let zn = &mut z[n * p * m..(n + 1) * p * m];
        zn.par_iter_mut()
            .zip(zfit.fitted.par_iter().zip(base.par_iter()))
            .for_each(|(z, (f, b))| *z = f + b);
        // collapse Z̃ + correction into one fit on this node's features
        let has_base = prev_z.is_some() || opts.diffusion.is_some();
        prev_z = Some(if has_base { fit_with_map(map.clone(), ridge, &points, d, zn, m, n)? } else { zfit });
        if let Some(r0) = radius {
            let r = r0 * (1.0 + (steps - n) as f64).ln().sqrt();
            radii[n] = r;
            for zi in zn.chunks_mut(m) {
                let len = norm(zi);
                if len > r {
                    zi.iter_mut().for_each(|v| *v *= r / len);
                    clipped += 1;
                }
            }
        }

        let mu = flow.at(n);
        let zn = &z[n * p * m..(n + 1) * p * m];
        let evals: Vec<Result<_>> = (0..p)
            .into_par_iter()
            .map(|i| {
                let w = warm.map(|w| &w[(n * p + i) * m..][..m]);
                driver.eval(&points[i * d..][..d], &zn[i * m..][..m], mu, w)
            })
            .collect();
        for (i, e) in evals.into_iter().enumerate() {
            let e = e?;
            driver_values[n * p + i] = e.value;
            controls[(n * p + i) * m..][..m].copy_from_slice(&e.control);
        }

        let ytarget: Vec<f64> = (0..p)
            .into_par_iter()
            .map(|i| {
                let zw: f64 = zn[i * m..][..m].iter().zip(paths.increment(i, n)).map(|(a, b)| a * b).sum();
                next[i] - zw
            })
            .collect();
        let yfit = fit_with_map(map, ridge, &points, d, &ytarget, 1, n)?;
        y_residuals[n] = yfit.residuals[0];
        let yn: Vec<f64> = (0..p)
            .into_par_iter()
            .map(|i| yfit.fitted[i] + driver_values[n * p + i] * dt)
            .collect();
        if let Some(i) = yn.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { particle: i, step: n });
        }
        y[n * p..(n + 1) * p].copy_from_slice(&yn);
    }

    Ok(BsdeSolution {
        grid,
        particles: p,
        dim_noise: m,
        y,
        z,
        controls,
        driver_values,
        y_residuals,
        z_residuals,
        truncation: radius,
        radii,
        clipped,
        truncation_retry: false,
    })
}

/// sup over nodes of the regressed E[Σ_{k≥n}|Z_k|²dt | X_n], maximized over
/// the ensemble: an empirical BMO norm of ∫Z·dW.
pub fn bmo_estimate(sol: &BsdeSolution, paths: &PathEnsemble, basis: &dyn RegressionBasis) -> Result<f64> {
    let (p, d) = (sol.particles(), paths.dim());
    if paths.particles() != p || paths.steps() != sol.steps() {
        return Err(Error::ShapeMismatch("solution and paths differ".into()));
    }
    let dt = sol.grid().dt();
    let mut tail = vec![0.0; p];
    let mut best: f64 = 0.0;
    for n in (0..sol.steps()).rev() {
        for (i, t) in tail.iter_mut().enumerate() {
            *t += sol.z(i, n).iter().map(|v| v * v).sum::<f64>() * dt;
        }
        let points = paths.node_points(n);
        let f = fit(basis, &points, d, &tail, 1, n)?;
        let node_max = reduce::max(p, |i| f.value(&points[i * d..][..d]));
        best = best.max(node_max);
    }
    Ok(best)
}

/// sup_n rms_i(Y_A − Y_B) + sup_n rms_i|Z_A − Z_B|.
pub fn picard_residual(a: &BsdeSolution, b: &BsdeSolution) -> Result<f64> {
    if a.particles != b.particles || a.steps() != b.steps() || a.dim_noise != b.dim_noise {
        return Err(Error::ShapeMismatch(format!(
            "solutions of shape ({}, {}, {}) and ({}, {}, {})",
            a.particles,
            a.steps(),
            a.dim_noise,
            b.particles,
            b.steps(),
            b.dim_noise
        )));
    }
    let p = a.particles;
    let mut sup_y: f64 = 0.0;
    let mut sup_z: f64 = 0.0;
    for n in 0..=a.steps() {
        let sy = reduce::sum(p, |i| (a.y(i, n) - b.y(i, n)).powi(2));
        sup_y = sup_y.max((sy / p as f64).sqrt());
        if n < a.steps() {
            let sz = reduce::sum(p, |i| {
                a.z(i, n).iter().zip(b.z(i, n)).map(|(u, v)| (u - v).powi(2)).sum::<f64>()
            });
            sup_z = sup_z.max((sz / p as f64).sqrt());
        }
    }
    Ok(sup_y + sup_z)
}
