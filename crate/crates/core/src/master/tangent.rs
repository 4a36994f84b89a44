use rand::RngCore;
use rayon::prelude::*;

use super::field::strided;
use crate::bsde::{fit_with_map, solve_backward_with, BsdeOptions, BsdeSolution, RegressionBasis};
use crate::error::{Error, Result};
use crate::forward::{
    shifted_start, simulate_forward, tangent_flow, Drift, InitialLaw, PathEnsemble, Retention, TangentFlow, TimeGrid,
    VectorFieldSet,
};
use crate::linalg::{matmul, norm};
use crate::measure::LawFlow;
use crate::model::Driver;
use crate::rng;
use crate::terminal::TerminalCost;

/// Default number of second-copy particles averaged in E^ω[·].
pub const SECOND_COPY_SAMPLE: usize = 256;

/// An independent copy of the ensemble with its tangent flow, used for the
/// mean-field expectations E^ω[·] of the variational equation.
pub struct SecondCopy {
    pub paths: PathEnsemble,
    pub tangent: TangentFlow,
    /// Particles of the copy entering the averages (strided subsample).
    pub sample: Vec<usize>,
}

impl SecondCopy {
    #[allow(clippy::too_many_arguments)]
    pub fn simulate(
        vfs: &dyn VectorFieldSet,
        drift: &Drift,
        initial: &InitialLaw,
        grid: TimeGrid,
        particles: usize,
        seed: u64,
        sample: usize,
    ) -> Result<Self> {
        let copy_seed = rng::stream(seed, rng::SECOND_COPY, 0).next_u64();
        let paths = simulate_forward(vfs, drift, initial, grid, particles, copy_seed)?;
        let tangent = tangent_flow(vfs, drift, &paths, &Retention::All)?;
        Ok(Self {
            sample: strided(particles, sample),
            paths,
            tangent,
        })
    }
}

/// ∇ₓY and ∇ₓZ on every particle and node.
#[derive(Debug, Clone)]
pub struct TangentBsdeSolution {
    particles: usize,
    steps: usize,
    dim: usize,
    dim_noise: usize,
    grad_y: Vec<f64>,
    grad_z: Vec<f64>,
    pub y_residuals: Vec<f64>,
    pub z_residuals: Vec<f64>,
}

impl TangentBsdeSolution {
    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    /// ∇ₓY (length d).
    pub fn grad_y(&self, i: usize, n: usize) -> &[f64] {
        let d = self.dim;
        &self.grad_y[(n * self.particles + i) * d..][..d]
    }
    /// ∇ₓZ (m×d row-major); n < steps.
    pub fn grad_z(&self, i: usize, n: usize) -> &[f64] {
        let k = self.dim * self.dim_noise;
        &self.grad_z[(n * self.particles + i) * k..][..k]
    }
    pub fn grad_y0_mean(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for i in 0..self.particles {
            for (o, v) in out.iter_mut().zip(self.grad_y(i, 0)) {
                *o += v / self.particles as f64;
            }
        }
        out
    }
}

/// Regression points (X, vec ∇ₓX) at node n: the pair is Markov even when
/// ∇ₓX is not a function of X alone.
fn augmented(paths: &PathEnsemble, tf: &TangentFlow, n: usize) -> Result<Vec<f64>> {
    let d = paths.dim();
    let w = d + d * d;
    let mut out = vec![0.0; paths.particles() * w];
    out.par_chunks_mut(w).enumerate().try_for_each(|(i, o)| -> Result<()> {
        o[..d].copy_from_slice(paths.state(i, n));
        o[d..].copy_from_slice(tf.jacobian(i, n)?);
        Ok(())
    })?;
    Ok(out)
}

/// Averages row(v)·∇ₓX'(v) over the second-copy sample at node n, where
/// `row` writes a d-vector for the copy point v.
fn mean_field_term(
    copy: &SecondCopy,
    n: usize,
    row: impl Fn(&[f64], &mut [f64]) -> Result<()>,
    out: &mut [f64],
) -> Result<()> {
    let d = out.len();
    out.fill(0.0);
    let mut r = vec![0.0; d];
    let mut prod = vec![0.0; d];
    for &k in &copy.sample {
        row(copy.paths.state(k, n), &mut r)?;
        matmul(&r, copy.tangent.jacobian(k, n)?, 1, d, d, &mut prod);
        for (o, p) in out.iter_mut().zip(&prod) {
            *o += p;
        }
    }
    let inv = 1.0 / copy.sample.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}

/// Backward regression solve of the linear variational BSDE
///
///   ∇Y_t = ∇ₓg·∇X_T + E^ω[∂_μg(X_T)(X'_T)∇X'_T]
///        + ∫_t^T (∇ₓF·∇X + ∇_zF·∇Z + E^ω[∂_μF(X')∇X']) ds − ∫_t^T ∇Z dW
///
/// linearized along `sol`, with E^ω over the independent second copy.
#[allow(clippy::too_many_arguments)]
pub fn solve_tangent_bsde(
    paths: &PathEnsemble,
    tf: &TangentFlow,
    sol: &BsdeSolution,
    driver: &dyn Driver,
    flow: &LawFlow,
    g: &dyn TerminalCost,
    basis: &dyn RegressionBasis,
    copy: &SecondCopy,
) -> Result<TangentBsdeSolution> {
    let (d, m, p, steps) = (paths.dim(), paths.noise_dim(), paths.particles(), paths.steps());
    if sol.particles() != p || sol.steps() != steps || tf.particles() != p || tf.dim() != d {
        return Err(Error::ShapeMismatch("tangent flow, solution and paths differ".into()));
    }
    if copy.paths.steps() != steps || copy.paths.dim() != d || flow.len() != steps + 1 {
        return Err(Error::ShapeMismatch("second copy or flow does not match the grid".into()));
    }
    let dt = paths.grid().dt();
    let w = d + d * d;
    let dm = d * m;
    let mut gy = vec![0.0; (steps + 1) * p * d];
    let mut gz = vec![0.0; steps * p * dm];
    let mut y_residuals = vec![0.0; steps];
    let mut z_residuals = vec![0.0; steps];

    let mu_n = flow.at(steps);
    gy[steps * p * d..].par_chunks_mut(d).enumerate().try_for_each(|(i, o)| -> Result<()> {
        let x = paths.state(i, steps);
        let mut grad = vec![0.0; d];
        g.grad_x(x, mu_n, &mut grad);
        matmul(&grad, tf.jacobian(i, steps)?, 1, d, d, o);
        if g.depends_on_measure() {
            let mut mf = vec![0.0; d];
            mean_field_term(copy, steps, |v, r| g.dmu(x, mu_n, v, r), &mut mf)?;
            o.iter_mut().zip(&mf).for_each(|(a, b)| *a += b);
        }
        Ok(())
    })?;

    for n in (0..steps).rev() {
        let points = augmented(paths, tf, n)?;
        let map = basis.prepare(&points, w)?;
        let ridge = basis.ridge();
        let next = gy[(n + 1) * p * d..(n + 2) * p * d].to_vec();
        let yhat = fit_with_map(map.clone(), ridge, &points, w, &next, d, n)?.fitted;

        // ∇Z[l][k] = E[(∇Y_{n+1} − ŷ)_k ΔW_l | X_n, ∇X_n]/dt
        let mut ztarget = vec![0.0; p * dm];
        ztarget.par_chunks_mut(dm).enumerate().for_each(|(i, t)| {
            for (l, dw) in paths.increment(i, n).iter().enumerate() {
                for k in 0..d {
                    t[l * d + k] = (next[i * d + k] - yhat[i * d + k]) * dw / dt;
                }
            }
        });
        let zfit = fit_with_map(map.clone(), ridge, &points, w, &ztarget, dm, n)?;
        z_residuals[n] = norm(&zfit.residuals) * dt.sqrt();
        gz[n * p * dm..(n + 1) * p * dm].copy_from_slice(&zfit.fitted);
        let zn = &gz[n * p * dm..(n + 1) * p * dm];

        let mu = flow.at(n);
        let mut running = vec![0.0; p * d];
        running.par_chunks_mut(d).enumerate().try_for_each(|(i, r)| -> Result<()> {
            let x = paths.state(i, n);
            let lin = driver.linearize(x, sol.z(i, n), mu, Some(sol.control(i, n)))?;
            matmul(&lin.grad_x, tf.jacobian(i, n)?, 1, d, d, r);
            let zi = &zn[i * dm..(i + 1) * dm];
            for (l, gzl) in lin.grad_z.iter().enumerate() {
                for k in 0..d {
                    r[k] += gzl * zi[l * d + k];
                }
            }
            if driver.depends_on_measure() {
                let mut mf = vec![0.0; d];
                mean_field_term(copy, n, |v, o| driver.dmu(x, mu, &lin, v, o), &mut mf)?;
                r.iter_mut().zip(&mf).for_each(|(a, b)| *a += b);
            }
            Ok(())
        })?;

        let mut ytarget = next;
        ytarget.par_chunks_mut(d).enumerate().for_each(|(i, t)| {
            let zi = &zn[i * dm..(i + 1) * dm];
            for (l, dw) in paths.increment(i, n).iter().enumerate() {
                for k in 0..d {
                    t[k] -= zi[l * d + k] * dw;
                }
            }
        });
        let yfit = fit_with_map(map, ridge, &points, w, &ytarget, d, n)?;
        y_residuals[n] = norm(&yfit.residuals);
        let out = &mut gy[n * p * d..(n + 1) * p * d];
        for (j, o) in out.iter_mut().enumerate() {
            *o = yfit.fitted[j] + running[j] * dt;
            if !o.is_finite() {
                return Err(Error::NonFinite { particle: j / d, step: n });
            }
        }
    }

    Ok(TangentBsdeSolution {
        particles: p,
        steps,
        dim: d,
        dim_noise: m,
        grad_y: gy,
        grad_z: gz,
        y_residuals,
        z_residuals,
    })
}

/// Same-noise difference (Y₀[X₀ + h e_k] − Y₀[X₀ − h e_k])/2h per particle
/// (P×d). The whole ensemble is shifted, so the law moves with the start
/// point as in the variational equation.
#[allow(clippy::too_many_arguments)]
pub fn tangent_bump_oracle(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    paths: &PathEnsemble,
    driver: &dyn Driver,
    g: &dyn TerminalCost,
    basis: &dyn RegressionBasis,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("bump size must be positive"));
    }
    let (d, p) = (paths.dim(), paths.particles());
    let opts = BsdeOptions {
        diffusion: Some(vfs),
        ..Default::default()
    };
    let mut out = vec![0.0; p * d];
    for k in 0..d {
        let mut y0 = [vec![], vec![]];
        for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut delta = vec![0.0; d];
            delta[k] = sign * h;
            let shifted = shifted_start(vfs, drift, paths, &delta)?;
            let sol = solve_backward_with(&shifted, driver, &shifted.law_flow(), g, basis, &opts)?;
            y0[s] = sol.y_node(0).to_vec();
        }
        for i in 0..p {
            out[i * d + k] = (y0[0][i] - y0[1][i]) / (2.0 * h);
        }
    }
    Ok(out)
}
