//! Lagrangian layer: running cost L(x, a, μ), its minimizer α̂, the
//! Hamiltonian and the BSDE driver F(x, z, μ) = L(x, α̂(x, z, μ), μ).
//!
//! Controls are unconstrained (A = R^m); α̂ is the unique root of
//! ∇ₐL(x, a, μ) = z for strongly convex models.

mod assumptions;
mod driver;
mod quadratic;
mod quartic;

pub use assumptions::{
    monotonicity_check, verify_assumptions, AssumptionReport, DeclaredConstants, SampleSpec,
    Violation,
};
pub use driver::{Driver, DriverEval, Linearization, ModelDriver, ZeroDriver};
pub use quadratic::{ConstantWeight, OscillatingWeight, QuadraticCostModel, WeightFunction};
pub use quartic::{QuarticCostModel, ZeroCostModel};

use crate::error::{check_finite, Error, Result};
use crate::linalg::{self, dot, norm};
use crate::measure::EmpiricalMeasure;
use crate::registry::{Params, Registry};

/// Step used for finite-difference fallbacks of missing derivatives.
pub const FD_STEP: f64 = 1e-5;

/// Running cost with derivatives in state, control and measure.
///
/// Matrices are row-major: `hess_ax` is m×d with entry (i, j) = ∂²L/∂aᵢ∂xⱼ,
/// measure derivatives taken at `v` are d-vectors (`dmu`) or m×d / d×d
/// matrices. Only `value`, `grad_a` and `hess_aa` are mandatory; the rest
/// default to central differences or report a missing evaluator.
pub trait LagrangianModel: Send + Sync {
    fn name(&self) -> String;
    fn dim_state(&self) -> usize;
    fn dim_control(&self) -> usize;

    fn value(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure) -> f64;
    fn grad_a(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn hess_aa(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    fn depends_on_measure(&self) -> bool {
        true
    }

    fn grad_x(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        fd_gradient(|y| self.value(y, a, mu), x, out);
    }

    fn hess_ax(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (d, m) = (x.len(), a.len());
        fd_jacobian(|y, o| self.grad_a(y, a, mu, o), x, m, out);
        debug_assert_eq!(out.len(), m * d);
    }

    fn hess_xx(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        fd_jacobian(|y, o| self.grad_x(y, a, mu, o), x, x.len(), out);
    }

    /// D³ₐₐₐL[ξ₁, ξ₂, ξ₃]; `None` when no analytic form is available.
    fn third_aaa(
        &self,
        _x: &[f64],
        _a: &[f64],
        _mu: &EmpiricalMeasure,
        _xi: [&[f64]; 3],
    ) -> Option<f64> {
        None
    }

    fn dmu(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::MissingEvaluator(format!("∂_μL for model {}", self.name())))
    }

    fn dmu_grad_a(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::MissingEvaluator(format!("∂_μ∇ₐL for model {}", self.name())))
    }

    fn dmu_grad_x(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::MissingEvaluator(format!("∂_μ∇ₓL for model {}", self.name())))
    }

    /// Frobenius norm of ∂_μ(D²ₐₐL)(x, a, μ, v).
    fn dmu_hess_aa_norm(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64]) -> Result<f64> {
        Err(Error::MissingEvaluator(format!("∂_μD²ₐₐL for model {}", self.name())))
    }
}

pub(crate) fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
    let mut y = x.to_vec();
    for k in 0..x.len() {
        y[k] = x[k] + FD_STEP;
        let up = f(&y);
        y[k] = x[k] - FD_STEP;
        let down = f(&y);
        y[k] = x[k];
        out[k] = (up - down) / (2.0 * FD_STEP);
    }
}

/// Jacobian of `f: R^d → R^rows` into a rows×d row-major buffer.
pub(crate) fn fd_jacobian(f: impl Fn(&[f64], &mut [f64]), x: &[f64], rows: usize, out: &mut [f64]) {
    let d = x.len();
    let mut y = x.to_vec();
    let mut up = vec![0.0; rows];
    let mut down = vec![0.0; rows];
    for k in 0..d {
        y[k] = x[k] + FD_STEP;
        f(&y, &mut up);
        y[k] = x[k] - FD_STEP;
        f(&y, &mut down);
        y[k] = x[k];
        for r in 0..rows {
            out[r * d + k] = (up[r] - down[r]) / (2.0 * FD_STEP);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// α̂(x, z, μ): solves ∇ₐL(x, a, μ) = z by damped Newton from a = 0.
pub fn optimal_control(
    model: &dyn LagrangianModel,
    x: &[f64],
    z: &[f64],
    mu: &EmpiricalMeasure,
    opts: NewtonOptions,
) -> Result<Vec<f64>> {
    let start = vec![0.0; model.dim_control()];
    optimal_control_from(model, x, z, mu, &start, opts)
}

/// Damped Newton with Armijo backtracking on ½|∇ₐL − z|². When the Newton
/// direction fails (singular Hessian or no decrease) a steepest-descent step
/// on L(x, a, μ) − a·z is taken instead.
pub fn optimal_control_from(
    model: &dyn LagrangianModel,
    x: &[f64],
    z: &[f64],
    mu: &EmpiricalMeasure,
    start: &[f64],
    opts: NewtonOptions,
) -> Result<Vec<f64>> {
    const ARMIJO: f64 = 1e-4;
    let m = model.dim_control();
    if z.len() != m || start.len() != m || x.len() != model.dim_state() {
        return Err(Error::ShapeMismatch(format!(
            "optimal_control: x {} z {} start {} for model ({}, {})",
            x.len(),
            z.len(),
            start.len(),
            model.dim_state(),
            m
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("Newton tolerance must be positive"));
    }
    let mut a = start.to_vec();
    let mut r = vec![0.0; m];
    let mut hess = vec![0.0; m * m];
    let mut trial = vec![0.0; m];
    let residual = |a: &[f64], r: &mut [f64]| {
        model.grad_a(x, a, mu, r);
        for (ri, zi) in r.iter_mut().zip(z) {
            *ri -= zi;
        }
        norm(r)
    };
    let objective = |a: &[f64]| model.value(x, a, mu) - dot(a, z);

    let mut res = residual(&a, &mut r);
    for _ in 0..opts.max_iter {
        if !res.is_finite() {
            break;
        }
        if res <= opts.tol {
            return Ok(a);
        }
        model.hess_aa(x, &a, mu, &mut hess);
        let mut accepted = false;
        if let Some(step) = linalg::solve_spd(&hess, &r, m) {
            let mut t = 1.0;
            for _ in 0..40 {
                for k in 0..m {
                    trial[k] = a[k] - t * step[k];
                }
                let mut rt = vec![0.0; m];
                let rt_norm = residual(&trial, &mut rt);
                if rt_norm * rt_norm <= (1.0 - 2.0 * ARMIJO * t) * res * res {
                    a.copy_from_slice(&trial);
                    r = rt;
                    res = rt_norm;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            let f0 = objective(&a);
            let mut t = 1.0;
            for _ in 0..60 {
                for k in 0..m {
                    trial[k] = a[k] - t * r[k];
                }
                if objective(&trial) <= f0 - ARMIJO * t * res * res {
                    a.copy_from_slice(&trial);
                    res = residual(&a, &mut r);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            break;
        }
    }
    if res <= opts.tol {
        Ok(a)
    } else {
        Err(Error::NonConvergence {
            iterations: opts.max_iter,
            residual: res,
        })
    }
}

/// H(x, z, μ) = L(x, α̂, μ) − α̂·z.
pub fn hamiltonian(
    model: &dyn LagrangianModel,
    x: &[f64],
    z: &[f64],
    mu: &EmpiricalMeasure,
    opts: NewtonOptions,
) -> Result<f64> {
    let a = optimal_control(model, x, z, mu, opts)?;
    check_finite(model.value(x, &a, mu) - dot(&a, z), || {
        format!("hamiltonian at x={x:?}, z={z:?}")
    })
}

/// F(x, z, μ) = L(x, α̂(x, z, μ), μ).
pub fn driver(
    model: &dyn LagrangianModel,
    x: &[f64],
    z: &[f64],
    mu: &EmpiricalMeasure,
    opts: NewtonOptions,
) -> Result<f64> {
    let a = optimal_control(model, x, z, mu, opts)?;
    check_finite(model.value(x, &a, mu), || format!("driver at x={x:?}, z={z:?}"))
}

/// Built-in Lagrangian models.
pub fn model_registry() -> Registry<dyn LagrangianModel> {
    let mut reg: Registry<dyn LagrangianModel> = Registry::new("model");
    reg.register(
        "quadratic",
        "L = f(x, μ)|a|² − tilt·x·a with weight 'constant' or 'oscillating'",
        quadratic::build,
    );
    reg.register("quartic", "L = |a|⁴ + eps·|a|²", quartic::build_quartic);
    reg.register("zero", "L ≡ 0 (cost-free; not strongly convex)", quartic::build_zero);
    reg
}

pub(crate) fn dims(p: &Params, default: usize) -> Result<(usize, usize)> {
    let d = p.usize_or("dim", default)?;
    let m = p.usize_or("control_dim", d)?;
    if d == 0 || m == 0 {
        return Err(Error::InvalidParameter("dimensions must be positive".into()));
    }
    Ok((d, m))
}
