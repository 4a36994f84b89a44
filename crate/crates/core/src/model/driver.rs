//! BSDE drivers F(x, z, μ) and their first-order linearization.

use std::sync::Arc;

use super::{optimal_control_from, LagrangianModel, NewtonOptions};
use crate::error::{check_finite, Error, Result};
use crate::linalg::{matmul, solve_spd};
use crate::measure::EmpiricalMeasure;

#[derive(Debug, Clone)]
pub struct DriverEval {
    pub value: f64,
    /// α̂(x, z, μ); zeros for drivers without a control interpretation.
    pub control: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Linearization {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_z: Vec<f64>,
    pub control: Vec<f64>,
}

pub trait Driver: Send + Sync {
    fn name(&self) -> String;
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn depends_on_measure(&self) -> bool;

    /// F(x, z, μ); `warm` is an optional starting control for the inner solve.
    fn eval(&self, x: &[f64], z: &[f64], mu: &EmpiricalMeasure, warm: Option<&[f64]>) -> Result<DriverEval>;

    /// F with ∇ₓF and ∇_zF.
    fn linearize(&self, x: &[f64], z: &[f64], mu: &EmpiricalMeasure, warm: Option<&[f64]>) -> Result<Linearization>;

    /// ∂_μF(x, z, μ)(v) at the point described by `lin`.
    fn dmu(&self, x: &[f64], mu: &EmpiricalMeasure, lin: &Linearization, v: &[f64], out: &mut [f64]) -> Result<()>;
}

/// F(x, z, μ) = L(x, α̂(x, z, μ), μ) for a Lagrangian model.
///
/// Derivatives follow from the first-order condition ∇ₐL(x, α̂, μ) = z with
/// G = (D²ₐₐL)⁻¹: ∇_zF = zᵀG, ∇ₓF = ∇ₓL − ∇_zF·D²ₐₓL and
/// ∂_μF = ∂_μL − ∇_zF·∂_μ(∇ₐL).
#[derive(Clone)]
pub struct ModelDriver {
    model: Arc<dyn LagrangianModel>,
    opts: NewtonOptions,
}

impl ModelDriver {
    pub fn new(model: Arc<dyn LagrangianModel>) -> Self {
        Self {
            model,
            opts: NewtonOptions::default(),
        }
    }

    pub fn with_options(model: Arc<dyn LagrangianModel>, opts: NewtonOptions) -> Self {
        Self { model, opts }
    }

    pub fn model(&self) -> &dyn LagrangianModel {
        self.model.as_ref()
    }

    fn control(&self, x: &[f64], z: &[f64], mu: &EmpiricalMeasure, warm: Option<&[f64]>) -> Result<Vec<f64>> {
        let zero;
        let start = match warm {
            Some(w) => w,
            None => {
                zero = vec![0.0; self.model.dim_control()];
                &zero
            }
        };
        optimal_control_from(self.model.as_ref(), x, z, mu, start, self.opts)
    }
}

impl Driver for ModelDriver {
    fn name(&self) -> String {
        format!("L(x, α̂, μ) for {}", self.model.name())
    }
    fn dim_state(&self) -> usize {
        self.model.dim_state()
    }
    fn dim_noise(&self) -> usize {
        self.model.dim_control()
    }
    fn depends_on_measure(&self) -> bool {
        self.model.depends_on_measure()
    }

    fn eval(&self, x: &[f64], z: &[f64], mu: &EmpiricalMeasure, warm: Option<&[f64]>) -> Result<DriverEval> {
        let control = self.control(x, z, mu, warm)?;
        let value = check_finite(self.model.value(x, &control, mu), || {
            format!("driver at x={x:?}, z={z:?}")
        })?;
        Ok(DriverEval { value, control })
    }

    fn linearize(&self, x: &[f64], z: &[f64], mu: &EmpiricalMeasure, warm: Option<&[f64]>) -> Result<Linearization> {
        let (d, m) = (self.model.dim_state(), self.model.dim_control());
        let DriverEval { value, control } = self.eval(x, z, mu, warm)?;
        let mut hess = vec![0.0; m * m];
        self.model.hess_aa(x, &control, mu, &mut hess);
        // G symmetric, so zᵀG = (G z)ᵀ
        let grad_z = solve_spd(&hess, z, m).ok_or_else(|| Error::EvaluatorFailure {
            point: format!("D²ₐₐL not positive definite at x={x:?}, a={control:?}"),
        })?;
        let mut hax = vec![0.0; m * d];
        self.model.hess_ax(x, &control, mu, &mut hax);
        let mut corr = vec![0.0; d];
        matmul(&grad_z, &hax, 1, m, d, &mut corr);
        let mut grad_x = vec![0.0; d];
        self.model.grad_x(x, &control, mu, &mut grad_x);
        for (g, c) in grad_x.iter_mut().zip(&corr) {
            *g -= c;
        }
        Ok(Linearization {
            value,
            grad_x,
            grad_z,
            control,
        })
    }

    fn dmu(&self, x: &[f64], mu: &EmpiricalMeasure, lin: &Linearization, v: &[f64], out: &mut [f64]) -> Result<()> {
        let (d, m) = (self.model.dim_state(), self.model.dim_control());
        self.model.dmu(x, &lin.control, mu, v, out)?;
        let mut dga = vec![0.0; m * d];
        self.model.dmu_grad_a(x, &lin.control, mu, v, &mut dga)?;
        let mut corr = vec![0.0; d];
        matmul(&lin.grad_z, &dga, 1, m, d, &mut corr);
        for (o, c) in out.iter_mut().zip(&corr) {
            *o -= c;
        }
        Ok(())
    }
}

/// F ≡ 0: the backward equation reduces to a conditional expectation.
#[derive(Debug, Clone)]
pub struct ZeroDriver {
    dim: usize,
    noise_dim: usize,
}

impl ZeroDriver {
    pub fn new(dim: usize, noise_dim: usize) -> Self {
        Self { dim, noise_dim }
    }
}

impl Driver for ZeroDriver {
    fn name(&self) -> String {
        "zero".into()
    }
    fn dim_state(&self) -> usize {
        self.dim
    }
    fn dim_noise(&self) -> usize {
        self.noise_dim
    }
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn eval(&self, _x: &[f64], _z: &[f64], _mu: &EmpiricalMeasure, _warm: Option<&[f64]>) -> Result<DriverEval> {
        Ok(DriverEval {
            value: 0.0,
            control: vec![0.0; self.noise_dim],
        })
    }
    fn linearize(&self, _x: &[f64], _z: &[f64], _mu: &EmpiricalMeasure, _warm: Option<&[f64]>) -> Result<Linearization> {
        Ok(Linearization {
            value: 0.0,
            grad_x: vec![0.0; self.dim],
            grad_z: vec![0.0; self.noise_dim],
            control: vec![0.0; self.noise_dim],
        })
    }
    fn dmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _lin: &Linearization, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantWeight, OscillatingWeight, QuadraticCostModel};

    #[test]
    fn quadratic_driver_linearization_matches_closed_form() {
        // F = (z² − k²x²)/(4f)
        let (f, k) = (1.5, 0.8);
        let model = QuadraticCostModel::new(1, Box::new(ConstantWeight::new(f).unwrap()), k).unwrap();
        let drv = ModelDriver::new(Arc::new(model));
        let mu = EmpiricalMeasure::dirac(&[0.0]);
        let (x, z) = (0.7, -1.3);
        let lin = drv.linearize(&[x], &[z], &mu, None).unwrap();
        assert!((lin.value - (z * z - k * k * x * x) / (4.0 * f)).abs() < 1e-12);
        assert!((lin.grad_z[0] - z / (2.0 * f)).abs() < 1e-12);
        assert!((lin.grad_x[0] + k * k * x / (2.0 * f)).abs() < 1e-12);
    }

    #[test]
    fn measure_derivative_of_driver_matches_particle_proxy() {
        let model = QuadraticCostModel::new(1, Box::new(OscillatingWeight::new(1.0, 0.5).unwrap()), 0.0).unwrap();
        let drv = ModelDriver::new(Arc::new(model));
        let mu = EmpiricalMeasure::uniform(vec![-0.4, 0.1, 0.8, 1.5], 1).unwrap();
        let (x, z) = ([0.3], [1.1]);
        let lin = drv.linearize(&x, &z, &mu, None).unwrap();
        let mut an = [0.0];
        drv.dmu(&x, &mu, &lin, mu.point(2), &mut an).unwrap();
        let proxy = crate::measure::lions_derivative(
            |m| drv.eval(&x, &z, m, None).unwrap().value,
            &mu,
            2,
            1e-4,
        )
        .unwrap();
        assert!((an[0] - proxy[0]).abs() < 1e-6, "{} vs {}", an[0], proxy[0]);
    }
}
