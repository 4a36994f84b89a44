use super::{dims, LagrangianModel};
use crate::error::Result;
use crate::linalg::dot;
use crate::measure::EmpiricalMeasure;
use crate::registry::Params;

/// L(x, a, μ) = |a|⁴ + eps·|a|².
///
/// Convex but with Hessian 4|a|²I + 8aaᵀ + 2·eps·I, unbounded in a; the
/// standard counterexample for the bounded-Hessian requirement.
#[derive(Debug, Clone)]
pub struct QuarticCostModel {
    dim: usize,
    control_dim: usize,
    eps: f64,
}

impl QuarticCostModel {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            dim,
            control_dim: dim,
            eps,
        }
    }

    pub fn with_control_dim(dim: usize, control_dim: usize, eps: f64) -> Self {
        Self {
            dim,
            control_dim,
            eps,
        }
    }
}

impl LagrangianModel for QuarticCostModel {
    fn name(&self) -> String {
        format!("quartic[eps {}]", self.eps)
    }
    fn dim_state(&self) -> usize {
        self.dim
    }
    fn dim_control(&self) -> usize {
        self.control_dim
    }
    fn depends_on_measure(&self) -> bool {
        false
    }

    fn value(&self, _x: &[f64], a: &[f64], _mu: &EmpiricalMeasure) -> f64 {
        let a2 = dot(a, a);
        a2 * a2 + self.eps * a2
    }

    fn grad_a(&self, _x: &[f64], a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        let s = 4.0 * dot(a, a) + 2.0 * self.eps;
        for (o, ai) in out.iter_mut().zip(a) {
            *o = s * ai;
        }
    }

    fn hess_aa(&self, _x: &[f64], a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        let m = self.control_dim;
        let s = 4.0 * dot(a, a) + 2.0 * self.eps;
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = 8.0 * a[i] * a[j] + if i == j { s } else { 0.0 };
            }
        }
    }

    fn grad_x(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hess_ax(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hess_xx(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn third_aaa(&self, _x: &[f64], a: &[f64], _mu: &EmpiricalMeasure, xi: [&[f64]; 3]) -> Option<f64> {
        // D³|a|⁴[p, q, r] = 8{(a·p)(q·r) + (a·q)(p·r) + (a·r)(p·q)}
        let [p, q, r] = xi;
        Some(8.0 * (dot(a, p) * dot(q, r) + dot(a, q) * dot(p, r) + dot(a, r) * dot(p, q)))
    }

    fn dmu(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn dmu_grad_a(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn dmu_grad_x(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn dmu_hess_aa_norm(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// L ≡ 0. Not strictly convex: ∇ₐL = z has no root for z ≠ 0.
#[derive(Debug, Clone)]
pub struct ZeroCostModel {
    dim: usize,
    control_dim: usize,
}

impl ZeroCostModel {
    pub fn new(dim: usize, control_dim: usize) -> Self {
        Self { dim, control_dim }
    }
}

impl LagrangianModel for ZeroCostModel {
    fn name(&self) -> String {
        "zero".into()
    }
    fn dim_state(&self) -> usize {
        self.dim
    }
    fn dim_control(&self) -> usize {
        self.control_dim
    }
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn value(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure) -> f64 {
        0.0
    }
    fn grad_a(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hess_aa(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn grad_x(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hess_ax(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hess_xx(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn third_aaa(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _xi: [&[f64]; 3]) -> Option<f64> {
        Some(0.0)
    }
    fn dmu(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn dmu_grad_a(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn dmu_grad_x(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
    fn dmu_hess_aa_norm(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _v: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

pub(super) fn build_quartic(p: &Params) -> Result<Box<dyn LagrangianModel>> {
    let (d, m) = dims(p, 1)?;
    Ok(Box::new(QuarticCostModel::with_control_dim(d, m, p.f64_or("eps", 0.0)?)))
}

pub(super) fn build_zero(p: &Params) -> Result<Box<dyn LagrangianModel>> {
    let (d, m) = dims(p, 1)?;
    Ok(Box::new(ZeroCostModel::new(d, m)))
}
