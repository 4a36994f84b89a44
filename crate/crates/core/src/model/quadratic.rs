use super::{dims, LagrangianModel};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::measure::EmpiricalMeasure;
use crate::registry::Params;

/// Positive weight f(x, μ) of the quadratic cost, with its derivatives.
pub trait WeightFunction: Send + Sync {
    fn name(&self) -> String;
    fn value(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64;
    fn grad_x(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// d×d
    fn hess_xx(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn dmu(&self, x: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]);
    /// ∂_μ∇ₓf, d×d with entry (i, k) = ∂_μ(∂ᵢf)_k.
    fn dmu_grad_x(&self, x: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]);
    /// inf f over all inputs.
    fn lower_bound(&self) -> f64;
    fn depends_on_measure(&self) -> bool;
}

#[derive(Debug, Clone)]
pub struct ConstantWeight(f64);

impl ConstantWeight {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "constant weight must be positive, got {value}"
            )));
        }
        Ok(Self(value))
    }
}

impl WeightFunction for ConstantWeight {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }
    fn value(&self, _x: &[f64], _mu: &EmpiricalMeasure) -> f64 {
        self.0
    }
    fn grad_x(&self, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hess_xx(&self, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn dmu_grad_x(&self, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn lower_bound(&self) -> f64 {
        self.0
    }
    fn depends_on_measure(&self) -> bool {
        false
    }
}

/// f(x, μ) = base + amplitude·(sin x₁ + cos m₁)/2 with m = mean(μ).
///
/// Bounded with bounded Lipschitz derivatives in x and μ, and
/// inf f = base − amplitude > 0.
#[derive(Debug, Clone)]
pub struct OscillatingWeight {
    base: f64,
    amplitude: f64,
}

impl OscillatingWeight {
    pub fn new(base: f64, amplitude: f64) -> Result<Self> {
        if !(base - amplitude.abs() > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "oscillating weight needs base > |amplitude| (got {base}, {amplitude})"
            )));
        }
        Ok(Self { base, amplitude })
    }
}

impl WeightFunction for OscillatingWeight {
    fn name(&self) -> String {
        format!("oscillating({}, {})", self.base, self.amplitude)
    }
    fn value(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        self.base + 0.5 * self.amplitude * (x[0].sin() + mu.mean()[0].cos())
    }
    fn grad_x(&self, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
        out[0] = 0.5 * self.amplitude * x[0].cos();
    }
    fn hess_xx(&self, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
        out[0] = -0.5 * self.amplitude * x[0].sin();
    }
    fn dmu(&self, _x: &[f64], mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) {
        // ∂_μ mean(μ)(v) = identity, so only the first component survives
        out.fill(0.0);
        out[0] = -0.5 * self.amplitude * mu.mean()[0].sin();
    }
    fn dmu_grad_x(&self, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn lower_bound(&self) -> f64 {
        self.base - self.amplitude.abs()
    }
    fn depends_on_measure(&self) -> bool {
        self.amplitude != 0.0
    }
}

/// L(x, a, μ) = f(x, μ)|a|² − tilt·⟨x, a⟩.
///
/// With tilt = 0 this is the standard quadratic example. A nonzero tilt
/// (requires d = m) shifts the minimizer to α̂ = (z + tilt·x)/(2f), which
/// makes F(x, z) = (|z|² − tilt²|x|²)/(4f) vanish along z = ±tilt·x.
pub struct QuadraticCostModel {
    dim: usize,
    control_dim: usize,
    weight: Box<dyn WeightFunction>,
    tilt: f64,
}

impl QuadraticCostModel {
    pub fn new(dim: usize, weight: Box<dyn WeightFunction>, tilt: f64) -> Result<Self> {
        Self::with_control_dim(dim, dim, weight, tilt)
    }

    pub fn with_control_dim(
        dim: usize,
        control_dim: usize,
        weight: Box<dyn WeightFunction>,
        tilt: f64,
    ) -> Result<Self> {
        if tilt != 0.0 && dim != control_dim {
            return Err(Error::InvalidParameter(
                "tilted quadratic cost needs control_dim == dim".into(),
            ));
        }
        if weight.lower_bound() <= 0.0 {
            return Err(Error::InvalidParameter("weight must satisfy inf f > 0".into()));
        }
        Ok(Self {
            dim,
            control_dim,
            weight,
            tilt,
        })
    }

    pub fn weight(&self) -> &dyn WeightFunction {
        self.weight.as_ref()
    }

    pub fn tilt(&self) -> f64 {
        self.tilt
    }
}

impl LagrangianModel for QuadraticCostModel {
    fn name(&self) -> String {
        format!("quadratic[{}; tilt {}]", self.weight.name(), self.tilt)
    }
    fn dim_state(&self) -> usize {
        self.dim
    }
    fn dim_control(&self) -> usize {
        self.control_dim
    }
    fn depends_on_measure(&self) -> bool {
        self.weight.depends_on_measure()
    }

    fn value(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure) -> f64 {
        let mut l = self.weight.value(x, mu) * dot(a, a);
        if self.tilt != 0.0 {
            l -= self.tilt * dot(x, a);
        }
        l
    }

    fn grad_a(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let f = self.weight.value(x, mu);
        for (k, o) in out.iter_mut().enumerate() {
            *o = 2.0 * f * a[k];
            if self.tilt != 0.0 {
                *o -= self.tilt * x[k];
            }
        }
    }

    fn hess_aa(&self, x: &[f64], _a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let f = self.weight.value(x, mu);
        let m = self.control_dim;
        out.fill(0.0);
        for i in 0..m {
            out[i * m + i] = 2.0 * f;
        }
    }

    fn grad_x(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.weight.grad_x(x, mu, out);
        let a2 = dot(a, a);
        for (k, o) in out.iter_mut().enumerate() {
            *o *= a2;
            if self.tilt != 0.0 {
                *o -= self.tilt * a[k];
            }
        }
    }

    fn hess_ax(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let d = self.dim;
        let mut gf = vec![0.0; d];
        self.weight.grad_x(x, mu, &mut gf);
        for i in 0..self.control_dim {
            for j in 0..d {
                out[i * d + j] = 2.0 * a[i] * gf[j] - if i == j { self.tilt } else { 0.0 };
            }
        }
    }

    fn hess_xx(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.weight.hess_xx(x, mu, out);
        let a2 = dot(a, a);
        out.iter_mut().for_each(|o| *o *= a2);
    }

    fn third_aaa(&self, _x: &[f64], _a: &[f64], _mu: &EmpiricalMeasure, _xi: [&[f64]; 3]) -> Option<f64> {
        Some(0.0)
    }

    fn dmu(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]) -> Result<()> {
        self.weight.dmu(x, mu, v, out);
        let a2 = dot(a, a);
        out.iter_mut().for_each(|o| *o *= a2);
        Ok(())
    }

    fn dmu_grad_a(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let mut df = vec![0.0; d];
        self.weight.dmu(x, mu, v, &mut df);
        for i in 0..self.control_dim {
            for k in 0..d {
                out[i * d + k] = 2.0 * a[i] * df[k];
            }
        }
        Ok(())
    }

    fn dmu_grad_x(&self, x: &[f64], a: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]) -> Result<()> {
        self.weight.dmu_grad_x(x, mu, v, out);
        let a2 = dot(a, a);
        out.iter_mut().for_each(|o| *o *= a2);
        Ok(())
    }

    fn dmu_hess_aa_norm(&self, x: &[f64], _a: &[f64], mu: &EmpiricalMeasure, v: &[f64]) -> Result<f64> {
        let mut df = vec![0.0; self.dim];
        self.weight.dmu(x, mu, v, &mut df);
        Ok(2.0 * (self.control_dim as f64).sqrt() * crate::linalg::norm(&df))
    }
}

pub(super) fn build(p: &Params) -> Result<Box<dyn LagrangianModel>> {
    let (d, m) = dims(p, 1)?;
    let weight: Box<dyn WeightFunction> = match p.str_or("weight", "constant")?.as_str() {
        "constant" => Box::new(ConstantWeight::new(p.f64_or("value", 1.0)?)?),
        "oscillating" => Box::new(OscillatingWeight::new(
            p.f64_or("base", 1.0)?,
            p.f64_or("amplitude", 0.5)?,
        )?),
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown weight '{other}' (known: constant, oscillating)"
            )))
        }
    };
    let tilt = p.f64_or("tilt", 0.0)?;
    Ok(Box::new(QuadraticCostModel::with_control_dim(d, m, weight, tilt)?))
}
