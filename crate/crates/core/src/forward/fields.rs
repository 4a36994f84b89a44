//! Diffusion vector fields σ₁, …, σ_m and drifts.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::registry::{Params, Registry};

/// The columns σ_l of the diffusion matrix σ(x) = [σ₁(x), …, σ_m(x)].
pub trait VectorFieldSet: Send + Sync {
    fn name(&self) -> String;
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;

    /// σ(x) as a d×m row-major matrix; column l is σ_l(x).
    fn sigma(&self, x: &[f64], out: &mut [f64]);

    /// Jacobian of σ_l, d×d row-major with entry (i, j) = ∂ⱼσ_lⁱ.
    fn jac_sigma(&self, l: usize, x: &[f64], out: &mut [f64]);

    /// Whether second and higher derivatives exist (required for nested
    /// brackets and the drift Jacobian of the Itô correction).
    fn smooth(&self) -> bool {
        true
    }

    /// Declared bound on |∇σ_l| over the whole space, if any.
    fn jac_bound(&self) -> Option<f64> {
        None
    }
}

/// bⁱ(x) = ½ Σ_l Σ_j σ_lʲ ∂ⱼσ_lⁱ, the drift turning σ(X)∘dW into Itô form.
pub fn ito_drift(vfs: &dyn VectorFieldSet, x: &[f64], out: &mut [f64]) {
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    let mut sig = vec![0.0; d * m];
    let mut jac = vec![0.0; d * d];
    vfs.sigma(x, &mut sig);
    out.fill(0.0);
    for l in 0..m {
        vfs.jac_sigma(l, x, &mut jac);
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += sig[j * m + l] * jac[i * d + j];
            }
            out[i] += 0.5 * s;
        }
    }
}

/// A user-supplied drift field.
pub trait DriftField: Send + Sync {
    fn name(&self) -> String;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// d×d Jacobian; central differences unless overridden.
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        central_jacobian(|y, o| self.eval(y, o), x, x.len(), out);
    }
}

/// Drift b of the forward equation dX = b(X)dt + σ(X)dW.
#[derive(Clone, Default)]
pub enum Drift {
    #[default]
    Zero,
    /// The Stratonovich-to-Itô correction of the vector fields.
    ItoCorrection,
    Custom(Arc<dyn DriftField>),
}

impl std::fmt::Debug for Drift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Drift::Zero => write!(f, "zero"),
            Drift::ItoCorrection => write!(f, "ito-correction"),
            Drift::Custom(c) => write!(f, "{}", c.name()),
        }
    }
}

impl Drift {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "zero" => Ok(Drift::Zero),
            "ito-correction" | "ito" => Ok(Drift::ItoCorrection),
            other => Err(Error::UnknownStrategy {
                kind: "drift",
                name: other.into(),
                known: "zero, ito-correction".into(),
            }),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Drift::Zero)
    }

    pub fn eval(&self, vfs: &dyn VectorFieldSet, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => out.fill(0.0),
            Drift::ItoCorrection => ito_drift(vfs, x, out),
            Drift::Custom(b) => b.eval(x, out),
        }
    }

    pub fn jacobian(&self, vfs: &dyn VectorFieldSet, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => out.fill(0.0),
            Drift::ItoCorrection => central_jacobian(|y, o| ito_drift(vfs, y, o), x, x.len(), out),
            Drift::Custom(b) => b.jacobian(x, out),
        }
    }
}

const JAC_STEP: f64 = 1e-6;

pub(crate) fn central_jacobian(f: impl Fn(&[f64], &mut [f64]), x: &[f64], rows: usize, out: &mut [f64]) {
    let d = x.len();
    let mut y = x.to_vec();
    let mut up = vec![0.0; rows];
    let mut down = vec![0.0; rows];
    for k in 0..d {
        let h = JAC_STEP * (1.0 + x[k].abs());
        y[k] = x[k] + h;
        f(&y, &mut up);
        y[k] = x[k] - h;
        f(&y, &mut down);
        y[k] = x[k];
        for r in 0..rows {
            out[r * d + k] = (up[r] - down[r]) / (2.0 * h);
        }
    }
}

/// Constant diffusion matrix.
#[derive(Debug, Clone)]
pub struct ConstantFields {
    d: usize,
    m: usize,
    matrix: Vec<f64>,
}

impl ConstantFields {
    /// `matrix` is d×m row-major.
    pub fn new(d: usize, m: usize, matrix: Vec<f64>) -> Result<Self> {
        if d == 0 || m == 0 || matrix.len() != d * m {
            return Err(Error::InvalidParameter(format!(
                "constant fields need a {d}×{m} matrix, got {} entries",
                matrix.len()
            )));
        }
        Ok(Self { d, m, matrix })
    }

    pub fn scaled_identity(d: usize, scale: f64) -> Self {
        let mut matrix = vec![0.0; d * d];
        for i in 0..d {
            matrix[i * d + i] = scale;
        }
        Self { d, m: d, matrix }
    }
}

impl VectorFieldSet for ConstantFields {
    fn name(&self) -> String {
        "constant".into()
    }
    fn dim_state(&self) -> usize {
        self.d
    }
    fn dim_noise(&self) -> usize {
        self.m
    }
    fn sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.matrix);
    }
    fn jac_sigma(&self, _l: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn jac_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// σ_l = e_{axes[l]} in R^d.
#[derive(Debug, Clone)]
pub struct CoordinateFields {
    d: usize,
    axes: Vec<usize>,
}

impl CoordinateFields {
    pub fn new(d: usize, axes: Vec<usize>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|&k| k >= d) {
            return Err(Error::InvalidParameter(format!("axes {axes:?} invalid in dimension {d}")));
        }
        Ok(Self { d, axes })
    }
}

impl VectorFieldSet for CoordinateFields {
    fn name(&self) -> String {
        format!("coordinate{:?}", self.axes)
    }
    fn dim_state(&self) -> usize {
        self.d
    }
    fn dim_noise(&self) -> usize {
        self.axes.len()
    }
    fn sigma(&self, _x: &[f64], out: &mut [f64]) {
        let m = self.axes.len();
        out.fill(0.0);
        for (l, &k) in self.axes.iter().enumerate() {
            out[k * m + l] = 1.0;
        }
    }
    fn jac_sigma(&self, _l: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn jac_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// d = m = 1, σ(x) = scale·x. With the Itô-corrected drift this is the
/// geometric Brownian motion X = x₀·exp(scale·W).
#[derive(Debug, Clone)]
pub struct LinearField {
    scale: f64,
}

impl LinearField {
    pub fn new(scale: f64) -> Self {
        Self { scale }
    }
}

impl VectorFieldSet for LinearField {
    fn name(&self) -> String {
        format!("linear({})", self.scale)
    }
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.scale * x[0];
    }
    fn jac_sigma(&self, _l: usize, _x: &[f64], out: &mut [f64]) {
        out[0] = self.scale;
    }
    fn jac_bound(&self) -> Option<f64> {
        Some(self.scale.abs())
    }
}

/// d = m = 1, σ(x) = scale·sin x.
#[derive(Debug, Clone)]
pub struct SineField {
    scale: f64,
}

impl SineField {
    pub fn new(scale: f64) -> Self {
        Self { scale }
    }
}

impl VectorFieldSet for SineField {
    fn name(&self) -> String {
        format!("sine({})", self.scale)
    }
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.scale * x[0].sin();
    }
    fn jac_sigma(&self, _l: usize, x: &[f64], out: &mut [f64]) {
        out[0] = self.scale * x[0].cos();
    }
    fn jac_bound(&self) -> Option<f64> {
        Some(self.scale.abs())
    }
}

/// σ₁ = (1, 0), σ₂ = (0, x₁) in R²: degenerate at x₁ = 0 but with
/// [σ₁, σ₂] = (0, 1) spanning the missing direction.
#[derive(Debug, Clone, Default)]
pub struct HeisenbergFields;

impl VectorFieldSet for HeisenbergFields {
    fn name(&self) -> String {
        "heisenberg".into()
    }
    fn dim_state(&self) -> usize {
        2
    }
    fn dim_noise(&self) -> usize {
        2
    }
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        // rows are coordinates, columns fields
        out[0] = 1.0;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = x[0];
    }
    fn jac_sigma(&self, l: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if l == 1 {
            out[2] = 1.0; // ∂₁σ₂²
        }
    }
    fn jac_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// Fields with the same columns in a different order.
pub struct Relabeled {
    inner: Arc<dyn VectorFieldSet>,
    order: Vec<usize>,
}

impl Relabeled {
    pub fn new(inner: Arc<dyn VectorFieldSet>, order: Vec<usize>) -> Result<Self> {
        let m = inner.dim_noise();
        let mut seen = vec![false; m];
        if order.len() != m || order.iter().any(|&k| k >= m || std::mem::replace(&mut seen[k], true)) {
            return Err(Error::InvalidParameter(format!("{order:?} is not a permutation of 0..{m}")));
        }
        Ok(Self { inner, order })
    }
}

impl VectorFieldSet for Relabeled {
    fn name(&self) -> String {
        format!("{}{:?}", self.inner.name(), self.order)
    }
    fn dim_state(&self) -> usize {
        self.inner.dim_state()
    }
    fn dim_noise(&self) -> usize {
        self.inner.dim_noise()
    }
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        let (d, m) = (self.dim_state(), self.dim_noise());
        let mut tmp = vec![0.0; d * m];
        self.inner.sigma(x, &mut tmp);
        for i in 0..d {
            for (l, &k) in self.order.iter().enumerate() {
                out[i * m + l] = tmp[i * m + k];
            }
        }
    }
    fn jac_sigma(&self, l: usize, x: &[f64], out: &mut [f64]) {
        self.inner.jac_sigma(self.order[l], x, out);
    }
    fn smooth(&self) -> bool {
        self.inner.smooth()
    }
    fn jac_bound(&self) -> Option<f64> {
        self.inner.jac_bound()
    }
}

/// Built-in vector-field sets.
pub fn field_registry() -> Registry<dyn VectorFieldSet> {
    let mut reg: Registry<dyn VectorFieldSet> = Registry::new("vector fields");
    reg.register("constant", "σ = scale·I (dim) or an explicit d×m 'matrix'", |p| {
        let d = p.usize_or("dim", 1)?;
        if p.contains("matrix") {
            let m = p.usize_or("noise_dim", d)?;
            let matrix = p.list_or("matrix", &[])?;
            Ok(Box::new(ConstantFields::new(d, m, matrix)?))
        } else {
            Ok(Box::new(ConstantFields::scaled_identity(d, p.f64_or("scale", 1.0)?)))
        }
    });
    reg.register("coordinate", "σ_l = e_k for k in 'axes' (0-based)", |p| {
        let d = p.usize_or("dim", 2)?;
        let axes = p
            .list_or("axes", &[0.0])?
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidParameter(format!("axis {v} is not an index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Box::new(CoordinateFields::new(d, axes)?))
    });
    reg.register("linear", "d = m = 1, σ(x) = scale·x", |p| {
        Ok(Box::new(LinearField::new(p.f64_or("scale", 1.0)?)))
    });
    reg.register("sine", "d = m = 1, σ(x) = scale·sin x", |p| {
        Ok(Box::new(SineField::new(p.f64_or("scale", 1.0)?)))
    });
    reg.register("heisenberg", "σ₁ = (1, 0), σ₂ = (0, x₁)", |_: &Params| Ok(Box::new(HeisenbergFields)));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ito_drift_examples() {
        let mut b = [0.0];
        ito_drift(&ConstantFields::scaled_identity(1, 2.0), &[0.3], &mut b);
        assert_eq!(b[0], 0.0);
        ito_drift(&LinearField::new(1.0), &[0.8], &mut b);
        assert_eq!(b[0], 0.4);
        let x: f64 = 1.1;
        ito_drift(&SineField::new(1.0), &[x], &mut b);
        assert!((b[0] - 0.5 * x.sin() * x.cos()).abs() < 1e-15);
        let mut b2 = [0.0; 2];
        ito_drift(&HeisenbergFields, &[0.4, -2.0], &mut b2);
        assert_eq!(b2, [0.0, 0.0]);
    }

    #[test]
    fn drift_jacobian_of_correction() {
        let mut j = [0.0];
        Drift::ItoCorrection.jacobian(&SineField::new(1.0), &[0.7], &mut j);
        // d/dx ½ sin x cos x = ½ cos 2x
        assert!((j[0] - 0.5 * (1.4f64).cos()).abs() < 1e-8);
    }

    #[test]
    fn registry_builds_fields() {
        let reg = field_registry();
        let h = reg.build("heisenberg", &Params::new()).unwrap();
        let mut s = [0.0; 4];
        h.sigma(&[3.0, 1.0], &mut s);
        assert_eq!(s, [1.0, 0.0, 0.0, 3.0]);
        let c = reg
            .build("coordinate", &Params::new().with("dim", 2usize).with("axes", vec![1.0]))
            .unwrap();
        let mut s = [0.0; 2];
        c.sigma(&[0.0, 0.0], &mut s);
        assert_eq!(s, [0.0, 1.0]);
        assert!(reg.build("coordinate", &Params::new().with("axes", vec![0.5])).is_err());
    }
}
