//! Terminal costs g(x, μ) of the backward equation.

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::measure::EmpiricalMeasure;
use crate::registry::{Params, Registry};

pub trait TerminalCost: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64;
    fn grad_x(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    fn depends_on_measure(&self) -> bool {
        true
    }

    /// ∂_μ g(x, μ)(v).
    fn dmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::MissingEvaluator(format!("∂_μ of terminal cost '{}'", self.name())))
    }
}

/// g ≡ c.
#[derive(Debug, Clone)]
pub struct ConstantTerminal {
    pub dim: usize,
    pub value: f64,
}

impl TerminalCost for ConstantTerminal {
    fn name(&self) -> String {
        format!("constant {}", self.value)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &[f64], _mu: &EmpiricalMeasure) -> f64 {
        self.value
    }
    fn grad_x(&self, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn dmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// g = w·x.
#[derive(Debug, Clone)]
pub struct LinearTerminal {
    pub coefficients: Vec<f64>,
}

impl TerminalCost for LinearTerminal {
    fn name(&self) -> String {
        format!("linear {:?}", self.coefficients)
    }
    fn dim(&self) -> usize {
        self.coefficients.len()
    }
    fn value(&self, x: &[f64], _mu: &EmpiricalMeasure) -> f64 {
        dot(&self.coefficients, x)
    }
    fn grad_x(&self, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.copy_from_slice(&self.coefficients);
    }
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn dmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// g = s·|x|².
#[derive(Debug, Clone)]
pub struct SquareTerminal {
    pub dim: usize,
    pub scale: f64,
}

impl TerminalCost for SquareTerminal {
    fn name(&self) -> String {
        format!("{}·|x|²", self.scale)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64], _mu: &EmpiricalMeasure) -> f64 {
        self.scale * dot(x, x)
    }
    fn grad_x(&self, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 2.0 * self.scale * xi;
        }
    }
    fn depends_on_measure(&self) -> bool {
        false
    }
    fn dmu(&self, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// g = s·x·mean(μ). Monotone in the Lasry–Lions sense for s ≥ 0:
/// ∫(g(·,μ) − g(·,μ'))d(μ − μ') = s|mean μ − mean μ'|².
#[derive(Debug, Clone)]
pub struct MeanCoupledTerminal {
    pub dim: usize,
    pub scale: f64,
}

impl TerminalCost for MeanCoupledTerminal {
    fn name(&self) -> String {
        format!("{}·x·mean(μ)", self.scale)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        self.scale * dot(x, &mu.mean())
    }
    fn grad_x(&self, _x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(mu.mean()) {
            *o = self.scale * m;
        }
    }
    fn dmu(&self, x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.scale * xi;
        }
        Ok(())
    }
}

pub fn terminal_registry() -> Registry<dyn TerminalCost> {
    let mut reg: Registry<dyn TerminalCost> = Registry::new("terminal cost");
    reg.register("constant", "g ≡ value", |p| {
        Ok(Box::new(ConstantTerminal {
            dim: dim(p)?,
            value: p.f64_or("value", 0.0)?,
        }))
    });
    reg.register("linear", "g = coefficients·x (default x₁)", |p| {
        let d = dim(p)?;
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        let coefficients = p.list_or("coefficients", &e1)?;
        if coefficients.len() != d {
            return Err(Error::InvalidParameter(format!(
                "{} coefficients for dimension {d}",
                coefficients.len()
            )));
        }
        Ok(Box::new(LinearTerminal { coefficients }))
    });
    reg.register("square", "g = scale·|x|²", |p| {
        Ok(Box::new(SquareTerminal {
            dim: dim(p)?,
            scale: p.f64_or("scale", 1.0)?,
        }))
    });
    reg.register("mean-coupled", "g = scale·x·mean(μ)", |p| {
        Ok(Box::new(MeanCoupledTerminal {
            dim: dim(p)?,
            scale: p.f64_or("scale", 1.0)?,
        }))
    });
    reg
}

fn dim(p: &Params) -> Result<usize> {
    match p.usize_or("dim", 1)? {
        0 => Err(Error::InvalidParameter("dim must be positive".into())),
        d => Ok(d),
    }
}
