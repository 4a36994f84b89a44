use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::bsde::{fit, BsdeSolution, Fit, RegressionBasis};
use crate::error::{Error, Result};
use crate::forward::{PathEnsemble, TimeGrid, VectorFieldSet};
use crate::measure::LawFlow;
use crate::reduce;

/// u_n(x) ≈ u(t_n, x, μ_{t_n}) on every node, as regressions of Y on X.
#[derive(Clone)]
pub struct MasterFieldEstimate {
    grid: TimeGrid,
    dim: usize,
    fits: Vec<Fit>,
    scale: f64,
    basis: String,
    flow: LawFlow,
    /// RMS fit residual per node.
    pub residuals: Vec<f64>,
}

impl MasterFieldEstimate {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn nodes(&self) -> usize {
        self.fits.len()
    }
    pub fn basis_name(&self) -> &str {
        &self.basis
    }
    /// The flow μ_{t_n} the field is restricted to.
    pub fn flow(&self) -> &LawFlow {
        &self.flow
    }

    /// Replaces the associated flow (e.g. by the tilted equilibrium flow).
    pub fn with_flow(mut self, flow: LawFlow) -> Result<Self> {
        if flow.len() != self.nodes() || flow.dim() != self.dim {
            return Err(Error::ShapeMismatch("flow does not match the field".into()));
        }
        self.flow = flow;
        Ok(self)
    }

    /// c·u, for plug-in comparisons.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale *= c;
        out
    }

    pub fn value(&self, n: usize, x: &[f64]) -> f64 {
        self.scale * self.fits[n].value(x)
    }

    pub fn gradient(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let mut g = self.fits[n].gradient(x, 0);
        g.iter_mut().for_each(|v| *v *= self.scale);
        g
    }

    /// d×d row-major.
    pub fn hessian(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let mut h = self.fits[n].hessian(x, 0);
        h.iter_mut().for_each(|v| *v *= self.scale);
        h
    }

    /// Fit residual at the terminal node, where u_N should reproduce g.
    pub fn terminal_defect(&self) -> f64 {
        self.residuals[self.nodes() - 1]
    }

    /// `node,t,x0..,u,du0..` at the given points (k×d) on every node.
    pub fn write_csv(&self, path: &Path, points: &[f64]) -> Result<()> {
        let d = self.dim;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let xs: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
        let ds: Vec<String> = (0..d).map(|k| format!("du{k}")).collect();
        writeln!(f, "node,t,{},u,{}", xs.join(","), ds.join(","))?;
        for n in 0..self.nodes() {
            for x in points.chunks(d) {
                let g = self.gradient(n, x);
                let row: Vec<String> = x
                    .iter()
                    .map(|v| format!("{v}"))
                    .chain([format!("{}", self.value(n, x))])
                    .chain(g.iter().map(|v| format!("{v}")))
                    .collect();
                writeln!(f, "{n},{},{}", self.grid.time(n), row.join(","))?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

impl std::fmt::Debug for MasterFieldEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MasterFieldEstimate")
            .field("nodes", &self.nodes())
            .field("basis", &self.basis)
            .field("scale", &self.scale)
            .finish()
    }
}

/// Regresses Y_n on the features of X_n at every node. The associated flow
/// is the uniform law of the ensemble; see [`MasterFieldEstimate::with_flow`].
pub fn estimate_master_field(
    sol: &BsdeSolution,
    paths: &PathEnsemble,
    basis: &dyn RegressionBasis,
) -> Result<MasterFieldEstimate> {
    if sol.particles() != paths.particles() || sol.steps() != paths.steps() {
        return Err(Error::ShapeMismatch("solution and paths differ".into()));
    }
    let d = paths.dim();
    let mut fits = Vec::with_capacity(sol.steps() + 1);
    for n in 0..=sol.steps() {
        fits.push(fit(basis, &paths.node_points(n), d, sol.y_node(n), 1, n)?);
    }
    Ok(MasterFieldEstimate {
        grid: *paths.grid(),
        dim: d,
        residuals: fits.iter().map(|f| f.residuals[0]).collect(),
        fits,
        scale: 1.0,
        basis: basis.name(),
        flow: paths.law_flow(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ZRepresentationReport {
    /// rms|Z − ∇ₓu·σ| / (rms|Z| + ε) per node 0..N−1.
    pub rel_l2_error: Vec<f64>,
    pub max_rel_error: f64,
}

const REL_EPS: f64 = 1e-12;

/// Compares the backward Z with ∇ₓu_n(X)·σ(X) node by node.
pub fn check_z_representation(
    sol: &BsdeSolution,
    mf: &MasterFieldEstimate,
    vfs: &dyn VectorFieldSet,
    paths: &PathEnsemble,
) -> Result<ZRepresentationReport> {
    let (d, m, p) = (paths.dim(), paths.noise_dim(), paths.particles());
    if sol.particles() != p || mf.nodes() != sol.steps() + 1 || vfs.dim_state() != d || vfs.dim_noise() != m {
        return Err(Error::ShapeMismatch("solution, field and paths differ".into()));
    }
    let rel: Vec<f64> = (0..sol.steps())
        .map(|n| {
            let s = reduce::sum_vec(p, 2, |i, acc| {
                let x = paths.state(i, n);
                let g = mf.gradient(n, x);
                let mut sig = vec![0.0; d * m];
                vfs.sigma(x, &mut sig);
                for (l, z) in sol.z(i, n).iter().enumerate() {
                    let rep: f64 = (0..d).map(|k| g[k] * sig[k * m + l]).sum();
                    acc[0] += (z - rep).powi(2);
                    acc[1] += z * z;
                }
            });
            s[0].sqrt() / (s[1].sqrt() + REL_EPS)
        })
        .collect();
    Ok(ZRepresentationReport {
        max_rel_error: rel.iter().cloned().fold(0.0, f64::max),
        rel_l2_error: rel,
    })
}

/// Strided subset of `count` indices out of `n`.
pub(crate) fn strided(n: usize, count: usize) -> Vec<usize> {
    let k = count.clamp(1, n.max(1));
    (0..k).map(|j| j * n / k).collect()
}
