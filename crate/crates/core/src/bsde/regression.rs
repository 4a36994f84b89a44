//! Least-squares conditional expectations on a per-node feature map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::reduce;
use crate::registry::{Params, Registry};

pub const DEFAULT_RIDGE: f64 = 1e-8;
/// Coordinates whose spread falls below this are treated as constant.
const DEGENERATE_SPREAD: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e14;
/// Largest state dimension supported by the built-in bases.
pub const MAX_ACTIVE: usize = 16;

/// A family of feature maps; `prepare` adapts it to the cloud at one node.
pub trait RegressionBasis: Send + Sync {
    fn name(&self) -> String;
    fn ridge(&self) -> f64;
    fn prepare(&self, points: &[f64], dim: usize) -> Result<Arc<dyn FeatureMap>>;
}

/// Features φ_j(x) with analytic first and second derivatives; φ_0 ≡ 1.
pub trait FeatureMap: Send + Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// out[j·d + k] = ∂_k φ_j.
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// out[(j·d + k)·d + l] = ∂_k∂_l φ_j.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// Per-coordinate centring and scaling; degenerate coordinates are dropped.
#[derive(Debug, Clone)]
struct Standardizer {
    dim: usize,
    active: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn new(points: &[f64], dim: usize) -> Result<Self> {
        if dim > MAX_ACTIVE {
            return Err(Error::invalid(format!("regression bases support at most {MAX_ACTIVE} dimensions")));
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::invalid("regression on an empty node"));
        }
        let mut active = Vec::new();
        let mut mean = Vec::new();
        let mut scale = Vec::new();
        for k in 0..dim {
            let mu = reduce::sum(n, |i| points[i * dim + k]) / n as f64;
            let var = reduce::sum(n, |i| (points[i * dim + k] - mu).powi(2)) / n as f64;
            let sd = var.sqrt();
            if !sd.is_finite() {
                return Err(Error::NonFinite { particle: 0, step: 0 });
            }
            if sd > DEGENERATE_SPREAD * (1.0 + mu.abs()) {
                active.push(k);
                mean.push(mu);
                scale.push(sd);
            }
        }
        Ok(Self {
            dim,
            active,
            mean,
            scale,
        })
    }

    /// Standardized active coordinates in a stack buffer (≤ 16 coordinates).
    fn standardized(&self, x: &[f64]) -> ([f64; MAX_ACTIVE], usize) {
        let mut s = [0.0; MAX_ACTIVE];
        self.apply(x, &mut s[..self.active.len()]);
        (s, self.active.len())
    }

    fn apply(&self, x: &[f64], s: &mut [f64]) {
        for (j, &k) in self.active.iter().enumerate() {
            s[j] = (x[k] - self.mean[j]) / self.scale[j];
        }
    }
}

/// Monomials of total degree ≤ `degree` in the standardized coordinates.
#[derive(Debug, Clone)]
pub struct PolynomialBasis {
    pub degree: usize,
    pub ridge: f64,
}

impl PolynomialBasis {
    pub fn new(degree: usize) -> Self {
        Self {
            degree,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl RegressionBasis for PolynomialBasis {
    fn name(&self) -> String {
        format!("polynomial degree {}", self.degree)
    }
    fn ridge(&self) -> f64 {
        self.ridge
    }
    fn prepare(&self, points: &[f64], dim: usize) -> Result<Arc<dyn FeatureMap>> {
        let std = Standardizer::new(points, dim)?;
        let exponents = monomials(std.active.len(), self.degree);
        Ok(Arc::new(PolynomialFeatures { std, exponents }))
    }
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    let mut last = out.clone();
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &last {
            // extend only at or after the last nonzero exponent to avoid repeats
            let start = e.iter().rposition(|&p| p > 0).unwrap_or(0);
            for k in start..vars {
                let mut f = e.clone();
                f[k] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        last = next;
    }
    out
}

struct PolynomialFeatures {
    std: Standardizer,
    exponents: Vec<Vec<u32>>,
}

fn pow(s: f64, p: i64) -> f64 {
    if p < 0 {
        0.0
    } else {
        s.powi(p as i32)
    }
}

impl FeatureMap for PolynomialFeatures {
    fn len(&self) -> usize {
        self.exponents.len()
    }
    fn dim(&self) -> usize {
        self.std.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let (s, a) = self.std.standardized(x);
        let s = &s[..a];
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(s).map(|(&p, &v)| v.powi(p as i32)).product();
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.std.dim;
        let mut s = vec![0.0; self.std.active.len()];
        self.std.apply(x, &mut s);
        out.fill(0.0);
        for (j, e) in self.exponents.iter().enumerate() {
            for (a, &k) in self.std.active.iter().enumerate() {
                if e[a] == 0 {
                    continue;
                }
                let mut v = e[a] as f64 * pow(s[a], e[a] as i64 - 1) / self.std.scale[a];
                for (b, &p) in e.iter().enumerate() {
                    if b != a {
                        v *= s[b].powi(p as i32);
                    }
                }
                out[j * d + k] = v;
            }
        }
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.std.dim;
        let act = &self.std.active;
        let mut s = vec![0.0; act.len()];
        self.std.apply(x, &mut s);
        out.fill(0.0);
        for (j, e) in self.exponents.iter().enumerate() {
            for a in 0..act.len() {
                for b in 0..act.len() {
                    let mut v = 1.0;
                    for (c, &p) in e.iter().enumerate() {
                        let p = p as i64;
                        v *= if a == b && c == a {
                            (p * (p - 1)) as f64 * pow(s[c], p - 2)
                        } else if c == a || c == b {
                            p as f64 * pow(s[c], p - 1)
                        } else {
                            pow(s[c], p)
                        };
                    }
                    out[(j * d + act[a]) * d + act[b]] = v / (self.std.scale[a] * self.std.scale[b]);
                }
            }
        }
    }
}

/// Affine terms plus Gaussian bumps at strided ensemble points, in
/// standardized coordinates.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub centers: usize,
    pub bandwidth: f64,
    pub ridge: f64,
}

impl KernelBasis {
    pub fn new(centers: usize, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::BandwidthInvalid(bandwidth));
        }
        Ok(Self {
            centers,
            bandwidth,
            ridge: DEFAULT_RIDGE,
        })
    }
}

impl RegressionBasis for KernelBasis {
    fn name(&self) -> String {
        format!("local kernel ({} centers, bandwidth {})", self.centers, self.bandwidth)
    }
    fn ridge(&self) -> f64 {
        self.ridge
    }
    fn prepare(&self, points: &[f64], dim: usize) -> Result<Arc<dyn FeatureMap>> {
        let std = Standardizer::new(points, dim)?;
        let n = points.len() / dim;
        let a = std.active.len();
        let mut centers = Vec::new();
        if a > 0 {
            let k = self.centers.min(n);
            let mut s = vec![0.0; a];
            for j in 0..k {
                std.apply(&points[(j * n / k) * dim..][..dim], &mut s);
                centers.push(s.clone());
            }
        }
        Ok(Arc::new(KernelFeatures {
            std,
            centers,
            h2: self.bandwidth * self.bandwidth,
        }))
    }
}

struct KernelFeatures {
    std: Standardizer,
    centers: Vec<Vec<f64>>,
    h2: f64,
}

impl FeatureMap for KernelFeatures {
    fn len(&self) -> usize {
        1 + self.std.active.len() + self.centers.len()
    }
    fn dim(&self) -> usize {
        self.std.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let (s, a) = self.std.standardized(x);
        let s = &s[..a];
        out[0] = 1.0;
        out[1..1 + a].copy_from_slice(s);
        for (o, c) in out[1 + a..].iter_mut().zip(&self.centers) {
            let r2: f64 = s.iter().zip(c).map(|(u, v)| (u - v) * (u - v)).sum();
            *o = (-0.5 * r2 / self.h2).exp();
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.std.dim;
        let act = &self.std.active;
        let mut s = vec![0.0; act.len()];
        self.std.apply(x, &mut s);
        out.fill(0.0);
        for (a, &k) in act.iter().enumerate() {
            out[(1 + a) * d + k] = 1.0 / self.std.scale[a];
        }
        for (c, center) in self.centers.iter().enumerate() {
            let j = 1 + act.len() + c;
            let r2: f64 = s.iter().zip(center).map(|(u, v)| (u - v) * (u - v)).sum();
            let phi = (-0.5 * r2 / self.h2).exp();
            for (a, &k) in act.iter().enumerate() {
                out[j * d + k] = -phi * (s[a] - center[a]) / self.h2 / self.std.scale[a];
            }
        }
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = self.std.dim;
        let act = &self.std.active;
        let mut s = vec![0.0; act.len()];
        self.std.apply(x, &mut s);
        out.fill(0.0);
        for (c, center) in self.centers.iter().enumerate() {
            let j = 1 + act.len() + c;
            let r2: f64 = s.iter().zip(center).map(|(u, v)| (u - v) * (u - v)).sum();
            let phi = (-0.5 * r2 / self.h2).exp();
            for a in 0..act.len() {
                for b in 0..act.len() {
                    let da = (s[a] - center[a]) / self.h2;
                    let db = (s[b] - center[b]) / self.h2;
                    let delta = if a == b { 1.0 / self.h2 } else { 0.0 };
                    out[(j * d + act[a]) * d + act[b]] =
                        phi * (da * db - delta) / (self.std.scale[a] * self.std.scale[b]);
                }
            }
        }
    }
}

pub fn basis_registry() -> Registry<dyn RegressionBasis> {
    let mut reg: Registry<dyn RegressionBasis> = Registry::new("regression basis");
    reg.register("polynomial", "monomials up to total `degree` (default 2)", |p| {
        let mut b = PolynomialBasis::new(p.usize_or("degree", 2)?);
        b.ridge = ridge(p)?;
        Ok(Box::new(b))
    });
    reg.register(
        "local-kernel",
        "affine terms plus `centers` Gaussian bumps of width `bandwidth` (standardized units)",
        |p| {
            let mut b = KernelBasis::new(p.usize_or("centers", 16)?, p.f64_or("bandwidth", 1.0)?)?;
            b.ridge = ridge(p)?;
            Ok(Box::new(b))
        },
    );
    reg
}

fn ridge(p: &Params) -> Result<f64> {
    let r = p.f64_or("ridge", DEFAULT_RIDGE)?;
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(format!("ridge must be ≥ 0, got {r}")));
    }
    Ok(r)
}

/// A fitted regression with `responses` outputs.
#[derive(Clone)]
pub struct Fit {
    map: Arc<dyn FeatureMap>,
    /// coef[j·responses + r]
    coef: Vec<f64>,
    responses: usize,
    /// RMS of target minus fit, per response.
    pub residuals: Vec<f64>,
    /// Fitted values at the training points, n × responses.
    pub fitted: Vec<f64>,
}

impl std::fmt::Debug for Fit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fit")
            .field("features", &self.map.len())
            .field("responses", &self.responses)
            .field("residuals", &self.residuals)
            .finish()
    }
}

impl Fit {
    pub fn features(&self) -> usize {
        self.map.len()
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn predict(&self, x: &[f64], out: &mut [f64]) {
        let mut buf = [0.0; 64];
        let mut heap = Vec::new();
        let phi = if self.map.len() <= buf.len() {
            &mut buf[..self.map.len()]
        } else {
            heap.resize(self.map.len(), 0.0);
            &mut heap[..]
        };
        self.map.eval(x, phi);
        out.fill(0.0);
        for (j, p) in phi.iter().enumerate() {
            for (r, o) in out.iter_mut().enumerate() {
                *o += p * self.coef[j * self.responses + r];
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut out = vec![0.0; self.responses];
        self.predict(x, &mut out);
        out[0]
    }

    /// ∇ₓ of response `r`.
    pub fn gradient(&self, x: &[f64], r: usize) -> Vec<f64> {
        let d = self.map.dim();
        let mut g = vec![0.0; self.map.len() * d];
        self.map.gradient(x, &mut g);
        let mut out = vec![0.0; d];
        for j in 0..self.map.len() {
            let c = self.coef[j * self.responses + r];
            for k in 0..d {
                out[k] += c * g[j * d + k];
            }
        }
        out
    }

    /// ∇²ₓ of response `r`, row-major d×d.
    pub fn hessian(&self, x: &[f64], r: usize) -> Vec<f64> {
        let d = self.map.dim();
        let mut h = vec![0.0; self.map.len() * d * d];
        self.map.hessian(x, &mut h);
        let mut out = vec![0.0; d * d];
        for j in 0..self.map.len() {
            let c = self.coef[j * self.responses + r];
            for (o, v) in out.iter_mut().zip(&h[j * d * d..(j + 1) * d * d]) {
                *o += c * v;
            }
        }
        out
    }
}

/// Ridge least squares of `targets` (n × responses, row-major) on the
/// features of `points` (n × dim). `step` labels errors.
pub fn fit(
    basis: &dyn RegressionBasis,
    points: &[f64],
    dim: usize,
    targets: &[f64],
    responses: usize,
    step: usize,
) -> Result<Fit> {
    let map = basis.prepare(points, dim)?;
    fit_with_map(map, basis.ridge(), points, dim, targets, responses, step)
}

pub fn fit_with_map(
    map: Arc<dyn FeatureMap>,
    ridge: f64,
    points: &[f64],
    dim: usize,
    targets: &[f64],
    responses: usize,
    step: usize,
) -> Result<Fit> {
    let n = points.len() / dim;
    if targets.len() != n * responses {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {n} points × {responses} responses",
            targets.len()
        )));
    }
    let p = map.len();
    let mut phi = vec![0.0; n * p];
    phi.par_chunks_mut(reduce::CHUNK * p).enumerate().for_each(|(c, rows)| {
        for (r, row) in rows.chunks_mut(p).enumerate() {
            let i = c * reduce::CHUNK + r;
            map.eval(&points[i * dim..(i + 1) * dim], row);
        }
    });
    let stats = reduce::sum_vec(n, p * p + p * responses, |i, acc| {
        let row = &phi[i * p..(i + 1) * p];
        let y = &targets[i * responses..(i + 1) * responses];
        for a in 0..p {
            for b in a..p {
                acc[a * p + b] += row[a] * row[b];
            }
            for r in 0..responses {
                acc[p * p + a * responses + r] += row[a] * y[r];
            }
        }
    });
    let inv_n = 1.0 / n as f64;
    let mut gram = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let v = stats[a * p + b] * inv_n;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        // the intercept is not penalized, so constants are fitted exactly
        if a > 0 {
            gram[(a, a)] += ridge;
        }
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::RegressionSingular { step });
    }
    let eig = symmetric_eigenvalues(gram.as_slice(), p);
    let (lo, hi) = (eig[0], eig[p - 1]);
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::RegressionSingular { step });
    }
    let chol = gram.cholesky().ok_or(Error::RegressionSingular { step })?;
    let mut coef = vec![0.0; p * responses];
    for r in 0..responses {
        let rhs = DVector::from_fn(p, |a, _| stats[p * p + a * responses + r] * inv_n);
        let sol = chol.solve(&rhs);
        for a in 0..p {
            coef[a * responses + r] = sol[a];
        }
    }
    let mut fitted = vec![0.0; n * responses];
    fitted.par_chunks_mut(responses).enumerate().for_each(|(i, f)| {
        let row = &phi[i * p..(i + 1) * p];
        for (r, v) in f.iter_mut().enumerate() {
            *v = (0..p).map(|a| row[a] * coef[a * responses + r]).sum();
        }
    });
    let sq = reduce::sum_vec(n, responses, |i, acc| {
        for r in 0..responses {
            acc[r] += (targets[i * responses + r] - fitted[i * responses + r]).powi(2);
        }
    });
    Ok(Fit {
        map,
        coef,
        responses,
        residuals: sq.iter().map(|s| (s * inv_n).sqrt()).collect(),
        fitted,
    })
}
