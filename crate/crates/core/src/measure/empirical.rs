use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

/// Weighted particle measure on R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
    /// Cached first moment; measure-dependent costs query it per particle.
    mean: Vec<f64>,
}

fn first_moment(points: &[f64], weights: &[f64], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for (x, w) in points.chunks_exact(dim).zip(weights) {
        for (mk, xk) in m.iter_mut().zip(x) {
            *mk += w * xk;
        }
    }
    m
}

impl EmpiricalMeasure {
    /// Equal weights on `points` (row-major, `dim` coordinates per particle).
    pub fn uniform(points: Vec<f64>, dim: usize) -> Result<Self> {
        let n = check_points(&points, dim)?;
        let weights = vec![1.0 / n as f64; n];
        Ok(Self {
            dim,
            mean: first_moment(&points, &weights, dim),
            points,
            weights,
            uniform: true,
        })
    }

    /// Weights are normalized to sum to one; they must be finite and non-negative.
    pub fn weighted(points: Vec<f64>, weights: Vec<f64>, dim: usize) -> Result<Self> {
        let n = check_points(&points, dim)?;
        if weights.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {n} points",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        let weights: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
        let first = weights[0];
        let uniform = weights.iter().all(|w| (w - first).abs() <= WEIGHT_TOL);
        Ok(Self {
            dim,
            mean: first_moment(&points, &weights, dim),
            points,
            weights,
            uniform,
        })
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self {
            dim: point.len(),
            points: point.to_vec(),
            weights: vec![1.0],
            uniform: true,
            mean: point.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.clone()
    }

    pub fn second_moment(&self) -> f64 {
        self.iter()
            .map(|(x, w)| w * x.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Per-coordinate standard deviation averaged over coordinates.
    pub fn spread(&self) -> f64 {
        let m = self.mean();
        let var: f64 = self
            .iter()
            .map(|(x, w)| {
                w * x
                    .iter()
                    .zip(&m)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        (var / self.dim as f64).sqrt()
    }

    /// Copy with particle `i` moved by `delta`.
    pub fn shifted(&self, i: usize, delta: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, d) in out.points[i * self.dim..(i + 1) * self.dim]
            .iter_mut()
            .zip(delta)
        {
            *p += d;
        }
        out.mean = first_moment(&out.points, &out.weights, self.dim);
        out
    }

    /// Same support, new weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        Self::weighted(self.points.clone(), weights, self.dim)
    }

    /// CSV with header `weight,x0,..`; floats use shortest round-trip formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "weight")?;
        for k in 0..self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for (x, w) in self.iter() {
            write!(out, "{w}")?;
            for v in x {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_points(points: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::invalid("measure dimension must be positive"));
    }
    if points.is_empty() || points.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} coordinates do not form points of dimension {dim}",
            points.len()
        )));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("measure support contains non-finite points"));
    }
    Ok(points.len() / dim)
}

/// One measure per time-grid node.
#[derive(Debug, Clone)]
pub struct LawFlow {
    measures: Vec<EmpiricalMeasure>,
}

#[derive(Debug, Serialize)]
struct FlowManifest {
    nodes: usize,
    dim: usize,
    particles: usize,
    files: Vec<String>,
}

impl LawFlow {
    pub fn new(measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        let Some(first) = measures.first() else {
            return Err(Error::invalid("law flow needs at least one node"));
        };
        let d = first.dim();
        if measures.iter().any(|m| m.dim() != d) {
            return Err(Error::ShapeMismatch(
                "law flow nodes have differing dimensions".into(),
            ));
        }
        Ok(Self { measures })
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    pub fn at(&self, node: usize) -> &EmpiricalMeasure {
        &self.measures[node]
    }

    pub fn measures(&self) -> &[EmpiricalMeasure] {
        &self.measures
    }

    pub fn into_measures(self) -> Vec<EmpiricalMeasure> {
        self.measures
    }

    /// `node_XXXXX.csv` per node plus `manifest.json` inside `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.len());
        for (n, m) in self.measures.iter().enumerate() {
            let name = format!("node_{n:05}.csv");
            m.write_csv(&dir.join(&name))?;
            files.push(name);
        }
        let manifest = FlowManifest {
            nodes: self.len(),
            dim: self.dim(),
            particles: self.measures[0].len(),
            files: files.clone(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        files.push("manifest.json".into());
        Ok(files)
    }
}
