use serde::Serialize;

use super::field::{strided, MasterFieldEstimate};
use crate::bsde::BsdeSolution;
use crate::error::{Error, Result};
use crate::forward::{malliavin_derivative, noise_bump_oracle, Drift, PathEnsemble, TangentFlow, VectorFieldSet};

/// Probe pairs (u, t) and the particles they are evaluated on.
#[derive(Debug, Clone)]
pub struct MalliavinProbes {
    pub pairs: Vec<(usize, usize)>,
    pub particles: usize,
    pub bump: f64,
}

impl MalliavinProbes {
    /// `count` pairs u < t spread deterministically over a grid of `steps`
    /// steps, plus one pair with t < u to exercise the zero rule.
    pub fn spread(steps: usize, count: usize) -> Self {
        let mut pairs = Vec::with_capacity(count + 1);
        let mut k = 0usize;
        while pairs.len() < count && steps >= 2 {
            // low-discrepancy walk over the triangle 0 ≤ u < t ≤ steps
            let a = (k as f64 * 0.618_033_988_7).fract();
            let b = (k as f64 * 0.754_877_666_2).fract();
            let t = 1 + (a * steps as f64) as usize;
            let u = (b * t as f64) as usize;
            if u < t && t <= steps && !pairs.contains(&(u, t)) {
                pairs.push((u, t));
            }
            k += 1;
            if k > 100 * count.max(1) {
                break;
            }
        }
        if steps >= 2 {
            pairs.push((steps, steps / 2));
        }
        Self {
            pairs,
            particles: 256,
            bump: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub u: usize,
    pub t: usize,
    pub formula_rms: f64,
    pub oracle_rms: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MalliavinReport {
    /// D_uY_t = ∇ₓu_t(X_t)·J_t J_u⁻¹σ(X_u) against the same-noise bump.
    pub probes: Vec<ProbeResult>,
    pub median_rel_error: f64,
    /// (t, rel error of D_tY_t against Z_t).
    pub diagonal: Vec<(usize, f64)>,
    pub median_diagonal_rel_error: f64,
    /// Formula values for t < u were exactly zero.
    pub zero_rule_ok: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn rel(err2: f64, ref2: f64) -> f64 {
    if ref2 == 0.0 {
        if err2 == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (err2 / ref2).sqrt()
    }
}

/// D_uY_t through the tangent flow versus the noise-bump oracle
/// (u_t(X_t[ΔW_u + h]) − u_t(X_t))/h, and D_tY_t = ∇ₓu_t·σ versus Z_t.
#[allow(clippy::too_many_arguments)]
pub fn check_malliavin_representations(
    sol: &BsdeSolution,
    tf: &TangentFlow,
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    paths: &PathEnsemble,
    mf: &MasterFieldEstimate,
    probes: &MalliavinProbes,
) -> Result<MalliavinReport> {
    let (d, m, steps) = (paths.dim(), paths.noise_dim(), paths.steps());
    if sol.particles() != paths.particles() || sol.steps() != steps || mf.nodes() != steps + 1 {
        return Err(Error::ShapeMismatch("solution, field and paths differ".into()));
    }
    let idx = strided(paths.particles(), probes.particles);
    let h = probes.bump;
    let mut results = Vec::new();
    let mut zero_rule_ok = true;
    for &(u, t) in &probes.pairs {
        if u > steps || t > steps {
            return Err(Error::invalid(format!("probe (u={u}, t={t}) outside the grid")));
        }
        let dx = malliavin_derivative(tf, vfs, paths, u, t)?;
        if t < u {
            zero_rule_ok &= dx.iter().all(|&v| v == 0.0);
            results.push(ProbeResult {
                u,
                t,
                formula_rms: 0.0,
                oracle_rms: 0.0,
                rel_error: 0.0,
            });
            continue;
        }
        let bumps = noise_bump_oracle(vfs, drift, paths, &idx, u, t, h)?;
        let (mut e2, mut o2, mut f2) = (0.0, 0.0, 0.0);
        for (j, &i) in idx.iter().enumerate() {
            let x = paths.state(i, t);
            let grad = mf.gradient(t, x);
            let base = mf.value(t, x);
            let col = &bumps[j * d * m..(j + 1) * d * m];
            for l in 0..m {
                let formula: f64 = (0..d).map(|k| grad[k] * dx[i * d * m + k * m + l]).sum();
                let bumped: Vec<f64> = (0..d).map(|k| x[k] + h * col[k * m + l]).collect();
                let oracle = (mf.value(t, &bumped) - base) / h;
                e2 += (formula - oracle).powi(2);
                o2 += oracle * oracle;
                f2 += formula * formula;
            }
        }
        let k = (idx.len() * m) as f64;
        results.push(ProbeResult {
            u,
            t,
            formula_rms: (f2 / k).sqrt(),
            oracle_rms: (o2 / k).sqrt(),
            rel_error: rel(e2, o2),
        });
    }

    let mut ts: Vec<usize> = probes.pairs.iter().map(|&(_, t)| t).filter(|&t| t < steps).collect();
    ts.sort_unstable();
    ts.dedup();
    let mut diagonal = Vec::with_capacity(ts.len());
    for t in ts {
        let dx = malliavin_derivative(tf, vfs, paths, t, t)?;
        let (mut e2, mut z2) = (0.0, 0.0);
        for &i in &idx {
            let grad = mf.gradient(t, paths.state(i, t));
            for (l, z) in sol.z(i, t).iter().enumerate() {
                let dy: f64 = (0..d).map(|k| grad[k] * dx[i * d * m + k * m + l]).sum();
                e2 += (dy - z).powi(2);
                z2 += z * z;
            }
        }
        diagonal.push((t, rel(e2, z2)));
    }

    Ok(MalliavinReport {
        median_rel_error: median(results.iter().filter(|r| r.u < r.t).map(|r| r.rel_error).collect()),
        median_diagonal_rel_error: median(diagonal.iter().map(|&(_, e)| e).collect()),
        probes: results,
        diagonal,
        zero_rule_ok,
    })
}
