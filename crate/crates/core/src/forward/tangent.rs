//! First variation ∇ₓX along stored paths and the Malliavin derivative.

use rayon::prelude::*;

use super::paths::{euler_step, replay_path, EulerScratch};
use super::{Drift, PathEnsemble, VectorFieldSet};
use crate::error::{Error, Result};
use crate::linalg::{frobenius, identity, inverse, matmul};

/// Condition number above which the flow is declared singular.
pub const MAX_CONDITION: f64 = 1e12;
/// The running inverse is recomputed from J every this many steps.
pub const REINVERT_EVERY: usize = 16;

#[derive(Debug, Clone, Default)]
pub enum Retention {
    #[default]
    All,
    /// Keep only these nodes (node 0 and N are always available).
    Nodes(Vec<usize>),
}

/// J = ∇ₓX and its inverse at the retained nodes of every particle.
#[derive(Debug, Clone)]
pub struct TangentFlow {
    dim: usize,
    particles: usize,
    nodes: Vec<usize>,
    j: Vec<f64>,
    jinv: Vec<f64>,
    /// max over particles and steps of |J|_F·|J⁻¹|_F
    pub max_condition: f64,
    /// max over retained nodes of |J·J⁻¹ − I|_∞
    pub max_identity_defect: f64,
}

impl TangentFlow {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn retained_nodes(&self) -> &[usize] {
        &self.nodes
    }

    fn slot(&self, n: usize) -> Result<usize> {
        self.nodes
            .binary_search(&n)
            .map_err(|_| Error::invalid(format!("tangent flow did not retain node {n}")))
    }

    fn offset(&self, i: usize, n: usize) -> Result<usize> {
        let s = self.slot(n)?;
        Ok((i * self.nodes.len() + s) * self.dim * self.dim)
    }

    /// ∇ₓX at node n for particle i (d×d row-major).
    pub fn jacobian(&self, i: usize, n: usize) -> Result<&[f64]> {
        let o = self.offset(i, n)?;
        Ok(&self.j[o..o + self.dim * self.dim])
    }

    pub fn inverse(&self, i: usize, n: usize) -> Result<&[f64]> {
        let o = self.offset(i, n)?;
        Ok(&self.jinv[o..o + self.dim * self.dim])
    }
}

/// Solves J_{n+1} = (I + ∇b(X_n)dt + Σ_l ∇σ_l(X_n)ΔW_nˡ) J_n, J_0 = I, on
/// the stored increments. J⁻¹ is propagated by exact inverses of the step
/// factors and refreshed from J every [`REINVERT_EVERY`] steps.
pub fn tangent_flow(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    paths: &PathEnsemble,
    retention: &Retention,
) -> Result<TangentFlow> {
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    if paths.dim() != d || paths.noise_dim() != m {
        return Err(Error::ShapeMismatch("paths do not match the vector fields".into()));
    }
    let steps = paths.steps();
    let mut nodes = match retention {
        Retention::All => (0..=steps).collect(),
        Retention::Nodes(v) => {
            if v.iter().any(|&n| n > steps) {
                return Err(Error::invalid(format!("retained nodes exceed {steps}")));
            }
            let mut v = v.clone();
            v.extend([0, steps]);
            v
        }
    };
    nodes.sort_unstable();
    nodes.dedup();
    let dd = d * d;
    let per = nodes.len() * dd;
    let np = paths.particles();
    let mut j_all = vec![0.0; np * per];
    let mut jinv_all = vec![0.0; np * per];
    let dt = paths.grid().dt();

    let results: Vec<Result<(f64, f64)>> = j_all
        .par_chunks_mut(per)
        .zip(jinv_all.par_chunks_mut(per))
        .enumerate()
        .map(|(i, (jout, iout))| {
            let mut j = identity(d);
            let mut jinv = identity(d);
            let mut factor = vec![0.0; dd];
            let mut tmp = vec![0.0; dd];
            let mut jac = vec![0.0; dd];
            let mut max_cond: f64 = 1.0;
            let mut max_defect: f64 = 0.0;
            let mut next_slot = 0;
            let mut store = |n: usize, j: &[f64], jinv: &[f64], slot: &mut usize, defect: &mut f64| {
                if *slot < nodes.len() && nodes[*slot] == n {
                    jout[*slot * dd..(*slot + 1) * dd].copy_from_slice(j);
                    iout[*slot * dd..(*slot + 1) * dd].copy_from_slice(jinv);
                    let mut prod = vec![0.0; dd];
                    matmul(j, jinv, d, d, d, &mut prod);
                    for r in 0..d {
                        for c in 0..d {
                            let e = prod[r * d + c] - if r == c { 1.0 } else { 0.0 };
                            *defect = defect.max(e.abs());
                        }
                    }
                    *slot += 1;
                }
            };
            store(0, &j, &jinv, &mut next_slot, &mut max_defect);
            for n in 0..steps {
                let x = paths.state(i, n);
                let dw = paths.increment(i, n);
                drift.jacobian(vfs, x, &mut factor);
                for v in factor.iter_mut() {
                    *v *= dt;
                }
                for (l, w) in dw.iter().enumerate() {
                    vfs.jac_sigma(l, x, &mut jac);
                    for (f, g) in factor.iter_mut().zip(&jac) {
                        *f += g * w;
                    }
                }
                for k in 0..d {
                    factor[k * d + k] += 1.0;
                }
                let singular = |cond: f64| Error::SingularFlow {
                    particle: i,
                    step: n + 1,
                    condition: cond,
                };
                let finv = inverse(&factor, d).ok_or_else(|| singular(f64::INFINITY))?;
                matmul(&factor, &j, d, d, d, &mut tmp);
                j.copy_from_slice(&tmp);
                if (n + 1) % REINVERT_EVERY == 0 {
                    jinv = inverse(&j, d).ok_or_else(|| singular(f64::INFINITY))?;
                } else {
                    matmul(&jinv, &finv, d, d, d, &mut tmp);
                    jinv.copy_from_slice(&tmp);
                }
                let cond = frobenius(&j) * frobenius(&jinv);
                if !(cond <= MAX_CONDITION) {
                    return Err(singular(cond));
                }
                max_cond = max_cond.max(cond);
                store(n + 1, &j, &jinv, &mut next_slot, &mut max_defect);
            }
            Ok((max_cond, max_defect))
        })
        .collect();
    let mut max_condition: f64 = 1.0;
    let mut max_identity_defect: f64 = 0.0;
    for r in results {
        let (c, e) = r?;
        max_condition = max_condition.max(c);
        max_identity_defect = max_identity_defect.max(e);
    }
    Ok(TangentFlow {
        dim: d,
        particles: np,
        nodes,
        j: j_all,
        jinv: jinv_all,
        max_condition,
        max_identity_defect,
    })
}

/// D_uX_t = J_t J_u⁻¹ σ(X_u) for every particle (d×m each, concatenated);
/// identically zero when t < u.
pub fn malliavin_derivative(
    tf: &TangentFlow,
    vfs: &dyn VectorFieldSet,
    paths: &PathEnsemble,
    u: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    let np = paths.particles();
    if tf.particles() != np || tf.dim() != d {
        return Err(Error::ShapeMismatch("tangent flow does not match the paths".into()));
    }
    let mut out = vec![0.0; np * d * m];
    if t < u {
        return Ok(out);
    }
    tf.slot(u)?;
    tf.slot(t)?;
    out.par_chunks_mut(d * m).enumerate().try_for_each(|(i, o)| -> Result<()> {
        let mut prop = vec![0.0; d * d];
        let mut sig = vec![0.0; d * m];
        matmul(tf.jacobian(i, t)?, tf.inverse(i, u)?, d, d, d, &mut prop);
        vfs.sigma(paths.state(i, u), &mut sig);
        matmul(&prop, &sig, d, d, m, o);
        Ok(())
    })?;
    Ok(out)
}

/// Same-noise difference quotient of X_t with respect to the Brownian
/// increment of step u: for each listed particle a d×m matrix whose column l
/// is (X_t[ΔW_u + h e_l] − X_t)/h. Zero for t ≤ u.
pub fn noise_bump_oracle(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    paths: &PathEnsemble,
    particles: &[usize],
    u: usize,
    t: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    if !(h > 0.0) {
        return Err(Error::invalid("bump size must be positive"));
    }
    if t > paths.steps() {
        return Err(Error::invalid(format!("probe (u={u}, t={t}) outside the grid")));
    }
    let dt = paths.grid().dt();
    let mut out = vec![0.0; particles.len() * d * m];
    if t <= u {
        return Ok(out);
    }
    out.par_chunks_mut(d * m).zip(particles.par_iter()).try_for_each(|(o, &i)| -> Result<()> {
        if i >= paths.particles() {
            return Err(Error::invalid(format!("particle {i} out of range")));
        }
        let base = paths.state(i, t);
        let mut s = EulerScratch::new(d, m);
        let mut x = vec![0.0; d];
        let mut next = vec![0.0; d];
        for l in 0..m {
            let mut dw = paths.increment(i, u).to_vec();
            dw[l] += h;
            euler_step(vfs, drift, paths.state(i, u), &dw, dt, &mut x, &mut s);
            for n in u + 1..t {
                euler_step(vfs, drift, &x, paths.increment(i, n), dt, &mut next, &mut s);
                std::mem::swap(&mut x, &mut next);
            }
            for k in 0..d {
                o[k * m + l] = (x[k] - base[k]) / h;
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// The ensemble re-run from X_0 + delta on the same increments.
pub fn shifted_start(
    vfs: &dyn VectorFieldSet,
    drift: &Drift,
    paths: &PathEnsemble,
    delta: &[f64],
) -> Result<PathEnsemble> {
    let d = paths.dim();
    if delta.len() != d {
        return Err(Error::ShapeMismatch("shift has the wrong dimension".into()));
    }
    let per = paths.grid().nodes() * d;
    let mut states = vec![0.0; paths.particles() * per];
    let dt = paths.grid().dt();
    let failures: Vec<(usize, usize)> = states
        .par_chunks_mut(per)
        .enumerate()
        .filter_map(|(i, out)| {
            let x0: Vec<f64> = paths.state(i, 0).iter().zip(delta).map(|(a, b)| a + b).collect();
            replay_path(vfs, drift, &x0, paths.path_increments(i), dt, out).map(|n| (i, n))
        })
        .collect();
    if let Some(&(particle, step)) = failures.first() {
        return Err(Error::NonFinite { particle, step });
    }
    PathEnsemble::from_parts(d, paths.noise_dim(), *paths.grid(), states, paths.increments().to_vec(), paths.seed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_forward, ConstantFields, HeisenbergFields, InitialLaw, LinearField, TimeGrid};

    #[test]
    fn constant_fields_have_identity_flow() {
        let vfs = ConstantFields::scaled_identity(2, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let p = simulate_forward(&vfs, &Drift::Zero, &InitialLaw::Point(vec![0.0, 1.0]), g, 8, 4).unwrap();
        let tf = tangent_flow(&vfs, &Drift::Zero, &p, &Retention::All).unwrap();
        for i in 0..8 {
            for n in [0, 17, 40] {
                assert_eq!(tf.jacobian(i, n).unwrap(), &identity(2)[..]);
            }
        }
        let dm = malliavin_derivative(&tf, &vfs, &p, 5, 30).unwrap();
        assert_eq!(&dm[..4], &[1.0, 0.0, 0.0, 1.0]);
        let zero = malliavin_derivative(&tf, &vfs, &p, 30, 5).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_flow_is_state_over_start() {
        let vfs = LinearField::new(1.0);
        let g = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let p = simulate_forward(&vfs, &Drift::ItoCorrection, &InitialLaw::Point(vec![2.0]), g, 16, 1).unwrap();
        let tf = tangent_flow(&vfs, &Drift::ItoCorrection, &p, &Retention::Nodes(vec![100])).unwrap();
        for i in 0..16 {
            for n in [100, 200] {
                let j = tf.jacobian(i, n).unwrap()[0];
                // Euler of a linear SDE is linear in x0, so J = X/x0 up to rounding
                assert!((j - p.state(i, n)[0] / 2.0).abs() < 1e-9 * j.abs().max(1.0));
            }
        }
        assert!(tf.max_identity_defect < 1e-12);
        assert!(tf.jacobian(0, 50).is_err());
    }

    #[test]
    fn tangent_matches_common_noise_difference() {
        let vfs = HeisenbergFields;
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let p = simulate_forward(&vfs, &Drift::Zero, &InitialLaw::Point(vec![0.3, -0.2]), g, 10, 8).unwrap();
        let tf = tangent_flow(&vfs, &Drift::Zero, &p, &Retention::All).unwrap();
        let h = 1e-6;
        let bumped = shifted_start(&vfs, &Drift::Zero, &p, &[h, 0.0]).unwrap();
        for i in 0..10 {
            let j = tf.jacobian(i, 100).unwrap();
            for k in 0..2 {
                let fd = (bumped.state(i, 100)[k] - p.state(i, 100)[k]) / h;
                assert!((fd - j[k * 2]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn malliavin_equals_sigma_on_diagonal() {
        let vfs = LinearField::new(1.0);
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let p = simulate_forward(&vfs, &Drift::ItoCorrection, &InitialLaw::Point(vec![1.0]), g, 4, 2).unwrap();
        let tf = tangent_flow(&vfs, &Drift::ItoCorrection, &p, &Retention::All).unwrap();
        let dm = malliavin_derivative(&tf, &vfs, &p, 37, 37).unwrap();
        for i in 0..4 {
            assert!((dm[i] - p.state(i, 37)[0]).abs() < 1e-12);
        }
        let bump = noise_bump_oracle(&vfs, &Drift::ItoCorrection, &p, &[0, 1], 37, 37, 1e-4).unwrap();
        assert_eq!(bump, vec![0.0, 0.0]);
    }
}
