//! Rank of the Lie algebra generated by σ₁, …, σ_m at a point.

use serde::Serialize;

use super::VectorFieldSet;
use crate::error::{Error, Result};
use crate::linalg::singular_values;

pub const MAX_DEPTH: usize = 4;
/// Step of the central differences used for brackets of depth ≥ 2.
pub const BRACKET_STEP: f64 = 1e-4;
/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct HormanderReport {
    pub rank: usize,
    pub depth: usize,
    pub dim: usize,
    /// Bracket words such as "[1,[1,2]]" (fields are 1-based).
    pub labels: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
}

impl HormanderReport {
    pub fn full_rank(&self) -> bool {
        self.rank == self.dim
    }
}

/// A bracket word evaluated as a vector field.
#[derive(Clone)]
enum Word {
    Field(usize),
    Bracket(usize, Box<Word>),
}

impl Word {
    fn label(&self) -> String {
        match self {
            Word::Field(l) => format!("{}", l + 1),
            Word::Bracket(l, w) => format!("[{},{}]", l + 1, w.label()),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Word::Field(_) => 0,
            Word::Bracket(_, w) => 1 + w.depth(),
        }
    }

    fn eval(&self, vfs: &dyn VectorFieldSet, x: &[f64]) -> Vec<f64> {
        let (d, m) = (vfs.dim_state(), vfs.dim_noise());
        match self {
            Word::Field(l) => column(vfs, *l, x, d, m),
            Word::Bracket(l, inner) => {
                let sl = column(vfs, *l, x, d, m);
                let mut jl = vec![0.0; d * d];
                vfs.jac_sigma(*l, x, &mut jl);
                let y = inner.eval(vfs, x);
                let jy = match inner.as_ref() {
                    Word::Field(k) => {
                        let mut j = vec![0.0; d * d];
                        vfs.jac_sigma(*k, x, &mut j);
                        j
                    }
                    w => fd_jacobian(|p| w.eval(vfs, p), x, d),
                };
                // [X, Y]ⁱ = Σⱼ Xʲ∂ⱼYⁱ − Yʲ∂ⱼXⁱ
                (0..d)
                    .map(|i| (0..d).map(|j| sl[j] * jy[i * d + j] - y[j] * jl[i * d + j]).sum())
                    .collect()
            }
        }
    }
}

fn column(vfs: &dyn VectorFieldSet, l: usize, x: &[f64], d: usize, m: usize) -> Vec<f64> {
    let mut sig = vec![0.0; d * m];
    vfs.sigma(x, &mut sig);
    (0..d).map(|i| sig[i * m + l]).collect()
}

fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    let mut y = x.to_vec();
    for k in 0..d {
        y[k] = x[k] + BRACKET_STEP;
        let up = f(&y);
        y[k] = x[k] - BRACKET_STEP;
        let down = f(&y);
        y[k] = x[k];
        for i in 0..d {
            out[i * d + k] = (up[i] - down[i]) / (2.0 * BRACKET_STEP);
        }
    }
    out
}

/// Stacks σ_l(x) and all left-nested brackets [σ_{l1}, [σ_{l2}, … σ_{lk}]]
/// up to `depth` and counts singular values above the relative tolerance.
/// Left-nested words span the whole generated Lie algebra up to that depth.
pub fn hormander_rank(vfs: &dyn VectorFieldSet, x: &[f64], depth: usize) -> Result<HormanderReport> {
    let (d, m) = (vfs.dim_state(), vfs.dim_noise());
    if x.len() != d {
        return Err(Error::ShapeMismatch(format!("point of dimension {} for fields in R^{d}", x.len())));
    }
    if depth > MAX_DEPTH {
        return Err(Error::DepthUnsupported {
            depth,
            reason: format!("nested differences are limited to depth {MAX_DEPTH}"),
        });
    }
    if depth >= 2 && !vfs.smooth() {
        return Err(Error::DepthUnsupported {
            depth,
            reason: format!("fields '{}' lack the derivatives of order {depth}", vfs.name()),
        });
    }
    let mut words: Vec<Word> = (0..m).map(Word::Field).collect();
    let mut frontier = words.clone();
    for _ in 0..depth {
        let mut next = Vec::new();
        for w in &frontier {
            for l in 0..m {
                // [σ_l, σ_l] ≡ 0
                if matches!(w, Word::Field(k) if *k == l) {
                    continue;
                }
                next.push(Word::Bracket(l, Box::new(w.clone())));
            }
        }
        words.extend(next.iter().cloned());
        frontier = next;
    }
    let vectors: Vec<Vec<f64>> = words.iter().map(|w| w.eval(vfs, x)).collect();
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::EvaluatorFailure {
            point: format!("bracket vectors at {x:?}"),
        });
    }
    let mut mat = Vec::with_capacity(vectors.len() * d);
    for v in &vectors {
        mat.extend_from_slice(v);
    }
    let sv = singular_values(&mat, vectors.len(), d);
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = if smax == 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > RANK_TOLERANCE * smax).count()
    };
    debug_assert!(words.iter().all(|w| w.depth() <= depth));
    Ok(HormanderReport {
        rank,
        depth,
        dim: d,
        labels: words.iter().map(Word::label).collect(),
        vectors,
        singular_values: sv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{CoordinateFields, HeisenbergFields, Relabeled};
    use std::sync::Arc;

    #[test]
    fn heisenberg_needs_one_bracket() {
        let h = HeisenbergFields;
        assert_eq!(hormander_rank(&h, &[0.0, 0.0], 0).unwrap().rank, 1);
        let r1 = hormander_rank(&h, &[0.0, 0.0], 1).unwrap();
        assert_eq!(r1.rank, 2);
        let idx = r1.labels.iter().position(|l| l == "[2,1]").unwrap();
        // [σ₂, σ₁] = −[σ₁, σ₂] = (0, −1)
        assert_eq!(r1.vectors[idx], vec![0.0, -1.0]);
        assert_eq!(hormander_rank(&h, &[0.0, 0.0], 3).unwrap().rank, 2);
    }

    #[test]
    fn coordinate_controls() {
        let full = CoordinateFields::new(2, vec![0, 1]).unwrap();
        assert_eq!(hormander_rank(&full, &[0.3, 0.1], 0).unwrap().rank, 2);
        let single = CoordinateFields::new(2, vec![0]).unwrap();
        for depth in 0..=4 {
            assert_eq!(hormander_rank(&single, &[0.3, 0.1], depth).unwrap().rank, 1);
        }
        assert!(matches!(
            hormander_rank(&single, &[0.0, 0.0], 5),
            Err(Error::DepthUnsupported { .. })
        ));
    }

    #[test]
    fn rank_ignores_field_order() {
        let h: Arc<dyn VectorFieldSet> = Arc::new(HeisenbergFields);
        let swapped = Relabeled::new(h.clone(), vec![1, 0]).unwrap();
        for depth in 0..3 {
            assert_eq!(
                hormander_rank(h.as_ref(), &[0.0, 0.0], depth).unwrap().rank,
                hormander_rank(&swapped, &[0.0, 0.0], depth).unwrap().rank
            );
        }
    }

    #[test]
    fn rough_fields_stop_at_depth_one() {
        struct Kink;
        impl VectorFieldSet for Kink {
            fn name(&self) -> String {
                "kink".into()
            }
            fn dim_state(&self) -> usize {
                1
            }
            fn dim_noise(&self) -> usize {
                1
            }
            fn sigma(&self, x: &[f64], out: &mut [f64]) {
                out[0] = 1.0 + x[0].abs();
            }
            fn jac_sigma(&self, _l: usize, x: &[f64], out: &mut [f64]) {
                out[0] = x[0].signum();
            }
            fn smooth(&self) -> bool {
                false
            }
        }
        assert_eq!(hormander_rank(&Kink, &[0.5], 1).unwrap().rank, 1);
        assert!(matches!(hormander_rank(&Kink, &[0.5], 2), Err(Error::DepthUnsupported { .. })));
    }
}
