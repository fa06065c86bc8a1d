//! Multi-axis rotary embedding: the head dimension splits into three even
//! sub-bands rotated by the (t, h, w) position of each token. Text tokens
//! carry one scalar index replicated on all three axes, which reduces to 1D
//! rotary for them.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-token (cos, sin) tables of shape (n, head_dim/2), pair-ordered:
/// pairs 0..ds/2 rotate by the t axis, then h, then w (ds = head_dim/3).
pub fn rope_tables<E: Scalar>(
    positions: &[[usize; 3]],
    head_dim: usize,
    base: f64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if head_dim % 6 != 0 {
        return Err(Error::invalid(format!(
            "head_dim {head_dim} must be divisible by 6 (three axes x rotary pairs)"
        )));
    }
    let ds = head_dim / 3;
    let pairs_per_axis = ds / 2;
    let n = positions.len();
    let mut cos = vec![E::ZERO; n * head_dim / 2];
    let mut sin = vec![E::ZERO; n * head_dim / 2];
    for (r, p) in positions.iter().enumerate() {
        for axis in 0..3 {
            let pos = p[axis] as f64;
            for i in 0..pairs_per_axis {
                let theta = base.powf(-2.0 * i as f64 / ds as f64);
                let angle = pos * theta;
                let k = axis * pairs_per_axis + i;
                cos[r * head_dim / 2 + k] = E::from_f64(angle.cos());
                sin[r * head_dim / 2 + k] = E::from_f64(angle.sin());
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, head_dim / 2], cos)?,
        Tensor::from_vec(&[n, head_dim / 2], sin)?,
    ))
}

/// Rotate a (n, head_dim) query or key block by its token positions.
pub fn mm_rope_apply<E: Scalar>(
    q_or_k: &Var<E>,
    positions: &[[usize; 3]],
    base: f64,
) -> Result<Var<E>> {
    let shape = q_or_k.shape();
    if shape.len() != 2 || shape[0] != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "mm_rope_apply",
            lhs: shape.to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let (cos, sin) = rope_tables::<E>(positions, shape[1], base)?;
    q_or_k.rope_rotate(&cos, &sin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_positions_are_identity() {
        let mut rng = Rng::seed_from(50);
        let q = Tensor::<f64>::randn(&[3, 12], 1.0, &mut rng);
        let rot = mm_rope_apply(&Var::constant(q.clone()), &[[0, 0, 0]; 3], 100.0).unwrap();
        assert_eq!(rot.value().data(), q.data());
    }

    #[test]
    fn norm_preserved() {
        let mut rng = Rng::seed_from(51);
        let q = Tensor::<f64>::randn(&[1, 24], 1.0, &mut rng);
        let pos = [[7, 3, 5]];
        let rot = mm_rope_apply(&Var::constant(q.clone()), &pos, 100.0).unwrap();
        let n0: f64 = q.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = rot
            .value()
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((n0 - n1).abs() < 1e-6, "{n0} vs {n1}");
    }

    #[test]
    fn relative_offset_invariance_per_axis() {
        let mut rng = Rng::seed_from(52);
        let head_dim = 24;
        for axis in 0..3 {
            for trial in 0..20 {
                let q = Tensor::<f64>::randn(&[1, head_dim], 1.0, &mut rng);
                let k = Tensor::<f64>::randn(&[1, head_dim], 1.0, &mut rng);
                let delta = rng.below(6);
                let (p, p2) = (rng.below(10), rng.below(10));
                let mk = |base_pos: usize, d: usize| {
                    let mut pos = [3usize, 4, 5];
                    pos[axis] = base_pos + d;
                    [pos]
                };
                let qa = mm_rope_apply(&Var::constant(q.clone()), &mk(p, 0), 100.0).unwrap();
                let ka = mm_rope_apply(&Var::constant(k.clone()), &mk(p, delta), 100.0).unwrap();
                let qb = mm_rope_apply(&Var::constant(q.clone()), &mk(p2, 0), 100.0).unwrap();
                let kb = mm_rope_apply(&Var::constant(k.clone()), &mk(p2, delta), 100.0).unwrap();
                let da = dot(qa.value(), ka.value());
                let db = dot(qb.value(), kb.value());
                assert!(
                    (da - db).abs() < 1e-5,
                    "axis {axis} trial {trial}: {da} vs {db}"
                );
            }
        }
    }

    #[test]
    fn head_dim_not_divisible_by_six_rejected() {
        let q = Tensor::<f64>::zeros(&[1, 16]);
        assert!(mm_rope_apply(&Var::constant(q), &[[0, 0, 0]], 100.0).is_err());
    }
}
