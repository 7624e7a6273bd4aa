//! Small dense linear-algebra helpers shared by the geometry modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Condition number above which a Jacobian is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Componentwise `v - floor(v)`, the canonical representative in `[0,1)^n`.
pub fn reduce_mod_one(v: &Vector) -> Vector {
    v.map(|c| {
        let r = c - c.floor();
        // c slightly below an integer can round up to exactly 1.0
        if r >= 1.0 {
            0.0
        } else {
            r
        }
    })
}

/// Nearest-integer residual in `[-1/2, 1/2]` per component.
pub fn wrap_centered(v: &Vector) -> Vector {
    v.map(|c| c - c.round())
}

pub fn torus_distance(a: &Vector, b: &Vector) -> f64 {
    wrap_centered(&(a - b)).norm()
}

pub fn singular_values(m: &Matrix) -> Vector {
    m.clone().svd(false, false).singular_values
}

/// Smallest singular value.
pub fn conorm(m: &Matrix) -> f64 {
    singular_values(m).min()
}

pub fn condition(m: &Matrix) -> f64 {
    let s = singular_values(m);
    let lo = s.min();
    if lo == 0.0 {
        f64::INFINITY
    } else {
        s.max() / lo
    }
}

/// Inverse with a conditioning check.
pub fn checked_inverse(m: &Matrix) -> Result<Matrix> {
    let cond = condition(m);
    if !(cond <= SINGULAR_CONDITION) {
        return Err(Error::SingularJacobian { condition: cond });
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::SingularJacobian { condition: cond })
}

pub fn checked_solve(m: &Matrix, rhs: &Vector) -> Result<Vector> {
    let cond = condition(m);
    if !(cond <= SINGULAR_CONDITION) {
        return Err(Error::SingularJacobian { condition: cond });
    }
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or(Error::SingularJacobian { condition: cond })
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_factor(gram: &Matrix) -> Result<Matrix> {
    gram.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::SingularJacobian {
            condition: f64::INFINITY,
        })
}

/// Smallest stretch `min |A v|_{target} / |v|_{source}` of a linear map between
/// inner-product spaces given by their Gram matrices.
///
/// With `source = L Lᵀ` and `target = L' L'ᵀ` this is the smallest singular
/// value of `L'ᵀ A L⁻ᵀ`, equivalently the square root of the smallest
/// generalized eigenvalue of `Aᵀ target A w = λ source w`.
pub fn generalized_conorm(a: &Matrix, source: &Matrix, target: &Matrix) -> Result<f64> {
    let l_src = cholesky_factor(source)?;
    let l_tgt = cholesky_factor(target)?;
    let l_src_inv_t = l_src
        .transpose()
        .try_inverse()
        .ok_or(Error::SingularJacobian {
            condition: f64::INFINITY,
        })?;
    let b = l_tgt.transpose() * a * l_src_inv_t;
    Ok(conorm(&b))
}

/// `sqrt(vᵀ G v)`.
pub fn gram_norm(gram: &Matrix, v: &Vector) -> f64 {
    gram_inner(gram, v, v).max(0.0).sqrt()
}

pub fn gram_inner(gram: &Matrix, u: &Vector, v: &Vector) -> f64 {
    u.dot(&(gram * v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_lands_in_unit_cube() {
        let v = Vector::from_vec(vec![2.1, -0.25, -1e-18, 3.0]);
        let r = reduce_mod_one(&v);
        assert!((r[0] - 0.1).abs() < 1e-12);
        assert_eq!(r[1], 0.75);
        assert!(r[2] < 1.0 && r[2] >= 0.0);
        assert_eq!(r[3], 0.0);
    }

    #[test]
    fn generalized_conorm_of_identity_between_equal_grams_is_one() {
        let g = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let c = generalized_conorm(&Matrix::identity(2, 2), &g, &g).unwrap();
        assert!((c - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            checked_inverse(&m),
            Err(Error::SingularJacobian { .. })
        ));
    }
}
